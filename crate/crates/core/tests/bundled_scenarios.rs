//! The scenario files shipped in `scenarios/` must stay in lockstep with the
//! built-in constructors. Run the ignored `regenerate` test after changing a
//! constructor:
//!
//! ```text
//! cargo test -p chainslam --test bundled_scenarios -- --ignored regenerate
//! ```

use std::path::PathBuf;

use chainslam::scenario::{golden, Scenario};

const NAMES: [&str; 4] = ["fixed5", "fixed20", "free20", "consistency5"];

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn bundled_files_match_constructors() {
    for name in NAMES {
        let path = scenario_dir().join(format!("{name}.toml"));
        let from_file = Scenario::from_path(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(from_file, golden(name).unwrap(), "{name} file is out of date");
    }
}

#[test]
#[ignore = "maintenance helper: rewrites scenarios/*.toml"]
fn regenerate() {
    for name in NAMES {
        let path = scenario_dir().join(format!("{name}.toml"));
        std::fs::write(&path, golden(name).unwrap().to_toml()).unwrap();
    }
}
