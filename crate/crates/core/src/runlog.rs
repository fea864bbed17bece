//! Per-step, per-body run log with a fixed CSV schema.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// One log row. Field order defines the CSV header. `link` 0 is the root;
/// its bias columns are zero. Quaternions are exported in x, y, z, w order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub time_s: f64,
    pub link: usize,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
    pub true_px: f64,
    pub true_py: f64,
    pub true_pz: f64,
    pub true_qx: f64,
    pub true_qy: f64,
    pub true_qz: f64,
    pub true_qw: f64,
    pub bias_est: f64,
    pub bias_true: f64,
    pub err_pos_m: f64,
    pub err_rot_rad: f64,
    pub base_err_pos_m: f64,
}

pub fn write_csv<W: Write>(rows: &[LogRow], sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(source: R) -> csv::Result<Vec<LogRow>> {
    csv::Reader::from_reader(source)
        .deserialize()
        .collect::<csv::Result<Vec<LogRow>>>()
}
