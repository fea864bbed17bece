//! Run loop: simulate -> estimate -> log, plus the kinematics-only baseline
//! and file outputs.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::chain::{ChainGeometry, JointReading, LinkState, RootState, LINK_DIM, ROOT_DIM};
use crate::estimator::{run_step, EstimatorError, PointBatch, StepEstimate, StepOptions};
use crate::metrics::{metrics, Metrics};
use crate::point_map::PointMap;
use crate::runlog::{write_csv, LogRow};
use crate::scenario::{RootMode, Scenario};
use crate::simulator::{raycast_sensors, read_encoders, step_truth};
use crate::so3::{exp_so3, log_so3, to_quaternion_xyzw};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("output error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log error: {0}")]
    Csv(#[from] csv::Error),
}

pub struct RunOutput {
    pub log: Vec<LogRow>,
    pub map: PointMap,
    pub metrics: Metrics,
}

/// Forward kinematics on raw (biased) encoder readings with zero bias
/// compensation. Returns the pose of every body, root first.
pub fn kinematics_baseline(
    readings: &[JointReading],
    geometry: &ChainGeometry,
    root_p: &Vector3<f64>,
    root_r: &Matrix3<f64>,
) -> Vec<(Vector3<f64>, Matrix3<f64>)> {
    let mut poses = Vec::with_capacity(geometry.body_count());
    poses.push((*root_p, *root_r));
    for (i, reading) in readings.iter().enumerate() {
        let (pp, pr) = poses[i];
        let p = pp + pr * geometry.link_offsets[i];
        let r = pr * exp_so3(&(reading.axis * reading.angle));
        poses.push((p, r));
    }
    poses
}

fn initial_estimate(scenario: &Scenario) -> StepEstimate {
    let n = scenario.chain.link_count;
    let (p0, r0) = scenario.motion_profile().root_pose_at(0.0);
    let root_cov = if scenario.root.mode == RootMode::Fixed {
        DMatrix::zeros(ROOT_DIM, ROOT_DIM)
    } else {
        let mut c = DMatrix::zeros(ROOT_DIM, ROOT_DIM);
        for i in 0..3 {
            c[(i, i)] = scenario.filter.init_root_pos_std_m.powi(2);
            c[(i + 3, i + 3)] = scenario.filter.init_root_rot_std_rad.powi(2);
        }
        c
    };
    // Link poses are re-derived spatially at the first step; only the bias
    // channel carries information in from here.
    let mut link_cov = DMatrix::zeros(LINK_DIM, LINK_DIM);
    link_cov[(6, 6)] = scenario.filter.init_bias_std_rad.powi(2);
    StepEstimate {
        root: RootState { p: p0, r: r0 },
        root_cov,
        links: vec![
            LinkState { p: Vector3::zeros(), r: Matrix3::identity(), b: 0.0 };
            n
        ],
        link_covs: vec![link_cov; n],
        iterations: vec![0; n + 1],
        valid_points: vec![0; n + 1],
    }
}

/// Execute a full scenario and collect the run log, final map, and metrics.
pub fn simulate_and_estimate(scenario: &Scenario) -> Result<RunOutput, RunError> {
    let geometry = scenario.geometry();
    geometry
        .validate()
        .unwrap_or_else(|e| panic!("scenario produced invalid geometry: {e}"));
    let spec = scenario.sensor_spec();
    let env = scenario.environment();
    let profile = scenario.motion_profile();
    let noise = scenario.noise_params();
    let update_cfg = scenario.update_config();
    let map_cfg = scenario.map_config();
    let biases = scenario.joint_biases();
    let steps = scenario.step_count();
    let dt = 1.0 / scenario.run.step_rate_hz;
    let fixed_root = scenario.root.mode == RootMode::Fixed;

    let mut map = PointMap::new(map_cfg.downsample_voxel);

    if scenario.run.preload_exact_map {
        let mut exact = spec;
        exact.noise_coeff = 0.0;
        for k in (0..steps).step_by(5) {
            let truth = step_truth(k as f64 * dt, &profile, &geometry, &biases);
            for body in 0..geometry.body_count() {
                let batch = raycast_sensors(
                    body,
                    &truth.positions[body],
                    &truth.rotations[body],
                    &geometry.sensor_poses[body],
                    &exact,
                    &env,
                    scenario.run.seed,
                    k as u64,
                );
                let world: Vec<Vector3<f64>> = batch
                    .points
                    .iter()
                    .map(|pt| {
                        crate::estimator::point_to_world(
                            &truth.positions[body],
                            &truth.rotations[body],
                            &geometry.sensor_poses[body][pt.sensor_index],
                            &pt.local_point,
                        )
                    })
                    .collect();
                map.insert(&world);
            }
        }
    }

    let mut estimate = initial_estimate(scenario);
    let mut log = Vec::with_capacity(steps * geometry.body_count());
    let baseline_root = scenario.motion_profile().root_pose_at(0.0);

    for k in 0..steps {
        let t = k as f64 * dt;
        let truth = step_truth(t, &profile, &geometry, &biases);
        let readings = read_encoders(&truth, &geometry);
        let batches: Vec<PointBatch> = (0..geometry.body_count())
            .map(|body| {
                raycast_sensors(
                    body,
                    &truth.positions[body],
                    &truth.rotations[body],
                    &geometry.sensor_poses[body],
                    &spec,
                    &env,
                    scenario.run.seed,
                    k as u64,
                )
            })
            .collect();

        estimate = run_step(
            &estimate,
            &readings,
            &batches,
            &mut map,
            &geometry,
            &noise,
            &update_cfg,
            &map_cfg,
            &StepOptions { fixed_root, step_index: k },
        )?;

        let baseline = kinematics_baseline(&readings, &geometry, &baseline_root.0, &baseline_root.1);

        for body in 0..geometry.body_count() {
            let (est_p, est_r, bias_est) = if body == 0 {
                (estimate.root.p, estimate.root.r, 0.0)
            } else {
                let l = &estimate.links[body - 1];
                (l.p, l.r, l.b)
            };
            let true_p = truth.positions[body];
            let true_r = truth.rotations[body];
            let q = to_quaternion_xyzw(&est_r);
            let tq = to_quaternion_xyzw(&true_r);
            log.push(LogRow {
                step: k,
                time_s: t,
                link: body,
                px: est_p.x,
                py: est_p.y,
                pz: est_p.z,
                qx: q[0],
                qy: q[1],
                qz: q[2],
                qw: q[3],
                true_px: true_p.x,
                true_py: true_p.y,
                true_pz: true_p.z,
                true_qx: tq[0],
                true_qy: tq[1],
                true_qz: tq[2],
                true_qw: tq[3],
                bias_est,
                bias_true: if body == 0 { 0.0 } else { truth.joint_biases[body - 1] },
                err_pos_m: (est_p - true_p).norm(),
                err_rot_rad: log_so3(&(true_r.transpose() * est_r)).norm(),
                base_err_pos_m: (baseline[body].0 - true_p).norm(),
            });
        }
    }

    let summary = metrics(&log);
    Ok(RunOutput { log, map, metrics: summary })
}

/// Run a scenario and write `run_log.csv`, `metrics.txt`, `map.txt`, and
/// `link_errors.csv` into `out_dir`.
pub fn run_to_dir(scenario: &Scenario, out_dir: &Path) -> Result<RunOutput, RunError> {
    let out = simulate_and_estimate(scenario)?;
    fs::create_dir_all(out_dir)?;

    let log_file = fs::File::create(out_dir.join("run_log.csv"))?;
    write_csv(&out.log, log_file)?;

    fs::write(out_dir.join("metrics.txt"), out.metrics.to_text())?;

    let mut map_file = fs::File::create(out_dir.join("map.txt"))?;
    out.map.export(&mut map_file)?;

    let mut table = String::from("link,mean_err_baseline_m,mean_err_filtered_m\n");
    for (i, (b, f)) in out
        .metrics
        .per_link_mean_err_baseline_m
        .iter()
        .zip(&out.metrics.per_link_mean_err_filtered_m)
        .enumerate()
    {
        table.push_str(&format!("{i},{b:.6},{f:.6}\n"));
    }
    fs::write(out_dir.join("link_errors.csv"), table)?;

    Ok(out)
}
