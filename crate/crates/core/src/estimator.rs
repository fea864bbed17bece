//! Measurement construction and the error-state iterated Kalman update, plus
//! the per-step orchestration over root and links.
//!
//! Each step runs root first, then every link in ascending order. A link's
//! prediction combines its parent's finalized same-step estimate (spatial
//! direction) with its own previous-step bias (temporal direction); after the
//! update the link's points are inserted into the map so later links in the
//! same step see them.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::chain::{
    link_transition_jacobians, predict_link, predict_root, propagate_link_cov,
    propagate_root_cov, root_transition_jacobians, symmetrize, ChainGeometry, JointReading,
    LinkState, NoiseParams, RootState, SensorPose, LINK_DIM, ROOT_DIM,
};
use crate::point_map::{MapConfig, PointMap};
use crate::so3::{exp_so3, log_so3, right_jacobian, right_jacobian_inv, skew};

/// One proximity measurement in its sensor's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorPoint {
    pub sensor_index: usize,
    pub local_point: Vector3<f64>,
}

/// One step's measurements for one body.
#[derive(Clone, Debug)]
pub struct PointBatch {
    pub link_index: usize,
    pub points: Vec<SensorPoint>,
}

/// Stacked point-to-plane residuals and their Jacobian rows at one iterate.
/// Rows with invalid plane fits are excluded.
#[derive(Clone, Debug)]
pub struct MeasurementSystem {
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub point_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct UpdateConfig {
    pub max_iterations: usize,
    pub convergence_eps: f64,
    /// Constant per-point measurement variance, m^2.
    pub r_point: f64,
    /// Updates with fewer surviving residual rows than this keep the prior.
    pub min_valid_points: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            max_iterations: 5,
            convergence_eps: 1e-3,
            r_point: 1e-4,
            min_valid_points: 10,
        }
    }
}

/// Finalized states and covariances of every body after one step.
#[derive(Clone, Debug)]
pub struct StepEstimate {
    pub root: RootState,
    pub root_cov: DMatrix<f64>,
    pub links: Vec<LinkState>,
    pub link_covs: Vec<DMatrix<f64>>,
    /// Update iteration count per body (root first).
    pub iterations: Vec<usize>,
    /// Surviving residual rows per body (root first).
    pub valid_points: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("degenerate update for body {link} at step {step}: update system is not solvable")]
    DegenerateUpdate { link: usize, step: usize },
}

/// Pose iterate with an optional bias channel; the update loop is identical
/// for the root (dim 6) and links (dim 7).
#[derive(Clone, Debug)]
pub struct BodyState {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub b: Option<f64>,
}

impl BodyState {
    pub fn from_root(s: &RootState) -> Self {
        BodyState { p: s.p, r: s.r, b: None }
    }

    pub fn from_link(s: &LinkState) -> Self {
        BodyState { p: s.p, r: s.r, b: Some(s.b) }
    }

    pub fn to_root(&self) -> RootState {
        RootState { p: self.p, r: self.r }
    }

    pub fn to_link(&self) -> LinkState {
        LinkState { p: self.p, r: self.r, b: self.b.expect("bias channel") }
    }

    pub fn dim(&self) -> usize {
        if self.b.is_some() { LINK_DIM } else { ROOT_DIM }
    }

    fn boxplus(&self, err: &DVector<f64>) -> BodyState {
        BodyState {
            p: self.p + Vector3::new(err[0], err[1], err[2]),
            r: self.r * exp_so3(&Vector3::new(err[3], err[4], err[5])),
            b: self.b.map(|b| b + err[6]),
        }
    }

    /// Error of `self` with respect to `reference`: [dp; Log(R_ref^T R); db].
    fn boxminus(&self, reference: &BodyState) -> DVector<f64> {
        let dp = self.p - reference.p;
        let dr = log_so3(&(reference.r.transpose() * self.r));
        let mut out = DVector::zeros(self.dim());
        for i in 0..3 {
            out[i] = dp[i];
            out[3 + i] = dr[i];
        }
        if let (Some(b), Some(br)) = (self.b, reference.b) {
            out[6] = b - br;
        }
        out
    }
}

/// Transform a sensor-local point into the world frame through the body pose.
pub fn point_to_world(
    state_p: &Vector3<f64>,
    state_r: &Matrix3<f64>,
    sensor: &SensorPose,
    local: &Vector3<f64>,
) -> Vector3<f64> {
    state_r * (sensor.orientation * local + sensor.position) + state_p
}

/// Build the stacked point-to-plane measurement system at the given iterate.
///
/// For each point: transform to the world frame, fit a local plane in the
/// map, and if the fit is valid emit residual `n . (w - q)` and Jacobian row
/// `[n^T, -n^T R [s]x, 0]` where `s` is the point in the link frame.
pub fn build_measurement(
    state: &BodyState,
    batch: &PointBatch,
    sensor_poses: &[SensorPose],
    map: &PointMap,
    map_cfg: &MapConfig,
) -> MeasurementSystem {
    let dim = state.dim();
    let mut rows: Vec<f64> = Vec::new();
    let mut residuals: Vec<f64> = Vec::new();
    for pt in &batch.points {
        let sensor = &sensor_poses[pt.sensor_index];
        let s = sensor.orientation * pt.local_point + sensor.position;
        let w = state.r * s + state.p;
        let fit = map.fit_plane(&w, map_cfg);
        if !fit.valid {
            continue;
        }
        let z = fit.normal.dot(&(w - fit.point));
        let drot = -(state.r * skew(&s)).transpose() * fit.normal;
        residuals.push(z);
        rows.extend_from_slice(&[fit.normal.x, fit.normal.y, fit.normal.z]);
        rows.extend_from_slice(&[drot.x, drot.y, drot.z]);
        if dim == LINK_DIM {
            rows.push(0.0);
        }
    }
    let m = residuals.len();
    MeasurementSystem {
        residuals: DVector::from_vec(residuals),
        jacobian: DMatrix::from_row_slice(m, dim, &rows),
        point_count: m,
    }
}

/// Projection matrix from the current-iterate error to the prediction-anchored
/// error: identity on position/bias, inverse right Jacobian on orientation.
fn iteration_jacobian(rot_err_pred_wrt_iter: &Vector3<f64>, dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let j_rot = right_jacobian_inv(rot_err_pred_wrt_iter).transpose();
    let j_rot_inv = right_jacobian(rot_err_pred_wrt_iter).transpose();
    let mut j = DMatrix::identity(dim, dim);
    let mut j_inv = DMatrix::identity(dim, dim);
    for i in 0..3 {
        for k in 0..3 {
            j[(3 + i, 3 + k)] = j_rot[(i, k)];
            j_inv[(3 + i, 3 + k)] = j_rot_inv[(i, k)];
        }
    }
    (j, j_inv)
}

/// Squared-sigma multiplier for the gross-outlier row gate. Deliberately far
/// beyond any honest innovation (about 12 sigma): a clean-looking plane fit
/// can still come from the wrong surface when the local neighborhood is
/// dominated by an adjacent patch, and one such row is enough to drag a
/// confident state off a converged solution.
const OUTLIER_GATE_SQ: f64 = 150.0;

/// Drop rows whose residual is implausible under the prior plus measurement
/// noise: keep row i only if z_i^2 <= OUTLIER_GATE_SQ * (h_i P h_i^T + r).
fn gate_outlier_rows(
    meas: MeasurementSystem,
    prior_cov: &DMatrix<f64>,
    r_point: f64,
) -> MeasurementSystem {
    let dim = prior_cov.nrows();
    let mut keep = Vec::with_capacity(meas.point_count);
    for i in 0..meas.point_count {
        let h_i = meas.jacobian.row(i);
        let var = (h_i * prior_cov * h_i.transpose())[(0, 0)] + r_point;
        if meas.residuals[i].powi(2) <= OUTLIER_GATE_SQ * var {
            keep.push(i);
        }
    }
    if keep.len() == meas.point_count {
        return meas;
    }
    let m = keep.len();
    let mut residuals = DVector::zeros(m);
    let mut jacobian = DMatrix::zeros(m, dim);
    for (row, &i) in keep.iter().enumerate() {
        residuals[row] = meas.residuals[i];
        jacobian.set_row(row, &meas.jacobian.row(i));
    }
    MeasurementSystem { residuals, jacobian, point_count: m }
}

/// Outcome of one body's iterated update.
#[derive(Debug)]
pub struct UpdateResult {
    pub state: BodyState,
    pub cov: DMatrix<f64>,
    pub iterations: usize,
    pub valid_points: usize,
}

/// Iterated error-state Kalman update of one body against the map.
///
/// Rebuilds the measurement system at every iterate, solves the
/// state-dimension gain form, and applies the correction additively on
/// position/bias and right-multiplicatively on orientation. Stops when the
/// correction norm drops below `convergence_eps` or after `max_iterations`.
pub fn iterated_update(
    prediction: &BodyState,
    prior_cov: &DMatrix<f64>,
    batch: &PointBatch,
    sensor_poses: &[SensorPose],
    map: &PointMap,
    map_cfg: &MapConfig,
    cfg: &UpdateConfig,
) -> Result<UpdateResult, EstimatorError> {
    let dim = prediction.dim();
    debug_assert_eq!(prior_cov.nrows(), dim);

    let first = gate_outlier_rows(
        build_measurement(prediction, batch, sensor_poses, map, map_cfg),
        prior_cov,
        cfg.r_point,
    );
    if first.point_count < cfg.min_valid_points {
        return Ok(UpdateResult {
            state: prediction.clone(),
            cov: prior_cov.clone(),
            iterations: 1,
            valid_points: first.point_count,
        });
    }

    // The prior can be legitimately singular: a link rigidly attached to a
    // fixed root has exactly zero position uncertainty. The state-dimension
    // gain form needs the prior inverse, so fall back to the equivalent
    // measurement-space form (its well-defined limit) when it does not exist.
    // A Cholesky that squeaks through on a nearly rank-deficient prior gives
    // an explosive inverse, so also require reasonable conditioning.
    let p_inv = prior_cov.clone().cholesky().and_then(|chol| {
        let l = chol.l();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..dim {
            lo = lo.min(l[(i, i)]);
            hi = hi.max(l[(i, i)]);
        }
        if lo > hi * 1e-6 {
            Some(chol.inverse())
        } else {
            None
        }
    });

    let r_inv = 1.0 / cfg.r_point;
    let mut state = prediction.clone();
    let mut meas = first;
    let mut iterations = 0;
    let mut valid_points = meas.point_count;

    let mut cov = loop {
        iterations += 1;
        let err0 = state.boxminus(prediction);
        let rot_err = Vector3::new(err0[3], err0[4], err0[5]);
        let (j, j_inv) = iteration_jacobian(&rot_err, dim);
        let p_star = &j_inv * prior_cov * j_inv.transpose();

        let h = &meas.jacobian;
        let full_rank = p_inv.as_ref().and_then(|pi| {
            let ht_rinv = h.transpose() * r_inv;
            let s = &ht_rinv * h + j.transpose() * pi * &j;
            let chol = s.cholesky()?;
            let rhs = -(&ht_rinv * &meas.residuals + j.transpose() * pi * &err0);
            let correction = chol.solve(&rhs);
            Some((chol.inverse() * ht_rinv, correction))
        });
        let (k, correction) = match full_rank {
            Some(solved) => solved,
            None => reduced_rank_solve(h, &j_inv, &p_star, &err0, &meas.residuals, r_inv)
                .ok_or(EstimatorError::DegenerateUpdate { link: batch.link_index, step: 0 })?,
        };
        state = state.boxplus(&correction);

        let converged =
            correction.norm() < cfg.convergence_eps || iterations >= cfg.max_iterations;
        let next_meas = if converged {
            None
        } else {
            Some(gate_outlier_rows(
                build_measurement(&state, batch, sensor_poses, map, map_cfg),
                prior_cov,
                cfg.r_point,
            ))
        };
        match next_meas {
            Some(m) if m.point_count >= cfg.min_valid_points => {
                valid_points = m.point_count;
                meas = m;
            }
            // Finalize with the last iterate's gain, projection, and H.
            // Joseph form: algebraically (I - KH) P*, but PSD-safe under the
            // huge variance spread between pose and bias channels.
            _ => {
                let ikh = DMatrix::identity(dim, dim) - &k * h;
                break &ikh * p_star * ikh.transpose() + &k * k.transpose() * cfg.r_point;
            }
        }
    };
    symmetrize(&mut cov);
    Ok(UpdateResult { state, cov, iterations, valid_points })
}

/// Update solve for a rank-deficient (or badly conditioned) prior: the error
/// is constrained to the range of P* = J^-1 P J^-T, and in that subspace the
/// reduced prior is invertible again. With P* = U diag(l) U^T (positive part
/// only), x = J^-1 (U y - err0) where
/// (A^T R^-1 A + diag(1/l)) y = -A^T R^-1 (z - H J^-1 err0),  A = H J^-1 U.
/// Returns the gain K (with (I - K H) P* the posterior covariance, realized
/// as K = J^-1 U S_y^-1 A^T R^-1) and the correction; None when even the
/// reduced system cannot be factorized.
fn reduced_rank_solve(
    h: &DMatrix<f64>,
    j_inv: &DMatrix<f64>,
    p_star: &DMatrix<f64>,
    err0: &DVector<f64>,
    residuals: &DVector<f64>,
    r_inv: f64,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let dim = p_star.nrows();
    let eig = p_star.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.amax();
    let kept: Vec<usize> = (0..dim)
        .filter(|&i| eig.eigenvalues[i] > max_eig.max(1e-300) * 1e-12)
        .collect();
    let rank = kept.len();
    let mut u = DMatrix::zeros(dim, rank);
    let mut lam_inv = DMatrix::zeros(rank, rank);
    for (c, &i) in kept.iter().enumerate() {
        u.set_column(c, &eig.eigenvectors.column(i));
        lam_inv[(c, c)] = 1.0 / eig.eigenvalues[i];
    }
    let j_inv_err0 = j_inv * err0;
    if rank == 0 {
        // exact prediction: nothing to estimate, pin to it
        return Some((DMatrix::zeros(dim, residuals.len()), -j_inv_err0));
    }
    let a = h * j_inv * &u;
    let s_y = a.transpose() * &a * r_inv + lam_inv;
    let chol = s_y.cholesky()?;
    let c = residuals - h * &j_inv_err0;
    let y = chol.solve(&(-(a.transpose() * &c) * r_inv));
    let correction = j_inv * (&u * &y) - j_inv_err0;
    let k = j_inv * &u * chol.inverse() * a.transpose() * r_inv;
    Some((k, correction))
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub fixed_root: bool,
    pub step_index: usize,
}

/// Run one full-body estimation step: root, then each link in ascending
/// order, inserting each body's points into the map after its update.
#[allow(clippy::too_many_arguments)]
pub fn run_step(
    prev: &StepEstimate,
    readings: &[JointReading],
    batches: &[PointBatch],
    map: &mut PointMap,
    geometry: &ChainGeometry,
    noise: &NoiseParams,
    cfg: &UpdateConfig,
    map_cfg: &MapConfig,
    opts: &StepOptions,
) -> Result<StepEstimate, EstimatorError> {
    let n = geometry.link_count();
    assert_eq!(readings.len(), n, "one reading per joint");
    assert_eq!(batches.len(), n + 1, "one batch per body, root included");

    let mut iterations = Vec::with_capacity(n + 1);
    let mut valid_points = Vec::with_capacity(n + 1);

    // Root stage
    let (root, root_cov) = if opts.fixed_root {
        iterations.push(0);
        valid_points.push(0);
        (prev.root.clone(), DMatrix::zeros(ROOT_DIM, ROOT_DIM))
    } else {
        let predicted = predict_root(&prev.root);
        let (f_x, f_w) = root_transition_jacobians(&predicted);
        let p_hat = propagate_root_cov(&prev.root_cov, &f_x, &f_w, noise);
        let result = iterated_update(
            &BodyState::from_root(&predicted),
            &p_hat,
            &batches[0],
            &geometry.sensor_poses[0],
            map,
            map_cfg,
            cfg,
        )
        .map_err(|e| with_step(e, opts.step_index))?;
        iterations.push(result.iterations);
        valid_points.push(result.valid_points);
        (result.state.to_root(), result.cov)
    };
    insert_batch(
        map,
        &root.p,
        &root.r,
        &root_cov,
        &batches[0],
        &geometry.sensor_poses[0],
        map_cfg.insert_sigma_gate,
    );

    // Link stage, ascending
    let mut links: Vec<LinkState> = Vec::with_capacity(n);
    let mut link_covs = Vec::with_capacity(n);
    for i in 0..n {
        let (parent_p, parent_r, parent_cov, parent_dim) = if i == 0 {
            (root.p, root.r, &root_cov, ROOT_DIM)
        } else {
            (links[i - 1].p, links[i - 1].r, &link_covs[i - 1], LINK_DIM)
        };
        let prev_self = &prev.links[i];
        let offset = &geometry.link_offsets[i];
        let predicted = predict_link(&parent_p, &parent_r, prev_self, &readings[i], offset);
        let (f_prev, f_parent, f_w) =
            link_transition_jacobians(&parent_r, prev_self, &readings[i], offset, parent_dim);
        let p_hat =
            propagate_link_cov(&prev.link_covs[i], parent_cov, &f_prev, &f_parent, &f_w, noise);

        let body = i + 1;
        let result = iterated_update(
            &BodyState::from_link(&predicted),
            &p_hat,
            &batches[body],
            &geometry.sensor_poses[body],
            map,
            map_cfg,
            cfg,
        )
        .map_err(|e| with_step(e, opts.step_index))?;
        iterations.push(result.iterations);
        valid_points.push(result.valid_points);
        let state = result.state.to_link();
        insert_batch(
            map,
            &state.p,
            &state.r,
            &result.cov,
            &batches[body],
            &geometry.sensor_poses[body],
            map_cfg.insert_sigma_gate,
        );
        links.push(state);
        link_covs.push(result.cov);
    }

    Ok(StepEstimate { root, root_cov, links, link_covs, iterations, valid_points })
}

fn with_step(err: EstimatorError, step: usize) -> EstimatorError {
    match err {
        EstimatorError::DegenerateUpdate { link, .. } => {
            EstimatorError::DegenerateUpdate { link, step }
        }
    }
}

/// Insert a body's points at its finalized pose, keeping only points whose
/// world-frame placement uncertainty passes the map's confidence gate. A
/// poorly estimated body would otherwise seed ghost surfaces and then pin
/// itself to them on the next step.
fn insert_batch(
    map: &mut PointMap,
    p: &Vector3<f64>,
    r: &Matrix3<f64>,
    cov: &DMatrix<f64>,
    batch: &PointBatch,
    sensor_poses: &[SensorPose],
    gate: f64,
) {
    let pos_std = (0..3).map(|i| cov[(i, i)]).fold(0.0, f64::max).sqrt();
    let rot_std = (3..6).map(|i| cov[(i, i)]).fold(0.0, f64::max).sqrt();
    let world: Vec<Vector3<f64>> = batch
        .points
        .iter()
        .filter_map(|pt| {
            let sensor = &sensor_poses[pt.sensor_index];
            let s = sensor.orientation * pt.local_point + sensor.position;
            (pos_std + rot_std * s.norm() <= gate).then(|| r * s + p)
        })
        .collect();
    map.insert(&world);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_system_returns_prior() {
        let map = PointMap::new(0.05);
        let state = BodyState {
            p: Vector3::zeros(),
            r: Matrix3::identity(),
            b: Some(0.0),
        };
        let cov = DMatrix::identity(LINK_DIM, LINK_DIM) * 0.01;
        let batch = PointBatch { link_index: 1, points: vec![] };
        let out = iterated_update(
            &state,
            &cov,
            &batch,
            &[],
            &map,
            &MapConfig::default(),
            &UpdateConfig::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.valid_points, 0);
        assert_eq!(out.state.p, state.p);
        assert_eq!(out.cov, cov);
    }

    #[test]
    fn scalar_gain_matches_textbook_kalman() {
        // 1-D analog: P=1, H=1, R=1 -> K = 0.5, posterior = 0.5
        let p = DMatrix::from_element(1, 1, 1.0);
        let h = DMatrix::from_element(1, 1, 1.0);
        let r = 1.0;
        let s: DMatrix<f64> = h.transpose() * &h / r + p.clone().try_inverse().unwrap();
        let k: DMatrix<f64> = s.try_inverse().unwrap() * h.transpose() / r;
        assert!((k[(0, 0)] - 0.5).abs() < 1e-12);
        let post = (DMatrix::identity(1, 1) - &k * &h) * &p;
        assert!((post[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn residual_on_mapped_plane_is_zero() {
        let mut map = PointMap::new(0.01);
        // z = 0 plane patch
        let mut pts = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                pts.push(Vector3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0));
            }
        }
        map.insert(&pts);
        let sensor = SensorPose {
            position: Vector3::zeros(),
            orientation: Matrix3::identity(),
        };
        let state = BodyState {
            p: Vector3::new(0.15, 0.15, 0.3),
            r: Matrix3::identity(),
            b: None,
        };
        // beam straight down: local point at range 0.3 -> lands exactly on z=0
        let batch = PointBatch {
            link_index: 0,
            points: vec![SensorPoint {
                sensor_index: 0,
                local_point: Vector3::new(0.0, 0.0, -0.3),
            }],
        };
        let meas = build_measurement(
            &state,
            &batch,
            std::slice::from_ref(&sensor),
            &map,
            &MapConfig::default(),
        );
        assert_eq!(meas.point_count, 1);
        assert!(meas.residuals[0].abs() < 1e-12);

        // shifting the state along the normal shifts every residual by the same amount
        let shifted = BodyState {
            p: state.p + Vector3::new(0.0, 0.0, 0.02),
            ..state.clone()
        };
        let meas2 = build_measurement(
            &shifted,
            &batch,
            std::slice::from_ref(&sensor),
            &map,
            &MapConfig::default(),
        );
        assert!((meas2.residuals[0].abs() - 0.02).abs() < 1e-10);
    }
}
