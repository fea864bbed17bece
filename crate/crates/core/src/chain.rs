//! Articulated-structure model: state types, spatial/temporal prediction,
//! transition Jacobians, and covariance propagation.
//!
//! Error-state convention is right-multiplicative for orientations:
//! `R = R_nominal * Exp(err)`. Root error is `[p~; R~]` (dim 6), link error is
//! `[p~; R~; b~]` (dim 7).

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::so3::{exp_so3, is_rotation, right_jacobian, skew};

pub const ROOT_DIM: usize = 6;
pub const LINK_DIM: usize = 7;
/// Process-noise dimension of a non-root link: [omega_bias, omega_theta].
pub const LINK_NOISE_DIM: usize = 2;

/// Pose and orientation of a sensor in its link frame.
#[derive(Clone, Debug)]
pub struct SensorPose {
    pub position: Vector3<f64>,
    pub orientation: Matrix3<f64>,
}

/// Fixed kinematic description of the chain.
///
/// `link_offsets[i]` and `joint_axes[i]` describe link `i + 1` relative to its
/// parent (the root is body 0). `sensor_poses` has one entry per body,
/// including the root.
#[derive(Clone, Debug)]
pub struct ChainGeometry {
    pub link_offsets: Vec<Vector3<f64>>,
    pub joint_axes: Vec<Vector3<f64>>,
    pub sensor_poses: Vec<Vec<SensorPose>>,
}

impl ChainGeometry {
    /// Number of non-root links.
    pub fn link_count(&self) -> usize {
        self.link_offsets.len()
    }

    /// Total number of bodies (root + links).
    pub fn body_count(&self) -> usize {
        self.link_offsets.len() + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.joint_axes.len() != self.link_offsets.len() {
            return Err("joint axis count must equal link offset count".into());
        }
        if self.sensor_poses.len() != self.body_count() {
            return Err("sensor poses must cover the root and every link".into());
        }
        for axis in &self.joint_axes {
            if (axis.norm() - 1.0).abs() > 1e-9 {
                return Err(format!("joint axis {axis:?} is not unit length"));
            }
        }
        for poses in &self.sensor_poses {
            for pose in poses {
                if !is_rotation(&pose.orientation, 1e-9) {
                    return Err("sensor orientation is not a rotation".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RootState {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkState {
    pub p: Vector3<f64>,
    pub r: Matrix3<f64>,
    /// Joint-angle bias estimate, radians.
    pub b: f64,
}

/// Bias-corrupted encoder value plus the fixed parent-frame joint axis.
#[derive(Clone, Copy, Debug)]
pub struct JointReading {
    pub angle: f64,
    pub axis: Vector3<f64>,
}

/// Manually set process/measurement noise levels (variances).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseParams {
    pub q_root_pos: f64,
    pub q_root_rot: f64,
    pub q_bias: f64,
    pub q_theta: f64,
    pub r_point: f64,
}

impl NoiseParams {
    pub fn root_q(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(ROOT_DIM, ROOT_DIM);
        for i in 0..3 {
            q[(i, i)] = self.q_root_pos;
            q[(i + 3, i + 3)] = self.q_root_rot;
        }
        q
    }

    pub fn link_q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![self.q_bias, self.q_theta]))
    }
}

/// Force exact symmetry after a propagation or update.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

impl RootState {
    /// Apply an error vector [dp; dr].
    pub fn boxplus(&self, err: &nalgebra::DVector<f64>) -> RootState {
        debug_assert_eq!(err.len(), ROOT_DIM);
        RootState {
            p: self.p + Vector3::new(err[0], err[1], err[2]),
            r: self.r * exp_so3(&Vector3::new(err[3], err[4], err[5])),
        }
    }
}

impl LinkState {
    /// Apply an error vector [dp; dr; db].
    pub fn boxplus(&self, err: &nalgebra::DVector<f64>) -> LinkState {
        debug_assert_eq!(err.len(), LINK_DIM);
        LinkState {
            p: self.p + Vector3::new(err[0], err[1], err[2]),
            r: self.r * exp_so3(&Vector3::new(err[3], err[4], err[5])),
            b: self.b + err[6],
        }
    }
}

/// Random-walk mean prediction: the root carries over unchanged.
pub fn predict_root(prev: &RootState) -> RootState {
    prev.clone()
}

/// Rotation-vector argument of the link orientation prediction:
/// encoder reading minus the estimated bias, along the joint axis.
fn predicted_joint_vec(reading: &JointReading, bias: f64) -> Vector3<f64> {
    reading.axis * (reading.angle - bias)
}

/// Spatial/temporal link prediction from the parent's finalized pose and the
/// link's own previous bias.
pub fn predict_link(
    parent_p: &Vector3<f64>,
    parent_r: &Matrix3<f64>,
    prev_self: &LinkState,
    reading: &JointReading,
    offset: &Vector3<f64>,
) -> LinkState {
    LinkState {
        p: parent_p + parent_r * offset,
        r: parent_r * exp_so3(&predicted_joint_vec(reading, prev_self.b)),
        b: prev_self.b,
    }
}

/// Error transition of the root random walk, linearized about zero error and
/// zero noise. Both Jacobians are identity at first order.
pub fn root_transition_jacobians(_state: &RootState) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::identity(ROOT_DIM, ROOT_DIM),
        DMatrix::identity(ROOT_DIM, ROOT_DIM),
    )
}

/// Jacobians of the link error transition.
///
/// Returns `(f_prev, f_parent, f_w)`:
/// * `f_prev` (7x7): wrt the link's own previous-step error (bias channel only),
/// * `f_parent` (7 x parent_dim): wrt the parent's same-step error,
/// * `f_w` (7x2): wrt the process noise [omega_bias, omega_theta].
pub fn link_transition_jacobians(
    parent_r: &Matrix3<f64>,
    prev_self: &LinkState,
    reading: &JointReading,
    offset: &Vector3<f64>,
    parent_dim: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let phi = predicted_joint_vec(reading, prev_self.b);
    let exp_phi = exp_so3(&phi);
    let jr_axis = right_jacobian(&phi) * reading.axis;

    let mut f_prev = DMatrix::zeros(LINK_DIM, LINK_DIM);
    // Orientation error picks up the previous bias error through -J_r(phi) a.
    for i in 0..3 {
        f_prev[(3 + i, 6)] = -jr_axis[i];
    }
    f_prev[(6, 6)] = 1.0;

    let mut f_parent = DMatrix::zeros(LINK_DIM, parent_dim);
    let pos_rot = -parent_r * skew(offset);
    let rot_rot = exp_phi.transpose();
    for i in 0..3 {
        f_parent[(i, i)] = 1.0;
        for j in 0..3 {
            f_parent[(i, 3 + j)] = pos_rot[(i, j)];
            f_parent[(3 + i, 3 + j)] = rot_rot[(i, j)];
        }
    }

    let mut f_w = DMatrix::zeros(LINK_DIM, LINK_NOISE_DIM);
    f_w[(6, 0)] = 1.0;
    for i in 0..3 {
        f_w[(3 + i, 1)] = jr_axis[i];
    }

    (f_prev, f_parent, f_w)
}

pub fn propagate_root_cov(
    prev_cov: &DMatrix<f64>,
    f_x: &DMatrix<f64>,
    f_w: &DMatrix<f64>,
    noise: &NoiseParams,
) -> DMatrix<f64> {
    let mut p = f_x * prev_cov * f_x.transpose() + f_w * noise.root_q() * f_w.transpose();
    symmetrize(&mut p);
    p
}

pub fn propagate_link_cov(
    prev_cov: &DMatrix<f64>,
    parent_cov: &DMatrix<f64>,
    f_prev: &DMatrix<f64>,
    f_parent: &DMatrix<f64>,
    f_w: &DMatrix<f64>,
    noise: &NoiseParams,
) -> DMatrix<f64> {
    let mut p = f_prev * prev_cov * f_prev.transpose()
        + f_parent * parent_cov * f_parent.transpose()
        + f_w * noise.link_q() * f_w.transpose();
    symmetrize(&mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn reading(angle: f64, axis: Vector3<f64>) -> JointReading {
        JointReading { angle, axis }
    }

    #[test]
    fn predict_root_is_identity() {
        let prev = RootState {
            p: Vector3::new(1.0, 2.0, 3.0),
            r: Matrix3::identity(),
        };
        let pred = predict_root(&prev);
        assert_eq!(pred.p, prev.p);
        assert_eq!(pred.r, prev.r);
    }

    #[test]
    fn predict_link_straight_chain() {
        let prev = LinkState {
            p: Vector3::zeros(),
            r: Matrix3::identity(),
            b: 0.0,
        };
        let out = predict_link(
            &Vector3::zeros(),
            &Matrix3::identity(),
            &prev,
            &reading(0.0, Vector3::z()),
            &Vector3::new(0.4, 0.0, 0.0),
        );
        assert_abs_diff_eq!(out.p, Vector3::new(0.4, 0.0, 0.0), epsilon = 0.0);
        assert_abs_diff_eq!(out.r, Matrix3::identity(), epsilon = 0.0);
    }

    #[test]
    fn predict_link_bias_cancels_reading() {
        let parent_r = exp_so3(&Vector3::new(0.1, -0.2, 0.3));
        let prev = LinkState {
            p: Vector3::zeros(),
            r: Matrix3::identity(),
            b: 0.05,
        };
        let out = predict_link(
            &Vector3::zeros(),
            &parent_r,
            &prev,
            &reading(0.05, Vector3::z()),
            &Vector3::new(0.4, 0.0, 0.0),
        );
        assert_abs_diff_eq!(out.r, parent_r, epsilon = 1e-15);
        assert_eq!(out.b, 0.05);
    }

    #[test]
    fn trivial_jacobian_entries() {
        let prev = LinkState {
            p: Vector3::zeros(),
            r: Matrix3::identity(),
            b: 0.0,
        };
        let (f_prev, f_parent, f_w) = link_transition_jacobians(
            &Matrix3::identity(),
            &prev,
            &reading(0.0, Vector3::z()),
            &Vector3::new(0.3, 0.0, 0.0),
            LINK_DIM,
        );
        // bias random walk
        assert_eq!(f_prev[(6, 6)], 1.0);
        assert_eq!(f_w[(6, 0)], 1.0);
        // parent position error passes through as identity
        for i in 0..3 {
            assert_eq!(f_parent[(i, i)], 1.0);
        }
    }

    #[test]
    fn root_cov_propagation_trivial_cases() {
        let noise = NoiseParams {
            q_root_pos: 1e-4,
            q_root_rot: 1e-4,
            q_bias: 0.0,
            q_theta: 0.0,
            r_point: 1e-4,
        };
        let f = DMatrix::identity(ROOT_DIM, ROOT_DIM);
        let zero = DMatrix::zeros(ROOT_DIM, ROOT_DIM);
        let p = propagate_root_cov(&zero, &f, &f, &noise);
        assert_abs_diff_eq!(p.clone(), noise.root_q(), epsilon = 1e-15);

        let no_noise = NoiseParams {
            q_root_pos: 0.0,
            q_root_rot: 0.0,
            ..noise
        };
        let prev = DMatrix::identity(ROOT_DIM, ROOT_DIM) * 0.3;
        let p2 = propagate_root_cov(&prev, &f, &f, &no_noise);
        assert_abs_diff_eq!(p2.clone(), prev.clone(), epsilon = 1e-15);

        let p3 = propagate_root_cov(&prev, &f, &f, &noise);
        assert!(p3.trace() >= (f.clone() * prev * f.transpose()).trace());
    }

    #[test]
    fn link_cov_zero_inputs() {
        let noise = NoiseParams {
            q_root_pos: 0.0,
            q_root_rot: 0.0,
            q_bias: 0.0,
            q_theta: 0.0,
            r_point: 1e-4,
        };
        let zero7 = DMatrix::zeros(LINK_DIM, LINK_DIM);
        let prev = LinkState {
            p: Vector3::zeros(),
            r: Matrix3::identity(),
            b: 0.0,
        };
        let (f_prev, f_parent, f_w) = link_transition_jacobians(
            &Matrix3::identity(),
            &prev,
            &reading(0.2, Vector3::z()),
            &Vector3::new(0.3, 0.0, 0.0),
            LINK_DIM,
        );
        let p = propagate_link_cov(&zero7, &zero7, &f_prev, &f_parent, &f_w, &noise);
        assert_abs_diff_eq!(p, zero7, epsilon = 0.0);
    }
}
