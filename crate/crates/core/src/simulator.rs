//! Deterministic simulation of the articulated chain, its ring-mounted
//! multi-beam proximity sensors, encoder bias, and range-proportional noise.
//!
//! Everything is a pure function of (scenario, seed, step); the per-beam RNG
//! keying makes the point stream independent of evaluation order.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{ChainGeometry, JointReading, SensorPose};
use crate::estimator::{PointBatch, SensorPoint};
use crate::so3::exp_so3;

/// Half-space plane `n . x = d`; rays hit it from either side.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

/// Axis-aligned box obstacle.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Environment {
    pub planes: Vec<Plane>,
    pub boxes: Vec<Aabb>,
}

impl Environment {
    /// Rectangular room as six wall planes.
    pub fn room(min: [f64; 3], max: [f64; 3]) -> Environment {
        let mut planes = Vec::with_capacity(6);
        for axis in 0..3 {
            let mut n = [0.0; 3];
            n[axis] = 1.0;
            planes.push(Plane { normal: n, offset: min[axis] });
            planes.push(Plane { normal: n, offset: max[axis] });
        }
        Environment { planes, boxes: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty() && self.boxes.is_empty()
    }

    /// Distance along the ray to the nearest surface, if any.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > 1e-9 && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        };
        for plane in &self.planes {
            let n = Vector3::from(plane.normal);
            let denom = n.dot(dir);
            if denom.abs() > 1e-12 {
                consider((plane.offset - n.dot(origin)) / denom);
            }
        }
        for bx in &self.boxes {
            if let Some(t) = ray_aabb(origin, dir, bx) {
                consider(t);
            }
        }
        best
    }

    /// Signed distance from `p` to the nearest primitive surface (absolute
    /// value; used by tests to check that emitted points lie on geometry).
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for plane in &self.planes {
            let n = Vector3::from(plane.normal);
            best = best.min((n.dot(p) - plane.offset).abs());
        }
        for bx in &self.boxes {
            best = best.min(aabb_surface_distance(p, bx));
        }
        best
    }
}

fn ray_aabb(origin: &Vector3<f64>, dir: &Vector3<f64>, bx: &Aabb) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-12 {
            if origin[axis] < bx.min[axis] || origin[axis] > bx.max[axis] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[axis];
            let (t0, t1) = {
                let a = (bx.min[axis] - origin[axis]) * inv;
                let b = (bx.max[axis] - origin[axis]) * inv;
                if a < b { (a, b) } else { (b, a) }
            };
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
    }
    if t_far < 1e-9 {
        None
    } else if t_near > 1e-9 {
        Some(t_near)
    } else {
        Some(t_far) // origin inside the box
    }
}

fn aabb_surface_distance(p: &Vector3<f64>, bx: &Aabb) -> f64 {
    let mut outside2 = 0.0;
    let mut min_face = f64::INFINITY;
    for axis in 0..3 {
        let lo = bx.min[axis];
        let hi = bx.max[axis];
        if p[axis] < lo {
            outside2 += (lo - p[axis]).powi(2);
        } else if p[axis] > hi {
            outside2 += (p[axis] - hi).powi(2);
        }
        min_face = min_face.min((p[axis] - lo).abs().min((p[axis] - hi).abs()));
    }
    if outside2 > 0.0 {
        outside2.sqrt()
    } else {
        min_face
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SensorSpec {
    pub ring_radius: f64,
    pub sensors_per_link: usize,
    /// Beams per sensor; must be a perfect square (laid out as a grid).
    pub beams_per_sensor: usize,
    pub fov_degrees: f64,
    pub min_range: f64,
    pub max_range: f64,
    /// Coefficient c in the noise law `sigma_factor * sigma = c * r`.
    pub noise_coeff: f64,
    pub noise_sigma_factor: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        SensorSpec {
            ring_radius: 0.05,
            sensors_per_link: 8,
            beams_per_sensor: 64,
            fov_degrees: 45.0,
            min_range: 0.05,
            max_range: 4.0,
            noise_coeff: 0.01,
            noise_sigma_factor: 2.7,
        }
    }
}

impl SensorSpec {
    pub fn sigma_at(&self, range: f64) -> f64 {
        self.noise_coeff * range / self.noise_sigma_factor
    }

    /// Ring of sensor poses in the link frame: evenly spaced around the
    /// x-axis at the link midpoint, boresight (sensor z) pointing radially
    /// outward, sensor x aligned with the link x-axis.
    pub fn ring_poses(&self, link_length: f64) -> Vec<SensorPose> {
        (0..self.sensors_per_link)
            .map(|s| {
                let psi = 2.0 * std::f64::consts::PI * s as f64 / self.sensors_per_link as f64;
                let radial = Vector3::new(0.0, psi.cos(), psi.sin());
                let x = Vector3::x();
                let y = radial.cross(&x);
                let orientation = Matrix3::from_columns(&[x, y, radial]);
                SensorPose {
                    position: Vector3::new(link_length / 2.0, 0.0, 0.0) + radial * self.ring_radius,
                    orientation,
                }
            })
            .collect()
    }

    /// Unit beam directions in the sensor frame (boresight = +z), on a
    /// uniform tangent-plane grid covering the square field of view.
    pub fn beam_directions(&self) -> Vec<Vector3<f64>> {
        let side = (self.beams_per_sensor as f64).sqrt().round() as usize;
        assert_eq!(side * side, self.beams_per_sensor, "beams_per_sensor must be a square");
        let half = (self.fov_degrees.to_radians() / 2.0).tan();
        let mut dirs = Vec::with_capacity(self.beams_per_sensor);
        for row in 0..side {
            for col in 0..side {
                let u = if side == 1 { 0.0 } else { -half + 2.0 * half * row as f64 / (side - 1) as f64 };
                let v = if side == 1 { 0.0 } else { -half + 2.0 * half * col as f64 / (side - 1) as f64 };
                dirs.push(Vector3::new(u, v, 1.0).normalize());
            }
        }
        dirs
    }
}

/// Sine command for one joint.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JointSine {
    pub amplitude_rad: f64,
    pub frequency_hz: f64,
    pub phase_rad: f64,
}

impl JointSine {
    pub fn angle_at(&self, t: f64) -> f64 {
        self.amplitude_rad * (2.0 * std::f64::consts::PI * self.frequency_hz * t + self.phase_rad).sin()
    }
}

/// Prescribed root trajectory. `Fixed` pins the root; `Drift` applies slow
/// sinusoidal translation/rotation starting from the initial pose (both are
/// zero at t = 0).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum RootMotion {
    Fixed,
    Drift {
        translation_amplitude_m: [f64; 3],
        rotation_amplitude_rad: [f64; 3],
        frequency_hz: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionProfile {
    pub joints: Vec<JointSine>,
    pub root: RootMotion,
    pub root_position: [f64; 3],
    pub root_rotvec: [f64; 3],
}

impl MotionProfile {
    pub fn root_pose_at(&self, t: f64) -> (Vector3<f64>, Matrix3<f64>) {
        let p0 = Vector3::from(self.root_position);
        let r0 = exp_so3(&Vector3::from(self.root_rotvec));
        match &self.root {
            RootMotion::Fixed => (p0, r0),
            RootMotion::Drift {
                translation_amplitude_m,
                rotation_amplitude_rad,
                frequency_hz,
            } => {
                let w = 2.0 * std::f64::consts::PI * frequency_hz;
                // Stagger the axes so the path is a curve, not a line.
                let s = |i: usize| (w * t + i as f64 * 1.3).sin() - (i as f64 * 1.3).sin();
                let dp = Vector3::new(
                    translation_amplitude_m[0] * s(0),
                    translation_amplitude_m[1] * s(1),
                    translation_amplitude_m[2] * s(2),
                );
                let dr = Vector3::new(
                    rotation_amplitude_rad[0] * s(0),
                    rotation_amplitude_rad[1] * s(1),
                    rotation_amplitude_rad[2] * s(2),
                );
                (p0 + dp, r0 * exp_so3(&dr))
            }
        }
    }
}

/// True chain configuration at one instant.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Pose of every body, root first.
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
    /// True joint angles (commands tracked exactly).
    pub joint_angles: Vec<f64>,
    /// Constant per-joint encoder bias.
    pub joint_biases: Vec<f64>,
}

/// Forward kinematics of the commanded configuration at time `t`.
pub fn step_truth(
    t: f64,
    profile: &MotionProfile,
    geometry: &ChainGeometry,
    joint_biases: &[f64],
) -> GroundTruth {
    let n = geometry.link_count();
    assert_eq!(profile.joints.len(), n);
    assert_eq!(joint_biases.len(), n);
    let (root_p, root_r) = profile.root_pose_at(t);
    let mut positions = Vec::with_capacity(n + 1);
    let mut rotations = Vec::with_capacity(n + 1);
    let mut joint_angles = Vec::with_capacity(n);
    positions.push(root_p);
    rotations.push(root_r);
    for i in 0..n {
        let angle = profile.joints[i].angle_at(t);
        joint_angles.push(angle);
        let parent_r = rotations[i];
        positions.push(positions[i] + parent_r * geometry.link_offsets[i]);
        rotations.push(parent_r * exp_so3(&(geometry.joint_axes[i] * angle)));
    }
    GroundTruth {
        positions,
        rotations,
        joint_angles,
        joint_biases: joint_biases.to_vec(),
    }
}

/// Encoder readings: true angle plus the constant per-joint bias.
pub fn read_encoders(truth: &GroundTruth, geometry: &ChainGeometry) -> Vec<JointReading> {
    truth
        .joint_angles
        .iter()
        .zip(&truth.joint_biases)
        .zip(&geometry.joint_axes)
        .map(|((&angle, &bias), &axis)| JointReading { angle: angle + bias, axis })
        .collect()
}

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn beam_rng(seed: u64, step: u64, link: u64, sensor: u64, beam: u64) -> ChaCha8Rng {
    let key = mix64(seed)
        ^ mix64(step.wrapping_mul(0x9e3779b97f4a7c15))
        ^ mix64(link.wrapping_add(0x1000))
        ^ mix64(sensor.wrapping_add(0x2000))
        ^ mix64(beam.wrapping_add(0x3000));
    ChaCha8Rng::seed_from_u64(key)
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ray-cast every sensor of one body at its true pose and return sensor-local
/// points with range-proportional noise applied.
#[allow(clippy::too_many_arguments)]
pub fn raycast_sensors(
    link_index: usize,
    link_p: &Vector3<f64>,
    link_r: &Matrix3<f64>,
    sensor_poses: &[SensorPose],
    spec: &SensorSpec,
    env: &Environment,
    seed: u64,
    step: u64,
) -> PointBatch {
    let dirs = spec.beam_directions();
    let mut points = Vec::new();
    for (s, pose) in sensor_poses.iter().enumerate() {
        let origin_w = link_p + link_r * pose.position;
        let rot_w = link_r * pose.orientation;
        for (b, dir_s) in dirs.iter().enumerate() {
            let dir_w = rot_w * dir_s;
            let Some(r) = env.raycast(&origin_w, &dir_w) else {
                continue;
            };
            if r < spec.min_range || r > spec.max_range {
                continue;
            }
            let sigma = spec.sigma_at(r);
            let noisy = if sigma > 0.0 {
                let mut rng = beam_rng(seed, step, link_index as u64, s as u64, b as u64);
                r + sigma * sample_standard_normal(&mut rng)
            } else {
                r
            };
            points.push(SensorPoint {
                sensor_index: s,
                local_point: dir_s * noisy,
            });
        }
    }
    PointBatch { link_index, points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn wall_env() -> Environment {
        // Single wall at x = 1
        Environment {
            planes: vec![Plane { normal: [1.0, 0.0, 0.0], offset: 1.0 }],
            boxes: vec![],
        }
    }

    #[test]
    fn beam_normal_to_wall_exact_range() {
        let env = wall_env();
        let r = env
            .raycast(&Vector3::zeros(), &Vector3::x())
            .unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn beam_away_from_everything_misses() {
        let env = wall_env();
        assert!(env.raycast(&Vector3::zeros(), &-Vector3::x()).is_none());
    }

    #[test]
    fn aabb_hit_from_outside() {
        let bx = Aabb { min: [1.0, -0.5, -0.5], max: [2.0, 0.5, 0.5] };
        let t = ray_aabb(&Vector3::zeros(), &Vector3::x(), &bx).unwrap();
        assert_abs_diff_eq!(t, 1.0, epsilon = 1e-12);
        assert!(ray_aabb(&Vector3::zeros(), &Vector3::y(), &bx).is_none());
    }

    #[test]
    fn noise_sigma_matches_law() {
        // 10k samples at r = 1 m: sample sigma within 5% of 0.01/2.7
        let spec = SensorSpec::default();
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        let n = 10_000;
        for i in 0..n {
            let mut rng = beam_rng(7, i, 0, 0, 0);
            let e = spec.sigma_at(1.0) * sample_standard_normal(&mut rng);
            sum += e;
            sum2 += e * e;
        }
        let mean = sum / n as f64;
        let sigma = (sum2 / n as f64 - mean * mean).sqrt();
        let expect = 0.01 / 2.7;
        assert!((sigma - expect).abs() < 0.05 * expect, "sigma {sigma} vs {expect}");
    }

    #[test]
    fn encoder_residual_is_exactly_bias() {
        let spec = SensorSpec::default();
        let geometry = crate::scenario::build_geometry(3, 0.4, &spec);
        let profile = MotionProfile {
            joints: vec![
                JointSine { amplitude_rad: 0.3, frequency_hz: 0.1, phase_rad: 0.0 };
                3
            ],
            root: RootMotion::Fixed,
            root_position: [0.0; 3],
            root_rotvec: [0.0; 3],
        };
        let biases = [0.05; 3];
        for step in 0..20 {
            let truth = step_truth(step as f64 * 0.1, &profile, &geometry, &biases);
            let readings = read_encoders(&truth, &geometry);
            for (r, a) in readings.iter().zip(&truth.joint_angles) {
                assert!((r.angle - a - 0.05).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_amplitude_is_constant_posture() {
        let spec = SensorSpec::default();
        let geometry = crate::scenario::build_geometry(2, 0.4, &spec);
        let profile = MotionProfile {
            joints: vec![JointSine { amplitude_rad: 0.0, frequency_hz: 0.1, phase_rad: 0.3 }; 2],
            root: RootMotion::Fixed,
            root_position: [0.0; 3],
            root_rotvec: [0.0; 3],
        };
        let t0 = step_truth(0.0, &profile, &geometry, &[0.0; 2]);
        let t1 = step_truth(42.0, &profile, &geometry, &[0.0; 2]);
        for i in 0..3 {
            assert_eq!(t0.positions[i], t1.positions[i]);
        }
    }

    #[test]
    fn raycast_batch_deterministic_and_bounded() {
        let spec = SensorSpec::default();
        let env = Environment::room([-2.0, -2.0, 0.0], [2.0, 2.0, 2.5]);
        let poses = spec.ring_poses(0.4);
        let p = Vector3::new(0.0, 0.0, 1.2);
        let r = Matrix3::identity();
        let a = raycast_sensors(0, &p, &r, &poses, &spec, &env, 11, 5);
        let b = raycast_sensors(0, &p, &r, &poses, &spec, &env, 11, 5);
        assert_eq!(a.points.len(), b.points.len());
        assert!(a.points.len() <= 512);
        for (x, y) in a.points.iter().zip(&b.points) {
            assert_eq!(x.local_point, y.local_point);
        }
        // different seed changes the noise
        let c = raycast_sensors(0, &p, &r, &poses, &spec, &env, 12, 5);
        assert!(a.points.iter().zip(&c.points).any(|(x, y)| x.local_point != y.local_point));
    }

    #[test]
    fn emitted_points_lie_on_surfaces() {
        let spec = SensorSpec::default();
        let mut env = Environment::room([-2.0, -2.0, 0.0], [2.0, 2.0, 2.5]);
        env.boxes.push(Aabb { min: [1.0, 1.0, 0.0], max: [1.5, 1.5, 1.0] });
        let poses = spec.ring_poses(0.4);
        let p = Vector3::new(0.3, -0.2, 1.2);
        let r = exp_so3(&Vector3::new(0.1, 0.4, -0.2));
        let batch = raycast_sensors(2, &p, &r, &poses, &spec, &env, 3, 9);
        assert!(!batch.points.is_empty());
        let mut within = 0usize;
        for pt in &batch.points {
            let pose = &poses[pt.sensor_index];
            let world = r * (pose.orientation * pt.local_point + pose.position) + p;
            let range = pt.local_point.norm();
            if env.surface_distance(&world) <= 3.0 * spec.sigma_at(range) + 1e-9 {
                within += 1;
            }
        }
        // 3-sigma bound holds for ~99.7% of points
        assert!(within as f64 >= 0.98 * batch.points.len() as f64);
    }
}
