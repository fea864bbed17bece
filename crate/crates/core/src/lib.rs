//! Whole-body posture estimation and mapping for articulated structures.
//!
//! An error-state iterated extended Kalman filter propagates each link's
//! state both temporally (step to step) and spatially (along the chain),
//! fusing point observations from body-mounted proximity sensors against an
//! incrementally built world point map. A deterministic simulator provides
//! the environment, chain motion, encoder bias, and noisy range sensing.

pub mod chain;
pub mod estimator;
pub mod metrics;
pub mod point_map;
pub mod runlog;
pub mod runner;
pub mod scenario;
pub mod simulator;
pub mod so3;
