//! Traction-adaptive motion planning and control at the limits of handling.
//!
//! The crate implements a receding-horizon planner whose tire-force input
//! constraints vary along the prediction horizon as a function of a
//! predictive friction profile and dynamic axle loads, together with the
//! sampling augmentation machinery that keeps the underlying real-time
//! iteration scheme feasible and out of bad local minima when those
//! constraints change abruptly. A higher-fidelity plant model, scenario
//! runner and metrics layer close the loop for desktop experiments.
//!
//! Numerical code is generic over the scalar type (see [`Real`]); the
//! simulator and CLI work in `f64` through the aliases at the crate root.

pub mod constraints;
pub mod planner;
pub mod qp;
pub mod real;
pub mod riccati;
pub mod rollout;
pub mod scenario;
pub mod sim;
pub mod track;
pub mod vehicle;

pub use real::Real;

/// Scalar type used by the simulator, scenario I/O and CLI.
pub type Scalar = f64;

pub type State64 = vehicle::State<f64>;
pub type Input64 = vehicle::Input<f64>;
pub type VehicleParams64 = vehicle::VehicleParams<f64>;
