//! Martian entry navigation with online atmospheric density adaptation.
//!
//! The crate simulates atmospheric entry at desk scale and compares three
//! adaptive navigation filters that differ only in how they absorb the
//! mismatch between the onboard density model and the atmosphere actually
//! flown through:
//!
//! * [`filters::ukf_cm`] — unscented Kalman filter with Myers-Tapley
//!   covariance matching of the process noise;
//! * [`filters::ukf_ac`] — UKF with the state augmented by a multiplicative
//!   correction factor on a nominal exponential profile;
//! * [`filters::uskf_nn`] — unscented Schmidt (consider) Kalman filter whose
//!   onboard density model is a small neural network adapted online by
//!   maximum-likelihood optimization of the measurement innovations.
//!
//! Supporting modules: [`atmos`] (density models and the surrogate truth
//! atmosphere generator), [`dynamics`] (3-DOF entry equations and RK4),
//! [`sensors`] (IMU / dynamic pressure / heat-rate models), [`net`] (the MLP,
//! its gradients, Adam, and offline training), and [`mc`] (the Monte Carlo
//! harness and metrics).

pub mod atmos;
pub mod dynamics;
pub mod filters;
pub mod mc;
pub mod net;
pub mod sensors;

pub use atmos::{AtmosGenConfig, CosparModel, ExpModel, TabulatedProfile};
pub use dynamics::{EntryDispersion, EntryState, ProcessNoiseStd, VehicleConfig};
pub use net::{AdamState, MlpDensityNet, TrainConfig};
pub use sensors::{Measurement, NoiseSpec};
