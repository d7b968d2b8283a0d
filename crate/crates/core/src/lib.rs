//! Calibration of focused plenoptic cameras with the unconstrained
//! two-parallel-plane (TPP) ray model.

pub mod board;
pub mod calibration;
pub mod experiments;
pub mod io;
pub mod parallel;
pub mod projection;
pub mod rectification;
pub mod report;
pub mod rotation;
pub mod scalar;
pub mod simulator;
pub mod tpp;

pub use board::Board;
pub use calibration::{CalibrationError, CalibrationResult};
pub use projection::Observation;

pub type Ray4D = tpp::Ray4<f64>;
pub type Ray4F = tpp::Ray4<f32>;
pub type TppParams = tpp::Tpp<f64>;
pub type TppParamsF = tpp::Tpp<f32>;
pub type DistortionParams = projection::Distortion<f64>;
pub type DistortionParamsF = projection::Distortion<f32>;
pub type Pose = projection::RigidPose<f64>;
pub type PoseF = projection::RigidPose<f32>;
