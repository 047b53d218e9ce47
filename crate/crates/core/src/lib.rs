//! Trajectory-based actuator identification for a single joint.
//!
//! A measured log of commands and encoder states is cut into short segments.
//! Each segment is rolled out through a differentiable joint simulator under a
//! candidate actuator model, and the model parameters are fitted by gradient
//! descent on the weighted state mismatch.

pub mod actuators;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod excitation;
pub mod identification;
pub mod seeds;
pub mod trajectory;

pub use actuators::{ActuatorModel, ModelFile, PdParams, PlantOverrides, PwmPdParams, ServoParams, TorqueSequence};
pub use autodiff::{backward, GradientVector, Real, Tape, Var};
pub use dynamics::{gravity_torque, rollout, step, JointState, PlantParams, StepConfig};
pub use error::{Error, Result};
pub use trajectory::Trajectory;
