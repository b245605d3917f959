//! Physical parameter identification for a PD-controlled planar arm.
//!
//! The crate is organised along the identification pipeline:
//!
//! - [`plant`]: the reference dynamics (friction, stiffness, damping) and forward kinematics.
//! - [`metrics`]: pose-sequence errors and state losses.
//! - [`datagen`]: parameter sampling, synthetic "real" episodes and simulated transitions.
//! - [`mlp`] / [`surrogate`]: a small dense network trained to imitate one plant step.
//! - [`identify`]: gradient refinement through the frozen surrogate and an annealing baseline.
//! - [`tpo`]: trajectory preference optimisation of a toy policy inside the identified plant.

pub mod datagen;
pub mod error;
pub mod identify;
pub mod metrics;
pub mod mlp;
pub mod plant;
pub mod seed;
pub mod surrogate;
pub mod tpo;

pub use error::{Error, Result};
pub use plant::{Action, EePose, JointState, ParamBounds, PhysParams, PlantConfig, Trajectory};
