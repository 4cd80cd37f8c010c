//! Batch-reuse gradient descent on two-layer networks learning multi-index
//! Gaussian targets: direct simulation, discrete-time DMFT integration of the
//! effective processes, and a classifier of which teacher directions become
//! learnable after finitely many reuses of the same batch.

pub mod activation;
pub mod directions;
pub mod dmft;
pub mod error;
pub mod gdsim;
pub mod hardness;
pub mod hermite;
pub mod network;
pub mod presets;
pub mod rng;
pub mod stats;
pub mod targets;

pub use activation::ScalarFn;
pub use directions::Projection;
pub use error::{Error, Result};
pub use hardness::{DirectionVerdict, Direction};
pub use gdsim::{
    BatchSchedule, GradNormalization, OverlapTrace, SecondLayer, StudentState, TeacherKind, TrainConfig,
};
pub use network::Readout;
pub use targets::{TargetFunction, Teacher};
