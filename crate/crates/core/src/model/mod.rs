//! The learned value model.

pub mod checkpoint;
pub mod loss;
pub mod net;

pub use loss::{mean_qerror, qerror, LossKind, LossReport};
pub use net::{Architecture, GradCheck, TargetNorm, TrainConfig, ValueModel};
