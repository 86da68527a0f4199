//! Small softmax transformers trained online on the synthetic tasks, with
//! length sweeps producing test-loss curves.

pub mod config;
pub mod model;
pub mod sweep;
pub mod train;

pub use config::{ArchConfig, PeKind, TrainConfig};
pub use model::{gradient_check, init_model, GradCheck, TrainModel};
pub use sweep::{run_sweep, CurveRow, SweepSpec};
pub use train::{eval_curve, train, LengthLoss, TrainResult};
