//! Model assembly, training loop, checkpoints and the ablation harness.

pub mod ablation;
mod checkpoint;
mod config;
mod model;
pub mod optim;
mod trainer;

pub use ablation::{run_ablation, suite, AblationAxis, AblationRow, AblationSpec, AblationTable, RowStatus};
pub use checkpoint::{Checkpoint, RngState, WeightBlob, CHECKPOINT_VERSION};
pub use config::{LossKind, ModelConfig, TargetScale};
pub use model::RatingModel;
pub use optim::{adam_step, clip_gradients, Adam, AdamState};
pub use trainer::{evaluate_model, train, train_with, write_history_csv, EpochRecord, TrainOutcome};
