//! Training: recorded forward/backward, schedules, SGD with EMA, and a toy
//! training loop over synthetic data.

pub mod data;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod tape;
pub mod toy;

pub use data::{Split, SyntheticDataset, SyntheticSpec};
pub use loss::label_smoothed_ce;
pub use optim::{sgd_step, TrainState, EMA_DECAY, SGD_MOMENTUM};
pub use schedule::{cosine_value, CurriculumPhase, CurriculumSpec, ScheduleSpec};
pub use tape::{backward, backward_from_logits, calibrate, forward_recorded, BlockTape, GradMap, ModelTape, StageTape};
pub use toy::{evaluate, toy_arch, train_model, train_toy, EpochRecord, ToyConfig, TrainLog, ToyOutcome};
