//! Unpaired adversarial training, checkpoints and inference.

mod checkpoint;
mod config;
mod trainer;

pub use checkpoint::{arch_hash, load_module, push_module, round_to_f32, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;
pub use trainer::{run, train, Enhanced, Enhancer, Leugan, Pair, StepReport, TrainSummary, Trainer, LOG_HEADER};
