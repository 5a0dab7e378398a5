//! Configuration, optimization and the pretrain / finetune / evaluate pipeline.

pub mod config;
pub mod optim;
pub mod pretext;
pub mod report;
pub mod run;

pub use config::{PretextLossWeights, TrainConfig};
pub use optim::Adam;
pub use pretext::{pretext_loss, pretext_step, PretextLoss};
pub use run::{ablate, evaluate, finetune, pretrain, EvalReport, FinetuneOutcome, Init, PretrainOutcome, Trained};
