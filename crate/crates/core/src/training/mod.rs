//! Matching, set-prediction loss, optimizer and the training loop.

pub mod loss;
pub mod matching;
pub mod optim;
pub mod train;

pub use loss::{set_loss, LossBreakdown, LossValues, LossWeights};
pub use matching::{hungarian, match_cost, Assignment, CostWeights};
pub use optim::{Adam, AdamConfig};
pub use train::{matched_accuracy, train, EpochMetrics, EvalSplit, RunDir, TrainConfig, TrainSummary};
