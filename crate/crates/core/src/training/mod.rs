//! Conditional matching, loss assembly, the optimization loop and checkpoints.

mod checkpoint;
mod hungarian;
mod loss;
mod matching;
mod trainer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use hungarian::{hungarian, Assignment};
pub use loss::{compute_loss, DetectionTarget, LossBreakdown, LossConfig, LossTerms, SequenceTarget};
pub use matching::{conditional_match, matching_cost, GroundTruth, MatchResult};
pub use trainer::{forward_loss, prepare_item, ForwardPass, StepReport, TrainConfig, TrainItem, Trainer};
