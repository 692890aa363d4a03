//! The full model, its ablations, and per-session training.

mod model;
mod train;
mod variant;

pub use model::{
    build_variant, missing_slot, predict_from_logits, prepare_all, ForwardTrace, ModelConfig, PreparedSample, PromptConfig,
    RebQModel,
};
pub use train::{batch_loss, train_task, BatchLoss, StepLog, TrainLog, TrainOptions};
pub use variant::{PromptForm, VariantKind, VariantSpec, PRESETS};
