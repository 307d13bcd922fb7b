//! Distillation losses, hard-sample selection, and distilled-corpus
//! generation.

pub mod generate;
pub mod plan;
pub mod queue;
pub mod step;

pub use generate::{decode_budget, distill_corpus, DistillOutcome};
pub use plan::{DistillMode, DistillPlan};
pub use queue::{
    select_hard_batch, select_hard_global, select_hard_language_wise, SelectionQueue,
};
pub use step::{
    accumulate_gradients, select_for_plan, training_step, wsld_loss, StepReport, TrainSample,
    TrainState,
};
