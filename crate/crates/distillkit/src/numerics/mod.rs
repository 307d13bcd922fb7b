//! Dense f64 tensor math: kernels, reverse-mode tape, losses, optimizer.

pub mod kernels;
pub mod losses;
pub mod optimizer;
pub mod tape;

pub use losses::{kl_div, label_smoothed_ce, mean_nll};
pub use optimizer::{adam_step, clip_grad_norm, lr_at, AdamState, OptimizerConfig, Param};
pub use tape::{Tape, Value, VarId};
