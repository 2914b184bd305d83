//! Training guided students on cached teacher targets: residual adapters
//! over a frozen base, and the full fine-tuning baseline.

mod gd;
mod loss;
mod train;

pub use gd::{GdModel, OmegaPathway};
pub use loss::{loss_eval, LossKind, LossSpec};
pub use train::{distill, gd_finetune, held_out_loss, DistillConfig, DistillMode, DistillRun};
