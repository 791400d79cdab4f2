//! Projection-free feature distillation between teacher and student networks
//! of different hidden widths.
//!
//! The pipeline has four stages:
//!
//! 1. fine-tune a teacher ([`train::train_teacher`]);
//! 2. score every last-layer teacher unit by the mean magnitude of the output
//!    gradient at that unit and keep the top `d_S`
//!    ([`attribution::compute_profile`], [`attribution::select_top`]);
//! 3. train a narrower student whose hidden units are pulled towards the
//!    selected teacher units with a per-column cross-correlation loss
//!    ([`losses::flex_kd_loss`], [`train::distill`]);
//! 4. compare against plain fine-tuning, logit distillation and a learned
//!    linear projector ([`harness`]).
//!
//! Everything runs on a small double-precision reverse-mode AD engine
//! ([`autograd`]).

pub mod attribution;
pub mod autograd;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
