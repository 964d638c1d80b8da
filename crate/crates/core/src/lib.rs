//! Model-contrastive training for image restoration at desk scale.
//!
//! A restoration network is trained with its usual reconstruction loss minus
//! a weighted feature-space distance to the outputs of its own lagged EMA
//! copies ("negative models"). Everything needed to exercise that loop runs
//! on the CPU with no external data: a small autodiff engine, synthetic
//! degradation tasks, PSNR/SSIM, checkpoints and an ablation harness.

pub mod ablate;
pub mod config;
pub mod degrade;
pub mod error;
pub mod imageio;
pub mod loss;
pub mod metrics;
pub mod negbank;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, TensorError, Var};
