//! Non-autoregressive sequence generation trained with a modality diffusion
//! process and residual glancing sampling, together with a controlled
//! synthetic multi-modality experiment: data generation, discrete diffusion
//! posteriors, a small encoder-decoder transformer with its own reverse-mode
//! core, the glancing training loop, evaluation metrics, and an experiment
//! CLI.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Worker count for batch-parallel gradient accumulation, from the
/// `DIFFNAR_THREADS` environment variable (default 1). Any worker count
/// produces bit-identical results: per-pair gradients are computed
/// independently and reduced in batch order.
pub fn thread_count() -> usize {
    std::env::var("DIFFNAR_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
}

/// Concrete element-type aliases; f64 is the default precision, f32 the
/// speed opt-in.
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = model::TransformerModel<f64>;
pub type Model32 = model::TransformerModel<f32>;
pub type Dist64 = diffusion::CategoricalSeqDist<f64>;
pub type Dist32 = diffusion::CategoricalSeqDist<f32>;
