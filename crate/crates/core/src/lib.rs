//! Two-branch generalized category discovery on synthetic data.
//!
//! A small eager reverse-mode autodiff engine drives a frozen random backbone,
//! one trainable transformer block with an auxiliary token, and two cosine
//! prototype heads. Losses, evaluation, data generation and file formats live
//! in their own modules; `train` ties them together.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, NodeId};
pub use data::{GcdDataset, SynthConfig, ViewPair};
pub use error::{Error, Result};
pub use losses::{AblationRow, LossBreakdown, LossConfig};
pub use model::{ModelConfig, ModelState};
pub use optim::{sgd_step, OptimizerState};
pub use params::{GradMap, ParamSet};
pub use tensor::Tensor;
