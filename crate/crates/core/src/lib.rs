//! Data-free post-training quantization.
//!
//! Activation statistics are estimated from pre-trained weights alone, calibration
//! inputs are distilled against those estimates, and the distilled batch drives range
//! calibration for fake-quantized inference. A small harness (synthetic datasets, a
//! tiny trainer, comparison reports) exercises the whole pipeline at desk scale.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod calib;
pub mod distill;
pub mod error;
pub mod folding;
pub mod format;
pub mod graph;
pub mod harness;
pub mod ops;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Activation, BnParams, LayerKind, LayerSpec, ModelGraph};
pub use tensor::{ChannelStats, SeededRng, Tensor, WeightTensor};
