//! Integer-only discrete flows for lossless image compression.
//!
//! The crate is layered bottom-up:
//!
//! * [`quant`], [`conv`] and [`logistic`] hold the numeric kernels: the LSQ
//!   quantizer, float and 8-bit integer convolutions, and the discretized
//!   logistic likelihood.
//! * [`tape`] is a small reverse-mode differentiator over exactly the ops the
//!   flow uses.
//! * [`flow`] builds the multi-scale additive-coupling flow on top of those,
//!   with a float/fake-quant path (through the tape) and an integer-only path.
//! * [`train`] implements the objectives, FLOPs accounting, pruning and the
//!   five-stage workflow.
//! * [`rans`] and [`codec`] turn a model into a bit-exact compressor.
//! * [`data`] covers the synthetic generator and the image file formats.

pub mod codec;
pub mod conv;
pub mod data;
pub mod error;
pub mod flow;
pub mod logistic;
pub mod params;
pub mod quant;
pub mod rans;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, Path};
pub use params::{ParamId, ParamKind, ParamStore};
pub use quant::{QuantizedTensor, QuantizerParams};
pub use tensor::Tensor;
