//! Temporal action localization with a scaled local-attention encoder, a
//! top-down cross-scale feature pyramid and boundary distribution regression.
//!
//! Layering, bottom to top:
//!
//! * [`tensor`], [`graph`], [`params`], [`gradcheck`]: dense `f64` tensors,
//!   tape-based reverse-mode autodiff, parameter registry and checkpoints.
//! * [`nn`]: linear / convolution / normalisation layers over the graph.
//! * [`encoder`], [`csfpn`], [`altbackbones`]: feature pyramid construction.
//! * [`heads`]: classification, distribution regression, target assignment
//!   and the training losses.
//! * [`postproc`]: decoding, NMS, tIoU and mAP.
//! * [`synth`], [`io`], [`config`], [`train`]: data, configuration and the
//!   train / eval / gradcheck / ablation drivers.

pub mod altbackbones;
pub mod config;
pub mod csfpn;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod io;
mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod postproc;
pub mod synth;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use graph::{Gradients, Graph, Var};
pub use kernels::conv_out_len;
pub use params::{ParamId, ParamStore};
pub use postproc::Detection;
pub use tensor::{Tensor, TensorError};
