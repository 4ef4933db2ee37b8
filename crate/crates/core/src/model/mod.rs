//! The echo-cancelling mask estimator: configuration, parameters, the
//! differentiable graph, the streaming engine and end-to-end enhancement.

mod config;
pub mod container;
mod enhance;
mod forward;
mod params;
mod stream;

pub use config::{AlignMode, ModelConfig, Variant};
pub use enhance::{apply_mask, enhance, EnhanceOptions, Enhancer};
pub use forward::{
    align_block, argmax, cruse_forward, forward, forward_batch, infer, skip_block, BatchForward,
    BnSource, DelayDistribution, Forward, ForwardOptions,
};
pub use params::{Bound, ParamStore, CONFIG_RECORD, DECODER_BLOCKS, ENCODER_BLOCKS};
pub use stream::StreamState;
