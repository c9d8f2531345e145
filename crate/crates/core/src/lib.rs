//! Knowledge-base-assisted joint source-channel coding for images.
//!
//! The crate wires together a learned variable-rate JSCC codec, a Gaussian
//! entropy model that drives per-token rate allocation, a retrieval-based
//! source knowledge base that conditions the codec, a PPO-trained rate-control
//! agent, and a classical JPEG + LDPC + 16-QAM reference chain, all evaluated
//! over simulated AWGN channels.
//!
//! Module map:
//! - [`image`], [`metrics`], [`rng`]: shared types, PSNR/MSE/CBR, seeded streams
//! - [`channel`]: AWGN simulation and SNR maps
//! - [`nn`]: small f64 neural-network layers with analytic gradients
//! - [`entropy`]: Gaussian entropy model, entropy map, rate preset map
//! - [`codec`]: analysis/synthesis transforms and the variable-rate JSCC codec
//! - [`source_kb`]: caption/embed providers, exact nearest-neighbour store
//! - [`channel_kb`]: actor-critic rate-adjustment agent trained with PPO
//! - [`baseline`]: JPEG + rate-2/3 LDPC + Gray 16-QAM separated chain
//! - [`harness`]: datasets, configs, experiment orchestration, CSV reports

pub mod baseline;
pub mod channel;
pub mod channel_kb;
pub mod codec;
pub mod entropy;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod source_kb;

pub use channel::{ChannelSpec, SymbolBlock};
pub use image::Image;
pub use metrics::{cbr, mse, psnr, LinkReport, PSNR_CAP_DB};
pub use rng::RngStream;
