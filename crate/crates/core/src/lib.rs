//! A self-contained CPU laboratory for deep residual fully convolutional
//! segmentation networks with independently toggleable long and short skip
//! connections.
//!
//! The crate builds everything from the numerics up:
//!
//! * [`tensor`] — dense tensors with dynamic-graph reverse-mode autodiff;
//! * [`ops`] — convolution, activations, batch norm, dropout, and the
//!   parameter-free decimation/repetition resampling pair;
//! * [`blocks`] — bottleneck, basic and simple residual blocks;
//! * [`net`] — the contracting/expanding network builder with long skips
//!   carried by summation, plus the declarative config format;
//! * [`train`] — BCE and Dice losses, RMSprop with weight decay, the epoch
//!   loop with best-on-validation checkpointing, MC-dropout inference;
//! * [`metrics`] — per-layer update telemetry and segmentation metrics;
//! * [`data`] / [`augment`] — synthetic membrane data, image-stack I/O and
//!   geometric augmentation;
//! * [`gradcheck`] — the finite-difference verification suite;
//! * [`commands`] — the implementations behind the CLI subcommands.
//!
//! Precision is a type parameter on the numeric stack: training runs in
//! `f32`, gradient checks and metric oracles in `f64`. Every stochastic
//! component draws from a seed-derived ChaCha stream, so any run is
//! reproducible bit-for-bit on one machine from its seed.

pub mod augment;
pub mod blocks;
pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
