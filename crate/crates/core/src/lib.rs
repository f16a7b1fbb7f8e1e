//! Hyperspectral image denoising with 3D quasi-recurrent networks.
//!
//! Cubes are `H × W × B` arrays of `f32` in `[0, 1]` ([`hsio::HsiCube`]);
//! networks consume them as 5-D `N × C × H × W × B` tensors
//! ([`tensor::FeatureTensor`]) with the band axis innermost.
//!
//! - [`conv`], [`qru`] and [`net`] hold the layers and the encoder/decoder.
//! - [`train`] has the loss, Adam, the epoch schedule and gradient checks.
//! - [`noise`] synthesises the corruption cases and [`metrics`] scores results.
//! - [`gcs`] measures how much each band feeds each hidden state.
//! - [`cli`] drives the `qrnn3d` binary; [`config`] is its TOML run file.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN too

pub(crate) mod binio;
pub mod cli;
pub mod config;
pub mod conv;
pub mod error;
pub mod gcs;
pub mod hsio;
pub mod metrics;
pub mod net;
pub mod noise;
pub mod qru;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
