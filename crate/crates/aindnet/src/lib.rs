//! Blind image denoising with a noise-level-conditioned network.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`]: NHWC tensors, convolution/pooling/resampling kernels and a
//!   reverse-mode tape;
//! - [`noise`]: synthetic camera-noise generation with per-pixel ground
//!   truth noise-level maps;
//! - [`model`]: the denoiser itself, a U-Net conditioned on an estimated
//!   noise-level map through adaptive instance normalization;
//! - [`train`]: losses, the Adam optimizer, tag-restricted parameter
//!   updates and the training loop;
//! - [`eval`]: PSNR/SSIM, estimator accuracy, geometric self-ensembling
//!   and the few-shot transfer harness;
//! - [`checkpoint`], [`config`], [`dataset`], [`image_io`], [`cli`]:
//!   serialization, run configuration and the command-line surface.

pub mod gradcheck;
pub mod noise;
pub mod params;
pub mod tensor;

pub use tensor::{Scalar, Shape, Tape, Tensor, ValueId};
