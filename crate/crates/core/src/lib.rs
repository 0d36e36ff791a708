//! Restoration-augmented compression for 3D Gaussian splatting.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`scene`]: Gaussian clouds, cameras, images, toy-scene synthesis and file I/O.
//! - [`render`]: CPU alpha-compositing rasterizer and its analytic backward pass.
//! - [`compress`]: lossy attribute compressor with k-means SH codebooks and a range coder.
//! - [`residual`]: block-DCT codec for the rendering residual used as side information.
//! - [`restore`]: residual-predicting convolutional restorer and its training loop.
//! - [`refine`]: re-optimisation of compressed Gaussians against restored views.
//! - [`metrics`]: PSNR / SSIM, storage accounting, CSV and SVG reporting.
//! - [`pipeline`]: end-to-end runs, rate-distortion sweeps and ablation grids.

pub mod compress;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod residual;
pub mod restore;
pub mod scene;

pub use error::{Error, Result};
