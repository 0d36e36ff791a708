//! Lossy Gaussian cloud compressor: scalar quantization, SH vector
//! quantization and adaptive range coding in a versioned container.

mod container;
mod entropy;
mod kmeans;
mod quant;

pub use container::{
    compress_cloud, compress_with, decompress_cloud, CompressedCloud, CompressionConfig, QuantGrids,
};
pub use entropy::{empirical_entropy_bytes, entropy_decode, entropy_encode, framed_len, MAX_ALPHABET};
pub use kmeans::{fit_codebook, fit_codebook_traced, Codebook, KMeansFit};
pub use quant::{dequantize_uniform, quant_step, quantize_uniform, Grid};
