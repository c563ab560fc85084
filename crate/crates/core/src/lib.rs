//! Quantized key/value cache for transformer decode.
//!
//! The cache keeps the oldest `w_sink` and newest `w_recent` tokens in full
//! precision and stores everything in between as group-wise low-bit codes.
//! Groups run along the *inner* (reduction) dimension of the two decode-time
//! vector-matrix products, so one scale and one auxiliary word are fetched per
//! `G` multiply-accumulates instead of one per element.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: dense row-major matrices and the double-precision reference
//!   routines every other module is tested against.
//! * [`quant`]: asymmetric, symmetric and hybrid group quantization and the
//!   bit-packed [`PackedMatrix`](quant::PackedMatrix).
//! * [`kernels`]: fused dequantize-and-multiply GEMV for inner and outer
//!   grouping, with exact memory-traffic counters.
//! * [`cache`]: the windowed quantized cache.
//! * [`attention`]: multi-head attention for prefill and decode over the cache,
//!   RoPE and folded per-channel key normalization.

pub mod attention;
pub mod cache;
mod error;
pub mod kernels;
pub mod quant;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision dense matrix, the storage type of the engine.
pub type Matrix = tensor::DenseMatrix<f32>;
/// Single-precision dense vector.
pub type Vector = tensor::DenseVector<f32>;
/// Double-precision dense matrix, used by the shadow reference paths.
pub type Matrix64 = tensor::DenseMatrix<f64>;
/// Double-precision dense vector.
pub type Vector64 = tensor::DenseVector<f64>;
