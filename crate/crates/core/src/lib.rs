//! Ternary neural networks on the CPU.
//!
//! Weights and activations are restricted to {-1, 0, +1} and stored as two
//! bitplanes (sign, value) in 64-bit words, so the inner products behind
//! convolutions reduce to masked XOR/XNOR plus population counts instead of
//! floating-point multiply-adds. The crate provides:
//!
//! - [`packed`]: the two-bitplane tensor layout and its invariants
//! - [`quantize`]: ternary/binary weight quantisers and hard activation steps
//! - [`activations`]: the ternary hyperbolic tangent, its derivative, and the
//!   slope (beta) continuation schedule used during training
//! - [`kernels`]: popcount dot products, packed GEMM, im2col, and the float
//!   reference convolutions
//! - [`network`]: declarative layer graphs (U-Net shaped), inference in float
//!   or packed mode, FLOP/memory accounting, and model (de)serialization
//! - [`training`]: quantisation-aware training with full-precision master
//!   weights on a synthetic segmentation task
//! - [`bench`]: the throughput harness comparing packed GEMM against the
//!   crate's own float GEMM
//!
//! The `parallel` feature (default) runs the data-parallel inner loops on a
//! rayon pool; without it everything falls back to sequential loops with
//! identical results.

pub mod activations;
pub mod bench;
pub mod error;
pub mod io;
pub mod kernels;
pub mod network;
pub mod packed;
mod parallel;
pub mod quantize;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use packed::PackedTernaryTensor;
pub use tensor::DenseTensor;
