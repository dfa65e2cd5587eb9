//! KV-cache quantization engine.
//!
//! Implements the full offline-calibration / online-quantization pipeline for
//! compressing cached Key/Value activations:
//!
//! - [`tensor`]: the KVQT on-disk tensor format for calibration activations
//!   and gradients.
//! - [`rope`]: rotary positional embeddings in both matrix-oracle and
//!   element-wise forms, so Keys can be stored pre-rotation and rotated
//!   on the fly after dequantization.
//! - [`sensitivity`]: diagonal Fisher information from gradient dumps and the
//!   per-layer sensitivity metric for one-shot mixed-precision assignment.
//! - [`nuq`]: per-layer sensitivity-weighted non-uniform codebooks (weighted
//!   1-D k-means over normalized calibration values) with optional Q-Norm
//!   distribution-shift correction.
//! - [`sparse`]: per-vector outlier detection and dense-and-sparse
//!   decomposition; CSC storage for Key outliers, CSR for Value outliers,
//!   and balanced sparse matrix-vector kernels.
//! - [`packing`]: bit-exact packing of 2/3/4-bit codes into 32-bit words.
//! - [`kvcache`]: the quantized KV cache itself with offline-calibrated
//!   per-channel Key quantization, online per-token Value quantization, and
//!   fused score / attention-output kernels.
//! - [`planner`]: memory accounting (fp16 growth, average bits per element,
//!   compression ratios).
//! - [`simulator`]: a toy multi-head attention decode harness that measures
//!   quantized-vs-full-precision fidelity and produces finite-difference
//!   gradients for the Fisher pipeline.

pub mod kvcache;
pub mod nuq;
pub mod packing;
pub mod planner;
pub mod rope;
pub mod sensitivity;
pub mod simulator;
pub mod sparse;
pub mod tensor;
