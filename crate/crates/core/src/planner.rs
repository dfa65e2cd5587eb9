//! KV-cache memory accounting.
//!
//! The fp16 baseline grows as `2 * n_layers * n_heads * head_dim * batch *
//! seq_len` elements of 2 bytes. Quantized average bits per element follow
//! the reporting conventions: per-vector affine parameters are 16+16 bit for
//! nuq (16 + dense-bits for uniform integer schemes), sparse outliers cost a
//! 16-bit value plus a 16-bit per-element index, and the sparse pointer
//! arrays are 32-bit per token. Key-side overheads amortize over the `l`
//! tokens a channel spans; Value-side overheads amortize over the hidden
//! width of a token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("all shape fields must be positive")]
    NonPositiveShape,
    #[error("outlier fraction {0} outside [0, 0.5)")]
    BadFraction(f32),
    #[error("bits must be 2, 3, or 4, got {0}")]
    BadBits(u8),
    #[error("KV cache size overflows: {0} elements")]
    Overflow(u128),
    #[error("unknown scheme {0:?} (expected fp16, intB[-P%], or nuqB[-P%])")]
    BadScheme(String),
}

/// Bit-width conventions differ per scheme: integer quantization stores a
/// low-precision zero-point with a 16-bit scale; non-uniform stores 16-bit
/// scale and offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Fp16,
    IntUniform,
    Nuq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub n_layers: u64,
    pub n_heads: u64,
    pub head_dim: u64,
    pub batch: u64,
    pub seq_len: u64,
    pub bits: u8,
    pub outlier_fraction: f32,
    pub scheme: Scheme,
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.head_dim == 0
            || self.batch == 0
            || self.seq_len == 0
        {
            return Err(PlanError::NonPositiveShape);
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return Err(PlanError::BadFraction(self.outlier_fraction));
        }
        if self.scheme != Scheme::Fp16 && !matches!(self.bits, 2 | 3 | 4) {
            return Err(PlanError::BadBits(self.bits));
        }
        Ok(())
    }

    fn hidden(&self) -> f64 {
        self.n_heads as f64 * self.head_dim as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub fp16_bytes: u128,
    pub quant_bytes: f64,
    pub avg_bits_per_element: f64,
    pub compression_ratio: f64,
}

/// Total cached K+V elements: `2 * n * h * d * b * l`.
fn total_elements(cfg: &PlanConfig) -> Result<u128, PlanError> {
    2u128
        .checked_mul(cfg.n_layers as u128)
        .and_then(|e| e.checked_mul(cfg.n_heads as u128))
        .and_then(|e| e.checked_mul(cfg.head_dim as u128))
        .and_then(|e| e.checked_mul(cfg.batch as u128))
        .and_then(|e| e.checked_mul(cfg.seq_len as u128))
        .ok_or(PlanError::Overflow(u128::MAX))
}

/// fp16 KV-cache bytes: 2 bytes per element.
pub fn fp16_kv_bytes(cfg: &PlanConfig) -> Result<u128, PlanError> {
    cfg.validate()?;
    let elements = total_elements(cfg)?;
    elements
        .checked_mul(2)
        .ok_or(PlanError::Overflow(elements))
}

/// Average stored bits per cached element, averaged over the K and V halves.
pub fn avg_bits(cfg: &PlanConfig) -> Result<f64, PlanError> {
    cfg.validate()?;
    if cfg.scheme == Scheme::Fp16 {
        return Ok(16.0);
    }
    let bits = cfg.bits as f64;
    let f = cfg.outlier_fraction as f64;
    let l = cfg.seq_len as f64;
    let hidden = cfg.hidden();
    let affine_bits = match cfg.scheme {
        Scheme::Nuq => 32.0,
        Scheme::IntUniform => 16.0 + bits,
        Scheme::Fp16 => unreachable!(),
    };
    // sparse: 16-bit value + 16-bit per-element index; 32-bit per-token pointer
    let sparse_bits = f * 32.0;
    let key_half = bits + affine_bits / l + sparse_bits + 32.0 / l;
    let value_half = bits + affine_bits / hidden + sparse_bits + 32.0 / hidden;
    Ok((key_half + value_half) / 2.0)
}

/// `16 / avg_bits`: how much smaller than fp16 the cache becomes.
pub fn compression_ratio(cfg: &PlanConfig) -> Result<f64, PlanError> {
    Ok(16.0 / avg_bits(cfg)?)
}

pub fn plan(cfg: &PlanConfig) -> Result<PlanReport, PlanError> {
    let fp16 = fp16_kv_bytes(cfg)?;
    let avg = avg_bits(cfg)?;
    let quant_bytes = fp16 as f64 * avg / 16.0;
    Ok(PlanReport {
        fp16_bytes: fp16,
        quant_bytes,
        avg_bits_per_element: avg,
        compression_ratio: 16.0 / avg,
    })
}

/// Parses scheme strings like `fp16`, `int4`, `nuq3`, `nuq4-1%`, `nuq2-0.5%`.
pub fn parse_scheme(s: &str) -> Result<(Scheme, u8, f32), PlanError> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("fp16") {
        return Ok((Scheme::Fp16, 16, 0.0));
    }
    let (scheme, rest) = if let Some(rest) = s.strip_prefix("nuq") {
        (Scheme::Nuq, rest)
    } else if let Some(rest) = s.strip_prefix("int") {
        (Scheme::IntUniform, rest)
    } else {
        return Err(PlanError::BadScheme(s.to_string()));
    };
    let (bits_str, frac) = match rest.split_once('-') {
        Some((b, f)) => {
            let pct = f
                .strip_suffix('%')
                .ok_or_else(|| PlanError::BadScheme(s.to_string()))?;
            let pct: f32 = pct
                .parse()
                .map_err(|_| PlanError::BadScheme(s.to_string()))?;
            (b, pct / 100.0)
        }
        None => (rest, 0.0),
    };
    let bits: u8 = bits_str
        .parse()
        .map_err(|_| PlanError::BadScheme(s.to_string()))?;
    if !matches!(bits, 2 | 3 | 4) {
        return Err(PlanError::BadBits(bits));
    }
    if !(0.0..0.5).contains(&frac) {
        return Err(PlanError::BadFraction(frac));
    }
    Ok((scheme, bits, frac))
}
