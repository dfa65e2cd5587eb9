//! The quantized KV cache.
//!
//! Keys are quantized per-channel with thresholds, scaling factors, and the
//! codebook all calibrated offline on pre-RoPE activations; the score kernel
//! applies the rotation on the fly after dequantization. Values are
//! quantized per-token with thresholds and scaling factors computed online
//! as each token arrives. Elements outside a vector's kept range go to the
//! sparse side (CSC for Keys, CSR for Values) as exact residuals, so
//! dense + sparse reconstruction at outlier positions is bit-exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nuq::{
    self, apply_qnorm, derive_codebook, encode, AffineParams, NuqCodebook, NuqError, QNormStats,
};
use crate::packing::{PackedCodes, PackingError};
use crate::rope::{self, RopeError, RopeParams};
use crate::sensitivity::FisherDiag;
use crate::sparse::{
    vector_outlier_split, OutlierSplit, SparseCSC, SparseCSR, SparseError, DEFAULT_CHUNK,
};
use crate::tensor::{CalibrationSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum KvError {
    #[error("bits must be 2, 3, or 4, got {0}")]
    BadBits(u8),
    #[error("outlier fraction {0} outside [0, 0.5)")]
    BadFraction(f32),
    #[error("calibration set has no samples")]
    EmptyCalibration,
    #[error("calibration sample {index} has shape {found:?}, expected {expected:?}")]
    CalibrationShape {
        index: usize,
        expected: Vec<u64>,
        found: Vec<u64>,
    },
    #[error("fisher shape {found:?} does not match activation shape {expected:?}")]
    FisherShape { expected: Vec<u64>, found: Vec<u64> },
    #[error("vector has length {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("append_key must be followed by append_value before the next append_key")]
    KeyValueOrder,
    #[error("cache width {d} is not a multiple of rope head_dim {head_dim}")]
    HeadSplit { d: usize, head_dim: usize },
    #[error("cache is empty")]
    EmptyCache,
    #[error("head {head} out of range ({heads} heads)")]
    HeadOutOfRange { head: usize, heads: usize },
    #[error(transparent)]
    Nuq(#[from] NuqError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether outlier thresholds are computed per vector (per-channel for Keys,
/// per-token for Values) or once per layer matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutlierScope {
    PerVector,
    PerMatrix,
}

/// Where Keys are quantized relative to the rotary embedding. `PostRope` is
/// an ablation configuration; the production default is `PreRope`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyMode {
    PreRope,
    PostRope,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub outlier_fraction: f32,
    pub qnorm: bool,
    pub outlier_scope: OutlierScope,
    pub key_mode: KeyMode,
}

impl QuantConfig {
    /// nuqX with the given outlier fraction; per-vector thresholds,
    /// pre-RoPE Keys, no Q-Norm.
    pub fn nuq(bits: u8, outlier_fraction: f32) -> Result<Self, KvError> {
        let cfg = Self {
            bits,
            outlier_fraction,
            qnorm: false,
            outlier_scope: OutlierScope::PerVector,
            key_mode: KeyMode::PreRope,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_qnorm(mut self, qnorm: bool) -> Self {
        self.qnorm = qnorm;
        self
    }

    pub fn with_outlier_scope(mut self, scope: OutlierScope) -> Self {
        self.outlier_scope = scope;
        self
    }

    pub fn with_key_mode(mut self, mode: KeyMode) -> Self {
        self.key_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), KvError> {
        if !matches!(self.bits, 2 | 3 | 4) {
            return Err(KvError::BadBits(self.bits));
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return Err(KvError::BadFraction(self.outlier_fraction));
        }
        Ok(())
    }
}

/// One channel's frozen calibration state: kept-range thresholds and the
/// affine mapping of `[lo, hi]` onto the codebook's `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelQuant {
    pub lo: f32,
    pub hi: f32,
    pub affine: AffineParams,
}

impl ChannelQuant {
    fn from_range(lo: f32, hi: f32) -> Self {
        let affine = if lo == hi {
            AffineParams {
                scale: 1.0,
                offset: lo,
            }
        } else {
            AffineParams {
                scale: (hi - lo) / 2.0,
                offset: (hi + lo) / 2.0,
            }
        };
        Self { lo, hi, affine }
    }

    pub fn is_degenerate(&self) -> bool {
        self.lo == self.hi
    }

    fn normalize(&self, x: f32) -> f32 {
        if self.is_degenerate() {
            0.0
        } else {
            (x - self.affine.offset) / self.affine.scale
        }
    }

    /// Dense-path dequantization. A degenerate (collapsed) kept range stores
    /// normalized zeros, so dequantization returns the offset exactly.
    pub fn dequant(&self, code: u8, cb: &NuqCodebook) -> f32 {
        if self.is_degenerate() {
            self.affine.offset
        } else {
            cb.centroids()[code as usize] * self.affine.scale + self.affine.offset
        }
    }
}

/// Offline-calibrated per-channel Key quantizer; frozen after calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyQuantizer {
    channels: Vec<ChannelQuant>,
    codebook: NuqCodebook,
    qnorm: Option<QNormStats>,
    rope: RopeParams,
    key_mode: KeyMode,
    outlier_fraction: f32,
}

impl KeyQuantizer {
    pub fn d(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[ChannelQuant] {
        &self.channels
    }

    pub fn codebook(&self) -> &NuqCodebook {
        &self.codebook
    }

    pub fn qnorm_stats(&self) -> Option<&QNormStats> {
        self.qnorm.as_ref()
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    pub fn key_mode(&self) -> KeyMode {
        self.key_mode
    }

    /// Recomputes per-channel thresholds and scaling factors from the given
    /// key tensors, keeping the codebook. This is the online-recomputation
    /// comparison point for offline calibration.
    pub fn recalibrated_thresholds(&self, keys: &[Tensor]) -> Result<KeyQuantizer, KvError> {
        let (tokens, d) = check_calibration_2d(keys)?;
        if d != self.d() {
            return Err(KvError::DimMismatch {
                expected: self.d(),
                found: d,
            });
        }
        let mut channels = Vec::with_capacity(d);
        let mut pool_c = Vec::with_capacity(keys.len() * tokens);
        for c in 0..d {
            pool_c.clear();
            for t in keys {
                for n in 0..tokens {
                    pool_c.push(t.row(n)[c]);
                }
            }
            let split = vector_outlier_split(&pool_c, self.outlier_fraction)?;
            channels.push(ChannelQuant::from_range(split.lo, split.hi));
        }
        Ok(KeyQuantizer {
            channels,
            ..self.clone()
        })
    }
}

/// Per-token online Value quantizer: the codebook is offline-calibrated, the
/// thresholds and scaling factors are computed per incoming token (unless
/// the per-matrix ablation pins them from calibration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueQuantizer {
    codebook: NuqCodebook,
    qnorm: Option<QNormStats>,
    outlier_fraction: f32,
    fixed: Option<ChannelQuant>,
}

impl ValueQuantizer {
    pub fn codebook(&self) -> &NuqCodebook {
        &self.codebook
    }

    pub fn qnorm_stats(&self) -> Option<&QNormStats> {
        self.qnorm.as_ref()
    }

    pub fn outlier_fraction(&self) -> f32 {
        self.outlier_fraction
    }

    pub fn fixed_thresholds(&self) -> Option<&ChannelQuant> {
        self.fixed.as_ref()
    }
}

fn check_calibration_2d(samples: &[Tensor]) -> Result<(usize, usize), KvError> {
    let first = samples.first().ok_or(KvError::EmptyCalibration)?;
    if first.shape().len() != 2 {
        return Err(KvError::CalibrationShape {
            index: 0,
            expected: vec![0, 0],
            found: first.shape().to_vec(),
        });
    }
    for (i, s) in samples.iter().enumerate() {
        if s.shape() != first.shape() {
            return Err(KvError::CalibrationShape {
                index: i,
                expected: first.shape().to_vec(),
                found: s.shape().to_vec(),
            });
        }
    }
    Ok((first.n_rows(), first.n_cols()))
}

fn check_fisher(fisher: &FisherDiag, tokens: usize, d: usize) -> Result<(), KvError> {
    let shape = fisher.weights().shape();
    if shape != [tokens as u64, d as u64] {
        return Err(KvError::FisherShape {
            expected: vec![tokens as u64, d as u64],
            found: shape.to_vec(),
        });
    }
    Ok(())
}

/// Two-pass Q-Norm stats over pooled normalized kept values: pass 1 encodes
/// with the raw codebook to measure the post-quantization distribution, the
/// correction then restores the pre-quantization mean/std.
fn qnorm_from_pool(pool: &[f32], cb: &NuqCodebook) -> Result<(NuqCodebook, QNormStats), KvError> {
    let (mu1, sigma1) = nuq::mean_std(pool);
    let decoded: Vec<f32> = pool
        .iter()
        .map(|&x| cb.centroids()[encode(x, cb) as usize])
        .collect();
    let (mu2, sigma2) = nuq::mean_std(&decoded);
    let stats = QNormStats::new(mu1, sigma1, mu2, sigma2)?;
    Ok((apply_qnorm(cb, &stats)?, stats))
}

/// Calibrates the per-channel Key quantizer: pools each channel across
/// calibration samples and tokens, computes kept-range thresholds at
/// fraction `f`, and derives the per-layer codebook from the pooled
/// normalized kept values with Fisher weights.
pub fn calibrate_key_quantizer(
    calib: &CalibrationSet,
    fisher: &FisherDiag,
    cfg: &QuantConfig,
    rope_params: RopeParams,
) -> Result<KeyQuantizer, KvError> {
    cfg.validate()?;
    let (tokens, d) = check_calibration_2d(&calib.keys)?;
    check_fisher(fisher, tokens, d)?;
    if d % rope_params.head_dim != 0 {
        return Err(KvError::HeadSplit {
            d,
            head_dim: rope_params.head_dim,
        });
    }

    // post-RoPE ablation: calibrate on rotated activations
    let rotated: Vec<Tensor>;
    let keys: &[Tensor] = match cfg.key_mode {
        KeyMode::PreRope => &calib.keys,
        KeyMode::PostRope => {
            rotated = calib
                .keys
                .iter()
                .map(|t| {
                    let mut data = Vec::with_capacity(t.len());
                    for n in 0..tokens {
                        data.extend(rope::rope_apply_heads(&rope_params, t.row(n), n as u64)?);
                    }
                    Ok::<Tensor, KvError>(Tensor::from_rows(tokens, d, data)?)
                })
                .collect::<Result<_, _>>()?;
            &rotated
        }
    };

    let global = match cfg.outlier_scope {
        OutlierScope::PerVector => None,
        OutlierScope::PerMatrix => {
            let mut pool = Vec::with_capacity(keys.len() * tokens * d);
            for t in keys {
                pool.extend_from_slice(t.data());
            }
            Some(vector_outlier_split(&pool, cfg.outlier_fraction)?)
        }
    };

    let fw = fisher.weights().data();
    let mut channels = Vec::with_capacity(d);
    let mut norm_pool: Vec<f32> = Vec::new();
    let mut weight_pool: Vec<f32> = Vec::new();
    let mut pool_c = Vec::with_capacity(keys.len() * tokens);
    for c in 0..d {
        pool_c.clear();
        for t in keys {
            for n in 0..tokens {
                pool_c.push(t.row(n)[c]);
            }
        }
        let (lo, hi) = match &global {
            Some(split) => (split.lo, split.hi),
            None => {
                let split = vector_outlier_split(&pool_c, cfg.outlier_fraction)?;
                (split.lo, split.hi)
            }
        };
        let ch = ChannelQuant::from_range(lo, hi);
        for (i, &x) in pool_c.iter().enumerate() {
            if x >= lo && x <= hi {
                norm_pool.push(ch.normalize(x));
                weight_pool.push(fw[(i % tokens) * d + c]);
            }
        }
        channels.push(ch);
    }

    let mut codebook = derive_codebook(&norm_pool, &weight_pool, cfg.bits)?;
    let mut qnorm = None;
    if cfg.qnorm {
        let (cb, stats) = qnorm_from_pool(&norm_pool, &codebook)?;
        codebook = cb;
        qnorm = Some(stats);
    }

    Ok(KeyQuantizer {
        channels,
        codebook,
        qnorm,
        rope: rope_params,
        key_mode: cfg.key_mode,
        outlier_fraction: cfg.outlier_fraction,
    })
}

/// Calibrates the Value quantizer: derives the per-layer codebook from
/// per-token normalized kept calibration values (and, in per-matrix mode,
/// pins the layer-wide thresholds).
pub fn calibrate_value_quantizer(
    calib: &CalibrationSet,
    fisher: &FisherDiag,
    cfg: &QuantConfig,
) -> Result<ValueQuantizer, KvError> {
    cfg.validate()?;
    let (tokens, d) = check_calibration_2d(&calib.values)?;
    check_fisher(fisher, tokens, d)?;

    let fixed = match cfg.outlier_scope {
        OutlierScope::PerVector => None,
        OutlierScope::PerMatrix => {
            let mut pool = Vec::with_capacity(calib.values.len() * tokens * d);
            for t in &calib.values {
                pool.extend_from_slice(t.data());
            }
            let split = vector_outlier_split(&pool, cfg.outlier_fraction)?;
            Some(ChannelQuant::from_range(split.lo, split.hi))
        }
    };

    let fw = fisher.weights().data();
    let mut norm_pool: Vec<f32> = Vec::new();
    let mut weight_pool: Vec<f32> = Vec::new();
    for t in &calib.values {
        for n in 0..tokens {
            let row = t.row(n);
            let ch = match &fixed {
                Some(ch) => *ch,
                None => {
                    let split = vector_outlier_split(row, cfg.outlier_fraction)?;
                    ChannelQuant::from_range(split.lo, split.hi)
                }
            };
            for (c, &x) in row.iter().enumerate() {
                if x >= ch.lo && x <= ch.hi {
                    norm_pool.push(ch.normalize(x));
                    weight_pool.push(fw[n * d + c]);
                }
            }
        }
    }

    let mut codebook = derive_codebook(&norm_pool, &weight_pool, cfg.bits)?;
    let mut qnorm = None;
    if cfg.qnorm {
        let (cb, stats) = qnorm_from_pool(&norm_pool, &codebook)?;
        codebook = cb;
        qnorm = Some(stats);
    }

    Ok(ValueQuantizer {
        codebook,
        qnorm,
        outlier_fraction: cfg.outlier_fraction,
        fixed,
    })
}

/// Rows are `(token, channel, residual)`, one per nonzero, ordered by token.
fn sparse_triplets(ptr: &[usize], idx: &[usize], vals: &[f32]) -> Result<Tensor, KvError> {
    let mut rows = Vec::with_capacity(vals.len() * 3);
    for t in 0..ptr.len() - 1 {
        for i in ptr[t]..ptr[t + 1] {
            rows.extend([t as f32, idx[i] as f32, vals[i]]);
        }
    }
    Ok(Tensor::from_rows(vals.len(), 3, rows)?)
}

fn triplets_by_token(t: &Tensor, tokens: usize) -> Vec<Vec<(usize, f32)>> {
    let mut by_token = vec![Vec::new(); tokens];
    for r in 0..t.n_rows() {
        let row = t.row(r);
        by_token[row[0] as usize].push((row[1] as usize, row[2]));
    }
    by_token
}

/// Residual such that `dq + r == x` bit-exactly in f32. The plain f32
/// subtraction already satisfies this away from extreme cancellation; the
/// fix-up walk covers the remaining one-ulp cases.
fn exact_residual(x: f32, dq: f32) -> f32 {
    let mut r = x - dq;
    for _ in 0..4 {
        let recon = dq + r;
        if recon == x {
            break;
        }
        r = if recon < x { r.next_up() } else { r.next_down() };
    }
    r
}

/// Append-only quantized cache for one layer: packed dense codes, per-vector
/// affine parameters, and sparse outlier residuals.
#[derive(Debug, Clone)]
pub struct QuantizedKVCache {
    d: usize,
    bits: u8,
    /// channel-major: one packed stream per channel, indexed by token
    key_codes: Vec<PackedCodes>,
    key_sparse: SparseCSC,
    /// token-major: token t's codes occupy [t*d, (t+1)*d)
    value_codes: PackedCodes,
    value_sparse: SparseCSR,
    value_quant: Vec<ChannelQuant>,
    token_count: usize,
    awaiting_value: bool,
}

impl QuantizedKVCache {
    pub fn new(d: usize, bits: u8) -> Result<Self, KvError> {
        if !matches!(bits, 2 | 3 | 4) {
            return Err(KvError::BadBits(bits));
        }
        Ok(Self {
            d,
            bits,
            key_codes: (0..d)
                .map(|_| PackedCodes::new(bits).expect("validated bits"))
                .collect(),
            key_sparse: SparseCSC::new(d),
            value_codes: PackedCodes::new(bits).expect("validated bits"),
            value_sparse: SparseCSR::new(d),
            value_quant: Vec::new(),
            token_count: 0,
            awaiting_value: false,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn key_sparse(&self) -> &SparseCSC {
        &self.key_sparse
    }

    pub fn value_sparse(&self) -> &SparseCSR {
        &self.value_sparse
    }

    /// Per-token quantization state (thresholds + affine) stored at append.
    pub fn value_quant(&self) -> &[ChannelQuant] {
        &self.value_quant
    }

    pub fn value_affine(&self, token: usize) -> AffineParams {
        self.value_quant[token].affine
    }

    pub fn key_code(&self, channel: usize, token: usize) -> u8 {
        self.key_codes[channel].get(token)
    }

    pub fn value_code(&self, token: usize, channel: usize) -> u8 {
        self.value_codes.get(token * self.d + channel)
    }

    /// Quantizes and appends one pre-RoPE key vector. Channels outside their
    /// calibrated thresholds keep a clamped dense code and route the exact
    /// residual to the sparse matrix.
    pub fn append_key(&mut self, kq: &KeyQuantizer, k: &[f32]) -> Result<(), KvError> {
        if k.len() != self.d || kq.d() != self.d {
            return Err(KvError::DimMismatch {
                expected: self.d,
                found: k.len(),
            });
        }
        if self.awaiting_value {
            return Err(KvError::KeyValueOrder);
        }
        let rotated;
        let k = match kq.key_mode {
            KeyMode::PreRope => k,
            KeyMode::PostRope => {
                rotated = rope::rope_apply_heads(&kq.rope, k, self.token_count as u64)?;
                &rotated[..]
            }
        };
        let cb = &kq.codebook;
        let mut entries: Vec<(usize, f32)> = Vec::new();
        for (c, (&x, ch)) in k.iter().zip(&kq.channels).enumerate() {
            let code = if x < ch.lo || x > ch.hi {
                let code = encode(ch.normalize(x.clamp(ch.lo, ch.hi)), cb);
                let dq = ch.dequant(code, cb);
                entries.push((c, exact_residual(x, dq)));
                code
            } else {
                encode(ch.normalize(x), cb)
            };
            self.key_codes[c].push(code)?;
        }
        self.key_sparse.append_token(&entries)?;
        self.awaiting_value = true;
        Ok(())
    }

    /// Quantizes and appends one value vector, computing the outlier
    /// thresholds and scaling factor online for this token.
    pub fn append_value(&mut self, vq: &ValueQuantizer, v: &[f32]) -> Result<(), KvError> {
        if v.len() != self.d {
            return Err(KvError::DimMismatch {
                expected: self.d,
                found: v.len(),
            });
        }
        if !self.awaiting_value {
            return Err(KvError::KeyValueOrder);
        }
        let (ch, outlier_mask) = match &vq.fixed {
            Some(fixed) => {
                let mask: Vec<bool> = v.iter().map(|&x| x < fixed.lo || x > fixed.hi).collect();
                (*fixed, mask)
            }
            None => {
                let OutlierSplit {
                    outlier_indices,
                    lo,
                    hi,
                } = vector_outlier_split(v, vq.outlier_fraction)?;
                let mut mask = vec![false; v.len()];
                for i in outlier_indices {
                    mask[i] = true;
                }
                (ChannelQuant::from_range(lo, hi), mask)
            }
        };
        let cb = &vq.codebook;
        let mut entries: Vec<(usize, f32)> = Vec::new();
        for (c, (&x, &is_outlier)) in v.iter().zip(&outlier_mask).enumerate() {
            let code = if is_outlier {
                let code = encode(ch.normalize(x.clamp(ch.lo, ch.hi)), cb);
                let dq = ch.dequant(code, cb);
                entries.push((c, exact_residual(x, dq)));
                code
            } else {
                encode(ch.normalize(x), cb)
            };
            self.value_codes.push(code)?;
        }
        self.value_sparse.append_token(&entries)?;
        self.value_quant.push(ch);
        self.token_count += 1;
        self.awaiting_value = false;
        Ok(())
    }

    /// Dequantized pre-RoPE key for one cached token: dense LUT decode plus
    /// sparse residual scatter. Exact at outlier positions.
    pub fn dequant_key(&self, kq: &KeyQuantizer, token: usize) -> Result<Vec<f32>, KvError> {
        if token >= self.token_count {
            return Err(KvError::EmptyCache);
        }
        let cb = &kq.codebook;
        let mut out = Vec::with_capacity(self.d);
        for c in 0..self.d {
            out.push(kq.channels[c].dequant(self.key_codes[c].get(token), cb));
        }
        for (c, r) in self.key_sparse.col(token) {
            out[c] += r;
        }
        Ok(out)
    }

    /// Dequantized value for one cached token.
    pub fn dequant_value(&self, vq: &ValueQuantizer, token: usize) -> Result<Vec<f32>, KvError> {
        if token >= self.token_count {
            return Err(KvError::EmptyCache);
        }
        let cb = &vq.codebook;
        let ch = self.value_quant[token];
        let mut out = Vec::with_capacity(self.d);
        for c in 0..self.d {
            out.push(ch.dequant(self.value_code(token, c), cb));
        }
        for (c, r) in self.value_sparse.row(token) {
            out[c] += r;
        }
        Ok(out)
    }

    /// Query-key scores over all cached tokens for a full-width query that
    /// already has RoPE applied at its own position. Dense-LUT and balanced
    /// sparse contributions are summed; in pre-RoPE mode the cached Keys are
    /// rotated on the fly.
    pub fn qk_scores(&self, kq: &KeyQuantizer, q_rotated: &[f32]) -> Result<Vec<f32>, KvError> {
        if q_rotated.len() != self.d {
            return Err(KvError::DimMismatch {
                expected: self.d,
                found: q_rotated.len(),
            });
        }
        self.qk_scores_range(kq, q_rotated, 0)
    }

    /// Per-head scores: `q_head` covers channels
    /// `[head*head_dim, (head+1)*head_dim)`.
    pub fn qk_scores_head(
        &self,
        kq: &KeyQuantizer,
        q_head: &[f32],
        head: usize,
    ) -> Result<Vec<f32>, KvError> {
        let h = kq.rope.head_dim;
        if q_head.len() != h {
            return Err(KvError::DimMismatch {
                expected: h,
                found: q_head.len(),
            });
        }
        if (head + 1) * h > self.d {
            return Err(KvError::HeadOutOfRange {
                head,
                heads: self.d / h,
            });
        }
        self.qk_scores_range(kq, q_head, head * h)
    }

    fn qk_scores_range(
        &self,
        kq: &KeyQuantizer,
        q: &[f32],
        start: usize,
    ) -> Result<Vec<f32>, KvError> {
        if self.token_count == 0 {
            return Err(KvError::EmptyCache);
        }
        if kq.d() != self.d || self.d % kq.rope.head_dim != 0 {
            return Err(KvError::HeadSplit {
                d: self.d,
                head_dim: kq.rope.head_dim,
            });
        }
        let h = kq.rope.head_dim;
        debug_assert!(start % h == 0 && q.len() % h == 0);
        let range = start..start + q.len();

        // per-channel LUTs: denormalized centroid values
        let cb = &kq.codebook;
        let luts: Vec<[f32; 16]> = range
            .clone()
            .map(|c| {
                let ch = &kq.channels[c];
                let mut lut = [0.0f32; 16];
                for (code, slot) in lut.iter_mut().enumerate().take(cb.centroids().len()) {
                    *slot = ch.dequant(code as u8, cb);
                }
                lut
            })
            .collect();

        let mut scores = vec![0.0f64; self.token_count];
        match kq.key_mode {
            KeyMode::PreRope => {
                // dense: dequantize each token's keys, rotate, dot
                let mut kvec = vec![0.0f32; q.len()];
                let mut rot = vec![0.0f32; q.len()];
                for (n, score) in scores.iter_mut().enumerate() {
                    for (i, c) in range.clone().enumerate() {
                        kvec[i] = luts[i][self.key_codes[c].get(n) as usize];
                    }
                    for (kc, rc) in kvec.chunks_exact(h).zip(rot.chunks_exact_mut(h)) {
                        rope::rope_apply_into(&kq.rope, kc, n as u64, rc);
                    }
                    let mut acc = 0.0f64;
                    for (r, &qv) in rot.iter().zip(q) {
                        acc += *r as f64 * qv as f64;
                    }
                    *score = acc;
                }
                // sparse: rotation-aware balanced walk over CSC nonzeros
                self.key_sparse_rotated_scores(kq, q, start, &mut scores);
            }
            KeyMode::PostRope => {
                // no rotation: channel-major dense accumulation
                for (i, c) in range.clone().enumerate() {
                    let qv = q[i] as f64;
                    if qv == 0.0 {
                        continue;
                    }
                    for (n, score) in scores.iter_mut().enumerate() {
                        *score += luts[i][self.key_codes[c].get(n) as usize] as f64 * qv;
                    }
                }
                let mut x_full = vec![0.0f32; self.d];
                x_full[range].copy_from_slice(q);
                let sparse = self.key_sparse.balanced_spmv(&x_full)?;
                for (score, s) in scores.iter_mut().zip(sparse) {
                    *score += s as f64;
                }
            }
        }
        Ok(scores.into_iter().map(|s| s as f32).collect())
    }

    /// Sparse Key contribution with on-the-fly rotation, chunked over
    /// nonzeros like the balanced kernel. A residual at channel `c` of token
    /// `n` contributes through both channels of its rotation pair.
    fn key_sparse_rotated_scores(
        &self,
        kq: &KeyQuantizer,
        q: &[f32],
        start: usize,
        scores: &mut [f64],
    ) {
        let h = kq.rope.head_dim;
        let h2 = h / 2;
        let end = start + q.len();
        let col_ptr = self.key_sparse.col_ptr();
        let row_idx = self.key_sparse.row_idx();
        let vals = self.key_sparse.vals();
        let nnz = vals.len();
        let mut at = 0usize;
        while at < nnz {
            let chunk_end = (at + DEFAULT_CHUNK).min(nnz);
            let mut col = col_ptr.partition_point(|&p| p <= at) - 1;
            let mut partial = 0.0f64;
            for i in at..chunk_end {
                while i >= col_ptr[col + 1] {
                    scores[col] += partial;
                    partial = 0.0;
                    col += 1;
                }
                let c = row_idx[i];
                if c < start || c >= end {
                    continue;
                }
                let local = c - start;
                let within_head = local % h;
                let head_base = local - within_head;
                let pair = if within_head < h2 {
                    within_head
                } else {
                    within_head - h2
                };
                let angle = col as f64
                    * kq.rope
                        .theta_base
                        .powf(-2.0 * pair as f64 / h as f64);
                let (sin, cos) = angle.sin_cos();
                let r = vals[i] as f64;
                partial += if within_head < h2 {
                    r * (cos * q[head_base + within_head] as f64
                        + sin * q[head_base + within_head + h2] as f64)
                } else {
                    r * (cos * q[head_base + within_head] as f64
                        - sin * q[head_base + within_head - h2] as f64)
                };
            }
            scores[col] += partial;
            at = chunk_end;
        }
    }

    /// Attention-weighted sum of cached values: dense token-major LUT path
    /// plus the balanced CSR sparse product.
    pub fn av_matvec(&self, vq: &ValueQuantizer, w: &[f32]) -> Result<Vec<f32>, KvError> {
        self.av_matvec_range(vq, w, 0, self.d)
    }

    /// Per-head variant returning `head_dim` channels.
    pub fn av_matvec_head(
        &self,
        vq: &ValueQuantizer,
        w: &[f32],
        head: usize,
        head_dim: usize,
    ) -> Result<Vec<f32>, KvError> {
        if (head + 1) * head_dim > self.d {
            return Err(KvError::HeadOutOfRange {
                head,
                heads: self.d / head_dim,
            });
        }
        self.av_matvec_range(vq, w, head * head_dim, head_dim)
    }

    /// Dumps the cache state as KVQT tensors under `dir`: dense codes as
    /// integers, per-token value quantization state, and sparse triplets.
    pub fn dump_snapshot(&self, dir: impl AsRef<std::path::Path>) -> Result<(), KvError> {
        use crate::tensor::write_tensor;
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(TensorError::Io)?;
        let t = self.token_count;
        let d = self.d;

        let mut key_codes = Vec::with_capacity(d * t);
        for c in 0..d {
            for n in 0..t {
                key_codes.push(self.key_codes[c].get(n) as f32);
            }
        }
        write_tensor(
            &Tensor::from_rows(d, t, key_codes)?,
            dir.join("key_codes.kvqt"),
        )?;

        let mut value_codes = Vec::with_capacity(t * d);
        for n in 0..t {
            for c in 0..d {
                value_codes.push(self.value_code(n, c) as f32);
            }
        }
        write_tensor(
            &Tensor::from_rows(t, d, value_codes)?,
            dir.join("value_codes.kvqt"),
        )?;

        let vq: Vec<f32> = self
            .value_quant
            .iter()
            .flat_map(|q| [q.lo, q.hi, q.affine.scale, q.affine.offset])
            .collect();
        write_tensor(&Tensor::from_rows(t, 4, vq)?, dir.join("value_quant.kvqt"))?;

        write_tensor(
            &sparse_triplets(self.key_sparse.col_ptr(), self.key_sparse.row_idx(), self.key_sparse.vals())?,
            dir.join("key_sparse.kvqt"),
        )?;
        write_tensor(
            &sparse_triplets(self.value_sparse.row_ptr(), self.value_sparse.col_idx(), self.value_sparse.vals())?,
            dir.join("value_sparse.kvqt"),
        )?;
        Ok(())
    }

    /// Rebuilds a cache from a snapshot directory.
    pub fn load_snapshot(dir: impl AsRef<std::path::Path>, bits: u8) -> Result<Self, KvError> {
        use crate::tensor::read_tensor;
        let dir = dir.as_ref();
        let key_codes = read_tensor(dir.join("key_codes.kvqt"))?;
        let value_codes = read_tensor(dir.join("value_codes.kvqt"))?;
        let value_quant = read_tensor(dir.join("value_quant.kvqt"))?;
        let key_triplets = read_tensor(dir.join("key_sparse.kvqt"))?;
        let value_triplets = read_tensor(dir.join("value_sparse.kvqt"))?;

        let d = key_codes.n_rows();
        let tokens = key_codes.n_cols();
        let mut cache = Self::new(d, bits)?;
        for c in 0..d {
            for n in 0..tokens {
                cache.key_codes[c].push(key_codes.row(c)[n] as u8)?;
            }
        }
        for n in 0..tokens {
            for c in 0..d {
                cache.value_codes.push(value_codes.row(n)[c] as u8)?;
            }
        }
        for n in 0..tokens {
            let row = value_quant.row(n);
            cache.value_quant.push(ChannelQuant {
                lo: row[0],
                hi: row[1],
                affine: AffineParams {
                    scale: row[2],
                    offset: row[3],
                },
            });
        }
        let mut key_entries = triplets_by_token(&key_triplets, tokens);
        let mut value_entries = triplets_by_token(&value_triplets, tokens);
        for n in 0..tokens {
            cache.key_sparse.append_token(&std::mem::take(&mut key_entries[n]))?;
            cache.value_sparse.append_token(&std::mem::take(&mut value_entries[n]))?;
        }
        cache.token_count = tokens;
        Ok(cache)
    }

    fn av_matvec_range(
        &self,
        vq: &ValueQuantizer,
        w: &[f32],
        start: usize,
        width: usize,
    ) -> Result<Vec<f32>, KvError> {
        if w.len() != self.token_count {
            return Err(KvError::DimMismatch {
                expected: self.token_count,
                found: w.len(),
            });
        }
        let cb = &vq.codebook;
        let mut out = vec![0.0f64; width];
        for (t, &wt) in w.iter().enumerate() {
            let ch = self.value_quant[t];
            let wt = wt as f64;
            if wt == 0.0 {
                continue;
            }
            let base = t * self.d + start;
            for (i, o) in out.iter_mut().enumerate() {
                *o += wt * ch.dequant(self.value_codes.get(base + i), cb) as f64;
            }
        }
        let sparse = self.value_sparse.balanced_spmv(w)?;
        for (i, o) in out.iter_mut().enumerate() {
            *o += sparse[start + i] as f64;
        }
        Ok(out.into_iter().map(|v| v as f32).collect())
    }
}
