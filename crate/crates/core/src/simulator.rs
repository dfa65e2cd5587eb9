//! Toy multi-head attention decode harness.
//!
//! Generates synthetic KV streams with planted outlier structure (fixed
//! high-variance Key channels, scattered heavy-tailed Value spikes), decodes
//! them through both a full-precision reference and the quantized cache, and
//! reports fidelity. Also produces finite-difference gradients of a toy loss
//! with respect to the cached activations, which feed the Fisher pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvcache::{
    calibrate_key_quantizer, calibrate_value_quantizer, KvError, QuantConfig, QuantizedKVCache,
};
use crate::rope::{rope_apply, RopeError, RopeParams};
use crate::sensitivity::{fisher_diag, FisherDiag, LayerSensitivity, SensitivityError};
use crate::tensor::{CalibrationError, CalibrationSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("steps must be >= 1")]
    NoSteps,
    #[error("model dims out of desk-scale range: layers {layers} (<=4), heads {heads} (<=4), head_dim {head_dim} (<=16, even)")]
    BadModelDims {
        layers: usize,
        heads: usize,
        head_dim: usize,
    },
    #[error("layer {layer} out of range ({layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("per-layer config count {found} does not match {expected} layers")]
    ConfigCount { expected: usize, found: usize },
    #[error("outlier channels {count} must be fewer than hidden width {hidden}")]
    TooManyOutlierChannels { count: usize, hidden: usize },
    #[error("eps must be positive, got {0}")]
    BadEps(f64),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
}

/// Desk-scale attention model: per-layer query projections plus rotary
/// parameters. Deterministic given the seed.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub rope: RopeParams,
    /// per-layer query projection, hidden x hidden row-major
    wq: Vec<Vec<f32>>,
    seed: u64,
}

impl ToyModel {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, seed: u64) -> Result<Self, SimError> {
        Self::with_query_scale(n_layers, n_heads, head_dim, seed, 1.0)
    }

    /// `query_scale` < 1 flattens the attention pattern (scores shrink), so
    /// outputs average over more tokens.
    pub fn with_query_scale(
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        seed: u64,
        query_scale: f32,
    ) -> Result<Self, SimError> {
        if !(1..=4).contains(&n_layers) || !(1..=4).contains(&n_heads) || head_dim > 16 {
            return Err(SimError::BadModelDims {
                layers: n_layers,
                heads: n_heads,
                head_dim,
            });
        }
        let rope = RopeParams::with_default_base(head_dim)?;
        let hidden = n_heads * head_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a_7c15_9e37_79b9);
        let scale = query_scale / (hidden as f64).sqrt() as f32;
        let wq = (0..n_layers)
            .map(|_| {
                (0..hidden * hidden)
                    .map(|_| gaussian(&mut rng) * scale)
                    .collect()
            })
            .collect();
        Ok(Self {
            n_layers,
            n_heads,
            head_dim,
            rope,
            wq,
            seed,
        })
    }

    pub fn hidden(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Query projection for one layer: `q = W_q x`.
    pub fn project_query(&self, layer: usize, x: &[f32]) -> Vec<f32> {
        let hidden = self.hidden();
        let w = &self.wq[layer];
        let mut q = vec![0.0f32; hidden];
        for (r, qv) in q.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (c, &xv) in x.iter().enumerate() {
                acc += w[r * hidden + c] as f64 * xv as f64;
            }
            *qv = acc as f32;
        }
        q
    }

    /// Raw-query offset whose projection has component `strength` along the
    /// hub direction: `beta * W_q^T hub` with `beta` solved against the
    /// projected component.
    fn hub_query_bias(&self, layer: usize, hub: &[f32], strength: f32) -> Vec<f32> {
        let hidden = self.hidden();
        if strength == 0.0 {
            return vec![0.0; hidden];
        }
        let w = &self.wq[layer];
        let mut b = vec![0.0f32; hidden];
        for (c, bv) in b.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (r, &hv) in hub.iter().enumerate() {
                acc += w[r * hidden + c] as f64 * hv as f64;
            }
            *bv = acc as f32;
        }
        let p = self.project_query(layer, &b);
        let hub_norm = hub.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let p_along: f64 = p
            .iter()
            .zip(hub)
            .map(|(a, h)| *a as f64 * *h as f64)
            .sum::<f64>()
            / hub_norm.max(1e-12);
        let beta = strength as f64 / p_along.max(1e-12);
        b.iter().map(|v| (*v as f64 * beta) as f32).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Shape and structure of the planted synthetic activations. The outlier
/// channel set is drawn from `structure_seed`, so calibration and evaluation
/// data generated with different noise seeds share the same structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub samples: usize,
    pub tokens: usize,
    pub hidden: usize,
    /// head width used to place outlier channels in rotation pairs that
    /// move substantially at desk-scale sequence lengths
    pub head_dim: usize,
    pub outlier_channel_count: usize,
    pub outlier_scale: f32,
    /// per-element probability of a heavy-tailed spike
    pub spike_rate: f64,
    pub spike_scale: f32,
    /// baseline standard deviation of the Gaussian body
    pub std: f32,
    /// fraction of tokens with hub-aligned keys and tightly clustered
    /// values; zero disables the planted sensitivity structure
    pub attended_fraction: f64,
    pub hub_strength: f32,
    /// attended values sit at +/- this magnitude (random sign per channel)
    pub attended_value_center: f32,
    pub attended_value_std: f32,
    /// bias of evaluation queries toward the hub direction, so attended
    /// tokens draw attention consistently
    pub query_hub_bias: f32,
    pub structure_seed: u64,
}

impl SynthSpec {
    pub fn desk_scale(hidden: usize, head_dim: usize, structure_seed: u64) -> Self {
        Self {
            samples: 8,
            tokens: 64,
            hidden,
            head_dim,
            outlier_channel_count: 2,
            outlier_scale: 30.0,
            spike_rate: 0.005,
            spike_scale: 8.0,
            std: 1.0,
            attended_fraction: 0.0,
            hub_strength: 0.0,
            attended_value_center: 0.0,
            attended_value_std: 0.0,
            query_hub_bias: 0.0,
            structure_seed,
        }
    }
}

/// Channels whose std is inflated by `outlier_scale`, drawn deterministically
/// from the structure seed. Candidates are limited to the first quarter of
/// each head's channels: those rotation pairs sweep O(1) radians within
/// desk-scale sequence lengths, so the pre-RoPE/post-RoPE distinction is
/// actually exercised.
pub fn outlier_channels(spec: &SynthSpec) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed ^ 0x1234_5678_9abc_def0);
    let h = spec.head_dim.max(4);
    let fast = (h / 4).max(1);
    let candidates: Vec<usize> = (0..spec.hidden)
        .filter(|c| (c % h) < fast)
        .collect();
    assert!(
        spec.outlier_channel_count <= candidates.len(),
        "not enough fast-rotating channels for the requested outlier count"
    );
    let mut channels: Vec<usize> = Vec::new();
    while channels.len() < spec.outlier_channel_count {
        let c = candidates[rng.gen_range(0..candidates.len())];
        if !channels.contains(&c) {
            channels.push(c);
        }
    }
    channels.sort_unstable();
    channels
}

/// Key-space hub direction and per-channel value cluster centers for the
/// planted sensitivity structure. The hub lives in slow-rotating pairs so
/// query-key alignment survives the positional rotation; centers sit at a
/// fixed magnitude with random signs, so attended values form two tight
/// atoms in normalized space that a sensitivity-weighted codebook can
/// capture.
pub fn hub_structure(spec: &SynthSpec) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed ^ 0xfeed_beef_cafe_f00d);
    let h = spec.head_dim.max(4);
    let half = h / 2;
    let hub: Vec<f32> = (0..spec.hidden)
        .map(|c| {
            let pair = (c % h) % half;
            if pair >= half / 2 {
                gaussian(&mut rng)
            } else {
                0.0
            }
        })
        .collect();
    let centers: Vec<f32> = (0..spec.hidden)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * spec.attended_value_center
        })
        .collect();
    (hub, centers)
}

/// Synthetic one-layer calibration data: Keys carry fixed outlier channels
/// across all tokens; Values carry scattered heavy-tailed spikes with no
/// fixed pattern. Gradients are filled with ones; callers that need real
/// sensitivity replace them with finite-difference gradients.
pub fn gen_synthetic_kv(spec: &SynthSpec, seed: u64) -> Result<CalibrationSet, SimError> {
    if spec.outlier_channel_count >= spec.hidden {
        return Err(SimError::TooManyOutlierChannels {
            count: spec.outlier_channel_count,
            hidden: spec.hidden,
        });
    }
    let channels = outlier_channels(spec);
    let mut is_outlier_channel = vec![false; spec.hidden];
    for &c in &channels {
        is_outlier_channel[c] = true;
    }
    let (hub, centers) = hub_structure(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = Vec::with_capacity(spec.samples);
    let mut values = Vec::with_capacity(spec.samples);
    let mut grads = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let mut kd = Vec::with_capacity(spec.tokens * spec.hidden);
        let mut vd = Vec::with_capacity(spec.tokens * spec.hidden);
        for t in 0..spec.tokens {
            // token 0 anchors the attention pattern so every decode step has
            // an attended token to focus on
            let attended = spec.attended_fraction > 0.0
                && (t == 0 || rng.gen_bool(spec.attended_fraction));
            for c in 0..spec.hidden {
                let kstd = if is_outlier_channel[c] {
                    spec.std * spec.outlier_scale
                } else {
                    spec.std
                };
                let mut k = gaussian(&mut rng) * kstd;
                if attended {
                    k += hub[c] * spec.hub_strength;
                }
                if rng.gen_bool(spec.spike_rate) {
                    k *= spec.spike_scale;
                }
                kd.push(k);
                let mut v = if attended {
                    centers[c] * spec.std + gaussian(&mut rng) * spec.attended_value_std
                } else {
                    gaussian(&mut rng) * spec.std
                };
                if rng.gen_bool(spec.spike_rate) {
                    v *= spec.spike_scale;
                }
                vd.push(v);
            }
        }
        keys.push(Tensor::from_rows(spec.tokens, spec.hidden, kd)?);
        values.push(Tensor::from_rows(spec.tokens, spec.hidden, vd)?);
        let mut g = Tensor::zeros(vec![spec.tokens as u64, spec.hidden as u64])?;
        g.data_mut().fill(1.0);
        grads.push(g);
    }
    Ok(CalibrationSet::new(keys, values, grads.clone(), grads)?)
}

/// Per-layer synthetic data bundle for decode comparison: calibration split
/// (with matching raw query inputs for gradient probing) plus a held-out
/// evaluation stream and its query inputs.
#[derive(Debug, Clone)]
pub struct SimData {
    pub calib: Vec<CalibrationSet>,
    /// per layer, per calibration sample: raw query inputs for the toy loss
    pub calib_queries: Vec<Vec<Tensor>>,
    pub eval_keys: Vec<Tensor>,
    pub eval_values: Vec<Tensor>,
    pub eval_queries: Vec<Tensor>,
    pub steps: usize,
}

/// Generates per-layer calibration and evaluation data. Layers differ in
/// scale (layer `i` is `1 + i/2` times wider), so per-layer sensitivities
/// genuinely differ for the mixed-precision path.
pub fn gen_sim_data(
    model: &ToyModel,
    base: &SynthSpec,
    steps: usize,
    seed: u64,
) -> Result<SimData, SimError> {
    if steps == 0 {
        return Err(SimError::NoSteps);
    }
    let hidden = model.hidden();
    let mut calib = Vec::with_capacity(model.n_layers);
    let mut calib_queries = Vec::with_capacity(model.n_layers);
    let mut eval_keys = Vec::with_capacity(model.n_layers);
    let mut eval_values = Vec::with_capacity(model.n_layers);
    let mut eval_queries = Vec::with_capacity(model.n_layers);
    for layer in 0..model.n_layers {
        let spec = SynthSpec {
            hidden,
            head_dim: model.head_dim,
            std: base.std * (1.0 + layer as f32 / 2.0),
            structure_seed: base.structure_seed.wrapping_add(layer as u64),
            ..*base
        };
        let layer_salt = (layer as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (hub, _) = hub_structure(&spec);
        let bias = model.hub_query_bias(layer, &hub, spec.query_hub_bias);
        let mut gen_queries = |rng: &mut ChaCha8Rng, tokens: usize| -> Result<Tensor, SimError> {
            let qd: Vec<f32> = (0..tokens * hidden)
                .map(|i| gaussian(rng) + bias[i % hidden])
                .collect();
            Ok(Tensor::from_rows(tokens, hidden, qd)?)
        };

        let layer_calib = gen_synthetic_kv(&spec, seed ^ layer_salt)?;
        let mut qrng =
            ChaCha8Rng::seed_from_u64(seed ^ layer_salt ^ 0x3c3c_3c3c_c3c3_c3c3);
        let queries: Vec<Tensor> = (0..layer_calib.n_samples())
            .map(|_| gen_queries(&mut qrng, spec.tokens))
            .collect::<Result<_, _>>()?;
        calib.push(layer_calib);
        calib_queries.push(queries);

        let eval_spec = SynthSpec {
            samples: 1,
            tokens: steps,
            ..spec
        };
        let eval = gen_synthetic_kv(&eval_spec, seed ^ layer_salt ^ 0x5555_aaaa_3333_cccc)?;
        eval_keys.push(eval.keys.into_iter().next().expect("one sample"));
        eval_values.push(eval.values.into_iter().next().expect("one sample"));
        let mut erng =
            ChaCha8Rng::seed_from_u64(seed ^ layer_salt ^ 0x0f0f_0f0f_f0f0_f0f0);
        eval_queries.push(gen_queries(&mut erng, steps)?);
    }
    Ok(SimData {
        calib,
        calib_queries,
        eval_keys,
        eval_values,
        eval_queries,
        steps,
    })
}

/// Full-precision reference decode of one layer in f64: returns per-step
/// attention outputs (hidden wide) and per-step per-head score vectors.
fn fp_decode_layer(
    model: &ToyModel,
    layer: usize,
    keys: &Tensor,
    values: &Tensor,
    queries: &Tensor,
    steps: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>), SimError> {
    let hidden = model.hidden();
    let h = model.head_dim;
    let inv_sqrt_d = 1.0 / (h as f64).sqrt();
    let mut outputs = Vec::with_capacity(steps);
    let mut all_scores = Vec::with_capacity(steps);
    // rotated keys, grown one token per step
    let mut rot_keys: Vec<Vec<f32>> = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut rk = Vec::with_capacity(hidden);
        for head in 0..model.n_heads {
            let k = &keys.row(t)[head * h..(head + 1) * h];
            rk.extend(rope_apply(&model.rope, k, t as u64)?);
        }
        rot_keys.push(rk);

        let q = model.project_query(layer, queries.row(t));
        let mut out = vec![0.0f64; hidden];
        let mut step_scores = Vec::with_capacity(model.n_heads);
        for head in 0..model.n_heads {
            let q_rot = rope_apply(&model.rope, &q[head * h..(head + 1) * h], t as u64)?;
            let mut scores = Vec::with_capacity(t + 1);
            for rk in rot_keys.iter() {
                let mut acc = 0.0f64;
                for (a, b) in rk[head * h..(head + 1) * h].iter().zip(&q_rot) {
                    acc += *a as f64 * *b as f64;
                }
                scores.push(acc * inv_sqrt_d);
            }
            let weights = softmax(&scores);
            for (n, &w) in weights.iter().enumerate() {
                let v = &values.row(n)[head * h..(head + 1) * h];
                for (o, &vv) in out[head * h..(head + 1) * h].iter_mut().zip(v) {
                    *o += w * vv as f64;
                }
            }
            step_scores.push(scores);
        }
        outputs.push(out);
        all_scores.push(step_scores);
    }
    Ok((outputs, all_scores))
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Quantized decode of one layer through the cache kernels; f32 pipeline.
fn quant_decode_layer(
    model: &ToyModel,
    layer: usize,
    data: &SimData,
    cfg: &QuantConfig,
    fisher_key: &FisherDiag,
    fisher_value: &FisherDiag,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<Vec<f64>>>), SimError> {
    let hidden = model.hidden();
    let h = model.head_dim;
    let inv_sqrt_d = 1.0 / (h as f64).sqrt();
    let kq = calibrate_key_quantizer(&data.calib[layer], fisher_key, cfg, model.rope)?;
    let vq = calibrate_value_quantizer(&data.calib[layer], fisher_value, cfg)?;
    let mut cache = QuantizedKVCache::new(hidden, cfg.bits)?;

    let keys = &data.eval_keys[layer];
    let values = &data.eval_values[layer];
    let queries = &data.eval_queries[layer];
    let mut outputs = Vec::with_capacity(data.steps);
    let mut all_scores = Vec::with_capacity(data.steps);
    for t in 0..data.steps {
        cache.append_key(&kq, keys.row(t))?;
        cache.append_value(&vq, values.row(t))?;

        let q = model.project_query(layer, queries.row(t));
        let mut out = vec![0.0f32; hidden];
        let mut step_scores = Vec::with_capacity(model.n_heads);
        for head in 0..model.n_heads {
            let q_rot = rope_apply(&model.rope, &q[head * h..(head + 1) * h], t as u64)?;
            let raw = cache.qk_scores_head(&kq, &q_rot, head)?;
            let scores: Vec<f64> = raw.iter().map(|&s| s as f64 * inv_sqrt_d).collect();
            let weights: Vec<f32> = softmax(&scores).into_iter().map(|w| w as f32).collect();
            let head_out = cache.av_matvec_head(&vq, &weights, head, h)?;
            out[head * h..(head + 1) * h].copy_from_slice(&head_out);
            step_scores.push(scores);
        }
        outputs.push(out);
        all_scores.push(step_scores);
    }
    Ok((outputs, all_scores))
}

/// Decode fidelity: relative L2 error of attention outputs per step, the
/// worst absolute element error, and per-layer score error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_step_rel_l2: Vec<f64>,
    pub mean_rel_l2: f64,
    pub max_abs_err: f64,
    pub per_layer_score_err: Vec<f64>,
}

/// Precision of the comparison cache: `Full` bypasses quantization entirely
/// (the bits=16 passthrough).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimPrecision {
    Full,
    Quantized(QuantConfig),
}

/// Where calibration Fisher weights come from: central-difference gradients
/// of the toy loss, or all-ones (the unweighted-k-means baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherSource {
    FiniteDiff,
    Uniform,
}

pub fn decode_compare(
    model: &ToyModel,
    data: &SimData,
    precision: SimPrecision,
    fisher: FisherSource,
) -> Result<FidelityReport, SimError> {
    let cfgs = match precision {
        SimPrecision::Full => Vec::new(),
        SimPrecision::Quantized(cfg) => vec![cfg; model.n_layers],
    };
    decode_compare_per_layer(model, data, precision, &cfgs, fisher)
}

/// Per-layer configs support mixed-precision runs; `precision` selects
/// passthrough vs quantized.
pub fn decode_compare_per_layer(
    model: &ToyModel,
    data: &SimData,
    precision: SimPrecision,
    cfgs: &[QuantConfig],
    fisher: FisherSource,
) -> Result<FidelityReport, SimError> {
    if data.steps == 0 {
        return Err(SimError::NoSteps);
    }
    if matches!(precision, SimPrecision::Quantized(_)) && cfgs.len() != model.n_layers {
        return Err(SimError::ConfigCount {
            expected: model.n_layers,
            found: cfgs.len(),
        });
    }

    let steps = data.steps;
    let mut per_step_num = vec![0.0f64; steps];
    let mut per_step_den = vec![0.0f64; steps];
    let mut max_abs = 0.0f64;
    let mut per_layer_score_err = Vec::with_capacity(model.n_layers);

    for layer in 0..model.n_layers {
        let (fp_out, fp_scores) = fp_decode_layer(
            model,
            layer,
            &data.eval_keys[layer],
            &data.eval_values[layer],
            &data.eval_queries[layer],
            steps,
        )?;
        let (q_out, q_scores): (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) = match precision {
            SimPrecision::Full => (fp_out.clone(), fp_scores.clone()),
            SimPrecision::Quantized(_) => {
                let cfg = &cfgs[layer];
                let (fk, fv) = layer_fisher(
                    model,
                    layer,
                    &data.calib[layer],
                    Some(&data.calib_queries[layer]),
                    fisher,
                )?;
                let (out, scores) = quant_decode_layer(model, layer, data, cfg, &fk, &fv)?;
                (
                    out.into_iter()
                        .map(|o| o.into_iter().map(|x| x as f64).collect())
                        .collect(),
                    scores,
                )
            }
        };

        let mut score_num = 0.0f64;
        let mut score_den = 0.0f64;
        for t in 0..steps {
            for (a, b) in q_out[t].iter().zip(&fp_out[t]) {
                per_step_num[t] += (a - b).powi(2);
                per_step_den[t] += b.powi(2);
                max_abs = max_abs.max((a - b).abs());
            }
            for (qs, fs) in q_scores[t].iter().zip(&fp_scores[t]) {
                for (a, b) in qs.iter().zip(fs) {
                    score_num += (a - b).powi(2);
                    score_den += b.powi(2);
                }
            }
        }
        per_layer_score_err.push(if score_den > 0.0 {
            (score_num / score_den).sqrt()
        } else {
            score_num.sqrt()
        });
    }

    let per_step_rel_l2: Vec<f64> = per_step_num
        .iter()
        .zip(&per_step_den)
        .map(|(n, d)| if *d > 0.0 { (n / d).sqrt() } else { n.sqrt() })
        .collect();
    let mean_rel_l2 = per_step_rel_l2.iter().sum::<f64>() / steps as f64;
    Ok(FidelityReport {
        per_step_rel_l2,
        mean_rel_l2,
        max_abs_err: max_abs,
        per_layer_score_err,
    })
}

/// Fisher weights for one layer's calibration set, from the requested
/// source. `queries` are the raw query inputs paired with each calibration
/// sample; pass `None` to use deterministically seeded default queries.
pub fn layer_fisher(
    model: &ToyModel,
    layer: usize,
    calib: &CalibrationSet,
    queries: Option<&[Tensor]>,
    source: FisherSource,
) -> Result<(FisherDiag, FisherDiag), SimError> {
    match source {
        FisherSource::Uniform => {
            let shape = calib.keys[0].shape();
            Ok((FisherDiag::uniform(shape), FisherDiag::uniform(shape)))
        }
        FisherSource::FiniteDiff => {
            let (gk, gv) = match queries {
                Some(q) => finite_diff_grads_with_queries(model, layer, calib, q, 1e-3)?,
                None => finite_diff_grads(model, layer, calib, 1e-3)?,
            };
            Ok((fisher_diag(&gk)?, fisher_diag(&gv)?))
        }
    }
}

/// Toy loss for gradient probing: sum of squared attention outputs over all
/// decode steps of one layer, with queries drawn deterministically per
/// sample.
fn sample_loss(
    model: &ToyModel,
    layer: usize,
    keys: &Tensor,
    values: &Tensor,
    queries: &Tensor,
) -> Result<f64, SimError> {
    let steps = keys.n_rows();
    let (outputs, _) = fp_decode_layer(model, layer, keys, values, queries, steps)?;
    Ok(outputs
        .iter()
        .map(|o| o.iter().map(|x| x * x).sum::<f64>())
        .sum())
}

fn sample_queries(model: &ToyModel, layer: usize, sample: usize, tokens: usize) -> Tensor {
    let salt = (sample as u64 + 1)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((layer as u64) << 32);
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ salt);
    let qd: Vec<f32> = (0..tokens * model.hidden())
        .map(|_| gaussian(&mut rng))
        .collect();
    Tensor::from_rows(tokens, model.hidden(), qd).expect("valid shape")
}

/// Central-difference gradient of the toy loss with respect to every cached
/// Key/Value element of every calibration sample, with deterministically
/// seeded query inputs.
pub fn finite_diff_grads(
    model: &ToyModel,
    layer: usize,
    calib: &CalibrationSet,
    eps: f64,
) -> Result<(Vec<Tensor>, Vec<Tensor>), SimError> {
    let queries: Vec<Tensor> = (0..calib.n_samples())
        .map(|s| sample_queries(model, layer, s, calib.keys[s].n_rows()))
        .collect();
    finite_diff_grads_with_queries(model, layer, calib, &queries, eps)
}

/// Variant with caller-supplied query inputs (one tensor per calibration
/// sample), so gradients reflect the same query distribution as evaluation.
pub fn finite_diff_grads_with_queries(
    model: &ToyModel,
    layer: usize,
    calib: &CalibrationSet,
    queries: &[Tensor],
    eps: f64,
) -> Result<(Vec<Tensor>, Vec<Tensor>), SimError> {
    if eps <= 0.0 {
        return Err(SimError::BadEps(eps));
    }
    if layer >= model.n_layers {
        return Err(SimError::LayerOutOfRange {
            layer,
            layers: model.n_layers,
        });
    }
    let mut grads_keys = Vec::with_capacity(calib.n_samples());
    let mut grads_values = Vec::with_capacity(calib.n_samples());
    for s in 0..calib.n_samples() {
        let queries = &queries[s];
        let mut keys = calib.keys[s].clone();
        let mut values = calib.values[s].clone();

        let mut gk = Tensor::zeros(keys.shape().to_vec())?;
        for i in 0..keys.len() {
            let orig = keys.data()[i];
            keys.data_mut()[i] = (orig as f64 + eps) as f32;
            let plus = sample_loss(model, layer, &keys, &values, queries)?;
            keys.data_mut()[i] = (orig as f64 - eps) as f32;
            let minus = sample_loss(model, layer, &keys, &values, queries)?;
            keys.data_mut()[i] = orig;
            gk.data_mut()[i] = ((plus - minus) / (2.0 * eps)) as f32;
        }
        grads_keys.push(gk);

        let mut gv = Tensor::zeros(values.shape().to_vec())?;
        for i in 0..values.len() {
            let orig = values.data()[i];
            values.data_mut()[i] = (orig as f64 + eps) as f32;
            let plus = sample_loss(model, layer, &keys, &values, queries)?;
            values.data_mut()[i] = (orig as f64 - eps) as f32;
            let minus = sample_loss(model, layer, &keys, &values, queries)?;
            values.data_mut()[i] = orig;
            gv.data_mut()[i] = ((plus - minus) / (2.0 * eps)) as f32;
        }
        grads_values.push(gv);
    }
    Ok((grads_keys, grads_values))
}

/// Per-layer sensitivity for one-shot mixed-precision assignment: the
/// calibration set is quantized at the LOWER precision and the Fisher
/// weights come from full-precision gradients.
pub fn layer_sensitivities(
    model: &ToyModel,
    data: &SimData,
    low_cfg: &QuantConfig,
    fisher: FisherSource,
) -> Result<Vec<LayerSensitivity>, SimError> {
    let mut out = Vec::with_capacity(model.n_layers);
    for layer in 0..model.n_layers {
        let calib = &data.calib[layer];
        let (fk, fv) = layer_fisher(
            model,
            layer,
            calib,
            Some(&data.calib_queries[layer]),
            fisher,
        )?;
        let kq = calibrate_key_quantizer(calib, &fk, low_cfg, model.rope)?;
        let vq = calibrate_value_quantizer(calib, &fv, low_cfg)?;
        let mut omega = 0.0f64;
        for s in 0..calib.n_samples() {
            let keys = &calib.keys[s];
            let values = &calib.values[s];
            let tokens = keys.n_rows();
            let mut cache = QuantizedKVCache::new(model.hidden(), low_cfg.bits)?;
            let mut qk = Tensor::zeros(keys.shape().to_vec())?;
            let mut qv = Tensor::zeros(values.shape().to_vec())?;
            for t in 0..tokens {
                cache.append_key(&kq, keys.row(t))?;
                cache.append_value(&vq, values.row(t))?;
                let dk = cache.dequant_key(&kq, t)?;
                let dv = cache.dequant_value(&vq, t)?;
                let w = keys.n_cols();
                qk.data_mut()[t * w..(t + 1) * w].copy_from_slice(&dk);
                qv.data_mut()[t * w..(t + 1) * w].copy_from_slice(&dv);
            }
            omega += crate::sensitivity::layer_sensitivity(keys, &qk, &fk)?;
            omega += crate::sensitivity::layer_sensitivity(values, &qv, &fv)?;
        }
        out.push(LayerSensitivity {
            layer_id: layer,
            omega,
        });
    }
    Ok(out)
}
