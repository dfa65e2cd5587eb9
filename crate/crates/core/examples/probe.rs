//! Temporary development probe for ablation-ordering robustness.

use kvq_core::kvcache::{
    calibrate_key_quantizer, calibrate_value_quantizer, KeyMode, OutlierScope, QuantConfig,
    QuantizedKVCache,
};
use kvq_core::sensitivity::{assign_mixed_precision, FisherDiag};
use kvq_core::simulator::*;
use kvq_core::tensor::{CalibrationSet, Tensor};

/// mean over channels of each channel's relative L2 error
fn mean_channel_rel(a: &Tensor, b: &Tensor) -> f64 {
    let d = b.n_cols();
    let t = b.n_rows();
    let mut total = 0.0;
    for c in 0..d {
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..t {
            num += ((a.row(r)[c] - b.row(r)[c]) as f64).powi(2);
            den += (b.row(r)[c] as f64).powi(2);
        }
        total += (num / den.max(1e-30)).sqrt();
    }
    total / d as f64
}

fn quantize_keys_per_channel(
    rope: kvq_core::rope::RopeParams,
    calib: &CalibrationSet,
    eval: &Tensor,
    cfg: &QuantConfig,
) -> Tensor {
    let fisher = FisherDiag::uniform(calib.keys[0].shape());
    let kq = calibrate_key_quantizer(calib, &fisher, cfg, rope).unwrap();
    let vq = calibrate_value_quantizer(calib, &fisher, cfg).unwrap();
    let mut cache = QuantizedKVCache::new(eval.n_cols(), cfg.bits).unwrap();
    let mut out = Tensor::zeros(eval.shape().to_vec()).unwrap();
    for t in 0..eval.n_rows() {
        cache.append_key(&kq, eval.row(t)).unwrap();
        cache.append_value(&vq, eval.row(t)).unwrap();
        let dk = cache.dequant_key(&kq, t).unwrap();
        let w = eval.n_cols();
        out.data_mut()[t * w..(t + 1) * w].copy_from_slice(&dk);
    }
    out
}

fn quantize_keys_per_token(calib: &CalibrationSet, eval: &Tensor, cfg: &QuantConfig) -> Tensor {
    // per-token quantization of keys = the value path applied to key data
    let swapped = CalibrationSet::new(
        calib.keys.clone(),
        calib.keys.clone(),
        calib.grads_keys.clone(),
        calib.grads_keys.clone(),
    )
    .unwrap();
    let fisher = FisherDiag::uniform(calib.keys[0].shape());
    let vq = calibrate_value_quantizer(&swapped, &fisher, cfg).unwrap();
    let kq = calibrate_key_quantizer(
        &swapped,
        &fisher,
        cfg,
        kvq_core::rope::RopeParams::with_default_base(eval.n_cols()).unwrap(),
    )
    .unwrap();
    let mut cache = QuantizedKVCache::new(eval.n_cols(), cfg.bits).unwrap();
    let mut out = Tensor::zeros(eval.shape().to_vec()).unwrap();
    for t in 0..eval.n_rows() {
        cache.append_key(&kq, eval.row(t)).unwrap();
        cache.append_value(&vq, eval.row(t)).unwrap();
        let dv = cache.dequant_value(&vq, t).unwrap();
        let w = eval.n_cols();
        out.data_mut()[t * w..(t + 1) * w].copy_from_slice(&dv);
    }
    out
}

fn quantize_matrix(
    rope: kvq_core::rope::RopeParams,
    calib: &CalibrationSet,
    eval_k: &Tensor,
    eval_v: &Tensor,
    cfg: &QuantConfig,
) -> (Tensor, Tensor) {
    let fisher = FisherDiag::uniform(calib.keys[0].shape());
    let kq = calibrate_key_quantizer(calib, &fisher, cfg, rope).unwrap();
    let vq = calibrate_value_quantizer(calib, &fisher, cfg).unwrap();
    let mut cache = QuantizedKVCache::new(eval_k.n_cols(), cfg.bits).unwrap();
    let mut qk = Tensor::zeros(eval_k.shape().to_vec()).unwrap();
    let mut qv = Tensor::zeros(eval_v.shape().to_vec()).unwrap();
    for t in 0..eval_k.n_rows() {
        cache.append_key(&kq, eval_k.row(t)).unwrap();
        cache.append_value(&vq, eval_v.row(t)).unwrap();
        let w = eval_k.n_cols();
        qk.data_mut()[t * w..(t + 1) * w].copy_from_slice(&cache.dequant_key(&kq, t).unwrap());
        qv.data_mut()[t * w..(t + 1) * w]
            .copy_from_slice(&cache.dequant_value(&vq, t).unwrap());
    }
    (qk, qv)
}

fn main() {
    let seeds: Vec<u64> = (0..10).collect();

    println!("=== (a) per-channel vs per-token key error (mean channel-rel), bits=3, f=0.01 ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::new(2, 4, 16, seed).unwrap();
        let spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        let data = gen_sim_data(&model, &spec, 64, seed.wrapping_add(1000)).unwrap();
        let cfg = QuantConfig::nuq(3, 0.01).unwrap();
        let pc = quantize_keys_per_channel(model.rope, &data.calib[0], &data.eval_keys[0], &cfg);
        let pt = quantize_keys_per_token(&data.calib[0], &data.eval_keys[0], &cfg);
        let e_pc = mean_channel_rel(&pc, &data.eval_keys[0]);
        let e_pt = mean_channel_rel(&pt, &data.eval_keys[0]);
        if e_pc < e_pt {
            ok += 1;
        }
        println!("seed {seed}: per-channel {e_pc:.5} per-token {e_pt:.5} ok={}", e_pc < e_pt);
    }
    println!("-> {ok}/10");

    println!("=== (b) pre vs post rope score error, bits=3, f=0.01 (fast-pair outliers) ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::new(2, 4, 16, seed).unwrap();
        let spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        let data = gen_sim_data(&model, &spec, 96, seed.wrapping_add(2000)).unwrap();
        let pre = QuantConfig::nuq(3, 0.01).unwrap();
        let post = pre.with_key_mode(KeyMode::PostRope);
        let sp: f64 = decode_compare(&model, &data, SimPrecision::Quantized(pre), FisherSource::Uniform)
            .unwrap().per_layer_score_err.iter().sum();
        let so: f64 = decode_compare(&model, &data, SimPrecision::Quantized(post), FisherSource::Uniform)
            .unwrap().per_layer_score_err.iter().sum();
        if sp < so {
            ok += 1;
        }
        println!("seed {seed}: pre {sp:.5} post {so:.5} ok={}", sp < so);
    }
    println!("-> {ok}/10");

    println!("=== (c) f ordering 0 -> 0.1% -> 1%, bits=3, samples=16 tokens=128 ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::new(2, 4, 16, seed).unwrap();
        let mut spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        spec.samples = 16;
        spec.tokens = 128;
        spec.spike_scale = 12.0;
        spec.spike_rate = 0.004;
        let data = gen_sim_data(&model, &spec, 96, seed.wrapping_add(3000)).unwrap();
        let errs: Vec<f64> = [0.0f32, 0.001, 0.01]
            .iter()
            .map(|&f| {
                let cfg = QuantConfig::nuq(3, f).unwrap();
                decode_compare(&model, &data, SimPrecision::Quantized(cfg), FisherSource::Uniform)
                    .unwrap()
                    .mean_rel_l2
            })
            .collect();
        let good = errs[2] < errs[1] && errs[1] < errs[0];
        if good {
            ok += 1;
        }
        println!("seed {seed}: f=0 {:.5} f=0.1% {:.5} f=1% {:.5} ok={good}", errs[0], errs[1], errs[2]);
    }
    println!("-> {ok}/10");

    println!("=== (d) per-vector vs per-matrix (mean channel-rel K + token-rel V), bits=3, f=0.01 ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::new(2, 4, 16, seed).unwrap();
        let spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        let data = gen_sim_data(&model, &spec, 64, seed.wrapping_add(4000)).unwrap();
        let pv = QuantConfig::nuq(3, 0.01).unwrap();
        let pm = pv.with_outlier_scope(OutlierScope::PerMatrix);
        let eval_k = &data.eval_keys[0];
        let eval_v = &data.eval_values[0];
        let err_of = |cfg: &QuantConfig| -> f64 {
            let (qk, qv) = quantize_matrix(model.rope, &data.calib[0], eval_k, eval_v, cfg);
            // values: per-token relative error = channel-rel of the transpose; reuse per-channel on V directly
            mean_channel_rel(&qk, eval_k) + mean_channel_rel(&qv, eval_v)
        };
        let ev = err_of(&pv);
        let em = err_of(&pm);
        if ev <= em {
            ok += 1;
        }
        println!("seed {seed}: pv {ev:.5} pm {em:.5} ok={}", ev <= em);
    }
    println!("-> {ok}/10");

    println!("=== Q-Norm at bits=2, f=0.01, steps=192, flat attention ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::with_query_scale(2, 4, 16, seed, 0.4).unwrap();
        let mut spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        spec.spike_rate = 0.002;
        let data = gen_sim_data(&model, &spec, 192, seed.wrapping_add(5000)).unwrap();
        let plain = QuantConfig::nuq(2, 0.01).unwrap();
        let qn = plain.with_qnorm(true);
        let ep = decode_compare(&model, &data, SimPrecision::Quantized(plain), FisherSource::Uniform).unwrap().mean_rel_l2;
        let eq = decode_compare(&model, &data, SimPrecision::Quantized(qn), FisherSource::Uniform).unwrap().mean_rel_l2;
        if eq <= ep {
            ok += 1;
        }
        println!("seed {seed}: plain {ep:.5} qnorm {eq:.5} ok={}", eq <= ep);
    }
    println!("-> {ok}/10");

    println!("=== Fisher-weighted vs unweighted, bits=2, f=0.01, hub+bias structure ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::new(2, 2, 8, seed).unwrap();
        let mut spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        spec.samples = 4;
        spec.tokens = 32;
        spec.attended_fraction = 0.1;
        spec.hub_strength = 6.0;
        spec.attended_value_center = 0.8;
        spec.attended_value_std = 0.1;
        spec.query_hub_bias = 3.0;
        spec.spike_rate = 0.0;
        spec.outlier_scale = 1.0;
        spec.outlier_channel_count = 0;
        let data = gen_sim_data(&model, &spec, 48, seed.wrapping_add(6000)).unwrap();
        let cfg = QuantConfig::nuq(2, 0.01).unwrap();
        let ew = decode_compare(&model, &data, SimPrecision::Quantized(cfg), FisherSource::FiniteDiff).unwrap().mean_rel_l2;
        let eu = decode_compare(&model, &data, SimPrecision::Quantized(cfg), FisherSource::Uniform).unwrap().mean_rel_l2;
        if ew <= eu {
            ok += 1;
        }
        println!("seed {seed}: weighted {ew:.5} unweighted {eu:.5} ok={}", ew <= eu);
    }
    println!("-> {ok}/10");

    println!("=== offline vs online key thresholds, f=1%, multi-sample held-out ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::new(1, 4, 16, seed).unwrap();
        let spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        let calib = gen_synthetic_kv(&spec, seed.wrapping_add(9000)).unwrap();
        let heldout = gen_synthetic_kv(&spec, seed.wrapping_add(9500)).unwrap();
        let cfg = QuantConfig::nuq(3, 0.01).unwrap();
        let fisher = FisherDiag::uniform(calib.keys[0].shape());
        let kq_off = calibrate_key_quantizer(&calib, &fisher, &cfg, model.rope).unwrap();
        let kq_on = kq_off.recalibrated_thresholds(&heldout.keys).unwrap();
        let vq = calibrate_value_quantizer(&calib, &fisher, &cfg).unwrap();
        let err_with = |kq: &kvq_core::kvcache::KeyQuantizer| -> f64 {
            let mut total = 0.0;
            for s in 0..heldout.n_samples() {
                let eval = &heldout.keys[s];
                let mut cache = QuantizedKVCache::new(model.hidden(), cfg.bits).unwrap();
                let mut out = Tensor::zeros(eval.shape().to_vec()).unwrap();
                for t in 0..eval.n_rows() {
                    cache.append_key(kq, eval.row(t)).unwrap();
                    cache.append_value(&vq, heldout.values[s].row(t)).unwrap();
                    let w = eval.n_cols();
                    out.data_mut()[t * w..(t + 1) * w]
                        .copy_from_slice(&cache.dequant_key(kq, t).unwrap());
                }
                total += mean_channel_rel(&out, eval);
            }
            total / heldout.n_samples() as f64
        };
        let e_off = err_with(&kq_off);
        let e_on = err_with(&kq_on);
        let rel = (e_off - e_on).abs() / e_on;
        if rel <= 0.10 {
            ok += 1;
        }
        println!("seed {seed}: offline {e_off:.5} online {e_on:.5} reldiff {rel:.3} ok={}", rel <= 0.10);
    }
    println!("-> {ok}/10");

    println!("=== mixed precision sanity (4 layers, nuq4/nuq3) ===");
    let mut ok = 0;
    for &seed in &seeds {
        let model = ToyModel::new(4, 2, 8, seed).unwrap();
        let mut spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        spec.samples = 4;
        spec.tokens = 48;
        let data = gen_sim_data(&model, &spec, 48, seed.wrapping_add(7000)).unwrap();
        let low = QuantConfig::nuq(3, 0.01).unwrap();
        let high = QuantConfig::nuq(4, 0.01).unwrap();
        let sens = layer_sensitivities(&model, &data, &low, FisherSource::Uniform).unwrap();
        let demote = assign_mixed_precision(&sens, 2).unwrap();
        let inverse: std::collections::BTreeSet<usize> =
            (0..4).filter(|l| !demote.contains(l)).collect();
        let cfg_for = |set: &std::collections::BTreeSet<usize>| -> Vec<QuantConfig> {
            (0..4).map(|l| if set.contains(&l) { low } else { high }).collect()
        };
        let e_sens = decode_compare_per_layer(&model, &data, SimPrecision::Quantized(low), &cfg_for(&demote), FisherSource::Uniform).unwrap().mean_rel_l2;
        let e_inv = decode_compare_per_layer(&model, &data, SimPrecision::Quantized(low), &cfg_for(&inverse), FisherSource::Uniform).unwrap().mean_rel_l2;
        if e_sens <= e_inv {
            ok += 1;
        }
        println!("seed {seed}: demote{:?} {e_sens:.5} inverse{:?} {e_inv:.5} ok={}", demote, inverse, e_sens <= e_inv);
    }
    println!("-> {ok}/10");
}
