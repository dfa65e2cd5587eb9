//! Diagnostics for the Q-Norm and Fisher-weighting mechanisms.

use kvq_core::kvcache::{
    calibrate_key_quantizer, calibrate_value_quantizer, QuantConfig, QuantizedKVCache,
};
use kvq_core::sensitivity::FisherDiag;
use kvq_core::simulator::*;

fn main() {
    println!("=== Q-Norm decomposition: norm ratio + residual noise ===");
    for seed in 0..4u64 {
        let model = ToyModel::with_query_scale(2, 4, 16, seed, 0.4).unwrap();
        let mut spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        spec.spike_rate = 0.002;
        let data = gen_sim_data(&model, &spec, 192, seed.wrapping_add(5000)).unwrap();
        for qnorm in [false, true] {
            let cfg = QuantConfig::nuq(2, 0.01).unwrap().with_qnorm(qnorm);
            // recompute outputs directly to measure norm ratios
            let rep = decode_compare(&model, &data, SimPrecision::Quantized(cfg), FisherSource::Uniform).unwrap();
            // quantizer stats
            let fisher = FisherDiag::uniform(data.calib[0].keys[0].shape());
            let kq = calibrate_key_quantizer(&data.calib[0], &fisher, &cfg, model.rope).unwrap();
            let vq = calibrate_value_quantizer(&data.calib[0], &fisher, &cfg).unwrap();
            let kstats = kq.qnorm_stats().map(|s| (s.sigma1 / s.sigma2, s.mu1 - s.mu2));
            let vstats = vq.qnorm_stats().map(|s| (s.sigma1 / s.sigma2, s.mu1 - s.mu2));
            println!(
                "seed {seed} qnorm={qnorm}: err {:.4} score_err {:.4} kq sig1/sig2 {:?} vq {:?}",
                rep.mean_rel_l2,
                rep.per_layer_score_err.iter().sum::<f64>() / 2.0,
                kstats,
                vstats,
            );
        }
    }

    println!("=== value-path-only Q-Norm check (uniform attention weights) ===");
    // isolate the value side: reconstruct values and average with flat weights
    for seed in 0..4u64 {
        let model = ToyModel::new(1, 4, 16, seed).unwrap();
        let mut spec = SynthSpec::desk_scale(model.hidden(), model.head_dim, seed);
        spec.spike_rate = 0.002;
        let data = gen_sim_data(&model, &spec, 128, seed.wrapping_add(100)).unwrap();
        for qnorm in [false, true] {
            let cfg = QuantConfig::nuq(2, 0.01).unwrap().with_qnorm(qnorm);
            let fisher = FisherDiag::uniform(data.calib[0].keys[0].shape());
            let kq = calibrate_key_quantizer(&data.calib[0], &fisher, &cfg, model.rope).unwrap();
            let vq = calibrate_value_quantizer(&data.calib[0], &fisher, &cfg).unwrap();
            let mut cache = QuantizedKVCache::new(model.hidden(), cfg.bits).unwrap();
            let eval_k = &data.eval_keys[0];
            let eval_v = &data.eval_values[0];
            for t in 0..eval_k.n_rows() {
                cache.append_key(&kq, eval_k.row(t)).unwrap();
                cache.append_value(&vq, eval_v.row(t)).unwrap();
            }
            let steps = eval_k.n_rows();
            let w = vec![1.0f32 / steps as f32; steps];
            let got = cache.av_matvec(&vq, &w).unwrap();
            let mut expect = vec![0.0f64; model.hidden()];
            for t in 0..steps {
                for (e, &v) in expect.iter_mut().zip(eval_v.row(t)) {
                    *e += v as f64 / steps as f64;
                }
            }
            let num: f64 = got.iter().zip(&expect).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
            let den: f64 = expect.iter().map(|b| b.powi(2)).sum();
            println!("seed {seed} qnorm={qnorm}: flat-avg rel err {:.4}", (num / den).sqrt());
        }
    }

    println!("=== Fisher: attention mass on attended tokens + group errors ===");
    for seed in 0..3u64 {
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

        // which eval tokens are attended? detect via key-hub alignment
        let layer_spec = SynthSpec {
            hidden: model.hidden(),
            head_dim: model.head_dim,
            std: spec.std,
            structure_seed: spec.structure_seed,
            ..spec
        };
        let (hub, _) = hub_structure(&layer_spec);
        let eval_k = &data.eval_keys[0];
        let hub_norm2: f32 = hub.iter().map(|h| h * h).sum();
        let attended: Vec<bool> = (0..eval_k.n_rows())
            .map(|t| {
                let dot: f32 = eval_k.row(t).iter().zip(&hub).map(|(k, h)| k * h).sum();
                dot / hub_norm2 > 2.0
            })
            .collect();
        let n_att = attended.iter().filter(|&&a| a).count();

        // raw per-head score boost of attended calib tokens at step 20
        {
            let calib_k = &data.calib[0].keys[0];
            let q_raw = data.calib_queries[0][0].row(20);
            let q = model.project_query(0, q_raw);
            let h = model.head_dim;
            let q_rot =
                kvq_core::rope::rope_apply(&model.rope, &q[0..h], 20).unwrap();
            let mut scored: Vec<(usize, f64, bool)> = (0..calib_k.n_rows())
                .map(|t| {
                    let k_rot = kvq_core::rope::rope_apply(
                        &model.rope,
                        &calib_k.row(t)[0..h],
                        t as u64,
                    )
                    .unwrap();
                    let s: f64 = k_rot
                        .iter()
                        .zip(&q_rot)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum::<f64>()
                        / (h as f64).sqrt();
                    let dot: f32 =
                        calib_k.row(t).iter().zip(&hub).map(|(k, h)| k * h).sum();
                    (t, s, dot / hub_norm2 > 2.0)
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let top: Vec<String> = scored
                .iter()
                .take(6)
                .map(|(t, s, att)| format!("t{t}{}={s:.2}", if *att { "*" } else { "" }))
                .collect();
            println!("seed {seed}: head0 step20 top scores: {}", top.join(" "));
        }

        // fisher mass concentration on attended CALIBRATION tokens
        {
            let (_fk, fv) = layer_fisher(
                &model,
                0,
                &data.calib[0],
                Some(&data.calib_queries[0]),
                FisherSource::FiniteDiff,
            )
            .unwrap();
            let calib_k = &data.calib[0].keys[0];
            let catt: Vec<bool> = (0..calib_k.n_rows())
                .map(|t| {
                    let dot: f32 = calib_k.row(t).iter().zip(&hub).map(|(k, h)| k * h).sum();
                    dot / hub_norm2 > 2.0
                })
                .collect();
            let fw = fv.weights().data();
            let hidden = model.hidden();
            let att_mass: f32 = (0..calib_k.n_rows())
                .filter(|&t| catt[t])
                .map(|t| fw[t * hidden..(t + 1) * hidden].iter().sum::<f32>())
                .sum();
            let total: f32 = fw.iter().sum();
            let n_catt = catt.iter().filter(|&&a| a).count();
            println!(
                "seed {seed}: calib sample0 attended {n_catt}/{} fisher mass {:.3}",
                calib_k.n_rows(),
                att_mass / total
            );
            let mut rows: Vec<(usize, f32)> = (0..calib_k.n_rows())
                .map(|t| (t, fw[t * hidden..(t + 1) * hidden].iter().sum::<f32>()))
                .collect();
            rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let top: Vec<String> = rows
                .iter()
                .take(8)
                .map(|(t, m)| format!("t{t}{}={m:.1}", if catt[*t] { "*" } else { "" }))
                .collect();
            println!("  top fisher rows: {}", top.join(" "));
        }

        for src in [FisherSource::FiniteDiff, FisherSource::Uniform] {
            let cfg = QuantConfig::nuq(2, 0.01).unwrap();
            let (_fk, fv) = layer_fisher(&model, 0, &data.calib[0], Some(&data.calib_queries[0]), src).unwrap();
            let vq = calibrate_value_quantizer(&data.calib[0], &fv, &cfg).unwrap();
            let kq = calibrate_key_quantizer(&data.calib[0], &fv, &cfg, model.rope).unwrap();
            let mut cache = QuantizedKVCache::new(model.hidden(), cfg.bits).unwrap();
            let eval_v = &data.eval_values[0];
            let mut att_err = 0.0f64;
            let mut att_den = 0.0f64;
            let mut other_err = 0.0f64;
            let mut other_den = 0.0f64;
            for t in 0..eval_k.n_rows() {
                cache.append_key(&kq, eval_k.row(t)).unwrap();
                cache.append_value(&vq, eval_v.row(t)).unwrap();
                let dv = cache.dequant_value(&vq, t).unwrap();
                for (a, &b) in dv.iter().zip(eval_v.row(t)) {
                    let e = (*a as f64 - b as f64).powi(2);
                    if attended[t] {
                        att_err += e;
                        att_den += (b as f64).powi(2);
                    } else {
                        other_err += e;
                        other_den += (b as f64).powi(2);
                    }
                }
            }
            println!(
                "seed {seed} src={src:?}: n_att {n_att}/{} att_rel {:.4} other_rel {:.4} centroids {:?}",
                eval_k.n_rows(),
                (att_err / att_den.max(1e-12)).sqrt(),
                (other_err / other_den.max(1e-12)).sqrt(),
                vq.codebook().centroids(),
            );
        }
    }
}
