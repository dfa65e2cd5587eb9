//! qnorm ordering in the saturated-attention regime + fisher final config
use kvq_core::kvcache::QuantConfig;
use kvq_core::simulator::*;

fn hub_spec(hidden: usize, head_dim: usize, seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::desk_scale(hidden, head_dim, seed);
    spec.samples = 4;
    spec.tokens = 32;
    spec.attended_fraction = 0.1;
    spec.hub_strength = 8.0;
    spec.attended_value_center = 0.8;
    spec.attended_value_std = 0.1;
    spec.query_hub_bias = 4.0;
    spec.spike_rate = 0.0;
    spec.outlier_scale = 1.0;
    spec.outlier_channel_count = 0;
    spec
}

fn main() {
    println!("=== qnorm at bits=2 f=0.01, hub regime, uniform fisher ===");
    let mut ok = 0;
    for seed in 0..10u64 {
        let model = ToyModel::new(2, 2, 8, seed).unwrap();
        let spec = hub_spec(model.hidden(), model.head_dim, seed);
        let data = gen_sim_data(&model, &spec, 96, seed.wrapping_add(5000)).unwrap();
        let plain = QuantConfig::nuq(2, 0.01).unwrap();
        let qn = plain.with_qnorm(true);
        let ep = decode_compare(&model, &data, SimPrecision::Quantized(plain), FisherSource::Uniform).unwrap().mean_rel_l2;
        let eq = decode_compare(&model, &data, SimPrecision::Quantized(qn), FisherSource::Uniform).unwrap().mean_rel_l2;
        if eq <= ep { ok += 1; }
        println!("seed {seed}: plain {ep:.5} qnorm {eq:.5} ok={}", eq <= ep);
    }
    println!("-> {ok}/10");

    println!("=== qnorm at bits=2 f=0, hub regime ===");
    let mut ok = 0;
    for seed in 0..10u64 {
        let model = ToyModel::new(2, 2, 8, seed).unwrap();
        let spec = hub_spec(model.hidden(), model.head_dim, seed);
        let data = gen_sim_data(&model, &spec, 96, seed.wrapping_add(5000)).unwrap();
        let plain = QuantConfig::nuq(2, 0.0).unwrap();
        let qn = plain.with_qnorm(true);
        let ep = decode_compare(&model, &data, SimPrecision::Quantized(plain), FisherSource::Uniform).unwrap().mean_rel_l2;
        let eq = decode_compare(&model, &data, SimPrecision::Quantized(qn), FisherSource::Uniform).unwrap().mean_rel_l2;
        if eq <= ep { ok += 1; }
        println!("seed {seed}: plain {ep:.5} qnorm {eq:.5} ok={}", eq <= ep);
    }
    println!("-> {ok}/10");
}
