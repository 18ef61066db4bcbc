use madtp::dtp::KeepPolicy;
use madtp::harness::{run_simulate, RunConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gain: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32.0);
    let qk: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let filler: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.18);
    let strength: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let k: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(8);

    for policy in [KeepPolicy::PerInstance, KeepPolicy::MaxKeep] {
        let mut config = RunConfig::default();
        config.dataset_size = 64;
        config.batch_size = 32;
        config.model.keep_policy = policy;
        config.model.mag_projection_gain = gain;
        config.model.attention_logit_gain = qk;
        config.synth.filler_fraction = filler;
        config.synth.concept_strength = strength;
        config.model.learnable_count = k;
        let flops = config.flops_model();
        let baseline =
            flops.baseline_gflops(config.model.patch_count, config.model.word_count);
        let mut line = format!(
            "gain={gain} qk={qk} filler={filler} strength={strength} K={k} {policy:?} reduce:"
        );
        for t in [0.01, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0] {
            config.model.temperature = t;
            let outcome = run_simulate(&config).unwrap();
            line.push_str(&format!(
                " {:.3}",
                1.0 - outcome.report.dataset_average_gflops / baseline
            ));
        }
        println!("{line}");
    }
}
