use madtp::dtp::KeepPolicy;
use madtp::harness::{run_simulate, RunConfig};

fn main() {
    for policy in [KeepPolicy::PerInstance, KeepPolicy::MaxKeep, KeepPolicy::MeanKeep] {
        println!("== policy {policy:?}");
        let mut config = RunConfig::default();
        config.dataset_size = 64;
        config.batch_size = 32;
        config.model.keep_policy = policy;
        let flops = config.flops_model();
        let baseline =
            flops.baseline_gflops(config.model.patch_count, config.model.word_count);
        for t in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 100.0, 1000.0] {
            config.model.temperature = t;
            let outcome = run_simulate(&config).unwrap();
            let mean = outcome.report.dataset_average_gflops;
            // Mean keep fraction per layer (vision), plus how often theta
            // fell at-or-below the min score (keep-everything events).
            let layers = config.model.layers;
            let mut kept = vec![0.0; layers];
            let mut slack = 0usize;
            let mut total = 0usize;
            for pair in &outcome.report.pairs {
                for (l, layer) in pair.vision_layers.iter().enumerate() {
                    kept[l] += layer.alive_out as f64 / 65.0;
                    total += 1;
                    if layer.theta <= layer.tis_min {
                        slack += 1;
                    }
                }
            }
            let kept: Vec<String> = kept
                .iter()
                .map(|k| format!("{:.2}", k / outcome.report.pairs.len() as f64))
                .collect();
            println!(
                "T={t:<7} reduce={:.4} vision_kept_frac={} theta_below_min={}/{}",
                1.0 - mean / baseline,
                kept.join(","),
                slack,
                total
            );
        }
    }
}
