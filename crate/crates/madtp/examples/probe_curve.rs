use madtp::harness::{run_simulate, RunConfig};

fn main() {
    let mut config = RunConfig::default();
    config.dataset_size = 64;
    config.batch_size = 32;
    let flops = config.flops_model();
    let baseline =
        flops.baseline_gflops(config.model.patch_count, config.model.word_count);
    println!("baseline {baseline:.6} GFLOPs");
    for t in [
        0.001, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 12.0, 20.0,
        50.0, 100.0, 300.0, 1000.0,
    ] {
        config.model.temperature = t;
        let outcome = run_simulate(&config).unwrap();
        let mean = outcome.report.dataset_average_gflops;
        println!(
            "T={t:<8} measured={mean:.6}  ratio_of_baseline={:.4}  reduce={:.4}",
            mean / baseline,
            1.0 - mean / baseline
        );
    }
}
