use madtp::dtp;
use madtp::harness::{synth::gen_synthetic, RunConfig};
use madtp::mag::{project, token_attention};
use madtp::vlt::{init_weights, mhsa_forward, tokenize, Modality};

fn main() {
    let mut config = RunConfig::default();
    let args: Vec<String> = std::env::args().collect();
    if let Some(g) = args.get(1).and_then(|s| s.parse().ok()) {
        config.model.mag_projection_gain = g;
    }
    let (weights, mag) = init_weights(&config.model).unwrap();
    let data = gen_synthetic(&config.synth_config(1), config.data_seed()).unwrap();
    let s = &data[0];

    // Identify tiers by raw-token norm quantiles (positions 1..=N map to patches 0..N-1).
    let norms: Vec<f64> = (0..64)
        .map(|r| s.image.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let planted: Vec<usize> = s.planted_patches.clone();
    let fillers: Vec<usize> =
        (0..64).filter(|&p| norms[p] < 0.3).collect();
    let bulk: Vec<usize> = (0..64)
        .filter(|p| !planted.contains(p) && !fillers.contains(p))
        .collect();
    println!("tiers: planted={} fillers={} bulk={}", planted.len(), fillers.len(), bulk.len());

    let inst = tokenize(&s.image, Modality::Vision, &config.model, &weights).unwrap();
    let (tokens, attn) = mhsa_forward(&inst.tokens, &weights.vision_blocks[0], 4).unwrap();
    let mapped = project(&tokens, Modality::Vision, 0, &mag.projections).unwrap();
    let align = token_attention(&mag.learnable, &mapped).unwrap();
    let imp = dtp::importance(&attn.head_avg, &align.token_map, 0, Default::default()).unwrap();

    // Projected norms per tier (position p+1 in token space).
    let pnorm = |p: usize| -> f64 {
        mapped.row(p + 1).iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let mean_over = |set: &[usize], f: &dyn Fn(usize) -> f64| -> f64 {
        set.iter().map(|&p| f(p)).sum::<f64>() / set.len().max(1) as f64
    };
    println!(
        "proj norms: planted={:.2} bulk={:.2} filler={:.2} cls={:.2}",
        mean_over(&planted, &pnorm),
        mean_over(&bulk, &pnorm),
        mean_over(&fillers, &pnorm),
        mapped.row(0).iter().map(|v| v * v).sum::<f64>().sqrt()
    );

    let n = 65.0;
    for (name, score) in [
        ("s_cls", &imp.cls_score),
        ("s_self", &imp.self_score),
        ("s_token", &imp.token_score),
        ("tis", &imp.fused),
    ] {
        let f = |p: usize| score[p + 1] * n;
        let below = score.iter().filter(|&&v| v <= 1.0 / n).count();
        println!(
            "{name:<8} x n: planted={:.2} bulk={:.2} filler={:.2} cls={:.2} below_mean={below}/65",
            mean_over(&planted, &f),
            mean_over(&bulk, &f),
            mean_over(&fillers, &f),
            score[0] * n,
        );
    }
}
