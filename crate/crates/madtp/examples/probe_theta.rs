use madtp::dtp;
use madtp::harness::{synth::gen_synthetic, RunConfig};
use madtp::mag::{project, token_attention};
use madtp::vlt::{init_weights, mhsa_forward, tokenize, Modality};

fn main() {
    let config = RunConfig::default();
    let (weights, mag) = init_weights(&config.model).unwrap();
    let data = gen_synthetic(&config.synth_config(4), config.data_seed()).unwrap();
    let sample = &data[0];
    println!(
        "difficulty={} planted_patches={:?}",
        sample.difficulty, sample.planted_patches
    );

    let inst = tokenize(&sample.image, Modality::Vision, &config.model, &weights).unwrap();
    let (tokens, attn) = mhsa_forward(&inst.tokens, &weights.vision_blocks[0], 4).unwrap();
    let mapped = project(&tokens, Modality::Vision, 0, &mag.projections).unwrap();
    let align = token_attention(&mag.learnable, &mapped).unwrap();

    let imp = dtp::importance(&attn.head_avg, &align.token_map, 0, Default::default()).unwrap();
    let n = imp.fused.len() as f64;
    let mut sorted = imp.fused.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mean = 1.0 / n;
    let median = sorted[sorted.len() / 2];
    println!(
        "TIS*n: top5={:?} median={:.3} mean=1.0 below_mean_frac={:.3}",
        sorted.iter().take(5).map(|v| (v * n * 100.0).round() / 100.0).collect::<Vec<_>>(),
        median * n,
        imp.fused.iter().filter(|&&v| v <= mean).count() as f64 / n
    );

    // Token map row stats: max entry and argmax token per row.
    for r in 0..align.token_map.rows() {
        let row = align.token_map.row(r);
        let (mut amax, mut imax) = (0.0, 0);
        for (i, &v) in row.iter().enumerate() {
            if v > amax {
                amax = v;
                imax = i;
            }
        }
        println!(
            "  row {r}: max={:.4} at token {imax} (tis*n={:.2}) planted={}",
            amax,
            imp.fused[imax] * n,
            imax > 0 && sample.planted_patches.contains(&(imax - 1))
        );
    }

    for t in [0.01, 0.1, 1.0, 5.0, 20.0, 100.0, 1000.0] {
        let sparse = dtp::sparse_token_attention(&align.token_map, t).unwrap();
        let theta = dtp::threshold(&sparse, &imp.fused).unwrap();
        let support: usize =
            sparse.data().iter().filter(|&&v| v > 0.0).count() / sparse.rows();
        let kept = imp.fused.iter().filter(|&&v| v > theta).count();
        println!(
            "T={t:<7} theta*n={:.4} mean_support={support} kept={kept}/{}",
            theta * n,
            imp.fused.len()
        );
    }
}
