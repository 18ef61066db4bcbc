//! Synthetic image-text pairs with planted cross-modal structure.
//!
//! Each concept in a shared bank owns one visual pattern and one language
//! pattern. A matched pair injects the same concepts into a random subset of
//! its patches and words; an unmatched pair draws disjoint concept sets for
//! the two sides. The remaining tokens split into bulk noise at a reference
//! norm and a small fraction of low-norm filler tokens, giving every
//! instance a three-tier importance hierarchy: filler below bulk below
//! concept carriers. Planted positions are recorded as ground truth so
//! retention of concept-carrying tokens can be scored, and the planted
//! concept count doubles as the instance difficulty used by sorted
//! inference.

use crate::error::{MadtpError, Result};
use crate::numerics::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub pairs: usize,
    pub patch_count: usize,
    pub patch_width: usize,
    pub word_count: usize,
    pub word_width: usize,
    /// Size of the shared concept bank.
    pub concept_bank: usize,
    /// Max concepts planted per pair; 0 produces pure noise, all unmatched.
    pub max_concepts: usize,
    /// Scale of the planted pattern added on top of a carrier token.
    pub concept_strength: f64,
    /// Expected norm of a bulk noise token.
    pub token_norm: f64,
    /// Shared background directions per branch; bulk tokens scatter around
    /// them, so untrained guidance scores co-move within a theme. 0 falls
    /// back to fully independent noise.
    pub background_themes: usize,
    /// Idiosyncratic noise fraction on top of a theme direction.
    pub theme_jitter: f64,
    /// Fraction of tokens demoted to low-norm filler.
    pub filler_fraction: f64,
    /// Filler norm as a fraction of the bulk norm.
    pub filler_scale: f64,
    /// Fraction of pairs whose image and text share their concepts.
    pub matched_fraction: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_count == 0 || self.word_count == 0 {
            return Err(MadtpError::invalid("synth: token counts must be >= 1"));
        }
        if self.max_concepts > 0 && self.concept_bank < 2 * self.max_concepts {
            return Err(MadtpError::invalid(
                "synth: concept bank must hold disjoint sets for unmatched pairs",
            ));
        }
        if !(0.0..=1.0).contains(&self.matched_fraction)
            || !(0.0..=0.8).contains(&self.filler_fraction)
        {
            return Err(MadtpError::invalid("synth: fractions out of range"));
        }
        if self.token_norm <= 0.0 || self.filler_scale <= 0.0 {
            return Err(MadtpError::invalid("synth: norms must be positive"));
        }
        Ok(())
    }
}

/// One generated pair plus its ground-truth sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub image: Matrix,
    pub text: Matrix,
    pub matched: bool,
    /// Number of concepts planted into this pair's image.
    pub difficulty: u32,
    /// Patch rows (0-based, pre-tokenize) carrying a planted concept.
    pub planted_patches: Vec<usize>,
    /// Word rows carrying a planted concept.
    pub planted_words: Vec<usize>,
}

/// Deterministic generation: one seeded stream drives the concept bank and
/// then every pair in order, so a fixed seed reproduces the dataset exactly.
pub fn gen_synthetic(config: &SynthConfig, seed: u64) -> Result<Vec<PairSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let visual_patterns: Vec<Vec<f64>> = (0..config.concept_bank)
        .map(|_| unit_pattern(config.patch_width, &mut rng))
        .collect();
    let language_patterns: Vec<Vec<f64>> = (0..config.concept_bank)
        .map(|_| unit_pattern(config.word_width, &mut rng))
        .collect();

    let mut samples = Vec::with_capacity(config.pairs);
    for _ in 0..config.pairs {
        let matched = config.max_concepts > 0 && rng.gen_bool(config.matched_fraction);
        let count = if config.max_concepts == 0 {
            0
        } else {
            rng.gen_range(1..=config.max_concepts)
        };

        // Matched pairs share one concept set; unmatched pairs draw two
        // disjoint sets from the bank.
        let image_concepts = draw_concepts(config.concept_bank, count, &[], &mut rng);
        let text_concepts = if matched {
            image_concepts.clone()
        } else {
            draw_concepts(config.concept_bank, count, &image_concepts, &mut rng)
        };

        let (image, mut planted_patches) = branch_tokens(
            config.patch_count,
            config.patch_width,
            config,
            &image_concepts,
            &visual_patterns,
            2..=3,
            &mut rng,
        );
        planted_patches.sort_unstable();
        let (text, mut planted_words) = branch_tokens(
            config.word_count,
            config.word_width,
            config,
            &text_concepts,
            &language_patterns,
            1..=2,
            &mut rng,
        );
        planted_words.sort_unstable();

        samples.push(PairSample {
            image,
            text,
            matched,
            difficulty: count as u32,
            planted_patches,
            planted_words,
        });
    }
    Ok(samples)
}

/// Builds one branch's raw tokens: bulk tokens scattered around shared
/// background themes at the reference norm, a filler subset shrunk to the
/// filler norm, and concept patterns added onto randomly chosen carrier
/// tokens (never fillers).
#[allow(clippy::too_many_arguments)]
fn branch_tokens(
    count: usize,
    width: usize,
    config: &SynthConfig,
    concepts: &[usize],
    patterns: &[Vec<f64>],
    spots_per_concept: std::ops::RangeInclusive<usize>,
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<usize>) {
    let component_std = config.token_norm / (width as f64).sqrt();
    let mut tokens = if config.background_themes == 0 {
        noise(count, width, component_std, rng)
    } else {
        let themes: Vec<Vec<f64>> = (0..config.background_themes)
            .map(|_| {
                let mut t = unit_pattern(width, rng);
                for v in &mut t {
                    *v *= config.token_norm;
                }
                t
            })
            .collect();
        let jitter_std = component_std * config.theme_jitter;
        let mut m = Matrix::zeros(count, width);
        for r in 0..count {
            let theme = &themes[rng.gen_range(0..themes.len())];
            for c in 0..width {
                m.set(r, c, theme[c] + crate::mag::gaussian(rng) * jitter_std);
            }
        }
        m
    };

    let filler_count = ((count as f64) * config.filler_fraction).round() as usize;
    let fillers = pick_positions(count, filler_count, rng);
    for &f in &fillers {
        for c in 0..width {
            tokens.set(f, c, tokens.at(f, c) * config.filler_scale);
        }
    }

    let mut planted = Vec::new();
    for &concept in concepts {
        let spots = rng.gen_range(spots_per_concept.clone());
        let mut placed = 0;
        let mut guard = 0;
        while placed < spots && guard < count * 8 {
            guard += 1;
            let p = rng.gen_range(0..count);
            if fillers.contains(&p) || planted.contains(&p) {
                continue;
            }
            for (c, &v) in patterns[concept].iter().enumerate() {
                tokens.set(p, c, tokens.at(p, c) + config.concept_strength * v);
            }
            planted.push(p);
            placed += 1;
        }
    }
    (tokens, planted)
}

fn unit_pattern(width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..width).map(|_| crate::mag::gaussian(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn noise(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| crate::mag::gaussian(rng) * std).collect();
    Matrix::new(rows, cols, data).expect("finite noise")
}

fn draw_concepts(
    bank: usize,
    count: usize,
    exclude: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(count);
    while chosen.len() < count {
        let c = rng.gen_range(0..bank);
        if !chosen.contains(&c) && !exclude.contains(&c) {
            chosen.push(c);
        }
    }
    chosen
}

fn pick_positions(limit: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = count.min(limit);
    let mut chosen = Vec::with_capacity(count);
    while chosen.len() < count {
        let p = rng.gen_range(0..limit);
        if !chosen.contains(&p) {
            chosen.push(p);
        }
    }
    chosen
}
