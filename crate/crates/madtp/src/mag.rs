//! Alignment guidance: shared learnable tokens attend the projected tokens
//! of both branches, producing per-layer token attention maps (the pruning
//! guidance signal), aligned feature sets, and the cosine alignment loss.

use crate::error::{MadtpError, Result};
use crate::numerics::{cosine_similarity, scaled_dot_attention, Matrix};
use crate::vlt::Modality;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The shared learnable token bank, one instance per model.
///
/// All layers and both branches attend through the same `K x d_k` matrix;
/// sharing is by reference, which the model-level tests assert.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnableTokens {
    pub tokens: Matrix,
}

impl LearnableTokens {
    /// Seeded Gaussian init with standard deviation `1/sqrt(d_k)`.
    pub fn init(count: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let data = (0..count * width).map(|_| gaussian(rng) * std).collect();
        LearnableTokens { tokens: Matrix::new(count, width, data).expect("finite init") }
    }

    pub fn count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Per-layer linear maps into the shared space: one (weight, bias) pair per
/// modality per layer. Weights are stored `d_in x d_k` so projection is a
/// right-multiplication on row-token matrices.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    pub vision_w: Vec<Matrix>,
    pub vision_b: Vec<Vec<f64>>,
    pub language_w: Vec<Matrix>,
    pub language_b: Vec<Vec<f64>>,
}

impl ProjectionWeights {
    /// Seeded Gaussian init. `gain` scales the weight standard deviation
    /// above the usual `1/sqrt(d_in)`; a gain above 1 sharpens the token
    /// attention maps, which widens the temperature controller's usable
    /// dynamic range on the toy model.
    pub fn init(
        layers: usize,
        d_vision: usize,
        d_language: usize,
        d_k: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut make = |d_in: usize| -> (Vec<Matrix>, Vec<Vec<f64>>) {
            let std = gain / (d_in as f64).sqrt();
            let mut ws = Vec::with_capacity(layers);
            let mut bs = Vec::with_capacity(layers);
            for _ in 0..layers {
                let data = (0..d_in * d_k).map(|_| gaussian(rng) * std).collect();
                ws.push(Matrix::new(d_in, d_k, data).expect("finite init"));
                bs.push(vec![0.0; d_k]);
            }
            (ws, bs)
        };
        let (vision_w, vision_b) = make(d_vision);
        let (language_w, language_b) = make(d_language);
        ProjectionWeights { vision_w, vision_b, language_w, language_b }
    }

    pub fn layers(&self) -> usize {
        self.vision_w.len()
    }

    fn pair(&self, modality: Modality, layer: usize) -> Result<(&Matrix, &[f64])> {
        let (ws, bs) = match modality {
            Modality::Vision => (&self.vision_w, &self.vision_b),
            Modality::Language => (&self.language_w, &self.language_b),
        };
        if layer >= ws.len() {
            return Err(MadtpError::invalid(format!("projection layer {layer} out of range")));
        }
        Ok((&ws[layer], &bs[layer]))
    }
}

/// One layer's alignment products for one branch.
#[derive(Debug, Clone)]
pub struct AlignmentOutput {
    /// `K x n_alive` row-stochastic token attention map.
    pub token_map: Matrix,
    /// `K x d_k` aligned features (convex combinations of projected tokens).
    pub features: Matrix,
}

/// Projects one branch's token rows into the shared `d_k` space for the
/// given layer: `tokens * W + B`.
pub fn project(
    tokens: &Matrix,
    modality: Modality,
    layer: usize,
    weights: &ProjectionWeights,
) -> Result<Matrix> {
    let (w, b) = weights.pair(modality, layer)?;
    if tokens.cols() != w.rows() {
        return Err(MadtpError::invalid(format!(
            "project: token width {} does not match weight input width {}",
            tokens.cols(),
            w.rows()
        )));
    }
    tokens.matmul(w)?.add_row(b)
}

/// Attends the learnable tokens over projected tokens:
/// `A = row_softmax(E * mapped^T / sqrt(d_k))`, `features = A * mapped`.
pub fn token_attention(learnable: &LearnableTokens, mapped: &Matrix) -> Result<AlignmentOutput> {
    if mapped.cols() != learnable.width() {
        return Err(MadtpError::invalid(format!(
            "token_attention: mapped width {} vs learnable width {}",
            mapped.cols(),
            learnable.width()
        )));
    }
    let scale = (learnable.width() as f64).sqrt();
    let (features, token_map) = scaled_dot_attention(&learnable.tokens, mapped, mapped, scale)?;
    Ok(AlignmentOutput { token_map, features })
}

/// Mean cosine misalignment between paired feature rows:
/// `(1/K) * sum_i (1 - cos(v_i, l_i))`, in `[0, 2]`.
pub fn alignment_loss(vision_features: &Matrix, language_features: &Matrix) -> Result<f64> {
    if vision_features.rows() != language_features.rows()
        || vision_features.cols() != language_features.cols()
    {
        return Err(MadtpError::invalid("alignment_loss: feature shape mismatch"));
    }
    let k = vision_features.rows();
    if k == 0 {
        return Err(MadtpError::invalid("alignment_loss: no feature rows"));
    }
    let mut total = 0.0;
    for i in 0..k {
        total += 1.0 - cosine_similarity(vision_features.row(i), language_features.row(i))?;
    }
    Ok(total / k as f64)
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout obvious.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn project_identity_weights_pass_through() {
        let mut w = ProjectionWeights::init(1, 3, 3, 3, 1.0, &mut rng());
        let mut ident = Matrix::zeros(3, 3);
        for i in 0..3 {
            ident.set(i, i, 1.0);
        }
        w.vision_w[0] = ident;
        w.vision_b[0] = vec![0.0; 3];
        let tokens = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap();
        let out = project(&tokens, Modality::Vision, 0, &w).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn project_zero_weights_yield_bias_rows() {
        let mut w = ProjectionWeights::init(1, 2, 2, 2, 1.0, &mut rng());
        w.language_w[0] = Matrix::zeros(2, 2);
        w.language_b[0] = vec![0.25, -0.75];
        let tokens = Matrix::new(3, 2, vec![9.0; 6]).unwrap();
        let out = project(&tokens, Modality::Language, 0, &w).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.25, -0.75]);
        }
    }

    #[test]
    fn project_matches_naive_reference() {
        let w = ProjectionWeights::init(1, 3, 3, 2, 1.0, &mut rng());
        let tokens =
            Matrix::new(3, 3, vec![0.1, -0.4, 2.0, 1.5, 0.0, -1.0, 0.3, 0.3, 0.3]).unwrap();
        let out = project(&tokens, Modality::Vision, 0, &w).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mut acc = w.vision_b[0][c];
                for k in 0..3 {
                    acc += tokens.at(r, k) * w.vision_w[0].at(k, c);
                }
                assert!((out.at(r, c) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_attention_single_token_concentrates() {
        let learnable = LearnableTokens::init(4, 3, &mut rng());
        let mapped = Matrix::new(1, 3, vec![0.2, -0.1, 0.9]).unwrap();
        let out = token_attention(&learnable, &mapped).unwrap();
        assert_eq!(out.token_map.rows(), 4);
        assert_eq!(out.token_map.cols(), 1);
        for r in 0..4 {
            assert!((out.token_map.at(r, 0) - 1.0).abs() < 1e-15);
            for c in 0..3 {
                assert!((out.features.at(r, c) - mapped.at(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn token_attention_aligned_row_saturates() {
        // One learnable row equal to a mapped token, with norms giving a
        // logit gap >= 10 over the alternatives.
        let mut learnable = LearnableTokens::init(1, 2, &mut rng());
        learnable.tokens = Matrix::new(1, 2, vec![8.0, 0.0]).unwrap();
        let mapped = Matrix::new(2, 2, vec![8.0, 0.0, 0.0, 8.0]).unwrap();
        let out = token_attention(&learnable, &mapped).unwrap();
        assert!(out.token_map.at(0, 0) > 0.99);
    }

    #[test]
    fn token_attention_rows_sum_to_one() {
        let learnable = LearnableTokens::init(3, 4, &mut rng());
        let data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let mapped = Matrix::new(5, 4, data).unwrap();
        let out = token_attention(&learnable, &mapped).unwrap();
        for r in 0..3 {
            let sum: f64 = out.token_map.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_loss_extremes() {
        let a = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(alignment_loss(&a, &a).unwrap(), 0.0);

        let neg = Matrix::new(2, 2, vec![-1.0, 0.0, 0.0, -2.0]).unwrap();
        assert!((alignment_loss(&a, &neg).unwrap() - 2.0).abs() < 1e-12);

        let orth = Matrix::new(2, 2, vec![0.0, 3.0, 5.0, 0.0]).unwrap();
        assert!((alignment_loss(&a, &orth).unwrap() - 1.0).abs() < 1e-12);

        let zero = Matrix::zeros(2, 2);
        assert!(matches!(alignment_loss(&a, &zero), Err(MadtpError::DegenerateInput(_))));
    }

    #[test]
    fn alignment_loss_symmetric_and_scale_invariant() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let b = Matrix::new(2, 3, vec![-1.0, 1.0, 0.5, 2.0, 2.0, 0.1]).unwrap();
        let ab = alignment_loss(&a, &b).unwrap();
        assert_eq!(ab, alignment_loss(&b, &a).unwrap());

        let mut scaled = a.clone();
        for c in 0..3 {
            scaled.set(0, c, a.at(0, c) * 7.5);
            scaled.set(1, c, a.at(1, c) * 0.01);
        }
        assert!((alignment_loss(&scaled, &b).unwrap() - ab).abs() < 1e-12);
    }
}
