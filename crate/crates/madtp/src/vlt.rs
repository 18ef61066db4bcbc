//! A compact dual-branch vision-language transformer: pre-norm residual
//! blocks (MHSA + FFN, optional cross attention on the language branch),
//! with the alignment-guidance query and the dynamic pruning step wired
//! between self-attention and the FFN of every block.
//!
//! The model is a reproducible stand-in for a pretrained encoder pair:
//! weights come from a seeded Gaussian, so identical (seed, config, input)
//! triples produce bitwise-identical outputs and reports.

use crate::dtp::{self, KeepPolicy, PruneInput, PruneMode, PruneSettings, TisComponents};
use crate::error::{MadtpError, Result};
use crate::mag::{
    alignment_loss, gaussian, project, token_attention, AlignmentOutput, LearnableTokens,
    ProjectionWeights,
};
use crate::numerics::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Vision,
    Language,
}

/// Which branches the pruning step applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityScope {
    VisionOnly,
    LanguageOnly,
    VisionAndLanguage,
}

/// Where the per-layer alignment losses are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentLossMode {
    /// Mean over all layers.
    MeanAllLayers,
    /// Final layer only.
    FinalLayer,
}

/// Structural and behavioral knobs for the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VltConfig {
    pub layers: usize,
    pub d_vision: usize,
    pub d_language: usize,
    pub heads: usize,
    /// Patch count N (vision tokens before the class token).
    pub patch_count: usize,
    /// Word count M (language tokens before the end-of-sequence token).
    pub word_count: usize,
    /// Learnable token count K.
    pub learnable_count: usize,
    /// Learnable token width d_k.
    pub learnable_width: usize,
    /// Balance coefficient on the alignment loss.
    pub alignment_weight: f64,
    /// Sparsemax temperature.
    pub temperature: f64,
    /// Fraction of baseline compute the controller should eliminate.
    pub target_reduce_ratio: f64,
    pub ffn_mult: usize,
    pub seed: u64,
    pub pruning_enabled: bool,
    pub keep_policy: KeepPolicy,
    pub cross_attention: bool,
    pub modality_scope: ModalityScope,
    pub tis_components: TisComponents,
    pub alignment_loss_mode: AlignmentLossMode,
    /// Extra gain on the alignment projection init; sharper maps widen the
    /// temperature controller's dynamic range.
    pub mag_projection_gain: f64,
    /// Gain on the query/key init; below 1 softens untrained self-attention
    /// so the guidance maps dominate the fused score.
    pub attention_logit_gain: f64,
}

impl Default for VltConfig {
    fn default() -> Self {
        VltConfig {
            layers: 4,
            d_vision: 64,
            d_language: 64,
            heads: 4,
            patch_count: 64,
            word_count: 16,
            learnable_count: 8,
            learnable_width: 32,
            alignment_weight: 0.1,
            temperature: 1.0,
            target_reduce_ratio: 0.5,
            ffn_mult: 4,
            seed: 7,
            pruning_enabled: true,
            keep_policy: KeepPolicy::MaxKeep,
            cross_attention: false,
            modality_scope: ModalityScope::VisionAndLanguage,
            tis_components: TisComponents::default(),
            alignment_loss_mode: AlignmentLossMode::MeanAllLayers,
            mag_projection_gain: 32.0,
            attention_logit_gain: 0.25,
        }
    }
}

impl VltConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.patch_count == 0 || self.word_count == 0 {
            return Err(MadtpError::invalid("config: layers, patches and words must be >= 1"));
        }
        if self.learnable_count == 0 || self.learnable_width == 0 {
            return Err(MadtpError::invalid("config: learnable token count/width must be >= 1"));
        }
        if self.heads == 0 || self.d_vision % self.heads != 0 || self.d_language % self.heads != 0
        {
            return Err(MadtpError::invalid("config: widths must divide evenly by heads"));
        }
        if !(self.temperature > 0.0) {
            return Err(MadtpError::invalid("config: temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.target_reduce_ratio) {
            return Err(MadtpError::invalid("config: target reduce ratio must be in [0, 1)"));
        }
        if self.ffn_mult == 0 {
            return Err(MadtpError::invalid("config: ffn expansion must be >= 1"));
        }
        if self.alignment_weight < 0.0 {
            return Err(MadtpError::invalid("config: alignment weight must be >= 0"));
        }
        if self.tis_components.enabled_count() == 0 {
            return Err(MadtpError::invalid("config: at least one importance component"));
        }
        Ok(())
    }

    pub fn width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Vision => self.d_vision,
            Modality::Language => self.d_language,
        }
    }

    fn branch_pruned(&self, modality: Modality) -> bool {
        matches!(
            (self.modality_scope, modality),
            (ModalityScope::VisionAndLanguage, _)
                | (ModalityScope::VisionOnly, Modality::Vision)
                | (ModalityScope::LanguageOnly, Modality::Language)
        )
    }
}

/// One instance's alive tokens plus the bookkeeping that maps them back to
/// original sequence positions.
#[derive(Debug, Clone)]
pub struct TokenInstance {
    pub tokens: Matrix,
    /// Special positions (class / end-of-sequence) in current coordinates.
    pub specials: Vec<usize>,
    /// Original position per current row; `None` marks a merged token.
    pub origin: Vec<Option<usize>>,
    /// Liveness over original positions.
    pub alive_original: Vec<bool>,
}

impl TokenInstance {
    pub fn alive(&self) -> usize {
        self.tokens.rows()
    }
}

/// A batch of same-modality instances.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub modality: Modality,
    pub instances: Vec<TokenInstance>,
}

/// Per-branch self-attention output: the head-averaged map that feeds the
/// pruning scores, plus each head's map.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub head_avg: Matrix,
    pub per_head: Vec<Matrix>,
}

/// Weights for one transformer block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub cross: Option<CrossWeights>,
}

/// Cross-attention weights: queries in the destination width, keys/values
/// projected from the context branch's width.
#[derive(Debug, Clone)]
pub struct CrossWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln_gamma: Vec<f64>,
    pub ln_beta: Vec<f64>,
}

/// All model weights: embeddings, both block stacks, and the pair head.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub embed_vision: Matrix,
    pub embed_vision_bias: Vec<f64>,
    pub special_vision: Vec<f64>,
    pub embed_language: Matrix,
    pub embed_language_bias: Vec<f64>,
    pub special_language: Vec<f64>,
    pub vision_blocks: Vec<BlockWeights>,
    pub language_blocks: Vec<BlockWeights>,
    /// Two-way match head on the concatenated special-token outputs.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// The shared alignment module: one learnable token bank for the whole
/// model, per-layer projections.
#[derive(Debug, Clone)]
pub struct MagModule {
    pub learnable: LearnableTokens,
    pub projections: ProjectionWeights,
}

/// How the forward pass decides what to prune.
#[derive(Debug, Clone)]
pub enum EngineMode {
    /// The threshold rule plus the configured keep policy.
    Dynamic,
    /// No pruning anywhere; thresholds are still computed and reported.
    Disabled,
    /// Externally supplied keep counts, indexed `[layer][instance]`.
    ForcedCounts { vision: Vec<Vec<usize>>, language: Vec<Vec<usize>>, merge: bool },
}

/// Per-instance, per-layer, per-branch pruning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub alive_in: usize,
    pub alive_out: usize,
    pub theta: f64,
    pub tis_min: f64,
    pub tis_max: f64,
    pub merged: bool,
    pub forced: bool,
    /// Original positions still alive after this layer.
    pub kept_original: Vec<usize>,
}

/// Everything recorded for one image-text pair during a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub vision_layers: Vec<LayerReport>,
    pub language_layers: Vec<LayerReport>,
    pub alignment_losses: Vec<f64>,
}

/// Per-layer attention maps for one pair, kept only when capture is on.
#[derive(Debug, Clone, Default)]
pub struct CapturedMaps {
    pub vision_self: Vec<Matrix>,
    pub vision_token: Vec<Matrix>,
    pub language_self: Vec<Matrix>,
    pub language_token: Vec<Matrix>,
}

/// Forward output for a batch of pairs.
#[derive(Debug)]
pub struct ForwardOutput {
    pub vision: TokenBatch,
    pub language: TokenBatch,
    pub traces: Vec<InstanceTrace>,
    /// Match-head logits per pair.
    pub logits: Vec<[f64; 2]>,
    /// Aggregated alignment loss per pair (per the configured mode).
    pub alignment_loss: Vec<f64>,
    /// Head-averaged self maps and token maps, when requested.
    pub captured: Vec<CapturedMaps>,
}

/// Seeds the model and alignment module. Draw order is fixed so a seed pins
/// every weight: vision embed, vision blocks, language embed, language
/// blocks, learnable tokens, projections, head.
pub fn init_weights(config: &VltConfig) -> Result<(ModelWeights, MagModule)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dv = config.d_vision;
    let dl = config.d_language;

    let embed_vision = gaussian_matrix(dv, dv, 1.0 / (dv as f64).sqrt(), &mut rng);
    // Zero embedding bias: token magnitudes out of the embedding reflect the
    // input features, which the guidance maps key on.
    let embed_vision_bias = vec![0.0; dv];
    let special_vision = gaussian_vec(dv, 1.0 / (dv as f64).sqrt(), &mut rng);
    let vision_blocks =
        (0..config.layers).map(|_| block_weights(dv, config.ffn_mult, config.layers, config.attention_logit_gain, None, &mut rng)).collect();

    let embed_language = gaussian_matrix(dl, dl, 1.0 / (dl as f64).sqrt(), &mut rng);
    let embed_language_bias = vec![0.0; dl];
    let special_language = gaussian_vec(dl, 1.0 / (dl as f64).sqrt(), &mut rng);
    let cross_dims = config.cross_attention.then_some(dv);
    let language_blocks = (0..config.layers)
        .map(|_| block_weights(dl, config.ffn_mult, config.layers, config.attention_logit_gain, cross_dims, &mut rng))
        .collect();

    let learnable = LearnableTokens::init(config.learnable_count, config.learnable_width, &mut rng);
    let projections = ProjectionWeights::init(
        config.layers,
        dv,
        dl,
        config.learnable_width,
        config.mag_projection_gain,
        &mut rng,
    );

    let head_in = dv + dl;
    let head_w = gaussian_matrix(head_in, 2, 1.0 / (head_in as f64).sqrt(), &mut rng);
    let head_b = vec![0.0; 2];

    Ok((
        ModelWeights {
            embed_vision,
            embed_vision_bias,
            special_vision,
            embed_language,
            embed_language_bias,
            special_language,
            vision_blocks,
            language_blocks,
            head_w,
            head_b,
        },
        MagModule { learnable, projections },
    ))
}

fn block_weights(
    d: usize,
    ffn_mult: usize,
    layers: usize,
    qk_scale: f64,
    cross_context_width: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> BlockWeights {
    let std = 1.0 / (d as f64).sqrt();
    // Residual-output projections are damped by depth so a block perturbs
    // rather than overwrites its input; token identity then survives to the
    // guidance module at every layer. Query/key scales stay small enough
    // that untrained self-attention maps are soft.
    let out_scale = 0.25 / (2.0 * layers as f64).sqrt();
    let hidden = d * ffn_mult;
    BlockWeights {
        wq: gaussian_matrix(d, d, std * qk_scale, rng),
        wk: gaussian_matrix(d, d, std * qk_scale, rng),
        wv: gaussian_matrix(d, d, std, rng),
        wo: gaussian_matrix(d, d, std * out_scale, rng),
        ln1_gamma: vec![1.0; d],
        ln1_beta: vec![0.0; d],
        ffn_w1: gaussian_matrix(d, hidden, std, rng),
        ffn_b1: vec![0.0; hidden],
        ffn_w2: gaussian_matrix(hidden, d, out_scale / (hidden as f64).sqrt(), rng),
        ffn_b2: vec![0.0; d],
        ln2_gamma: vec![1.0; d],
        ln2_beta: vec![0.0; d],
        cross: cross_context_width.map(|ctx| CrossWeights {
            wq: gaussian_matrix(d, d, std * qk_scale, rng),
            wk: gaussian_matrix(ctx, d, 1.0 / (ctx as f64).sqrt() * qk_scale, rng),
            wv: gaussian_matrix(ctx, d, 1.0 / (ctx as f64).sqrt(), rng),
            wo: gaussian_matrix(d, d, std * out_scale, rng),
            ln_gamma: vec![1.0; d],
            ln_beta: vec![0.0; d],
        }),
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| gaussian(rng) * std).collect();
    Matrix::new(rows, cols, data).expect("finite init")
}

fn gaussian_vec(len: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| gaussian(rng) * std).collect()
}

/// Embeds raw per-token features and prepends the branch's special token at
/// position 0.
pub fn tokenize(
    raw: &Matrix,
    modality: Modality,
    config: &VltConfig,
    weights: &ModelWeights,
) -> Result<TokenInstance> {
    let expected_rows = match modality {
        Modality::Vision => config.patch_count,
        Modality::Language => config.word_count,
    };
    if raw.rows() != expected_rows {
        return Err(MadtpError::invalid(format!(
            "tokenize: expected {expected_rows} feature rows, got {}",
            raw.rows()
        )));
    }
    let (embed, bias, special) = match modality {
        Modality::Vision => {
            (&weights.embed_vision, &weights.embed_vision_bias, &weights.special_vision)
        }
        Modality::Language => {
            (&weights.embed_language, &weights.embed_language_bias, &weights.special_language)
        }
    };
    if raw.cols() != embed.rows() {
        return Err(MadtpError::invalid(format!(
            "tokenize: feature width {} does not match embedding input width {}",
            raw.cols(),
            embed.rows()
        )));
    }
    let embedded = raw.matmul(embed)?.add_row(bias)?;
    let mut tokens = Matrix::zeros(0, embed.cols());
    // placeholder replaced below; Matrix::zeros(0, w) keeps width for push_row
    tokens.push_row(special)?;
    for r in 0..embedded.rows() {
        tokens.push_row(embedded.row(r))?;
    }
    let n = tokens.rows();
    Ok(TokenInstance {
        tokens,
        specials: vec![0],
        origin: (0..n).map(Some).collect(),
        alive_original: vec![true; n],
    })
}

/// Row-wise layer norm with learned scale and shift.
pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> Result<Matrix> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(MadtpError::invalid("layer_norm: parameter width mismatch"));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean: f64 = row.iter().sum::<f64>() / n;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + LN_EPS).sqrt();
        for c in 0..x.cols() {
            out.set(r, c, (row[c] - mean) / denom * gamma[c] + beta[c]);
        }
    }
    Ok(out)
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Pre-norm residual multi-head self-attention. Returns the updated tokens
/// and both the per-head and head-averaged attention maps.
pub fn mhsa_forward(
    tokens: &Matrix,
    weights: &BlockWeights,
    heads: usize,
) -> Result<(Matrix, SelfAttention)> {
    let d = tokens.cols();
    if heads == 0 || d % heads != 0 {
        return Err(MadtpError::invalid("mhsa_forward: width must divide evenly by heads"));
    }
    let n = tokens.rows();
    let dh = d / heads;
    let normed = layer_norm(tokens, &weights.ln1_gamma, &weights.ln1_beta)?;
    let q = normed.matmul(&weights.wq)?;
    let k = normed.matmul(&weights.wk)?;
    let v = normed.matmul(&weights.wv)?;

    let mut concat = Matrix::zeros(n, d);
    let mut per_head = Vec::with_capacity(heads);
    let mut avg = Matrix::zeros(n, n);
    let scale = (dh as f64).sqrt();
    for h in 0..heads {
        let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
        let qh = take_cols(&q, &cols);
        let kh = take_cols(&k, &cols);
        let vh = take_cols(&v, &cols);
        let (out_h, attn_h) = crate::numerics::scaled_dot_attention(&qh, &kh, &vh, scale)?;
        for r in 0..n {
            for (ci, &c) in cols.iter().enumerate() {
                concat.set(r, c, out_h.at(r, ci));
            }
            for c in 0..n {
                avg.set(r, c, avg.at(r, c) + attn_h.at(r, c) / heads as f64);
            }
        }
        per_head.push(attn_h);
    }
    let projected = concat.matmul(&weights.wo)?;
    let updated = tokens.add(&projected)?;
    Ok((updated, SelfAttention { head_avg: avg, per_head }))
}

/// Pre-norm residual two-layer FFN with a GELU nonlinearity.
pub fn ffn_forward(tokens: &Matrix, weights: &BlockWeights) -> Result<Matrix> {
    let normed = layer_norm(tokens, &weights.ln2_gamma, &weights.ln2_beta)?;
    let mut hidden = normed.matmul(&weights.ffn_w1)?.add_row(&weights.ffn_b1)?;
    for r in 0..hidden.rows() {
        for v in hidden.row_mut(r) {
            *v = gelu(*v);
        }
    }
    let out = hidden.matmul(&weights.ffn_w2)?.add_row(&weights.ffn_b2)?;
    tokens.add(&out)
}

/// Pre-norm residual cross attention: `queries` attend the other branch's
/// tokens. The query count never changes.
pub fn cross_attention_forward(
    queries: &Matrix,
    context: &Matrix,
    weights: &CrossWeights,
) -> Result<Matrix> {
    let normed = layer_norm(queries, &weights.ln_gamma, &weights.ln_beta)?;
    let q = normed.matmul(&weights.wq)?;
    let k = context.matmul(&weights.wk)?;
    let v = context.matmul(&weights.wv)?;
    let scale = (q.cols() as f64).sqrt();
    let (mixed, _) = crate::numerics::scaled_dot_attention(&q, &k, &v, scale)?;
    let projected = mixed.matmul(&weights.wo)?;
    queries.add(&projected)
}

fn take_cols(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), cols.len());
    for r in 0..m.rows() {
        for (ci, &c) in cols.iter().enumerate() {
            out.set(r, ci, m.at(r, c));
        }
    }
    out
}

/// One branch's full block at one layer: self-attention, alignment query,
/// pruning, optional cross attention, FFN. `cross_context` carries the other
/// branch's current tokens when cross attention is enabled. Returns the
/// layer reports, alignment outputs, and the head-averaged self maps.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    batch: &mut TokenBatch,
    weights: &BlockWeights,
    layer: usize,
    mag: &MagModule,
    config: &VltConfig,
    mode: &EngineMode,
    temperature: f64,
    cross_context: Option<&TokenBatch>,
) -> Result<(Vec<LayerReport>, Vec<AlignmentOutput>, Vec<Matrix>)> {
    let modality = batch.modality;
    let heads = config.heads;

    // Self-attention on every instance in parallel; order is preserved.
    let attn_results: Vec<Result<(Matrix, SelfAttention)>> = batch
        .instances
        .par_iter()
        .map(|inst| mhsa_forward(&inst.tokens, weights, heads))
        .collect();
    let mut self_maps = Vec::with_capacity(batch.instances.len());
    for (inst, res) in batch.instances.iter_mut().zip(attn_results) {
        let (updated, attn) = res?;
        inst.tokens = updated;
        self_maps.push(attn);
    }

    // Alignment query for this layer: project the branch's alive tokens into
    // the shared space and attend with the shared learnable bank.
    let mut alignment = Vec::with_capacity(batch.instances.len());
    for inst in &batch.instances {
        let mapped = project(&inst.tokens, modality, layer, &mag.projections)?;
        alignment.push(token_attention(&mag.learnable, &mapped)?);
    }

    // Prune between self-attention and the FFN.
    let branch_dynamic = config.branch_pruned(modality);
    let prune_mode = match mode {
        EngineMode::Disabled => PruneMode::Disabled,
        EngineMode::Dynamic => {
            if branch_dynamic {
                PruneMode::Dynamic
            } else {
                PruneMode::Disabled
            }
        }
        EngineMode::ForcedCounts { vision, language, .. } => {
            if branch_dynamic {
                let counts = match modality {
                    Modality::Vision => &vision[layer],
                    Modality::Language => &language[layer],
                };
                PruneMode::ForcedKeepCounts(counts.clone())
            } else {
                PruneMode::Disabled
            }
        }
    };
    let merge = match mode {
        EngineMode::ForcedCounts { merge, .. } => *merge,
        _ => true,
    };
    let settings = PruneSettings {
        temperature,
        policy: config.keep_policy,
        components: config.tis_components,
        merge,
    };
    let inputs: Vec<PruneInput> = batch
        .instances
        .iter()
        .zip(&self_maps)
        .zip(&alignment)
        .map(|((inst, attn), align)| PruneInput {
            tokens: &inst.tokens,
            self_map: &attn.head_avg,
            token_map: &align.token_map,
            specials: &inst.specials,
            cls_index: inst.specials[0],
        })
        .collect();
    let pruned = dtp::prune(&inputs, &prune_mode, &settings)?;

    let mut reports = Vec::with_capacity(batch.instances.len());
    for (inst, result) in batch.instances.iter_mut().zip(pruned) {
        let alive_in = inst.alive();
        let mut new_origin: Vec<Option<usize>> =
            result.kept_indices.iter().map(|&i| inst.origin[i]).collect();
        if result.merged.is_some() {
            new_origin.push(None);
        }
        for (i, origin) in inst.origin.iter().enumerate() {
            if !result.kept_indices.contains(&i) {
                if let Some(pos) = origin {
                    inst.alive_original[*pos] = false;
                }
            }
        }
        let report = LayerReport {
            alive_in,
            alive_out: result.tokens.rows(),
            theta: result.decision.theta,
            tis_min: result.decision.tis_min,
            tis_max: result.decision.tis_max,
            merged: result.merged.is_some(),
            forced: result.decision.forced_index.is_some(),
            kept_original: new_origin.iter().flatten().copied().collect(),
        };
        inst.tokens = result.tokens;
        inst.specials = result.new_specials;
        inst.origin = new_origin;
        reports.push(report);
    }

    // Cross attention operates on the pruned set.
    if config.cross_attention {
        if let (Some(cross_weights), Some(context)) = (&weights.cross, cross_context) {
            let updated: Vec<Result<Matrix>> = batch
                .instances
                .par_iter()
                .zip(&context.instances)
                .map(|(inst, ctx)| cross_attention_forward(&inst.tokens, &ctx.tokens, cross_weights))
                .collect();
            for (inst, res) in batch.instances.iter_mut().zip(updated) {
                inst.tokens = res?;
            }
        }
    }

    // FFN closes the block.
    let ffn_results: Vec<Result<Matrix>> =
        batch.instances.par_iter().map(|inst| ffn_forward(&inst.tokens, weights)).collect();
    for (inst, res) in batch.instances.iter_mut().zip(ffn_results) {
        inst.tokens = res?;
    }

    let avg_maps = self_maps.into_iter().map(|m| m.head_avg).collect();
    Ok((reports, alignment, avg_maps))
}

/// Runs both branches layer by layer with the shared alignment module
/// invoked between them and pruning inside every block. Inputs are batches
/// of raw feature matrices, one per pair.
pub fn model_forward(
    images: &[Matrix],
    texts: &[Matrix],
    config: &VltConfig,
    weights: &ModelWeights,
    mag: &MagModule,
    mode: &EngineMode,
    temperature: f64,
) -> Result<ForwardOutput> {
    model_forward_captured(images, texts, config, weights, mag, mode, temperature, false)
}

/// [`model_forward`] with optional per-layer map capture for dump export.
#[allow(clippy::too_many_arguments)]
pub fn model_forward_captured(
    images: &[Matrix],
    texts: &[Matrix],
    config: &VltConfig,
    weights: &ModelWeights,
    mag: &MagModule,
    mode: &EngineMode,
    temperature: f64,
    capture: bool,
) -> Result<ForwardOutput> {
    if images.len() != texts.len() {
        return Err(MadtpError::invalid("model_forward: image/text batch size mismatch"));
    }
    if images.is_empty() {
        return Err(MadtpError::invalid("model_forward: empty batch"));
    }
    config.validate()?;

    let mut vision = TokenBatch {
        modality: Modality::Vision,
        instances: images
            .iter()
            .map(|raw| tokenize(raw, Modality::Vision, config, weights))
            .collect::<Result<_>>()?,
    };
    let mut language = TokenBatch {
        modality: Modality::Language,
        instances: texts
            .iter()
            .map(|raw| tokenize(raw, Modality::Language, config, weights))
            .collect::<Result<_>>()?,
    };

    let batch = images.len();
    let mut traces: Vec<InstanceTrace> = (0..batch)
        .map(|_| InstanceTrace {
            vision_layers: Vec::with_capacity(config.layers),
            language_layers: Vec::with_capacity(config.layers),
            alignment_losses: Vec::with_capacity(config.layers),
        })
        .collect();
    let mut captured: Vec<CapturedMaps> =
        if capture { vec![CapturedMaps::default(); batch] } else { Vec::new() };

    for layer in 0..config.layers {
        let (vision_reports, vision_align, vision_maps) = block_forward(
            &mut vision,
            &weights.vision_blocks[layer],
            layer,
            mag,
            config,
            mode,
            temperature,
            None,
        )?;
        let (language_reports, language_align, language_maps) = block_forward(
            &mut language,
            &weights.language_blocks[layer],
            layer,
            mag,
            config,
            mode,
            temperature,
            Some(&vision),
        )?;
        for (i, trace) in traces.iter_mut().enumerate() {
            trace.vision_layers.push(vision_reports[i].clone());
            trace.language_layers.push(language_reports[i].clone());
            trace
                .alignment_losses
                .push(alignment_loss(&vision_align[i].features, &language_align[i].features)?);
        }
        if capture {
            for (i, maps) in captured.iter_mut().enumerate() {
                maps.vision_self.push(vision_maps[i].clone());
                maps.vision_token.push(vision_align[i].token_map.clone());
                maps.language_self.push(language_maps[i].clone());
                maps.language_token.push(language_align[i].token_map.clone());
            }
        }
    }

    let mut logits = Vec::with_capacity(batch);
    for (v_inst, l_inst) in vision.instances.iter().zip(&language.instances) {
        let v_cls = v_inst.tokens.row(v_inst.specials[0]);
        let l_eos = l_inst.tokens.row(l_inst.specials[0]);
        let mut feat = Vec::with_capacity(v_cls.len() + l_eos.len());
        feat.extend_from_slice(v_cls);
        feat.extend_from_slice(l_eos);
        let mut pair = [0.0; 2];
        for c in 0..2 {
            let mut acc = weights.head_b[c];
            for (i, &f) in feat.iter().enumerate() {
                acc += f * weights.head_w.at(i, c);
            }
            pair[c] = acc;
        }
        logits.push(pair);
    }

    let alignment: Vec<f64> = traces
        .iter()
        .map(|t| match config.alignment_loss_mode {
            AlignmentLossMode::MeanAllLayers => {
                t.alignment_losses.iter().sum::<f64>() / t.alignment_losses.len() as f64
            }
            AlignmentLossMode::FinalLayer => *t.alignment_losses.last().expect(">=1 layer"),
        })
        .collect();

    let out =
        ForwardOutput { vision, language, traces, logits, alignment_loss: alignment, captured };
    validate_forward(&out)?;
    Ok(out)
}

/// Structural invariants every forward pass must satisfy: specials alive at
/// every layer, alive counts non-increasing with depth, and the threshold
/// pinned inside the score range.
fn validate_forward(out: &ForwardOutput) -> Result<()> {
    for trace in &out.traces {
        for layers in [&trace.vision_layers, &trace.language_layers] {
            let mut prev = usize::MAX;
            for (i, layer) in layers.iter().enumerate() {
                if layer.alive_out > layer.alive_in {
                    return Err(MadtpError::invalid(format!(
                        "invariant: alive count grew at layer {i} ({} -> {})",
                        layer.alive_in, layer.alive_out
                    )));
                }
                if layer.alive_in > prev {
                    return Err(MadtpError::invalid(format!(
                        "invariant: layer {i} saw more tokens than the previous layer emitted"
                    )));
                }
                if !layer.kept_original.contains(&0) {
                    return Err(MadtpError::invalid(format!(
                        "invariant: special token pruned at layer {i}"
                    )));
                }
                let tol = 1e-9;
                if layer.theta < layer.tis_min - tol || layer.theta > layer.tis_max + tol {
                    return Err(MadtpError::invalid(format!(
                        "invariant: theta {} outside score range [{}, {}]",
                        layer.theta, layer.tis_min, layer.tis_max
                    )));
                }
                prev = layer.alive_out;
            }
        }
    }
    for (v, l) in out.vision.instances.iter().zip(&out.language.instances) {
        if !v.tokens.is_finite() || !l.tokens.is_finite() {
            return Err(MadtpError::invalid("invariant: non-finite activations"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> VltConfig {
        VltConfig {
            layers: 2,
            d_vision: 8,
            d_language: 8,
            heads: 2,
            patch_count: 16,
            word_count: 8,
            learnable_count: 3,
            learnable_width: 8,
            seed: 13,
            ..VltConfig::default()
        }
    }

    fn random_raw(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| gaussian(&mut rng)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn tokenize_shapes_and_specials() {
        let config = VltConfig {
            layers: 1,
            d_vision: 32,
            d_language: 32,
            heads: 4,
            patch_count: 16,
            word_count: 8,
            learnable_width: 16,
            ..VltConfig::default()
        };
        let (weights, _) = init_weights(&config).unwrap();

        let image = random_raw(16, 32, 1);
        let inst = tokenize(&image, Modality::Vision, &config, &weights).unwrap();
        assert_eq!(inst.alive(), 17);
        assert_eq!(inst.specials, vec![0]);
        assert_eq!(inst.origin[0], Some(0));

        let text = random_raw(8, 32, 2);
        let inst = tokenize(&text, Modality::Language, &config, &weights).unwrap();
        assert_eq!(inst.alive(), 9);

        let wrong = random_raw(5, 32, 3);
        assert!(tokenize(&wrong, Modality::Vision, &config, &weights).is_err());
    }

    #[test]
    fn tokenize_zero_features_yield_bias_rows() {
        let config = tiny_config();
        let (weights, _) = init_weights(&config).unwrap();
        let zeros = Matrix::zeros(config.patch_count, config.d_vision);
        let inst = tokenize(&zeros, Modality::Vision, &config, &weights).unwrap();
        assert_eq!(inst.tokens.row(0), weights.special_vision.as_slice());
        for r in 1..inst.alive() {
            for (a, b) in inst.tokens.row(r).iter().zip(&weights.embed_vision_bias) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_single_token_attends_itself() {
        let config = tiny_config();
        let (weights, _) = init_weights(&config).unwrap();
        let tokens = random_raw(1, 8, 4);
        let (out, attn) = mhsa_forward(&tokens, &weights.vision_blocks[0], 2).unwrap();
        assert_eq!(attn.head_avg.data(), &[1.0]);
        assert!(out.is_finite());
    }

    #[test]
    fn mhsa_rows_are_stochastic() {
        let config = tiny_config();
        let (weights, _) = init_weights(&config).unwrap();
        let tokens = random_raw(5, 8, 5);
        let (_, attn) = mhsa_forward(&tokens, &weights.vision_blocks[0], 2).unwrap();
        for r in 0..5 {
            let sum: f64 = attn.head_avg.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for head in &attn.per_head {
                let sum: f64 = head.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mhsa_matches_naive_reference() {
        // Two tokens, single head: replicate the arithmetic by hand.
        let config = VltConfig { heads: 1, ..tiny_config() };
        let (weights, _) = init_weights(&config).unwrap();
        let block = &weights.vision_blocks[0];
        let tokens = random_raw(2, 8, 6);
        let (out, attn) = mhsa_forward(&tokens, block, 1).unwrap();

        let normed = layer_norm(&tokens, &block.ln1_gamma, &block.ln1_beta).unwrap();
        let q = normed.matmul(&block.wq).unwrap();
        let k = normed.matmul(&block.wk).unwrap();
        let v = normed.matmul(&block.wv).unwrap();
        let scale = (8f64).sqrt();
        for r in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|c| {
                    q.row(r).iter().zip(k.row(c)).map(|(a, b)| a * b).sum::<f64>() / scale
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..2 {
                assert!((attn.head_avg.at(r, c) - exps[c] / z).abs() < 1e-12);
            }
        }
        let mixed = attn.head_avg.matmul(&v).unwrap();
        let expected = tokens.add(&mixed.matmul(&block.wo).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_zero_weights_is_identity() {
        let config = tiny_config();
        let (mut weights, _) = init_weights(&config).unwrap();
        let block = &mut weights.vision_blocks[0];
        block.ffn_w1 = Matrix::zeros(8, 32);
        block.ffn_w2 = Matrix::zeros(32, 8);
        block.ffn_b1 = vec![0.0; 32];
        block.ffn_b2 = vec![0.0; 8];
        let tokens = random_raw(3, 8, 7);
        let out = ffn_forward(&tokens, block).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn ffn_matches_hand_computation() {
        let config = VltConfig { d_vision: 2, d_language: 2, heads: 1, ffn_mult: 1, ..tiny_config() };
        let (mut weights, _) = init_weights(&config).unwrap();
        let block = &mut weights.vision_blocks[0];
        block.ffn_w1 = Matrix::new(2, 2, vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        block.ffn_b1 = vec![0.1, -0.2];
        block.ffn_w2 = Matrix::new(2, 2, vec![0.3, -1.0, 0.7, 0.2]).unwrap();
        block.ffn_b2 = vec![0.05, 0.0];
        let tokens = Matrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        let out = ffn_forward(&tokens, block).unwrap();

        let normed = layer_norm(&tokens, &block.ln2_gamma, &block.ln2_beta).unwrap();
        let h0 = gelu(normed.at(0, 0) * 1.0 + normed.at(0, 1) * -0.5 + 0.1);
        let h1 = gelu(normed.at(0, 0) * 0.5 + normed.at(0, 1) * 2.0 - 0.2);
        let e0 = 1.0 + h0 * 0.3 + h1 * 0.7 + 0.05;
        let e1 = -1.0 + h0 * -1.0 + h1 * 0.2;
        assert!((out.at(0, 0) - e0).abs() < 1e-12);
        assert!((out.at(0, 1) - e1).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_basics() {
        let config = VltConfig { cross_attention: true, ..tiny_config() };
        let (weights, _) = init_weights(&config).unwrap();
        let cross = weights.language_blocks[0].cross.as_ref().unwrap();

        // Single-token context: it receives all the attention.
        let queries = random_raw(3, 8, 8);
        let context = random_raw(1, 8, 9);
        let out = cross_attention_forward(&queries, &context, cross).unwrap();
        assert_eq!(out.rows(), 3);
        assert!(out.is_finite());

        // Zero value projection leaves the queries unchanged.
        let mut zeroed = cross.clone();
        zeroed.wv = Matrix::zeros(8, 8);
        let out = cross_attention_forward(&queries, &context, &zeroed).unwrap();
        assert_eq!(out, queries);

        // Reference check on a 3-query/4-context case.
        let context = random_raw(4, 8, 10);
        let out = cross_attention_forward(&queries, &context, cross).unwrap();
        let normed = layer_norm(&queries, &cross.ln_gamma, &cross.ln_beta).unwrap();
        let q = normed.matmul(&cross.wq).unwrap();
        let k = context.matmul(&cross.wk).unwrap();
        let v = context.matmul(&cross.wv).unwrap();
        let (mixed, _) =
            crate::numerics::scaled_dot_attention(&q, &k, &v, (8f64).sqrt()).unwrap();
        let expected = queries.add(&mixed.matmul(&cross.wo).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_disabled_keeps_all_tokens() {
        let config = VltConfig { pruning_enabled: false, ..tiny_config() };
        let (weights, mag) = init_weights(&config).unwrap();
        let images = vec![random_raw(16, 8, 21), random_raw(16, 8, 22)];
        let texts = vec![random_raw(8, 8, 23), random_raw(8, 8, 24)];
        let out = model_forward(
            &images,
            &texts,
            &config,
            &weights,
            &mag,
            &EngineMode::Disabled,
            config.temperature,
        )
        .unwrap();
        for trace in &out.traces {
            let v_counts: Vec<usize> = trace.vision_layers.iter().map(|l| l.alive_out).collect();
            let l_counts: Vec<usize> =
                trace.language_layers.iter().map(|l| l.alive_out).collect();
            assert_eq!(v_counts, vec![17, 17]);
            assert_eq!(l_counts, vec![9, 9]);
        }
    }

    #[test]
    fn forward_pruning_counts_non_increasing_and_specials_alive() {
        let config = VltConfig { keep_policy: KeepPolicy::PerInstance, ..tiny_config() };
        let (weights, mag) = init_weights(&config).unwrap();
        let images = vec![random_raw(16, 8, 31)];
        let texts = vec![random_raw(8, 8, 32)];
        let out = model_forward(
            &images,
            &texts,
            &config,
            &weights,
            &mag,
            &EngineMode::Dynamic,
            config.temperature,
        )
        .unwrap();
        let trace = &out.traces[0];
        let mut prev = 17;
        for layer in &trace.vision_layers {
            assert!(layer.alive_out <= layer.alive_in);
            assert_eq!(layer.alive_in, prev);
            assert!(layer.kept_original.contains(&0));
            prev = layer.alive_out;
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let (weights, mag) = init_weights(&config).unwrap();
        let images = vec![random_raw(16, 8, 41), random_raw(16, 8, 42)];
        let texts = vec![random_raw(8, 8, 43), random_raw(8, 8, 44)];
        let run = || {
            model_forward(
                &images,
                &texts,
                &config,
                &weights,
                &mag,
                &EngineMode::Dynamic,
                config.temperature,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.logits, b.logits);
        for (x, y) in a.vision.instances.iter().zip(&b.vision.instances) {
            assert_eq!(x.tokens, y.tokens);
        }
    }

    #[test]
    fn forward_matches_between_disabled_and_identity_mode() {
        // With pruning disabled the forward pass must equal a plain
        // transformer forward; forcing full keep counts is the oracle path.
        let config = VltConfig { pruning_enabled: false, ..tiny_config() };
        let (weights, mag) = init_weights(&config).unwrap();
        let images = vec![random_raw(16, 8, 51)];
        let texts = vec![random_raw(8, 8, 52)];
        let disabled = model_forward(
            &images,
            &texts,
            &config,
            &weights,
            &mag,
            &EngineMode::Disabled,
            config.temperature,
        )
        .unwrap();
        let forced = model_forward(
            &images,
            &texts,
            &config,
            &weights,
            &mag,
            &EngineMode::ForcedCounts {
                vision: vec![vec![17], vec![17]],
                language: vec![vec![9], vec![9]],
                merge: false,
            },
            config.temperature,
        )
        .unwrap();
        for (a, b) in disabled.vision.instances.iter().zip(&forced.vision.instances) {
            assert_eq!(a.tokens, b.tokens);
        }
        assert_eq!(disabled.logits, forced.logits);
    }

    #[test]
    fn shared_learnable_bank_is_single_instance() {
        let config = tiny_config();
        let (_, mag) = init_weights(&config).unwrap();
        // One bank serves all layers and both branches: the module holds
        // exactly one matrix, and projections are the only per-layer state.
        assert_eq!(mag.learnable.count(), config.learnable_count);
        assert_eq!(mag.projections.layers(), config.layers);
    }
}
