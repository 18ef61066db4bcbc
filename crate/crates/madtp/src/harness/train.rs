//! Gradient training of the alignment module on synthetic pairs.
//!
//! The trainable set is the learnable token bank, the per-layer projection
//! weights and biases, and the two-way match head; the transformer weights
//! stay frozen. The forward pass is rebuilt on the reverse-mode tape so
//! gradients flow through attention, the merged token's score weights, and
//! the sparse-map threshold path, while the discrete keep masks act as
//! stop-gradients.

use crate::dtp::{self, KeepPolicy};
use crate::error::{MadtpError, Result};
use crate::harness::synth::PairSample;
use crate::vlt::MagModule;
use crate::numerics::Matrix;
use crate::tape::{NodeId, Tape};
use crate::vlt::{AlignmentLossMode, BlockWeights, EngineMode, Modality, ModelWeights, VltConfig};
use serde::{Deserialize, Serialize};

/// One step's loss values: `total = l_task + alpha * l_sim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_task: f64,
    pub l_sim: f64,
    pub alpha: f64,
    pub total: f64,
}

/// The parameters the toy trainer updates.
#[derive(Debug, Clone)]
pub struct ToyParams {
    pub learnable: Matrix,
    pub vision_proj_w: Vec<Matrix>,
    pub vision_proj_b: Vec<Matrix>,
    pub language_proj_w: Vec<Matrix>,
    pub language_proj_b: Vec<Matrix>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl ToyParams {
    pub fn from_model(weights: &ModelWeights, mag: &MagModule) -> Self {
        let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec()).expect("finite");
        ToyParams {
            learnable: mag.learnable.tokens.clone(),
            vision_proj_w: mag.projections.vision_w.clone(),
            vision_proj_b: mag.projections.vision_b.iter().map(|b| row(b)).collect(),
            language_proj_w: mag.projections.language_w.clone(),
            language_proj_b: mag.projections.language_b.iter().map(|b| row(b)).collect(),
            head_w: weights.head_w.clone(),
            head_b: row(&weights.head_b),
        }
    }

    /// Writes the trained values back into a model/alignment pair.
    pub fn apply_to(&self, weights: &mut ModelWeights, mag: &mut MagModule) {
        mag.learnable.tokens = self.learnable.clone();
        mag.projections.vision_w = self.vision_proj_w.clone();
        mag.projections.vision_b =
            self.vision_proj_b.iter().map(|b| b.row(0).to_vec()).collect();
        mag.projections.language_w = self.language_proj_w.clone();
        mag.projections.language_b =
            self.language_proj_b.iter().map(|b| b.row(0).to_vec()).collect();
        weights.head_w = self.head_w.clone();
        weights.head_b = self.head_b.row(0).to_vec();
    }
}

/// Tape node ids of the trainable leaves.
pub struct ParamNodes {
    pub learnable: NodeId,
    pub vision_proj_w: Vec<NodeId>,
    pub vision_proj_b: Vec<NodeId>,
    pub language_proj_w: Vec<NodeId>,
    pub language_proj_b: Vec<NodeId>,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

/// A fully built training forward pass.
pub struct TapeForward {
    pub tape: Tape,
    pub total: NodeId,
    pub task: NodeId,
    pub sim: NodeId,
    pub params: ParamNodes,
    /// Per (instance, layer, branch) threshold nodes, for diagnostics.
    pub theta_nodes: Vec<NodeId>,
    pub losses: LossBreakdown,
}

struct BranchState {
    tokens: NodeId,
    specials: Vec<usize>,
}

fn leaf_row(tape: &mut Tape, v: &[f64]) -> NodeId {
    tape.leaf(Matrix::new(1, v.len(), v.to_vec()).expect("finite"))
}

fn embed_instance(
    tape: &mut Tape,
    raw: &Matrix,
    embed: &Matrix,
    bias: &[f64],
    special: &[f64],
) -> Result<BranchState> {
    let raw_leaf = tape.leaf(raw.clone());
    let embed_leaf = tape.leaf(embed.clone());
    let embedded = tape.matmul(raw_leaf, embed_leaf)?;
    let bias_leaf = leaf_row(tape, bias);
    let embedded = tape.add_bias(embedded, bias_leaf)?;
    let special_leaf = leaf_row(tape, special);
    let tokens = tape.concat_rows(&[special_leaf, embedded])?;
    Ok(BranchState { tokens, specials: vec![0] })
}

fn mhsa_tape(
    tape: &mut Tape,
    x: NodeId,
    block: &BlockWeights,
    heads: usize,
) -> Result<(NodeId, NodeId)> {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let normed = tape.layer_norm(x, &block.ln1_gamma, &block.ln1_beta)?;
    let wq = tape.leaf(block.wq.clone());
    let wk = tape.leaf(block.wk.clone());
    let wv = tape.leaf(block.wv.clone());
    let q = tape.matmul(normed, wq)?;
    let k = tape.matmul(normed, wk)?;
    let v = tape.matmul(normed, wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut attn_sum: Option<NodeId> = None;
    for h in 0..heads {
        let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
        let qh = tape.select_cols(q, &cols)?;
        let kh = tape.select_cols(k, &cols)?;
        let vh = tape.select_cols(v, &cols)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.row_softmax(scaled)?;
        let out = tape.matmul(attn, vh)?;
        outs.push(out);
        attn_sum = Some(match attn_sum {
            None => attn,
            Some(acc) => tape.add(acc, attn)?,
        });
    }
    let concat = tape.concat_cols(&outs)?;
    let wo = tape.leaf(block.wo.clone());
    let projected = tape.matmul(concat, wo)?;
    let updated = tape.add(x, projected)?;
    let avg = tape.scale(attn_sum.expect("heads >= 1"), 1.0 / heads as f64);
    Ok((updated, avg))
}

fn ffn_tape(tape: &mut Tape, x: NodeId, block: &BlockWeights) -> Result<NodeId> {
    let normed = tape.layer_norm(x, &block.ln2_gamma, &block.ln2_beta)?;
    let w1 = tape.leaf(block.ffn_w1.clone());
    let b1 = leaf_row(tape, &block.ffn_b1);
    let w2 = tape.leaf(block.ffn_w2.clone());
    let b2 = leaf_row(tape, &block.ffn_b2);
    let hidden = tape.matmul(normed, w1)?;
    let hidden = tape.add_bias(hidden, b1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, w2)?;
    let out = tape.add_bias(out, b2)?;
    tape.add(x, out)
}

fn cross_tape(tape: &mut Tape, x: NodeId, context: NodeId, block: &BlockWeights) -> Result<NodeId> {
    let cross = block.cross.as_ref().expect("cross weights present");
    let normed = tape.layer_norm(x, &cross.ln_gamma, &cross.ln_beta)?;
    let wq = tape.leaf(cross.wq.clone());
    let wk = tape.leaf(cross.wk.clone());
    let wv = tape.leaf(cross.wv.clone());
    let wo = tape.leaf(cross.wo.clone());
    let q = tape.matmul(normed, wq)?;
    let k = tape.matmul(context, wk)?;
    let v = tape.matmul(context, wv)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (tape.value(q).cols() as f64).sqrt());
    let attn = tape.row_softmax(scaled)?;
    let mixed = tape.matmul(attn, v)?;
    let projected = tape.matmul(mixed, wo)?;
    tape.add(x, projected)
}

struct MagNodes {
    map: NodeId,
    features: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn mag_tape(
    tape: &mut Tape,
    x: NodeId,
    learnable: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
    d_k: usize,
) -> Result<MagNodes> {
    let mapped = tape.matmul(x, proj_w)?;
    let mapped = tape.add_bias(mapped, proj_b)?;
    let mt = tape.transpose(mapped);
    let logits = tape.matmul(learnable, mt)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let map = tape.row_softmax(scaled)?;
    let features = tape.matmul(map, mapped)?;
    Ok(MagNodes { map, features })
}

/// Builds the full training forward for one batch and computes the loss.
/// `samples` are (image, text, matched) triples.
pub fn build_forward(
    params: &ToyParams,
    weights: &ModelWeights,
    config: &VltConfig,
    samples: &[(&Matrix, &Matrix, bool)],
    mode: &EngineMode,
) -> Result<TapeForward> {
    if samples.is_empty() {
        return Err(MadtpError::invalid("build_forward: empty batch"));
    }
    let mut tape = Tape::new();
    let param_nodes = ParamNodes {
        learnable: tape.leaf(params.learnable.clone()),
        vision_proj_w: params.vision_proj_w.iter().map(|m| tape.leaf(m.clone())).collect(),
        vision_proj_b: params.vision_proj_b.iter().map(|m| tape.leaf(m.clone())).collect(),
        language_proj_w: params.language_proj_w.iter().map(|m| tape.leaf(m.clone())).collect(),
        language_proj_b: params.language_proj_b.iter().map(|m| tape.leaf(m.clone())).collect(),
        head_w: tape.leaf(params.head_w.clone()),
        head_b: tape.leaf(params.head_b.clone()),
    };

    let mut vision: Vec<BranchState> = Vec::with_capacity(samples.len());
    let mut language: Vec<BranchState> = Vec::with_capacity(samples.len());
    for (image, text, _) in samples {
        vision.push(embed_instance(
            &mut tape,
            image,
            &weights.embed_vision,
            &weights.embed_vision_bias,
            &weights.special_vision,
        )?);
        language.push(embed_instance(
            &mut tape,
            text,
            &weights.embed_language,
            &weights.embed_language_bias,
            &weights.special_language,
        )?);
    }

    let mut theta_nodes = Vec::new();
    let mut sim_nodes_per_layer: Vec<Vec<NodeId>> = Vec::with_capacity(config.layers);

    for layer in 0..config.layers {
        let mut layer_sims = Vec::with_capacity(samples.len());
        // Vision branch first, then language (which may cross-attend it).
        let vision_feats = branch_layer_tape(
            &mut tape,
            &mut vision,
            Modality::Vision,
            &weights.vision_blocks[layer],
            layer,
            &param_nodes,
            config,
            mode,
            None,
            &mut theta_nodes,
        )?;
        let context: Vec<NodeId> = vision.iter().map(|s| s.tokens).collect();
        let language_feats = branch_layer_tape(
            &mut tape,
            &mut language,
            Modality::Language,
            &weights.language_blocks[layer],
            layer,
            &param_nodes,
            config,
            mode,
            Some(&context),
            &mut theta_nodes,
        )?;
        for (vf, lf) in vision_feats.iter().zip(&language_feats) {
            layer_sims.push(tape.cosine_align_loss(*vf, *lf)?);
        }
        sim_nodes_per_layer.push(layer_sims);
    }

    // Task head on the concatenated special-token outputs.
    let mut task_nodes = Vec::with_capacity(samples.len());
    for (i, (_, _, matched)) in samples.iter().enumerate() {
        let v_cls = tape.select_rows(vision[i].tokens, &[vision[i].specials[0]])?;
        let l_eos = tape.select_rows(language[i].tokens, &[language[i].specials[0]])?;
        let feat = tape.concat_cols(&[v_cls, l_eos])?;
        let logits = tape.matmul(feat, param_nodes.head_w)?;
        let logits = tape.add_bias(logits, param_nodes.head_b)?;
        task_nodes.push(tape.cross_entropy_logits(logits, *matched as usize)?);
    }
    let task = tape.mean_scalars(&task_nodes)?;

    let sim_nodes: Vec<NodeId> = match config.alignment_loss_mode {
        AlignmentLossMode::MeanAllLayers => sim_nodes_per_layer.into_iter().flatten().collect(),
        AlignmentLossMode::FinalLayer => sim_nodes_per_layer.pop().unwrap_or_default(),
    };
    let sim = tape.mean_scalars(&sim_nodes)?;
    let weighted_sim = tape.scale(sim, config.alignment_weight);
    let total = tape.add(task, weighted_sim)?;

    let losses = LossBreakdown {
        l_task: tape.scalar(task),
        l_sim: tape.scalar(sim),
        alpha: config.alignment_weight,
        total: tape.scalar(total),
    };
    Ok(TapeForward { tape, total, task, sim, params: param_nodes, theta_nodes, losses })
}

/// One branch's block on the tape; returns the per-instance feature nodes.
#[allow(clippy::too_many_arguments)]
fn branch_layer_tape(
    tape: &mut Tape,
    states: &mut [BranchState],
    modality: Modality,
    block: &BlockWeights,
    layer: usize,
    params: &ParamNodes,
    config: &VltConfig,
    mode: &EngineMode,
    cross_context: Option<&[NodeId]>,
    theta_nodes: &mut Vec<NodeId>,
) -> Result<Vec<NodeId>> {
    let (proj_w, proj_b) = match modality {
        Modality::Vision => (params.vision_proj_w[layer], params.vision_proj_b[layer]),
        Modality::Language => (params.language_proj_w[layer], params.language_proj_b[layer]),
    };

    let mut avg_nodes = Vec::with_capacity(states.len());
    let mut mag_nodes = Vec::with_capacity(states.len());
    for state in states.iter_mut() {
        let (updated, avg) = mhsa_tape(tape, state.tokens, block, config.heads)?;
        state.tokens = updated;
        avg_nodes.push(avg);
        mag_nodes.push(mag_tape(
            tape,
            updated,
            params.learnable,
            proj_w,
            proj_b,
            config.learnable_width,
        )?);
    }

    // Scores, thresholds, masks.
    let branch_scope = match (config.modality_scope, modality) {
        (crate::vlt::ModalityScope::VisionAndLanguage, _) => true,
        (crate::vlt::ModalityScope::VisionOnly, Modality::Vision) => true,
        (crate::vlt::ModalityScope::LanguageOnly, Modality::Language) => true,
        _ => false,
    };
    let dynamic = matches!(mode, EngineMode::Dynamic) && branch_scope;
    let forced: Option<(&Vec<Vec<usize>>, bool)> = match mode {
        EngineMode::ForcedCounts { vision, language, merge } if branch_scope => Some((
            match modality {
                Modality::Vision => vision,
                Modality::Language => language,
            },
            *merge,
        )),
        _ => None,
    };

    let mut tis_nodes = Vec::with_capacity(states.len());
    let mut masks = Vec::with_capacity(states.len());
    let mut tis_values: Vec<Vec<f64>> = Vec::with_capacity(states.len());
    let specials_batch: Vec<Vec<usize>> = states.iter().map(|s| s.specials.clone()).collect();
    for (i, state) in states.iter().enumerate() {
        let s_cls = tape.row_renorm(avg_nodes[i], state.specials[0])?;
        let s_self = tape.column_max_norm(avg_nodes[i])?;
        let s_token = tape.column_max_norm(mag_nodes[i].map)?;
        let mut parts = Vec::new();
        if config.tis_components.use_cls {
            parts.push(s_cls);
        }
        if config.tis_components.use_self {
            parts.push(s_self);
        }
        if config.tis_components.use_token {
            parts.push(s_token);
        }
        let tis = tape.mean_rows(&parts)?;
        let scaled = tape.scale(mag_nodes[i].map, config.temperature);
        let sparse = tape.sparsemax_rows(scaled)?;
        // Frozen argmin row selects which learnable token sets the threshold.
        let tis_row = tape.value(tis).row(0).to_vec();
        let sparse_val = tape.value(sparse);
        let mut best = (0usize, f64::INFINITY);
        for r in 0..sparse_val.rows() {
            let dot: f64 = sparse_val.row(r).iter().zip(&tis_row).map(|(a, b)| a * b).sum();
            if dot < best.1 {
                best = (r, dot);
            }
        }
        let theta = tape.dot_row(sparse, tis, best.0)?;
        theta_nodes.push(theta);

        let (mask, _) = dtp::prune_mask(&tis_row, tape.scalar(theta), &state.specials);
        masks.push(mask);
        tis_values.push(tis_row);
        tis_nodes.push(tis);
    }

    let final_masks: Vec<Vec<bool>> = if dynamic {
        dtp::apply_policy(&masks, &tis_values, &specials_batch, config.keep_policy)?
    } else if let Some((counts, _)) = forced {
        tis_values
            .iter()
            .zip(&specials_batch)
            .enumerate()
            .map(|(i, (tis, specials))| {
                let target = counts[layer][i].min(tis.len());
                top_k_mask_values(tis, specials, target)
            })
            .collect()
    } else {
        states.iter().map(|s| vec![true; tape.value(s.tokens).rows()]).collect()
    };

    let do_merge = match mode {
        EngineMode::ForcedCounts { merge, .. } => *merge,
        _ => true,
    };
    for (i, state) in states.iter_mut().enumerate() {
        let kept: Vec<usize> =
            (0..final_masks[i].len()).filter(|&j| final_masks[i][j]).collect();
        let pruned: Vec<usize> =
            (0..final_masks[i].len()).filter(|&j| !final_masks[i][j]).collect();
        if pruned.is_empty() {
            continue;
        }
        let kept_node = tape.select_rows(state.tokens, &kept)?;
        state.tokens = if do_merge {
            let merged = tape.weighted_merge_row(state.tokens, tis_nodes[i], &pruned)?;
            tape.concat_rows(&[kept_node, merged])?
        } else {
            kept_node
        };
        state.specials = kept
            .iter()
            .enumerate()
            .filter(|(_, orig)| state.specials.contains(orig))
            .map(|(new_idx, _)| new_idx)
            .collect();
    }

    if config.cross_attention && block.cross.is_some() {
        if let Some(context) = cross_context {
            for (state, &ctx) in states.iter_mut().zip(context) {
                state.tokens = cross_tape(tape, state.tokens, ctx, block)?;
            }
        }
    }

    for state in states.iter_mut() {
        state.tokens = ffn_tape(tape, state.tokens, block)?;
    }

    Ok(mag_nodes.into_iter().map(|m| m.features).collect())
}

fn top_k_mask_values(tis: &[f64], specials: &[usize], target: usize) -> Vec<bool> {
    let mut mask = vec![false; tis.len()];
    let mut taken = 0;
    for &s in specials {
        mask[s] = true;
        taken += 1;
    }
    let mut order: Vec<usize> = (0..tis.len()).filter(|i| !specials.contains(i)).collect();
    order.sort_by(|&a, &b| tis[b].partial_cmp(&tis[a]).expect("finite").then(a.cmp(&b)));
    for i in order {
        if taken >= target {
            break;
        }
        mask[i] = true;
        taken += 1;
    }
    mask
}

/// Result of a training run: loss curves plus the trained parameters.
#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Full-dataset loss before any update.
    pub initial: LossBreakdown,
    /// Full-dataset loss after the final update.
    pub final_loss: LossBreakdown,
    /// Per-step minibatch losses, recorded before each update.
    pub steps: Vec<LossBreakdown>,
    pub params: ToyParams,
}

/// Plain gradient descent on the alignment parameters and the match head.
pub fn train_toy(
    config: &VltConfig,
    weights: &ModelWeights,
    mag: &MagModule,
    dataset: &[PairSample],
    steps: usize,
    learning_rate: f64,
    batch_size: usize,
) -> Result<TrainResult> {
    if dataset.is_empty() {
        return Err(MadtpError::invalid("train_toy: empty dataset"));
    }
    let mode = if config.pruning_enabled { EngineMode::Dynamic } else { EngineMode::Disabled };
    let mut params = ToyParams::from_model(weights, mag);
    let batch_size = batch_size.max(1).min(dataset.len());
    let batches: Vec<Vec<(&Matrix, &Matrix, bool)>> = dataset
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|s| (&s.image, &s.text, s.matched)).collect())
        .collect();

    let evaluate = |params: &ToyParams| -> Result<LossBreakdown> {
        let mut task = 0.0;
        let mut sim = 0.0;
        for batch in &batches {
            let fwd = build_forward(params, weights, config, batch, &mode)?;
            task += fwd.losses.l_task * batch.len() as f64;
            sim += fwd.losses.l_sim * batch.len() as f64;
        }
        let n = dataset.len() as f64;
        Ok(LossBreakdown {
            l_task: task / n,
            l_sim: sim / n,
            alpha: config.alignment_weight,
            total: task / n + config.alignment_weight * sim / n,
        })
    };

    let initial = evaluate(&params)?;
    let mut step_losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        let fwd = build_forward(&params, weights, config, batch, &mode)?;
        if !fwd.losses.total.is_finite() {
            return Err(MadtpError::NonFiniteLoss {
                step,
                diagnostic: format!(
                    "l_task={} l_sim={} alpha={}",
                    fwd.losses.l_task, fwd.losses.l_sim, fwd.losses.alpha
                ),
            });
        }
        step_losses.push(fwd.losses);
        let grads = fwd.tape.backward(fwd.total)?;
        let apply = |param: &mut Matrix, node: NodeId| {
            let g = &grads[node];
            let data: Vec<f64> = param
                .data()
                .iter()
                .zip(g.data())
                .map(|(p, gr)| p - learning_rate * gr)
                .collect();
            *param = Matrix::new(param.rows(), param.cols(), data).expect("finite update");
        };
        apply(&mut params.learnable, fwd.params.learnable);
        for (m, n) in params.vision_proj_w.iter_mut().zip(&fwd.params.vision_proj_w) {
            apply(m, *n);
        }
        for (m, n) in params.vision_proj_b.iter_mut().zip(&fwd.params.vision_proj_b) {
            apply(m, *n);
        }
        for (m, n) in params.language_proj_w.iter_mut().zip(&fwd.params.language_proj_w) {
            apply(m, *n);
        }
        for (m, n) in params.language_proj_b.iter_mut().zip(&fwd.params.language_proj_b) {
            apply(m, *n);
        }
        apply(&mut params.head_w, fwd.params.head_w);
        apply(&mut params.head_b, fwd.params.head_b);
    }
    let final_loss = if steps == 0 { initial } else { evaluate(&params)? };
    Ok(TrainResult { initial, final_loss, steps: step_losses, params })
}

/// Keep-policy noted for completeness: training uses whatever the config
/// says; the per-instance policy avoids cross-instance coupling in
/// gradient checks.
pub fn per_instance(config: &VltConfig) -> VltConfig {
    VltConfig { keep_policy: KeepPolicy::PerInstance, ..config.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::{gen_synthetic, SynthConfig};
    use crate::numerics::finite_diff_grad;
    use crate::vlt::init_weights;

    fn train_config() -> VltConfig {
        VltConfig {
            layers: 2,
            d_vision: 8,
            d_language: 8,
            heads: 2,
            patch_count: 6,
            word_count: 4,
            learnable_count: 2,
            learnable_width: 8,
            keep_policy: KeepPolicy::PerInstance,
            seed: 5,
            ..VltConfig::default()
        }
    }

    fn dataset(config: &VltConfig, pairs: usize, seed: u64) -> Vec<PairSample> {
        gen_synthetic(
            &SynthConfig {
                pairs,
                patch_count: config.patch_count,
                patch_width: config.d_vision,
                word_count: config.word_count,
                word_width: config.d_language,
                concept_bank: 8,
                max_concepts: 2,
                concept_strength: 0.8,
                token_norm: 1.0,
                background_themes: 4,
                theme_jitter: 0.4,
                filler_fraction: 0.2,
                filler_scale: 0.05,
                matched_fraction: 0.5,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn forward_parity_with_plain_engine() {
        let config = train_config();
        let (weights, mag) = init_weights(&config).unwrap();
        let data = dataset(&config, 2, 11);
        let samples: Vec<(&Matrix, &Matrix, bool)> =
            data.iter().map(|s| (&s.image, &s.text, s.matched)).collect();
        let params = ToyParams::from_model(&weights, &mag);
        let fwd =
            build_forward(&params, &weights, &config, &samples, &EngineMode::Dynamic).unwrap();

        let images: Vec<Matrix> = data.iter().map(|s| s.image.clone()).collect();
        let texts: Vec<Matrix> = data.iter().map(|s| s.text.clone()).collect();
        let plain = crate::vlt::model_forward(
            &images,
            &texts,
            &config,
            &weights,
            &mag,
            &EngineMode::Dynamic,
            config.temperature,
        )
        .unwrap();

        // Same alignment loss and logits up to float noise.
        let mean_align: f64 =
            plain.alignment_loss.iter().sum::<f64>() / plain.alignment_loss.len() as f64;
        assert!(
            (fwd.losses.l_sim - mean_align).abs() < 1e-9,
            "{} vs {mean_align}",
            fwd.losses.l_sim
        );
    }

    #[test]
    fn gradient_wrt_learnable_matches_finite_differences() {
        let config = train_config();
        let (weights, mag) = init_weights(&config).unwrap();
        let data = dataset(&config, 2, 12);
        let samples: Vec<(&Matrix, &Matrix, bool)> =
            data.iter().map(|s| (&s.image, &s.text, s.matched)).collect();
        let params = ToyParams::from_model(&weights, &mag);
        let mode = EngineMode::Dynamic;

        let fwd = build_forward(&params, &weights, &config, &samples, &mode).unwrap();
        let grads = fwd.tape.backward(fwd.total).unwrap();
        let analytic = grads[fwd.params.learnable].clone();

        let f = |flat: &[f64]| -> crate::error::Result<f64> {
            let mut p = params.clone();
            p.learnable = Matrix::new(
                params.learnable.rows(),
                params.learnable.cols(),
                flat.to_vec(),
            )?;
            let fwd = build_forward(&p, &weights, &config, &samples, &mode)?;
            Ok(fwd.losses.total)
        };
        let fd = finite_diff_grad(f, params.learnable.data(), 1e-5).unwrap();
        for (a, b) in analytic.data().iter().zip(&fd) {
            assert!(
                (a - b).abs() <= 1e-4 * (1.0 + b.abs()),
                "analytic {a} vs fd {b}"
            );
        }
    }

    #[test]
    fn theta_gradient_exercises_sparsemax_path() {
        let config = train_config();
        let (weights, mag) = init_weights(&config).unwrap();
        let data = dataset(&config, 1, 13);
        let samples: Vec<(&Matrix, &Matrix, bool)> =
            data.iter().map(|s| (&s.image, &s.text, s.matched)).collect();
        let params = ToyParams::from_model(&weights, &mag);
        let mode = EngineMode::Dynamic;

        let fwd = build_forward(&params, &weights, &config, &samples, &mode).unwrap();
        let theta0 = fwd.theta_nodes[0];
        let grads = fwd.tape.backward(theta0).unwrap();
        let analytic = grads[fwd.params.learnable].clone();
        assert!(analytic.data().iter().any(|&g| g != 0.0), "theta must depend on the bank");

        let f = |flat: &[f64]| -> crate::error::Result<f64> {
            let mut p = params.clone();
            p.learnable = Matrix::new(
                params.learnable.rows(),
                params.learnable.cols(),
                flat.to_vec(),
            )?;
            let fwd = build_forward(&p, &weights, &config, &samples, &mode)?;
            Ok(fwd.tape.scalar(fwd.theta_nodes[0]))
        };
        let fd = finite_diff_grad(f, params.learnable.data(), 1e-6).unwrap();
        for (a, b) in analytic.data().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_steps_returns_initial_loss() {
        let config = train_config();
        let (weights, mag) = init_weights(&config).unwrap();
        let data = dataset(&config, 4, 14);
        let result = train_toy(&config, &weights, &mag, &data, 0, 0.05, 2).unwrap();
        assert_eq!(result.initial, result.final_loss);
        assert!(result.steps.is_empty());
    }

    #[test]
    fn short_training_reduces_alignment_loss() {
        let config = train_config();
        let (weights, mag) = init_weights(&config).unwrap();
        let data = dataset(&config, 8, 15);
        let result = train_toy(&config, &weights, &mag, &data, 60, 0.1, 4).unwrap();
        assert!(
            result.final_loss.l_sim < result.initial.l_sim,
            "{} -> {}",
            result.initial.l_sim,
            result.final_loss.l_sim
        );
        assert!(result.final_loss.total.is_finite());
    }
}
