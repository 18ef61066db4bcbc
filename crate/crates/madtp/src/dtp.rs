//! Dynamic token pruning: fuses three attention-derived importance scores
//! into a per-token distribution, derives a per-instance threshold from
//! temperature-scaled sparsemax over the guidance maps, prunes below the
//! threshold, folds the pruned tokens into one merged replacement token, and
//! reconciles kept counts across a batch.

use crate::error::{MadtpError, Result};
use crate::numerics::{sparsemax, Matrix};
use serde::{Deserialize, Serialize};

/// Batch keep-count reconciliation rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeepPolicy {
    /// Every instance keeps as many tokens as the batch's busiest instance.
    MaxKeep,
    /// Every instance keeps the round-half-up mean of per-instance counts.
    MeanKeep,
    /// Each instance keeps exactly its own above-threshold set.
    PerInstance,
}

/// Which importance scores participate in the fused score. Disabling
/// components reproduces the "only with" ablations; at least one must stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TisComponents {
    pub use_cls: bool,
    pub use_self: bool,
    pub use_token: bool,
}

impl Default for TisComponents {
    fn default() -> Self {
        TisComponents { use_cls: true, use_self: true, use_token: true }
    }
}

impl TisComponents {
    pub fn enabled_count(&self) -> usize {
        self.use_cls as usize + self.use_self as usize + self.use_token as usize
    }
}

/// The three per-token score vectors and their fusion. Each vector is a
/// distribution over the current alive tokens.
#[derive(Debug, Clone)]
pub struct TokenImportance {
    pub cls_score: Vec<f64>,
    pub self_score: Vec<f64>,
    pub token_score: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Outcome of the threshold rule for one instance at one layer, before any
/// batch policy widens the kept set.
#[derive(Debug, Clone)]
pub struct PruneDecision {
    pub theta: f64,
    /// Keep mask over the layer's alive tokens (threshold rule + forced keeps).
    pub keep_mask: Vec<bool>,
    /// Index force-kept because the strict rule emptied the content set.
    pub forced_index: Option<usize>,
    pub kept_count: usize,
    pub tis_min: f64,
    pub tis_max: f64,
}

/// Per-instance input to the composite prune step.
pub struct PruneInput<'a> {
    /// Alive tokens, one row each.
    pub tokens: &'a Matrix,
    /// Head-averaged self-attention, `n x n`, row-stochastic.
    pub self_map: &'a Matrix,
    /// Guidance token attention, `K x n`, row-stochastic.
    pub token_map: &'a Matrix,
    /// Positions exempt from pruning (CLS/EOS), in current coordinates.
    pub specials: &'a [usize],
    /// Query row used for the class attention score.
    pub cls_index: usize,
}

/// How the composite decides what to keep.
#[derive(Debug, Clone)]
pub enum PruneMode {
    /// Threshold rule plus the batch keep policy.
    Dynamic,
    /// Keep everything; scores and theta are still computed and reported.
    Disabled,
    /// Keep exactly the given number of tokens per instance, ranked by the
    /// fused score with specials forced. Used by the static baseline and by
    /// matched-budget comparison runs; the batch policy does not apply.
    ForcedKeepCounts(Vec<usize>),
}

/// Composite result for one instance.
#[derive(Debug, Clone)]
pub struct PrunedInstance {
    /// Surviving tokens in original order, merged token appended last.
    pub tokens: Matrix,
    /// Indices (into the layer's alive set) that survived, ascending.
    pub kept_indices: Vec<usize>,
    /// Special positions re-expressed in the output token coordinates.
    pub new_specials: Vec<usize>,
    /// Merged replacement token, present iff at least one token was pruned
    /// and merging is enabled.
    pub merged: Option<Vec<f64>>,
    /// Fused score carried by the merged token: the max over its
    /// constituents, recorded for rank-based re-selection.
    pub merged_tis: Option<f64>,
    pub importance: TokenImportance,
    pub decision: PruneDecision,
}

/// Settings for the composite prune step.
#[derive(Debug, Clone)]
pub struct PruneSettings {
    pub temperature: f64,
    pub policy: KeepPolicy,
    pub components: TisComponents,
    /// Fold pruned tokens into a merged replacement token.
    pub merge: bool,
}

/// CLS-query row of the head-averaged self-attention map, renormalized.
pub fn class_attention_score(self_map: &Matrix, cls_index: usize) -> Result<Vec<f64>> {
    if cls_index >= self_map.rows() {
        return Err(MadtpError::invalid(format!(
            "class_attention_score: cls index {cls_index} out of range for {} rows",
            self_map.rows()
        )));
    }
    normalize_to_sum_one(self_map.row(cls_index).to_vec())
}

/// Per-token maximum attention received across queries (column-wise max of
/// the self-attention map), normalized to sum to one.
pub fn self_attention_score(self_map: &Matrix) -> Result<Vec<f64>> {
    if self_map.rows() == 0 || self_map.cols() == 0 {
        return Err(MadtpError::invalid("self_attention_score: empty map"));
    }
    normalize_to_sum_one(column_max(self_map))
}

/// Per-token maximum attention received across learnable tokens (column-wise
/// max of the token attention map), normalized to sum to one.
pub fn token_attention_score(token_map: &Matrix) -> Result<Vec<f64>> {
    if token_map.rows() == 0 || token_map.cols() == 0 {
        return Err(MadtpError::invalid("token_attention_score: empty map"));
    }
    normalize_to_sum_one(column_max(token_map))
}

/// Elementwise mean of the enabled score components.
pub fn fuse_tis(
    cls: &[f64],
    self_score: &[f64],
    token: &[f64],
    components: TisComponents,
) -> Result<Vec<f64>> {
    if cls.len() != self_score.len() || cls.len() != token.len() {
        return Err(MadtpError::invalid("fuse_tis: component length mismatch"));
    }
    if components.enabled_count() == 0 {
        return Err(MadtpError::invalid("fuse_tis: all components disabled"));
    }
    let denom = components.enabled_count() as f64;
    let mut fused = vec![0.0; cls.len()];
    for i in 0..cls.len() {
        let mut acc = 0.0;
        if components.use_cls {
            acc += cls[i];
        }
        if components.use_self {
            acc += self_score[i];
        }
        if components.use_token {
            acc += token[i];
        }
        fused[i] = acc / denom;
    }
    Ok(fused)
}

/// Row-wise sparsemax of the temperature-scaled token attention map.
pub fn sparse_token_attention(token_map: &Matrix, temperature: f64) -> Result<Matrix> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(MadtpError::invalid("sparse_token_attention: temperature must be positive"));
    }
    let mut out = Matrix::zeros(token_map.rows(), token_map.cols());
    for r in 0..token_map.rows() {
        let scaled: Vec<f64> = token_map.row(r).iter().map(|v| v * temperature).collect();
        let dist = sparsemax(&scaled)?;
        out.row_mut(r).copy_from_slice(dist.weights());
    }
    Ok(out)
}

/// Minimum over learnable tokens of the sparse-map-weighted fused score.
/// Convexity pins the result between the smallest and largest score.
pub fn threshold(sparse_map: &Matrix, tis: &[f64]) -> Result<f64> {
    if sparse_map.cols() != tis.len() {
        return Err(MadtpError::invalid(format!(
            "threshold: map has {} columns, scores have {} entries",
            sparse_map.cols(),
            tis.len()
        )));
    }
    if sparse_map.rows() == 0 {
        return Err(MadtpError::invalid("threshold: empty map"));
    }
    let mut theta = f64::INFINITY;
    for r in 0..sparse_map.rows() {
        let dot: f64 = sparse_map.row(r).iter().zip(tis).map(|(a, b)| a * b).sum();
        theta = theta.min(dot);
    }
    Ok(theta)
}

/// Strict-inequality keep mask: a token survives iff its fused score exceeds
/// the threshold. Specials are always kept. If no non-special survives, the
/// highest-scoring non-special is force-kept (lowest index on ties).
pub fn prune_mask(tis: &[f64], theta: f64, specials: &[usize]) -> (Vec<bool>, Option<usize>) {
    let mut mask: Vec<bool> = tis.iter().map(|&s| s > theta).collect();
    for &s in specials {
        mask[s] = true;
    }
    let any_content = mask
        .iter()
        .enumerate()
        .any(|(i, &keep)| keep && !specials.contains(&i));
    let mut forced = None;
    if !any_content {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in tis.iter().enumerate() {
            if specials.contains(&i) {
                continue;
            }
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if let Some((i, _)) = best {
            mask[i] = true;
            forced = Some(i);
        }
    }
    (mask, forced)
}

/// Score-weighted convex combination of the pruned tokens. Falls back to an
/// unweighted mean when every pruned score is exactly zero. Returns the
/// merged row and the max constituent score, or `None` if nothing is pruned.
pub fn merge_pruned(
    tokens: &Matrix,
    tis: &[f64],
    keep_mask: &[bool],
) -> Result<Option<(Vec<f64>, f64)>> {
    if tokens.rows() != tis.len() || tokens.rows() != keep_mask.len() {
        return Err(MadtpError::invalid("merge_pruned: length mismatch"));
    }
    let pruned: Vec<usize> = (0..tokens.rows()).filter(|&i| !keep_mask[i]).collect();
    if pruned.is_empty() {
        return Ok(None);
    }
    let weight_sum: f64 = pruned.iter().map(|&i| tis[i]).sum();
    let mut merged = vec![0.0; tokens.cols()];
    if weight_sum > 0.0 {
        for &i in &pruned {
            let w = tis[i] / weight_sum;
            for (m, &x) in merged.iter_mut().zip(tokens.row(i)) {
                *m += w * x;
            }
        }
    } else {
        let w = 1.0 / pruned.len() as f64;
        for &i in &pruned {
            for (m, &x) in merged.iter_mut().zip(tokens.row(i)) {
                *m += w * x;
            }
        }
    }
    let max_tis = pruned.iter().map(|&i| tis[i]).fold(f64::NEG_INFINITY, f64::max);
    Ok(Some((merged, max_tis)))
}

/// Reconciles per-instance keep masks across a batch.
///
/// max-keep raises every instance to the batch's largest kept count;
/// mean-keep targets the round-half-up mean, floored per instance at its
/// special count plus one. Extra slots are filled top-down by fused score
/// with ties broken toward lower indices, so every instance's own
/// above-threshold set stays kept.
pub fn apply_policy(
    masks: &[Vec<bool>],
    tis_batch: &[Vec<f64>],
    specials_batch: &[Vec<usize>],
    policy: KeepPolicy,
) -> Result<Vec<Vec<bool>>> {
    if masks.is_empty() {
        return Err(MadtpError::invalid("apply_policy: empty batch"));
    }
    if masks.len() != tis_batch.len() || masks.len() != specials_batch.len() {
        return Err(MadtpError::invalid("apply_policy: batch length mismatch"));
    }
    if let KeepPolicy::PerInstance = policy {
        return Ok(masks.to_vec());
    }
    let counts: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&k| k).count()).collect();
    let base_target = match policy {
        KeepPolicy::MaxKeep => counts.iter().copied().max().unwrap_or(0),
        KeepPolicy::MeanKeep => {
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            (mean + 0.5).floor() as usize
        }
        KeepPolicy::PerInstance => unreachable!(),
    };
    let mut out = Vec::with_capacity(masks.len());
    for ((mask, tis), specials) in masks.iter().zip(tis_batch).zip(specials_batch) {
        let floor = specials.len() + 1;
        let target = base_target.max(floor).min(mask.len());
        out.push(top_k_mask(tis, specials, target));
    }
    Ok(out)
}

/// Keep mask selecting `target` tokens: specials first, then non-specials by
/// descending score (ties toward lower index).
fn top_k_mask(tis: &[f64], specials: &[usize], target: usize) -> Vec<bool> {
    let mut mask = vec![false; tis.len()];
    let mut taken = 0;
    for &s in specials {
        if !mask[s] {
            mask[s] = true;
            taken += 1;
        }
    }
    let mut order: Vec<usize> = (0..tis.len()).filter(|i| !specials.contains(i)).collect();
    order.sort_by(|&a, &b| {
        tis[b].partial_cmp(&tis[a]).expect("finite scores").then(a.cmp(&b))
    });
    for i in order {
        if taken >= target {
            break;
        }
        mask[i] = true;
        taken += 1;
    }
    mask
}

/// Computes the three scores and their fusion for one instance.
pub fn importance(
    self_map: &Matrix,
    token_map: &Matrix,
    cls_index: usize,
    components: TisComponents,
) -> Result<TokenImportance> {
    if self_map.rows() != self_map.cols() {
        return Err(MadtpError::invalid("importance: self map must be square"));
    }
    if token_map.cols() != self_map.cols() {
        return Err(MadtpError::invalid("importance: map width mismatch"));
    }
    let cls_score = class_attention_score(self_map, cls_index)?;
    let self_score = self_attention_score(self_map)?;
    let token_score = token_attention_score(token_map)?;
    let fused = fuse_tis(&cls_score, &self_score, &token_score, components)?;
    Ok(TokenImportance { cls_score, self_score, token_score, fused })
}

/// The composite prune step over a batch of instances: scores, sparse maps,
/// threshold, mask, batch policy, then merge of whatever was finally pruned.
/// The merged token is appended after the kept rows and is an ordinary
/// non-special token from the next layer's point of view.
pub fn prune(
    inputs: &[PruneInput],
    mode: &PruneMode,
    settings: &PruneSettings,
) -> Result<Vec<PrunedInstance>> {
    if inputs.is_empty() {
        return Err(MadtpError::invalid("prune: empty batch"));
    }
    if let PruneMode::ForcedKeepCounts(counts) = mode {
        if counts.len() != inputs.len() {
            return Err(MadtpError::invalid("prune: forced count per instance required"));
        }
    }

    let mut importances = Vec::with_capacity(inputs.len());
    let mut decisions = Vec::with_capacity(inputs.len());
    for input in inputs {
        let imp = importance(input.self_map, input.token_map, input.cls_index, settings.components)?;
        let sparse = sparse_token_attention(input.token_map, settings.temperature)?;
        let theta = threshold(&sparse, &imp.fused)?;
        let (mask, forced) = prune_mask(&imp.fused, theta, input.specials);
        let kept_count = mask.iter().filter(|&&k| k).count();
        let tis_min = imp.fused.iter().cloned().fold(f64::INFINITY, f64::min);
        let tis_max = imp.fused.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        decisions.push(PruneDecision {
            theta,
            keep_mask: mask,
            forced_index: forced,
            kept_count,
            tis_min,
            tis_max,
        });
        importances.push(imp);
    }

    let final_masks: Vec<Vec<bool>> = match mode {
        PruneMode::Disabled => inputs.iter().map(|i| vec![true; i.tokens.rows()]).collect(),
        PruneMode::ForcedKeepCounts(counts) => inputs
            .iter()
            .zip(&importances)
            .zip(counts)
            .map(|((input, imp), &n)| top_k_mask(&imp.fused, input.specials, n))
            .collect(),
        PruneMode::Dynamic => {
            let masks: Vec<Vec<bool>> = decisions.iter().map(|d| d.keep_mask.clone()).collect();
            let tis: Vec<Vec<f64>> = importances.iter().map(|i| i.fused.clone()).collect();
            let specials: Vec<Vec<usize>> = inputs.iter().map(|i| i.specials.to_vec()).collect();
            apply_policy(&masks, &tis, &specials, settings.policy)?
        }
    };

    let mut results = Vec::with_capacity(inputs.len());
    for (((input, imp), decision), final_mask) in
        inputs.iter().zip(importances).zip(decisions).zip(final_masks)
    {
        let kept_indices: Vec<usize> =
            (0..input.tokens.rows()).filter(|&i| final_mask[i]).collect();
        let mut tokens = input.tokens.select_rows(&kept_indices)?;
        let new_specials: Vec<usize> = kept_indices
            .iter()
            .enumerate()
            .filter(|(_, orig)| input.specials.contains(orig))
            .map(|(new_idx, _)| new_idx)
            .collect();
        let (merged, merged_tis) = if settings.merge {
            match merge_pruned(input.tokens, &imp.fused, &final_mask)? {
                Some((row, max_tis)) => {
                    tokens.push_row(&row)?;
                    (Some(row), Some(max_tis))
                }
                None => (None, None),
            }
        } else {
            (None, None)
        };
        results.push(PrunedInstance {
            tokens,
            kept_indices,
            new_specials,
            merged,
            merged_tis,
            importance: imp,
            decision,
        });
    }
    Ok(results)
}

fn column_max(map: &Matrix) -> Vec<f64> {
    let mut maxes = vec![f64::NEG_INFINITY; map.cols()];
    for r in 0..map.rows() {
        for (m, &v) in maxes.iter_mut().zip(map.row(r)) {
            if v > *m {
                *m = v;
            }
        }
    }
    maxes
}

fn normalize_to_sum_one(mut values: Vec<f64>) -> Result<Vec<f64>> {
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        return Err(MadtpError::degenerate(format!("score normalization: sum {sum}")));
    }
    for v in &mut values {
        *v /= sum;
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn class_score_renormalizes_cls_row() {
        let map = Matrix::new(2, 2, vec![0.6, 0.4, 0.5, 0.5]).unwrap();
        close(&class_attention_score(&map, 0).unwrap(), &[0.6, 0.4], 1e-15);

        let uniform = Matrix::new(3, 3, vec![1.0 / 3.0; 9]).unwrap();
        close(&class_attention_score(&uniform, 1).unwrap(), &[1.0 / 3.0; 3], 1e-15);

        assert!(class_attention_score(&map, 5).is_err());
    }

    #[test]
    fn self_score_uses_column_maxes() {
        let map = Matrix::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        close(&self_attention_score(&map).unwrap(), &[9.0 / 17.0, 8.0 / 17.0], 1e-15);

        let uniform = Matrix::new(4, 4, vec![0.25; 16]).unwrap();
        close(&self_attention_score(&uniform).unwrap(), &[0.25; 4], 1e-15);

        let single = Matrix::new(1, 1, vec![1.0]).unwrap();
        close(&self_attention_score(&single).unwrap(), &[1.0], 0.0);
    }

    #[test]
    fn token_score_uses_column_maxes() {
        let map = Matrix::new(2, 2, vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        close(&token_attention_score(&map).unwrap(), &[7.0 / 13.0, 6.0 / 13.0], 1e-15);

        let one_row = Matrix::new(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        close(&token_attention_score(&one_row).unwrap(), &[0.2, 0.5, 0.3], 1e-15);

        let same_cols = Matrix::new(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        close(&token_attention_score(&same_cols).unwrap(), &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn fuse_averages_and_respects_ablation() {
        let v = vec![0.25, 0.75];
        let fused = fuse_tis(&v, &v, &v, TisComponents::default()).unwrap();
        close(&fused, &v, 1e-15);

        let fused = fuse_tis(
            &[0.5, 0.5],
            &[0.8, 0.2],
            &[0.2, 0.8],
            TisComponents::default(),
        )
        .unwrap();
        close(&fused, &[0.5, 0.5], 1e-15);

        let only_self = TisComponents { use_cls: false, use_self: true, use_token: false };
        let fused = fuse_tis(&[0.5, 0.5], &[0.8, 0.2], &[0.2, 0.8], only_self).unwrap();
        close(&fused, &[0.8, 0.2], 1e-15);

        assert!(fuse_tis(&[1.0], &[0.5, 0.5], &[1.0], TisComponents::default()).is_err());
        let none = TisComponents { use_cls: false, use_self: false, use_token: false };
        assert!(fuse_tis(&[1.0], &[1.0], &[1.0], none).is_err());
    }

    #[test]
    fn sparse_attention_limits() {
        let map = Matrix::new(1, 3, vec![0.4, 0.35, 0.25]).unwrap();
        let near_uniform = sparse_token_attention(&map, 1e-9).unwrap();
        close(near_uniform.row(0), &[1.0 / 3.0; 3], 1e-9);

        let map = Matrix::new(1, 2, vec![0.7, 0.3]).unwrap();
        let hard = sparse_token_attention(&map, 10.0).unwrap();
        close(hard.row(0), &[1.0, 0.0], 1e-12);

        assert!(sparse_token_attention(&map, 0.0).is_err());
        assert!(sparse_token_attention(&map, -1.0).is_err());
    }

    #[test]
    fn threshold_takes_min_over_rows() {
        let sparse = Matrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0]).unwrap();
        let theta = threshold(&sparse, &[0.5, 0.3, 0.2]).unwrap();
        assert!((theta - 0.4).abs() < 1e-15);

        let uniform = Matrix::new(2, 4, vec![0.25; 8]).unwrap();
        let tis = [0.1, 0.2, 0.3, 0.4];
        assert!((threshold(&uniform, &tis).unwrap() - 0.25).abs() < 1e-15);

        let one_hot = Matrix::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(threshold(&one_hot, &[0.5, 0.3, 0.2]).unwrap(), 0.2);

        assert!(threshold(&one_hot, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mask_keeps_strictly_above_threshold() {
        let (mask, forced) = prune_mask(&[0.5, 0.3, 0.2], 0.25, &[0]);
        assert_eq!(mask, vec![true, true, false]);
        assert_eq!(forced, None);

        // Threshold at the max: only the special plus the forced argmax stay.
        let (mask, forced) = prune_mask(&[0.5, 0.3, 0.2], 0.5, &[0]);
        assert_eq!(mask, vec![true, true, false]);
        assert_eq!(forced, Some(1));

        let (mask, forced) = prune_mask(&[0.5, 0.3, 0.2], 0.1, &[0]);
        assert_eq!(mask, vec![true, true, true]);
        assert_eq!(forced, None);
    }

    #[test]
    fn mask_forced_keep_breaks_ties_low() {
        let (mask, forced) = prune_mask(&[0.25, 0.25, 0.25, 0.25], 0.25, &[0]);
        assert_eq!(mask, vec![true, true, false, false]);
        assert_eq!(forced, Some(1));
    }

    #[test]
    fn merge_weights_by_score() {
        let tokens = Matrix::new(4, 2, vec![0.0, 0.0, 9.0, 9.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let tis = [0.4, 0.2, 0.3, 0.1];
        let mask = [true, true, false, false];
        let (merged, max_tis) = merge_pruned(&tokens, &tis, &mask).unwrap().unwrap();
        close(&merged, &[0.75, 0.25], 1e-15);
        assert_eq!(max_tis, 0.3);

        // Single pruned token comes back unchanged.
        let mask = [true, true, true, false];
        let (merged, _) = merge_pruned(&tokens, &tis, &mask).unwrap().unwrap();
        close(&merged, &[0.0, 1.0], 1e-15);

        // Nothing pruned.
        assert!(merge_pruned(&tokens, &tis, &[true; 4]).unwrap().is_none());

        // All-zero pruned scores fall back to the plain mean.
        let zero_tis = [0.5, 0.5, 0.0, 0.0];
        let mask = [true, true, false, false];
        let (merged, _) = merge_pruned(&tokens, &zero_tis, &mask).unwrap().unwrap();
        close(&merged, &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn policy_max_and_mean_counts() {
        // Instance A keeps 5 of 10, instance B keeps 8 of 10.
        let mask_a: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let mask_b: Vec<bool> = (0..10).map(|i| i < 8).collect();
        let tis_a: Vec<f64> = (0..10).map(|i| (10 - i) as f64 / 55.0).collect();
        let tis_b = tis_a.clone();
        let specials = vec![vec![0], vec![0]];

        let out = apply_policy(
            &[mask_a.clone(), mask_b.clone()],
            &[tis_a.clone(), tis_b.clone()],
            &specials,
            KeepPolicy::MaxKeep,
        )
        .unwrap();
        assert_eq!(out[0].iter().filter(|&&k| k).count(), 8);
        assert_eq!(out[1].iter().filter(|&&k| k).count(), 8);

        let out = apply_policy(
            &[mask_a.clone(), mask_b.clone()],
            &[tis_a.clone(), tis_b.clone()],
            &specials,
            KeepPolicy::MeanKeep,
        )
        .unwrap();
        // round-half-up of 6.5
        assert_eq!(out[0].iter().filter(|&&k| k).count(), 7);
        assert_eq!(out[1].iter().filter(|&&k| k).count(), 7);

        let out = apply_policy(
            &[mask_a.clone()],
            &[tis_a.clone()],
            &[vec![0]],
            KeepPolicy::MaxKeep,
        )
        .unwrap();
        assert_eq!(out[0], mask_a);

        assert!(apply_policy(&[], &[], &[], KeepPolicy::MaxKeep).is_err());
    }

    #[test]
    fn policy_max_keep_covers_above_threshold_set() {
        let mask_a = vec![true, false, true, false, false];
        let mask_b = vec![true, true, true, true, false];
        let tis_a = vec![0.1, 0.4, 0.3, 0.15, 0.05];
        let tis_b = vec![0.2; 5];
        let out = apply_policy(
            &[mask_a.clone(), mask_b],
            &[tis_a, tis_b.clone()],
            &[vec![0], vec![0]],
            KeepPolicy::MaxKeep,
        )
        .unwrap();
        for (i, &was_kept) in mask_a.iter().enumerate() {
            if was_kept {
                assert!(out[0][i], "above-threshold token {i} lost by max-keep");
            }
        }
    }

    #[test]
    fn guidance_rank_shift() {
        // Token 3 is nearly invisible to self-attention but strongly attended
        // by a learnable token; fusing the guidance score must raise its rank
        // above the self-only ordering.
        let self_map = Matrix::new(
            4,
            4,
            vec![
                0.40, 0.30, 0.29, 0.01, //
                0.40, 0.30, 0.29, 0.01, //
                0.40, 0.30, 0.29, 0.01, //
                0.40, 0.30, 0.29, 0.01,
            ],
        )
        .unwrap();
        let token_map = Matrix::new(1, 4, vec![0.05, 0.05, 0.05, 0.85]).unwrap();
        let imp = importance(&self_map, &token_map, 0, TisComponents::default()).unwrap();

        let rank = |scores: &[f64], idx: usize| {
            scores.iter().filter(|&&s| s > scores[idx]).count()
        };
        assert!(
            rank(&imp.fused, 3) < rank(&imp.self_score, 3),
            "guidance failed to promote the cross-modal token"
        );
    }

    #[test]
    fn prune_disabled_keeps_everything_but_reports_theta() {
        let tokens = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let self_map = Matrix::new(3, 3, vec![1.0 / 3.0; 9]).unwrap();
        let token_map = Matrix::new(2, 3, vec![1.0 / 3.0; 6]).unwrap();
        let input = PruneInput {
            tokens: &tokens,
            self_map: &self_map,
            token_map: &token_map,
            specials: &[0],
            cls_index: 0,
        };
        let settings = PruneSettings {
            temperature: 1.0,
            policy: KeepPolicy::PerInstance,
            components: TisComponents::default(),
            merge: true,
        };
        let out = prune(&[input], &PruneMode::Disabled, &settings).unwrap();
        assert_eq!(out[0].kept_indices, vec![0, 1, 2]);
        assert!(out[0].merged.is_none());
        assert!((out[0].decision.theta - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn prune_uniform_maps_forces_minimal_keep() {
        // Uniform maps give every token the same score, the threshold equals
        // that score, and the strict rule empties the content set; the
        // special and the lowest-index content token survive, the rest merge.
        let tokens =
            Matrix::new(4, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let self_map = Matrix::new(4, 4, vec![0.25; 16]).unwrap();
        let token_map = Matrix::new(2, 4, vec![0.25; 8]).unwrap();
        let input = PruneInput {
            tokens: &tokens,
            self_map: &self_map,
            token_map: &token_map,
            specials: &[0],
            cls_index: 0,
        };
        let settings = PruneSettings {
            temperature: 1.0,
            policy: KeepPolicy::PerInstance,
            components: TisComponents::default(),
            merge: true,
        };
        let out = prune(&[input], &PruneMode::Dynamic, &settings).unwrap();
        assert_eq!(out[0].kept_indices, vec![0, 1]);
        assert_eq!(out[0].decision.forced_index, Some(1));
        assert!((out[0].decision.theta - 0.25).abs() < 1e-15);
        // Merged token: equal weights over tokens 2 and 3.
        close(out[0].merged.as_ref().unwrap(), &[2.5, 2.5], 1e-12);
        assert_eq!(out[0].tokens.rows(), 3);
        assert_eq!(out[0].new_specials, vec![0]);
    }

    #[test]
    fn prune_batch_max_keep_equalizes_counts() {
        let tokens_a = Matrix::new(4, 2, vec![0.1; 8]).unwrap();
        let tokens_b = tokens_a.clone();
        // Instance A: sharply peaked maps prune aggressively; instance B less so.
        let self_a =
            Matrix::new(4, 4, vec![0.97, 0.01, 0.01, 0.01].repeat(4)).unwrap();
        let self_b = Matrix::new(
            4,
            4,
            vec![0.4, 0.3, 0.2, 0.1].repeat(4),
        )
        .unwrap();
        let token_a = Matrix::new(1, 4, vec![0.97, 0.01, 0.01, 0.01]).unwrap();
        let token_b = Matrix::new(1, 4, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let inputs = vec![
            PruneInput {
                tokens: &tokens_a,
                self_map: &self_a,
                token_map: &token_a,
                specials: &[0],
                cls_index: 0,
            },
            PruneInput {
                tokens: &tokens_b,
                self_map: &self_b,
                token_map: &token_b,
                specials: &[0],
                cls_index: 0,
            },
        ];
        let settings = PruneSettings {
            temperature: 4.0,
            policy: KeepPolicy::MaxKeep,
            components: TisComponents::default(),
            merge: true,
        };
        let out = prune(&inputs, &PruneMode::Dynamic, &settings).unwrap();
        assert_eq!(out[0].tokens.rows(), out[1].tokens.rows());
    }
}
