//! Minimal reverse-mode differentiation over [`Matrix`] values for the small
//! op set the toy trainer needs: linear algebra, layer norm, GELU, row
//! softmax/sparsemax, gather/concat, the score normalizations, the merged
//! token, and the two loss heads.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the
//! tape once in reverse. Discrete choices (kept indices, column argmaxes,
//! sparsemax supports, the threshold argmin) are frozen at forward time, so
//! gradients agree with finite differences wherever those choices are stable
//! under perturbation.

use crate::error::{MadtpError, Result};
use crate::numerics::{softmax, sparsemax, Matrix};
use crate::vlt::gelu;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm { x: NodeId, gamma: Vec<f64>, eps: f64 },
    Gelu(NodeId),
    RowSoftmax(NodeId),
    SparsemaxRows(NodeId),
    SelectRows { x: NodeId, indices: Vec<usize> },
    SelectCols { x: NodeId, cols: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    WeightedMergeRow { tokens: NodeId, weights: NodeId, indices: Vec<usize> },
    ColumnMaxNorm { x: NodeId, argmax_rows: Vec<usize> },
    RowRenorm { x: NodeId, row: usize },
    MeanRows(Vec<NodeId>),
    DotRow { map: NodeId, scores: NodeId, row: usize },
    CosineAlignLoss { a: NodeId, b: NodeId },
    CrossEntropyLogits { logits: NodeId, label: usize },
    MeanScalars(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Eager forward tape with a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.data().len(), 1);
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// `a + bias`, bias being a 1-row node broadcast over a's rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        if self.value(bias).rows() != 1 {
            return Err(MadtpError::invalid("add_bias: bias must be a single row"));
        }
        let value = self.value(a).add_row(self.value(bias).row(0))?;
        Ok(self.push(Op::AddBias(a, bias), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v * factor).collect();
        let value = Matrix::new(src.rows(), src.cols(), data).expect("shape preserved");
        self.push(Op::Scale(a, factor), value)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: &[f64], beta: &[f64]) -> Result<NodeId> {
        let value = crate::vlt::layer_norm(self.value(x), gamma, beta)?;
        Ok(self.push(Op::LayerNorm { x, gamma: gamma.to_vec(), eps: 1e-6 }, value))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let data = src.data().iter().map(|&v| gelu(v)).collect();
        let value = Matrix::new(src.rows(), src.cols(), data).expect("shape preserved");
        self.push(Op::Gelu(a), value)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(softmax(src.row(r))?.weights());
        }
        Ok(self.push(Op::RowSoftmax(a), value))
    }

    pub fn sparsemax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(sparsemax(src.row(r))?.weights());
        }
        Ok(self.push(Op::SparsemaxRows(a), value))
    }

    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let value = self.value(x).select_rows(indices)?;
        Ok(self.push(Op::SelectRows { x, indices: indices.to_vec() }, value))
    }

    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let mut value = Matrix::zeros(src.rows(), cols.len());
        for r in 0..src.rows() {
            for (ci, &c) in cols.iter().enumerate() {
                if c >= src.cols() {
                    return Err(MadtpError::invalid("select_cols: column out of range"));
                }
                value.set(r, ci, src.at(r, c));
            }
        }
        Ok(self.push(Op::SelectCols { x, cols: cols.to_vec() }, value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(MadtpError::invalid("concat_cols: no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let src = self.value(p);
            if src.rows() != rows {
                return Err(MadtpError::invalid("concat_cols: row count mismatch"));
            }
            for r in 0..rows {
                for c in 0..src.cols() {
                    value.set(r, offset + c, src.at(r, c));
                }
            }
            offset += src.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(MadtpError::invalid("concat_rows: no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            if src.cols() != cols {
                return Err(MadtpError::invalid("concat_rows: column count mismatch"));
            }
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let value = Matrix::new(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Score-weighted convex combination of the listed token rows; `weights`
    /// is a 1-row score node over all tokens. Zero total weight falls back
    /// to the plain mean with the weights treated as frozen.
    pub fn weighted_merge_row(
        &mut self,
        tokens: NodeId,
        weights: NodeId,
        indices: &[usize],
    ) -> Result<NodeId> {
        if indices.is_empty() {
            return Err(MadtpError::invalid("weighted_merge_row: nothing to merge"));
        }
        let toks = self.value(tokens);
        let w = self.value(weights);
        if w.rows() != 1 || w.cols() != toks.rows() {
            return Err(MadtpError::invalid("weighted_merge_row: weight shape mismatch"));
        }
        let total: f64 = indices.iter().map(|&i| w.at(0, i)).sum();
        let mut merged = vec![0.0; toks.cols()];
        if total > 0.0 {
            for &i in indices {
                let wi = w.at(0, i) / total;
                for (m, &x) in merged.iter_mut().zip(toks.row(i)) {
                    *m += wi * x;
                }
            }
        } else {
            let wi = 1.0 / indices.len() as f64;
            for &i in indices {
                for (m, &x) in merged.iter_mut().zip(toks.row(i)) {
                    *m += wi * x;
                }
            }
        }
        let value = Matrix::new(1, toks.cols(), merged)?;
        Ok(self.push(Op::WeightedMergeRow { tokens, weights, indices: indices.to_vec() }, value))
    }

    /// Column-wise max normalized to sum one; the argmax row per column is
    /// frozen at forward time.
    pub fn column_max_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        if src.rows() == 0 || src.cols() == 0 {
            return Err(MadtpError::invalid("column_max_norm: empty input"));
        }
        let mut argmax_rows = vec![0usize; src.cols()];
        let mut maxes = vec![f64::NEG_INFINITY; src.cols()];
        for r in 0..src.rows() {
            for c in 0..src.cols() {
                let v = src.at(r, c);
                if v > maxes[c] {
                    maxes[c] = v;
                    argmax_rows[c] = r;
                }
            }
        }
        let total: f64 = maxes.iter().sum();
        if total <= 0.0 {
            return Err(MadtpError::degenerate("column_max_norm: non-positive total"));
        }
        let value = Matrix::new(1, src.cols(), maxes.iter().map(|m| m / total).collect())?;
        Ok(self.push(Op::ColumnMaxNorm { x, argmax_rows }, value))
    }

    /// One row of `x` renormalized to sum one.
    pub fn row_renorm(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let src = self.value(x);
        if row >= src.rows() {
            return Err(MadtpError::invalid("row_renorm: row out of range"));
        }
        let sum: f64 = src.row(row).iter().sum();
        if sum <= 0.0 {
            return Err(MadtpError::degenerate("row_renorm: non-positive row sum"));
        }
        let value = Matrix::new(1, src.cols(), src.row(row).iter().map(|v| v / sum).collect())?;
        Ok(self.push(Op::RowRenorm { x, row }, value))
    }

    /// Elementwise mean of several single-row nodes.
    pub fn mean_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(MadtpError::invalid("mean_rows: no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut acc = vec![0.0; cols];
        for &p in parts {
            let src = self.value(p);
            if src.rows() != 1 || src.cols() != cols {
                return Err(MadtpError::invalid("mean_rows: shape mismatch"));
            }
            for (a, &v) in acc.iter_mut().zip(src.row(0)) {
                *a += v;
            }
        }
        let n = parts.len() as f64;
        let value = Matrix::new(1, cols, acc.into_iter().map(|v| v / n).collect())?;
        Ok(self.push(Op::MeanRows(parts.to_vec()), value))
    }

    /// Dot product of one (frozen) map row with a single-row score node.
    pub fn dot_row(&mut self, map: NodeId, scores: NodeId, row: usize) -> Result<NodeId> {
        let m = self.value(map);
        let s = self.value(scores);
        if s.rows() != 1 || s.cols() != m.cols() || row >= m.rows() {
            return Err(MadtpError::invalid("dot_row: shape mismatch"));
        }
        let dot: f64 = m.row(row).iter().zip(s.row(0)).map(|(a, b)| a * b).sum();
        let value = Matrix::new(1, 1, vec![dot])?;
        Ok(self.push(Op::DotRow { map, scores, row }, value))
    }

    /// Mean over rows of `1 - cos(a_i, b_i)`.
    pub fn cosine_align_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.rows() != mb.rows() || ma.cols() != mb.cols() {
            return Err(MadtpError::invalid("cosine_align_loss: shape mismatch"));
        }
        let mut total = 0.0;
        for i in 0..ma.rows() {
            total += 1.0 - crate::numerics::cosine_similarity(ma.row(i), mb.row(i))?;
        }
        let value = Matrix::new(1, 1, vec![total / ma.rows() as f64])?;
        Ok(self.push(Op::CosineAlignLoss { a, b }, value))
    }

    /// Negative log-likelihood of `label` under softmax of a 1-row logit node.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rows() != 1 || label >= l.cols() {
            return Err(MadtpError::invalid("cross_entropy_logits: bad shapes"));
        }
        let probs = softmax(l.row(0))?;
        let value = Matrix::new(1, 1, vec![-probs.weights()[label].max(1e-300).ln()])?;
        Ok(self.push(Op::CrossEntropyLogits { logits, label }, value))
    }

    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(MadtpError::invalid("mean_scalars: no parts"));
        }
        let mut acc = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != 1 || v.cols() != 1 {
                return Err(MadtpError::invalid("mean_scalars: non-scalar part"));
            }
            acc += v.at(0, 0);
        }
        let value = Matrix::new(1, 1, vec![acc / parts.len() as f64])?;
        Ok(self.push(Op::MeanScalars(parts.to_vec()), value))
    }

    /// Reverse sweep from a scalar root. Returns one gradient per node (zero
    /// matrices where nothing flowed).
    pub fn backward(&self, root: NodeId) -> Result<Vec<Matrix>> {
        let root_val = self.value(root);
        if root_val.rows() != 1 || root_val.cols() != 1 {
            return Err(MadtpError::invalid("backward: root must be scalar"));
        }
        let mut grads: Vec<Matrix> =
            self.nodes.iter().map(|n| Matrix::zeros(n.value.rows(), n.value.cols())).collect();
        grads[root] = Matrix::new(1, 1, vec![1.0])?;

        for id in (0..=root).rev() {
            let grad = grads[id].clone();
            if grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = grad.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&grad)?;
                    grads[*a] = grads[*a].add(&da)?;
                    grads[*b] = grads[*b].add(&db)?;
                }
                Op::Transpose(a) => {
                    grads[*a] = grads[*a].add(&grad.transpose())?;
                }
                Op::Add(a, b) => {
                    grads[*a] = grads[*a].add(&grad)?;
                    grads[*b] = grads[*b].add(&grad)?;
                }
                Op::AddBias(a, bias) => {
                    grads[*a] = grads[*a].add(&grad)?;
                    let mut col_sum = vec![0.0; grad.cols()];
                    for r in 0..grad.rows() {
                        for (acc, &g) in col_sum.iter_mut().zip(grad.row(r)) {
                            *acc += g;
                        }
                    }
                    let db = Matrix::new(1, grad.cols(), col_sum)?;
                    grads[*bias] = grads[*bias].add(&db)?;
                }
                Op::Scale(a, factor) => {
                    let scaled = Matrix::new(
                        grad.rows(),
                        grad.cols(),
                        grad.data().iter().map(|g| g * factor).collect(),
                    )?;
                    grads[*a] = grads[*a].add(&scaled)?;
                }
                Op::LayerNorm { x, gamma, eps, .. } => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    let n = src.cols() as f64;
                    for r in 0..src.rows() {
                        let row = src.row(r);
                        let mean: f64 = row.iter().sum::<f64>() / n;
                        let var: f64 =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let sigma = (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sigma).collect();
                        let gh: Vec<f64> =
                            grad.row(r).iter().zip(gamma).map(|(g, gm)| g * gm).collect();
                        let mean_gh: f64 = gh.iter().sum::<f64>() / n;
                        let mean_gh_xhat: f64 =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..src.cols() {
                            dx.set(r, c, (gh[c] - mean_gh - xhat[c] * mean_gh_xhat) / sigma);
                        }
                    }
                    grads[*x] = grads[*x].add(&dx)?;
                }
                Op::Gelu(a) => {
                    let src = self.value(*a);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    for r in 0..src.rows() {
                        for col in 0..src.cols() {
                            let x = src.at(r, col);
                            let u = c * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = c * (1.0 + 3.0 * 0.044715 * x * x);
                            let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                            dx.set(r, col, grad.at(r, col) * d);
                        }
                    }
                    grads[*a] = grads[*a].add(&dx)?;
                }
                Op::RowSoftmax(a) => {
                    let y = self.value(id);
                    let mut dz = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 =
                            grad.row(r).iter().zip(y.row(r)).map(|(g, p)| g * p).sum();
                        for c in 0..y.cols() {
                            dz.set(r, c, y.at(r, c) * (grad.at(r, c) - dot));
                        }
                    }
                    grads[*a] = grads[*a].add(&dz)?;
                }
                Op::SparsemaxRows(a) => {
                    let y = self.value(id);
                    let mut dz = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let support: Vec<usize> =
                            (0..y.cols()).filter(|&c| y.at(r, c) > 0.0).collect();
                        let mean: f64 =
                            support.iter().map(|&c| grad.at(r, c)).sum::<f64>()
                                / support.len() as f64;
                        for &c in &support {
                            dz.set(r, c, grad.at(r, c) - mean);
                        }
                    }
                    grads[*a] = grads[*a].add(&dz)?;
                }
                Op::SelectRows { x, indices } => {
                    let mut dx =
                        Matrix::zeros(self.value(*x).rows(), self.value(*x).cols());
                    for (gi, &xi) in indices.iter().enumerate() {
                        for c in 0..grad.cols() {
                            dx.set(xi, c, dx.at(xi, c) + grad.at(gi, c));
                        }
                    }
                    grads[*x] = grads[*x].add(&dx)?;
                }
                Op::SelectCols { x, cols } => {
                    let mut dx =
                        Matrix::zeros(self.value(*x).rows(), self.value(*x).cols());
                    for r in 0..grad.rows() {
                        for (gi, &xi) in cols.iter().enumerate() {
                            dx.set(r, xi, dx.at(r, xi) + grad.at(r, gi));
                        }
                    }
                    grads[*x] = grads[*x].add(&dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut dp = Matrix::zeros(grad.rows(), w);
                        for r in 0..grad.rows() {
                            for c in 0..w {
                                dp.set(r, c, grad.at(r, offset + c));
                            }
                        }
                        grads[p] = grads[p].add(&dp)?;
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let mut dp = Matrix::zeros(rows, grad.cols());
                        for r in 0..rows {
                            for c in 0..grad.cols() {
                                dp.set(r, c, grad.at(offset + r, c));
                            }
                        }
                        grads[p] = grads[p].add(&dp)?;
                        offset += rows;
                    }
                }
                Op::WeightedMergeRow { tokens, weights, indices } => {
                    let toks = self.value(*tokens);
                    let w = self.value(*weights);
                    let merged = self.value(id);
                    let total: f64 = indices.iter().map(|&i| w.at(0, i)).sum();
                    let mut dt = Matrix::zeros(toks.rows(), toks.cols());
                    let mut dw = Matrix::zeros(1, w.cols());
                    if total > 0.0 {
                        for &i in indices {
                            let wi = w.at(0, i) / total;
                            let mut dot = 0.0;
                            for c in 0..toks.cols() {
                                dt.set(i, c, dt.at(i, c) + wi * grad.at(0, c));
                                dot += grad.at(0, c) * (toks.at(i, c) - merged.at(0, c));
                            }
                            dw.set(0, i, dot / total);
                        }
                    } else {
                        let wi = 1.0 / indices.len() as f64;
                        for &i in indices {
                            for c in 0..toks.cols() {
                                dt.set(i, c, dt.at(i, c) + wi * grad.at(0, c));
                            }
                        }
                    }
                    grads[*tokens] = grads[*tokens].add(&dt)?;
                    grads[*weights] = grads[*weights].add(&dw)?;
                }
                Op::ColumnMaxNorm { x, argmax_rows } => {
                    let src = self.value(*x);
                    let y = self.value(id);
                    let maxes: Vec<f64> =
                        argmax_rows.iter().enumerate().map(|(c, &r)| src.at(r, c)).collect();
                    let total: f64 = maxes.iter().sum();
                    let gy_dot: f64 =
                        grad.row(0).iter().zip(y.row(0)).map(|(g, s)| g * s).sum();
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for (c, &r) in argmax_rows.iter().enumerate() {
                        let dm = grad.at(0, c) / total - gy_dot / total;
                        dx.set(r, c, dm);
                    }
                    grads[*x] = grads[*x].add(&dx)?;
                }
                Op::RowRenorm { x, row } => {
                    let src = self.value(*x);
                    let y = self.value(id);
                    let sum: f64 = src.row(*row).iter().sum();
                    let gy_dot: f64 =
                        grad.row(0).iter().zip(y.row(0)).map(|(g, v)| g * v).sum();
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for c in 0..src.cols() {
                        dx.set(*row, c, grad.at(0, c) / sum - gy_dot / sum);
                    }
                    grads[*x] = grads[*x].add(&dx)?;
                }
                Op::MeanRows(parts) => {
                    let n = parts.len() as f64;
                    for &p in parts {
                        let dp = Matrix::new(
                            1,
                            grad.cols(),
                            grad.row(0).iter().map(|g| g / n).collect(),
                        )?;
                        grads[p] = grads[p].add(&dp)?;
                    }
                }
                Op::DotRow { map, scores, row } => {
                    let g = grad.at(0, 0);
                    let m = self.value(*map);
                    let s = self.value(*scores);
                    let mut dm = Matrix::zeros(m.rows(), m.cols());
                    let mut ds = Matrix::zeros(1, s.cols());
                    for c in 0..m.cols() {
                        dm.set(*row, c, g * s.at(0, c));
                        ds.set(0, c, g * m.at(*row, c));
                    }
                    grads[*map] = grads[*map].add(&dm)?;
                    grads[*scores] = grads[*scores].add(&ds)?;
                }
                Op::CosineAlignLoss { a, b } => {
                    let g = grad.at(0, 0);
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let k = ma.rows() as f64;
                    let mut da = Matrix::zeros(ma.rows(), ma.cols());
                    let mut db = Matrix::zeros(mb.rows(), mb.cols());
                    for i in 0..ma.rows() {
                        let (ra, rb) = (ma.row(i), mb.row(i));
                        let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                        let cos = dot / (na * nb);
                        for c in 0..ma.cols() {
                            let dcos_da = rb[c] / (na * nb) - cos * ra[c] / (na * na);
                            let dcos_db = ra[c] / (na * nb) - cos * rb[c] / (nb * nb);
                            da.set(i, c, -g / k * dcos_da);
                            db.set(i, c, -g / k * dcos_db);
                        }
                    }
                    grads[*a] = grads[*a].add(&da)?;
                    grads[*b] = grads[*b].add(&db)?;
                }
                Op::CrossEntropyLogits { logits, label } => {
                    let g = grad.at(0, 0);
                    let l = self.value(*logits);
                    let probs = softmax(l.row(0))?;
                    let mut dl = Matrix::zeros(1, l.cols());
                    for c in 0..l.cols() {
                        let onehot = if c == *label { 1.0 } else { 0.0 };
                        dl.set(0, c, g * (probs.weights()[c] - onehot));
                    }
                    grads[*logits] = grads[*logits].add(&dl)?;
                }
                Op::MeanScalars(parts) => {
                    let g = grad.at(0, 0) / parts.len() as f64;
                    let dp = Matrix::new(1, 1, vec![g])?;
                    for &p in parts {
                        grads[p] = grads[p].add(&dp)?;
                    }
                }
            }
        }
        Ok(grads)
    }
}
