//! Importance-weighted DPP kernel and greedy MAP token selection.
//!
//! Token importance `q_i` is the attention a patch token receives, averaged
//! over heads and source layers. Redundancy comes from cosine similarity of
//! patch features. The L-ensemble kernel is `L_ij = q_i * S_ij * q_j`.
//!
//! [`greedy_map`] grows the selected set one token at a time, each step
//! taking the candidate with the largest conditional variance
//! `d_i^2 = det(L[T+i]) / det(L[T])`. The conditional variances are kept
//! current with incremental Cholesky rows, so a step costs `O(N * |T|)`
//! and no determinant is ever formed.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_io::{AttentionTrace, FeatureDump};

pub const DEFAULT_JITTER_REL: f64 = 1e-6;
pub const DEFAULT_GAIN_TOL: f64 = 1e-12;
/// Relative tolerance (against the kernel trace) for symmetry and
/// negative conditional variances.
pub const PSD_TOLERANCE: f64 = 1e-8;
const SCAN_BLOCK: usize = 256;

/// Attention received by each patch token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub q: Vec<f64>,
    pub source_layers: Vec<usize>,
}

impl ImportanceVector {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = q.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "importance q[{i}] = {v} must be finite and nonnegative"
            )));
        }
        Ok(ImportanceVector {
            q,
            source_layers: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Column sums over patch tokens of the attention averaged over all heads
/// of `source_layers`. Every query row contributes, CLS included.
pub fn token_importance(trace: &AttentionTrace, source_layers: &[usize]) -> Result<ImportanceVector> {
    if source_layers.is_empty() {
        return Err(Error::InvalidArgument("no source layers given".into()));
    }
    if !trace.is_full() {
        return Err(Error::ClsReducedStorage);
    }
    let header = trace.header();
    let n_total = header.num_tokens;
    let skip = usize::from(header.has_cls);
    let mut acc = vec![0.0f64; n_total];
    for &layer in source_layers {
        let pos = header.layer_position(layer)?;
        for head in 0..header.num_heads {
            for row in trace.matrix(pos, head)?.chunks_exact(n_total) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
        }
    }
    let scale = 1.0 / (source_layers.len() * header.num_heads) as f64;
    let q = acc[skip..].iter().map(|v| v * scale).collect();
    Ok(ImportanceVector {
        q,
        source_layers: source_layers.to_vec(),
    })
}

/// Cosine similarities between patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    s: Array2<f64>,
    zero_rows: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }

    /// Tokens whose feature vector was all zeros.
    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }
}

/// Cosine similarity matrix of the dump's patch-token features.
pub fn similarity_matrix(features: &FeatureDump) -> Result<SimilarityMatrix> {
    let rows = features.num_rows();
    let dim = features.dim();
    let data: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
    let f = Array2::from_shape_vec((rows, dim), data)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    similarity_from_rows(f.view())
}

/// Cosine similarity of the rows of `features` (`N x C`).
///
/// An all-zero row gets `S_ii = 1` and zero similarity to every other row.
pub fn similarity_from_rows(features: ArrayView2<'_, f64>) -> Result<SimilarityMatrix> {
    let (n, c) = features.dim();
    if n == 0 || c == 0 {
        return Err(Error::EmptyInput(format!("feature matrix is {n}x{c}")));
    }
    if let Some(index) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            section: "features".into(),
            index,
        });
    }
    let mut normalized = features.to_owned();
    let mut zero_rows = Vec::new();
    for (i, mut row) in normalized.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        } else {
            zero_rows.push(i);
        }
    }
    let gram = normalized.dot(&normalized.t());
    let mut s = Array2::from_shape_fn((n, n), |(i, j)| {
        (0.5 * (gram[[i, j]] + gram[[j, i]])).clamp(-1.0, 1.0)
    });
    for i in 0..n {
        s[[i, i]] = 1.0;
    }
    Ok(SimilarityMatrix { s, zero_rows })
}

/// PSD L-ensemble kernel over patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DppKernel {
    l: Array2<f64>,
    jitter: f64,
}

impl DppKernel {
    /// Wraps an arbitrary symmetric matrix as a kernel (no jitter).
    pub fn from_matrix(l: Array2<f64>) -> Result<Self> {
        if !l.is_square() || l.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!("kernel shape {:?}", l.dim())));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPsd("kernel has non-finite entries".into()));
        }
        Ok(DppKernel { l, jitter: 0.0 })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.l
    }

    /// Diagonal jitter that was added when the kernel was built.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.l.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.l.nrows() == 0
    }

    pub fn trace(&self) -> f64 {
        self.l.diag().sum()
    }
}

/// `L_ij = q_i S_ij q_j`, plus `jitter_rel * trace(L) / N` on the diagonal.
pub fn build_kernel(q: &ImportanceVector, s: &SimilarityMatrix, jitter_rel: f64) -> Result<DppKernel> {
    let n = q.len();
    if s.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "importance has {n} tokens, similarity has {}",
            s.len()
        )));
    }
    if !(jitter_rel >= 0.0 && jitter_rel.is_finite()) {
        return Err(Error::InvalidArgument(format!("jitter {jitter_rel} must be >= 0")));
    }
    if q.q.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateKernel("importance vector is all zeros".into()));
    }
    let qv = &q.q;
    let mut l = Array2::from_shape_fn((n, n), |(i, j)| qv[i] * s.s[[i, j]] * qv[j]);
    let trace = l.diag().sum();
    let jitter = jitter_rel * trace / n as f64;
    l.diag_mut().iter_mut().for_each(|v| *v += jitter);
    Ok(DppKernel { l, jitter })
}

/// Tokens chosen by a selector, in selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<usize>,
    #[serde(rename = "K_requested")]
    pub k_requested: usize,
    #[serde(rename = "K_selected")]
    pub k_selected: usize,
    /// `ln` of each pick's conditional variance; empty for Top-k.
    pub marginal_log_gains: Vec<f64>,
    pub stopped_early: bool,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::OutOfRange(format!("K = {k} must be in [1, {n}]")));
    }
    Ok(())
}

/// Greedy MAP inference with incremental Cholesky updates.
///
/// Stops early when the best remaining conditional variance is at most
/// `gain_tol`. Ties go to the lowest index.
pub fn greedy_map(kernel: &DppKernel, k: usize, gain_tol: f64) -> Result<SelectionResult> {
    let n = kernel.len();
    check_k(k, n)?;
    let l = &kernel.l;
    let scale = kernel.trace().abs().max(f64::MIN_POSITIVE);
    let tol = PSD_TOLERANCE * scale;
    for i in 0..n {
        if l[[i, i]] < -tol {
            return Err(Error::NotPsd(format!("negative diagonal L[{i},{i}] = {}", l[[i, i]])));
        }
        for j in (i + 1)..n {
            if (l[[i, j]] - l[[j, i]]).abs() > tol {
                return Err(Error::NotPsd(format!("asymmetric at ({i}, {j})")));
            }
        }
    }

    // cond_var[i]: conditional variance of i given the selected set.
    // chol rows: chol[t * n + i] is entry t of candidate i's Cholesky row.
    let mut cond_var: Vec<f64> = l.diag().to_vec();
    let mut taken = vec![false; n];
    let mut chol: Vec<f64> = Vec::with_capacity(k * n);
    let mut selected = Vec::with_capacity(k);
    let mut gains = Vec::with_capacity(k);
    let mut stopped_early = false;

    while selected.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in cond_var.iter().enumerate() {
            if !taken[i] && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (j, var_j) = best.expect("k <= n leaves a candidate");
        if var_j <= gain_tol {
            stopped_early = true;
            break;
        }
        taken[j] = true;
        selected.push(j);
        gains.push(var_j.ln());
        if selected.len() == k {
            break;
        }

        let t = selected.len() - 1;
        let d_j = var_j.sqrt();
        let c_j: Vec<f64> = (0..t).map(|s| chol[s * n + j]).collect();
        let row_j = l.row(j);
        let mut e = vec![0.0f64; n];
        let prev = &chol;
        e.par_chunks_mut(SCAN_BLOCK)
            .zip(cond_var.par_chunks_mut(SCAN_BLOCK))
            .enumerate()
            .for_each(|(b, (e_blk, var_blk))| {
                let base = b * SCAN_BLOCK;
                for (off, (e_i, var_i)) in e_blk.iter_mut().zip(var_blk.iter_mut()).enumerate() {
                    let i = base + off;
                    let dot: f64 = c_j
                        .iter()
                        .enumerate()
                        .map(|(s, c)| c * prev[s * n + i])
                        .sum();
                    *e_i = (row_j[i] - dot) / d_j;
                    *var_i -= *e_i * *e_i;
                }
            });
        chol.extend_from_slice(&e);

        if let Some((i, v)) = cond_var
            .iter()
            .enumerate()
            .find(|(i, v)| !taken[*i] && **v < -tol)
        {
            return Err(Error::NotPsd(format!(
                "conditional variance of token {i} is {v} after {} picks",
                selected.len()
            )));
        }
    }

    Ok(SelectionResult {
        k_requested: k,
        k_selected: selected.len(),
        selected,
        marginal_log_gains: gains,
        stopped_early,
    })
}

/// Indices of the `k` largest importances, ties toward the lowest index.
pub fn topk_select(q: &ImportanceVector, k: usize) -> Result<SelectionResult> {
    check_k(k, q.len())?;
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q.q[b].total_cmp(&q.q[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(SelectionResult {
        selected: order,
        k_requested: k,
        k_selected: k,
        marginal_log_gains: Vec::new(),
        stopped_early: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::{Storage, TraceHeader};
    use ndarray::array;

    fn full_trace(n: usize, data: Vec<f32>, has_cls: bool) -> AttentionTrace {
        let header = TraceHeader::vision("t", vec![0], 1, n, has_cls, Storage::Full);
        AttentionTrace::new(header, data).unwrap()
    }

    #[test]
    fn importance_uniform_rows() {
        let t = full_trace(4, vec![0.25; 16], false);
        assert_eq!(token_importance(&t, &[0]).unwrap().q, vec![1.0; 4]);
    }

    #[test]
    fn importance_identity_rows() {
        let t = full_trace(2, vec![1.0, 0.0, 0.0, 1.0], false);
        assert_eq!(token_importance(&t, &[0]).unwrap().q, vec![1.0, 1.0]);
    }

    #[test]
    fn importance_drops_cls_column_keeps_cls_row() {
        // CLS row puts all mass on patch 1 (absolute 2).
        let t = full_trace(3, vec![0.0, 0.0, 1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0], true);
        assert_eq!(token_importance(&t, &[0]).unwrap().q, vec![0.5, 2.0]);
    }

    #[test]
    fn importance_errors() {
        let t = full_trace(2, vec![1.0, 0.0, 0.0, 1.0], false);
        assert!(token_importance(&t, &[]).is_err());
        assert!(matches!(token_importance(&t, &[3]), Err(Error::LayerNotFound(3))));
        let header = TraceHeader::vision("t", vec![0], 1, 2, true, Storage::ClsReduced);
        let t = AttentionTrace::new(header, vec![0.5, 0.5]).unwrap();
        assert!(matches!(token_importance(&t, &[0]), Err(Error::ClsReducedStorage)));
    }

    #[test]
    fn similarity_identical_and_orthogonal() {
        let s = similarity_from_rows(array![[1.0, 2.0], [2.0, 4.0]].view()).unwrap();
        for v in s.matrix() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let s = similarity_from_rows(array![[3.0, 0.0], [0.0, -2.0]].view()).unwrap();
        assert_eq!(s.matrix(), &array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn similarity_zero_row() {
        let s = similarity_from_rows(array![[1.0, 1.0], [0.0, 0.0], [2.0, 0.0]].view()).unwrap();
        assert_eq!(s.zero_rows(), &[1]);
        assert_eq!(s.matrix()[[1, 1]], 1.0);
        assert_eq!(s.matrix()[[1, 0]], 0.0);
        assert_eq!(s.matrix()[[2, 1]], 0.0);
    }

    #[test]
    fn similarity_rejects_non_finite() {
        assert!(similarity_from_rows(array![[1.0, f64::NAN]].view()).is_err());
    }

    fn sim(m: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix { s: m, zero_rows: vec![] }
    }

    #[test]
    fn kernel_closed_forms() {
        let q = ImportanceVector::new(vec![1.0, 1.0]).unwrap();
        let k = build_kernel(&q, &sim(Array2::eye(2)), 0.0).unwrap();
        assert_eq!(k.matrix(), &Array2::<f64>::eye(2));

        let q = ImportanceVector::new(vec![2.0, 3.0]).unwrap();
        let k = build_kernel(&q, &sim(Array2::eye(2)), 0.0).unwrap();
        assert_eq!(k.matrix(), &array![[4.0, 0.0], [0.0, 9.0]]);

        let k = build_kernel(&q, &sim(Array2::eye(2)), 1e-6).unwrap();
        assert!((k.jitter() - 6.5e-6).abs() < 1e-18);
        assert_eq!(k.matrix()[[0, 0]], 4.0 + k.jitter());
    }

    #[test]
    fn kernel_errors() {
        let q = ImportanceVector::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            build_kernel(&q, &sim(Array2::eye(2)), 1e-6),
            Err(Error::DegenerateKernel(_))
        ));
        let q = ImportanceVector::new(vec![1.0]).unwrap();
        assert!(matches!(
            build_kernel(&q, &sim(Array2::eye(2)), 1e-6),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(ImportanceVector::new(vec![-1.0]).is_err());
    }

    #[test]
    fn greedy_diagonal_kernel() {
        let k = DppKernel::from_matrix(Array2::from_diag(&array![4.0, 1.0, 9.0])).unwrap();
        let r = greedy_map(&k, 2, DEFAULT_GAIN_TOL).unwrap();
        assert_eq!(r.selected, vec![2, 0]);
        assert!((r.marginal_log_gains[0] - 9f64.ln()).abs() < 1e-12);
        assert!((r.marginal_log_gains[1] - 4f64.ln()).abs() < 1e-12);
        assert!(!r.stopped_early);
    }

    #[test]
    fn greedy_identity_tie_break() {
        let q = ImportanceVector::new(vec![1.0; 5]).unwrap();
        let k = build_kernel(&q, &sim(Array2::eye(5)), DEFAULT_JITTER_REL).unwrap();
        let r = greedy_map(&k, 5, DEFAULT_GAIN_TOL).unwrap();
        assert_eq!(r.selected, vec![0, 1, 2, 3, 4]);
        for g in &r.marginal_log_gains {
            assert!((g - (1.0 + 1e-6f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_k_out_of_range() {
        let k = DppKernel::from_matrix(Array2::eye(3)).unwrap();
        assert!(matches!(greedy_map(&k, 0, 0.0), Err(Error::OutOfRange(_))));
        assert!(matches!(greedy_map(&k, 4, 0.0), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn greedy_rejects_indefinite() {
        let k = DppKernel::from_matrix(array![[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(greedy_map(&k, 2, 0.0), Err(Error::NotPsd(_))));
        let k = DppKernel::from_matrix(array![[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(greedy_map(&k, 1, 0.0), Err(Error::NotPsd(_))));
    }

    #[test]
    fn greedy_rank_deficient_stops_early() {
        // three tokens on two directions, no jitter
        let s = similarity_from_rows(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].view()).unwrap();
        let q = ImportanceVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let k = build_kernel(&q, &s, 0.0).unwrap();
        let r = greedy_map(&k, 3, DEFAULT_GAIN_TOL).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.k_selected, 2);
        assert_eq!(r.selected[0], 2);
    }

    #[test]
    fn topk_examples() {
        let q = ImportanceVector::new(vec![0.1, 0.9, 0.5]).unwrap();
        assert_eq!(topk_select(&q, 2).unwrap().selected, vec![1, 2]);
        let q = ImportanceVector::new(vec![0.3; 5]).unwrap();
        let r = topk_select(&q, 3).unwrap();
        assert_eq!(r.selected, vec![0, 1, 2]);
        assert!(r.marginal_log_gains.is_empty());
        assert!(topk_select(&q, 6).is_err());
    }

    #[test]
    fn selection_json_field_names() {
        let q = ImportanceVector::new(vec![0.1, 0.9]).unwrap();
        let v = serde_json::to_value(topk_select(&q, 1).unwrap()).unwrap();
        assert_eq!(v["K_requested"], 1);
        assert_eq!(v["K_selected"], 1);
        assert_eq!(v["selected"], serde_json::json!([1]));
    }
}
