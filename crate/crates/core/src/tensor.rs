//! Dense and sparsity-exploiting linear algebra kernels.
//!
//! The two workhorse kernels are [`dense_sparse_matmul`] (dense matrix times a
//! sparse vector) and [`matmul_at_sparse_indices`] (a dense-dense product
//! evaluated only at a set of requested indices). Together with the pre-bias
//! gradient trick in [`pre_bias_gradient`] they cover every training-path
//! operation except the encoder forward pass, which stays dense.
//!
//! All kernels accumulate in a fixed ascending-index order so results are
//! bitwise reproducible for identical inputs.

use crate::error::{Error, Result};

/// Row-major 32-bit float matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Transposed copy.
    pub fn transposed(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Errors if any entry is non-finite.
    pub fn validate_finite(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / self.cols,
                pos % self.cols
            )));
        }
        Ok(())
    }

    /// Dense matrix-vector product `self * x` (`x` has length `cols`).
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "matvec dim mismatch: matrix cols {} vs vector {}",
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0f32; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
        Ok(out)
    }
}

/// Dot product with a 4-way unrolled accumulator; LLVM vectorizes this well.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

/// `out += c * v`
#[inline]
pub fn axpy(out: &mut [f32], c: f32, v: &[f32]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, x) in out.iter_mut().zip(v.iter()) {
        *o += c * x;
    }
}

/// Sparse vector over a fixed dimension: (index, value) pairs with strictly
/// increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    dim: usize,
    entries: Vec<(u32, f32)>,
}

impl SparseVec {
    pub fn empty(dim: usize) -> Self {
        SparseVec {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn new(dim: usize, entries: Vec<(u32, f32)>) -> Result<Self> {
        let mut prev: Option<u32> = None;
        for &(i, v) in &entries {
            if (i as usize) >= dim {
                return Err(Error::invalid(format!(
                    "sparse index {} out of range for dim {}",
                    i, dim
                )));
            }
            if let Some(p) = prev {
                if i <= p {
                    return Err(Error::invalid(format!(
                        "sparse indices not strictly increasing: {} after {}",
                        i, p
                    )));
                }
            }
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite value at index {}", i)));
            }
            prev = Some(i);
        }
        Ok(SparseVec { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries with a nonzero value (relevant after a ReLU clamp:
    /// the selected set can contain zero-valued entries).
    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|&&(_, v)| v != 0.0).count()
    }

    /// Value at `index`, zero if absent.
    pub fn get(&self, index: u32) -> f32 {
        match self.entries.binary_search_by_key(&index, |&(i, _)| i) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0f32; self.dim];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }
}

/// Selects the `k` largest values; ties broken toward the lower index.
/// Entries come back in ascending index order. With `relu_after`, selected
/// values are clamped to be nonnegative (the selected set keeps size `k`;
/// clamped entries are zero-valued).
pub fn topk_select(values: &[f32], k: usize, relu_after: bool) -> Result<SparseVec> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "topk k={} out of range for n={}",
            k, n
        )));
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite value at index {} in topk input",
            pos
        )));
    }

    // Bounded min-heap over (value, index): the root is the currently worst
    // kept entry. An incoming candidate wins over the root if its value is
    // larger, or equal with a lower index.
    #[inline]
    fn worse(a: (f32, u32), b: (f32, u32)) -> bool {
        // true if a is worse (should be evicted before) b
        a.0 < b.0 || (a.0 == b.0 && a.1 > b.1)
    }
    let mut heap: Vec<(f32, u32)> = Vec::with_capacity(k);
    for (i, &v) in values.iter().enumerate() {
        let cand = (v, i as u32);
        if heap.len() < k {
            heap.push(cand);
            // sift up
            let mut c = heap.len() - 1;
            while c > 0 {
                let p = (c - 1) / 2;
                if worse(heap[c], heap[p]) {
                    heap.swap(c, p);
                    c = p;
                } else {
                    break;
                }
            }
        } else if worse(heap[0], cand) {
            heap[0] = cand;
            // sift down
            let mut p = 0;
            loop {
                let (l, r) = (2 * p + 1, 2 * p + 2);
                let mut worst = p;
                if l < k && worse(heap[l], heap[worst]) {
                    worst = l;
                }
                if r < k && worse(heap[r], heap[worst]) {
                    worst = r;
                }
                if worst == p {
                    break;
                }
                heap.swap(p, worst);
                p = worst;
            }
        }
    }

    let mut entries: Vec<(u32, f32)> = heap
        .into_iter()
        .map(|(v, i)| (i, if relu_after { v.max(0.0) } else { v }))
        .collect();
    entries.sort_unstable_by_key(|&(i, _)| i);
    SparseVec::new(n, entries)
}

/// `W * z` where `W` is a logically d-by-n matrix stored row-major and `z` is
/// sparse over n. Sums columns in ascending index order.
pub fn dense_sparse_matmul(w: &DenseMatrix, z: &SparseVec) -> Result<Vec<f32>> {
    if z.dim() != w.cols() {
        return Err(Error::invalid(format!(
            "dense_sparse_matmul dim mismatch: matrix cols {} vs sparse dim {}",
            w.cols(),
            z.dim()
        )));
    }
    let d = w.rows();
    let mut out = vec![0.0f32; d];
    for &(i, v) in z.entries() {
        let i = i as usize;
        for r in 0..d {
            out[r] += v * w.data()[r * w.cols() + i];
        }
    }
    Ok(out)
}

/// Same product against the transposed storage layout: `wt` is n-by-d
/// row-major where row `i` is column `i` of the logical d-by-n matrix.
/// This is the cache-friendly path used by the decoder.
pub fn dense_sparse_matmul_t(wt: &DenseMatrix, z: &SparseVec) -> Result<Vec<f32>> {
    if z.dim() != wt.rows() {
        return Err(Error::invalid(format!(
            "dense_sparse_matmul_t dim mismatch: matrix rows {} vs sparse dim {}",
            wt.rows(),
            z.dim()
        )));
    }
    let mut out = vec![0.0f32; wt.cols()];
    for &(i, v) in z.entries() {
        axpy(&mut out, v, wt.row(i as usize));
    }
    Ok(out)
}

/// Evaluates `X * W^T` only at the requested per-row indices: for batch row
/// `b` and listed index `i`, returns `dot(X_b, W_i)`. `x` is B-by-d, `w` is
/// n-by-d, indices address rows of `w`.
pub fn matmul_at_sparse_indices(
    x: &DenseMatrix,
    w: &DenseMatrix,
    index_sets: &[Vec<u32>],
) -> Result<Vec<Vec<f32>>> {
    if x.cols() != w.cols() {
        return Err(Error::invalid(format!(
            "matmul_at_sparse_indices dim mismatch: x cols {} vs w cols {}",
            x.cols(),
            w.cols()
        )));
    }
    if index_sets.len() != x.rows() {
        return Err(Error::invalid(format!(
            "index set count {} does not match batch rows {}",
            index_sets.len(),
            x.rows()
        )));
    }
    let n = w.rows();
    let mut out = Vec::with_capacity(index_sets.len());
    for (b, set) in index_sets.iter().enumerate() {
        let xb = x.row(b);
        let mut vals = Vec::with_capacity(set.len());
        for &i in set {
            if (i as usize) >= n {
                return Err(Error::invalid(format!(
                    "index {} out of range for {} rows",
                    i, n
                )));
            }
            vals.push(dot(xb, w.row(i as usize)));
        }
        out.push(vals);
    }
    Ok(out)
}

/// Pre-bias gradient trick: sums the sparse pre-activation gradients across
/// the batch first, then multiplies once with the encoder weights. Returns
/// `W_enc^T * (sum of rows)`. `w_enc` is n-by-d row-major.
pub fn pre_bias_gradient(grad_pre: &[SparseVec], w_enc: &DenseMatrix) -> Result<Vec<f32>> {
    let n = w_enc.rows();
    let mut summed = vec![0.0f32; n];
    for g in grad_pre {
        if g.dim() != n {
            return Err(Error::invalid(format!(
                "pre_bias_gradient dim mismatch: sparse dim {} vs {} latents",
                g.dim(),
                n
            )));
        }
        for &(i, v) in g.entries() {
            summed[i as usize] += v;
        }
    }
    let mut out = vec![0.0f32; w_enc.cols()];
    for (i, &s) in summed.iter().enumerate() {
        if s != 0.0 {
            axpy(&mut out, s, w_enc.row(i));
        }
    }
    Ok(out)
}

/// Logically sharded top-k: each shard contributes its local top
/// `ceil(capacity_factor * k / S)` candidates (capped at `k` and at the shard
/// size), then a global selection runs over the union. With
/// `capacity_factor >= S` the result equals exact global top-k.
pub fn sharded_topk(
    shards: &[&[f32]],
    k: usize,
    capacity_factor: f32,
    relu_after: bool,
) -> Result<SparseVec> {
    if shards.is_empty() {
        return Err(Error::invalid("sharded_topk: empty shard list"));
    }
    if capacity_factor < 1.0 {
        return Err(Error::invalid(format!(
            "capacity_factor {} must be >= 1",
            capacity_factor
        )));
    }
    let total: usize = shards.iter().map(|s| s.len()).sum();
    if k == 0 || k > total {
        return Err(Error::invalid(format!(
            "sharded_topk k={} out of range for total dim {}",
            k, total
        )));
    }
    let s_count = shards.len();
    let per_shard = ((capacity_factor as f64 * k as f64) / s_count as f64).ceil() as usize;
    let per_shard = per_shard.max(1).min(k);

    let mut candidates: Vec<(u32, f32)> = Vec::with_capacity(s_count * per_shard);
    let mut offset = 0u32;
    for shard in shards {
        if !shard.is_empty() {
            let m = per_shard.min(shard.len());
            let local = topk_select(shard, m, false)?;
            for &(i, v) in local.entries() {
                candidates.push((offset + i, v));
            }
        }
        offset += shard.len() as u32;
    }

    // Global selection over candidates, same ordering rule as topk_select:
    // larger value first, lower index on ties.
    candidates.sort_unstable_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite values")
            .then(a.0.cmp(&b.0))
    });
    candidates.truncate(k);
    let mut entries: Vec<(u32, f32)> = candidates
        .into_iter()
        .map(|(i, v)| (i, if relu_after { v.max(0.0) } else { v }))
        .collect();
    entries.sort_unstable_by_key(|&(i, _)| i);
    SparseVec::new(total, entries)
}

/// Analytic dense vs sparse flop counts for the training-path kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopReport {
    pub dense_flops: u64,
    pub sparse_flops: u64,
    pub ratio: f64,
}

impl FlopReport {
    fn new(dense_flops: u64, sparse_flops: u64) -> Self {
        FlopReport {
            dense_flops,
            sparse_flops,
            ratio: dense_flops as f64 / sparse_flops as f64,
        }
    }
}

/// The five sparsity-exploiting optimizations, plus the whole training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOp {
    DecoderForward,
    DecoderGradient,
    LatentGradient,
    EncoderGradient,
    PreBiasGradient,
    /// Full forward + backward step; the encoder forward pass is the only
    /// operation that stays dense, so the ratio approaches 6 as k/n -> 0.
    TrainStep,
}

impl KernelOp {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "decoder-forward" => Ok(KernelOp::DecoderForward),
            "decoder-gradient" => Ok(KernelOp::DecoderGradient),
            "latent-gradient" => Ok(KernelOp::LatentGradient),
            "encoder-gradient" => Ok(KernelOp::EncoderGradient),
            "pre-bias-gradient" => Ok(KernelOp::PreBiasGradient),
            "train-step" => Ok(KernelOp::TrainStep),
            other => Err(Error::invalid(format!(
                "unknown kernel descriptor '{}' (expected decoder-forward, decoder-gradient, \
                 latent-gradient, encoder-gradient, pre-bias-gradient, or train-step)",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelOp::DecoderForward => "decoder-forward",
            KernelOp::DecoderGradient => "decoder-gradient",
            KernelOp::LatentGradient => "latent-gradient",
            KernelOp::EncoderGradient => "encoder-gradient",
            KernelOp::PreBiasGradient => "pre-bias-gradient",
            KernelOp::TrainStep => "train-step",
        }
    }
}

/// Counts multiply-add flops (2 per scalar product term) for a batch of `b`
/// tokens with input dim `d`, `n` latents, `k` active.
pub fn count_flops(op: KernelOp, b: u64, d: u64, n: u64, k: u64) -> Result<FlopReport> {
    if k == 0 || k > n || d == 0 || b == 0 {
        return Err(Error::invalid(format!(
            "count_flops: invalid dims b={} d={} n={} k={}",
            b, d, n, k
        )));
    }
    let dense_pass = 2 * b * d * n;
    let sparse_pass = 2 * b * d * k;
    let report = match op {
        KernelOp::DecoderForward
        | KernelOp::DecoderGradient
        | KernelOp::LatentGradient
        | KernelOp::EncoderGradient => FlopReport::new(dense_pass, sparse_pass),
        KernelOp::PreBiasGradient => {
            // naive: a dense matvec per batch row; trick: sum the k-sparse
            // gradient rows (b*k adds), then one dense n-by-d multiply.
            FlopReport::new(dense_pass, b * k + 2 * d * n.min(b * k))
        }
        KernelOp::TrainStep => {
            // six dense passes total; sparse path keeps the encoder forward
            // dense, makes four passes k-sparse and the pre-bias pass
            // batch-independent.
            let dense = 6 * dense_pass;
            let sparse = dense_pass + 4 * sparse_pass + (b * k + 2 * d * n.min(b * k));
            FlopReport::new(dense, sparse)
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, random_vec(rng, rows * cols)).unwrap()
    }

    /// Sort-based oracle for top-k selection.
    fn topk_oracle(values: &[f32], k: usize) -> Vec<(u32, f32)> {
        let mut idx: Vec<u32> = (0..values.len() as u32).collect();
        idx.sort_by(|&a, &b| {
            values[b as usize]
                .partial_cmp(&values[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut top: Vec<(u32, f32)> = idx[..k].iter().map(|&i| (i, values[i as usize])).collect();
        top.sort_by_key(|&(i, _)| i);
        top
    }

    #[test]
    fn topk_obvious_ordering() {
        let got = topk_select(&[3.0, 1.0, 2.0], 2, false).unwrap();
        assert_eq!(got.entries(), &[(0, 3.0), (2, 2.0)]);
    }

    #[test]
    fn topk_k_equals_n_is_identity() {
        let vals = [0.5f32, -1.0, 2.0, 0.0];
        let got = topk_select(&vals, 4, false).unwrap();
        assert_eq!(got.to_dense(), vals.to_vec());
        // with the clamp, negatives zero out but the selected set stays size n
        let clamped = topk_select(&vals, 4, true).unwrap();
        assert_eq!(clamped.len(), 4);
        assert_eq!(clamped.get(1), 0.0);
        assert_eq!(clamped.nnz(), 2);
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut r = rng(7);
        for trial in 0..50 {
            let vals = random_vec(&mut r, 256);
            let got = topk_select(&vals, 16, false).unwrap();
            let want = topk_oracle(&vals, 16);
            assert_eq!(got.entries(), want.as_slice(), "trial {}", trial);
        }
    }

    #[test]
    fn topk_tie_break_prefers_lower_index() {
        let vals = [1.0f32, 2.0, 2.0, 2.0, 0.0];
        let got = topk_select(&vals, 2, false).unwrap();
        assert_eq!(got.entries(), &[(1, 2.0), (2, 2.0)]);
    }

    #[test]
    fn topk_rejects_bad_k() {
        assert!(topk_select(&[1.0, 2.0], 0, false).is_err());
        assert!(topk_select(&[1.0, 2.0], 3, false).is_err());
        assert!(topk_select(&[1.0, f32::NAN], 1, false).is_err());
    }

    #[test]
    fn topk_excluded_never_beats_included() {
        let mut r = rng(11);
        for _ in 0..20 {
            let vals = random_vec(&mut r, 64);
            let got = topk_select(&vals, 8, false).unwrap();
            let min_kept = got
                .entries()
                .iter()
                .map(|&(_, v)| v)
                .fold(f32::INFINITY, f32::min);
            let kept: std::collections::HashSet<u32> =
                got.entries().iter().map(|&(i, _)| i).collect();
            for (i, &v) in vals.iter().enumerate() {
                if !kept.contains(&(i as u32)) {
                    assert!(v <= min_kept);
                }
            }
        }
    }

    #[test]
    fn dense_sparse_empty_and_onehot() {
        let mut r = rng(3);
        let w = random_matrix(&mut r, 8, 12);
        let empty = SparseVec::empty(12);
        assert_eq!(dense_sparse_matmul(&w, &empty).unwrap(), vec![0.0; 8]);
        let onehot = SparseVec::new(12, vec![(5, 1.0)]).unwrap();
        let got = dense_sparse_matmul(&w, &onehot).unwrap();
        for rrow in 0..8 {
            assert_eq!(got[rrow], w.get(rrow, 5));
        }
    }

    #[test]
    fn dense_sparse_matches_dense_reference() {
        let mut r = rng(17);
        for _ in 0..100 {
            let (d, n) = (64, 512);
            let w = random_matrix(&mut r, d, n);
            let wt = w.transposed();
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.shuffle(&mut r);
            let mut pairs: Vec<(u32, f32)> = idx[..32]
                .iter()
                .map(|&i| (i, r.gen_range(-1.0f32..1.0)))
                .collect();
            pairs.sort_by_key(|&(i, _)| i);
            let z = SparseVec::new(n, pairs).unwrap();
            let want = w.matvec(&z.to_dense()).unwrap();
            let got = dense_sparse_matmul(&w, &z).unwrap();
            let got_t = dense_sparse_matmul_t(&wt, &z).unwrap();
            for i in 0..d {
                let scale = want[i].abs().max(1.0);
                assert!((got[i] - want[i]).abs() / scale < 1e-6);
                assert!((got_t[i] - want[i]).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_at_indices_matches_dense() {
        let mut r = rng(23);
        for _ in 0..100 {
            let (bsz, d, n) = (8, 32, 128);
            let x = random_matrix(&mut r, bsz, d);
            let w = random_matrix(&mut r, n, d);
            let sets: Vec<Vec<u32>> = (0..bsz)
                .map(|_| (0..4).map(|_| r.gen_range(0..n as u32)).collect())
                .collect();
            let got = matmul_at_sparse_indices(&x, &w, &sets).unwrap();
            for b in 0..bsz {
                for (j, &i) in sets[b].iter().enumerate() {
                    let want: f32 = (0..d).map(|c| x.get(b, c) * w.get(i as usize, c)).sum();
                    let scale = want.abs().max(1.0);
                    assert!((got[b][j] - want).abs() / scale < 1e-6);
                }
            }
        }
    }

    #[test]
    fn matmul_at_indices_is_full_product_when_all_listed() {
        let mut r = rng(29);
        let x = random_matrix(&mut r, 4, 16);
        let w = random_matrix(&mut r, 10, 16);
        let all: Vec<Vec<u32>> = (0..4).map(|_| (0..10u32).collect()).collect();
        let got = matmul_at_sparse_indices(&x, &w, &all).unwrap();
        for b in 0..4 {
            for i in 0..10 {
                let want = dot(x.row(b), w.row(i));
                assert!((got[b][i] - want).abs() < 1e-6);
            }
        }
        let bad: Vec<Vec<u32>> = vec![vec![10u32]; 4];
        assert!(matmul_at_sparse_indices(&x, &w, &bad).is_err());
    }

    #[test]
    fn pre_bias_gradient_matches_naive() {
        let mut r = rng(31);
        let (bsz, d, n) = (16, 24, 96);
        let w_enc = random_matrix(&mut r, n, d);
        let rows: Vec<SparseVec> = (0..bsz)
            .map(|_| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.shuffle(&mut r);
                let mut pairs: Vec<(u32, f32)> = idx[..6]
                    .iter()
                    .map(|&i| (i, r.gen_range(-1.0f32..1.0)))
                    .collect();
                pairs.sort_by_key(|&(i, _)| i);
                SparseVec::new(n, pairs).unwrap()
            })
            .collect();
        let got = pre_bias_gradient(&rows, &w_enc).unwrap();
        // naive: per-row W_enc^T * g, then sum
        let mut want = vec![0.0f64; d];
        for g in &rows {
            for &(i, v) in g.entries() {
                for c in 0..d {
                    want[c] += v as f64 * w_enc.get(i as usize, c) as f64;
                }
            }
        }
        for c in 0..d {
            let scale = want[c].abs().max(1.0);
            assert!(((got[c] as f64 - want[c]).abs() / scale) < 1e-5);
        }
        // single row equals the per-row product
        let single = pre_bias_gradient(&rows[..1], &w_enc).unwrap();
        let mut want1 = vec![0.0f32; d];
        for &(i, v) in rows[0].entries() {
            axpy(&mut want1, v, w_enc.row(i as usize));
        }
        assert_eq!(single, want1);
        // all-zero gradients
        let zeros = vec![SparseVec::empty(n); 4];
        assert_eq!(pre_bias_gradient(&zeros, &w_enc).unwrap(), vec![0.0; d]);
    }

    #[test]
    fn sharded_topk_single_shard_equals_topk() {
        let mut r = rng(37);
        let vals = random_vec(&mut r, 100);
        let got = sharded_topk(&[&vals], 10, 2.0, false).unwrap();
        let want = topk_select(&vals, 10, false).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn sharded_topk_exact_when_capacity_covers_shards() {
        let mut r = rng(41);
        for _ in 0..200 {
            let shards: Vec<Vec<f32>> = (0..4).map(|_| random_vec(&mut r, 64)).collect();
            let refs: Vec<&[f32]> = shards.iter().map(|s| s.as_slice()).collect();
            let concat: Vec<f32> = shards.concat();
            let got = sharded_topk(&refs, 32, 4.0, false).unwrap();
            let want = topk_select(&concat, 32, false).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn sharded_topk_capacity_two_recall() {
        // eight shards, capacity factor 2: measured index recall against the
        // exact oracle over 1000 trials must stay high.
        let mut r = rng(43);
        let (s, k) = (8usize, 32usize);
        let mut hits = 0usize;
        let mut total = 0usize;
        for _ in 0..1000 {
            let shards: Vec<Vec<f32>> = (0..s).map(|_| random_vec(&mut r, 128)).collect();
            let refs: Vec<&[f32]> = shards.iter().map(|v| v.as_slice()).collect();
            let concat: Vec<f32> = shards.concat();
            let approx = sharded_topk(&refs, k, 2.0, false).unwrap();
            let exact = topk_select(&concat, k, false).unwrap();
            let approx_idx: std::collections::HashSet<u32> =
                approx.entries().iter().map(|&(i, _)| i).collect();
            for &(i, _) in exact.entries() {
                total += 1;
                if approx_idx.contains(&i) {
                    hits += 1;
                }
            }
        }
        let recall = hits as f64 / total as f64;
        assert!(recall >= 0.95, "recall {}", recall);
    }

    #[test]
    fn sharded_topk_rejects_empty() {
        assert!(sharded_topk(&[], 1, 2.0, false).is_err());
    }

    #[test]
    fn flop_ratio_is_one_at_k_equals_n() {
        let rep = count_flops(KernelOp::DecoderForward, 128, 64, 512, 512).unwrap();
        assert_eq!(rep.ratio, 1.0);
    }

    #[test]
    fn flop_ratio_approaches_six_in_sparse_limit() {
        let rep = count_flops(KernelOp::TrainStep, 1 << 16, 64, 1 << 20, 1).unwrap();
        assert!(rep.ratio > 5.9 && rep.ratio < 6.0, "ratio {}", rep.ratio);
    }

    #[test]
    fn flop_ratio_at_reference_point() {
        let rep = count_flops(KernelOp::TrainStep, 4096, 64, 4096, 32).unwrap();
        assert!(rep.ratio >= 4.0, "ratio {}", rep.ratio);
        assert!(count_flops(KernelOp::DecoderForward, 4096, 64, 4096, 32)
            .unwrap()
            .ratio >= 4.0);
        assert!(KernelOp::parse("no-such-kernel").is_err());
    }
}
