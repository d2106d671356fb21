//! Adam with a tiny epsilon, decoder-gradient projection, decoder
//! renormalization, global gradient clipping, and EMA weight averaging.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, DenseMatrix};

pub const DEFAULT_ADAM_EPS: f32 = 6.25e-10;
pub const DEFAULT_EMA_COEFF: f32 = 0.999;

/// Adam state for one named tensor.
#[derive(Debug, Clone)]
pub struct AdamTensor {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamTensor {
    fn new(len: usize) -> Self {
        AdamTensor {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Bias-corrected Adam over a fixed list of tensors. Steps with any
/// non-finite gradient are rejected and counted instead of applied.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub lr: f32,
    pub step: u64,
    pub skipped_steps: u64,
    tensors: Vec<AdamTensor>,
}

impl AdamState {
    pub fn new(lr: f32, tensor_lens: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: DEFAULT_ADAM_EPS,
            lr,
            step: 0,
            skipped_steps: 0,
            tensors: tensor_lens.iter().map(|&l| AdamTensor::new(l)).collect(),
        }
    }

    pub fn tensors(&self) -> &[AdamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [AdamTensor] {
        &mut self.tensors
    }

    /// Zeroes the moment slices for a latent's encoder row / decoder row,
    /// used when a latent is resampled. `tensor` selects the Adam tensor,
    /// `range` the affected span.
    pub fn reset_slice(&mut self, tensor: usize, range: std::ops::Range<usize>) {
        for v in &mut self.tensors[tensor].m[range.clone()] {
            *v = 0.0;
        }
        for v in &mut self.tensors[tensor].v[range] {
            *v = 0.0;
        }
    }

    /// One update over all tensors. Parameter and gradient slices must line
    /// up with the lengths the state was created with. Returns false when the
    /// step was rejected because a gradient was non-finite.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<bool> {
        if params.len() != self.tensors.len() || grads.len() != self.tensors.len() {
            return Err(Error::invalid("adam step tensor count mismatch"));
        }
        for (t, g) in self.tensors.iter().zip(grads.iter()) {
            if t.m.len() != g.len() {
                return Err(Error::invalid("adam step tensor length mismatch"));
            }
        }
        if grads
            .iter()
            .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            self.skipped_steps += 1;
            return Ok(false);
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for ((tensor, param), grad) in self.tensors.iter_mut().zip(params).zip(grads) {
            for i in 0..grad.len() {
                let g = grad[i];
                tensor.m[i] = b1 * tensor.m[i] + (1.0 - b1) * g;
                tensor.v[i] = b2 * tensor.v[i] + (1.0 - b2) * g * g;
                let m_hat = tensor.m[i] / bias1;
                let v_hat = tensor.v[i] / bias2;
                param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// Removes the component of each decoder-column gradient parallel to its
/// column, so Adam's moments never see directions the renormalization would
/// undo. Both matrices are in the transposed n-by-d layout.
pub fn project_decoder_grad(grad_dec_t: &mut DenseMatrix, w_dec_t: &DenseMatrix) {
    debug_assert_eq!(grad_dec_t.rows(), w_dec_t.rows());
    for i in 0..w_dec_t.rows() {
        let w = w_dec_t.row(i);
        let g = grad_dec_t.row_mut(i);
        let parallel = dot(g, w);
        for (gv, &wv) in g.iter_mut().zip(w) {
            *gv -= parallel * wv;
        }
    }
}

/// Scales all gradients uniformly so the global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grads(grads: &mut [&mut [f32]], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.iter() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Renormalizes every decoder column (row of the transposed layout) to unit
/// norm. A column that collapsed to zero is redrawn from the unit sphere.
/// Returns how many columns were redrawn.
pub fn renorm_decoder(w_dec_t: &mut DenseMatrix, rng: &mut ChaCha8Rng) -> usize {
    let d = w_dec_t.cols();
    let mut redrawn = 0;
    for i in 0..w_dec_t.rows() {
        let row = w_dec_t.row_mut(i);
        let norm = (dot(row, row) as f64).sqrt();
        if norm < 1e-12 {
            let dir = crate::data::random_unit_vector(rng, d);
            row.copy_from_slice(&dir);
            redrawn += 1;
        } else {
            let inv = (1.0 / norm) as f32;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
    redrawn
}

/// Debiased exponential moving average of a list of tensors.
///
/// Internally keeps the plain geometric accumulator `S_t = c*S_{t-1} + p_t`;
/// the debiased average is `S_t * (1-c) / (1-c^t)`, which at `t = 1` is the
/// raw parameters bit for bit.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub coeff: f32,
    pub step: u64,
    acc: Vec<Vec<f32>>,
}

impl EmaState {
    pub fn new(coeff: f32, tensor_lens: &[usize]) -> Self {
        EmaState {
            coeff,
            step: 0,
            acc: tensor_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    /// Restores a saved accumulator.
    pub fn from_accumulators(coeff: f32, step: u64, acc: Vec<Vec<f32>>) -> Self {
        EmaState { coeff, step, acc }
    }

    pub fn accumulators(&self) -> &[Vec<f32>] {
        &self.acc
    }

    pub fn update(&mut self, params: &[&[f32]]) {
        debug_assert_eq!(params.len(), self.acc.len());
        self.step += 1;
        let c = self.coeff;
        for (acc, p) in self.acc.iter_mut().zip(params) {
            for (a, &v) in acc.iter_mut().zip(p.iter()) {
                *a = c * *a + v;
            }
        }
    }

    /// Bias-corrected shadow tensors.
    pub fn read(&self) -> Vec<Vec<f32>> {
        assert!(self.step > 0, "ema read before any update");
        let c = self.coeff as f64;
        let factor = ((1.0 - c) / (1.0 - c.powi(self.step as i32))) as f32;
        self.acc
            .iter()
            .map(|acc| acc.iter().map(|&a| a * factor).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_kills_parallel_keeps_orthogonal() {
        let w = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // column 0 gradient parallel to w0, column 1 gradient orthogonal
        let mut g = DenseMatrix::from_vec(2, 2, vec![3.0, 0.0, 2.0, 0.0]).unwrap();
        project_decoder_grad(&mut g, &w);
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert_eq!(g.row(1), &[2.0, 0.0]);
    }

    #[test]
    fn projection_makes_rows_orthogonal_to_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 24;
        let d = 16;
        let mut w = DenseMatrix::zeros(n, d);
        for i in 0..n {
            let dir = crate::data::random_unit_vector(&mut rng, d);
            w.row_mut(i).copy_from_slice(&dir);
        }
        let mut g = DenseMatrix::from_vec(
            n,
            d,
            (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        project_decoder_grad(&mut g, &w);
        for i in 0..n {
            assert!(dot(g.row(i), w.row(i)).abs() < 1e-6);
        }
    }

    #[test]
    fn clip_is_identity_below_threshold_and_scales_above() {
        let mut a = vec![0.3f32, -0.4];
        let mut slices: Vec<&mut [f32]> = vec![&mut a];
        let norm = clip_grads(&mut slices, 1.0);
        assert!((norm - 0.5).abs() < 1e-6);
        assert_eq!(a, vec![0.3, -0.4]);

        let mut b = vec![3.0f32, 4.0]; // norm 5
        let mut slices: Vec<&mut [f32]> = vec![&mut b];
        clip_grads(&mut slices, 2.5);
        assert!((b[0] - 1.5).abs() < 1e-6);
        assert!((b[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn clip_random_grads_post_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let mut a: Vec<f32> = (0..37).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let mut b: Vec<f32> = (0..11).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let max_norm = rng.gen_range(0.5f32..4.0);
            let pre = {
                let mut slices: Vec<&mut [f32]> = vec![&mut a, &mut b];
                clip_grads(&mut slices, max_norm)
            };
            let post = (a.iter().chain(b.iter()).map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt() as f32;
            let want = pre.min(max_norm);
            assert!((post - want).abs() / want.max(1e-6) < 1e-5);
        }
    }

    #[test]
    fn adam_zero_grads_do_nothing_and_first_step_magnitude() {
        let mut p = vec![1.0f32];
        let mut adam = AdamState::new(0.1, &[1]);
        {
            let mut ps: Vec<&mut [f32]> = vec![&mut p];
            adam.step(&mut ps, &[&[0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0]);

        // constant gradient 1: the first bias-corrected update is about -lr
        let mut p = vec![0.0f32];
        let mut adam = AdamState::new(0.1, &[1]);
        {
            let mut ps: Vec<&mut [f32]> = vec![&mut p];
            adam.step(&mut ps, &[&[1.0]]).unwrap();
        }
        assert!((p[0] + 0.1).abs() < 1e-4, "update {}", p[0]);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // f(x) = sum x_i^2, gradient 2x
        let mut x = vec![1.0f32, -2.0, 0.5];
        let mut adam = AdamState::new(0.05, &[3]);
        let mut prev = f32::INFINITY;
        for _ in 0..10 {
            let loss: f32 = x.iter().map(|v| v * v).sum();
            assert!(loss < prev, "loss must strictly decrease");
            prev = loss;
            let grad: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
            let mut ps: Vec<&mut [f32]> = vec![&mut x];
            adam.step(&mut ps, &[&grad]).unwrap();
        }
    }

    #[test]
    fn adam_rejects_nan_grads() {
        let mut p = vec![1.0f32];
        let mut adam = AdamState::new(0.1, &[1]);
        let applied = {
            let mut ps: Vec<&mut [f32]> = vec![&mut p];
            adam.step(&mut ps, &[&[f32::NAN]]).unwrap()
        };
        assert!(!applied);
        assert_eq!(p, vec![1.0]);
        assert_eq!(adam.skipped_steps, 1);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn adam_loss_scale_invariance_with_tiny_eps() {
        // identical trajectories up to 1e-3 relative when grads are scaled
        // by 1e6, which is the point of the 6.25e-10 epsilon
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grads: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let mut p1 = vec![0.0f32; 8];
        let mut p2 = vec![0.0f32; 8];
        let mut a1 = AdamState::new(0.01, &[8]);
        let mut a2 = AdamState::new(0.01, &[8]);
        for g in &grads {
            let scaled: Vec<f32> = g.iter().map(|&v| v * 1e6).collect();
            let mut ps1: Vec<&mut [f32]> = vec![&mut p1];
            a1.step(&mut ps1, &[g]).unwrap();
            let mut ps2: Vec<&mut [f32]> = vec![&mut p2];
            a2.step(&mut ps2, &[&scaled]).unwrap();
        }
        for (x, y) in p1.iter().zip(&p2) {
            let rel = (x - y).abs() / x.abs().max(1e-6);
            assert!(rel < 1e-3, "{} vs {}", x, y);
        }
    }

    #[test]
    fn renorm_unit_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut w = DenseMatrix::from_vec(
            6,
            4,
            (0..24).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        )
        .unwrap();
        // scale one row by 7, zero another
        for v in w.row_mut(1) {
            *v *= 7.0;
        }
        let dir1_before: Vec<f32> = w.row(1).to_vec();
        for v in w.row_mut(3) {
            *v = 0.0;
        }
        let redrawn = renorm_decoder(&mut w, &mut rng);
        assert_eq!(redrawn, 1);
        for i in 0..6 {
            let norm = (dot(w.row(i), w.row(i)) as f64).sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "row {} norm {}", i, norm);
        }
        // same direction for the scaled row
        let cos = dot(w.row(1), &dir1_before)
            / (dot(&dir1_before, &dir1_before) as f64).sqrt() as f32;
        assert!((cos - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ema_step_one_is_bitwise_raw() {
        let p = vec![0.12345f32, -9.5, 1e-7];
        let mut ema = EmaState::new(0.999, &[3]);
        ema.update(&[&p]);
        assert_eq!(ema.read()[0], p);
    }

    #[test]
    fn ema_matches_closed_form_geometric_sum() {
        let seq: Vec<Vec<f32>> = (1..=20).map(|t| vec![t as f32, (t * t) as f32]).collect();
        let c = 0.9f64;
        let mut ema = EmaState::new(c as f32, &[2]);
        for p in &seq {
            ema.update(&[p]);
        }
        let got = ema.read();
        for j in 0..2 {
            let mut num = 0.0f64;
            for (i, p) in seq.iter().enumerate() {
                num += c.powi((seq.len() - 1 - i) as i32) * p[j] as f64;
            }
            let want = num * (1.0 - c) / (1.0 - c.powi(seq.len() as i32));
            let rel = (got[0][j] as f64 - want).abs() / want.abs();
            assert!(rel < 1e-5, "{} vs {}", got[0][j], want);
        }
    }

    #[test]
    fn ema_constant_params_reads_back_exactly() {
        let p = vec![2.5f32, -0.75];
        let mut ema = EmaState::new(0.999, &[2]);
        for _ in 0..50 {
            ema.update(&[&p]);
        }
        let got = ema.read();
        for (a, b) in got[0].iter().zip(&p) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
