//! Autoencoder parameterization, forward passes, losses, initialization, and
//! dead-latent tracking.
//!
//! The encoder computes `z = act(W_enc (x - b_pre) [+ b_enc])` and the decoder
//! `x_hat = W_dec z + b_pre`. The decoder weights are stored transposed
//! (n-by-d, one row per latent direction) so that sparse decode, decoder
//! gradients, and per-column renormalization all touch contiguous memory.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::random_unit_vector;
use crate::error::{Error, Result};
use crate::tensor::{dense_sparse_matmul_t, dot, DenseMatrix, SparseVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    TopK,
    MultiTopK,
}

impl Activation {
    pub fn is_sparse(&self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

/// Autoencoder architecture and loss configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub n: usize,
    pub activation: Activation,
    pub k: usize,
    /// Multi-TopK terms as (k_i, weight_i); defaults to [(k, 1), (4k, 1/8)].
    #[serde(default)]
    pub multi_topk_terms: Option<Vec<(usize, f32)>>,
    /// L1 penalty coefficient, ReLU variant only.
    #[serde(default)]
    pub l1_coeff: f32,
    /// AuxK loss coefficient.
    #[serde(default = "default_aux_coeff")]
    pub aux_coeff: f32,
    /// Dead latents used by the auxiliary loss; defaults to the power of two
    /// nearest d/2, resolved when the input dimension is known.
    #[serde(default)]
    pub k_aux: Option<usize>,
    /// A latent is dead when it has not fired for this many tokens.
    #[serde(default = "default_dead_threshold")]
    pub dead_threshold_tokens: u64,
    #[serde(default = "default_true")]
    pub relu_after_topk: bool,
    /// Encoder bias; defaults on for ReLU, off for TopK variants.
    #[serde(default)]
    pub use_b_enc: Option<bool>,
    /// Rescale encoder magnitudes at init so reconstruction norms match input
    /// norms. Off by default.
    #[serde(default)]
    pub encoder_magnitude_init: bool,
    /// Initialize encoder rows parallel to the decoder columns. Disabling
    /// this (independent random encoder directions) exists for the
    /// dead-latent ablation experiment.
    #[serde(default = "default_true")]
    pub tied_init: bool,
}

fn default_aux_coeff() -> f32 {
    1.0 / 32.0
}

fn default_dead_threshold() -> u64 {
    10_000_000
}

fn default_true() -> bool {
    true
}

impl AeConfig {
    pub fn topk(n: usize, k: usize) -> Self {
        AeConfig {
            n,
            activation: Activation::TopK,
            k,
            multi_topk_terms: None,
            l1_coeff: 0.0,
            aux_coeff: default_aux_coeff(),
            k_aux: None,
            dead_threshold_tokens: default_dead_threshold(),
            relu_after_topk: true,
            use_b_enc: None,
            encoder_magnitude_init: false,
            tied_init: true,
        }
    }

    pub fn relu(n: usize, l1_coeff: f32) -> Self {
        AeConfig {
            activation: Activation::Relu,
            l1_coeff,
            // k is unused by the ReLU forward pass but kept valid
            k: 1,
            ..AeConfig::topk(n, 1)
        }
    }

    pub fn multi_topk(n: usize, k: usize) -> Self {
        AeConfig {
            activation: Activation::MultiTopK,
            ..AeConfig::topk(n, k)
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::invalid("n and k must be positive"));
        }
        if self.activation.is_sparse() && self.k >= self.n {
            return Err(Error::invalid(format!(
                "k {} must be smaller than n {}",
                self.k, self.n
            )));
        }
        if let Some(k_aux) = self.k_aux {
            if k_aux > self.n {
                return Err(Error::invalid(format!(
                    "k_aux {} exceeds n {}",
                    k_aux, self.n
                )));
            }
        }
        if self.l1_coeff < 0.0 || self.aux_coeff < 0.0 {
            return Err(Error::invalid("loss coefficients must be nonnegative"));
        }
        for &(ki, _) in self.terms() {
            if ki > self.n {
                return Err(Error::invalid(format!(
                    "multi-topk term k {} exceeds n {}",
                    ki, self.n
                )));
            }
        }
        if d == 0 {
            return Err(Error::invalid("input dim must be positive"));
        }
        Ok(())
    }

    pub fn has_b_enc(&self) -> bool {
        self.use_b_enc
            .unwrap_or(matches!(self.activation, Activation::Relu))
    }

    /// Multi-TopK terms, defaulting to L(k) + L(4k)/8 (4k capped at n-1).
    pub fn terms(&self) -> &[(usize, f32)] {
        match &self.multi_topk_terms {
            Some(t) => t,
            None => &[],
        }
    }

    pub fn resolved_terms(&self) -> Vec<(usize, f32)> {
        if let Some(t) = &self.multi_topk_terms {
            t.clone()
        } else {
            vec![(self.k, 1.0), ((4 * self.k).min(self.n - 1), 0.125)]
        }
    }

    /// Power of two nearest to d/2.
    pub fn resolved_k_aux(&self, d: usize) -> usize {
        match self.k_aux {
            Some(k) => k,
            None => {
                let target = (d as f64 / 2.0).max(1.0);
                let exp = target.log2().round() as u32;
                (1usize << exp).min(self.n)
            }
        }
    }
}

/// The learned artifact. `w_enc` is n-by-d, `w_dec_t` is the decoder stored
/// transposed (n-by-d, row i = decoder column i), `b_pre` has length d.
#[derive(Debug, Clone)]
pub struct AutoencoderParams {
    pub n: usize,
    pub d: usize,
    pub w_enc: DenseMatrix,
    pub b_enc: Option<Vec<f32>>,
    pub w_dec_t: DenseMatrix,
    pub b_pre: Vec<f32>,
}

impl AutoencoderParams {
    /// Max deviation of any decoder column norm from 1.
    pub fn decoder_norm_error(&self) -> f32 {
        let mut worst = 0.0f32;
        for i in 0..self.n {
            let norm = (dot(self.w_dec_t.row(i), self.w_dec_t.row(i)) as f64).sqrt();
            worst = worst.max((norm - 1.0).abs() as f32);
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_enc.rows() != self.n || self.w_enc.cols() != self.d {
            return Err(Error::invalid("w_enc shape mismatch"));
        }
        if self.w_dec_t.rows() != self.n || self.w_dec_t.cols() != self.d {
            return Err(Error::invalid("w_dec shape mismatch"));
        }
        if self.b_pre.len() != self.d {
            return Err(Error::invalid("b_pre length mismatch"));
        }
        if let Some(b) = &self.b_enc {
            if b.len() != self.n {
                return Err(Error::invalid("b_enc length mismatch"));
            }
        }
        self.w_enc.validate_finite()?;
        self.w_dec_t.validate_finite()?;
        Ok(())
    }
}

/// Per-example normalization statistics: the scalar mean subtracted across
/// the input dimension and the L2 norm the centered vector was divided by.
/// Enough to undo the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f32,
    pub scale: f32,
}

/// Centers `x` across its coordinates and scales it to unit norm.
pub fn normalize_input(x: &[f32]) -> Result<(Vec<f32>, NormStats)> {
    if x.is_empty() {
        return Err(Error::invalid("cannot normalize an empty vector"));
    }
    let mean = (x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64) as f32;
    let mut centered: Vec<f32> = x.iter().map(|&v| v - mean).collect();
    let norm = (centered.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt();
    if norm < 1e-12 {
        return Err(Error::degenerate(
            "all coordinates equal: zero norm after centering",
        ));
    }
    let inv = (1.0 / norm) as f32;
    for v in centered.iter_mut() {
        *v *= inv;
    }
    Ok((
        centered,
        NormStats {
            mean,
            scale: norm as f32,
        },
    ))
}

/// Undoes [`normalize_input`].
pub fn denormalize(x: &[f32], stats: &NormStats) -> Vec<f32> {
    x.iter().map(|&v| v * stats.scale + stats.mean).collect()
}

/// Latent activations: sparse for TopK-style encoders, dense for ReLU.
#[derive(Debug, Clone)]
pub enum Latents {
    Sparse(SparseVec),
    Dense(Vec<f32>),
}

impl Latents {
    pub fn dim(&self) -> usize {
        match self {
            Latents::Sparse(z) => z.dim(),
            Latents::Dense(z) => z.len(),
        }
    }

    /// Number of strictly nonzero activations.
    pub fn l0(&self) -> usize {
        match self {
            Latents::Sparse(z) => z.nnz(),
            Latents::Dense(z) => z.iter().filter(|&&v| v != 0.0).count(),
        }
    }

    pub fn value(&self, i: usize) -> f32 {
        match self {
            Latents::Sparse(z) => z.get(i as u32),
            Latents::Dense(z) => z[i],
        }
    }

    /// Indices with nonzero values, ascending.
    pub fn active_indices(&self) -> Vec<u32> {
        match self {
            Latents::Sparse(z) => z
                .entries()
                .iter()
                .filter(|&&(_, v)| v != 0.0)
                .map(|&(i, _)| i)
                .collect(),
            Latents::Dense(z) => z
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v != 0.0)
                .map(|(i, _)| i as u32)
                .collect(),
        }
    }

    pub fn as_sparse(&self) -> Option<&SparseVec> {
        match self {
            Latents::Sparse(z) => Some(z),
            Latents::Dense(_) => None,
        }
    }
}

/// Encoder pre-activations `W_enc (x - b_pre) [+ b_enc]`.
pub fn preactivations(params: &AutoencoderParams, cfg: &AeConfig, x: &[f32]) -> Result<Vec<f32>> {
    let pre = preactivations_no_bias(params, x)?;
    if cfg.has_b_enc() {
        if let Some(b_enc) = &params.b_enc {
            return Ok(pre.iter().zip(b_enc).map(|(&p, &b)| p + b).collect());
        }
    }
    Ok(pre)
}

/// Pre-activations without the encoder bias, used by the auxiliary loss.
pub fn preactivations_no_bias(params: &AutoencoderParams, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != params.d {
        return Err(Error::invalid(format!(
            "input dim {} does not match d {}",
            x.len(),
            params.d
        )));
    }
    let centered: Vec<f32> = x.iter().zip(&params.b_pre).map(|(&v, &b)| v - b).collect();
    params.w_enc.matvec(&centered)
}

pub fn encode(params: &AutoencoderParams, cfg: &AeConfig, x: &[f32]) -> Result<Latents> {
    let pre = preactivations(params, cfg, x)?;
    encode_pre(cfg, &pre)
}

/// Applies the configured activation function to precomputed pre-activations.
pub fn encode_pre(cfg: &AeConfig, pre: &[f32]) -> Result<Latents> {
    match cfg.activation {
        Activation::Relu => Ok(Latents::Dense(pre.iter().map(|&v| v.max(0.0)).collect())),
        Activation::TopK | Activation::MultiTopK => Ok(Latents::Sparse(
            crate::tensor::topk_select(pre, cfg.k, cfg.relu_after_topk)?,
        )),
    }
}

pub fn decode(params: &AutoencoderParams, latents: &Latents) -> Result<Vec<f32>> {
    if latents.dim() != params.n {
        return Err(Error::invalid(format!(
            "latent dim {} does not match n {}",
            latents.dim(),
            params.n
        )));
    }
    let mut out = match latents {
        Latents::Sparse(z) => dense_sparse_matmul_t(&params.w_dec_t, z)?,
        Latents::Dense(z) => {
            let mut acc = vec![0.0f32; params.d];
            for (i, &v) in z.iter().enumerate() {
                if v != 0.0 {
                    crate::tensor::axpy(&mut acc, v, params.w_dec_t.row(i));
                }
            }
            acc
        }
    };
    for (o, &b) in out.iter_mut().zip(&params.b_pre) {
        *o += b;
    }
    Ok(out)
}

/// Sum of squared errors between a vector and its reconstruction.
pub fn sq_err(x: &[f32], x_hat: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), x_hat.len());
    let mut acc = 0.0f64;
    for (a, b) in x.iter().zip(x_hat) {
        acc += ((a - b) as f64).powi(2);
    }
    acc as f32
}

/// Mean-predictor baseline over rows: average of `||x - mean||^2`.
pub fn mean_predictor_baseline(rows: &[&[f32]]) -> Result<f32> {
    if rows.is_empty() {
        return Err(Error::invalid("baseline requires at least one row"));
    }
    let d = rows[0].len();
    let mut mean = vec![0.0f64; d];
    for row in rows {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows.len() as f64;
    }
    let mut acc = 0.0f64;
    for row in rows {
        for (m, &v) in mean.iter().zip(row.iter()) {
            acc += (v as f64 - m).powi(2);
        }
    }
    Ok((acc / rows.len() as f64) as f32)
}

pub fn normalized_mse(mse: f32, baseline: f32) -> Result<f32> {
    if !(baseline > 0.0) {
        return Err(Error::degenerate(format!(
            "mean-predictor baseline {} must be positive",
            baseline
        )));
    }
    Ok(mse / baseline)
}

/// Auxiliary reconstruction of the residual error `e` by the top-`k_aux`
/// dead latents. Returns the per-token normalized loss and the selected
/// auxiliary latents (None when no latent is dead). A NaN loss is replaced
/// by 0 so training can continue.
pub fn aux_forward(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    pre_no_bias: &[f32],
    dead: &[bool],
    e: &[f32],
) -> Result<Option<(f32, SparseVec)>> {
    if dead.len() != params.n || pre_no_bias.len() != params.n || e.len() != params.d {
        return Err(Error::invalid("aux_forward shape mismatch"));
    }
    let dead_idx: Vec<u32> = (0..params.n as u32)
        .filter(|&i| dead[i as usize])
        .collect();
    if dead_idx.is_empty() {
        return Ok(None);
    }
    let k_aux = cfg.resolved_k_aux(params.d).min(dead_idx.len());
    let dead_pre: Vec<f32> = dead_idx.iter().map(|&i| pre_no_bias[i as usize]).collect();
    let local = crate::tensor::topk_select(&dead_pre, k_aux, cfg.relu_after_topk)?;
    let mut entries: Vec<(u32, f32)> = local
        .entries()
        .iter()
        .map(|&(j, v)| (dead_idx[j as usize], v))
        .collect();
    entries.sort_unstable_by_key(|&(i, _)| i);
    let z_aux = SparseVec::new(params.n, entries)?;
    // decode without b_pre
    let e_hat = dense_sparse_matmul_t(&params.w_dec_t, &z_aux)?;
    let err = sq_err(e, &e_hat);
    let norm = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() as f32;
    let loss = err / norm;
    // zero the loss instead of poisoning the run when the per-token
    // normalization degenerates
    let loss = if loss.is_finite() { loss } else { 0.0 };
    Ok(Some((loss, z_aux)))
}

/// Spec-level wrapper: auxiliary loss value only, 0 when nothing is dead.
pub fn aux_loss(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    pre_no_bias: &[f32],
    dead: &[bool],
    e: &[f32],
) -> Result<f32> {
    Ok(aux_forward(params, cfg, pre_no_bias, dead, e)?
        .map(|(l, _)| l)
        .unwrap_or(0.0))
}

/// Multi-TopK loss: a weighted sum of TopK reconstruction losses sharing one
/// encoder pass. Returns (total, per-term MSE).
pub fn multi_topk_loss(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    x: &[f32],
) -> Result<(f32, Vec<f32>)> {
    let terms = cfg.resolved_terms();
    for &(ki, _) in &terms {
        if ki > params.n || ki == 0 {
            return Err(Error::invalid(format!(
                "multi-topk term k {} out of range for n {}",
                ki, params.n
            )));
        }
    }
    let pre = preactivations(params, cfg, x)?;
    let mut total = 0.0f32;
    let mut per_term = Vec::with_capacity(terms.len());
    for &(ki, wi) in &terms {
        let z = crate::tensor::topk_select(&pre, ki, cfg.relu_after_topk)?;
        let x_hat = decode(params, &Latents::Sparse(z))?;
        let mse = sq_err(x, &x_hat);
        per_term.push(mse);
        total += wi * mse;
    }
    Ok((total, per_term))
}

/// Test-time JumpReLU: keeps pre-activations strictly above `theta`.
pub fn jumprelu_encode(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    x: &[f32],
    theta: f32,
) -> Result<SparseVec> {
    if theta < 0.0 {
        return Err(Error::invalid("jumprelu threshold must be nonnegative"));
    }
    let pre = preactivations(params, cfg, x)?;
    let entries: Vec<(u32, f32)> = pre
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > theta)
        .map(|(i, &v)| (i as u32, v))
        .collect();
    SparseVec::new(params.n, entries)
}

/// Geometric median by Weiszfeld iteration. Restarts with jitter when an
/// iterate coincides with a sample point.
pub fn geometric_median(rows: &[&[f32]], tol: f64, max_iters: usize, seed: u64) -> Result<Vec<f32>> {
    if rows.is_empty() {
        return Err(Error::invalid("geometric median of an empty sample"));
    }
    let d = rows[0].len();
    if rows.len() == 1 {
        return Ok(rows[0].to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65646961);
    // start from the coordinate-wise mean
    let mut est = vec![0.0f64; d];
    for row in rows {
        for (e, &v) in est.iter_mut().zip(row.iter()) {
            *e += v as f64;
        }
    }
    for e in est.iter_mut() {
        *e /= rows.len() as f64;
    }

    for _ in 0..max_iters {
        let mut num = vec![0.0f64; d];
        let mut denom = 0.0f64;
        let mut coincident = false;
        for row in rows {
            let dist = row
                .iter()
                .zip(&est)
                .map(|(&v, &e)| (v as f64 - e).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist < 1e-12 {
                coincident = true;
                break;
            }
            let w = 1.0 / dist;
            for (nu, &v) in num.iter_mut().zip(row.iter()) {
                *nu += w * v as f64;
            }
            denom += w;
        }
        if coincident {
            for e in est.iter_mut() {
                *e += rng.gen_range(-1e-4..1e-4);
            }
            continue;
        }
        let next: Vec<f64> = num.iter().map(|&nu| nu / denom).collect();
        let delta = next
            .iter()
            .zip(&est)
            .map(|(&a, &b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        est = next;
        if delta < tol {
            break;
        }
    }
    Ok(est.into_iter().map(|v| v as f32).collect())
}

/// Initializes parameters: `b_pre` at the geometric median of the sample,
/// decoder columns uniform on the unit sphere, encoder rows copied from the
/// decoder (tied at init only).
pub fn init_params(sample: &DenseMatrix, cfg: &AeConfig, seed: u64) -> Result<AutoencoderParams> {
    if sample.rows() == 0 {
        return Err(Error::invalid("init sample must be non-empty"));
    }
    let d = sample.cols();
    cfg.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    const MEDIAN_SAMPLE: usize = 32_768;
    let take = sample.rows().min(MEDIAN_SAMPLE);
    let rows: Vec<&[f32]> = (0..take).map(|r| sample.row(r)).collect();
    let b_pre = geometric_median(&rows, 1e-6, 100, seed)?;

    let mut w_dec_t = DenseMatrix::zeros(cfg.n, d);
    for i in 0..cfg.n {
        let dir = random_unit_vector(&mut rng, d);
        w_dec_t.row_mut(i).copy_from_slice(&dir);
    }
    let w_enc = if cfg.tied_init {
        w_dec_t.clone()
    } else {
        let mut w = DenseMatrix::zeros(cfg.n, d);
        for i in 0..cfg.n {
            let dir = random_unit_vector(&mut rng, d);
            w.row_mut(i).copy_from_slice(&dir);
        }
        w
    };
    let b_enc = if cfg.has_b_enc() {
        Some(vec![0.0f32; cfg.n])
    } else {
        None
    };

    let mut params = AutoencoderParams {
        n: cfg.n,
        d,
        w_enc,
        b_enc,
        w_dec_t,
        b_pre,
    };

    if cfg.encoder_magnitude_init {
        // scale encoder rows so that reconstruction magnitude matches input
        // magnitude on the sample
        let probe = take.min(1024);
        let mut in_norm = 0.0f64;
        let mut out_norm = 0.0f64;
        for r in 0..probe {
            let x = sample.row(r);
            let centered: Vec<f32> = x.iter().zip(&params.b_pre).map(|(&v, &b)| v - b).collect();
            in_norm += dot(&centered, &centered) as f64;
            let z = encode(&params, cfg, x)?;
            let x_hat = decode(&params, &z)?;
            let resid: Vec<f32> = x_hat
                .iter()
                .zip(&params.b_pre)
                .map(|(&v, &b)| v - b)
                .collect();
            out_norm += dot(&resid, &resid) as f64;
        }
        if out_norm > 1e-12 {
            let factor = (in_norm / out_norm).sqrt() as f32;
            for v in params.w_enc.data_mut() {
                *v *= factor;
            }
        }
    }
    Ok(params)
}

/// Tracks how many tokens have elapsed since each latent last fired.
#[derive(Debug, Clone)]
pub struct DeadTracker {
    tokens_since_fire: Vec<u64>,
    threshold: u64,
}

impl DeadTracker {
    pub fn new(n: usize, threshold: u64) -> Self {
        DeadTracker {
            tokens_since_fire: vec![0; n],
            threshold,
        }
    }

    /// Advances all counters by `tokens_in_batch`, then resets the counters
    /// of latents that fired (appeared with a nonzero value).
    pub fn update(&mut self, fired: &[bool], tokens_in_batch: u64) {
        debug_assert_eq!(fired.len(), self.tokens_since_fire.len());
        for (c, &f) in self.tokens_since_fire.iter_mut().zip(fired) {
            if f {
                *c = 0;
            } else {
                *c += tokens_in_batch;
            }
        }
    }

    pub fn is_dead(&self, i: usize) -> bool {
        self.tokens_since_fire[i] > self.threshold
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        self.tokens_since_fire
            .iter()
            .map(|&c| c > self.threshold)
            .collect()
    }

    pub fn dead_count(&self) -> usize {
        self.tokens_since_fire
            .iter()
            .filter(|&&c| c > self.threshold)
            .count()
    }

    pub fn dead_fraction(&self) -> f32 {
        self.dead_count() as f32 / self.tokens_since_fire.len() as f32
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian;

    fn orthonormal_params(d: usize, seed: u64) -> AutoencoderParams {
        // Gram-Schmidt on random vectors: n = d orthonormal decoder columns,
        // encoder tied.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f32>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = random_unit_vector(&mut rng, d)
                .into_iter()
                .map(|x| x as f64)
                .collect();
            for b in &basis {
                let proj: f64 = v.iter().zip(b.iter()).map(|(&a, &c)| a * c as f64).sum();
                for (vi, &bi) in v.iter_mut().zip(b.iter()) {
                    *vi -= proj * bi as f64;
                }
            }
            let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| (x / norm) as f32).collect());
            }
        }
        let mut w = DenseMatrix::zeros(d, d);
        for (i, b) in basis.iter().enumerate() {
            w.row_mut(i).copy_from_slice(b);
        }
        AutoencoderParams {
            n: d,
            d,
            w_enc: w.clone(),
            b_enc: None,
            w_dec_t: w,
            b_pre: vec![0.0; d],
        }
    }

    #[test]
    fn normalize_rejects_constant_vector() {
        assert!(matches!(
            normalize_input(&[1.0, 1.0, 1.0, 1.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn normalize_already_centered() {
        let (out, stats) = normalize_input(&[1.0, -1.0, 0.0, 0.0]).unwrap();
        let s = 1.0 / 2.0f32.sqrt();
        assert!((out[0] - s).abs() < 1e-6);
        assert!((out[1] + s).abs() < 1e-6);
        assert_eq!(out[2], 0.0);
        assert_eq!(stats.mean, 0.0);
        assert!((stats.scale - 2.0f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_idempotent_and_invertible() {
        let store = gen_gaussian(24, 20, 77).unwrap();
        for r in 0..store.rows() {
            let (once, stats) = normalize_input(store.row(r)).unwrap();
            let (twice, stats2) = normalize_input(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!(stats2.mean.abs() < 1e-6);
            assert!((stats2.scale - 1.0).abs() < 1e-5);
            let back = denormalize(&once, &stats);
            for (a, b) in back.iter().zip(store.row(r)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn encode_picks_aligned_latent() {
        let params = orthonormal_params(8, 1);
        let cfg = AeConfig::topk(8, 2);
        // x aligned with decoder direction 3
        let x: Vec<f32> = params.w_dec_t.row(3).to_vec();
        let z = encode(&params, &cfg, &x).unwrap();
        let top = z
            .as_sparse()
            .unwrap()
            .entries()
            .iter()
            .cloned()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(top.0, 3);
    }

    #[test]
    fn topk_with_k_equals_relu_when_all_positive() {
        // with k = n and the clamp on, TopK equals ReLU encode with b_enc = 0
        let mut params = orthonormal_params(6, 2);
        params.n = 6;
        let mut topk_cfg = AeConfig::topk(6, 5);
        topk_cfg.k = 6;
        // bypass k < n validation: encode_pre applies activation directly
        let relu_cfg = AeConfig::relu(6, 0.0);
        let store = gen_gaussian(6, 10, 3).unwrap();
        for r in 0..store.rows() {
            let pre = preactivations(&params, &topk_cfg, store.row(r)).unwrap();
            let topk = encode_pre(&topk_cfg, &pre).unwrap();
            let relu = encode_pre(&relu_cfg, &pre).unwrap();
            for i in 0..6 {
                assert!((topk.value(i) - relu.value(i)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn encode_matches_sort_oracle() {
        let store = gen_gaussian(16, 30, 5).unwrap();
        let sample = DenseMatrix::from_vec(30, 16, store.data().to_vec()).unwrap();
        let cfg = AeConfig::topk(64, 4);
        let params = init_params(&sample, &cfg, 9).unwrap();
        for r in 0..store.rows() {
            let pre = preactivations(&params, &cfg, store.row(r)).unwrap();
            let z = encode(&params, &cfg, store.row(r)).unwrap();
            let mut order: Vec<usize> = (0..64).collect();
            order.sort_by(|&a, &b| pre[b].partial_cmp(&pre[a]).unwrap().then(a.cmp(&b)));
            let mut want: Vec<u32> = order[..4].iter().map(|&i| i as u32).collect();
            want.sort_unstable();
            let got: Vec<u32> = z
                .as_sparse()
                .unwrap()
                .entries()
                .iter()
                .map(|&(i, _)| i)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn decode_zero_gives_b_pre_and_onehot_gives_column() {
        let mut params = orthonormal_params(5, 11);
        params.b_pre = vec![0.5; 5];
        let zero = Latents::Sparse(SparseVec::empty(5));
        assert_eq!(decode(&params, &zero).unwrap(), vec![0.5; 5]);
        let onehot = Latents::Sparse(SparseVec::new(5, vec![(2, 3.0)]).unwrap());
        let got = decode(&params, &onehot).unwrap();
        for (ii, g) in got.iter().enumerate() {
            let want = 3.0 * params.w_dec_t.get(2, ii) + 0.5;
            assert!((g - want).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_reconstruction_in_orthonormal_span() {
        // W_enc = W_dec^T, orthonormal columns, x a k-sparse nonnegative
        // combination of columns: encode/decode recovers x exactly.
        let params = orthonormal_params(12, 21);
        let cfg = AeConfig::topk(12, 3);
        let mut x = vec![0.0f32; 12];
        for (i, c) in [(2usize, 1.5f32), (7, 0.9), (10, 0.4)] {
            for (xx, &w) in x.iter_mut().zip(params.w_dec_t.row(i)) {
                *xx += c * w;
            }
        }
        let z = encode(&params, &cfg, &x).unwrap();
        let x_hat = decode(&params, &z).unwrap();
        assert!(sq_err(&x, &x_hat) < 1e-10);
    }

    #[test]
    fn mse_nesting_under_orthonormal_decoder() {
        let params = orthonormal_params(16, 31);
        let store = gen_gaussian(16, 25, 13).unwrap();
        for r in 0..store.rows() {
            let (x, _) = normalize_input(store.row(r)).unwrap();
            let mut prev = f32::INFINITY;
            for k in [1usize, 2, 4, 8, 16] {
                let mut cfg = AeConfig::topk(16, k.min(15));
                cfg.k = k;
                let pre = preactivations(&params, &cfg, &x).unwrap();
                let z = encode_pre(&cfg, &pre).unwrap();
                let x_hat = decode(&params, &z).unwrap();
                let mse = sq_err(&x, &x_hat);
                assert!(
                    mse <= prev + 1e-6,
                    "k={} mse={} prev={}",
                    k,
                    mse,
                    prev
                );
                prev = mse;
            }
        }
    }

    #[test]
    fn multi_topk_terms_and_defaults() {
        let params = orthonormal_params(16, 41);
        let mut cfg = AeConfig::multi_topk(16, 2);
        let store = gen_gaussian(16, 10, 17).unwrap();
        // default terms are [(k, 1), (4k, 1/8)]
        assert_eq!(cfg.resolved_terms(), vec![(2, 1.0), (8, 0.125)]);
        for r in 0..store.rows() {
            let (x, _) = normalize_input(store.row(r)).unwrap();
            let (total, per_term) = multi_topk_loss(&params, &cfg, &x).unwrap();
            assert!(per_term[1] <= per_term[0] + 1e-6, "nesting violated");
            let want = per_term[0] + per_term[1] / 8.0;
            assert!((total - want).abs() < 1e-5);
        }
        // single term equals the plain TopK loss
        cfg.multi_topk_terms = Some(vec![(2, 1.0)]);
        let (x, _) = normalize_input(store.row(0)).unwrap();
        let (total, _) = multi_topk_loss(&params, &cfg, &x).unwrap();
        let plain_cfg = AeConfig::topk(16, 2);
        let z = encode(&params, &plain_cfg, &x).unwrap();
        let x_hat = decode(&params, &z).unwrap();
        assert!((total - sq_err(&x, &x_hat)).abs() < 1e-6);
        // out-of-range term errors
        cfg.multi_topk_terms = Some(vec![(2, 1.0), (40, 0.125)]);
        assert!(multi_topk_loss(&params, &cfg, &x).is_err());
    }

    #[test]
    fn jumprelu_edges_and_order_statistic() {
        let params = orthonormal_params(16, 51);
        let cfg = AeConfig::topk(16, 4);
        let store = gen_gaussian(16, 10, 19).unwrap();
        for r in 0..store.rows() {
            let (x, _) = normalize_input(store.row(r)).unwrap();
            let pre = preactivations(&params, &cfg, &x).unwrap();
            // theta = 0 keeps exactly the positive pre-activations
            let z0 = jumprelu_encode(&params, &cfg, &x, 0.0).unwrap();
            assert_eq!(z0.len(), pre.iter().filter(|&&v| v > 0.0).count());
            // theta = +inf keeps nothing
            let zinf = jumprelu_encode(&params, &cfg, &x, f32::INFINITY).unwrap();
            assert!(zinf.is_empty());
            // theta at the (k+1)-th largest pre-activation reproduces TopK(k)
            let mut sorted = pre.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let theta = sorted[4];
            if theta > 0.0 && sorted[3] > sorted[4] {
                let zj = jumprelu_encode(&params, &cfg, &x, theta).unwrap();
                let zt = encode(&params, &cfg, &x).unwrap();
                let tj: Vec<u32> = zj.entries().iter().map(|&(i, _)| i).collect();
                let tt: Vec<u32> = zt.as_sparse().unwrap().entries().iter().map(|&(i, _)| i).collect();
                assert_eq!(tj, tt);
            }
        }
    }

    #[test]
    fn geometric_median_of_singleton_and_triangle() {
        let p = [3.0f32, -1.0];
        let got = geometric_median(&[&p], 1e-6, 100, 0).unwrap();
        assert_eq!(got, p.to_vec());

        // 3 non-collinear points: compare against a brute-force grid search
        let pts: Vec<Vec<f32>> = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.3, 0.9]];
        let refs: Vec<&[f32]> = pts.iter().map(|p| p.as_slice()).collect();
        let got = geometric_median(&refs, 1e-9, 500, 0).unwrap();

        let objective = |x: f64, y: f64| -> f64 {
            pts.iter()
                .map(|p| ((p[0] as f64 - x).powi(2) + (p[1] as f64 - y).powi(2)).sqrt())
                .sum()
        };
        // coarse-to-fine grid refinement
        let (mut bx, mut by, mut best) = (0.0f64, 0.0f64, f64::INFINITY);
        let (mut cx, mut cy, mut half) = (0.5f64, 0.45f64, 0.6f64);
        for _ in 0..12 {
            for i in 0..41 {
                for j in 0..41 {
                    let x = cx - half + 2.0 * half * i as f64 / 40.0;
                    let y = cy - half + 2.0 * half * j as f64 / 40.0;
                    let o = objective(x, y);
                    if o < best {
                        best = o;
                        bx = x;
                        by = y;
                    }
                }
            }
            cx = bx;
            cy = by;
            half /= 8.0;
        }
        assert!((got[0] as f64 - bx).abs() < 1e-4, "{} vs {}", got[0], bx);
        assert!((got[1] as f64 - by).abs() < 1e-4, "{} vs {}", got[1], by);
    }

    #[test]
    fn init_produces_unit_decoder_and_tied_encoder() {
        let store = gen_gaussian(10, 100, 23).unwrap();
        let sample = DenseMatrix::from_vec(100, 10, store.data().to_vec()).unwrap();
        let cfg = AeConfig::topk(32, 4);
        let params = init_params(&sample, &cfg, 7).unwrap();
        assert!(params.decoder_norm_error() < 1e-5);
        assert_eq!(params.w_enc.data(), params.w_dec_t.data());
        assert!(params.b_enc.is_none());
        let relu_params = init_params(&sample, &AeConfig::relu(32, 1e-3), 7).unwrap();
        assert!(relu_params.b_enc.is_some());
    }

    #[test]
    fn init_b_pre_is_median_of_single_point() {
        let sample = DenseMatrix::from_vec(1, 3, vec![0.5, -0.25, 1.0]).unwrap();
        let cfg = AeConfig::topk(8, 2);
        let params = init_params(&sample, &cfg, 3).unwrap();
        assert_eq!(params.b_pre, vec![0.5, -0.25, 1.0]);
    }

    #[test]
    fn aux_loss_zero_when_nothing_dead() {
        let params = orthonormal_params(8, 61);
        let cfg = AeConfig::topk(8, 2);
        let pre = vec![0.1f32; 8];
        let e = vec![0.3f32; 8];
        let dead = vec![false; 8];
        assert_eq!(aux_loss(&params, &cfg, &pre, &dead, &e).unwrap(), 0.0);
    }

    #[test]
    fn aux_loss_matches_closed_form_least_squares() {
        // one dead latent with a tied encoder row: the pre-activation w.e is
        // exactly the optimal 1-column coefficient, so the aux loss equals
        // the residual of the best single-column fit of e.
        let params = orthonormal_params(4, 71);
        let mut cfg = AeConfig::topk(4, 2);
        cfg.k_aux = Some(1);
        let w2: Vec<f32> = params.w_dec_t.row(2).to_vec();
        // error vector with a positive component along the dead direction so
        // the nonnegativity clamp leaves the optimal coefficient alone
        let mut e = vec![0.5f32, -0.2, 0.8, 0.1];
        if dot(&w2, &e) < 0.0 {
            for v in e.iter_mut() {
                *v = -*v;
            }
        }
        let dead: Vec<bool> = vec![false, false, true, false];
        let coeff = dot(&w2, &e);
        let mut resid = e.clone();
        for (rr, &wv) in resid.iter_mut().zip(&w2) {
            *rr -= coeff * wv;
        }
        let want = dot(&resid, &resid) / dot(&e, &e);
        let pre: Vec<f32> = (0..4).map(|i| dot(params.w_enc.row(i), &e)).collect();
        let got = aux_loss(&params, &cfg, &pre, &dead, &e).unwrap();
        assert!((got - want).abs() < 1e-5, "{} vs {}", got, want);

        // all latents dead with k_aux = n, an orthonormal decoder, and a
        // target inside the nonnegative cone: the fit is exact
        let mut cfg_all = AeConfig::topk(4, 2);
        cfg_all.k_aux = Some(4);
        let all_dead = vec![true; 4];
        let mut e_pos = vec![0.0f32; 4];
        for (i, c) in [(0usize, 0.7f32), (1, 0.4), (2, 1.1), (3, 0.2)] {
            for (v, &w) in e_pos.iter_mut().zip(params.w_dec_t.row(i)) {
                *v += c * w;
            }
        }
        let pre_opt: Vec<f32> = (0..4).map(|i| dot(params.w_dec_t.row(i), &e_pos)).collect();
        let got = aux_loss(&params, &cfg_all, &pre_opt, &all_dead, &e_pos).unwrap();
        assert!(got < 1e-8, "orthonormal full fit should be exact, got {}", got);
    }

    #[test]
    fn aux_loss_nan_guard() {
        let params = orthonormal_params(4, 81);
        let cfg = AeConfig::topk(4, 2);
        let dead = vec![true; 4];
        // e = 0 degenerates the per-token normalization; the guard zeroes
        // the contribution instead of poisoning the run
        let e = vec![0.0f32; 4];
        let pre = vec![1.0f32, 0.5, 0.2, 0.1];
        let got = aux_loss(&params, &cfg, &pre, &dead, &e).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn dead_tracker_schedules() {
        let mut tracker = DeadTracker::new(3, 10);
        // latent 0 fires every batch, latent 1 never, latent 2 on a script
        let script = [true, false, false, true, false];
        for &fires2 in &script {
            tracker.update(&[true, false, fires2], 4);
        }
        assert!(!tracker.is_dead(0));
        assert!(tracker.is_dead(1)); // 20 tokens > 10
        assert!(!tracker.is_dead(2)); // fired 4 tokens ago
        assert_eq!(tracker.dead_count(), 1);

        // threshold semantics: dead strictly after threshold tokens
        let mut t2 = DeadTracker::new(1, 10_000_000);
        t2.update(&[false], 10_000_000);
        assert!(!t2.is_dead(0));
        t2.update(&[false], 1);
        assert!(t2.is_dead(0));
    }

    #[test]
    fn normalized_mse_definition() {
        let store = gen_gaussian(6, 40, 29).unwrap();
        let rows: Vec<&[f32]> = (0..store.rows()).map(|r| store.row(r)).collect();
        let baseline = mean_predictor_baseline(&rows).unwrap();
        // predicting the mean for every row gives normalized mse 1
        let mean = store.mean_vector(0, store.rows());
        let mut mse = 0.0f64;
        for r in &rows {
            mse += sq_err(r, &mean) as f64;
        }
        let mse = (mse / rows.len() as f64) as f32;
        let nmse = normalized_mse(mse, baseline).unwrap();
        assert!((nmse - 1.0).abs() < 1e-5);
        // perfect reconstruction gives 0
        assert_eq!(normalized_mse(0.0, baseline).unwrap(), 0.0);
        assert!(normalized_mse(1.0, 0.0).is_err());
    }
}
