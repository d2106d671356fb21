//! Training loop: batching, loss assembly (MSE + AuxK for TopK variants,
//! MSE + L1 for the ReLU baseline), hand-derived gradients through the
//! sparse kernels, gradient clipping, decoder-gradient projection, Adam,
//! decoder renormalization, EMA, dead-latent tracking, and the ReLU
//! baseline's dead-latent resampling.
//!
//! Gradients are computed per shard of the batch and reduced in a fixed
//! shard order, so results are bitwise reproducible regardless of how many
//! worker threads run.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    aux_forward, decode, mean_predictor_baseline, normalize_input, sq_err, AeConfig, Activation,
    AutoencoderParams, DeadTracker,
};
use crate::checkpoint::{AdamSnapshot, Checkpoint};
use crate::data::{split_point, ActivationStore, BatchIter, Split};
use crate::error::{Error, Result};
use crate::optimizer::{clip_grads, project_decoder_grad, renorm_decoder, AdamState, EmaState};
use crate::tensor::{axpy, dot, DenseMatrix};

const SHARD_ROWS: usize = 256;
/// Rows used for the fixed train-loss probe and for resampling statistics.
const PROBE_ROWS: usize = 2048;
/// Validation rows evaluated per checkpoint.
const VAL_EVAL_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    Budget,
    Converged,
}

/// Learning-rate rule `lr(n) = lr_ref * sqrt(n_ref / n)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrRule {
    pub n_ref: usize,
    pub lr_ref: f32,
}

impl LrRule {
    pub fn lr(&self, n: usize) -> f32 {
        self.lr_ref * (self.n_ref as f32 / n as f32).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub token_budget: u64,
    #[serde(default = "default_lr")]
    pub lr: f32,
    /// When present, overrides `lr` with the 1/sqrt(n) heuristic.
    #[serde(default)]
    pub lr_rule: Option<LrRule>,
    #[serde(default = "default_stop_mode")]
    pub stop_mode: StopMode,
    #[serde(default = "default_convergence_rel_tol")]
    pub convergence_rel_tol: f32,
    #[serde(default = "default_convergence_window")]
    pub convergence_window: usize,
    #[serde(default)]
    pub clip_max_norm: Option<f32>,
    /// Tokens between evaluation records; 0 picks token_budget / 20.
    #[serde(default)]
    pub eval_every_tokens: u64,
    #[serde(default)]
    pub seed: u64,
    /// Number of evenly spaced dead-latent resampling events (ReLU baseline).
    #[serde(default)]
    pub resample_events: Option<usize>,
    #[serde(default = "default_ema_coeff")]
    pub ema_coeff: f32,
    /// Decoder-column renormalization after every step; disabling it exists
    /// for the ablation experiment only.
    #[serde(default = "default_true")]
    pub renorm_decoder: bool,
    /// Linear learning-rate decay to zero over the token budget. Off by
    /// default; constant rates are the baseline recipe.
    #[serde(default)]
    pub lr_decay: bool,
}

fn default_batch_size() -> usize {
    4096
}

fn default_lr() -> f32 {
    1e-3
}

fn default_stop_mode() -> StopMode {
    StopMode::Budget
}

fn default_convergence_rel_tol() -> f32 {
    0.002
}

fn default_convergence_window() -> usize {
    5
}

fn default_ema_coeff() -> f32 {
    crate::optimizer::DEFAULT_EMA_COEFF
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(token_budget: u64, lr: f32, seed: u64) -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            token_budget,
            lr,
            lr_rule: None,
            stop_mode: StopMode::Budget,
            convergence_rel_tol: default_convergence_rel_tol(),
            convergence_window: default_convergence_window(),
            clip_max_norm: None,
            eval_every_tokens: 0,
            seed,
            resample_events: None,
            ema_coeff: default_ema_coeff(),
            renorm_decoder: true,
            lr_decay: false,
        }
    }

    pub fn effective_lr(&self, n: usize) -> f32 {
        match &self.lr_rule {
            Some(rule) => rule.lr(n),
            None => self.lr,
        }
    }

    fn resolved_eval_every(&self) -> u64 {
        if self.eval_every_tokens > 0 {
            self.eval_every_tokens
        } else {
            (self.token_budget / 20).max(self.batch_size as u64)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.token_budget < self.batch_size as u64 {
            return Err(Error::invalid("token_budget smaller than one batch"));
        }
        if self.convergence_window < 2 {
            return Err(Error::invalid("convergence window must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub tokens_seen: u64,
    pub train_mse: f32,
    pub val_nmse: f32,
    pub dead_fraction: f32,
    pub l0: f32,
    pub aux_loss: f32,
    pub lr: f32,
    pub val_nmse_ema: f32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainLogRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "tokens_seen,train_mse,val_nmse,dead_fraction,l0,aux_loss,lr,val_nmse_ema";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.tokens_seen,
                r.train_mse,
                r.val_nmse,
                r.dead_fraction,
                r.l0,
                r.aux_loss,
                r.lr,
                r.val_nmse_ema
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Best (lowest) validation loss seen, taking the min of raw and EMA.
    pub fn best_val_nmse(&self) -> Option<f32> {
        self.records
            .iter()
            .map(|r| r.val_nmse.min(r.val_nmse_ema))
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f32| a.min(v))))
    }
}

/// True when the best validation loss improved by less than `eps_rel`
/// (relative) over the trailing `window` evaluation points.
pub fn detect_convergence(val_losses: &[f32], eps_rel: f32, window: usize) -> bool {
    if window < 2 || val_losses.len() < window + 1 {
        return false;
    }
    let split = val_losses.len() - window;
    let best_prior = val_losses[..split]
        .iter()
        .cloned()
        .fold(f32::INFINITY, f32::min);
    let best_recent = val_losses[split..]
        .iter()
        .cloned()
        .fold(f32::INFINITY, f32::min);
    if !best_prior.is_finite() {
        return false;
    }
    let improvement = (best_prior - best_recent) / best_prior.abs().max(1e-12);
    improvement < eps_rel
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    /// Best validation nmse over the run, min of raw and EMA.
    pub best_val_nmse: f32,
    pub final_val_nmse: f32,
    pub converged: bool,
}

/// Per-shard gradient accumulator.
struct ShardGrads {
    w_enc: DenseMatrix,
    b_enc: Option<Vec<f32>>,
    w_dec_t: DenseMatrix,
    b_pre_dec: Vec<f32>,
    /// Summed pre-activation gradients over the shard (for the pre-bias trick).
    dpre_sum: Vec<f32>,
    fired: Vec<bool>,
    mse_sum: f64,
    aux_sum: f64,
    aux_count: u64,
    l0_sum: u64,
    rows: u64,
}

impl ShardGrads {
    fn new(n: usize, d: usize, has_b_enc: bool) -> Self {
        ShardGrads {
            w_enc: DenseMatrix::zeros(n, d),
            b_enc: if has_b_enc { Some(vec![0.0; n]) } else { None },
            w_dec_t: DenseMatrix::zeros(n, d),
            b_pre_dec: vec![0.0; d],
            dpre_sum: vec![0.0; n],
            fired: vec![false; n],
            mse_sum: 0.0,
            aux_sum: 0.0,
            aux_count: 0,
            l0_sum: 0,
            rows: 0,
        }
    }

    fn merge(&mut self, other: &ShardGrads) {
        for (a, b) in self.w_enc.data_mut().iter_mut().zip(other.w_enc.data()) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.b_enc, &other.b_enc) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self
            .w_dec_t
            .data_mut()
            .iter_mut()
            .zip(other.w_dec_t.data())
        {
            *a += b;
        }
        for (a, b) in self.b_pre_dec.iter_mut().zip(&other.b_pre_dec) {
            *a += b;
        }
        for (a, b) in self.dpre_sum.iter_mut().zip(&other.dpre_sum) {
            *a += b;
        }
        for (a, &b) in self.fired.iter_mut().zip(&other.fired) {
            *a |= b;
        }
        self.mse_sum += other.mse_sum;
        self.aux_sum += other.aux_sum;
        self.aux_count += other.aux_count;
        self.l0_sum += other.l0_sum;
        self.rows += other.rows;
    }
}

struct LossTerm {
    k: usize,
    weight: f32,
}

/// Forward + backward over one shard of normalized rows.
#[allow(clippy::too_many_arguments)]
fn shard_pass(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    terms: &[LossTerm],
    dead: &[bool],
    any_dead: bool,
    rows: &[Vec<f32>],
    inv_norm: f32,
    batch_rows: f32,
    aux_coeff: f32,
) -> Result<ShardGrads> {
    let n = params.n;
    let d = params.d;
    let mut g = ShardGrads::new(n, d, params.b_enc.is_some());
    let relu_variant = matches!(cfg.activation, Activation::Relu);
    let l1 = cfg.l1_coeff;
    let scale = 2.0 * inv_norm / batch_rows;

    let mut x_c = vec![0.0f32; d];
    for x in rows {
        // encoder forward
        for ((c, &xv), &bv) in x_c.iter_mut().zip(x.iter()).zip(&params.b_pre) {
            *c = xv - bv;
        }
        let mut pre = params.w_enc.matvec(&x_c)?;
        let pre_no_bias = if params.b_enc.is_some() && cfg.has_b_enc() {
            let no_bias = pre.clone();
            for (p, &b) in pre.iter_mut().zip(params.b_enc.as_ref().unwrap()) {
                *p += b;
            }
            no_bias
        } else {
            Vec::new()
        };

        let mut dpre_row = vec![0.0f32; n];
        let mut first_recon: Option<Vec<f32>> = None;

        if relu_variant {
            let z: Vec<f32> = pre.iter().map(|&v| v.max(0.0)).collect();
            let mut x_hat = vec![0.0f32; d];
            for (i, &v) in z.iter().enumerate() {
                if v != 0.0 {
                    axpy(&mut x_hat, v, params.w_dec_t.row(i));
                }
            }
            for (h, &b) in x_hat.iter_mut().zip(&params.b_pre) {
                *h += b;
            }
            let mse = sq_err(x, &x_hat);
            g.mse_sum += mse as f64;
            g.l0_sum += z.iter().filter(|&&v| v != 0.0).count() as u64;
            // g_rec = dL/dx_hat
            let g_rec: Vec<f32> = x_hat
                .iter()
                .zip(x.iter())
                .map(|(&h, &xv)| scale * (h - xv))
                .collect();
            for (o, &v) in g.b_pre_dec.iter_mut().zip(&g_rec) {
                *o += v;
            }
            for (i, &v) in z.iter().enumerate() {
                if pre[i] > 0.0 {
                    if v != 0.0 {
                        axpy(g.w_dec_t.row_mut(i), v, &g_rec);
                        g.fired[i] = true;
                    }
                    let dz = dot(params.w_dec_t.row(i), &g_rec) + l1 / batch_rows;
                    dpre_row[i] = dz;
                }
            }
            first_recon = Some(x_hat);
        } else {
            // one shared pre-activation pass, one TopK per loss term
            for term in terms {
                let z = crate::tensor::topk_select(&pre, term.k, cfg.relu_after_topk)?;
                let mut x_hat = vec![0.0f32; d];
                for &(i, v) in z.entries() {
                    if v != 0.0 {
                        axpy(&mut x_hat, v, params.w_dec_t.row(i as usize));
                    }
                }
                for (h, &b) in x_hat.iter_mut().zip(&params.b_pre) {
                    *h += b;
                }
                let mse = sq_err(x, &x_hat);
                let g_rec: Vec<f32> = x_hat
                    .iter()
                    .zip(x.iter())
                    .map(|(&h, &xv)| term.weight * scale * (h - xv))
                    .collect();
                for (o, &v) in g.b_pre_dec.iter_mut().zip(&g_rec) {
                    *o += v;
                }
                for &(iu, v) in z.entries() {
                    let i = iu as usize;
                    // activation gate: with the post-TopK ReLU, clamped
                    // entries pass no gradient
                    let open = if cfg.relu_after_topk { pre[i] > 0.0 } else { true };
                    if open {
                        if v != 0.0 {
                            axpy(g.w_dec_t.row_mut(i), v, &g_rec);
                        }
                        dpre_row[i] += dot(params.w_dec_t.row(i), &g_rec);
                    }
                }
                if first_recon.is_none() {
                    g.mse_sum += mse as f64;
                    g.l0_sum += z.nnz() as u64;
                    for &(i, v) in z.entries() {
                        if v != 0.0 {
                            g.fired[i as usize] = true;
                        }
                    }
                    first_recon = Some(x_hat);
                }
            }
        }

        // AuxK: model the residual error with the top-k_aux dead latents
        if any_dead && aux_coeff > 0.0 && !relu_variant {
            let x_hat = first_recon.as_ref().expect("main term ran");
            let e: Vec<f32> = x.iter().zip(x_hat.iter()).map(|(&a, &b)| a - b).collect();
            let aux_pre = if pre_no_bias.is_empty() { &pre } else { &pre_no_bias };
            if let Some((aux_loss, z_aux)) = aux_forward(params, cfg, aux_pre, dead, &e)? {
                g.aux_sum += aux_loss as f64;
                g.aux_count += 1;
                let e_norm = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() as f32;
                if aux_loss > 0.0 && e_norm > 1e-12 {
                    let mut e_hat = vec![0.0f32; d];
                    for &(i, v) in z_aux.entries() {
                        if v != 0.0 {
                            axpy(&mut e_hat, v, params.w_dec_t.row(i as usize));
                        }
                    }
                    let g_aux: Vec<f32> = e_hat
                        .iter()
                        .zip(e.iter())
                        .map(|(&h, &ev)| aux_coeff * 2.0 / (e_norm * batch_rows) * (h - ev))
                        .collect();
                    if g_aux.iter().all(|v| v.is_finite()) {
                        for &(iu, v) in z_aux.entries() {
                            let i = iu as usize;
                            let open = if cfg.relu_after_topk {
                                aux_pre[i] > 0.0
                            } else {
                                true
                            };
                            if open {
                                if v != 0.0 {
                                    axpy(g.w_dec_t.row_mut(i), v, &g_aux);
                                }
                                dpre_row[i] += dot(params.w_dec_t.row(i), &g_aux);
                            }
                        }
                    }
                }
            }
        }

        // encoder-side gradients from the accumulated dpre
        for (i, &dp) in dpre_row.iter().enumerate() {
            if dp != 0.0 {
                axpy(g.w_enc.row_mut(i), dp, &x_c);
                if let Some(b_enc_g) = &mut g.b_enc {
                    // b_enc enters only the biased pre-activation path
                    if cfg.has_b_enc() {
                        b_enc_g[i] += dp;
                    }
                }
                g.dpre_sum[i] += dp;
            }
        }
        g.rows += 1;
    }
    Ok(g)
}

pub struct Trainer<'a> {
    ae_cfg: AeConfig,
    cfg: TrainConfig,
    store: &'a ActivationStore,
    pub params: AutoencoderParams,
    adam: AdamState,
    ema: EmaState,
    tracker: DeadTracker,
    rng: ChaCha8Rng,
    norm_constant: f32,
    val_rows: Vec<Vec<f32>>,
    val_baseline: f32,
    probe_rows: Vec<Vec<f32>>,
    lr: f32,
}

impl<'a> Trainer<'a> {
    pub fn new(ae_cfg: AeConfig, cfg: TrainConfig, store: &'a ActivationStore) -> Result<Self> {
        cfg.validate()?;
        ae_cfg.validate(store.d())?;
        let sp = split_point(store.rows());
        if sp < cfg.batch_size {
            return Err(Error::invalid(format!(
                "training split {} smaller than batch size {}",
                sp, cfg.batch_size
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        // normalized init sample doubles as the probe set
        let probe_count = sp.min(PROBE_ROWS);
        let mut probe_rows = Vec::with_capacity(probe_count);
        for r in 0..probe_count {
            probe_rows.push(normalize_input(store.row(r))?.0);
        }
        let mut sample = DenseMatrix::zeros(probe_count, store.d());
        for (r, row) in probe_rows.iter().enumerate() {
            sample.row_mut(r).copy_from_slice(row);
        }
        let params = crate::autoencoder::init_params(&sample, &ae_cfg, cfg.seed)?;

        // loss normalization constant, computed once at the start of training
        let refs: Vec<&[f32]> = probe_rows.iter().map(|r| r.as_slice()).collect();
        let norm_constant = mean_predictor_baseline(&refs)?;

        let val_count = (store.rows() - sp).min(VAL_EVAL_ROWS);
        let mut val_rows = Vec::with_capacity(val_count);
        for r in sp..sp + val_count {
            val_rows.push(normalize_input(store.row(r))?.0);
        }
        let val_refs: Vec<&[f32]> = val_rows.iter().map(|r| r.as_slice()).collect();
        let val_baseline = mean_predictor_baseline(&val_refs)?;

        let lr = cfg.effective_lr(ae_cfg.n);
        let tensor_lens = Self::tensor_lens(&params);
        let adam = AdamState::new(lr, &tensor_lens);
        let ema = EmaState::new(cfg.ema_coeff, &tensor_lens);
        let tracker = DeadTracker::new(ae_cfg.n, ae_cfg.dead_threshold_tokens);

        // reserve a dedicated stream for the training loop's own draws
        rng.set_stream(1);

        Ok(Trainer {
            ae_cfg,
            cfg,
            store,
            params,
            adam,
            ema,
            tracker,
            rng,
            norm_constant,
            val_rows,
            val_baseline,
            probe_rows,
            lr,
        })
    }

    fn tensor_lens(params: &AutoencoderParams) -> Vec<usize> {
        let mut lens = vec![params.n * params.d];
        if params.b_enc.is_some() {
            lens.push(params.n);
        }
        lens.push(params.n * params.d);
        lens.push(params.d);
        lens
    }

    fn ema_update(&mut self) {
        let mut tensors: Vec<&[f32]> = vec![self.params.w_enc.data()];
        if let Some(b) = &self.params.b_enc {
            tensors.push(b);
        }
        tensors.push(self.params.w_dec_t.data());
        tensors.push(&self.params.b_pre);
        self.ema.update(&tensors);
    }

    fn ema_params(&self) -> Option<AutoencoderParams> {
        if self.ema.step == 0 {
            return None;
        }
        let tensors = self.ema.read();
        let mut it = tensors.into_iter();
        let w_enc = DenseMatrix::from_vec(self.params.n, self.params.d, it.next()?).ok()?;
        let b_enc = if self.params.b_enc.is_some() {
            Some(it.next()?)
        } else {
            None
        };
        let w_dec_t = DenseMatrix::from_vec(self.params.n, self.params.d, it.next()?).ok()?;
        let b_pre = it.next()?;
        Some(AutoencoderParams {
            n: self.params.n,
            d: self.params.d,
            w_enc,
            b_enc,
            w_dec_t,
            b_pre,
        })
    }

    /// Mean squared error of `params` over pre-normalized rows.
    fn eval_mse(params: &AutoencoderParams, cfg: &AeConfig, rows: &[Vec<f32>]) -> Result<(f32, f32)> {
        let chunk = rows.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
        let partials: Vec<Result<(f64, u64)>> = rows
            .par_chunks(chunk)
            .map(|chunk_rows| {
                let mut acc = 0.0f64;
                let mut l0 = 0u64;
                for x in chunk_rows {
                    let z = crate::autoencoder::encode(params, cfg, x)?;
                    let x_hat = decode(params, &z)?;
                    acc += sq_err(x, &x_hat) as f64;
                    l0 += z.l0() as u64;
                }
                Ok((acc, l0))
            })
            .collect();
        let mut total = 0.0f64;
        let mut l0 = 0u64;
        for p in partials {
            let (a, b) = p?;
            total += a;
            l0 += b;
        }
        Ok((
            (total / rows.len() as f64) as f32,
            l0 as f32 / rows.len() as f32,
        ))
    }

    fn loss_terms(&self) -> Vec<LossTerm> {
        match self.ae_cfg.activation {
            Activation::MultiTopK => self
                .ae_cfg
                .resolved_terms()
                .into_iter()
                .map(|(k, weight)| LossTerm { k, weight })
                .collect(),
            _ => vec![LossTerm {
                k: self.ae_cfg.k,
                weight: 1.0,
            }],
        }
    }

    /// Resets each dead latent's decoder column to the normalized residual
    /// direction of a high-error probe row, ties the encoder row to 0.2 of
    /// it, and zeroes the affected Adam moments.
    fn resample_dead_latents(&mut self) -> Result<usize> {
        let dead = self.tracker.dead_mask();
        let dead_count = dead.iter().filter(|&&d| d).count();
        if dead_count == 0 {
            return Ok(0);
        }
        // squared reconstruction error over the probe rows
        let mut weights = Vec::with_capacity(self.probe_rows.len());
        let mut residuals = Vec::with_capacity(self.probe_rows.len());
        let mut total = 0.0f64;
        for x in &self.probe_rows {
            let z = crate::autoencoder::encode(&self.params, &self.ae_cfg, x)?;
            let x_hat = decode(&self.params, &z)?;
            let resid: Vec<f32> = x.iter().zip(&x_hat).map(|(&a, &b)| a - b).collect();
            let err = resid.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            total += err * err;
            weights.push(total);
            residuals.push(resid);
        }
        let d = self.params.d;
        for i in 0..self.params.n {
            if !dead[i] {
                continue;
            }
            let direction = if total > 0.0 {
                let pick = self.rng.gen_range(0.0..total);
                let idx = weights.partition_point(|&w| w <= pick).min(residuals.len() - 1);
                let resid = &residuals[idx];
                let norm = (dot(resid, resid) as f64).sqrt();
                if norm > 1e-8 {
                    resid.iter().map(|&v| (v as f64 / norm) as f32).collect()
                } else {
                    crate::data::random_unit_vector(&mut self.rng, d)
                }
            } else {
                crate::data::random_unit_vector(&mut self.rng, d)
            };
            self.params.w_dec_t.row_mut(i).copy_from_slice(&direction);
            for (w, &v) in self.params.w_enc.row_mut(i).iter_mut().zip(&direction) {
                *w = 0.2 * v;
            }
            let mut tensor = 0;
            self.adam.reset_slice(tensor, i * d..(i + 1) * d); // w_enc row
            if let Some(b_enc) = &mut self.params.b_enc {
                b_enc[i] = 0.0;
                tensor += 1;
                self.adam.reset_slice(tensor, i..i + 1);
            }
            tensor += 1;
            self.adam.reset_slice(tensor, i * d..(i + 1) * d); // w_dec row
        }
        // resampled latents start fresh
        let fired: Vec<bool> = dead.clone();
        self.tracker.update(&fired, 0);
        Ok(dead_count)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        let batch = self.cfg.batch_size;
        let total_steps = self.cfg.token_budget / batch as u64;
        let eval_every = self.cfg.resolved_eval_every();
        let terms = self.loss_terms();
        let mut iter = BatchIter::new(self.store.rows(), batch, self.cfg.seed, Split::Train)?;

        let resample_steps: Vec<u64> = match self.cfg.resample_events {
            Some(events) if events > 0 => (1..=events as u64)
                .map(|j| j * total_steps / (events as u64 + 1))
                .collect(),
            _ => Vec::new(),
        };

        let mut log = TrainLog::default();
        let mut tokens_seen = 0u64;
        let mut next_eval = eval_every;
        let mut nonfinite_evals = 0u32;
        let mut aux_running = 0.0f64;
        let mut aux_batches = 0u64;
        let mut converged = false;

        let inv_norm = 1.0 / self.norm_constant;

        for step in 0..total_steps {
            if self.cfg.lr_decay {
                let frac = 1.0 - step as f32 / total_steps as f32;
                self.adam.lr = self.lr * frac.max(0.0);
            }
            let indices: Vec<u32> = iter.next_batch().to_vec();
            let mut rows: Vec<Vec<f32>> = Vec::with_capacity(indices.len());
            for &r in &indices {
                rows.push(normalize_input(self.store.row(r as usize))?.0);
            }

            let dead = self.tracker.dead_mask();
            let any_dead = dead.iter().any(|&d| d);

            let shards: Vec<&[Vec<f32>]> = rows.chunks(SHARD_ROWS).collect();
            let partials: Vec<Result<ShardGrads>> = shards
                .par_iter()
                .map(|shard| {
                    shard_pass(
                        &self.params,
                        &self.ae_cfg,
                        &terms,
                        &dead,
                        any_dead,
                        shard,
                        inv_norm,
                        batch as f32,
                        self.ae_cfg.aux_coeff,
                    )
                })
                .collect();
            let mut grads: Option<ShardGrads> = None;
            for p in partials {
                let p = p?;
                match &mut grads {
                    None => grads = Some(p),
                    Some(g) => g.merge(&p),
                }
            }
            let mut grads = grads.expect("at least one shard");

            // pre-bias trick: one multiply against the summed dpre
            let mut b_pre_grad = grads.b_pre_dec.clone();
            for (i, &s) in grads.dpre_sum.iter().enumerate() {
                if s != 0.0 {
                    axpy(&mut b_pre_grad, -s, self.params.w_enc.row(i));
                }
            }

            if let Some(max_norm) = self.cfg.clip_max_norm {
                let mut slices: Vec<&mut [f32]> = vec![grads.w_enc.data_mut()];
                if let Some(b) = &mut grads.b_enc {
                    slices.push(b);
                }
                slices.push(grads.w_dec_t.data_mut());
                slices.push(&mut b_pre_grad);
                clip_grads(&mut slices, max_norm);
            }

            project_decoder_grad(&mut grads.w_dec_t, &self.params.w_dec_t);

            {
                let mut param_slices: Vec<&mut [f32]> = vec![self.params.w_enc.data_mut()];
                let mut grad_slices: Vec<&[f32]> = vec![grads.w_enc.data()];
                if let Some(b) = &mut self.params.b_enc {
                    param_slices.push(b);
                    grad_slices.push(grads.b_enc.as_ref().expect("b_enc grad"));
                }
                param_slices.push(self.params.w_dec_t.data_mut());
                grad_slices.push(grads.w_dec_t.data());
                param_slices.push(&mut self.params.b_pre);
                grad_slices.push(&b_pre_grad);
                self.adam.step(&mut param_slices, &grad_slices)?;
            }

            if self.cfg.renorm_decoder {
                renorm_decoder(&mut self.params.w_dec_t, &mut self.rng);
            }
            self.ema_update();
            self.tracker.update(&grads.fired, batch as u64);

            tokens_seen = (step + 1) * batch as u64;
            aux_running += grads.aux_sum;
            aux_batches += grads.aux_count;

            if !resample_steps.is_empty() && resample_steps.contains(&(step + 1)) {
                let count = self.resample_dead_latents()?;
                if count > 0 {
                    eprintln!(
                        "[train] resampled {} dead latents at step {}",
                        count,
                        step + 1
                    );
                }
            }

            if tokens_seen >= next_eval || step + 1 == total_steps {
                next_eval = next_eval.saturating_add(eval_every);
                let (val_mse, l0) = Self::eval_mse(&self.params, &self.ae_cfg, &self.val_rows)?;
                let val_nmse = val_mse / self.val_baseline;
                let val_nmse_ema = match self.ema_params() {
                    Some(ep) => {
                        let (m, _) = Self::eval_mse(&ep, &self.ae_cfg, &self.val_rows)?;
                        m / self.val_baseline
                    }
                    None => val_nmse,
                };
                let (train_mse, _) = Self::eval_mse(&self.params, &self.ae_cfg, &self.probe_rows)?;
                let aux_mean = if aux_batches > 0 {
                    (aux_running / aux_batches as f64) as f32
                } else {
                    0.0
                };
                aux_running = 0.0;
                aux_batches = 0;
                log.records.push(TrainLogRecord {
                    tokens_seen,
                    train_mse,
                    val_nmse,
                    dead_fraction: self.tracker.dead_fraction(),
                    l0,
                    aux_loss: aux_mean,
                    lr: self.lr,
                    val_nmse_ema,
                });
                eprintln!(
                    "[train] tokens={} val_nmse={:.5} l0={:.2} dead={:.3}",
                    tokens_seen,
                    val_nmse,
                    l0,
                    self.tracker.dead_fraction()
                );

                if !val_nmse.is_finite() {
                    nonfinite_evals += 1;
                    if nonfinite_evals >= 2 {
                        return Err(Error::numerical(format!(
                            "validation loss non-finite twice consecutively at {} tokens \
                             (lr {} may be too high)",
                            tokens_seen, self.lr
                        )));
                    }
                } else {
                    nonfinite_evals = 0;
                }

                if self.cfg.stop_mode == StopMode::Converged {
                    let curve: Vec<f32> = log
                        .records
                        .iter()
                        .map(|r| r.val_nmse.min(r.val_nmse_ema))
                        .collect();
                    if detect_convergence(
                        &curve,
                        self.cfg.convergence_rel_tol,
                        self.cfg.convergence_window,
                    ) {
                        converged = true;
                        break;
                    }
                }
            }
        }

        debug_assert!(self.params.decoder_norm_error() < 1e-5 || !self.cfg.renorm_decoder);

        let final_val_nmse = log
            .records
            .last()
            .map(|r| r.val_nmse.min(r.val_nmse_ema))
            .unwrap_or(f32::NAN);
        let best_val_nmse = log.best_val_nmse().unwrap_or(f32::NAN);
        let adam_snapshot = AdamSnapshot {
            step: self.adam.step,
            skipped_steps: self.adam.skipped_steps,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
            lr: self.adam.lr,
            moments: self
                .adam
                .tensors()
                .iter()
                .map(|t| (t.m.clone(), t.v.clone()))
                .collect(),
        };
        let checkpoint = Checkpoint {
            params: self.params,
            config: self.ae_cfg,
            step: self.adam.step,
            tokens_seen,
            ema: Some(self.ema),
            adam: Some(adam_snapshot),
        };
        Ok(TrainOutcome {
            checkpoint,
            log,
            best_val_nmse,
            final_val_nmse,
            converged,
        })
    }
}

/// Convenience wrapper: build a trainer and run it.
pub fn train(ae_cfg: &AeConfig, cfg: &TrainConfig, store: &ActivationStore) -> Result<TrainOutcome> {
    Trainer::new(ae_cfg.clone(), cfg.clone(), store)?.run()
}
