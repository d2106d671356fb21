//! Sweep orchestration over (n, k, lr, token budget) and scaling-law fits:
//! `y = alpha * x^beta + e` with an irreducible loss term, and the joint law
//! `L(n,k) = exp(a + bk*ln k + bn*ln n + g*ln k*ln n) + exp(z + h*ln k)`.
//!
//! Fits run in log space: the residual is `ln(model) - ln(observed)`. The
//! irreducible term is grid-searched over log-spaced candidates and then
//! polished jointly with a damped Gauss-Newton loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AeConfig;
use crate::data::ActivationStore;
use crate::error::{Error, Result};
use crate::trainer::{train, LrRule, StopMode, TrainConfig};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta: f64,
    pub irreducible: f64,
    /// RMS of log-space residuals.
    pub log_rms: f64,
}

impl PowerLawFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.alpha * x.powf(self.beta) + self.irreducible
    }
}

fn linear_regression(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let denom = m * sxx - sx * sx;
    if denom.abs() < 1e-18 {
        return (sy / m, 0.0);
    }
    let slope = (m * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / m;
    (intercept, slope)
}

fn log_residual_rms(points: &[(f64, f64)], alpha: f64, beta: f64, e: f64) -> f64 {
    let mut acc = 0.0f64;
    for &(x, y) in points {
        let m = alpha * x.powf(beta) + e;
        if m <= 0.0 {
            return f64::INFINITY;
        }
        acc += (m.ln() - y.ln()).powi(2);
    }
    (acc / points.len() as f64).sqrt()
}

/// Solves `A x = b` in place for a small dense system (partial pivoting).
fn solve_dense(a: &mut [f64], b: &mut [f64], dim: usize) -> Result<()> {
    for col in 0..dim {
        let mut pivot = col;
        for row in col + 1..dim {
            if a[row * dim + col].abs() > a[pivot * dim + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * dim + col].abs() < 1e-15 {
            return Err(Error::Underdetermined(
                "singular normal equations in fit".to_string(),
            ));
        }
        if pivot != col {
            for c in 0..dim {
                a.swap(col * dim + c, pivot * dim + c);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * dim + col];
        for row in col + 1..dim {
            let factor = a[row * dim + col] / diag;
            if factor != 0.0 {
                for c in col..dim {
                    a[row * dim + c] -= factor * a[col * dim + c];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    for col in (0..dim).rev() {
        let mut acc = b[col];
        for c in col + 1..dim {
            acc -= a[col * dim + c] * b[c];
        }
        b[col] = acc / a[col * dim + col];
    }
    Ok(())
}

/// Damped Gauss-Newton polish of (ln alpha, beta, e) in log space.
fn polish_power_law(points: &[(f64, f64)], mut alpha: f64, mut beta: f64, mut e: f64) -> (f64, f64, f64) {
    let mut lambda = 1e-3f64;
    let mut best_rms = log_residual_rms(points, alpha, beta, e);
    for _ in 0..60 {
        // residuals and jacobian wrt (ln alpha, beta, e)
        let mut jtj = [0.0f64; 9];
        let mut jtr = [0.0f64; 3];
        let mut valid = true;
        for &(x, y) in points {
            let t = alpha * x.powf(beta);
            let m = t + e;
            if m <= 0.0 {
                valid = false;
                break;
            }
            let r = m.ln() - y.ln();
            let j = [t / m, t * x.ln() / m, 1.0 / m];
            for a_i in 0..3 {
                for b_i in 0..3 {
                    jtj[a_i * 3 + b_i] += j[a_i] * j[b_i];
                }
                jtr[a_i] += j[a_i] * r;
            }
        }
        if !valid {
            break;
        }
        let mut a = jtj;
        for d in 0..3 {
            a[d * 3 + d] *= 1.0 + lambda;
        }
        let mut step = jtr;
        if solve_dense(&mut a, &mut step, 3).is_err() {
            break;
        }
        let cand_alpha = (alpha.ln() - step[0]).exp();
        let cand_beta = beta - step[1];
        let cand_e = (e - step[2]).max(0.0);
        let cand_rms = log_residual_rms(points, cand_alpha, cand_beta, cand_e);
        if cand_rms < best_rms {
            alpha = cand_alpha;
            beta = cand_beta;
            e = cand_e;
            best_rms = cand_rms;
            lambda = (lambda * 0.3).max(1e-9);
            if best_rms < 1e-12 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e6 {
                break;
            }
        }
    }
    (alpha, beta, e)
}

/// Fits `y = alpha x^beta (+ e)`. With the irreducible term, e candidates
/// are 0 plus 200 log-spaced values up to 0.99 * min(y); each candidate is
/// scored by plain log-log regression on (y - e) and the winner is polished.
pub fn fit_power_law(points: &[(f64, f64)], with_irreducible: bool) -> Result<PowerLawFit> {
    let min_points = if with_irreducible { 4 } else { 3 };
    if points.len() < min_points {
        return Err(Error::invalid(format!(
            "need at least {} points, got {}",
            min_points,
            points.len()
        )));
    }
    for &(x, y) in points {
        if x <= 0.0 || y <= 0.0 || !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid("power-law points must be positive finite"));
        }
    }
    let lx: Vec<f64> = points.iter().map(|&(x, _)| x.ln()).collect();

    let plain = |e: f64| -> Option<(f64, f64)> {
        let mut ly = Vec::with_capacity(points.len());
        for &(_, y) in points {
            if y <= e {
                return None;
            }
            ly.push((y - e).ln());
        }
        let (intercept, slope) = linear_regression(&lx, &ly);
        Some((intercept.exp(), slope))
    };

    if !with_irreducible {
        let (alpha, beta) = plain(0.0).expect("validated positive");
        return Ok(PowerLawFit {
            alpha,
            beta,
            irreducible: 0.0,
            log_rms: log_residual_rms(points, alpha, beta, 0.0),
        });
    }

    let min_y = points.iter().map(|&(_, y)| y).fold(f64::INFINITY, f64::min);
    let hi = 0.99 * min_y;
    let lo = 1e-6 * min_y;
    let mut candidates: Vec<f64> = vec![0.0];
    for i in 0..200 {
        candidates.push(lo * (hi / lo).powf(i as f64 / 199.0));
    }

    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &e in &candidates {
        if let Some((alpha, beta)) = plain(e) {
            let rms = log_residual_rms(points, alpha, beta, e);
            if best.map_or(true, |(.., brms)| rms < brms) {
                best = Some((alpha, beta, e, rms));
            }
        }
    }
    let (alpha, beta, e, _) =
        best.ok_or_else(|| Error::numerical("no feasible irreducible-loss candidate"))?;
    let (alpha, beta, e) = polish_power_law(points, alpha, beta, e);
    Ok(PowerLawFit {
        alpha,
        beta,
        irreducible: e,
        log_rms: log_residual_rms(points, alpha, beta, e),
    })
}

/// Joint scaling-law coefficients for
/// `L(n,k) = exp(alpha + beta_k ln k + beta_n ln n + gamma ln k ln n)
///          + exp(zeta + eta ln k)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JointFit {
    pub alpha: f64,
    pub beta_k: f64,
    pub beta_n: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub eta: f64,
    pub log_rms: f64,
}

/// Direct evaluation of the joint law.
pub fn joint_law(
    alpha: f64,
    beta_k: f64,
    beta_n: f64,
    gamma: f64,
    zeta: f64,
    eta: f64,
    n: f64,
    k: f64,
) -> f64 {
    let lk = k.ln();
    let ln = n.ln();
    (alpha + beta_k * lk + beta_n * ln + gamma * lk * ln).exp() + (zeta + eta * lk).exp()
}

impl JointFit {
    pub fn eval(&self, n: f64, k: f64) -> f64 {
        joint_law(
            self.alpha, self.beta_k, self.beta_n, self.gamma, self.zeta, self.eta, n, k,
        )
    }
}

fn joint_rms(points: &[(f64, f64, f64)], p: &[f64; 6]) -> f64 {
    let mut acc = 0.0f64;
    for &(n, k, y) in points {
        let m = joint_law(p[0], p[1], p[2], p[3], p[4], p[5], n, k);
        if m <= 0.0 || !m.is_finite() {
            return f64::INFINITY;
        }
        acc += (m.ln() - y.ln()).powi(2);
    }
    (acc / points.len() as f64).sqrt()
}

/// Nonlinear least squares over the six joint-law parameters, initialized
/// from per-k power-law fits with irreducible terms.
pub fn fit_joint(points: &[(f64, f64, f64)]) -> Result<JointFit> {
    if points.len() < 8 {
        return Err(Error::invalid(format!(
            "joint fit needs at least 8 points, got {}",
            points.len()
        )));
    }
    let mut ks: Vec<f64> = points.iter().map(|&(_, k, _)| k).collect();
    ks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    ks.dedup();
    let mut ns: Vec<f64> = points.iter().map(|&(n, _, _)| n).collect();
    ns.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    ns.dedup();
    if ks.len() < 2 || ns.len() < 2 {
        return Err(Error::Underdetermined(
            "joint fit needs at least two distinct n and two distinct k".to_string(),
        ));
    }

    // per-k fits give the first-term intercept/slope and irreducible term
    let mut lk_list = Vec::new();
    let mut ln_a = Vec::new();
    let mut slope_list = Vec::new();
    let mut e_list = Vec::new();
    let min_y = points
        .iter()
        .map(|&(.., y)| y)
        .fold(f64::INFINITY, f64::min);
    for &k in &ks {
        let sub: Vec<(f64, f64)> = points
            .iter()
            .filter(|&&(_, pk, _)| pk == k)
            .map(|&(n, _, y)| (n, y))
            .collect();
        if sub.len() < 4 {
            continue;
        }
        if let Ok(fit) = fit_power_law(&sub, true) {
            if fit.alpha > 0.0 {
                lk_list.push(k.ln());
                ln_a.push(fit.alpha.ln());
                slope_list.push(fit.beta);
                e_list.push(fit.irreducible.max(1e-9 * min_y));
            }
        }
    }
    let mut init = [0.0f64; 6];
    if lk_list.len() >= 2 {
        let (alpha, beta_k) = linear_regression(&lk_list, &ln_a);
        let (beta_n, gamma) = linear_regression(&lk_list, &slope_list);
        let le: Vec<f64> = e_list.iter().map(|&e| e.ln()).collect();
        let (zeta, eta) = linear_regression(&lk_list, &le);
        init = [alpha, beta_k, beta_n, gamma, zeta, eta];
    } else {
        // coarse fallback: split the magnitude evenly
        let mean_ly: f64 =
            points.iter().map(|&(.., y)| y.ln()).sum::<f64>() / points.len() as f64;
        init[0] = mean_ly;
        init[4] = mean_ly - 2.0;
    }

    // Levenberg-Marquardt over the six parameters
    let mut p = init;
    let mut best_rms = joint_rms(points, &p);
    let mut lambda = 1e-3f64;
    for _ in 0..200 {
        let mut jtj = [0.0f64; 36];
        let mut jtr = [0.0f64; 6];
        for &(n, k, y) in points {
            let lk = k.ln();
            let ln = n.ln();
            let t1 = (p[0] + p[1] * lk + p[2] * ln + p[3] * lk * ln).exp();
            let t2 = (p[4] + p[5] * lk).exp();
            let m = t1 + t2;
            let r = m.ln() - y.ln();
            let j = [
                t1 / m,
                t1 * lk / m,
                t1 * ln / m,
                t1 * lk * ln / m,
                t2 / m,
                t2 * lk / m,
            ];
            for a_i in 0..6 {
                for b_i in 0..6 {
                    jtj[a_i * 6 + b_i] += j[a_i] * j[b_i];
                }
                jtr[a_i] += j[a_i] * r;
            }
        }
        let mut a = jtj;
        for d in 0..6 {
            a[d * 6 + d] *= 1.0 + lambda;
        }
        let mut step = jtr;
        if solve_dense(&mut a, &mut step, 6).is_err() {
            break;
        }
        let mut cand = p;
        for i in 0..6 {
            cand[i] -= step[i];
        }
        let cand_rms = joint_rms(points, &cand);
        if cand_rms < best_rms {
            p = cand;
            best_rms = cand_rms;
            lambda = (lambda * 0.3).max(1e-9);
            if best_rms < 1e-12 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e8 {
                break;
            }
        }
    }
    if !best_rms.is_finite() {
        return Err(Error::numerical("joint fit failed to converge"));
    }
    Ok(JointFit {
        alpha: p[0],
        beta_k: p[1],
        beta_n: p[2],
        gamma: p[3],
        zeta: p[4],
        eta: p[5],
        log_rms: best_rms,
    })
}

/// Compute proxy: the dense encoder pass dominates, forward plus backward.
pub fn compute_proxy(d: usize, n: usize, tokens: u64) -> f64 {
    6.0 * d as f64 * n as f64 * tokens as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Record the best loss at every compute checkpoint.
    Compute,
    /// Train to convergence and record the final loss.
    Convergence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub n_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub lr_rule: LrRule,
    pub budget: BudgetMode,
    pub max_tokens: u64,
    pub seeds: Vec<u64>,
    /// Optimal-L(N) learning rates run lower than L(C) rates.
    #[serde(default = "default_ln_lr_factor")]
    pub convergence_lr_factor: f32,
}

fn default_ln_lr_factor() -> f32 {
    0.25
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub k: usize,
    pub lr: f32,
    pub seed: u64,
    pub tokens: u64,
    pub compute_proxy: f64,
    pub val_nmse: f32,
    pub dead_frac: f32,
    pub l0: f32,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Human-readable notes for cells excluded as diverged.
    pub excluded: Vec<String>,
}

/// A diverged run reconstructs worse than twice the mean predictor.
const DIVERGENCE_NMSE: f32 = 2.0;

impl SweepTable {
    pub const CSV_HEADER: &'static str =
        "n,k,lr,seed,tokens,compute_proxy,val_nmse,dead_frac,l0,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.n,
                r.k,
                r.lr,
                r.seed,
                r.tokens,
                r.compute_proxy,
                r.val_nmse,
                r.dead_frac,
                r.l0,
                r.wall_seconds
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SweepTable> {
        let mut rows = Vec::new();
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == Self::CSV_HEADER => {}
            other => {
                return Err(Error::invalid(format!(
                    "bad sweep CSV header: {:?}",
                    other
                )))
            }
        }
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::invalid(format!(
                    "sweep CSV line {} has {} fields",
                    ln + 2,
                    f.len()
                )));
            }
            let parse_err = |what: &str| Error::invalid(format!("bad {} on line {}", what, ln + 2));
            rows.push(SweepRow {
                n: f[0].parse().map_err(|_| parse_err("n"))?,
                k: f[1].parse().map_err(|_| parse_err("k"))?,
                lr: f[2].parse().map_err(|_| parse_err("lr"))?,
                seed: f[3].parse().map_err(|_| parse_err("seed"))?,
                tokens: f[4].parse().map_err(|_| parse_err("tokens"))?,
                compute_proxy: f[5].parse().map_err(|_| parse_err("compute_proxy"))?,
                val_nmse: f[6].parse().map_err(|_| parse_err("val_nmse"))?,
                dead_frac: f[7].parse().map_err(|_| parse_err("dead_frac"))?,
                l0: f[8].parse().map_err(|_| parse_err("l0"))?,
                wall_seconds: f[9].parse().map_err(|_| parse_err("wall_seconds"))?,
            });
        }
        Ok(SweepTable {
            rows,
            excluded: Vec::new(),
        })
    }

    /// Best loss at convergence per (n, k): minimum val_nmse over seeds.
    pub fn loss_at_convergence(&self) -> Vec<(f64, f64, f64)> {
        let mut best: std::collections::BTreeMap<(usize, usize), f32> =
            std::collections::BTreeMap::new();
        for r in &self.rows {
            best.entry((r.n, r.k))
                .and_modify(|v| *v = v.min(r.val_nmse))
                .or_insert(r.val_nmse);
        }
        best.into_iter()
            .map(|((n, k), v)| (n as f64, k as f64, v as f64))
            .collect()
    }
}

/// Trains one cell per (n, k, seed) and collects the loss table. Sweep cells
/// run in parallel; the table preserves grid order.
pub fn run_sweep(
    spec: &SweepSpec,
    store: &ActivationStore,
    base_ae: &AeConfig,
    base_train: &TrainConfig,
) -> Result<SweepTable> {
    if spec.n_grid.is_empty() || spec.k_grid.is_empty() || spec.seeds.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    let mut cells = Vec::new();
    for &n in &spec.n_grid {
        for &k in &spec.k_grid {
            for &seed in &spec.seeds {
                cells.push((n, k, seed));
            }
        }
    }
    let results: Vec<Result<(Vec<SweepRow>, Option<String>)>> = cells
        .par_iter()
        .map(|&(n, k, seed)| {
            if k >= n {
                return Ok((Vec::new(), Some(format!("cell n={} k={}: k >= n, skipped", n, k))));
            }
            let mut ae = base_ae.clone();
            ae.n = n;
            ae.k = k;
            let mut tc = base_train.clone();
            tc.seed = seed;
            tc.token_budget = spec.max_tokens;
            let mut lr = spec.lr_rule.lr(n);
            if spec.budget == BudgetMode::Convergence {
                lr *= spec.convergence_lr_factor;
                tc.stop_mode = StopMode::Converged;
            } else {
                tc.stop_mode = StopMode::Budget;
            }
            tc.lr = lr;
            tc.lr_rule = None;

            let start = std::time::Instant::now();
            let outcome = match train(&ae, &tc, store) {
                Ok(o) => o,
                Err(Error::Numerical(msg)) => {
                    return Ok((
                        Vec::new(),
                        Some(format!("cell n={} k={} seed={} diverged: {}", n, k, seed, msg)),
                    ))
                }
                Err(e) => return Err(e),
            };
            let wall = start.elapsed().as_secs_f64();
            let final_loss = outcome.final_val_nmse;
            if !final_loss.is_finite() || final_loss > DIVERGENCE_NMSE {
                return Ok((
                    Vec::new(),
                    Some(format!(
                        "cell n={} k={} seed={} diverged: final val_nmse {}",
                        n, k, seed, final_loss
                    )),
                ));
            }
            let rows = match spec.budget {
                BudgetMode::Compute => outcome
                    .log
                    .records
                    .iter()
                    .map(|r| SweepRow {
                        n,
                        k,
                        lr,
                        seed,
                        tokens: r.tokens_seen,
                        compute_proxy: compute_proxy(store.d(), n, r.tokens_seen),
                        val_nmse: r.val_nmse.min(r.val_nmse_ema),
                        dead_frac: r.dead_fraction,
                        l0: r.l0,
                        wall_seconds: wall,
                    })
                    .collect(),
                BudgetMode::Convergence => {
                    let last = outcome.log.records.last().expect("log non-empty");
                    vec![SweepRow {
                        n,
                        k,
                        lr,
                        seed,
                        tokens: last.tokens_seen,
                        compute_proxy: compute_proxy(store.d(), n, last.tokens_seen),
                        val_nmse: last.val_nmse.min(last.val_nmse_ema),
                        dead_frac: last.dead_fraction,
                        l0: last.l0,
                        wall_seconds: wall,
                    }]
                }
            };
            Ok((rows, None))
        })
        .collect();

    let mut table = SweepTable::default();
    for r in results {
        let (rows, note) = r?;
        table.rows.extend(rows);
        if let Some(note) = note {
            eprintln!("[sweep] {}", note);
            table.excluded.push(note);
        }
    }
    Ok(table)
}
