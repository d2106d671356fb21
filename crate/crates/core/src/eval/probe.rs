//! 1-d logistic probes fit per latent with damped Newton-Raphson. Probes
//! regress on encoder pre-activations, so the TopK mask does not zero probe
//! inputs; the reported score is the best cross-entropy over latents.

use rayon::prelude::*;

use crate::data::ProbeTask;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

const MAX_ITERS: usize = 10;
const W_CAP: f64 = 50.0;
const DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeResult {
    pub task: String,
    pub best_latent: usize,
    /// Best cross-entropy in nats over all latents.
    pub best_ce: f64,
    pub constant_predictor_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_latent_ce: Option<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logistic_ce(z: &[f32], y: &[u8], w: f64, b: f64) -> f64 {
    let mut total = 0.0f64;
    for (&zi, &yi) in z.iter().zip(y) {
        let logit = w * zi as f64 + b;
        // stable -log sigmoid
        let log_p = -(1.0 + (-logit).exp()).ln();
        let log_not_p = -(1.0 + logit.exp()).ln();
        total -= if yi == 1 { log_p } else { log_not_p };
    }
    total / z.len() as f64
}

/// Fits (w, b) for one latent; returns the best CE seen, which never exceeds
/// the constant-predictor CE because the search starts there.
pub fn fit_one_latent(z: &[f32], y: &[u8]) -> (f64, f64, f64) {
    let m = z.len() as f64;
    let pos = y.iter().filter(|&&v| v == 1).count() as f64;
    let p = (pos / m).clamp(1e-6, 1.0 - 1e-6);
    let mut w = 0.0f64;
    let mut b = (p / (1.0 - p)).ln();
    let mut best = (logistic_ce(z, y, w, b), w, b);

    for _ in 0..MAX_ITERS {
        let mut gw = 0.0f64;
        let mut gb = 0.0f64;
        let mut hww = 0.0f64;
        let mut hwb = 0.0f64;
        let mut hbb = 0.0f64;
        for (&zi, &yi) in z.iter().zip(y) {
            let zi = zi as f64;
            let mu = sigmoid(w * zi + b);
            let err = mu - yi as f64;
            let s = mu * (1.0 - mu);
            gw += err * zi;
            gb += err;
            hww += s * zi * zi;
            hwb += s * zi;
            hbb += s;
        }
        gw /= m;
        gb /= m;
        hww = hww / m + DAMPING;
        hwb /= m;
        hbb = hbb / m + DAMPING;
        let det = hww * hbb - hwb * hwb;
        if det.abs() < 1e-18 || !det.is_finite() {
            break;
        }
        let dw = (hbb * gw - hwb * gb) / det;
        let db = (hww * gb - hwb * gw) / det;
        w = (w - dw).clamp(-W_CAP, W_CAP);
        b -= db;
        if !w.is_finite() || !b.is_finite() {
            break;
        }
        let ce = logistic_ce(z, y, w, b);
        if ce < best.0 {
            best = (ce, w, b);
        }
    }
    best
}

/// Fits every latent for every task and reports the per-task minimum CE.
/// `pre_acts` is rows-by-n; each task's labels align with the rows.
pub fn probe_metric(
    pre_acts: &DenseMatrix,
    tasks: &[ProbeTask],
    retain_per_latent: bool,
) -> Result<Vec<ProbeResult>> {
    let rows = pre_acts.rows();
    let n = pre_acts.cols();
    let mut results = Vec::with_capacity(tasks.len());
    for task in tasks {
        if task.labels.len() != rows {
            return Err(Error::invalid(format!(
                "task '{}' has {} labels for {} rows",
                task.name,
                task.labels.len(),
                rows
            )));
        }
        let ones = task.labels.iter().filter(|&&l| l == 1).count();
        if ones == 0 || ones == rows {
            return Err(Error::invalid(format!(
                "task '{}' must contain both classes",
                task.name
            )));
        }
        let p = (ones as f64 / rows as f64).clamp(1e-6, 1.0 - 1e-6);
        let constant_ce = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());

        let per_latent: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let z: Vec<f32> = (0..rows).map(|r| pre_acts.get(r, i)).collect();
                fit_one_latent(&z, &task.labels).0
            })
            .collect();
        let (best_latent, best_ce) = per_latent
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite ce"))
            .map(|(i, &ce)| (i, ce))
            .expect("at least one latent");
        results.push(ProbeResult {
            task: task.name.clone(),
            best_latent,
            best_ce,
            constant_predictor_ce: constant_ce,
            per_latent_ce: if retain_per_latent {
                Some(per_latent)
            } else {
                None
            },
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_latent_reaches_tiny_ce() {
        // latent equal to the label
        let z: Vec<f32> = (0..200).map(|i| (i % 2) as f32).collect();
        let y: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let (ce, w, _) = fit_one_latent(&z, &y);
        assert!(ce < 0.01, "ce {}", ce);
        assert!(w.abs() <= W_CAP + 1e-9);
    }

    #[test]
    fn independent_label_stays_near_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f32> = (0..400).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let y: Vec<u8> = (0..400).map(|i| (i % 2) as u8).collect();
        let (ce, _, _) = fit_one_latent(&z, &y);
        assert!((ce - std::f64::consts::LN_2).abs() < 0.05, "ce {}", ce);
    }

    #[test]
    fn never_worse_than_constant_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = 120;
            let z: Vec<f32> = (0..m).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let mut y: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2) as u8).collect();
            // ensure both classes
            y[0] = 0;
            y[1] = 1;
            let ones = y.iter().filter(|&&v| v == 1).count() as f64;
            let p = ones / m as f64;
            let const_ce = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            let (ce, _, _) = fit_one_latent(&z, &y);
            assert!(ce <= const_ce + 1e-6, "{} vs {}", ce, const_ce);
        }
    }

    #[test]
    fn newton_matches_grid_search_on_two_latent_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 150;
        // latent 0 is weakly predictive, latent 1 is noise
        let z0: Vec<f32> = (0..m).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let y: Vec<u8> = z0
            .iter()
            .map(|&v| if v as f64 + rng.gen_range(-0.8..0.8) > 0.0 { 1 } else { 0 })
            .collect();
        let z1: Vec<f32> = (0..m).map(|_| rng.gen_range(-1.0f32..1.0)).collect();

        let mut data = Vec::with_capacity(2 * m);
        for i in 0..m {
            data.push(z0[i]);
            data.push(z1[i]);
        }
        let pre = DenseMatrix::from_vec(m, 2, data).unwrap();
        let task = ProbeTask::new("fixture", y.clone()).unwrap();
        let results = probe_metric(&pre, &[task], true).unwrap();
        let got = results[0].best_ce;

        // dense grid over (w, b), refined twice
        let mut best = f64::INFINITY;
        for z in [&z0, &z1] {
            let (mut cw, mut cb, mut half) = (0.0f64, 0.0f64, 8.0f64);
            let mut local = f64::INFINITY;
            for _ in 0..4 {
                let (mut bw, mut bb) = (cw, cb);
                for i in 0..41 {
                    for j in 0..41 {
                        let w = cw - half + 2.0 * half * i as f64 / 40.0;
                        let b = cb - half + 2.0 * half * j as f64 / 40.0;
                        let ce = logistic_ce(z, &y, w, b);
                        if ce < local {
                            local = ce;
                            bw = w;
                            bb = b;
                        }
                    }
                }
                cw = bw;
                cb = bb;
                half /= 10.0;
            }
            best = best.min(local);
        }
        assert!(
            (got - best).abs() < 1e-3,
            "newton {} vs grid {}",
            got,
            best
        );
    }

    #[test]
    fn single_class_task_is_rejected() {
        assert!(ProbeTask::new("bad", vec![1, 1, 1]).is_err());
    }
}
