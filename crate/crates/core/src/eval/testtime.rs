//! Test-time activation swaps (TopK at a different k', JumpReLU at a
//! threshold), latent density and importance diagnostics, and per-position
//! reconstruction error.

use rayon::prelude::*;

use crate::autoencoder::{
    decode, jumprelu_encode, mean_predictor_baseline, preactivations, sq_err, AeConfig,
    AutoencoderParams, Latents,
};
use crate::data::SequenceStore;
use crate::error::{Error, Result};
use crate::tensor::topk_select;

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SweepPoint {
    /// k' for TopK sweeps, theta for JumpReLU sweeps.
    pub setting: f32,
    /// Mean number of nonzero latents per token.
    pub l0: f32,
    pub nmse: f32,
}

fn eval_swap<F>(rows: &[Vec<f32>], params: &AutoencoderParams, encode_fn: F) -> Result<(f32, f32)>
where
    F: Fn(&[f32]) -> Result<Latents> + Sync,
{
    let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
    let baseline = mean_predictor_baseline(&refs)?;
    let per_row: Vec<Result<(f64, u64)>> = rows
        .par_iter()
        .map(|x| {
            let z = encode_fn(x)?;
            let x_hat = decode(params, &z)?;
            Ok((sq_err(x, &x_hat) as f64, z.l0() as u64))
        })
        .collect();
    let mut mse = 0.0f64;
    let mut l0 = 0u64;
    for r in per_row {
        let (m, l) = r?;
        mse += m;
        l0 += l;
    }
    Ok((
        ((mse / rows.len() as f64) as f32) / baseline,
        l0 as f32 / rows.len() as f32,
    ))
}

/// Replaces the activation function by TopK(k') for each k' in the list and
/// evaluates L0/MSE on pre-normalized rows.
pub fn test_time_topk(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    rows: &[Vec<f32>],
    k_values: &[usize],
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(k_values.len());
    for &k in k_values {
        if k == 0 || k > params.n {
            return Err(Error::invalid(format!(
                "test-time k {} out of range for n {}",
                k, params.n
            )));
        }
        let (nmse, l0) = eval_swap(rows, params, |x| {
            let pre = preactivations(params, cfg, x)?;
            Ok(Latents::Sparse(topk_select(&pre, k, cfg.relu_after_topk)?))
        })?;
        out.push(SweepPoint {
            setting: k as f32,
            l0,
            nmse,
        });
    }
    Ok(out)
}

/// Replaces the activation function by JumpReLU(theta) for each threshold.
pub fn test_time_jumprelu(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    rows: &[Vec<f32>],
    thetas: &[f32],
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let (nmse, l0) = eval_swap(rows, params, |x| {
            Ok(Latents::Sparse(jumprelu_encode(params, cfg, x, theta)?))
        })?;
        out.push(SweepPoint {
            setting: theta,
            l0,
            nmse,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DensityStats {
    /// Fraction of tokens on which each latent fires (nonzero after the
    /// activation).
    pub density: Vec<f32>,
    /// Mean squared activation per latent.
    pub importance: Vec<f32>,
    /// Mean number of active latents per token.
    pub l0: f32,
    /// Mean density of the d densest latents divided by L0; large values
    /// flag principal-component-like dense solutions.
    pub dense_solution_score: f32,
    /// (bucket upper edge in log10 density, count), 20 buckets.
    pub log_density_histogram: Vec<(f32, u32)>,
}

pub fn density_stats(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    rows: &[Vec<f32>],
) -> Result<DensityStats> {
    if rows.is_empty() {
        return Err(Error::invalid("density stats need at least one row"));
    }
    let n = params.n;
    let mut fire_counts = vec![0u64; n];
    let mut sq_sums = vec![0.0f64; n];
    let mut l0_total = 0u64;
    for x in rows {
        let z = crate::autoencoder::encode(params, cfg, x)?;
        match &z {
            Latents::Sparse(sv) => {
                for &(i, v) in sv.entries() {
                    if v != 0.0 {
                        fire_counts[i as usize] += 1;
                        sq_sums[i as usize] += (v as f64) * (v as f64);
                        l0_total += 1;
                    }
                }
            }
            Latents::Dense(dv) => {
                for (i, &v) in dv.iter().enumerate() {
                    if v != 0.0 {
                        fire_counts[i] += 1;
                        sq_sums[i] += (v as f64) * (v as f64);
                        l0_total += 1;
                    }
                }
            }
        }
    }
    let rows_f = rows.len() as f64;
    let density: Vec<f32> = fire_counts.iter().map(|&c| (c as f64 / rows_f) as f32).collect();
    let importance: Vec<f32> = sq_sums.iter().map(|&s| (s / rows_f) as f32).collect();
    let l0 = (l0_total as f64 / rows_f) as f32;

    let mut sorted = density.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite density"));
    let top_d = &sorted[..params.d.min(n)];
    let mean_top = top_d.iter().sum::<f32>() / top_d.len() as f32;
    let dense_solution_score = if l0 > 0.0 { mean_top / l0 } else { 0.0 };

    // log10 density histogram over firing latents
    let min_log = -(rows_f.log10() as f32) - 0.5;
    let buckets = 20usize;
    let mut histogram: Vec<(f32, u32)> = (0..buckets)
        .map(|b| {
            let hi = min_log + (b as f32 + 1.0) * (0.0 - min_log) / buckets as f32;
            (hi, 0u32)
        })
        .collect();
    for &dv in &density {
        if dv > 0.0 {
            let lg = dv.log10();
            let idx = (((lg - min_log) / (0.0 - min_log)) * buckets as f32)
                .floor()
                .clamp(0.0, buckets as f32 - 1.0) as usize;
            histogram[idx].1 += 1;
        }
    }

    Ok(DensityStats {
        density,
        importance,
        l0,
        dense_solution_score,
        log_density_histogram: histogram,
    })
}

/// Normalized MSE per context position: the reconstruction error at each
/// position divided by that position's own mean-predictor baseline.
pub fn mse_by_position(
    params: &AutoencoderParams,
    cfg: &AeConfig,
    store: &SequenceStore,
) -> Result<Vec<f32>> {
    let seq_len = store.seq_len();
    let n_seqs = store.n_seqs();
    if n_seqs == 0 {
        return Err(Error::invalid("empty sequence store"));
    }
    let per_pos: Vec<Result<f32>> = (0..seq_len)
        .into_par_iter()
        .map(|pos| {
            let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n_seqs);
            for s in 0..n_seqs {
                rows.push(crate::autoencoder::normalize_input(store.activation_row(s, pos))?.0);
            }
            let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
            let baseline = mean_predictor_baseline(&refs)?;
            let mut mse = 0.0f64;
            for x in &rows {
                let z = crate::autoencoder::encode(params, cfg, x)?;
                let x_hat = decode(params, &z)?;
                mse += sq_err(x, &x_hat) as f64;
            }
            Ok(((mse / n_seqs as f64) as f32) / baseline)
        })
        .collect();
    per_pos.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::normalize_input;
    use crate::data::{gen_dictionary_data, ActivationStore, DictDataConfig};
    use crate::subject::perfect_autoencoder;
    use crate::tensor::DenseMatrix;

    fn normalized_rows(store: &ActivationStore) -> Vec<Vec<f32>> {
        (0..store.rows())
            .map(|r| normalize_input(store.row(r)).unwrap().0)
            .collect()
    }

    fn fixture() -> (AutoencoderParams, AeConfig, Vec<Vec<f32>>) {
        let data_cfg = DictDataConfig {
            d: 16,
            n_true: 32,
            k_true: 4,
            value_range: (0.5, 1.5),
            noise_sigma: 0.01,
            seed: 5,
        };
        let (store, _) = gen_dictionary_data(&data_cfg, 400).unwrap();
        let rows = normalized_rows(&store);
        let mut sample = DenseMatrix::zeros(rows.len(), 16);
        for (i, r) in rows.iter().enumerate() {
            sample.row_mut(i).copy_from_slice(r);
        }
        let cfg = AeConfig::topk(32, 4);
        let params = crate::autoencoder::init_params(&sample, &cfg, 3).unwrap();
        (params, cfg, rows)
    }

    #[test]
    fn topk_sweep_at_training_k_matches_plain_eval() {
        let (params, cfg, rows) = fixture();
        let sweep = test_time_topk(&params, &cfg, &rows, &[4]).unwrap();
        // same computation path as a training-configuration eval: bitwise
        let (want_nmse, want_l0) = eval_swap(&rows, &params, |x| {
            crate::autoencoder::encode(&params, &cfg, x)
        })
        .unwrap();
        assert_eq!(sweep[0].nmse, want_nmse);
        assert_eq!(sweep[0].l0, want_l0);
    }

    #[test]
    fn jumprelu_zero_threshold_keeps_positives() {
        let (params, cfg, rows) = fixture();
        let points = test_time_jumprelu(&params, &cfg, &rows, &[0.0, f32::INFINITY]).unwrap();
        assert!(points[0].l0 > 0.0);
        assert_eq!(points[1].l0, 0.0);
        // everything pruned decodes to b_pre: nmse relative to the mean
        // predictor stays finite
        assert!(points[1].nmse.is_finite());
    }

    #[test]
    fn density_of_full_k_is_one() {
        let (params, _, rows) = fixture();
        // k = n - 1 with the clamp off: everything nonzero fires
        let mut cfg = AeConfig::topk(32, 31);
        cfg.relu_after_topk = false;
        let stats = density_stats(&params, &cfg, &rows).unwrap();
        let mean_density: f32 =
            stats.density.iter().sum::<f32>() / stats.density.len() as f32;
        assert!(mean_density > 0.9, "mean density {}", mean_density);
        assert!((stats.l0 - 31.0).abs() < 0.5);
    }

    #[test]
    fn perfect_model_has_zero_position_mse() {
        let (ae, cfg) = perfect_autoencoder(8);
        let acts = crate::data::gen_gaussian(8, 64, 9).unwrap().with_seq_len(8).unwrap();
        let tokens: Vec<u32> = (0..64).map(|i| (i % 16) as u32).collect();
        let store = SequenceStore::new(8, 16, tokens, acts).unwrap();
        let by_pos = mse_by_position(&ae, &cfg, &store).unwrap();
        assert_eq!(by_pos.len(), 8);
        for (pos, &v) in by_pos.iter().enumerate() {
            assert!(v < 1e-10, "position {} nmse {}", pos, v);
        }
    }

    #[test]
    fn position_mse_matches_manual_slice() {
        let (params, cfg, _) = fixture();
        let data_cfg = DictDataConfig {
            d: 16,
            n_true: 32,
            k_true: 4,
            value_range: (0.5, 1.5),
            noise_sigma: 0.01,
            seed: 6,
        };
        let (store, _) = gen_dictionary_data(&data_cfg, 96).unwrap();
        let acts = store.with_seq_len(8).unwrap();
        let tokens: Vec<u32> = (0..96).map(|i| (i % 4) as u32).collect();
        let seq_store = SequenceStore::new(8, 4, tokens, acts).unwrap();
        let by_pos = mse_by_position(&params, &cfg, &seq_store).unwrap();

        // manual slice computation at position 3
        let pos = 3;
        let rows: Vec<Vec<f32>> = (0..seq_store.n_seqs())
            .map(|s| normalize_input(seq_store.activation_row(s, pos)).unwrap().0)
            .collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let baseline = mean_predictor_baseline(&refs).unwrap();
        let mut mse = 0.0f64;
        for x in &rows {
            let z = crate::autoencoder::encode(&params, &cfg, x).unwrap();
            let x_hat = decode(&params, &z).unwrap();
            mse += sq_err(x, &x_hat) as f64;
        }
        let want = ((mse / rows.len() as f64) as f32) / baseline;
        assert!((by_pos[pos] - want).abs() < 1e-6);
    }
}
