//! Sparsity of ablation effects on downstream logits: ablate one latent (or
//! one residual channel, or one random direction) at one position, collect
//! median-centered logit differences over the vocabulary at T future tokens,
//! and measure the sparsity of the concatenated vector via (L1/L2)^2
//! normalized by V*T. Smaller is sparser; i.i.d. gaussian differences sit at
//! 2/pi.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autoencoder::{encode, normalize_input, AeConfig, AutoencoderParams};
use crate::data::SequenceStore;
use crate::error::{Error, Result};
use crate::subject::{Splice, SubjectModel};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationSparsityResult {
    /// Mean of the normalized (L1/L2)^2 scores over all ablations.
    pub mean_score: f64,
    pub per_ablation_count: usize,
    /// Probe positions skipped because fewer than T future tokens remained.
    pub skipped_positions: usize,
    /// Ablations excluded because the logit difference was identically zero.
    pub degenerate_ablations: usize,
    pub t_future: usize,
    pub vocab: usize,
}

/// What to ablate at each probe position.
pub enum AblationTarget<'a> {
    /// Every latent active at the probe position, under the reconstruct
    /// splice (the baseline is the unablated reconstruct-spliced forward).
    TrainedLatents(&'a AutoencoderParams, &'a AeConfig),
    /// Zero one residual channel at the probe position (identity baseline).
    ResidualChannels { count: usize },
    /// Project out a random unit direction at the probe position
    /// (identity baseline).
    RandomDirections { count: usize, seed: u64 },
}

/// Normalized (L1/L2)^2 of the median-centered concatenation of per-token
/// logit difference blocks. None when the differences are identically zero.
pub fn ablation_score(blocks: &[Vec<f32>]) -> Option<f64> {
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    if total == 0 {
        return None;
    }
    let mut l1 = 0.0f64;
    let mut l2 = 0.0f64;
    let mut scratch: Vec<f32> = Vec::new();
    for block in blocks {
        // lower median; exactly shift-invariant
        scratch.clear();
        scratch.extend_from_slice(block);
        scratch.sort_by(|a, b| a.partial_cmp(b).expect("finite logits"));
        let median = scratch[(scratch.len() - 1) / 2];
        for &v in block {
            let c = (v - median) as f64;
            l1 += c.abs();
            l2 += c * c;
        }
    }
    if l2 <= 0.0 {
        return None;
    }
    Some((l1 * l1 / l2) / total as f64)
}

fn logit_diff_blocks(
    baseline: &DenseMatrix,
    ablated: &DenseMatrix,
    pos: usize,
    t_future: usize,
) -> Vec<Vec<f32>> {
    (pos..pos + t_future)
        .map(|t| {
            baseline
                .row(t)
                .iter()
                .zip(ablated.row(t))
                .map(|(&b, &a)| a - b)
                .collect()
        })
        .collect()
}

/// Evenly spaced probe positions leaving room for `t_future` tokens.
pub fn probe_positions(seq_len: usize, t_future: usize, count: usize) -> Vec<usize> {
    if t_future > seq_len || count == 0 {
        return Vec::new();
    }
    let last = seq_len - t_future;
    (1..=count)
        .map(|j| j * last / (count + 1).max(1))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn ablation_sparsity(
    subject: &SubjectModel,
    store: &SequenceStore,
    target: &AblationTarget,
    t_future: usize,
    positions_per_seq: usize,
    max_seqs: usize,
) -> Result<AblationSparsityResult> {
    if !subject.is_transformer() {
        return Err(Error::invalid(
            "ablation sparsity requires a transformer subject (future-token effects)",
        ));
    }
    if t_future == 0 {
        return Err(Error::invalid("t_future must be positive"));
    }
    let vocab = subject.vocab();
    let seq_len = store.seq_len();
    let positions = probe_positions(seq_len, t_future, positions_per_seq);
    let skipped_per_seq = positions_per_seq - positions.len();
    let n_seqs = store.n_seqs().min(max_seqs);
    if n_seqs == 0 {
        return Err(Error::invalid("no sequences to ablate"));
    }

    let per_seq: Vec<Result<(f64, usize, usize)>> = (0..n_seqs)
        .into_par_iter()
        .map(|s| {
            let tokens = store.tokens(s);
            let limit = Some(seq_len); // full sequence; logits needed to p+T
            let mut score_sum = 0.0f64;
            let mut count = 0usize;
            let mut degenerate = 0usize;

            match target {
                AblationTarget::TrainedLatents(ae, cfg) => {
                    let baseline =
                        subject.forward_with_splice(tokens, &Splice::Reconstruct(ae, cfg), limit)?;
                    for &pos in &positions {
                        // active latents at this position
                        let (normed, _) = normalize_input(store.activation_row(s, pos))?;
                        let z = encode(ae, cfg, &normed)?;
                        for latent in z.active_indices() {
                            let ablated = subject.forward_with_splice(
                                tokens,
                                &Splice::ReconstructWithLatentAblated(ae, cfg, latent, pos),
                                limit,
                            )?;
                            let blocks =
                                logit_diff_blocks(&baseline.logits, &ablated.logits, pos, t_future);
                            match ablation_score(&blocks) {
                                Some(sc) => {
                                    score_sum += sc;
                                    count += 1;
                                }
                                None => degenerate += 1,
                            }
                        }
                    }
                }
                AblationTarget::ResidualChannels { count: chans } => {
                    let baseline = subject.forward_with_splice(tokens, &Splice::Identity, limit)?;
                    let d = subject.d_model();
                    for &pos in &positions {
                        for c in 0..(*chans).min(d) {
                            let zero_channel = |p: usize, r: &[f32]| -> Result<Vec<f32>> {
                                let mut out = r.to_vec();
                                if p == pos {
                                    out[c] = 0.0;
                                }
                                Ok(out)
                            };
                            let ablated = subject.forward_with_splice(
                                tokens,
                                &Splice::Simulated(&zero_channel),
                                limit,
                            )?;
                            let blocks =
                                logit_diff_blocks(&baseline.logits, &ablated.logits, pos, t_future);
                            match ablation_score(&blocks) {
                                Some(sc) => {
                                    score_sum += sc;
                                    count += 1;
                                }
                                None => degenerate += 1,
                            }
                        }
                    }
                }
                AblationTarget::RandomDirections { count: dirs, seed } => {
                    let baseline = subject.forward_with_splice(tokens, &Splice::Identity, limit)?;
                    let d = subject.d_model();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37));
                    for &pos in &positions {
                        for _ in 0..*dirs {
                            let dir = crate::data::random_unit_vector(&mut rng, d);
                            let project_out = |p: usize, r: &[f32]| -> Result<Vec<f32>> {
                                let mut out = r.to_vec();
                                if p == pos {
                                    let dp: f32 = out
                                        .iter()
                                        .zip(&dir)
                                        .map(|(&a, &b)| a * b)
                                        .sum();
                                    for (o, &v) in out.iter_mut().zip(&dir) {
                                        *o -= dp * v;
                                    }
                                }
                                Ok(out)
                            };
                            let ablated = subject.forward_with_splice(
                                tokens,
                                &Splice::Simulated(&project_out),
                                limit,
                            )?;
                            let blocks =
                                logit_diff_blocks(&baseline.logits, &ablated.logits, pos, t_future);
                            match ablation_score(&blocks) {
                                Some(sc) => {
                                    score_sum += sc;
                                    count += 1;
                                }
                                None => degenerate += 1,
                            }
                        }
                    }
                }
            }
            Ok((score_sum, count, degenerate))
        })
        .collect();

    let mut score_sum = 0.0f64;
    let mut count = 0usize;
    let mut degenerate = 0usize;
    for r in per_seq {
        let (s, c, g) = r?;
        score_sum += s;
        count += c;
        degenerate += g;
    }
    if count == 0 {
        return Err(Error::degenerate(
            "no non-degenerate ablations were measured",
        ));
    }
    Ok(AblationSparsityResult {
        mean_score: score_sum / count as f64,
        per_ablation_count: count,
        skipped_positions: skipped_per_seq * n_seqs,
        degenerate_ablations: degenerate,
        t_future,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_is_exactly_invariant_under_uniform_shift() {
        // integer-valued logit diffs and an integer shift stay bit-exact
        let blocks: Vec<Vec<f32>> = vec![
            vec![1.0, -2.0, 3.0, 0.0, 5.0],
            vec![-1.0, -1.0, 4.0, 2.0, 0.0],
        ];
        let shifted: Vec<Vec<f32>> = blocks
            .iter()
            .map(|b| b.iter().map(|&v| v + 7.0).collect())
            .collect();
        assert_eq!(ablation_score(&blocks), ablation_score(&shifted));
    }

    #[test]
    fn gaussian_blocks_sit_near_two_over_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let blocks: Vec<Vec<f32>> = (0..16)
            .map(|_| {
                (0..256)
                    .map(|_| {
                        let v: f64 = rng.sample(rand_distr::StandardNormal);
                        v as f32
                    })
                    .collect()
            })
            .collect();
        let score = ablation_score(&blocks).unwrap();
        let two_over_pi = 2.0 / std::f64::consts::PI;
        assert!((score - two_over_pi).abs() < 0.05, "score {}", score);
    }

    #[test]
    fn single_spike_is_maximally_sparse() {
        let mut block = vec![0.0f32; 101];
        block[50] = 9.0;
        let score = ablation_score(&[block]).unwrap();
        // one nonzero out of 101: (L1/L2)^2 = 1, normalized ~ 1/101
        assert!((score - 1.0 / 101.0).abs() < 1e-9, "score {}", score);
    }

    #[test]
    fn zero_diffs_are_degenerate() {
        assert_eq!(ablation_score(&[vec![0.0; 8]]), None);
        assert_eq!(ablation_score(&[]), None);
    }

    #[test]
    fn probe_positions_respect_t() {
        assert_eq!(probe_positions(64, 16, 4).len(), 4);
        for p in probe_positions(64, 16, 4) {
            assert!(p + 16 <= 64);
        }
        assert!(probe_positions(8, 16, 4).is_empty());
    }

    #[test]
    fn linear_head_is_rejected() {
        let emb = DenseMatrix::zeros(4, 4);
        let model = SubjectModel::LinearHead(crate::subject::LinearHead {
            d_model: 4,
            vocab: 4,
            max_seq: 8,
            tok_emb: emb.clone(),
            ln_f: crate::subject::LayerNorm {
                gain: vec![1.0; 4],
                bias: vec![0.0; 4],
            },
            unembed: emb,
        });
        let acts = crate::data::ActivationStore::new(4, 8, vec![0.1; 32])
            .unwrap()
            .with_seq_len(8)
            .unwrap();
        let store = SequenceStore::new(8, 4, vec![0; 8], acts).unwrap();
        let err = ablation_sparsity(
            &model,
            &store,
            &AblationTarget::ResidualChannels { count: 2 },
            2,
            1,
            1,
        );
        assert!(err.is_err());
    }
}
