//! N2G-style explanations: collections of token n-grams with wildcards and
//! absolute-position anchors, built from contexts that activate a latent.
//!
//! Building an explanation re-evaluates the latent on truncated and padded
//! contexts, which requires recomputing residuals for modified token
//! sequences; anything that can map tokens to splice-layer residuals (a
//! subject model, or a synthetic fixture) can serve via [`ResidualSource`].

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autoencoder::{decode, denormalize, encode, normalize_input, AeConfig, AutoencoderParams, Latents};
use crate::data::SequenceStore;
use crate::error::{Error, Result};
use crate::subject::{next_token_ce, Splice, SubjectModel};
use crate::tensor::SparseVec;

/// Maps token sequences to splice-layer residual rows.
pub trait ResidualSource: Sync {
    fn residuals(&self, tokens: &[u32]) -> Result<Vec<Vec<f32>>>;
}

impl ResidualSource for SubjectModel {
    fn residuals(&self, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        SubjectModel::residuals(self, tokens)
    }
}

/// One n-gram pattern: `tokens` align with the suffix ending at the
/// activating position, `None` entries are wildcards. An anchored pattern
/// additionally requires the activating position to equal `anchor`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct NgramPattern {
    pub tokens: Vec<Option<u32>>,
    pub anchor: Option<usize>,
    /// Simulated activation value when the pattern matches.
    pub value: f32,
}

impl NgramPattern {
    fn matches(&self, tokens: &[u32], pos: usize) -> bool {
        let len = self.tokens.len();
        if len > pos + 1 {
            return false;
        }
        if let Some(anchor) = self.anchor {
            if pos != anchor {
                return false;
            }
        }
        let start = pos + 1 - len;
        self.tokens
            .iter()
            .zip(&tokens[start..=pos])
            .all(|(pat, &tok)| pat.map_or(true, |p| p == tok))
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct N2GExplanation {
    pub latent: u32,
    pub patterns: Vec<NgramPattern>,
    /// Least-squares scale applied to simulated values downstream.
    pub scale: f32,
}

impl N2GExplanation {
    pub fn empty(latent: u32) -> Self {
        N2GExplanation {
            latent,
            patterns: Vec::new(),
            scale: 1.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// Simulated raw value at a position: the largest value over matching
    /// patterns, 0 when none match.
    pub fn simulate(&self, tokens: &[u32], pos: usize) -> f32 {
        self.patterns
            .iter()
            .filter(|p| p.matches(tokens, pos))
            .map(|p| p.value)
            .fold(0.0f32, f32::max)
    }
}

/// Value of one latent after the sparse activation, given a residual row.
pub fn latent_activation(
    ae: &AutoencoderParams,
    cfg: &AeConfig,
    residual: &[f32],
    latent: u32,
) -> Result<f32> {
    let (normed, _) = normalize_input(residual)?;
    let z = encode(ae, cfg, &normed)?;
    Ok(z.value(latent as usize))
}

fn activation_on_context(
    source: &dyn ResidualSource,
    ae: &AutoencoderParams,
    cfg: &AeConfig,
    ctx: &[u32],
    latent: u32,
) -> Result<f32> {
    let rows = source.residuals(ctx)?;
    let last = rows.last().ok_or_else(|| Error::invalid("empty context"))?;
    latent_activation(ae, cfg, last, latent)
}

/// Positions where the latent fires in the store, with activation values.
pub fn activating_positions(
    store: &SequenceStore,
    ae: &AutoencoderParams,
    cfg: &AeConfig,
    latent: u32,
) -> Result<Vec<(usize, usize, f32)>> {
    let per_seq: Vec<Result<Vec<(usize, usize, f32)>>> = (0..store.n_seqs())
        .into_par_iter()
        .map(|s| {
            let mut hits = Vec::new();
            for pos in 0..store.seq_len() {
                let v = latent_activation(ae, cfg, store.activation_row(s, pos), latent)?;
                if v > 0.0 {
                    hits.push((s, pos, v));
                }
            }
            Ok(hits)
        })
        .collect();
    let mut out = Vec::new();
    for h in per_seq {
        out.extend(h?);
    }
    Ok(out)
}

/// Builds an explanation from up to `max_samples` activating contexts: for
/// each one, find the shortest suffix keeping at least half the original
/// activation, wildcard positions where a pad substitution keeps half, and
/// anchor the pattern when a front pad insertion kills it.
#[allow(clippy::too_many_arguments)]
pub fn n2g_build(
    latent: u32,
    store: &SequenceStore,
    source: &dyn ResidualSource,
    ae: &AutoencoderParams,
    cfg: &AeConfig,
    pad_token: u32,
    seed: u64,
    max_samples: usize,
) -> Result<N2GExplanation> {
    let mut hits = activating_positions(store, ae, cfg, latent)?;
    if hits.is_empty() {
        return Ok(N2GExplanation::empty(latent));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e3267);
    hits.shuffle(&mut rng);
    hits.truncate(max_samples);

    let built: Vec<Result<NgramPattern>> = hits
        .par_iter()
        .map(|&(s, pos, a0)| {
            let tokens = store.tokens(s);
            let threshold = a0 / 2.0;
            // shortest suffix that still reaches half strength
            let mut chosen = pos + 1;
            for len in 1..=pos + 1 {
                let ctx = &tokens[pos + 1 - len..=pos];
                if activation_on_context(source, ae, cfg, ctx, latent)? >= threshold {
                    chosen = len;
                    break;
                }
            }
            let suffix: Vec<u32> = tokens[pos + 1 - chosen..=pos].to_vec();
            // wildcard any position that survives pad substitution
            let mut pattern: Vec<Option<u32>> = suffix.iter().map(|&t| Some(t)).collect();
            for j in 0..chosen {
                let mut padded = suffix.clone();
                padded[j] = pad_token;
                if activation_on_context(source, ae, cfg, &padded, latent)? >= threshold {
                    pattern[j] = None;
                }
            }
            // absolute-position dependence: does a front pad matter?
            let mut shifted = Vec::with_capacity(chosen + 1);
            shifted.push(pad_token);
            shifted.extend_from_slice(&suffix);
            let anchored =
                activation_on_context(source, ae, cfg, &shifted, latent)? < threshold;
            Ok(NgramPattern {
                tokens: pattern,
                anchor: if anchored { Some(pos) } else { None },
                value: a0,
            })
        })
        .collect();

    let mut patterns: Vec<NgramPattern> = Vec::new();
    for p in built {
        let p = p?;
        match patterns
            .iter_mut()
            .find(|q| q.tokens == p.tokens && q.anchor == p.anchor)
        {
            Some(q) => q.value = q.value.max(p.value),
            None => patterns.push(p),
        }
    }
    Ok(N2GExplanation {
        latent,
        patterns,
        scale: 1.0,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct N2GScores {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

/// Recall over up to `recall_samples` held-out activating contexts and
/// precision over every predicted-positive position in the held-out store.
pub fn n2g_scores(
    expl: &N2GExplanation,
    heldout: &SequenceStore,
    ae: &AutoencoderParams,
    cfg: &AeConfig,
    seed: u64,
    recall_samples: usize,
) -> Result<N2GScores> {
    let mut hits = activating_positions(heldout, ae, cfg, expl.latent)?;
    let recall = if hits.is_empty() {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x726563);
        hits.shuffle(&mut rng);
        hits.truncate(recall_samples);
        let found = hits
            .iter()
            .filter(|&&(s, pos, _)| expl.simulate(heldout.tokens(s), pos) > 0.0)
            .count();
        Some(found as f64 / hits.len() as f64)
    };

    // precision: scan the whole held-out store for predicted positives
    let per_seq: Vec<Result<(u64, u64)>> = (0..heldout.n_seqs())
        .into_par_iter()
        .map(|s| {
            let tokens = heldout.tokens(s);
            let mut predicted = 0u64;
            let mut correct = 0u64;
            for pos in 0..heldout.seq_len() {
                if expl.simulate(tokens, pos) > 0.0 {
                    predicted += 1;
                    let v =
                        latent_activation(ae, cfg, heldout.activation_row(s, pos), expl.latent)?;
                    if v > 0.0 {
                        correct += 1;
                    }
                }
            }
            Ok((predicted, correct))
        })
        .collect();
    let mut predicted = 0u64;
    let mut correct = 0u64;
    for r in per_seq {
        let (p, c) = r?;
        predicted += p;
        correct += c;
    }
    let precision = if predicted == 0 {
        None
    } else {
        Some(correct as f64 / predicted as f64)
    };
    let f1 = match (recall, precision) {
        (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
        _ => None,
    };
    Ok(N2GScores {
        recall,
        precision,
        f1,
    })
}

/// Least-squares scale `E[s a] / E[s^2]` between simulated and true values
/// over a training store. Returns 0 (flagged by the caller) when the
/// simulation never fires.
pub fn n2g_simulate_scale(
    expl: &N2GExplanation,
    store: &SequenceStore,
    ae: &AutoencoderParams,
    cfg: &AeConfig,
) -> Result<f32> {
    let mut num = 0.0f64;
    let mut denom = 0.0f64;
    for s in 0..store.n_seqs() {
        let tokens = store.tokens(s);
        for pos in 0..store.seq_len() {
            let sim = expl.simulate(tokens, pos) as f64;
            if sim != 0.0 {
                let a =
                    latent_activation(ae, cfg, store.activation_row(s, pos), expl.latent)? as f64;
                num += sim * a;
                denom += sim * sim;
            }
        }
    }
    if denom == 0.0 {
        Ok(0.0)
    } else {
        Ok((num / denom) as f32)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ExplanationReconstruction {
    pub ce_explained: f64,
    pub ce_clean: f64,
    pub ce_reconstruct: f64,
    pub ce_zero: f64,
}

/// Downstream CE when latents are replaced by scaled simulated values and
/// decoded, compared against the identity, reconstruct, and zero splices.
/// Latents without an explanation simulate 0.
pub fn explanation_reconstruction(
    ae: &AutoencoderParams,
    cfg: &AeConfig,
    explanations: &[N2GExplanation],
    subject: &SubjectModel,
    store: &SequenceStore,
) -> Result<ExplanationReconstruction> {
    let mut by_latent: Vec<Option<&N2GExplanation>> = vec![None; ae.n];
    for e in explanations {
        if (e.latent as usize) < ae.n {
            by_latent[e.latent as usize] = Some(e);
        }
    }
    let per_seq: Vec<Result<(f64, f64, f64, f64)>> = (0..store.n_seqs())
        .into_par_iter()
        .map(|s| {
            let tokens = store.tokens(s).to_vec();
            let simulate = |pos: usize, residual: &[f32]| -> Result<Vec<f32>> {
                let (_, stats) = normalize_input(residual)?;
                let mut entries: Vec<(u32, f32)> = Vec::new();
                for (i, e) in by_latent.iter().enumerate() {
                    if let Some(e) = e {
                        let sim = e.simulate(&tokens, pos);
                        if sim > 0.0 {
                            entries.push((i as u32, e.scale * sim));
                        }
                    }
                }
                let z = Latents::Sparse(SparseVec::new(ae.n, entries)?);
                let x_hat = decode(ae, &z)?;
                Ok(denormalize(&x_hat, &stats))
            };
            let explained = subject.forward_with_splice(&tokens, &Splice::Simulated(&simulate), None)?;
            let clean = subject.forward_with_splice(&tokens, &Splice::Identity, None)?;
            let recon = subject.forward_with_splice(&tokens, &Splice::Reconstruct(ae, cfg), None)?;
            let zero = subject.forward_with_splice(&tokens, &Splice::Zero, None)?;
            Ok((
                next_token_ce(&explained.logits, &tokens),
                next_token_ce(&clean.logits, &tokens),
                next_token_ce(&recon.logits, &tokens),
                next_token_ce(&zero.logits, &tokens),
            ))
        })
        .collect();
    let mut acc = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let count = per_seq.len() as f64;
    for r in per_seq {
        let (a, b, c, d) = r?;
        acc = (acc.0 + a, acc.1 + b, acc.2 + c, acc.3 + d);
    }
    Ok(ExplanationReconstruction {
        ce_explained: acc.0 / count,
        ce_clean: acc.1 / count,
        ce_reconstruct: acc.2 / count,
        ce_zero: acc.3 / count,
    })
}
