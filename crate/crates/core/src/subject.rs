//! Small pre-LN transformer (inference only) with a residual splice point,
//! plus a linear-head fallback. Used for downstream-loss and ablation
//! metrics: the residual stream at the splice layer can be replaced by an
//! autoencoder reconstruction, by zero, by a reconstruction with one latent
//! ablated at one position, or by arbitrary simulated values.
//!
//! The splice point is the raw residual entering block `splice_layer`;
//! normalization for the autoencoder happens inside the splice
//! (normalize -> encode -> decode -> denormalize).
//!
//! Weight container `SAESUB01`: 8-byte magic, u32 tensor count, then per
//! tensor a u16 name length, the name bytes, a u8 rank, u32 dims, and f32
//! little-endian data. A rank-1 tensor named `config` carries
//! [variant, layers, d_model, heads, vocab, max_seq, splice_layer] so the
//! architecture is self-describing (variant 0 = transformer, 1 = linear head).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autoencoder::{decode, denormalize, encode, normalize_input, AeConfig, AutoencoderParams};
use crate::data::{ActivationStore, SequenceStore};
use crate::error::{Error, Result};
use crate::tensor::{dot, DenseMatrix};

const MAGIC: &[u8; 8] = b"SAESUB01";

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    fn ones(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn apply(&self, x: &[f32], out: &mut Vec<f32>) {
        let d = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + 1e-5).sqrt();
        out.clear();
        out.extend(x.iter().zip(self.gain.iter().zip(&self.bias)).map(
            |(&v, (&g, &b))| ((v as f64 - mean) * inv) as f32 * g + b,
        ));
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
    pub ln2: LayerNorm,
    pub w_mlp_in: DenseMatrix,
    pub b_mlp_in: Vec<f32>,
    pub w_mlp_out: DenseMatrix,
    pub b_mlp_out: Vec<f32>,
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
        as f32
}

#[derive(Debug, Clone)]
pub enum SubjectModel {
    Transformer(Transformer),
    LinearHead(LinearHead),
}

/// Pre-LN causal transformer with learned positional embeddings, GELU MLP of
/// width 4d, and tied unembedding.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub splice_layer: usize,
    pub tok_emb: DenseMatrix,
    pub pos_emb: DenseMatrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Unembedding; tied to `tok_emb` unless loaded otherwise.
    pub unembed: DenseMatrix,
}

/// Zero-block fallback: the residual is the token embedding and effects
/// never reach other positions, so downstream metrics only make sense with
/// a single affected token.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub d_model: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub tok_emb: DenseMatrix,
    pub ln_f: LayerNorm,
    pub unembed: DenseMatrix,
}

/// Weight scales for the random subject fixture. The defaults make a
/// position's perturbation reach later positions with magnitude comparable
/// to its direct logit effect.
#[derive(Debug, Clone, Copy)]
pub struct RandomSubjectGains {
    /// Query/key scale; smaller values flatten the attention pattern.
    pub qk: f64,
    /// Attention output projection scale relative to 1/sqrt(d).
    pub attn_out: f64,
    /// MLP output projection scale relative to 1/sqrt(4d).
    pub mlp_out: f64,
    /// Output scales for blocks before the splice layer; kept weak so the
    /// captured residual stays dominated by the token embedding.
    pub pre_splice_out: f64,
}

impl Default for RandomSubjectGains {
    fn default() -> Self {
        // soft attention with a strong value path: an ablated position's
        // effect reaches the whole future window at magnitude comparable to
        // its direct logit effect, while the direct path stays linear enough
        // to preserve the ablated direction's structure
        RandomSubjectGains {
            qk: 0.3,
            attn_out: 16.0,
            mlp_out: 0.15,
            pre_splice_out: 0.04,
        }
    }
}

/// How to replace the residual stream at the splice layer.
pub enum Splice<'a> {
    Identity,
    Reconstruct(&'a AutoencoderParams, &'a AeConfig),
    Zero,
    /// Reconstruct everywhere, with one latent zeroed at one position.
    ReconstructWithLatentAblated(&'a AutoencoderParams, &'a AeConfig, u32, usize),
    /// Arbitrary per-position replacement of the raw residual.
    Simulated(&'a dyn Fn(usize, &[f32]) -> Result<Vec<f32>>),
}

impl Splice<'_> {
    fn apply(&self, pos: usize, residual: &[f32]) -> Result<Vec<f32>> {
        match self {
            Splice::Identity => Ok(residual.to_vec()),
            Splice::Zero => Ok(vec![0.0; residual.len()]),
            Splice::Reconstruct(ae, cfg) => {
                let (normed, stats) = normalize_input(residual)?;
                let z = encode(ae, cfg, &normed)?;
                let x_hat = decode(ae, &z)?;
                Ok(denormalize(&x_hat, &stats))
            }
            Splice::ReconstructWithLatentAblated(ae, cfg, latent, at_pos) => {
                let (normed, stats) = normalize_input(residual)?;
                let mut z = encode(ae, cfg, &normed)?;
                if pos == *at_pos {
                    if let crate::autoencoder::Latents::Sparse(sv) = &z {
                        let entries: Vec<(u32, f32)> = sv
                            .entries()
                            .iter()
                            .filter(|&&(i, _)| i != *latent)
                            .cloned()
                            .collect();
                        z = crate::autoencoder::Latents::Sparse(crate::tensor::SparseVec::new(
                            sv.dim(),
                            entries,
                        )?);
                    } else if let crate::autoencoder::Latents::Dense(dv) = &mut z {
                        dv[*latent as usize] = 0.0;
                    }
                }
                let x_hat = decode(ae, &z)?;
                Ok(denormalize(&x_hat, &stats))
            }
            Splice::Simulated(f) => f(pos, residual),
        }
    }
}

pub struct ForwardOutput {
    /// Per-position logits, T-by-V.
    pub logits: DenseMatrix,
    /// Raw residuals captured at the splice layer before replacement, T-by-d.
    pub residuals: DenseMatrix,
}

impl SubjectModel {
    pub fn d_model(&self) -> usize {
        match self {
            SubjectModel::Transformer(t) => t.d_model,
            SubjectModel::LinearHead(l) => l.d_model,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            SubjectModel::Transformer(t) => t.vocab,
            SubjectModel::LinearHead(l) => l.vocab,
        }
    }

    pub fn max_seq(&self) -> usize {
        match self {
            SubjectModel::Transformer(t) => t.max_seq,
            SubjectModel::LinearHead(l) => l.max_seq,
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self, SubjectModel::Transformer(_))
    }

    /// Runs the model, replacing the residual at the splice layer according
    /// to `splice`. `limit` optionally truncates computation after that many
    /// positions.
    pub fn forward_with_splice(
        &self,
        tokens: &[u32],
        splice: &Splice,
        limit: Option<usize>,
    ) -> Result<ForwardOutput> {
        match self {
            SubjectModel::Transformer(t) => t.forward_with_splice(tokens, splice, limit),
            SubjectModel::LinearHead(l) => l.forward_with_splice(tokens, splice, limit),
        }
    }

    /// Raw residuals at the splice layer for a token sequence. Computation
    /// stops at the splice layer, so this is much cheaper than a full
    /// forward pass for deep subjects.
    pub fn residuals(&self, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        let residuals = match self {
            SubjectModel::Transformer(t) => t.residuals_at_splice(tokens)?,
            SubjectModel::LinearHead(l) => {
                l.forward_with_splice(tokens, &Splice::Identity, None)?
                    .residuals
            }
        };
        Ok((0..residuals.rows())
            .map(|r| residuals.row(r).to_vec())
            .collect())
    }

    /// Builds a sequence store by running the subject over token sequences.
    pub fn capture(&self, seqs: &[Vec<u32>]) -> Result<SequenceStore> {
        if seqs.is_empty() {
            return Err(Error::invalid("no sequences to capture"));
        }
        let seq_len = seqs[0].len();
        let rows: Vec<Result<Vec<f32>>> = seqs
            .par_iter()
            .map(|tokens| {
                if tokens.len() != seq_len {
                    return Err(Error::invalid("sequences must share a length"));
                }
                let rows = self.residuals(tokens)?;
                Ok(rows.into_iter().flatten().collect())
            })
            .collect();
        let mut data = Vec::with_capacity(seqs.len() * seq_len * self.d_model());
        for r in rows {
            data.extend(r?);
        }
        let acts = ActivationStore::new(self.d_model(), seqs.len() * seq_len, data)?
            .with_seq_len(seq_len)?;
        let tokens: Vec<u32> = seqs.iter().flatten().copied().collect();
        SequenceStore::new(seq_len, self.vocab(), tokens, acts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        match self {
            SubjectModel::Transformer(t) => {
                tensors.push((
                    "config".into(),
                    vec![7],
                    vec![
                        0.0,
                        t.blocks.len() as f32,
                        t.d_model as f32,
                        t.heads as f32,
                        t.vocab as f32,
                        t.max_seq as f32,
                        t.splice_layer as f32,
                    ],
                ));
                tensors.push(("tok_emb".into(), vec![t.vocab, t.d_model], t.tok_emb.data().to_vec()));
                tensors.push(("pos_emb".into(), vec![t.max_seq, t.d_model], t.pos_emb.data().to_vec()));
                tensors.push(("unembed".into(), vec![t.vocab, t.d_model], t.unembed.data().to_vec()));
                tensors.push(("ln_f.gain".into(), vec![t.d_model], t.ln_f.gain.clone()));
                tensors.push(("ln_f.bias".into(), vec![t.d_model], t.ln_f.bias.clone()));
                for (i, b) in t.blocks.iter().enumerate() {
                    let p = |name: &str| format!("block{}.{}", i, name);
                    let d = t.d_model;
                    tensors.push((p("ln1.gain"), vec![d], b.ln1.gain.clone()));
                    tensors.push((p("ln1.bias"), vec![d], b.ln1.bias.clone()));
                    tensors.push((p("w_q"), vec![d, d], b.w_q.data().to_vec()));
                    tensors.push((p("w_k"), vec![d, d], b.w_k.data().to_vec()));
                    tensors.push((p("w_v"), vec![d, d], b.w_v.data().to_vec()));
                    tensors.push((p("w_o"), vec![d, d], b.w_o.data().to_vec()));
                    tensors.push((p("ln2.gain"), vec![d], b.ln2.gain.clone()));
                    tensors.push((p("ln2.bias"), vec![d], b.ln2.bias.clone()));
                    tensors.push((p("w_mlp_in"), vec![4 * d, d], b.w_mlp_in.data().to_vec()));
                    tensors.push((p("b_mlp_in"), vec![4 * d], b.b_mlp_in.clone()));
                    tensors.push((p("w_mlp_out"), vec![d, 4 * d], b.w_mlp_out.data().to_vec()));
                    tensors.push((p("b_mlp_out"), vec![d], b.b_mlp_out.clone()));
                }
            }
            SubjectModel::LinearHead(l) => {
                tensors.push((
                    "config".into(),
                    vec![7],
                    vec![
                        1.0,
                        0.0,
                        l.d_model as f32,
                        1.0,
                        l.vocab as f32,
                        l.max_seq as f32,
                        0.0,
                    ],
                ));
                tensors.push(("tok_emb".into(), vec![l.vocab, l.d_model], l.tok_emb.data().to_vec()));
                tensors.push(("unembed".into(), vec![l.vocab, l.d_model], l.unembed.data().to_vec()));
                tensors.push(("ln_f.gain".into(), vec![l.d_model], l.ln_f.gain.clone()));
                tensors.push(("ln_f.bias".into(), vec![l.d_model], l.ln_f.bias.clone()));
            }
        }

        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, dims, data) in &tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(name_bytes).map_err(io)?;
            w.write_all(&[dims.len() as u8]).map_err(io)?;
            for &dim in dims {
                w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
            }
            let expect: usize = dims.iter().product();
            debug_assert_eq!(expect, data.len());
            for v in data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut offset = 0u64;
        let read_exact = |r: &mut BufReader<File>, buf: &mut [u8], offset: &mut u64| -> Result<()> {
            r.read_exact(buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("truncated: wanted {} more bytes", buf.len()),
                        offset: *offset,
                    }
                } else {
                    Error::io(path, e)
                }
            })?;
            *offset += buf.len() as u64;
            Ok(())
        };

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, &mut offset)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "bad magic, expected SAESUB01".into(),
                offset: 0,
            });
        }
        let mut count_buf = [0u8; 4];
        read_exact(&mut r, &mut count_buf, &mut offset)?;
        let count = u32::from_le_bytes(count_buf) as usize;

        let mut tensors: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
            std::collections::HashMap::new();
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            read_exact(&mut r, &mut len_buf, &mut offset)?;
            let name_len = u16::from_le_bytes(len_buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, &mut offset)?;
            let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                detail: "tensor name is not UTF-8".into(),
                offset,
            })?;
            let mut rank_buf = [0u8; 1];
            read_exact(&mut r, &mut rank_buf, &mut offset)?;
            let mut dims = Vec::with_capacity(rank_buf[0] as usize);
            for _ in 0..rank_buf[0] {
                let mut dim_buf = [0u8; 4];
                read_exact(&mut r, &mut dim_buf, &mut offset)?;
                dims.push(u32::from_le_bytes(dim_buf) as usize);
            }
            let total: usize = dims.iter().product();
            let mut bytes = vec![0u8; total * 4];
            read_exact(&mut r, &mut bytes, &mut offset)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, (dims, data));
        }

        let take = |tensors: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>,
                    name: &str|
         -> Result<(Vec<usize>, Vec<f32>)> {
            tensors.remove(name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: format!("missing tensor '{}'", name),
                offset,
            })
        };

        let (_, config) = take(&mut tensors, "config")?;
        if config.len() != 7 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "config tensor must have 7 entries".into(),
                offset,
            });
        }
        let variant = config[0] as u32;
        let layers = config[1] as usize;
        let d_model = config[2] as usize;
        let heads = config[3] as usize;
        let vocab = config[4] as usize;
        let max_seq = config[5] as usize;
        let splice_layer = config[6] as usize;

        let matrix = |pair: (Vec<usize>, Vec<f32>), rows: usize, cols: usize| -> Result<DenseMatrix> {
            if pair.0 != vec![rows, cols] {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("tensor dims {:?} expected [{}, {}]", pair.0, rows, cols),
                    offset,
                });
            }
            DenseMatrix::from_vec(rows, cols, pair.1)
        };

        let tok_emb = matrix(take(&mut tensors, "tok_emb")?, vocab, d_model)?;
        let unembed = matrix(take(&mut tensors, "unembed")?, vocab, d_model)?;
        let ln_f = LayerNorm {
            gain: take(&mut tensors, "ln_f.gain")?.1,
            bias: take(&mut tensors, "ln_f.bias")?.1,
        };

        if variant == 1 {
            return Ok(SubjectModel::LinearHead(LinearHead {
                d_model,
                vocab,
                max_seq,
                tok_emb,
                ln_f,
                unembed,
            }));
        }

        if splice_layer >= layers {
            return Err(Error::invalid(format!(
                "splice layer {} must be below layer count {}",
                splice_layer, layers
            )));
        }
        let pos_emb = matrix(take(&mut tensors, "pos_emb")?, max_seq, d_model)?;
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = |name: &str| format!("block{}.{}", i, name);
            blocks.push(Block {
                ln1: LayerNorm {
                    gain: take(&mut tensors, &p("ln1.gain"))?.1,
                    bias: take(&mut tensors, &p("ln1.bias"))?.1,
                },
                w_q: matrix(take(&mut tensors, &p("w_q"))?, d_model, d_model)?,
                w_k: matrix(take(&mut tensors, &p("w_k"))?, d_model, d_model)?,
                w_v: matrix(take(&mut tensors, &p("w_v"))?, d_model, d_model)?,
                w_o: matrix(take(&mut tensors, &p("w_o"))?, d_model, d_model)?,
                ln2: LayerNorm {
                    gain: take(&mut tensors, &p("ln2.gain"))?.1,
                    bias: take(&mut tensors, &p("ln2.bias"))?.1,
                },
                w_mlp_in: matrix(take(&mut tensors, &p("w_mlp_in"))?, 4 * d_model, d_model)?,
                b_mlp_in: take(&mut tensors, &p("b_mlp_in"))?.1,
                w_mlp_out: matrix(take(&mut tensors, &p("w_mlp_out"))?, d_model, 4 * d_model)?,
                b_mlp_out: take(&mut tensors, &p("b_mlp_out"))?.1,
            });
        }
        Ok(SubjectModel::Transformer(Transformer {
            d_model,
            heads,
            vocab,
            max_seq,
            splice_layer,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            unembed,
        }))
    }

    /// Randomly initialized transformer fixture. Attention output gains are
    /// sized so that a perturbation at one position propagates to later
    /// positions with magnitude comparable to its direct effect, which makes
    /// the random-direction ablation baseline behave like the theoretical
    /// random-vector case. Embeddings are tied.
    pub fn random(seed: u64, layers: usize, d_model: usize, heads: usize, vocab: usize, max_seq: usize, splice_layer: usize) -> Result<Self> {
        Self::random_with_gains(
            seed,
            layers,
            d_model,
            heads,
            vocab,
            max_seq,
            splice_layer,
            RandomSubjectGains::default(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn random_with_gains(
        seed: u64,
        layers: usize,
        d_model: usize,
        heads: usize,
        vocab: usize,
        max_seq: usize,
        splice_layer: usize,
        gains: RandomSubjectGains,
    ) -> Result<Self> {
        if layers == 0 || splice_layer >= layers {
            return Err(Error::invalid(format!(
                "need splice layer {} below layer count {}",
                splice_layer, layers
            )));
        }
        if d_model % heads != 0 {
            return Err(Error::invalid("d_model must be divisible by heads"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5355424a);
        let mut normal = |rows: usize, cols: usize, scale: f64| -> DenseMatrix {
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    (v * scale) as f32
                })
                .collect();
            DenseMatrix::from_vec(rows, cols, data).expect("sized")
        };
        let d = d_model;
        let tok_emb = normal(vocab, d, 1.0);
        let pos_emb = normal(max_seq, d, 0.3);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let blocks: Vec<Block> = (0..layers)
            .map(|layer| {
                let damp = if layer < splice_layer {
                    gains.pre_splice_out
                } else {
                    1.0
                };
                Block {
                    ln1: LayerNorm::ones(d),
                    w_q: normal(d, d, gains.qk * inv_sqrt_d),
                    w_k: normal(d, d, gains.qk * inv_sqrt_d),
                    w_v: normal(d, d, inv_sqrt_d),
                    w_o: normal(d, d, damp * gains.attn_out * inv_sqrt_d),
                    ln2: LayerNorm::ones(d),
                    w_mlp_in: normal(4 * d, d, inv_sqrt_d),
                    b_mlp_in: vec![0.0; 4 * d],
                    w_mlp_out: normal(d, 4 * d, damp * gains.mlp_out / (4.0 * d as f64).sqrt()),
                    b_mlp_out: vec![0.0; d],
                }
            })
            .collect();
        Ok(SubjectModel::Transformer(Transformer {
            d_model,
            heads,
            vocab,
            max_seq,
            splice_layer,
            tok_emb: tok_emb.clone(),
            pos_emb,
            blocks,
            ln_f: LayerNorm::ones(d),
            unembed: tok_emb,
        }))
    }

    /// Parses `random:SEED:layers,d_model,heads,vocab,seq_len,splice`.
    pub fn parse_spec(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !spec.starts_with("random:") {
            return SubjectModel::load(path);
        }
        let parts: Vec<&str> = spec.splitn(3, ':').collect();
        if parts.len() != 3 {
            return Err(Error::invalid(
                "subject spec must be a path or random:SEED:L,d,heads,vocab,seq,splice",
            ));
        }
        let seed: u64 = parts[1]
            .parse()
            .map_err(|_| Error::invalid(format!("bad subject seed '{}'", parts[1])))?;
        let dims: Vec<usize> = parts[2]
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid(format!("bad subject dims '{}'", parts[2])))?;
        if dims.len() != 6 {
            return Err(Error::invalid(
                "subject dims must be layers,d_model,heads,vocab,seq_len,splice",
            ));
        }
        SubjectModel::random(seed, dims[0], dims[1], dims[2], dims[3], dims[4], dims[5])
    }
}

impl Transformer {
    /// Residual stream entering the splice layer, skipping later blocks.
    fn residuals_at_splice(&self, tokens: &[u32]) -> Result<DenseMatrix> {
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if t_len > self.max_seq {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max {}",
                t_len, self.max_seq
            )));
        }
        let d = self.d_model;
        let mut h = DenseMatrix::zeros(t_len, d);
        for (pos, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.vocab {
                return Err(Error::invalid(format!("token {} out of vocab", tok)));
            }
            let row = h.row_mut(pos);
            for (o, (&e, &p)) in row
                .iter_mut()
                .zip(self.tok_emb.row(tok as usize).iter().zip(self.pos_emb.row(pos)))
            {
                *o = e + p;
            }
        }
        for block in self.blocks.iter().take(self.splice_layer) {
            self.block_forward(block, &mut h)?;
        }
        Ok(h)
    }

    fn forward_with_splice(
        &self,
        tokens: &[u32],
        splice: &Splice,
        limit: Option<usize>,
    ) -> Result<ForwardOutput> {
        let t_len = tokens.len().min(limit.unwrap_or(usize::MAX));
        if t_len == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.max_seq {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max {}",
                tokens.len(),
                self.max_seq
            )));
        }
        let d = self.d_model;
        for &t in &tokens[..t_len] {
            if t as usize >= self.vocab {
                return Err(Error::invalid(format!("token {} out of vocab", t)));
            }
        }

        // residual stream, T x d
        let mut h = DenseMatrix::zeros(t_len, d);
        for (pos, &tok) in tokens[..t_len].iter().enumerate() {
            let row = h.row_mut(pos);
            for (o, (&e, &p)) in row
                .iter_mut()
                .zip(self.tok_emb.row(tok as usize).iter().zip(self.pos_emb.row(pos)))
            {
                *o = e + p;
            }
        }

        let mut captured = DenseMatrix::zeros(t_len, d);
        for (li, block) in self.blocks.iter().enumerate() {
            if li == self.splice_layer {
                captured.data_mut().copy_from_slice(h.data());
                for pos in 0..t_len {
                    let replaced = splice.apply(pos, captured.row(pos))?;
                    if replaced.len() != d {
                        return Err(Error::invalid("splice returned wrong dimension"));
                    }
                    h.row_mut(pos).copy_from_slice(&replaced);
                }
            }
            self.block_forward(block, &mut h)?;
        }

        // final layer norm + unembed
        let mut logits = DenseMatrix::zeros(t_len, self.vocab);
        let mut normed = Vec::with_capacity(d);
        for pos in 0..t_len {
            self.ln_f.apply(h.row(pos), &mut normed);
            let out = logits.row_mut(pos);
            for (v, o) in out.iter_mut().enumerate() {
                *o = dot(&normed, self.unembed.row(v));
            }
        }
        Ok(ForwardOutput {
            logits,
            residuals: captured,
        })
    }

    fn block_forward(&self, block: &Block, h: &mut DenseMatrix) -> Result<()> {
        let t_len = h.rows();
        let d = self.d_model;
        let head_dim = d / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        // attention over ln1(h)
        let mut normed = DenseMatrix::zeros(t_len, d);
        let mut buf = Vec::with_capacity(d);
        for pos in 0..t_len {
            block.ln1.apply(h.row(pos), &mut buf);
            normed.row_mut(pos).copy_from_slice(&buf);
        }
        let mut q = DenseMatrix::zeros(t_len, d);
        let mut k = DenseMatrix::zeros(t_len, d);
        let mut v = DenseMatrix::zeros(t_len, d);
        for pos in 0..t_len {
            let x = normed.row(pos);
            for c in 0..d {
                q.set(pos, c, dot(x, block.w_q.row(c)));
                k.set(pos, c, dot(x, block.w_k.row(c)));
                v.set(pos, c, dot(x, block.w_v.row(c)));
            }
        }
        // attention reads strictly earlier positions; a position's own
        // residual flows forward only through the identity path and the MLP
        let mut attn_out = DenseMatrix::zeros(t_len, d);
        let mut scores = vec![0.0f64; t_len];
        for head in 0..self.heads {
            let lo = head * head_dim;
            let hi = lo + head_dim;
            for pos in 1..t_len {
                let qrow = &q.row(pos)[lo..hi];
                let mut max_s = f64::NEG_INFINITY;
                for (past, s) in scores.iter_mut().enumerate().take(pos) {
                    let krow = &k.row(past)[lo..hi];
                    *s = dot(qrow, krow) as f64 * scale;
                    max_s = max_s.max(*s);
                }
                let mut denom = 0.0f64;
                for s in scores.iter_mut().take(pos) {
                    *s = (*s - max_s).exp();
                    denom += *s;
                }
                let out = attn_out.row_mut(pos);
                for past in 0..pos {
                    let w = (scores[past] / denom) as f32;
                    for (c, o) in out[lo..hi].iter_mut().enumerate() {
                        *o += w * v.get(past, lo + c);
                    }
                }
            }
        }
        // output projection, residual add
        for pos in 0..t_len {
            let a = attn_out.row(pos).to_vec();
            let row = h.row_mut(pos);
            for c in 0..d {
                row[c] += dot(&a, block.w_o.row(c));
            }
        }

        // MLP over ln2(h)
        let hidden = 4 * d;
        let mut act = vec![0.0f32; hidden];
        for pos in 0..t_len {
            block.ln2.apply(h.row(pos), &mut buf);
            for c in 0..hidden {
                act[c] = gelu(dot(&buf, block.w_mlp_in.row(c)) + block.b_mlp_in[c]);
            }
            let row = h.row_mut(pos);
            for c in 0..d {
                row[c] += dot(&act, block.w_mlp_out.row(c)) + block.b_mlp_out[c];
            }
        }
        Ok(())
    }
}

impl LinearHead {
    fn forward_with_splice(
        &self,
        tokens: &[u32],
        splice: &Splice,
        limit: Option<usize>,
    ) -> Result<ForwardOutput> {
        let t_len = tokens.len().min(limit.unwrap_or(usize::MAX));
        if t_len == 0 {
            return Err(Error::invalid("empty token sequence"));
        }
        let d = self.d_model;
        let mut captured = DenseMatrix::zeros(t_len, d);
        let mut logits = DenseMatrix::zeros(t_len, self.vocab);
        let mut normed = Vec::with_capacity(d);
        for (pos, &tok) in tokens[..t_len].iter().enumerate() {
            if tok as usize >= self.vocab {
                return Err(Error::invalid(format!("token {} out of vocab", tok)));
            }
            captured
                .row_mut(pos)
                .copy_from_slice(self.tok_emb.row(tok as usize));
            let replaced = splice.apply(pos, captured.row(pos))?;
            self.ln_f.apply(&replaced, &mut normed);
            let out = logits.row_mut(pos);
            for (v, o) in out.iter_mut().enumerate() {
                *o = dot(&normed, self.unembed.row(v));
            }
        }
        Ok(ForwardOutput {
            logits,
            residuals: captured,
        })
    }
}

/// Cross-entropy of next-token prediction over one sequence's logits.
pub fn next_token_ce(logits: &DenseMatrix, tokens: &[u32]) -> f64 {
    let t_len = logits.rows().min(tokens.len());
    let mut total = 0.0f64;
    let mut count = 0u64;
    for pos in 0..t_len.saturating_sub(1) {
        let row = logits.row(pos);
        let target = tokens[pos + 1] as usize;
        total += -log_softmax_at(row, target);
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

fn log_softmax_at(logits: &[f32], index: usize) -> f64 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let denom: f64 = logits.iter().map(|&v| ((v as f64) - max).exp()).sum();
    (logits[index] as f64 - max) - denom.ln()
}

/// KL(p_clean || p_spliced) for one position.
pub fn kl_divergence(clean: &[f32], spliced: &[f32]) -> f64 {
    let max_c = clean.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let denom_c: f64 = clean.iter().map(|&v| ((v as f64) - max_c).exp()).sum();
    let max_s = spliced.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let denom_s: f64 = spliced.iter().map(|&v| ((v as f64) - max_s).exp()).sum();
    let mut kl = 0.0f64;
    for (&c, &s) in clean.iter().zip(spliced) {
        let log_pc = (c as f64 - max_c) - denom_c.ln();
        let log_ps = (s as f64 - max_s) - denom_s.ln();
        kl += log_pc.exp() * (log_pc - log_ps);
    }
    kl.max(0.0)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DownstreamMetrics {
    /// Mean KL(clean || reconstruct-spliced) per position.
    pub kl: f64,
    /// CE(reconstruct) - CE(clean).
    pub delta_ce: f64,
    pub ce_clean: f64,
    pub ce_spliced: f64,
    pub ce_zero: f64,
    /// (CE(zero) - CE(spliced)) / (CE(zero) - CE(clean)); missing when the
    /// zero and clean baselines coincide.
    pub zero_ablation_fidelity: Option<f64>,
}

/// Downstream KL / delta-CE / fidelity for an autoencoder spliced into the
/// subject, evaluated over the sequences of `store`.
pub fn downstream_metrics(
    model: &SubjectModel,
    ae: &AutoencoderParams,
    cfg: &AeConfig,
    store: &SequenceStore,
) -> Result<DownstreamMetrics> {
    let n_seqs = store.n_seqs();
    if n_seqs == 0 {
        return Err(Error::invalid("empty sequence store"));
    }
    let per_seq: Vec<Result<(f64, f64, f64, f64, u64)>> = (0..n_seqs)
        .into_par_iter()
        .map(|s| {
            let tokens = store.tokens(s);
            let clean = model.forward_with_splice(tokens, &Splice::Identity, None)?;
            let recon = model.forward_with_splice(tokens, &Splice::Reconstruct(ae, cfg), None)?;
            let zero = model.forward_with_splice(tokens, &Splice::Zero, None)?;
            let ce_clean = next_token_ce(&clean.logits, tokens);
            let ce_recon = next_token_ce(&recon.logits, tokens);
            let ce_zero = next_token_ce(&zero.logits, tokens);
            let mut kl = 0.0f64;
            for pos in 0..tokens.len() {
                kl += kl_divergence(clean.logits.row(pos), recon.logits.row(pos));
            }
            Ok((ce_clean, ce_recon, ce_zero, kl, tokens.len() as u64))
        })
        .collect();
    let mut ce_clean = 0.0;
    let mut ce_recon = 0.0;
    let mut ce_zero = 0.0;
    let mut kl = 0.0;
    let mut positions = 0u64;
    for r in per_seq {
        let (c, rn, z, k, p) = r?;
        ce_clean += c;
        ce_recon += rn;
        ce_zero += z;
        kl += k;
        positions += p;
    }
    ce_clean /= n_seqs as f64;
    ce_recon /= n_seqs as f64;
    ce_zero /= n_seqs as f64;
    kl /= positions as f64;
    let denom = ce_zero - ce_clean;
    let fidelity = if denom.abs() < 1e-9 {
        None
    } else {
        Some((ce_zero - ce_recon) / denom)
    };
    Ok(DownstreamMetrics {
        kl,
        delta_ce: ce_recon - ce_clean,
        ce_clean,
        ce_spliced: ce_recon,
        ce_zero,
        zero_ablation_fidelity: fidelity,
    })
}

/// Builds an autoencoder that reconstructs any input exactly: 2d latents
/// whose decoder rows are +/- the coordinate directions, encoder tied,
/// k = d. TopK then selects |x_i| for every coordinate.
pub fn perfect_autoencoder(d: usize) -> (AutoencoderParams, AeConfig) {
    let n = 2 * d;
    let mut w = DenseMatrix::zeros(n, d);
    for i in 0..d {
        w.set(i, i, 1.0);
        w.set(d + i, i, -1.0);
    }
    let params = AutoencoderParams {
        n,
        d,
        w_enc: w.clone(),
        b_enc: None,
        w_dec_t: w,
        b_pre: vec![0.0; d],
    };
    let cfg = AeConfig::topk(n, d);
    (params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_tokens(seed: u64, vocab: usize, len: usize) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
    }

    fn demo_subject(seed: u64) -> SubjectModel {
        SubjectModel::random(seed, 2, 16, 2, 32, 24, 1).unwrap()
    }

    #[test]
    fn identity_splice_is_bitwise_plain_forward() {
        let model = demo_subject(1);
        let tokens = demo_tokens(2, 32, 12);
        let a = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        let b = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        // simulated splice that returns the residual unchanged also matches
        let passthrough = |_pos: usize, r: &[f32]| Ok(r.to_vec());
        let c = model
            .forward_with_splice(&tokens, &Splice::Simulated(&passthrough), None)
            .unwrap();
        assert_eq!(a.logits.data(), c.logits.data());
    }

    #[test]
    fn causal_masking_holds() {
        let model = demo_subject(3);
        let mut tokens = demo_tokens(4, 32, 10);
        let a = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        tokens[9] = (tokens[9] + 1) % 32;
        let b = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        for pos in 0..9 {
            assert_eq!(a.logits.row(pos), b.logits.row(pos), "position {}", pos);
        }
        assert_ne!(a.logits.row(9), b.logits.row(9));
    }

    #[test]
    fn perfect_autoencoder_reproduces_logits() {
        let model = demo_subject(5);
        let tokens = demo_tokens(6, 32, 16);
        let clean = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        let (ae, cfg) = perfect_autoencoder(16);
        let spliced = model
            .forward_with_splice(&tokens, &Splice::Reconstruct(&ae, &cfg), None)
            .unwrap();
        for pos in 0..tokens.len() {
            for v in 0..32 {
                let a = clean.logits.get(pos, v);
                let b = spliced.logits.get(pos, v);
                assert!((a - b).abs() < 1e-4, "pos {} vocab {}: {} vs {}", pos, v, a, b);
            }
        }
    }

    #[test]
    fn zero_splice_changes_logits() {
        let model = demo_subject(7);
        let tokens = demo_tokens(8, 32, 16);
        let clean = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        let zero = model.forward_with_splice(&tokens, &Splice::Zero, None).unwrap();
        assert_ne!(clean.logits.data(), zero.logits.data());
    }

    #[test]
    fn downstream_metrics_for_perfect_and_zero() {
        let model = demo_subject(9);
        let seqs: Vec<Vec<u32>> = (0..6).map(|i| demo_tokens(10 + i, 32, 16)).collect();
        let store = model.capture(&seqs).unwrap();
        let (ae, cfg) = perfect_autoencoder(16);
        let m = downstream_metrics(&model, &ae, &cfg, &store).unwrap();
        assert!(m.kl.abs() < 1e-6, "kl {}", m.kl);
        assert!(m.delta_ce.abs() < 1e-6, "delta_ce {}", m.delta_ce);
        if let Some(f) = m.zero_ablation_fidelity {
            assert!((f - 1.0).abs() < 1e-4, "fidelity {}", f);
        }
        assert!(m.kl >= 0.0);
    }

    #[test]
    fn subject_round_trip_through_container() {
        let model = demo_subject(11);
        let dir = std::env::temp_dir().join("sae_core_subject_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.saesub");
        model.save(&path).unwrap();
        let back = SubjectModel::load(&path).unwrap();
        let tokens = demo_tokens(12, 32, 10);
        let a = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        let b = back.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.residuals.data(), b.residuals.data());
    }

    #[test]
    fn linear_head_round_trip_and_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let emb_data: Vec<f32> = (0..32 * 8)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v as f32
            })
            .collect();
        let emb = DenseMatrix::from_vec(32, 8, emb_data).unwrap();
        let model = SubjectModel::LinearHead(LinearHead {
            d_model: 8,
            vocab: 32,
            max_seq: 16,
            tok_emb: emb.clone(),
            ln_f: LayerNorm::ones(8),
            unembed: emb,
        });
        let dir = std::env::temp_dir().join("sae_core_subject_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("lh.saesub");
        model.save(&path).unwrap();
        let back = SubjectModel::load(&path).unwrap();
        assert!(!back.is_transformer());
        let tokens = demo_tokens(22, 32, 8);
        let a = model.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        let b = back.forward_with_splice(&tokens, &Splice::Identity, None).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        // residual is exactly the token embedding
        for (pos, &tok) in tokens.iter().enumerate() {
            assert_eq!(a.residuals.row(pos), back.residuals(&tokens).unwrap()[pos]);
            let want = match &model {
                SubjectModel::LinearHead(l) => l.tok_emb.row(tok as usize),
                _ => unreachable!(),
            };
            assert_eq!(a.residuals.row(pos), want);
        }
    }

    #[test]
    fn spec_parser_accepts_random_subjects() {
        let m = SubjectModel::parse_spec("random:42:2,16,2,32,24,1").unwrap();
        assert!(m.is_transformer());
        assert_eq!(m.vocab(), 32);
        assert!(SubjectModel::parse_spec("random:42:2,16").is_err());
        assert!(SubjectModel::parse_spec("random:x:2,16,2,32,24,1").is_err());
    }

    #[test]
    fn vocab_overflow_is_rejected() {
        let model = demo_subject(31);
        let err = model.forward_with_splice(&[99], &Splice::Identity, None);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
