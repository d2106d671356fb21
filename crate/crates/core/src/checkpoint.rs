//! Checkpoint container, format `SAECKPT1`.
//!
//! Layout: 8-byte magic `SAECKPT1`, u32 little-endian JSON header length,
//! UTF-8 JSON header, then raw little-endian f32 tensor payloads in the
//! order listed by the header's `tensors` manifest.
//!
//! The fixed leading tensors are `w_enc` (n-by-d row-major), `b_enc`
//! (length n, zero-length when absent), `w_dec` (d-by-n row-major), and
//! `b_pre` (length d). Optional trailing tensors carry EMA accumulators and
//! Adam moments, flagged in the header. EMA tensors are the raw geometric
//! accumulators `S_t = c*S_{t-1} + p_t`; the debiased average is
//! `S_t * (1-c) / (1-c^step)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeConfig, AutoencoderParams};
use crate::error::{Error, Result};
use crate::optimizer::EmaState;
use crate::tensor::DenseMatrix;

const MAGIC: &[u8; 8] = b"SAECKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    n: usize,
    d: usize,
    activation: crate::autoencoder::Activation,
    k: usize,
    config: AeConfig,
    step: u64,
    tokens_seen: u64,
    has_b_enc: bool,
    ema: Option<EmaMeta>,
    adam: Option<AdamMeta>,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmaMeta {
    coeff: f32,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    step: u64,
    skipped_steps: u64,
    beta1: f32,
    beta2: f32,
    eps: f32,
    lr: f32,
}

/// Adam moments in checkpoint order: one (m, v) pair per parameter tensor
/// (w_enc, b_enc if present, w_dec, b_pre).
#[derive(Debug, Clone)]
pub struct AdamSnapshot {
    pub step: u64,
    pub skipped_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub lr: f32,
    pub moments: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: AutoencoderParams,
    pub config: AeConfig,
    pub step: u64,
    pub tokens_seen: u64,
    /// EMA accumulators over (w_enc, b_enc if present, w_dec_t, b_pre).
    pub ema: Option<EmaState>,
    pub adam: Option<AdamSnapshot>,
}

impl Checkpoint {
    /// Bias-corrected EMA parameters, if an EMA was tracked.
    pub fn ema_params(&self) -> Option<AutoencoderParams> {
        let ema = self.ema.as_ref()?;
        if ema.step == 0 {
            return None;
        }
        let tensors = ema.read();
        let p = &self.params;
        let mut it = tensors.into_iter();
        let w_enc = it.next()?;
        let b_enc = if p.b_enc.is_some() { Some(it.next()?) } else { None };
        let w_dec = it.next()?;
        let b_pre = it.next()?;
        Some(AutoencoderParams {
            n: p.n,
            d: p.d,
            w_enc: DenseMatrix::from_vec(p.n, p.d, w_enc).ok()?,
            b_enc,
            w_dec_t: DenseMatrix::from_vec(p.n, p.d, w_dec).ok()?,
            b_pre,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.params;
        let mut tensors = vec![
            TensorMeta {
                name: "w_enc".into(),
                dims: vec![p.n, p.d],
            },
            TensorMeta {
                name: "b_enc".into(),
                dims: vec![if p.b_enc.is_some() { p.n } else { 0 }],
            },
            TensorMeta {
                name: "w_dec".into(),
                dims: vec![p.d, p.n],
            },
            TensorMeta {
                name: "b_pre".into(),
                dims: vec![p.d],
            },
        ];
        if let Some(ema) = &self.ema {
            for (i, acc) in ema.accumulators().iter().enumerate() {
                tensors.push(TensorMeta {
                    name: format!("ema_{}", i),
                    dims: vec![acc.len()],
                });
            }
        }
        if let Some(adam) = &self.adam {
            for (i, (m, v)) in adam.moments.iter().enumerate() {
                tensors.push(TensorMeta {
                    name: format!("adam_m_{}", i),
                    dims: vec![m.len()],
                });
                tensors.push(TensorMeta {
                    name: format!("adam_v_{}", i),
                    dims: vec![v.len()],
                });
            }
        }
        let header = Header {
            version: 1,
            n: p.n,
            d: p.d,
            activation: self.config.activation,
            k: self.config.k,
            config: self.config.clone(),
            step: self.step,
            tokens_seen: self.tokens_seen,
            has_b_enc: p.b_enc.is_some(),
            ema: self.ema.as_ref().map(|e| EmaMeta {
                coeff: e.coeff,
                step: e.step,
            }),
            adam: self.adam.as_ref().map(|a| AdamMeta {
                step: a.step,
                skipped_steps: a.skipped_steps,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                lr: a.lr,
            }),
            tensors,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Config(format!("header serialization failed: {}", e)))?;

        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&header_bytes).map_err(io)?;

        let mut write_f32s = |vals: &[f32]| -> Result<()> {
            let mut bytes = Vec::with_capacity(vals.len() * 4);
            for v in vals {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes).map_err(|e| Error::io(path, e))
        };

        write_f32s(p.w_enc.data())?;
        if let Some(b_enc) = &p.b_enc {
            write_f32s(b_enc)?;
        }
        // decoder is serialized in the conventional d-by-n layout
        write_f32s(p.w_dec_t.transposed().data())?;
        write_f32s(&p.b_pre)?;
        if let Some(ema) = &self.ema {
            for acc in ema.accumulators() {
                write_f32s(acc)?;
            }
        }
        if let Some(adam) = &self.adam {
            for (m, v) in &adam.moments {
                write_f32s(m)?;
                write_f32s(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut offset = 0u64;
        let fmt = |detail: String, offset: u64| Error::Format {
            path: path.to_path_buf(),
            detail,
            offset,
        };
        let read_exact = |r: &mut BufReader<File>, buf: &mut [u8], offset: &mut u64| -> Result<()> {
            r.read_exact(buf).map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    fmt(format!("truncated: wanted {} more bytes", buf.len()), *offset)
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
            return Err(fmt("bad magic, expected SAECKPT1".into(), 0));
        }
        let mut len_buf = [0u8; 4];
        read_exact(&mut r, &mut len_buf, &mut offset)?;
        let header_len = u32::from_le_bytes(len_buf) as usize;
        let mut header_bytes = vec![0u8; header_len];
        read_exact(&mut r, &mut header_bytes, &mut offset)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| fmt(format!("bad JSON header: {}", e), 12))?;

        let read_f32s = |r: &mut BufReader<File>, count: usize, offset: &mut u64| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; count * 4];
            read_exact(r, &mut bytes, offset)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let mut payloads = Vec::with_capacity(header.tensors.len());
        for meta in &header.tensors {
            let count: usize = meta.dims.iter().product::<usize>();
            payloads.push(read_f32s(&mut r, count, &mut offset)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(fmt("trailing bytes after declared tensors".into(), offset));
        }

        let mut it = payloads.into_iter();
        let w_enc = DenseMatrix::from_vec(header.n, header.d, it.next().ok_or_else(|| fmt("missing w_enc".into(), offset))?)?;
        let b_enc_data = it.next().ok_or_else(|| fmt("missing b_enc".into(), offset))?;
        let b_enc = if header.has_b_enc {
            if b_enc_data.len() != header.n {
                return Err(fmt("b_enc length mismatch".into(), offset));
            }
            Some(b_enc_data)
        } else {
            if !b_enc_data.is_empty() {
                return Err(fmt("unexpected b_enc payload".into(), offset));
            }
            None
        };
        let w_dec = DenseMatrix::from_vec(header.d, header.n, it.next().ok_or_else(|| fmt("missing w_dec".into(), offset))?)?;
        let b_pre = it.next().ok_or_else(|| fmt("missing b_pre".into(), offset))?;
        if b_pre.len() != header.d {
            return Err(fmt("b_pre length mismatch".into(), offset));
        }

        let params = AutoencoderParams {
            n: header.n,
            d: header.d,
            w_enc,
            b_enc,
            w_dec_t: w_dec.transposed(),
            b_pre,
        };
        params.validate()?;

        let ema = if let Some(meta) = &header.ema {
            let count = if header.has_b_enc { 4 } else { 3 };
            let mut accs = Vec::with_capacity(count);
            for _ in 0..count {
                accs.push(it.next().ok_or_else(|| fmt("missing ema tensor".into(), offset))?);
            }
            Some(EmaState::from_accumulators(meta.coeff, meta.step, accs))
        } else {
            None
        };
        let adam = if let Some(meta) = &header.adam {
            let count = if header.has_b_enc { 4 } else { 3 };
            let mut moments = Vec::with_capacity(count);
            for _ in 0..count {
                let m = it.next().ok_or_else(|| fmt("missing adam moment".into(), offset))?;
                let v = it.next().ok_or_else(|| fmt("missing adam moment".into(), offset))?;
                moments.push((m, v));
            }
            Some(AdamSnapshot {
                step: meta.step,
                skipped_steps: meta.skipped_steps,
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
                lr: meta.lr,
                moments,
            })
        } else {
            None
        };

        Ok(Checkpoint {
            params,
            config: header.config,
            step: header.step,
            tokens_seen: header.tokens_seen,
            ema,
            adam,
        })
    }
}
