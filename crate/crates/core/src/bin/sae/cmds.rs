//! Subcommand implementations. Every run creates the output directory,
//! writes `resolved-config.json`, and emits CSV/JSON (and SVG for `report`)
//! artifacts that are deterministic for fixed (config, seed, inputs), with
//! the one exception of wall-clock columns.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sae_core::autoencoder::{
    decode, encode, normalize_input, preactivations, AeConfig,
};
use sae_core::checkpoint::Checkpoint;
use sae_core::data::{
    gen_dictionary_data, gen_gaussian, split_point, ActivationStore, DictDataConfig, ProbeTask,
    SequenceStore, TokenStore,
};
use sae_core::error::{Error, Result};
use sae_core::eval::{
    ablation_sparsity, density_stats, explanation_reconstruction, mse_by_position, n2g_build,
    n2g_scores, n2g_simulate_scale, probe_metric, refine_activations, test_time_jumprelu,
    test_time_topk, AblationTarget,
};
use sae_core::plot::{render_plot, PlotSpec, Series};
use sae_core::scaling::{fit_joint, fit_power_law, run_sweep, SweepTable};
use sae_core::subject::{downstream_metrics, SubjectModel};
use sae_core::tensor::{dense_sparse_matmul_t, count_flops, DenseMatrix, KernelOp, SparseVec};
use sae_core::trainer::{train as run_train, TrainConfig};

use crate::config::{DataSpec, MetricsConfig, RunConfig};
use crate::Common;

fn ensure_out(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing {}: {}", name, e)))?;
    write_text(dir, name, &(text + "\n"))
}

/// Loads the run config (if any) and applies flag overrides.
fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if common.data.is_some() || common.tokens.is_some() || !common.labels.is_empty() {
        let data = cfg.data.get_or_insert(DataSpec {
            path: None,
            tokens: None,
            labels: Vec::new(),
            synthetic: None,
        });
        if let Some(p) = &common.data {
            data.path = Some(p.clone());
        }
        if let Some(t) = &common.tokens {
            data.tokens = Some(t.clone());
        }
        if !common.labels.is_empty() {
            data.labels = common.labels.clone();
        }
    }
    if let Some(s) = &common.subject {
        cfg.subject = Some(s.clone());
    }
    if let Some(ae) = cfg.ae.as_mut() {
        if let Some(n) = common.n {
            ae.n = n;
        }
        if let Some(k) = common.k {
            ae.k = k;
        }
    } else if common.n.is_some() || common.k.is_some() {
        let n = common.n.ok_or_else(|| {
            Error::Config("--k without --n requires an ae section in the config".to_string())
        })?;
        let k = common.k.unwrap_or(n / 16).max(1);
        cfg.ae = Some(AeConfig::topk(n, k));
    }
    if let Some(tc) = cfg.train.as_mut() {
        if let Some(lr) = common.lr {
            tc.lr = lr;
            tc.lr_rule = None;
        }
        if let Some(b) = common.batch {
            tc.batch_size = b;
        }
        if let Some(t) = common.budget_tokens {
            tc.token_budget = t;
        }
        if let Some(s) = common.seed {
            tc.seed = s;
        }
    } else if common.budget_tokens.is_some() {
        let mut tc = TrainConfig::new(
            common.budget_tokens.unwrap(),
            common.lr.unwrap_or(1e-3),
            common.seed.unwrap_or(0),
        );
        if let Some(b) = common.batch {
            tc.batch_size = b;
        }
        cfg.train = Some(tc);
    }
    Ok(cfg)
}

fn write_resolved(common: &Common, cfg: &RunConfig) -> Result<()> {
    ensure_out(common)?;
    cfg.save(&common.out.join("resolved-config.json"))
}

fn seed_of(common: &Common, cfg: &RunConfig) -> u64 {
    common
        .seed
        .or_else(|| cfg.train.as_ref().map(|t| t.seed))
        .unwrap_or(0)
}

/// Validation-split rows of a store, normalized, capped at `max_rows`.
fn validation_rows(store: &ActivationStore, max_rows: usize) -> Result<Vec<Vec<f32>>> {
    let sp = split_point(store.rows());
    let count = (store.rows() - sp).min(max_rows);
    let mut rows = Vec::with_capacity(count);
    for r in sp..sp + count {
        rows.push(normalize_input(store.row(r))?.0);
    }
    Ok(rows)
}

/// Builds the sequence store for subject-based metrics: reads the token
/// file, then either aligns an activation file with it or captures residuals
/// by running the subject.
fn sequence_store(_common: &Common, cfg: &RunConfig) -> Result<(SequenceStore, SubjectModel)> {
    let spec = cfg
        .subject
        .as_ref()
        .ok_or_else(|| Error::Config("subject-based metrics need --subject".to_string()))?;
    let subject = SubjectModel::parse_spec(spec)?;
    let data = cfg.data.as_ref();
    let tokens_path = data
        .and_then(|d| d.tokens.clone())
        .ok_or_else(|| Error::Config("subject-based metrics need --tokens".to_string()))?;
    let tok = TokenStore::load(&tokens_path)?;
    if let Some(act_path) = data.and_then(|d| d.path.clone()) {
        let acts = ActivationStore::load(&act_path)?;
        if acts.seq_len() == tok.seq_len && acts.rows() == tok.tokens.len() {
            let store = SequenceStore::new(tok.seq_len, tok.vocab, tok.tokens.clone(), acts)?;
            return Ok((store, subject));
        }
        eprintln!(
            "note: activation file does not align with the token file; capturing residuals from the subject"
        );
    }
    let seqs: Vec<Vec<u32>> = (0..tok.n_seqs())
        .map(|s| tok.tokens[s * tok.seq_len..(s + 1) * tok.seq_len].to_vec())
        .collect();
    let store = subject.capture(&seqs)?;
    Ok((store, subject))
}

fn metrics_config(cfg: &RunConfig) -> MetricsConfig {
    cfg.metrics.clone().unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
pub fn gen_data(
    common: &Common,
    kind: &str,
    rows: usize,
    d: usize,
    n_true: usize,
    k_true: usize,
    sigma: f32,
    n_seqs: usize,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let seed = seed_of(common, &cfg);
    ensure_out(common)?;
    match kind {
        "gaussian" => {
            let store = gen_gaussian(d, rows, seed)?;
            store.save(&common.out.join("data.actdump"))?;
            println!("wrote {} rows of {}-d gaussian data", rows, d);
        }
        "dictionary" => {
            let dcfg = DictDataConfig {
                d,
                n_true,
                k_true,
                value_range: (0.5, 1.5),
                noise_sigma: sigma,
                seed,
            };
            let (store, truth) = gen_dictionary_data(&dcfg, rows)?;
            store.save(&common.out.join("data.actdump"))?;
            let dict_store = ActivationStore::new(
                d,
                n_true,
                truth.dictionary.data().to_vec(),
            )?;
            dict_store.save(&common.out.join("dictionary.actdump"))?;
            println!(
                "wrote {} rows of dictionary data (d={}, n_true={}, k_true={}) and the ground-truth dictionary",
                rows, d, n_true, k_true
            );
        }
        "subject" => {
            let spec = cfg
                .subject
                .as_ref()
                .ok_or_else(|| Error::Config("gen-data --kind subject needs --subject".into()))?;
            let subject = SubjectModel::parse_spec(spec)?;
            let seq_len = subject.max_seq();
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x746f6b);
            let seqs: Vec<Vec<u32>> = (0..n_seqs)
                .map(|_| {
                    (0..seq_len)
                        .map(|_| rng.gen_range(0..subject.vocab() as u32))
                        .collect()
                })
                .collect();
            let store = subject.capture(&seqs)?;
            store.activations().save(&common.out.join("data.actdump"))?;
            let tok = TokenStore {
                vocab: subject.vocab(),
                seq_len,
                tokens: store.all_tokens().to_vec(),
            };
            tok.save(&common.out.join("tokens.tokdump"))?;
            println!(
                "wrote {} sequences of length {} with captured residuals (d={})",
                n_seqs,
                seq_len,
                subject.d_model()
            );
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown gen-data kind '{}' (gaussian | dictionary | subject)",
                other
            )))
        }
    }
    write_resolved(common, &cfg)
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let ae = cfg
        .ae
        .clone()
        .ok_or_else(|| Error::Config("train needs an ae config (or --n/--k)".to_string()))?;
    let mut tc = cfg
        .train
        .clone()
        .ok_or_else(|| Error::Config("train needs a train config (or --budget-tokens)".to_string()))?;
    if let Some(seed) = common.seed {
        tc.seed = seed;
    }
    let store = cfg.load_store()?;
    write_resolved(common, &cfg)?;

    let outcome = run_train(&ae, &tc, &store)?;
    write_text(&common.out, "trainlog.csv", &outcome.log.to_csv())?;
    write_text(&common.out, "trainlog.jsonl", &outcome.log.to_jsonl())?;
    outcome.checkpoint.save(&common.out.join("checkpoint.saeckpt"))?;
    println!(
        "trained {} steps ({} tokens): final val_nmse {:.5}, best {:.5}{}",
        outcome.checkpoint.step,
        outcome.checkpoint.tokens_seen,
        outcome.final_val_nmse,
        outcome.best_val_nmse,
        if outcome.converged { " (converged)" } else { "" }
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalSummary {
    val_nmse: f32,
    l0: f32,
    dense_solution_score: f32,
    rows_evaluated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    downstream: Option<sae_core::subject::DownstreamMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse_by_position: Option<Vec<f32>>,
}

pub fn eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let store = cfg.load_store()?;
    if store.d() != ckpt.params.d {
        return Err(Error::invalid(format!(
            "data dim {} does not match checkpoint dim {}",
            store.d(),
            ckpt.params.d
        )));
    }
    write_resolved(common, &cfg)?;

    let rows = validation_rows(&store, 8192)?;
    let stats = density_stats(&ckpt.params, &ckpt.config, &rows)?;
    let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
    let baseline = sae_core::autoencoder::mean_predictor_baseline(&refs)?;
    let mut mse = 0.0f64;
    for x in &rows {
        let z = encode(&ckpt.params, &ckpt.config, x)?;
        let x_hat = decode(&ckpt.params, &z)?;
        mse += sae_core::autoencoder::sq_err(x, &x_hat) as f64;
    }
    let val_nmse = ((mse / rows.len() as f64) as f32) / baseline;

    let mut density_csv = String::from("latent,density,importance\n");
    for (i, (dv, iv)) in stats.density.iter().zip(&stats.importance).enumerate() {
        density_csv.push_str(&format!("{},{},{}\n", i, dv, iv));
    }
    write_text(&common.out, "density.csv", &density_csv)?;

    let (downstream, by_position) = if cfg.subject.is_some() && cfg.data.as_ref().is_some_and(|d| d.tokens.is_some()) {
        let (seq_store, subject) = sequence_store(common, &cfg)?;
        let metrics = downstream_metrics(&subject, &ckpt.params, &ckpt.config, &seq_store)?;
        let by_pos = mse_by_position(&ckpt.params, &ckpt.config, &seq_store)?;
        let mut csv = String::from("position,nmse\n");
        for (p, v) in by_pos.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", p, v));
        }
        write_text(&common.out, "mse_by_position.csv", &csv)?;
        (Some(metrics), Some(by_pos))
    } else {
        (None, None)
    };

    let summary = EvalSummary {
        val_nmse,
        l0: stats.l0,
        dense_solution_score: stats.dense_solution_score,
        rows_evaluated: rows.len(),
        downstream,
        mse_by_position: by_position,
    };
    write_json(&common.out, "eval.json", &summary)?;
    println!(
        "val_nmse {:.5}, l0 {:.2}, dense_solution_score {:.5}",
        summary.val_nmse, summary.l0, summary.dense_solution_score
    );
    Ok(())
}

pub fn sweep(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("sweep needs a sweep section in the config".to_string()))?;
    let base_ae = cfg
        .ae
        .clone()
        .unwrap_or_else(|| AeConfig::topk(spec.n_grid[0].max(2), spec.k_grid[0].max(1)));
    let base_train = cfg.train.clone().unwrap_or_else(|| {
        TrainConfig::new(spec.max_tokens, 1e-3, seed_of(common, &cfg))
    });
    let store = cfg.load_store()?;
    write_resolved(common, &cfg)?;

    let table = run_sweep(&spec, &store, &base_ae, &base_train)?;
    write_text(&common.out, "sweep.csv", &table.to_csv())?;
    if !table.excluded.is_empty() {
        write_text(&common.out, "excluded.txt", &(table.excluded.join("\n") + "\n"))?;
    }
    println!(
        "sweep wrote {} rows ({} cells excluded)",
        table.rows.len(),
        table.excluded.len()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct FitOutput {
    x_axis: String,
    irreducible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    joint: Option<sae_core::scaling::JointFit>,
    per_k: Vec<PerKFit>,
}

#[derive(serde::Serialize)]
struct PerKFit {
    k: usize,
    points: usize,
    fit: sae_core::scaling::PowerLawFit,
}

pub fn fit(
    common: &Common,
    input: &Path,
    irreducible: bool,
    joint: bool,
    x_axis: &str,
    drop_leading: usize,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let table = SweepTable::from_csv(&text)?;
    write_resolved(common, &cfg)?;

    let mut output = FitOutput {
        x_axis: x_axis.to_string(),
        irreducible,
        joint: None,
        per_k: Vec::new(),
    };

    if joint {
        let points = table.loss_at_convergence();
        output.joint = Some(fit_joint(&points)?);
    }

    let mut ks: Vec<usize> = table.rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    for k in ks {
        let mut points: Vec<(f64, f64)> = match x_axis {
            "n" => {
                // best converged loss per n
                let mut best: std::collections::BTreeMap<usize, f32> = Default::default();
                for r in table.rows.iter().filter(|r| r.k == k) {
                    best.entry(r.n)
                        .and_modify(|v| *v = v.min(r.val_nmse))
                        .or_insert(r.val_nmse);
                }
                best.into_iter().map(|(n, v)| (n as f64, v as f64)).collect()
            }
            "compute" => {
                // lower envelope of loss over compute buckets
                let mut rows: Vec<(f64, f64)> = table
                    .rows
                    .iter()
                    .filter(|r| r.k == k)
                    .map(|r| (r.compute_proxy, r.val_nmse as f64))
                    .collect();
                rows.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
                let mut env: Vec<(f64, f64)> = Vec::new();
                let mut best = f64::INFINITY;
                for (c, v) in rows {
                    best = best.min(v);
                    match env.last_mut() {
                        Some(last) if last.0 == c => last.1 = best,
                        _ => env.push((c, best)),
                    }
                }
                env
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown x axis '{}' (n | compute)",
                    other
                )))
            }
        };
        if drop_leading > 0 && points.len() > drop_leading {
            points.drain(..drop_leading);
        }
        let needed = if irreducible { 4 } else { 3 };
        if points.len() >= needed {
            let fit = fit_power_law(&points, irreducible)?;
            println!(
                "k={}: alpha={:.4} beta={:.4} e={:.5} log_rms={:.4} ({} points)",
                k,
                fit.alpha,
                fit.beta,
                fit.irreducible,
                fit.log_rms,
                points.len()
            );
            output.per_k.push(PerKFit {
                k,
                points: points.len(),
                fit,
            });
        } else {
            eprintln!("k={}: only {} usable points, skipping fit", k, points.len());
        }
    }
    if let Some(j) = &output.joint {
        println!(
            "joint: alpha={:.4} beta_k={:.4} beta_n={:.4} gamma={:.4} zeta={:.4} eta={:.4} log_rms={:.4}",
            j.alpha, j.beta_k, j.beta_n, j.gamma, j.zeta, j.eta, j.log_rms
        );
    }
    write_json(&common.out, "fit.json", &output)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct N2gRecord {
    latent: u32,
    patterns: usize,
    recall: Option<f64>,
    precision: Option<f64>,
    f1: Option<f64>,
    scale: f32,
}

pub fn n2g(
    common: &Common,
    checkpoint: &Path,
    latents: &[u32],
    pad: u32,
    reconstruction: bool,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (store, subject) = sequence_store(common, &cfg)?;
    write_resolved(common, &cfg)?;
    let metrics = metrics_config(&cfg);
    let seed = seed_of(common, &cfg);

    // split sequences into build and held-out halves
    let half = (store.n_seqs() / 2).max(1);
    let subset = |from: usize, to: usize| -> Result<SequenceStore> {
        let seq_len = store.seq_len();
        let tokens: Vec<u32> = (from..to).flat_map(|s| store.tokens(s).to_vec()).collect();
        let mut data = Vec::with_capacity((to - from) * seq_len * store.activations().d());
        for s in from..to {
            for p in 0..seq_len {
                data.extend_from_slice(store.activation_row(s, p));
            }
        }
        let acts = ActivationStore::new(store.activations().d(), (to - from) * seq_len, data)?
            .with_seq_len(seq_len)?;
        SequenceStore::new(seq_len, store.vocab(), tokens, acts)
    };
    let build_store = subset(0, half)?;
    let heldout = subset(half, store.n_seqs())?;

    let request: Vec<u32> = if !latents.is_empty() {
        latents.to_vec()
    } else if !metrics.n2g_latents.is_empty() {
        metrics.n2g_latents.clone()
    } else {
        (0..ckpt.params.n.min(32) as u32).collect()
    };

    let mut explanations = Vec::new();
    let mut records = Vec::new();
    let mut csv = String::from("latent,patterns,recall,precision,f1,scale\n");
    for &latent in &request {
        let mut expl = n2g_build(
            latent,
            &build_store,
            &subject,
            &ckpt.params,
            &ckpt.config,
            pad,
            seed,
            16,
        )?;
        if expl.is_empty() {
            eprintln!("latent {} never fires in the build split", latent);
        }
        expl.scale = n2g_simulate_scale(&expl, &build_store, &ckpt.params, &ckpt.config)?;
        let scores = n2g_scores(&expl, &heldout, &ckpt.params, &ckpt.config, seed, 16)?;
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            latent,
            expl.patterns.len(),
            fmt_opt(scores.recall),
            fmt_opt(scores.precision),
            fmt_opt(scores.f1),
            expl.scale
        ));
        records.push(N2gRecord {
            latent,
            patterns: expl.patterns.len(),
            recall: scores.recall,
            precision: scores.precision,
            f1: scores.f1,
            scale: expl.scale,
        });
        explanations.push(expl);
    }
    write_text(&common.out, "n2g.csv", &csv)?;
    write_json(&common.out, "n2g.json", &records)?;
    write_json(&common.out, "n2g_explanations.json", &explanations)?;

    if reconstruction {
        let recon = explanation_reconstruction(
            &ckpt.params,
            &ckpt.config,
            &explanations,
            &subject,
            &heldout,
        )?;
        write_json(&common.out, "explanation_reconstruction.json", &recon)?;
        println!(
            "explanation CE {:.4} (clean {:.4}, reconstruct {:.4}, zero {:.4})",
            recon.ce_explained, recon.ce_clean, recon.ce_reconstruct, recon.ce_zero
        );
    }
    println!("explained {} latents", records.len());
    Ok(())
}

pub fn probe(common: &Common, checkpoint: &Path, per_latent: bool) -> Result<()> {
    let cfg = resolve_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let store = cfg.load_store()?;
    let label_paths = cfg
        .data
        .as_ref()
        .map(|d| d.labels.clone())
        .unwrap_or_default();
    if label_paths.is_empty() {
        return Err(Error::Config("probe needs at least one --labels file".to_string()));
    }
    write_resolved(common, &cfg)?;

    let mut tasks = Vec::new();
    for p in &label_paths {
        let task = ProbeTask::load(p)?;
        if task.labels.len() != store.rows() {
            return Err(Error::invalid(format!(
                "task '{}' has {} labels but the store has {} rows",
                task.name,
                task.labels.len(),
                store.rows()
            )));
        }
        tasks.push(task);
    }

    // pre-activation latents over normalized rows
    let mut pre = DenseMatrix::zeros(store.rows(), ckpt.params.n);
    for r in 0..store.rows() {
        let (x, _) = normalize_input(store.row(r))?;
        let row = preactivations(&ckpt.params, &ckpt.config, &x)?;
        pre.row_mut(r).copy_from_slice(&row);
    }
    let results = probe_metric(&pre, &tasks, per_latent)?;
    let mut csv = String::from("task,best_latent,best_ce,constant_predictor_ce\n");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.task, r.best_latent, r.best_ce, r.constant_predictor_ce
        ));
        println!("{}: best CE {:.4} (latent {})", r.task, r.best_ce, r.best_latent);
    }
    write_text(&common.out, "probe.csv", &csv)?;
    write_json(&common.out, "probe.json", &results)?;
    Ok(())
}

pub fn ablate(
    common: &Common,
    checkpoint: Option<&Path>,
    baseline: &str,
    t_future: usize,
    positions: usize,
    count: usize,
    max_seqs: usize,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (store, subject) = sequence_store(common, &cfg)?;
    write_resolved(common, &cfg)?;
    let seed = seed_of(common, &cfg);

    let ckpt = match checkpoint {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let target = match baseline {
        "latents" => {
            let c = ckpt
                .as_ref()
                .ok_or_else(|| Error::Config("latents ablation needs a checkpoint".to_string()))?;
            AblationTarget::TrainedLatents(&c.params, &c.config)
        }
        "channels" => AblationTarget::ResidualChannels { count },
        "random" => AblationTarget::RandomDirections { count, seed },
        other => {
            return Err(Error::invalid(format!(
                "unknown ablation baseline '{}' (latents | channels | random)",
                other
            )))
        }
    };
    let result = ablation_sparsity(&subject, &store, &target, t_future, positions, max_seqs)?;
    write_json(&common.out, &format!("ablation_{}.json", baseline), &result)?;
    println!(
        "{} ablation: mean normalized (L1/L2)^2 = {:.4} over {} ablations",
        baseline, result.mean_score, result.per_ablation_count
    );
    Ok(())
}

pub fn refine(common: &Common, checkpoint: &Path, rows: usize) -> Result<()> {
    let cfg = resolve_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let store = cfg.load_store()?;
    write_resolved(common, &cfg)?;
    let eval_rows = validation_rows(&store, rows)?;
    let report = refine_activations(&ckpt.params, &ckpt.config, &eval_rows)?;
    write_json(&common.out, "refine.json", &report)?;
    println!(
        "refinement: mean relative change {:+.4}%, mse {:.6} -> {:.6}",
        report.mean_relative_change * 100.0,
        report.mse_before,
        report.mse_after
    );
    Ok(())
}

pub fn sweep_test_time(
    common: &Common,
    checkpoint: &Path,
    k_values: &[usize],
    thetas: &[f32],
    rows: usize,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let store = cfg.load_store()?;
    write_resolved(common, &cfg)?;
    let eval_rows = validation_rows(&store, rows)?;

    let k_list: Vec<usize> = if k_values.is_empty() {
        let k = ckpt.config.k;
        [k / 2, k, 2 * k, 4 * k]
            .into_iter()
            .filter(|&v| v >= 1 && v <= ckpt.params.n)
            .collect()
    } else {
        k_values.to_vec()
    };
    let mut csv = String::from("mode,setting,l0,nmse\n");
    let topk_points = test_time_topk(&ckpt.params, &ckpt.config, &eval_rows, &k_list)?;
    for p in &topk_points {
        csv.push_str(&format!("topk,{},{},{}\n", p.setting, p.l0, p.nmse));
    }
    let theta_points = if thetas.is_empty() {
        Vec::new()
    } else {
        test_time_jumprelu(&ckpt.params, &ckpt.config, &eval_rows, thetas)?
    };
    for p in &theta_points {
        csv.push_str(&format!("jumprelu,{},{},{}\n", p.setting, p.l0, p.nmse));
    }
    write_text(&common.out, "testtime.csv", &csv)?;
    #[derive(serde::Serialize)]
    struct TestTime {
        topk: Vec<sae_core::eval::SweepPoint>,
        jumprelu: Vec<sae_core::eval::SweepPoint>,
    }
    write_json(
        &common.out,
        "testtime.json",
        &TestTime {
            topk: topk_points,
            jumprelu: theta_points,
        },
    )?;
    println!("test-time sweep wrote {} settings", csv.lines().count() - 1);
    Ok(())
}

#[derive(serde::Serialize)]
struct BenchOutput {
    kernel: String,
    b: usize,
    d: usize,
    n: usize,
    k: usize,
    dense_flops: u64,
    sparse_flops: u64,
    flop_ratio: f64,
    dense_wall_ns_per_call: f64,
    sparse_wall_ns_per_call: f64,
    measured_speedup: f64,
}

pub fn bench(
    common: &Common,
    kernel: &str,
    d: usize,
    n: usize,
    k: usize,
    batch: usize,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let op = KernelOp::parse(kernel)?;
    let report = count_flops(op, batch as u64, d as u64, n as u64, k as u64)?;
    ensure_out(common)?;

    // wall-clock comparison on the decoder path: dense matvec of the full
    // d-by-n decoder vs the sparse row gather
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed_of(common, &cfg));
    let w_t = DenseMatrix::from_vec(
        n,
        d,
        (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;
    let w = w_t.transposed();
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.shuffle(&mut rng);
    let mut entries: Vec<(u32, f32)> = idx[..k]
        .iter()
        .map(|&i| (i, rng.gen_range(0.1f32..1.0)))
        .collect();
    entries.sort_unstable_by_key(|&(i, _)| i);
    let z = SparseVec::new(n, entries)?;
    let z_dense = z.to_dense();

    let time_ns = |f: &mut dyn FnMut()| -> f64 {
        // warm up, then measure enough iterations to dominate timer noise
        for _ in 0..3 {
            f();
        }
        let mut iters = 4u32;
        loop {
            let start = Instant::now();
            for _ in 0..iters {
                f();
            }
            let elapsed = start.elapsed();
            if elapsed.as_millis() >= 200 || iters >= 1 << 20 {
                return elapsed.as_nanos() as f64 / iters as f64;
            }
            iters *= 2;
        }
    };

    let mut sink = 0.0f32;
    let dense_ns = time_ns(&mut || {
        let out = w.matvec(&z_dense).expect("dims fixed");
        sink += out[0];
    });
    let sparse_ns = time_ns(&mut || {
        let out = dense_sparse_matmul_t(&w_t, &z).expect("dims fixed");
        sink += out[0];
    });
    std::hint::black_box(sink);

    let output = BenchOutput {
        kernel: op.name().to_string(),
        b: batch,
        d,
        n,
        k,
        dense_flops: report.dense_flops,
        sparse_flops: report.sparse_flops,
        flop_ratio: report.ratio,
        dense_wall_ns_per_call: dense_ns,
        sparse_wall_ns_per_call: sparse_ns,
        measured_speedup: dense_ns / sparse_ns,
    };
    write_json(&common.out, "bench.json", &output)?;
    println!(
        "{}: flop ratio {:.2} (dense {} vs sparse {}), decoder wall speedup {:.1}x",
        output.kernel, output.flop_ratio, output.dense_flops, output.sparse_flops, output.measured_speedup
    );
    Ok(())
}

pub fn report(common: &Common, input: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    ensure_out(common)?;
    let plots_dir = common.out.join("plots");
    std::fs::create_dir_all(&plots_dir).map_err(|e| Error::io(&plots_dir, e))?;
    write_resolved(common, &cfg)?;
    let mut rendered = 0;

    let trainlog = input.join("trainlog.csv");
    if trainlog.exists() {
        let text = std::fs::read_to_string(&trainlog).map_err(|e| Error::io(&trainlog, e))?;
        let mut raw = Vec::new();
        let mut ema = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() >= 8 {
                if let (Ok(t), Ok(v), Ok(ve)) =
                    (f[0].parse::<f64>(), f[2].parse::<f64>(), f[7].parse::<f64>())
                {
                    raw.push((t, v));
                    ema.push((t, ve));
                }
            }
        }
        let svg = render_plot(&PlotSpec {
            title: "validation loss".into(),
            x_label: "tokens".into(),
            y_label: "normalized MSE".into(),
            log_x: true,
            log_y: true,
            series: vec![
                Series { label: "raw".into(), points: raw, draw_line: true },
                Series { label: "ema".into(), points: ema, draw_line: true },
            ],
        });
        write_text(&plots_dir, "loss_curve.svg", &svg)?;
        rendered += 1;
    }

    let sweep_csv = input.join("sweep.csv");
    if sweep_csv.exists() {
        let text = std::fs::read_to_string(&sweep_csv).map_err(|e| Error::io(&sweep_csv, e))?;
        let table = SweepTable::from_csv(&text)?;
        let mut ks: Vec<usize> = table.rows.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut series = Vec::new();
        for &k in &ks {
            let mut best: std::collections::BTreeMap<usize, f32> = Default::default();
            for r in table.rows.iter().filter(|r| r.k == k) {
                best.entry(r.n)
                    .and_modify(|v| *v = v.min(r.val_nmse))
                    .or_insert(r.val_nmse);
            }
            series.push(Series {
                label: format!("k={}", k),
                points: best.into_iter().map(|(n, v)| (n as f64, v as f64)).collect(),
                draw_line: true,
            });
        }
        let svg = render_plot(&PlotSpec {
            title: "loss vs latent count".into(),
            x_label: "n".into(),
            y_label: "normalized MSE".into(),
            log_x: true,
            log_y: true,
            series,
        });
        write_text(&plots_dir, "scaling.svg", &svg)?;

        // L0-MSE frontier
        let frontier: Vec<(f64, f64)> = table
            .rows
            .iter()
            .map(|r| (r.l0 as f64, r.val_nmse as f64))
            .collect();
        let svg = render_plot(&PlotSpec {
            title: "sparsity-reconstruction frontier".into(),
            x_label: "L0".into(),
            y_label: "normalized MSE".into(),
            log_x: true,
            log_y: true,
            series: vec![Series { label: "runs".into(), points: frontier, draw_line: false }],
        });
        write_text(&plots_dir, "frontier.svg", &svg)?;
        rendered += 2;
    }

    let testtime = input.join("testtime.csv");
    if testtime.exists() {
        let text = std::fs::read_to_string(&testtime).map_err(|e| Error::io(&testtime, e))?;
        let mut topk = Vec::new();
        let mut jump = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 4 {
                if let (Ok(l0), Ok(nmse)) = (f[2].parse::<f64>(), f[3].parse::<f64>()) {
                    if f[0] == "topk" {
                        topk.push((l0, nmse));
                    } else {
                        jump.push((l0, nmse));
                    }
                }
            }
        }
        let mut series = vec![Series { label: "topk(k')".into(), points: topk, draw_line: true }];
        if !jump.is_empty() {
            series.push(Series { label: "jumprelu".into(), points: jump, draw_line: true });
        }
        let svg = render_plot(&PlotSpec {
            title: "test-time activation sweep".into(),
            x_label: "L0".into(),
            y_label: "normalized MSE".into(),
            log_x: true,
            log_y: true,
            series,
        });
        write_text(&plots_dir, "testtime.svg", &svg)?;
        rendered += 1;
    }

    let density = input.join("density.csv");
    if density.exists() {
        let text = std::fs::read_to_string(&density).map_err(|e| Error::io(&density, e))?;
        let mut buckets: std::collections::BTreeMap<i64, u32> = Default::default();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() >= 2 {
                if let Ok(dv) = f[1].parse::<f64>() {
                    if dv > 0.0 {
                        let b = (dv.log10() * 4.0).floor() as i64;
                        *buckets.entry(b).or_insert(0) += 1;
                    }
                }
            }
        }
        let points: Vec<(f64, f64)> = buckets
            .into_iter()
            .map(|(b, c)| (10f64.powf(b as f64 / 4.0), c as f64))
            .collect();
        let svg = render_plot(&PlotSpec {
            title: "latent density histogram".into(),
            x_label: "density".into(),
            y_label: "latents".into(),
            log_x: true,
            log_y: false,
            series: vec![Series { label: "density".into(), points, draw_line: true }],
        });
        write_text(&plots_dir, "density.svg", &svg)?;
        rendered += 1;
    }

    if rendered == 0 {
        return Err(Error::invalid(format!(
            "no known CSV files found under {}",
            input.display()
        )));
    }
    println!("rendered {} plots into {}", rendered, plots_dir.display());
    Ok(())
}
