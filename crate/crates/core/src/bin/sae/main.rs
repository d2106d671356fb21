//! Command-line interface: every capability of the library as a subcommand
//! with reproducible, file-based outputs.

mod cmds;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sae_core::error::Error;

#[derive(Parser)]
#[command(
    name = "sae",
    about = "k-sparse autoencoder training, evaluation, and scaling-law fitting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; flags override config-file fields.
#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "sae-out")]
    out: PathBuf,
    /// Activation file (actdump)
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Token file (tokdump)
    #[arg(long, global = true)]
    tokens: Option<PathBuf>,
    /// Label files (labeldump), repeatable
    #[arg(long, global = true)]
    labels: Vec<PathBuf>,
    /// Subject weights path or random:SEED:layers,d,heads,vocab,seq,splice
    #[arg(long, global = true)]
    subject: Option<String>,
    /// Latent count override
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Active-latent count override
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Learning-rate override
    #[arg(long, global = true)]
    lr: Option<f32>,
    /// Batch size override (tokens)
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Token budget override
    #[arg(long, global = true)]
    budget_tokens: Option<u64>,
    /// Worker threads (SAE_THREADS overrides)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic activation/token data files
    GenData {
        #[command(flatten)]
        common: Common,
        /// gaussian | dictionary | subject
        #[arg(long, default_value = "dictionary")]
        kind: String,
        #[arg(long, default_value_t = 100_000)]
        rows: usize,
        /// Input dimension (gaussian and dictionary)
        #[arg(long, default_value_t = 64)]
        d: usize,
        /// Ground-truth feature count (dictionary)
        #[arg(long, default_value_t = 256)]
        n_true: usize,
        /// Active features per sample (dictionary)
        #[arg(long, default_value_t = 8)]
        k_true: usize,
        /// Noise level (dictionary)
        #[arg(long, default_value_t = 0.01)]
        sigma: f32,
        /// Sequences to sample (subject)
        #[arg(long, default_value_t = 512)]
        n_seqs: usize,
    },
    /// Train an autoencoder and write checkpoint + logs
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Core evaluation of a checkpoint: reconstruction, density, downstream
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate
        checkpoint: PathBuf,
    },
    /// Train a grid of (n, k) cells and emit the loss table
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Fit scaling laws to a sweep table
    Fit {
        #[command(flatten)]
        common: Common,
        /// Sweep CSV produced by the sweep subcommand
        #[arg(long)]
        input: PathBuf,
        /// Include the irreducible loss term
        #[arg(long)]
        irreducible: bool,
        /// Fit the joint L(n, k) law instead of per-k power laws
        #[arg(long)]
        joint: bool,
        /// x axis: n | compute
        #[arg(long, default_value = "n")]
        x_axis: String,
        /// Drop this many leading (smallest-x) points per fit
        #[arg(long, default_value_t = 0)]
        drop_leading: usize,
    },
    /// Build and score N2G explanations for latents
    N2g {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Latents to explain (defaults to every latent active in the store)
        #[arg(long, value_delimiter = ',')]
        latents: Vec<u32>,
        /// Pad token used for wildcards and position checks
        #[arg(long, default_value_t = 0)]
        pad: u32,
        /// Also run explanation-reconstruction against the subject
        #[arg(long)]
        reconstruction: bool,
    },
    /// 1-d logistic probe sweep over latents
    Probe {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Keep per-latent CE vectors in the JSON output
        #[arg(long)]
        per_latent: bool,
    },
    /// Ablation-effect sparsity over latents or baselines
    Ablate {
        #[command(flatten)]
        common: Common,
        checkpoint: Option<PathBuf>,
        /// latents | channels | random
        #[arg(long, default_value = "latents")]
        baseline: String,
        #[arg(long, default_value_t = 16)]
        t_future: usize,
        /// Probe positions per sequence
        #[arg(long, default_value_t = 4)]
        positions: usize,
        /// Ablations per position for channel/random baselines
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        max_seqs: usize,
    },
    /// Refine frozen-mask activations and report shrinkage
    Refine {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Rows to refine
        #[arg(long, default_value_t = 512)]
        rows: usize,
    },
    /// Test-time activation swaps: TopK(k') and JumpReLU(theta) curves
    SweepTestTime {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Comma-separated k' values
        #[arg(long, value_delimiter = ',')]
        k_values: Vec<usize>,
        /// Comma-separated JumpReLU thresholds
        #[arg(long, value_delimiter = ',')]
        thetas: Vec<f32>,
        /// Rows evaluated per setting
        #[arg(long, default_value_t = 2048)]
        rows: usize,
    },
    /// Flop accounting and wall-clock comparison for the sparse kernels
    Bench {
        #[command(flatten)]
        common: Common,
        /// decoder-forward | decoder-gradient | latent-gradient |
        /// encoder-gradient | pre-bias-gradient | train-step
        #[arg(long, default_value = "decoder-forward")]
        kernel: String,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long = "bench-n", default_value_t = 4096)]
        bench_n: usize,
        #[arg(long = "bench-k", default_value_t = 32)]
        bench_k: usize,
        /// Batch rows for the flop model
        #[arg(long, default_value_t = 4096)]
        bench_batch: usize,
    },
    /// Render SVG plots from the CSV outputs in a run directory
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory containing CSV outputs
        #[arg(long)]
        input: PathBuf,
    },
}

fn thread_count(common: &Common) -> Option<usize> {
    if let Ok(v) = std::env::var("SAE_THREADS") {
        if let Ok(t) = v.parse::<usize>() {
            return Some(t);
        }
        eprintln!("warning: ignoring unparsable SAE_THREADS={:?}", v);
    }
    common.threads
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::GenData { common, .. }
        | Command::Train { common }
        | Command::Eval { common, .. }
        | Command::Sweep { common }
        | Command::Fit { common, .. }
        | Command::N2g { common, .. }
        | Command::Probe { common, .. }
        | Command::Ablate { common, .. }
        | Command::Refine { common, .. }
        | Command::SweepTestTime { common, .. }
        | Command::Bench { common, .. }
        | Command::Report { common, .. } => common.clone(),
    };
    if let Some(threads) = thread_count(&common) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
    }

    match cli.command {
        Command::GenData {
            common,
            kind,
            rows,
            d,
            n_true,
            k_true,
            sigma,
            n_seqs,
        } => cmds::gen_data(&common, &kind, rows, d, n_true, k_true, sigma, n_seqs),
        Command::Train { common } => cmds::train(&common),
        Command::Eval { common, checkpoint } => cmds::eval(&common, &checkpoint),
        Command::Sweep { common } => cmds::sweep(&common),
        Command::Fit {
            common,
            input,
            irreducible,
            joint,
            x_axis,
            drop_leading,
        } => cmds::fit(&common, &input, irreducible, joint, &x_axis, drop_leading),
        Command::N2g {
            common,
            checkpoint,
            latents,
            pad,
            reconstruction,
        } => cmds::n2g(&common, &checkpoint, &latents, pad, reconstruction),
        Command::Probe {
            common,
            checkpoint,
            per_latent,
        } => cmds::probe(&common, &checkpoint, per_latent),
        Command::Ablate {
            common,
            checkpoint,
            baseline,
            t_future,
            positions,
            count,
            max_seqs,
        } => cmds::ablate(
            &common,
            checkpoint.as_deref(),
            &baseline,
            t_future,
            positions,
            count,
            max_seqs,
        ),
        Command::Refine {
            common,
            checkpoint,
            rows,
        } => cmds::refine(&common, &checkpoint, rows),
        Command::SweepTestTime {
            common,
            checkpoint,
            k_values,
            thetas,
            rows,
        } => cmds::sweep_test_time(&common, &checkpoint, &k_values, &thetas, rows),
        Command::Bench {
            common,
            kernel,
            d,
            bench_n,
            bench_k,
            bench_batch,
        } => cmds::bench(&common, &kernel, d, bench_n, bench_k, bench_batch),
        Command::Report { common, input } => cmds::report(&common, &input),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}
