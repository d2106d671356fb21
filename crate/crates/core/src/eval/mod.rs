//! Metric suite: 1-d logistic probes, N2G explanations, ablation-effect
//! sparsity, activation refinement (shrinkage), test-time activation swaps,
//! density diagnostics, and per-position reconstruction error.

pub mod ablation;
pub mod n2g;
pub mod probe;
pub mod refine;
pub mod testtime;

pub use ablation::{ablation_score, ablation_sparsity, AblationSparsityResult, AblationTarget};
pub use n2g::{
    explanation_reconstruction, n2g_build, n2g_scores, n2g_simulate_scale, N2GExplanation,
    N2GScores, NgramPattern, ResidualSource,
};
pub use probe::{fit_one_latent, probe_metric, ProbeResult};
pub use refine::{refine_activations, refine_row, ShrinkageReport};
pub use testtime::{
    density_stats, mse_by_position, test_time_jumprelu, test_time_topk, DensityStats, SweepPoint,
};
