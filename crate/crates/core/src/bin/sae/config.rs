//! Run configuration: a strict JSON document mirroring the library configs
//! plus data sources. Command-line flags override config fields, and every
//! run writes the fully resolved document next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sae_core::autoencoder::AeConfig;
use sae_core::data::{gen_dictionary_data, gen_gaussian, ActivationStore, DictDataConfig};
use sae_core::error::{Error, Result};
use sae_core::scaling::SweepSpec;
use sae_core::trainer::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ae: Option<AeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsConfig>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            ae: None,
            train: None,
            data: None,
            subject: None,
            sweep: None,
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Future tokens for the ablation metric.
    #[serde(default = "default_t_future")]
    pub t_future: usize,
    /// Probe positions ablated per sequence.
    #[serde(default = "default_positions")]
    pub positions_per_seq: usize,
    #[serde(default = "default_max_seqs")]
    pub max_seqs: usize,
    /// Pad token for N2G wildcards.
    #[serde(default)]
    pub pad_token: u32,
    /// Latents to explain with N2G (all active ones when empty is too slow).
    #[serde(default)]
    pub n2g_latents: Vec<u32>,
}

fn default_t_future() -> usize {
    16
}

fn default_positions() -> usize {
    4
}

fn default_max_seqs() -> usize {
    64
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            t_future: default_t_future(),
            positions_per_seq: default_positions(),
            max_seqs: default_max_seqs(),
            pad_token: 0,
            n2g_latents: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Activation file (actdump).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Token file (tokdump).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<PathBuf>,
    /// Label files (labeldump), one probe task each.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticSpec {
    Gaussian { d: usize, rows: usize, seed: u64 },
    Dictionary { rows: usize, config: DictDataConfig },
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {}", e)))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads or synthesizes the activation store named by the data spec.
    pub fn load_store(&self) -> Result<ActivationStore> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("no data source configured".to_string()))?;
        if let Some(path) = &data.path {
            return ActivationStore::load(path);
        }
        match &data.synthetic {
            Some(SyntheticSpec::Gaussian { d, rows, seed }) => gen_gaussian(*d, *rows, *seed),
            Some(SyntheticSpec::Dictionary { rows, config }) => {
                Ok(gen_dictionary_data(config, *rows)?.0)
            }
            None => Err(Error::Config(
                "data spec names neither a file nor a synthetic source".to_string(),
            )),
        }
    }
}
