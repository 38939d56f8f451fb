//! Config file keys. Resolution order is built-in defaults, then this file,
//! then `CEMBED_*` environment variables, then flags; clap already folds the
//! last two together.

use std::fs;
use std::path::Path;

use anyhow::Context;
use contrastive_embed::trainer::Regime;
use contrastive_embed::LossVariant;
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,

    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub temperature: Option<f64>,
    pub variant: Option<LossVariant>,
    pub regime: Option<Regime>,
    pub max_len: Option<usize>,
    pub min_len: Option<usize>,
    pub negatives_per_group: Option<usize>,

    pub dim: Option<usize>,
    pub min_freq: Option<usize>,

    pub k: Option<Vec<usize>>,

    pub temperatures: Option<Vec<f64>>,
    pub regimes: Option<Vec<Regime>>,
    pub variants: Option<Vec<LossVariant>>,

    pub clusters: Option<usize>,
    pub docs_per_cluster: Option<usize>,
    pub queries_per_cluster: Option<usize>,

    pub min_duplicates: Option<usize>,
    pub min_refs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
    }
}

/// Flag (or environment) value if given, else the file value, else `default`.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
