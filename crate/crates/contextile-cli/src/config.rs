//! Run configuration: TOML file plus flag overrides, echoed as JSON into
//! every run directory so runs are self-describing.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use contextile::denoiser::{DenoiserConfig, LoraConfig};
use contextile::sampler::SamplerConfig;
use contextile::schedule::ScheduleParams;
use contextile::tasks::vocab_size;
use contextile::training::TrainConfig;

/// Environment variable naming the root for relative output directories.
pub const OUT_ROOT_ENV: &str = "CONTEXTILE_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub panel: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 256,
            n_eval: 8,
            panel: 32,
        }
    }
}

/// Everything a run needs; a run directory carries the exact config that
/// produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfigFile,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
}

/// Denoiser config without the vocabulary size, which always comes from
/// the task vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfigFile {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub attn_levels: Vec<usize>,
    pub cond_dim: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfigFile {
    fn default() -> Self {
        let toy = DenoiserConfig::toy(1);
        DenoiserConfigFile {
            in_channels: toy.in_channels,
            base_width: toy.base_width,
            depth: toy.depth,
            attn_levels: toy.attn_levels,
            cond_dim: toy.cond_dim,
            time_dim: toy.time_dim,
        }
    }
}

impl DenoiserConfigFile {
    pub fn build(&self) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: self.in_channels,
            base_width: self.base_width,
            depth: self.depth,
            attn_levels: self.attn_levels.clone(),
            cond_vocab: vocab_size(),
            cond_dim: self.cond_dim,
            time_dim: self.time_dim,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "colorize".to_string(),
            seed: 0,
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfigFile::default(),
            train: TrainConfig::default(),
            lora: LoraConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Writes the effective config beside the run outputs.
    pub fn echo_json(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("config.json"), json + "\n")?;
        Ok(())
    }
}

/// Resolves an output directory against `CONTEXTILE_OUT` when relative.
pub fn resolve_out_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}
