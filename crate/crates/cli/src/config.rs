use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::Args;
use hgave_core::metrics::DEFAULT_KS;
use hgave_core::{ModelConfig, SplitConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub products: Option<PathBuf>,
    pub sessions: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

/// Everything a command needs; stored as `config.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dimension of text-hashed features when no features file is given.
    pub feature_dim: usize,
    pub feature_seed: u64,
    pub ks: Vec<usize>,
    /// Seeds of a repeated run. Empty means `repeat` consecutive seeds
    /// starting at `train.seed`.
    pub seeds: Vec<u64>,
    pub repeat: usize,
    /// Learning rates to try; empty trains once at `train.learning_rate`.
    pub lr_grid: Vec<f64>,
    pub paths: Paths,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            feature_seed: 0,
            ks: DEFAULT_KS.to_vec(),
            seeds: Vec::new(),
            repeat: 1,
            lr_grid: Vec::new(),
            paths: Paths::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.repeat.max(1) as u64).map(|i| self.train.seed + i).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(CliError::input(format!("seed {s} is listed twice")));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(CliError::input("ks must be a non-empty list of positive cutoffs"));
        }
        if self.feature_dim == 0 {
            return Err(CliError::input("feature_dim must be positive"));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Same configuration with split and training driven by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.split.seed = seed;
        c.train.seed = seed;
        c
    }
}

/// Flags shared by every pipeline command. Flags win over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Run directory; relative paths resolve under `--run-root`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, env = "HGAVE_RUN_ROOT")]
    pub run_root: Option<PathBuf>,
    #[arg(long)]
    pub products: Option<PathBuf>,
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Seed for both the split and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub repeat: Option<usize>,
    #[arg(long)]
    pub n_unseen: Option<usize>,
    #[arg(long)]
    pub negative_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        let p = &mut c.paths;
        for (dst, src) in [(&mut p.products, &self.products), (&mut p.sessions, &self.sessions), (&mut p.features, &self.features)] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        set(&mut c.feature_dim, &self.feature_dim);
        if let Some(s) = self.seed {
            c.split.seed = s;
            c.train.seed = s;
        }
        set(&mut c.seeds, &self.seeds);
        set(&mut c.repeat, &self.repeat);
        set(&mut c.split.n_unseen, &self.n_unseen);
        set(&mut c.split.negative_rate, &self.negative_rate);
        set(&mut c.train.max_epochs, &self.epochs);
        set(&mut c.train.patience, &self.patience);
        set(&mut c.train.learning_rate, &self.lr);
        set(&mut c.lr_grid, &self.lr_grid);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.model.dim, &self.dim);
        set(&mut c.model.heads, &self.heads);
        set(&mut c.model.dropout, &self.dropout);
        set(&mut c.ks, &self.ks);
    }

    /// Loads the config file (or the run directory's stored config), applies
    /// flags and resolves the run directory.
    pub fn resolve(&self) -> CliResult<(RunConfig, PathBuf)> {
        let from_file = match &self.config {
            Some(path) => Some(read_toml(path)?),
            None => None,
        };
        let dir = self
            .run_dir
            .clone()
            .or_else(|| from_file.as_ref().and_then(|c| c.paths.run_dir.clone()))
            .ok_or_else(|| CliError::input("no run directory: pass --run-dir or set paths.run_dir"))?;
        let dir = match &self.run_root {
            Some(root) if dir.is_relative() => root.join(dir),
            _ => dir,
        };
        let mut cfg = match from_file {
            Some(c) => c,
            None => read_stored(&dir)?.unwrap_or_default(),
        };
        self.apply(&mut cfg);
        cfg.paths.run_dir = Some(dir.clone());
        cfg.validate()?;
        Ok((cfg, dir))
    }
}

fn read_toml(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::at(path, e))?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::at(path, e))?;
    // Input paths in a config file are relative to the file itself.
    let base = path.parent().unwrap_or(Path::new(""));
    let p = &mut cfg.paths;
    for slot in [&mut p.products, &mut p.sessions, &mut p.features].into_iter().flatten() {
        if slot.is_relative() {
            *slot = base.join(&*slot);
        }
    }
    Ok(cfg)
}

pub const STORED: &str = "config.json";

fn read_stored(dir: &Path) -> CliResult<Option<RunConfig>> {
    let path = dir.join(STORED);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::at(&path, e))
}
