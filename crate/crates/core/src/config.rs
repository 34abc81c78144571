//! Run configuration: built-in defaults, optional TOML file, command-line
//! overrides, applied in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constitutive::ModelKind;
use crate::error::{Error, Result};
use crate::network::{PenaltyWeights, DEFAULT_HIDDEN_WIDTH};
use crate::trainer::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PGNNIV_OUT";

/// Output root from [`OUT_ENV`], or the working directory.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Effective settings of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub hidden_width: usize,
    pub weights: PenaltyWeights,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::ScalarK,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            weights: PenaltyWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        if let ModelKind::Cnn3l { width: 0 } = self.model {
            return Err(Error::Config("cnn width must be >= 1".into()));
        }
        self.weights.validate()?;
        self.train.validate()
    }
}

/// Partial settings, as read from a config file or collected from flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub model: Option<String>,
    pub cnn_width: Option<usize>,
    pub hidden_width: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_iters: Option<usize>,
    pub log_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub seed: Option<u64>,
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
}

impl Overrides {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = &self.model {
            cfg.model = m.parse().map_err(Error::Config)?;
        }
        if let (Some(w), ModelKind::Cnn3l { width }) = (self.cnn_width, &mut cfg.model) {
            *width = w;
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),*) => {
                $(if let Some(v) = self.$src { cfg.$($dst).+ = v; })*
            };
        }
        set!(
            hidden_width => hidden_width,
            learning_rate => train.learning_rate,
            max_iters => train.max_iters,
            log_every => train.log_every,
            checkpoint_every => train.checkpoint_every,
            seed => train.seed,
            c0 => weights.c0,
            c1 => weights.c1,
            c2 => weights.c2,
            c3 => weights.c3
        );
        Ok(())
    }
}

/// Defaults, then the file (if any), then the flags.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        Overrides::from_file(path)?.apply(&mut cfg)?;
    }
    flags.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}
