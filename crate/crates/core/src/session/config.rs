//! Run configuration. Every field has a default, so a config file only
//! needs the values it overrides.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Classes per incremental session.
    pub n_way: usize,
    /// Shots per novel class.
    pub k_shot: usize,
    /// Number of incremental sessions.
    pub sessions: usize,
    pub base_classes: usize,

    /// Weight of the raw prototype in the calibration blend.
    pub alpha: f64,
    /// Covariance scaling.
    pub beta: f64,
    /// Sharpness of the covariance-transfer weights.
    pub gamma: f64,
    /// Contrastive temperature.
    pub tau: f64,

    /// Peak calibration-network learning rate. Rates near 1 drive the
    /// softplus encoder into its flat region, after which the network
    /// outputs a constant.
    pub mpc_lr: f64,
    pub mpc_episodes: usize,
    pub mpc_warmup: usize,
    pub mpc_momentum: f64,
    /// Shots per class in each calibration training episode.
    pub mpc_shots: usize,

    pub proj_lr: f64,
    pub proj_momentum: f64,
    pub proj_warmup_epochs: usize,
    pub base_epochs: usize,
    pub incremental_epochs: usize,
    pub batch_size: usize,

    pub samples_base: usize,
    pub samples_novel: usize,
    /// Exemplars kept per novel class.
    pub replay: usize,

    pub seed: u64,
    pub d_g: usize,
    /// Projector hidden width; defaults to the feature dimension.
    pub d_hidden: Option<usize>,
    /// Class count of the fixed-structure baseline; defaults to the total
    /// number of classes in the run.
    pub fs_total_classes: Option<usize>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            sessions: 8,
            base_classes: 60,
            alpha: 0.6,
            beta: 0.6,
            gamma: 16.0,
            tau: 0.07,
            mpc_lr: 0.1,
            mpc_episodes: 2000,
            mpc_warmup: 100,
            mpc_momentum: 0.9,
            mpc_shots: 5,
            proj_lr: 1e-2,
            proj_momentum: 0.9,
            proj_warmup_epochs: 1,
            base_epochs: 50,
            incremental_epochs: 20,
            batch_size: 128,
            samples_base: 100,
            samples_novel: 50,
            replay: 5,
            seed: 0,
            d_g: 512,
            d_hidden: None,
            fs_total_classes: None,
        }
    }
}

impl SessionConfig {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.n_way * self.sessions
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.base_classes < 2 {
            return bad(format!("base_classes must be at least 2, got {}", self.base_classes));
        }
        if self.k_shot == 0 || self.n_way == 0 {
            return bad("n_way and k_shot must be at least 1".into());
        }
        if self.d_g <= self.total_classes() {
            return bad(format!(
                "d_g = {} must exceed the total class count {}",
                self.d_g,
                self.total_classes()
            ));
        }
        if let Some(fs) = self.fs_total_classes {
            if fs < self.total_classes() || self.d_g <= fs {
                return bad(format!(
                    "fs_total_classes = {fs} must lie in [{}, d_g)",
                    self.total_classes()
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, v) in [("beta", self.beta), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("mpc_lr", self.mpc_lr),
            ("proj_lr", self.proj_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        for (name, v) in [
            ("mpc_momentum", self.mpc_momentum),
            ("proj_momentum", self.proj_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.samples_base == 0 || self.samples_novel == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.mpc_shots == 0 {
            return bad("mpc_shots must be at least 1".into());
        }
        if self.d_hidden == Some(0) {
            return bad("d_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8], source_name: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes, &path.display().to_string())
    }
}

/// Which ablation arm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Full pipeline.
    Concm,
    /// A fresh random optimal structure every session.
    Rm,
    /// One optimal structure over all classes, fit in the base session.
    Fs,
    /// The projector is never trained.
    Frozen,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Concm => "concm",
            Strategy::Rm => "rm",
            Strategy::Fs => "fs",
            Strategy::Frozen => "frozen",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concm" => Ok(Strategy::Concm),
            "rm" => Ok(Strategy::Rm),
            "fs" => Ok(Strategy::Fs),
            "frozen" => Ok(Strategy::Frozen),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy `{other}` (expected concm, rm, fs or frozen)"
            ))),
        }
    }
}
