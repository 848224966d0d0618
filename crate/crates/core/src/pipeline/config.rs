//! Run configuration for training, sweeps and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::disentangle::FairnessConfig;
use crate::dp::{default_alpha_grid, NoiseCalibration, PrivacySpec};
use crate::error::{FlipError, Result};
use crate::evaluation::AdversaryConfig;
use crate::vae::{TrainingConfig, VaeConfig};

/// Privacy parameters shared by every finite-ε cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrivacySettings {
    pub delta: f64,
    pub clip_norm: f64,
    pub calibration: NoiseCalibration,
    pub alphas: Vec<f64>,
}

impl Default for PrivacySettings {
    fn default() -> Self {
        Self {
            delta: 1e-5,
            clip_norm: 1.0,
            calibration: NoiseCalibration::GroupWise,
            alphas: default_alpha_grid(),
        }
    }
}

impl PrivacySettings {
    pub fn spec(&self, epsilon: f64) -> PrivacySpec {
        PrivacySpec {
            epsilon,
            delta: self.delta,
            clip_norm: self.clip_norm,
            alphas: self.alphas.clone(),
            calibration: self.calibration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub schema: PathBuf,
    pub model: VaeConfig,
    pub training: TrainingConfig,
    pub fairness: FairnessConfig,
    pub diffusion: DiffusionConfig,
    pub evaluation: AdversaryConfig,
    pub privacy: PrivacySettings,
    /// Fairness weights of the sweep.
    pub lambdas: Vec<f64>,
    /// Privacy budgets of the sweep; `null` trains without differential
    /// privacy.
    pub epsilons: Vec<Option<f64>>,
    pub folds: usize,
    /// Folds to execute; all when absent.
    pub run_folds: Option<Vec<usize>>,
    /// Synthetic rows per cell; the training-fold size when absent.
    pub synthetic_rows: Option<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            schema: PathBuf::new(),
            model: VaeConfig::default(),
            training: TrainingConfig::default(),
            fairness: FairnessConfig::default(),
            diffusion: DiffusionConfig::default(),
            evaluation: AdversaryConfig::default(),
            privacy: PrivacySettings::default(),
            lambdas: vec![0.0, 4.0],
            epsilons: vec![None, Some(3.0)],
            folds: 3,
            run_folds: None,
            synthetic_rows: None,
            out_dir: PathBuf::from("flip-run"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Read a JSON config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FlipError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset, &mut cfg.schema, &mut cfg.out_dir] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| FlipError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.epsilons.is_empty() {
            return Err(FlipError::InvalidArgument("sweep grids must be nonempty".into()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(FlipError::InvalidArgument("lambda values must be finite and nonnegative".into()));
        }
        if self.epsilons.iter().flatten().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(FlipError::InvalidArgument(
                "epsilon values must be finite and positive; use null for no privacy".into(),
            ));
        }
        for (i, a) in self.lambdas.iter().enumerate() {
            if self.lambdas[..i].contains(a) {
                return Err(FlipError::InvalidArgument(format!("lambda {a} repeated")));
            }
        }
        for (i, a) in self.epsilons.iter().enumerate() {
            if self.epsilons[..i].contains(a) {
                return Err(FlipError::InvalidArgument("epsilon grid repeats a value".into()));
            }
        }
        if self.folds < 2 {
            return Err(FlipError::InvalidArgument("at least 2 folds required".into()));
        }
        if let Some(f) = &self.run_folds {
            if f.is_empty() || f.iter().any(|&x| x >= self.folds) {
                return Err(FlipError::InvalidArgument(format!("run_folds must name folds below {}", self.folds)));
            }
        }
        if self.synthetic_rows == Some(0) {
            return Err(FlipError::InvalidArgument("synthetic row count must be at least 1".into()));
        }
        self.fairness.validate()?;
        self.diffusion.validate()?;
        self.evaluation.validate()?;
        self.training.validate(2)?;
        if self.epsilons.iter().any(Option::is_some) {
            self.privacy.spec(1.0).validate(0)?;
        }
        Ok(())
    }

    pub fn folds_to_run(&self) -> Vec<usize> {
        self.run_folds.clone().unwrap_or_else(|| (0..self.folds).collect())
    }
}
