//! Flat JSON run configuration. Every key has a default; command-line flags
//! override the file value of the same name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::density::DensityMethod;
use crate::error::{KpeError, Result};
use crate::mixture::MixtureSpec;
use crate::sampler::Method;
use crate::training::{Coupling, TrainConfig};

use super::model::FieldSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Ring,
    TwoClass,
    Mixture,
    File,
}

/// Which point set the density surface is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSet {
    Generated,
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub dataset: DatasetKind,
    /// CSV of points for `dataset = "file"`; a `label` column is optional.
    pub dataset_path: Option<PathBuf>,
    pub dataset_size: usize,
    pub ring_modes: usize,
    pub ring_radius: f64,
    pub ring_std: f64,
    /// Inline target mixture; required for `dataset = "mixture"`, and used
    /// as the posterior model for semantics and analytic densities.
    pub mixture: Option<MixtureSpec>,
    /// Whether dataset labels condition the trained field.
    pub use_labels: bool,

    pub batch_size: usize,
    /// Training steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub rms_decay: f64,
    pub coupling: Coupling,
    pub label_dropout: f64,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub embed_dim: usize,

    /// Model file to sample from.
    pub model: Option<PathBuf>,
    /// Inline field, used when no model file is given.
    pub field: Option<FieldSpec>,
    pub n: usize,
    /// Integration steps per trajectory.
    pub n_steps: usize,
    pub method: Method,
    /// Guidance scales; empty means unguided sampling.
    pub guidance: Vec<f64>,
    /// Also write every intermediate state to the trajectory records.
    pub keep_states: bool,

    /// Trajectory record files to analyze.
    pub records: Vec<PathBuf>,
    pub density: Vec<DensityMethod>,
    pub k: usize,
    pub reference: ReferenceSet,
    pub grid_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            dataset: DatasetKind::Ring,
            dataset_path: None,
            dataset_size: 20_000,
            ring_modes: 8,
            ring_radius: 3.0,
            ring_std: 1.0,
            mixture: None,
            use_labels: true,
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            final_learning_rate: t.final_learning_rate,
            rms_decay: t.rms_decay,
            coupling: t.coupling,
            label_dropout: t.label_dropout,
            hidden: t.hidden,
            time_freqs: t.time_freqs,
            embed_dim: t.embed_dim,
            model: None,
            field: None,
            n: 1000,
            n_steps: 100,
            method: Method::Euler,
            guidance: Vec::new(),
            keep_states: false,
            records: Vec::new(),
            density: vec![DensityMethod::Kde],
            k: 50,
            reference: ReferenceSet::Generated,
            grid_size: 40,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KpeError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            KpeError::Validation(m) => KpeError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| KpeError::validation(format!("config: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            final_learning_rate: self.final_learning_rate,
            rms_decay: self.rms_decay,
            coupling: self.coupling,
            label_dropout: self.label_dropout,
            seed: self.seed,
            hidden: self.hidden.clone(),
            time_freqs: self.time_freqs,
            embed_dim: self.embed_dim,
        }
    }

    pub fn validate_sampling(&self) -> Result<()> {
        if self.n == 0 {
            return Err(KpeError::validation("n must be at least 1"));
        }
        if self.n_steps == 0 {
            return Err(KpeError::validation("n_steps must be at least 1"));
        }
        if let Some(w) = self.guidance.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(KpeError::validation(format!("guidance scales must be non-negative, got {w}")));
        }
        Ok(())
    }

    pub fn validate_analysis(&self) -> Result<()> {
        if self.k == 0 {
            return Err(KpeError::validation("k must be at least 1"));
        }
        if self.grid_size < 2 {
            return Err(KpeError::validation("grid_size must be at least 2"));
        }
        if self.density.is_empty() {
            return Err(KpeError::validation("density must list at least one method"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"seed": 1, "nn_steps": 5}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("nn_steps"), "{err}");
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"n": 17, "method": "heun", "density": ["knn", "kde"]}"#).unwrap();
        assert_eq!(c.n, 17);
        assert_eq!(c.method, Method::Heun);
        assert_eq!(c.k, 50);
        assert_eq!(c.density.len(), 2);
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&s).unwrap(), c);
    }
}
