//! Class-margin proxy on labeled Gaussian mixtures.
//!
//! The score of class c at x is the exact log posterior log p(c | x) under
//! the known mixture. The margin is the true class score minus the best
//! competing score, and is tracked across energy terciles.

use serde::{Deserialize, Serialize};

use crate::analysis::stats::{group_compare, GroupSummary, StatsReport};
use crate::error::{KpeError, Result};
use crate::mixture::GaussianMixture;
use crate::sampler::{tercile_bins, Tercile};

/// (label, log posterior) pairs, sorted by label.
pub fn class_scores(mixture: &GaussianMixture, x: &[f64]) -> Result<Vec<(usize, f64)>> {
    mixture.class_log_posteriors(x)
}

/// score(true) - max over other classes.
pub fn margin(scores: &[(usize, f64)], true_class: usize) -> Result<f64> {
    if scores.len() < 2 {
        return Err(KpeError::validation("margin needs at least 2 classes"));
    }
    let own = scores
        .iter()
        .find(|(c, _)| *c == true_class)
        .map(|(_, s)| *s)
        .ok_or_else(|| KpeError::validation(format!("unknown true class {true_class}")))?;
    let best_other = scores
        .iter()
        .filter(|(c, _)| *c != true_class)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(own - best_other)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub id: usize,
    pub true_class: usize,
    pub scores: Vec<(usize, f64)>,
    pub margin: f64,
    pub kpe: f64,
    pub tercile: Tercile,
    pub guidance_scale: Option<f64>,
}

/// Builds margin records for generated samples. `finals[i]` was generated
/// for class `labels[i]` with energy `energies[i]`.
pub fn margin_records(
    mixture: &GaussianMixture,
    finals: &[Vec<f64>],
    labels: &[usize],
    energies: &[f64],
    guidance_scale: Option<f64>,
) -> Result<Vec<MarginRecord>> {
    if finals.len() != labels.len() || finals.len() != energies.len() {
        return Err(KpeError::validation("samples, labels and energies are misaligned"));
    }
    let bins = tercile_bins(energies)?;
    finals
        .iter()
        .zip(labels)
        .zip(energies)
        .zip(bins)
        .enumerate()
        .map(|(id, (((x, &label), &kpe), tercile))| {
            let scores = class_scores(mixture, x)?;
            Ok(MarginRecord {
                id,
                true_class: label,
                margin: margin(&scores, label)?,
                scores,
                kpe,
                tercile,
                guidance_scale,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTrend {
    /// Margin summaries for the low, mid and high energy terciles.
    pub bins: Vec<GroupSummary>,
    /// High-tercile margins compared against low-tercile margins.
    pub high_vs_low: StatsReport,
}

impl SemanticTrend {
    pub fn median_rise(&self) -> f64 {
        self.bins[2].median - self.bins[0].median
    }
}

pub fn semantic_trend(energies: &[f64], margins: &[f64]) -> Result<SemanticTrend> {
    if energies.len() != margins.len() {
        return Err(KpeError::validation("energies and margins are misaligned"));
    }
    if energies.len() < 30 {
        return Err(KpeError::validation(format!(
            "semantic trend needs at least 30 samples, got {}",
            energies.len()
        )));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(KpeError::validation("margins must be finite"));
    }
    let bins = tercile_bins(energies)?;
    let pick = |b: Tercile| -> Vec<f64> {
        margins
            .iter()
            .zip(&bins)
            .filter(|(_, &t)| t == b)
            .map(|(m, _)| *m)
            .collect()
    };
    let (low, mid, high) = (pick(Tercile::Low), pick(Tercile::Mid), pick(Tercile::High));
    let summaries = [("low", &low), ("mid", &mid), ("high", &high)]
        .iter()
        .map(|(name, v)| GroupSummary::of(name, v))
        .collect();
    Ok(SemanticTrend {
        bins: summaries,
        high_vs_low: group_compare(&low, &high)?,
    })
}
