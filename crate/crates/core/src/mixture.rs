//! Labeled Gaussian mixtures: exact log densities, class posteriors and
//! sampling. These back the analytic oracles, the synthetic datasets and the
//! semantic margin proxy.

use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::mathcore::{cholesky, forward_substitute, log_sum_exp, Matrix, RngStream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub label: usize,
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

/// Serialized form of a mixture. [`GaussianMixture::new`] validates it and
/// caches Cholesky factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

#[derive(Debug, Clone)]
struct Prepared {
    chol: Matrix,
    log_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    spec: MixtureSpec,
    dim: usize,
    prepared: Vec<Prepared>,
    labels: Vec<usize>,
}

impl GaussianMixture {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        let first = spec
            .components
            .first()
            .ok_or_else(|| KpeError::validation("mixture has no components"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(KpeError::validation("mixture dimension is zero"));
        }
        let mut total = 0.0;
        let mut prepared = Vec::with_capacity(spec.components.len());
        for (i, c) in spec.components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(KpeError::validation(format!(
                    "component {i}: weight must be positive, got {}",
                    c.weight
                )));
            }
            if c.mean.len() != dim || c.cov.rows() != dim || c.cov.cols() != dim {
                return Err(KpeError::validation(format!(
                    "component {i}: dimension mismatch (expected {dim})"
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(KpeError::validation(format!("component {i}: non-finite mean")));
            }
            let chol = cholesky(&c.cov).map_err(|e| {
                KpeError::validation(format!("component {i}: covariance not SPD ({e})"))
            })?;
            let log_det: f64 = (0..dim).map(|k| chol[(k, k)].ln()).sum::<f64>() * 2.0;
            prepared.push(Prepared {
                chol,
                log_norm: -0.5 * (dim as f64 * LN_2PI + log_det),
            });
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(KpeError::validation(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let mut labels: Vec<usize> = spec.components.iter().map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        Ok(GaussianMixture {
            spec,
            dim,
            prepared,
            labels,
        })
    }

    /// `n_modes` isotropic Gaussians evenly spaced on a circle, equal weights,
    /// each mode carrying its own label.
    pub fn ring(n_modes: usize, radius: f64, std: f64) -> Result<Self> {
        if n_modes == 0 || !(std > 0.0) {
            return Err(KpeError::validation("ring needs n_modes >= 1 and std > 0"));
        }
        let components = (0..n_modes)
            .map(|k| {
                let ang = 2.0 * std::f64::consts::PI * k as f64 / n_modes as f64;
                MixtureComponent {
                    label: k,
                    weight: 1.0 / n_modes as f64,
                    mean: vec![radius * ang.cos(), radius * ang.sin()],
                    cov: Matrix::from_diag(&[std * std, std * std]),
                }
            })
            .collect();
        GaussianMixture::new(MixtureSpec { components })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.spec.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sorted distinct class labels.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// log(wᵢ N(x; μᵢ, Σᵢ)) for each component.
    pub fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.spec
            .components
            .iter()
            .zip(&self.prepared)
            .map(|(c, p)| {
                let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(a, b)| a - b).collect();
                let z = forward_substitute(&p.chol, &diff);
                let maha: f64 = z.iter().map(|v| v * v).sum();
                c.weight.ln() + p.log_norm - 0.5 * maha
            })
            .collect()
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    /// log p(c | x) for every label, in `labels()` order.
    pub fn class_log_posteriors(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.check_point(x)?;
        let terms = self.component_log_terms(x);
        let total = log_sum_exp(&terms);
        Ok(self
            .labels
            .iter()
            .map(|&label| {
                let class_terms: Vec<f64> = self
                    .spec
                    .components
                    .iter()
                    .zip(&terms)
                    .filter(|(c, _)| c.label == label)
                    .map(|(_, t)| *t)
                    .collect();
                (label, log_sum_exp(&class_terms) - total)
            })
            .collect())
    }

    /// Draws one labeled point. Component choice and the Gaussian draw both
    /// come from `rng`.
    pub fn sample(&self, rng: &mut RngStream) -> (Vec<f64>, usize) {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut idx = self.spec.components.len() - 1;
        for (i, c) in self.spec.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                idx = i;
                break;
            }
        }
        let z = rng.gauss_draw(self.dim);
        let c = &self.spec.components[idx];
        let l = &self.prepared[idx].chol;
        let x = c
            .mean
            .iter()
            .enumerate()
            .map(|(i, m)| m + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>())
            .collect();
        (x, c.label)
    }

    /// Sub-mixture of the components carrying `label`, weights renormalized.
    pub fn restrict_to_label(&self, label: usize) -> Result<GaussianMixture> {
        let comps: Vec<MixtureComponent> = self
            .spec
            .components
            .iter()
            .filter(|c| c.label == label)
            .cloned()
            .collect();
        if comps.is_empty() {
            return Err(KpeError::validation(format!("no components with label {label}")));
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        let components = comps
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect();
        GaussianMixture::new(MixtureSpec { components })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(KpeError::validation(format!(
                "point has dimension {}, mixture has {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KpeError::validation("point has non-finite coordinates"));
        }
        Ok(())
    }
}
