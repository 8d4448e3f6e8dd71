//! Velocity fields.
//!
//! Every field maps `(x, t, label)` to a velocity of the same dimension. The
//! analytic oracles here have closed-form kinetic energies, which is what the
//! sampler and the acceptance suite check against.
//!
//! # Gaussian optimal transport in Eulerian form
//!
//! The optimal map from N(0, I) to N(μ, Σ) is T(x) = μ + A x with A = Σ^{1/2}.
//! Displacement interpolation moves each particle on a straight line
//!
//! ```text
//! x(t) = (1 - t) x₀ + t T(x₀) = t μ + M_t x₀,    M_t = (1 - t) I + t A
//! ```
//!
//! with constant velocity μ + (A - I) x₀. Inverting the characteristic,
//! x₀ = M_t⁻¹ (x - t μ), gives the Eulerian field
//!
//! ```text
//! v(x, t) = μ + (A - I) M_t⁻¹ (x - t μ).
//! ```
//!
//! A and M_t share eigenvectors, so with A = V diag(a) Vᵀ the operator
//! (A - I) M_t⁻¹ is V diag((aₖ - 1) / (1 - t + t aₖ)) Vᵀ.
//!
//! Because the velocity is constant along characteristics, forward Euler is
//! exact on this field for any step count, and the per-path energy is
//! ½‖μ + (A - I) x₀‖², whose mean over x₀ ~ N(0, I) is
//! ½(‖μ‖² + tr((A - I)²)) = ½ W₂²(N(0, I), N(μ, Σ)).

use crate::error::{KpeError, Result};
use crate::mathcore::{eigh_sym, spd_sqrt, sq_norm, Matrix};
use crate::mixture::GaussianMixture;

pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of class labels the field understands; 0 for unconditional fields.
    fn num_classes(&self) -> usize {
        0
    }

    /// Unchecked evaluation. Callers go through [`eval`] unless they have
    /// already validated the inputs.
    fn velocity(&self, x: &[f64], t: f64, label: Option<usize>) -> Vec<f64>;
}

/// Checked evaluation of a field.
pub fn eval(
    field: &dyn VelocityField,
    x: &[f64],
    t: f64,
    label: Option<usize>,
) -> Result<Vec<f64>> {
    if x.len() != field.dim() {
        return Err(KpeError::validation(format!(
            "state has dimension {}, field expects {}",
            x.len(),
            field.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KpeError::validation("state has non-finite coordinates"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(KpeError::validation(format!("time {t} outside [0, 1]")));
    }
    if let Some(l) = label {
        if field.num_classes() > 0 && l >= field.num_classes() {
            return Err(KpeError::validation(format!(
                "label {l} outside vocabulary of {}",
                field.num_classes()
            )));
        }
    }
    Ok(field.velocity(x, t, label))
}

/// Classifier-free guidance mix: v_u + w (v_c - v_u).
///
/// w = 0 and w = 1 return the corresponding input bit for bit.
pub fn cfg_mix(v_uncond: &[f64], v_cond: &[f64], w: f64) -> Result<Vec<f64>> {
    if v_uncond.len() != v_cond.len() {
        return Err(KpeError::validation(format!(
            "guidance mix dimension mismatch: {} vs {}",
            v_uncond.len(),
            v_cond.len()
        )));
    }
    Ok(mix_unchecked(v_uncond, v_cond, w))
}

fn mix_unchecked(v_uncond: &[f64], v_cond: &[f64], w: f64) -> Vec<f64> {
    if w == 1.0 {
        return v_cond.to_vec();
    }
    if w == 0.0 {
        return v_uncond.to_vec();
    }
    v_uncond
        .iter()
        .zip(v_cond)
        .map(|(u, c)| u + w * (c - u))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub label: usize,
}

impl GuidanceConfig {
    pub fn new(scale: f64, label: usize) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(KpeError::validation(format!(
                "guidance scale must be finite and non-negative, got {scale}"
            )));
        }
        Ok(GuidanceConfig { scale, label })
    }
}

/// A conditional field driven through the guidance mixer. The `label`
/// argument of `velocity` is ignored; the guided label is fixed.
pub struct GuidedField<'a> {
    inner: &'a dyn VelocityField,
    guidance: GuidanceConfig,
}

impl<'a> GuidedField<'a> {
    pub fn new(inner: &'a dyn VelocityField, guidance: GuidanceConfig) -> Result<Self> {
        if inner.num_classes() == 0 {
            return Err(KpeError::validation(
                "guidance needs a class-conditional field",
            ));
        }
        if guidance.label >= inner.num_classes() {
            return Err(KpeError::validation(format!(
                "guidance label {} outside vocabulary of {}",
                guidance.label,
                inner.num_classes()
            )));
        }
        Ok(GuidedField { inner, guidance })
    }
}

impl VelocityField for GuidedField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, _label: Option<usize>) -> Vec<f64> {
        let w = self.guidance.scale;
        let cond = self.inner.velocity(x, t, Some(self.guidance.label));
        if w == 1.0 {
            return cond;
        }
        let uncond = self.inner.velocity(x, t, None);
        mix_unchecked(&uncond, &cond, w)
    }
}

#[derive(Debug, Clone)]
pub struct ConstantField {
    c: Vec<f64>,
}

impl ConstantField {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
            return Err(KpeError::validation("constant field needs finite, non-empty c"));
        }
        Ok(ConstantField { c })
    }

    pub fn value(&self) -> &[f64] {
        &self.c
    }
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn velocity(&self, _x: &[f64], _t: f64, _label: Option<usize>) -> Vec<f64> {
        self.c.clone()
    }
}

#[derive(Debug, Clone)]
pub struct GaussianOtParams {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    /// Σ^{1/2}
    pub a: Matrix,
}

/// Displacement-interpolation field from N(0, I) to N(μ, Σ).
#[derive(Debug, Clone)]
pub struct GaussianOtField {
    params: GaussianOtParams,
    eigvals: Vec<f64>,
    eigvecs: Matrix,
}

impl GaussianOtField {
    pub fn new(mu: Vec<f64>, sigma: Matrix) -> Result<Self> {
        if sigma.rows() != mu.len() || sigma.cols() != mu.len() || mu.is_empty() {
            return Err(KpeError::validation(format!(
                "mean has dimension {}, covariance is {}x{}",
                mu.len(),
                sigma.rows(),
                sigma.cols()
            )));
        }
        let a = spd_sqrt(&sigma)?;
        let eig = eigh_sym(&a)?;
        Ok(GaussianOtField {
            params: GaussianOtParams { mu, sigma, a },
            eigvals: eig.values,
            eigvecs: eig.vectors,
        })
    }

    /// N(0, I) → N(0, σ² I): every particle is scaled radially by σ.
    pub fn scaling(dim: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(KpeError::validation("scaling flow needs sigma > 0"));
        }
        GaussianOtField::new(vec![0.0; dim], Matrix::identity(dim).scale(sigma * sigma))
    }

    pub fn params(&self) -> &GaussianOtParams {
        &self.params
    }

    /// ½(‖μ‖² + tr((A - I)²)), the mean path energy and half the squared
    /// 2-Wasserstein distance from the standard normal.
    pub fn expected_kpe(&self) -> f64 {
        0.5 * (sq_norm(&self.params.mu) + self.eigvals.iter().map(|a| (a - 1.0).powi(2)).sum::<f64>())
    }

    /// T(x₀) = μ + A x₀.
    pub fn transport(&self, x0: &[f64]) -> Vec<f64> {
        let ax = self.params.a.matvec(x0);
        ax.iter().zip(&self.params.mu).map(|(a, m)| a + m).collect()
    }

    /// Position at time t of the particle that started at x₀.
    pub fn characteristic(&self, x0: &[f64], t: f64) -> Vec<f64> {
        let tx = self.transport(x0);
        x0.iter().zip(&tx).map(|(a, b)| (1.0 - t) * a + t * b).collect()
    }

    /// Velocity carried along the characteristic of x₀.
    pub fn characteristic_velocity(&self, x0: &[f64]) -> Vec<f64> {
        let tx = self.transport(x0);
        tx.iter().zip(x0).map(|(a, b)| a - b).collect()
    }

    /// ½‖μ + (A - I) x₀‖².
    pub fn path_energy(&self, x0: &[f64]) -> f64 {
        0.5 * sq_norm(&self.characteristic_velocity(x0))
    }

    pub fn gaussian_ot_velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.params.mu.len();
        let shifted: Vec<f64> = x
            .iter()
            .zip(&self.params.mu)
            .map(|(xi, mi)| xi - t * mi)
            .collect();
        let v = &self.eigvecs;
        let mut proj = vec![0.0; d];
        for (k, p) in proj.iter_mut().enumerate() {
            let coeff: f64 = (0..d).map(|i| v[(i, k)] * shifted[i]).sum();
            let a = self.eigvals[k];
            *p = coeff * (a - 1.0) / (1.0 - t + t * a);
        }
        (0..d)
            .map(|i| self.params.mu[i] + (0..d).map(|k| v[(i, k)] * proj[k]).sum::<f64>())
            .collect()
    }
}

impl VelocityField for GaussianOtField {
    fn dim(&self) -> usize {
        self.params.mu.len()
    }

    fn velocity(&self, x: &[f64], t: f64, _label: Option<usize>) -> Vec<f64> {
        self.gaussian_ot_velocity(x, t)
    }
}

/// Marginal velocity of the straight interpolation x_t = (1 - t) x₀ + t x₁
/// with x₀ ~ N(0, I) drawn independently of x₁ ~ a Gaussian mixture:
/// v(x, t) = E[x₁ - x₀ | x_t = x]. Conditioning on a label restricts the
/// expectation to that class's components, which gives the exact
/// class-conditional field; `None` gives the unconditional one.
#[derive(Debug, Clone)]
pub struct MixtureFlowField {
    mixture: GaussianMixture,
    comps: Vec<PreparedComponent>,
    num_classes: usize,
}

#[derive(Debug, Clone)]
struct PreparedComponent {
    label: usize,
    log_weight: f64,
    mean: Vec<f64>,
    eigvals: Vec<f64>,
    eigvecs: Matrix,
}

impl MixtureFlowField {
    pub fn new(mixture: GaussianMixture) -> Result<Self> {
        let comps = mixture
            .components()
            .iter()
            .map(|c| {
                let eig = eigh_sym(&c.cov)?;
                Ok(PreparedComponent {
                    label: c.label,
                    log_weight: c.weight.ln(),
                    mean: c.mean.clone(),
                    eigvals: eig.values,
                    eigvecs: eig.vectors,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let num_classes = mixture.labels().last().map_or(0, |l| l + 1);
        Ok(MixtureFlowField {
            mixture,
            comps,
            num_classes,
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl VelocityField for MixtureFlowField {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn velocity(&self, x: &[f64], t: f64, label: Option<usize>) -> Vec<f64> {
        let d = self.dim();
        let s = 1.0 - t;
        let mut log_resp = Vec::with_capacity(self.comps.len());
        let mut vels = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            if label.is_some_and(|l| l != c.label) {
                continue;
            }
            // x_t | component ~ N(t μ, s² I + t² S); in S's eigenbasis both
            // the covariance and the regression gain are diagonal.
            let diff: Vec<f64> = x.iter().zip(&c.mean).map(|(xi, mi)| xi - t * mi).collect();
            let mut maha = 0.0;
            let mut log_det = 0.0;
            let mut gain = vec![0.0; d];
            for k in 0..d {
                let coeff: f64 = (0..d).map(|i| c.eigvecs[(i, k)] * diff[i]).sum();
                let var = s * s + t * t * c.eigvals[k];
                maha += coeff * coeff / var;
                log_det += var.ln();
                gain[k] = coeff * (t * c.eigvals[k] - s) / var;
            }
            log_resp.push(c.log_weight - 0.5 * (maha + log_det));
            vels.push(
                (0..d)
                    .map(|i| c.mean[i] + (0..d).map(|k| c.eigvecs[(i, k)] * gain[k]).sum::<f64>())
                    .collect::<Vec<f64>>(),
            );
        }
        let max = log_resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_resp.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; d];
        for (w, v) in weights.iter().zip(&vels) {
            for (o, vi) in out.iter_mut().zip(v) {
                *o += w / total * vi;
            }
        }
        out
    }
}
