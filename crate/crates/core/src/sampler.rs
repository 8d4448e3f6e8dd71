//! ODE sampling from noise to data with kinetic path energy bookkeeping.
//!
//! The energy E = ½∫‖v‖² dt is accumulated by left-Riemann quadrature over
//! exactly the velocity evaluations the stepper already makes, so recording
//! it costs nothing extra. For Heun the predictor-stage evaluation is used.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::fields::{GuidanceConfig, GuidedField, VelocityField};
use crate::mathcore::{percentile_sorted, sorted_copy, sq_norm, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Euler,
    Heun,
}

impl FromStr for Method {
    type Err = KpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "heun" => Ok(Method::Heun),
            other => Err(KpeError::validation(format!(
                "method must be euler or heun, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Heun => "heun",
        })
    }
}

/// One integrated path on the uniform grid t_k = k/N.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// N + 1 states, row k at time t_k.
    pub states: Vec<Vec<f64>>,
    /// ‖v(x_k, t_k)‖² for k = 0..N.
    pub vel_sq_norms: Vec<f64>,
    pub kpe: f64,
    pub n_steps: usize,
    pub method: Method,
    /// (master_seed, stream_index) of the x0 draw, when sampled.
    pub seed: Option<(u64, u64)>,
    pub guidance: Option<GuidanceConfig>,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        1.0 / self.n_steps as f64
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    pub fn label(&self) -> Option<usize> {
        self.guidance.map(|g| g.label)
    }
}

/// ½·dt·Σ entries.
pub fn kpe_of(vel_sq_norms: &[f64], dt: f64) -> Result<f64> {
    if let Some(bad) = vel_sq_norms.iter().find(|v| !(**v >= 0.0)) {
        return Err(KpeError::validation(format!(
            "squared velocity norms must be non-negative, got {bad}"
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(KpeError::validation(format!("dt must be positive, got {dt}")));
    }
    Ok(0.5 * dt * vel_sq_norms.iter().sum::<f64>())
}

fn check_inputs(field: &dyn VelocityField, x0: &[f64], n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(KpeError::validation("n_steps must be at least 1"));
    }
    if x0.len() != field.dim() {
        return Err(KpeError::validation(format!(
            "initial state has dimension {}, field expects {}",
            x0.len(),
            field.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(KpeError::validation("initial state is not finite"));
    }
    Ok(())
}

fn finite_velocity(
    field: &dyn VelocityField,
    x: &[f64],
    t: f64,
    step: usize,
) -> Result<Vec<f64>> {
    let v = field.velocity(x, t, None);
    if v.len() != x.len() || v.iter().any(|c| !c.is_finite()) {
        return Err(KpeError::Integration {
            step,
            reason: format!("velocity at t = {t} is not finite"),
        });
    }
    Ok(v)
}

/// Advances `x` over grid steps `k_start..k_end` of an N-step grid, returning
/// the visited states (excluding the start) and recorded squared norms.
fn run_steps(
    field: &dyn VelocityField,
    x: &[f64],
    n_steps: usize,
    k_start: usize,
    k_end: usize,
    method: Method,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(k_end - k_start);
    let mut norms = Vec::with_capacity(k_end - k_start);
    let mut x = x.to_vec();
    for k in k_start..k_end {
        let t = k as f64 / n_steps as f64;
        let v = finite_velocity(field, &x, t, k)?;
        norms.push(sq_norm(&v));
        match method {
            Method::Euler => {
                for (xi, vi) in x.iter_mut().zip(&v) {
                    *xi += dt * vi;
                }
            }
            Method::Heun => {
                let pred: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi + dt * vi).collect();
                let t_next = (k + 1) as f64 / n_steps as f64;
                let v2 = finite_velocity(field, &pred, t_next, k)?;
                for ((xi, a), b) in x.iter_mut().zip(&v).zip(&v2) {
                    *xi += 0.5 * dt * (a + b);
                }
            }
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(KpeError::Integration {
                step: k,
                reason: "state became non-finite".into(),
            });
        }
        states.push(x.clone());
    }
    Ok((states, norms))
}

/// Integrates dx/dt = v(x, t) from t = 0 to 1 in `n_steps` uniform steps.
/// With guidance, the integrated field is the guidance mix for the guided
/// label and the recorded norms are those of the mixed velocity.
pub fn integrate(
    field: &dyn VelocityField,
    x0: &[f64],
    n_steps: usize,
    method: Method,
    guidance: Option<GuidanceConfig>,
) -> Result<Trajectory> {
    check_inputs(field, x0, n_steps)?;
    let (states, norms) = match guidance {
        Some(g) => {
            let guided = GuidedField::new(field, g)?;
            run_steps(&guided, x0, n_steps, 0, n_steps, method)?
        }
        None => run_steps(field, x0, n_steps, 0, n_steps, method)?,
    };
    let kpe = kpe_of(&norms, 1.0 / n_steps as f64)?;
    let mut all = Vec::with_capacity(n_steps + 1);
    all.push(x0.to_vec());
    all.extend(states);
    Ok(Trajectory {
        times: (0..=n_steps).map(|k| k as f64 / n_steps as f64).collect(),
        states: all,
        vel_sq_norms: norms,
        kpe,
        n_steps,
        method,
        seed: None,
        guidance,
    })
}

/// Energy of the partial path over grid steps `k_start..k_end` of an N-step
/// grid, starting from `x` at time k_start/N. Returns (final state, energy).
pub fn integrate_window(
    field: &dyn VelocityField,
    x: &[f64],
    n_steps: usize,
    k_start: usize,
    k_end: usize,
    method: Method,
) -> Result<(Vec<f64>, f64)> {
    check_inputs(field, x, n_steps)?;
    if k_start > k_end || k_end > n_steps {
        return Err(KpeError::validation("step window outside the grid"));
    }
    let (states, norms) = run_steps(field, x, n_steps, k_start, k_end, method)?;
    let end = states.last().cloned().unwrap_or_else(|| x.to_vec());
    Ok((end, 0.5 * norms.iter().sum::<f64>() / n_steps as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n: usize,
    pub n_steps: usize,
    pub method: Method,
    pub seed: u64,
    /// Guidance scale; trajectory i is guided towards label i mod num_classes.
    pub guidance_scale: Option<f64>,
}

/// Integrates `n` trajectories; trajectory i starts from the draw of stream
/// (seed, i). Output is ordered by index and independent of thread count.
pub fn sample_batch(field: &dyn VelocityField, config: &SampleConfig) -> Result<Vec<Trajectory>> {
    if config.n == 0 {
        return Err(KpeError::validation("n must be at least 1"));
    }
    if config.n_steps == 0 {
        return Err(KpeError::validation("n_steps must be at least 1"));
    }
    let classes = field.num_classes();
    if config.guidance_scale.is_some() && classes == 0 {
        return Err(KpeError::validation("guidance needs a class-conditional field"));
    }
    (0..config.n)
        .into_par_iter()
        .map(|i| {
            let x0 = RngStream::new(config.seed, i as u64).gauss_draw(field.dim());
            let guidance = config
                .guidance_scale
                .map(|w| GuidanceConfig::new(w, i % classes))
                .transpose()?;
            let mut traj = integrate(field, &x0, config.n_steps, config.method, guidance)
                .map_err(|e| KpeError::Trajectory {
                    index: i,
                    source: Box::new(e),
                })?;
            traj.seed = Some((config.seed, i as u64));
            Ok(traj)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tercile {
    Low,
    Mid,
    High,
}

impl fmt::Display for Tercile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tercile::Low => "low",
            Tercile::Mid => "mid",
            Tercile::High => "high",
        })
    }
}

/// Splits at the 100/3 and 200/3 percentiles (linear interpolation).
/// Values equal to a cut point go to the lower bin.
pub fn tercile_bins(energies: &[f64]) -> Result<Vec<Tercile>> {
    if energies.len() < 3 {
        return Err(KpeError::validation(format!(
            "tercile binning needs at least 3 values, got {}",
            energies.len()
        )));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(KpeError::validation("energies must be finite"));
    }
    let sorted = sorted_copy(energies);
    let q1 = percentile_sorted(&sorted, 100.0 / 3.0);
    let q2 = percentile_sorted(&sorted, 200.0 / 3.0);
    Ok(energies
        .iter()
        .map(|&e| {
            if e <= q1 {
                Tercile::Low
            } else if e <= q2 {
                Tercile::Mid
            } else {
                Tercile::High
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub id: usize,
    pub kpe: f64,
    pub tercile: Tercile,
    pub label: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub seed: Option<u64>,
}

pub fn energy_records(trajectories: &[Trajectory]) -> Result<Vec<EnergyRecord>> {
    let energies: Vec<f64> = trajectories.iter().map(|t| t.kpe).collect();
    let bins = tercile_bins(&energies)?;
    Ok(trajectories
        .iter()
        .zip(bins)
        .enumerate()
        .map(|(id, (t, tercile))| EnergyRecord {
            id,
            kpe: t.kpe,
            tercile,
            label: t.label(),
            guidance_scale: t.guidance.map(|g| g.scale),
            seed: t.seed.map(|s| s.0),
        })
        .collect())
}
