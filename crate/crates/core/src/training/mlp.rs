//! A small fully connected velocity network with a hand-written backward
//! pass.
//!
//! Input layout per row: `[x (dim) | time features (2·freqs) | label embedding]`.
//! Time features are `sin(π 2ᵏ t), cos(π 2ᵏ t)` for k = 0..freqs. Each label
//! has a learned embedding row; the null token used for the unconditional
//! branch is the fixed zero vector. Hidden layers use tanh; the output layer
//! is linear.
//!
//! All parameters live in one flat vector so the optimizer and the gradient
//! check can treat them uniformly.

use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::fields::VelocityField;
use crate::mathcore::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn input_width(&self) -> usize {
        self.dim + 2 * self.time_freqs + self.embed_dim
    }

    /// Widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(self.dim);
        w
    }

}

#[derive(Debug, Clone, Copy)]
struct LayerSpan {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MlpFieldRepr", into = "MlpFieldRepr")]
pub struct MlpField {
    arch: MlpArchitecture,
    params: Vec<f64>,
    layers: Vec<LayerSpan>,
}

#[derive(Serialize, Deserialize)]
struct MlpFieldRepr {
    architecture: MlpArchitecture,
    params: Vec<f64>,
}

impl TryFrom<MlpFieldRepr> for MlpField {
    type Error = KpeError;

    fn try_from(r: MlpFieldRepr) -> Result<Self> {
        MlpField::from_params(r.architecture, r.params)
    }
}

impl From<MlpField> for MlpFieldRepr {
    fn from(f: MlpField) -> Self {
        MlpFieldRepr {
            architecture: f.arch,
            params: f.params,
        }
    }
}

fn layout(arch: &MlpArchitecture) -> (Vec<LayerSpan>, usize) {
    let mut offset = arch.num_classes * arch.embed_dim;
    let widths = arch.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let span = LayerSpan {
                w: offset,
                b: offset + w[0] * w[1],
                n_in: w[0],
                n_out: w[1],
            };
            offset += w[0] * w[1] + w[1];
            span
        })
        .collect();
    (layers, offset)
}

/// Per-row activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    acts: Vec<Vec<f64>>,
    label_row: Option<usize>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], Vec::as_slice)
    }
}

impl MlpField {
    /// Random initialization: weights ~ N(0, 1/fan_in), zero biases, zero
    /// label embeddings (so every label starts out equal to the null token).
    pub fn init(arch: MlpArchitecture, rng: &mut RngStream) -> Result<Self> {
        validate_arch(&arch)?;
        let (layers, total) = layout(&arch);
        let mut params = vec![0.0; total];
        for span in &layers {
            let scale = 1.0 / (span.n_in as f64).sqrt();
            for p in &mut params[span.w..span.w + span.n_in * span.n_out] {
                *p = rng.gauss() * scale;
            }
        }
        Ok(MlpField {
            arch,
            params,
            layers,
        })
    }

    pub fn from_params(arch: MlpArchitecture, params: Vec<f64>) -> Result<Self> {
        validate_arch(&arch)?;
        let (layers, total) = layout(&arch);
        if params.len() != total {
            return Err(KpeError::validation(format!(
                "architecture needs {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(KpeError::validation("model parameters are not finite"));
        }
        Ok(MlpField {
            arch,
            params,
            layers,
        })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn label_row(&self, label: Option<usize>) -> Option<usize> {
        label.filter(|&l| l < self.arch.num_classes)
    }

    fn input(&self, x: &[f64], t: f64, label_row: Option<usize>) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.arch.input_width());
        u.extend_from_slice(x);
        let mut freq = std::f64::consts::PI;
        for _ in 0..self.arch.time_freqs {
            u.push((freq * t).sin());
            u.push((freq * t).cos());
            freq *= 2.0;
        }
        let e = self.arch.embed_dim;
        match label_row {
            Some(r) => u.extend_from_slice(&self.params[r * e..(r + 1) * e]),
            None => u.resize(u.len() + e, 0.0),
        }
        u
    }

    pub fn forward(&self, x: &[f64], t: f64, label: Option<usize>) -> ForwardCache {
        let label_row = self.label_row(label);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.input(x, t, label_row));
        let last = self.layers.len() - 1;
        for (l, span) in self.layers.iter().enumerate() {
            let a = &acts[l];
            let w = &self.params[span.w..span.w + span.n_in * span.n_out];
            let b = &self.params[span.b..span.b + span.n_out];
            let mut z: Vec<f64> = w
                .chunks_exact(span.n_in)
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>())
                .collect();
            if l != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        ForwardCache { acts, label_row }
    }

    /// Accumulates ∂L/∂θ into `grad` given ∂L/∂output for one row.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let mut delta = d_out.to_vec();
        for (l, span) in self.layers.iter().enumerate().rev() {
            let a_in = &cache.acts[l];
            {
                let gw = &mut grad[span.w..span.w + span.n_in * span.n_out];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (g, &a) in gw[o * span.n_in..(o + 1) * span.n_in].iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
            }
            for (g, &d) in grad[span.b..span.b + span.n_out].iter_mut().zip(&delta) {
                *g += d;
            }
            let w = &self.params[span.w..span.w + span.n_in * span.n_out];
            let mut prev = vec![0.0; span.n_in];
            for (o, &d) in delta.iter().enumerate() {
                for (p, &wi) in prev.iter_mut().zip(&w[o * span.n_in..(o + 1) * span.n_in]) {
                    *p += d * wi;
                }
            }
            if l > 0 {
                for (p, &a) in prev.iter_mut().zip(a_in) {
                    *p *= 1.0 - a * a;
                }
            } else if let Some(r) = cache.label_row {
                let e = self.arch.embed_dim;
                let start = self.arch.dim + 2 * self.arch.time_freqs;
                let row = r * e;
                for (g, &p) in grad[row..row + e].iter_mut().zip(&prev[start..]) {
                    *g += p;
                }
            }
            delta = prev;
        }
    }
}

fn validate_arch(arch: &MlpArchitecture) -> Result<()> {
    if arch.dim == 0 {
        return Err(KpeError::validation("model dimension must be positive"));
    }
    if arch.hidden.contains(&0) {
        return Err(KpeError::validation("hidden widths must be positive"));
    }
    Ok(())
}

impl VelocityField for MlpField {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn velocity(&self, x: &[f64], t: f64, label: Option<usize>) -> Vec<f64> {
        let mut cache = self.forward(x, t, label);
        cache.acts.pop().unwrap_or_default()
    }
}
