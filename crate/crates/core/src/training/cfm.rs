//! Conditional flow matching loss, its exact gradient, and a central
//! finite-difference check of that gradient.

use rayon::prelude::*;

use super::mlp::MlpField;
use crate::error::{KpeError, Result};

/// Rows processed sequentially per parallel task. Fixed so the reduction
/// order, and therefore the summed gradient, does not depend on the number
/// of worker threads.
const CHUNK_ROWS: usize = 16;

/// One minibatch of (noise, data, time, label) rows.
#[derive(Debug, Clone, Default)]
pub struct CfmBatch {
    pub x0: Vec<Vec<f64>>,
    pub x1: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    /// `None` selects the null (unconditional) token.
    pub labels: Vec<Option<usize>>,
}

impl CfmBatch {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let n = self.x0.len();
        if n == 0 || self.x1.len() != n || self.t.len() != n || self.labels.len() != n {
            return Err(KpeError::validation("batch rows are misaligned or empty"));
        }
        if self.x0.iter().chain(&self.x1).any(|r| r.len() != dim) {
            return Err(KpeError::validation(format!("batch rows must have dimension {dim}")));
        }
        if self.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(KpeError::validation("batch times must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Mean over rows of ‖v(x_t, t, label) - (x₁ - x₀)‖², x_t = (1 - t) x₀ + t x₁,
/// together with its gradient with respect to every parameter.
pub fn cfm_loss_and_grad(field: &MlpField, batch: &CfmBatch) -> Result<(f64, Vec<f64>)> {
    let dim = field.architecture().dim;
    batch.validate(dim)?;
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let n_params = field.num_params();

    let indices: Vec<usize> = (0..n).collect();
    let partials: Vec<(f64, Vec<f64>)> = indices
        .par_chunks(CHUNK_ROWS)
        .map(|rows| {
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for &i in rows {
                let t = batch.t[i];
                let (x0, x1) = (&batch.x0[i], &batch.x1[i]);
                let xt: Vec<f64> = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let cache = field.forward(&xt, t, batch.labels[i]);
                let out = cache.output();
                let mut d_out = vec![0.0; dim];
                for k in 0..dim {
                    let r = out[k] - (x1[k] - x0[k]);
                    loss += r * r;
                    d_out[k] = 2.0 * r * scale;
                }
                field.backward(&cache, &d_out, &mut grad);
            }
            (loss, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in partials {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok((loss * scale, grad))
}

pub fn cfm_loss(field: &MlpField, batch: &CfmBatch) -> Result<f64> {
    Ok(cfm_loss_and_grad(field, batch)?.0)
}

/// Absolute floor on the denominator of the relative error, so parameters
/// whose gradient is numerically zero do not report rounding noise as error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Largest |analytic - central difference| / max(|analytic|, |fd|, floor)
/// over all parameters.
pub fn grad_check(field: &MlpField, batch: &CfmBatch, epsilon: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(KpeError::validation(format!(
            "epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    let (_, analytic) = cfm_loss_and_grad(field, batch)?;
    let mut probe = field.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let up = cfm_loss(&probe, batch)?;
        probe.params_mut()[i] = orig - epsilon;
        let down = cfm_loss(&probe, batch)?;
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let denom = a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::RngStream;
    use crate::training::mlp::{Activation, MlpArchitecture};

    fn random_batch(rng: &mut RngStream, n: usize, dim: usize, classes: usize) -> CfmBatch {
        let mut b = CfmBatch::default();
        for i in 0..n {
            b.x0.push(rng.gauss_draw(dim));
            b.x1.push(rng.gauss_draw(dim).iter().map(|v| 2.0 * v + 1.0).collect());
            b.t.push(rng.uniform());
            b.labels.push(if classes > 0 && i % 3 != 0 { Some(i % classes) } else { None });
        }
        b
    }

    fn arch(hidden: Vec<usize>, classes: usize) -> MlpArchitecture {
        MlpArchitecture {
            dim: 2,
            hidden,
            time_freqs: 4,
            num_classes: classes,
            embed_dim: 2,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn zero_field_loss_is_squared_displacement() {
        let a = arch(vec![], 0);
        let n = MlpField::init(a.clone(), &mut RngStream::new(0, 0)).unwrap().num_params();
        let f = MlpField::from_params(a, vec![0.0; n]).unwrap();
        let batch = CfmBatch {
            x0: vec![vec![0.0, 0.0]],
            x1: vec![vec![3.0, 4.0]],
            t: vec![0.37],
            labels: vec![None],
        };
        assert_eq!(cfm_loss(&f, &batch).unwrap(), 25.0);
    }

    #[test]
    fn matching_field_has_zero_loss() {
        // A linear field with the identity on x and nothing else, evaluated on
        // pairs with x₁ = 2 x₀ at t = 0 (so x_t = x₀ and x₁ - x₀ = x₀).
        let a = arch(vec![], 0);
        let n = MlpField::init(a.clone(), &mut RngStream::new(0, 0)).unwrap().num_params();
        let mut params = vec![0.0; n];
        let in_w = a.input_width();
        let w0 = a.num_classes * a.embed_dim;
        params[w0] = 1.0;
        params[w0 + in_w + 1] = 1.0;
        let f = MlpField::from_params(a, params).unwrap();
        let mut batch = CfmBatch::default();
        let mut rng = RngStream::new(4, 0);
        for _ in 0..5 {
            let x0 = rng.gauss_draw(2);
            batch.x1.push(x0.iter().map(|v| 2.0 * v).collect());
            batch.x0.push(x0);
            batch.t.push(0.0);
            batch.labels.push(None);
        }
        assert!(cfm_loss(&f, &batch).unwrap() < 1e-28);
    }

    #[test]
    fn linear_field_gradient_is_exact() {
        let f = MlpField::init(arch(vec![], 2), &mut RngStream::new(5, 0)).unwrap();
        let batch = random_batch(&mut RngStream::new(6, 0), 6, 2, 2);
        assert!(grad_check(&f, &batch, 1e-4).unwrap() < 1e-8);
    }

    #[test]
    fn deep_field_gradient_matches_central_differences() {
        let f = MlpField::init(arch(vec![16, 16], 3), &mut RngStream::new(7, 0)).unwrap();
        let batch = random_batch(&mut RngStream::new(8, 0), 8, 2, 3);
        let err = grad_check(&f, &batch, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn epsilon_range_enforced() {
        let f = MlpField::init(arch(vec![4], 0), &mut RngStream::new(0, 0)).unwrap();
        let batch = random_batch(&mut RngStream::new(1, 0), 2, 2, 0);
        assert!(grad_check(&f, &batch, 1e-2).is_err());
        assert!(grad_check(&f, &batch, 1e-8).is_err());
    }

    #[test]
    fn misaligned_batch_rejected() {
        let f = MlpField::init(arch(vec![4], 0), &mut RngStream::new(0, 0)).unwrap();
        let mut batch = random_batch(&mut RngStream::new(1, 0), 3, 2, 0);
        batch.t.pop();
        assert!(cfm_loss(&f, &batch).is_err());
    }
}
