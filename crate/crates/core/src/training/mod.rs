//! Training a conditional MLP velocity field with the flow matching
//! objective, optionally with exact minibatch optimal-transport pairing and
//! label dropout for classifier-free guidance.

mod cfm;
mod mlp;

use serde::{Deserialize, Serialize};

pub use cfm::{cfm_loss, cfm_loss_and_grad, grad_check, CfmBatch, GRAD_CHECK_FLOOR};
pub use mlp::{Activation, ForwardCache, MlpArchitecture, MlpField};

use crate::error::{KpeError, Result};
use crate::mathcore::{hungarian, sq_dist, Matrix, RngStream};

/// Stream index reserved for parameter initialization.
const INIT_STREAM: u64 = 1 << 48;
/// Base stream index for per-step minibatch draws.
const STEP_STREAM_BASE: u64 = 1 << 49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    Independent,
    MinibatchOt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last step; linear decay in between.
    pub final_learning_rate: f64,
    /// Decay of the running second-moment estimate.
    pub rms_decay: f64,
    pub coupling: Coupling,
    pub label_dropout: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            steps: 4000,
            learning_rate: 3e-3,
            final_learning_rate: 3e-4,
            rms_decay: 0.999,
            coupling: Coupling::MinibatchOt,
            label_dropout: 0.1,
            seed: 0,
            hidden: vec![64, 64],
            time_freqs: 4,
            embed_dim: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size > 256 && self.coupling == Coupling::MinibatchOt {
            return Err(KpeError::validation(format!(
                "batch_size must be in [2, 256] for OT coupling (>= 2 otherwise), got {}",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(KpeError::validation("steps must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.final_learning_rate >= 0.0) {
            return Err(KpeError::validation("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(KpeError::validation("rms_decay must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(KpeError::validation(format!(
                "label_dropout must lie in [0, 1], got {}",
                self.label_dropout
            )));
        }
        Ok(())
    }
}

/// A finite training set. Labels, when present, are in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoints {
    pub points: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl LabeledPoints {
    pub fn unlabeled(points: Vec<Vec<f64>>) -> Self {
        LabeledPoints {
            points,
            labels: None,
            num_classes: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.points.is_empty() || dim == 0 {
            return Err(KpeError::validation("dataset is empty"));
        }
        if self.points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(KpeError::validation("dataset points must be finite with equal dimension"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(KpeError::validation("dataset labels misaligned with points"));
            }
            if let Some(bad) = labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(KpeError::validation(format!(
                    "label {bad} outside vocabulary of {}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Permutation `perm` such that pairing x0[i] with x1[perm[i]] minimizes
/// Σ‖x0ᵢ - x1_{perm(i)}‖².
pub fn ot_pair_permutation(x0: &[Vec<f64>], x1: &[Vec<f64>]) -> Result<Vec<usize>> {
    if x0.len() != x1.len() {
        return Err(KpeError::validation(format!(
            "OT pairing needs equal batch sizes, got {} and {}",
            x0.len(),
            x1.len()
        )));
    }
    if x0.len() > 256 {
        return Err(KpeError::validation("OT pairing batches are limited to 256 rows"));
    }
    let n = x0.len();
    let mut cost = Vec::with_capacity(n * n);
    for a in x0 {
        for b in x1 {
            cost.push(sq_dist(a, b));
        }
    }
    hungarian(&Matrix::from_vec(n, n, cost)?)
}

/// x1 reordered so that row i is the optimal partner of x0[i].
pub fn ot_pair(x0: &[Vec<f64>], x1: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let perm = ot_pair_permutation(x0, x1)?;
    Ok(perm.iter().map(|&j| x1[j].clone()).collect())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: MlpField,
    /// Minibatch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    /// Mean loss over the first `window` steps.
    pub fn initial_loss(&self, window: usize) -> f64 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[..w].iter().sum::<f64>() / w as f64
    }

    /// Mean loss over the last `window` steps.
    pub fn final_loss(&self, window: usize) -> f64 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64
    }
}

fn draw_batch(config: &TrainConfig, data: &LabeledPoints, step: usize) -> Result<CfmBatch> {
    let mut rng = RngStream::new(config.seed, STEP_STREAM_BASE + step as u64);
    let dim = data.dim();
    let b = config.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| rng.below(data.points.len())).collect();
    let mut x1: Vec<Vec<f64>> = idx.iter().map(|&i| data.points[i].clone()).collect();
    let mut labels: Vec<Option<usize>> = match &data.labels {
        Some(l) => idx.iter().map(|&i| Some(l[i])).collect(),
        None => vec![None; b],
    };
    let x0: Vec<Vec<f64>> = (0..b).map(|_| rng.gauss_draw(dim)).collect();
    let t: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();

    if config.coupling == Coupling::MinibatchOt {
        // Pair within each label group so every class still sees i.i.d.
        // standard-normal sources.
        let mut groups: Vec<Option<usize>> = labels.clone();
        groups.sort_unstable();
        groups.dedup();
        let mut new_x1 = x1.clone();
        for g in groups {
            let rows: Vec<usize> = (0..b).filter(|&i| labels[i] == g).collect();
            let src: Vec<Vec<f64>> = rows.iter().map(|&i| x0[i].clone()).collect();
            let dst: Vec<Vec<f64>> = rows.iter().map(|&i| x1[i].clone()).collect();
            let perm = ot_pair_permutation(&src, &dst)?;
            for (k, &row) in rows.iter().enumerate() {
                new_x1[row] = dst[perm[k]].clone();
            }
        }
        x1 = new_x1;
    }

    if data.labels.is_some() && config.label_dropout > 0.0 {
        for l in labels.iter_mut() {
            if rng.uniform() < config.label_dropout {
                *l = None;
            }
        }
    }

    Ok(CfmBatch { x0, x1, t, labels })
}

/// Trains a field on `data`. Parameter updates use a momentum-free adaptive
/// step: a running mean of squared gradients scales each coordinate.
pub fn train(config: &TrainConfig, data: &LabeledPoints) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    let arch = MlpArchitecture {
        dim: data.dim(),
        hidden: config.hidden.clone(),
        time_freqs: config.time_freqs,
        num_classes: data.num_classes,
        embed_dim: config.embed_dim,
        activation: Activation::Tanh,
    };
    let mut field = MlpField::init(arch, &mut RngStream::new(config.seed, INIT_STREAM))?;
    let mut second_moment = vec![0.0; field.num_params()];
    let mut losses = Vec::with_capacity(config.steps);
    let beta = config.rms_decay;

    for step in 0..config.steps {
        let batch = draw_batch(config, data, step)?;
        let (loss, grad) = cfm_loss_and_grad(&field, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(KpeError::Training {
                step,
                reason: format!("non-finite loss or gradient (loss = {loss})"),
            });
        }
        losses.push(loss);
        let frac = if config.steps > 1 {
            step as f64 / (config.steps - 1) as f64
        } else {
            0.0
        };
        let lr = config.learning_rate + (config.final_learning_rate - config.learning_rate) * frac;
        let correction = 1.0 - beta.powi(step as i32 + 1);
        for ((p, v), g) in field.params_mut().iter_mut().zip(&mut second_moment).zip(&grad) {
            *v = beta * *v + (1.0 - beta) * g * g;
            *p -= lr * g / ((*v / correction).sqrt() + 1e-8);
        }
    }
    Ok(TrainOutcome { field, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::VelocityField;
    use crate::mathcore::assignment_cost;

    #[test]
    fn ot_pair_identity_and_swap() {
        let x: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![5.0]];
        assert_eq!(ot_pair_permutation(&x, &x).unwrap(), vec![0, 1, 2]);
        let x0 = vec![vec![0.0], vec![1.0]];
        let x1 = vec![vec![1.0], vec![0.0]];
        assert_eq!(ot_pair(&x0, &x1).unwrap(), vec![vec![0.0], vec![1.0]]);
        assert!(ot_pair(&x0, &x1[..1]).is_err());
    }

    #[test]
    fn ot_pair_never_increases_pair_cost() {
        let mut rng = RngStream::new(12, 0);
        for _ in 0..20 {
            let x0: Vec<Vec<f64>> = (0..32).map(|_| rng.gauss_draw(2)).collect();
            let x1: Vec<Vec<f64>> = (0..32).map(|_| rng.gauss_draw(2).iter().map(|v| v * 3.0 + 1.0).collect()).collect();
            let before: f64 = x0.iter().zip(&x1).map(|(a, b)| sq_dist(a, b)).sum();
            let paired = ot_pair(&x0, &x1).unwrap();
            let after: f64 = x0.iter().zip(&paired).map(|(a, b)| sq_dist(a, b)).sum();
            assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn ot_pair_six_rows_is_exhaustive_optimum() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let mut rng = RngStream::new(99, 0);
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for _ in 0..10 {
            let x0: Vec<Vec<f64>> = (0..6).map(|_| rng.gauss_draw(3)).collect();
            let x1: Vec<Vec<f64>> = (0..6).map(|_| rng.gauss_draw(3)).collect();
            let cost = Matrix::from_vec(6, 6, x0.iter().flat_map(|a| x1.iter().map(move |b| sq_dist(a, b))).collect()).unwrap();
            let best = perms.iter().map(|p| assignment_cost(&cost, p)).fold(f64::INFINITY, f64::min);
            let perm = ot_pair_permutation(&x0, &x1).unwrap();
            assert!((assignment_cost(&cost, &perm) - best).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.label_dropout = 1.5;
        assert!(c.validate().is_err());
    }

    fn small_config(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            steps,
            hidden: vec![32, 32],
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let data = LabeledPoints::unlabeled((0..200).map(|i| vec![(i as f64).sin(), (i as f64).cos()]).collect());
        let cfg = small_config(30, 5);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| train(&cfg, &data).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.field.params(), b.field.params());
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn point_mass_is_reached() {
        let target = vec![1.5, -0.5];
        let data = LabeledPoints::unlabeled(vec![target.clone(); 64]);
        let out = train(&small_config(1500, 1), &data).unwrap();
        let mut rng = RngStream::new(77, 0);
        let n = 1024;
        let mut mean = [0.0, 0.0];
        for _ in 0..n {
            let mut x = rng.gauss_draw(2);
            let steps = 50;
            for k in 0..steps {
                let v = out.field.velocity(&x, k as f64 / steps as f64, None);
                for (xi, vi) in x.iter_mut().zip(&v) {
                    *xi += vi / steps as f64;
                }
            }
            mean[0] += x[0] / n as f64;
            mean[1] += x[1] / n as f64;
        }
        let err = ((mean[0] - target[0]).powi(2) + (mean[1] - target[1]).powi(2)).sqrt();
        assert!(err < 0.1, "mean sample {mean:?}");
    }

    #[test]
    fn full_dropout_makes_labels_match_unconditional() {
        let data = LabeledPoints {
            points: (0..100).map(|i| vec![i as f64 / 50.0, 1.0]).collect(),
            labels: Some((0..100).map(|i| i % 3).collect()),
            num_classes: 3,
        };
        let cfg = TrainConfig {
            label_dropout: 1.0,
            ..small_config(50, 2)
        };
        let field = train(&cfg, &data).unwrap().field;
        let x = [0.2, -0.3];
        for label in 0..3 {
            assert_eq!(field.velocity(&x, 0.6, Some(label)), field.velocity(&x, 0.6, None));
        }
    }

    #[test]
    fn invalid_labels_rejected() {
        let data = LabeledPoints {
            points: vec![vec![0.0], vec![1.0]],
            labels: Some(vec![0, 4]),
            num_classes: 2,
        };
        assert!(train(&small_config(1, 0), &data).is_err());
    }
}
