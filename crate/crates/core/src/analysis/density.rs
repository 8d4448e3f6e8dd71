//! Density estimates on low-dimensional point sets: k-nearest-neighbour and
//! Gaussian KDE with Scott's rule, plus a PCA projection to two dimensions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::mathcore::special::ln_gamma;
use crate::mathcore::{eigh_sym, log_sum_exp, sq_dist, Matrix};
use crate::mixture::{GaussianMixture, MixtureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMethod {
    Knn,
    Kde,
    Analytic,
}

impl std::str::FromStr for DensityMethod {
    type Err = KpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(DensityMethod::Knn),
            "kde" => Ok(DensityMethod::Kde),
            "analytic" => Ok(DensityMethod::Analytic),
            other => Err(KpeError::validation(format!(
                "density must be knn, kde or analytic, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for DensityMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DensityMethod::Knn => "knn",
            DensityMethod::Kde => "kde",
            DensityMethod::Analytic => "analytic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub method: DensityMethod,
    pub densities: Vec<f64>,
    pub log_densities: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bandwidths: Option<Vec<f64>>,
    /// Points whose k-NN radius was zero; their density is capped at the
    /// largest finite estimate.
    #[serde(default)]
    pub capped: Vec<usize>,
}

impl DensityEstimate {
    fn from_log(method: DensityMethod, log_densities: Vec<f64>) -> Self {
        DensityEstimate {
            method,
            densities: log_densities.iter().map(|l| l.exp()).collect(),
            log_densities,
            k: None,
            bandwidths: None,
            capped: Vec::new(),
        }
    }
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(KpeError::validation("point set is empty"));
    }
    if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(KpeError::validation("points must be finite and of equal dimension"));
    }
    Ok(d)
}

/// log of the volume of the unit ball in R^d.
pub fn ln_unit_ball_volume(d: usize) -> f64 {
    let h = d as f64 / 2.0;
    h * std::f64::consts::PI.ln() - ln_gamma(h + 1.0)
}

fn kth_smallest(mut dists: Vec<f64>, k: usize) -> f64 {
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

fn knn_from_radii(radii: Vec<f64>, k: usize, norm: f64, d: usize) -> Result<DensityEstimate> {
    let ln_v = ln_unit_ball_volume(d);
    let mut logs: Vec<f64> = radii
        .iter()
        .map(|&r| (k as f64).ln() - norm.ln() - ln_v - d as f64 * r.ln())
        .collect();
    let capped: Vec<usize> = (0..logs.len()).filter(|&i| !logs[i].is_finite()).collect();
    if !capped.is_empty() {
        let max_finite = logs.iter().copied().filter(|l| l.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if !max_finite.is_finite() {
            return Err(KpeError::Domain("every k-NN radius is zero".into()));
        }
        for &i in &capped {
            logs[i] = max_finite;
        }
    }
    let mut est = DensityEstimate::from_log(DensityMethod::Knn, logs);
    est.k = Some(k);
    est.capped = capped;
    Ok(est)
}

/// ρ̂(xᵢ) = k / ((n - 1)·V_d·r_k(i)^d), with r_k the distance from xᵢ to its
/// k-th nearest other point.
pub fn knn_density(points: &[Vec<f64>], k: usize) -> Result<DensityEstimate> {
    let d = check_points(points)?;
    let n = points.len();
    if k == 0 || k >= n {
        return Err(KpeError::validation(format!("k must lie in [1, n), got k = {k}, n = {n}")));
    }
    let radii: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dists: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(&points[i], &points[j])).collect();
            kth_smallest(dists, k).sqrt()
        })
        .collect();
    knn_from_radii(radii, k, (n - 1) as f64, d)
}

/// k-NN density of `queries` with respect to a separate `reference` set,
/// k / (n_ref·V_d·r_k^d).
pub fn knn_density_against(reference: &[Vec<f64>], queries: &[Vec<f64>], k: usize) -> Result<DensityEstimate> {
    let d = check_points(reference)?;
    if check_points(queries)? != d {
        return Err(KpeError::validation("query and reference dimensions differ"));
    }
    if k == 0 || k > reference.len() {
        return Err(KpeError::validation(format!(
            "k must lie in [1, {}], got {k}",
            reference.len()
        )));
    }
    let radii: Vec<f64> = queries
        .par_iter()
        .map(|q| kth_smallest(reference.iter().map(|p| sq_dist(q, p)).collect(), k).sqrt())
        .collect();
    knn_from_radii(radii, k, reference.len() as f64, d)
}

/// Product-Gaussian KDE with per-dimension Scott bandwidths
/// h_j = σ̂_j·n^(-1/(d+4)).
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    points: Vec<Vec<f64>>,
    bandwidths: Vec<f64>,
    log_norm: f64,
}

impl Kde {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let d = check_points(points)?;
        let n = points.len();
        if n < 2 {
            return Err(KpeError::validation("KDE needs at least 2 points"));
        }
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let mut bandwidths = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = points.iter().map(|p| p[j]).collect();
            let sd = super::stats::sample_sd(&col);
            if !(sd > 0.0) {
                return Err(KpeError::validation(format!("dimension {j} has zero variance")));
            }
            bandwidths.push(sd * factor);
        }
        let log_norm = (n as f64).ln()
            + bandwidths.iter().map(|h| h.ln()).sum::<f64>()
            + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Kde {
            points: points.to_vec(),
            bandwidths,
            log_norm,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .points
            .iter()
            .map(|p| {
                -0.5 * p
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidths)
                    .map(|((a, b), h)| ((a - b) / h).powi(2))
                    .sum::<f64>()
            })
            .collect();
        log_sum_exp(&terms) - self.log_norm
    }

    pub fn evaluate(&self, queries: &[Vec<f64>]) -> Result<DensityEstimate> {
        if check_points(queries)? != self.bandwidths.len() {
            return Err(KpeError::validation("query dimension differs from the KDE"));
        }
        let logs = queries.par_iter().map(|q| self.log_density(q)).collect();
        let mut est = DensityEstimate::from_log(DensityMethod::Kde, logs);
        est.bandwidths = Some(self.bandwidths.clone());
        Ok(est)
    }
}

/// KDE fitted on `points` and evaluated at the same points (self term
/// included).
pub fn kde_density(points: &[Vec<f64>]) -> Result<DensityEstimate> {
    Kde::fit(points)?.evaluate(points)
}

/// Exact log Σ wᵢ N(x; μᵢ, Σᵢ) of a labeled Gaussian mixture.
pub fn mixture_logpdf(spec: &MixtureSpec, x: &[f64]) -> Result<f64> {
    GaussianMixture::new(spec.clone())?.logpdf(x)
}

pub fn analytic_density(mixture: &GaussianMixture, points: &[Vec<f64>]) -> Result<DensityEstimate> {
    let logs = points.iter().map(|p| mixture.logpdf(p)).collect::<Result<Vec<_>>>()?;
    Ok(DensityEstimate::from_log(DensityMethod::Analytic, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub explained_variance: f64,
    /// 2 × p loadings over the retained columns.
    pub loadings: Matrix,
    pub kept_columns: Vec<usize>,
    pub dropped_columns: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Set when the explained variance falls below 0.85.
    pub low_variance_warning: bool,
}

impl Embedding2D {
    /// Projects a new feature row with the fitted standardization.
    pub fn project(&self, row: &[f64]) -> [f64; 2] {
        let z: Vec<f64> = self
            .kept_columns
            .iter()
            .enumerate()
            .map(|(k, &j)| (row[j] - self.means[k]) / self.stds[k])
            .collect();
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.loadings.row(c).iter().zip(&z).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.coords.iter().map(|c| c.to_vec()).collect()
    }
}

/// Projection onto the top two eigenvectors of the correlation matrix.
/// Constant columns are dropped before standardizing.
pub fn pca2(features: &[Vec<f64>]) -> Result<Embedding2D> {
    let n = features.len();
    if n <= 2 {
        return Err(KpeError::validation(format!("PCA needs more than 2 rows, got {n}")));
    }
    let p = check_points(features)?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for j in 0..p {
        let col: Vec<f64> = features.iter().map(|r| r[j]).collect();
        let sd = super::stats::sample_sd(&col);
        if sd > 0.0 {
            kept.push(j);
            means.push(super::stats::mean(&col));
            stds.push(sd);
        } else {
            dropped.push(j);
        }
    }
    if kept.len() < 2 {
        return Err(KpeError::validation("PCA needs at least 2 non-constant columns"));
    }
    let q = kept.len();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|r| kept.iter().enumerate().map(|(k, &j)| (r[j] - means[k]) / stds[k]).collect())
        .collect();
    let mut corr = Matrix::zeros(q, q);
    for a in 0..q {
        for b in a..q {
            let s = z.iter().map(|r| r[a] * r[b]).sum::<f64>() / (n - 1) as f64;
            corr[(a, b)] = s;
            corr[(b, a)] = s;
        }
    }
    let eig = eigh_sym(&corr)?;
    let total: f64 = eig.values.iter().sum();
    let explained = ((eig.values[0] + eig.values[1]) / total).clamp(0.0, 1.0);
    let mut loadings = Matrix::zeros(2, q);
    for c in 0..2 {
        for k in 0..q {
            loadings[(c, k)] = eig.vectors[(k, c)];
        }
    }
    let coords = z
        .iter()
        .map(|r| {
            let mut o = [0.0; 2];
            for (c, oc) in o.iter_mut().enumerate() {
                *oc = loadings.row(c).iter().zip(r).map(|(a, b)| a * b).sum();
            }
            o
        })
        .collect();
    Ok(Embedding2D {
        coords,
        explained_variance: explained,
        loadings,
        kept_columns: kept,
        dropped_columns: dropped,
        means,
        stds,
        low_variance_warning: explained < 0.85,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::stats::spearman;
    use crate::fields::GaussianOtField;
    use crate::mathcore::RngStream;
    use crate::mixture::MixtureComponent;

    #[test]
    fn unit_ball_volumes() {
        assert!((ln_unit_ball_volume(1).exp() - 2.0).abs() < 1e-13);
        assert!((ln_unit_ball_volume(2).exp() - std::f64::consts::PI).abs() < 1e-13);
        assert!((ln_unit_ball_volume(3).exp() - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn knn_three_collinear_points() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        let est = knn_density(&pts, 1).unwrap();
        for d in &est.densities {
            assert!((d - 0.25).abs() < 1e-14);
        }
        assert!(knn_density(&pts, 3).is_err());
    }

    #[test]
    fn knn_uniform_grid() {
        let m = 50;
        let n = m * m;
        let h = 1.0 / m as f64;
        let cell = |i: usize| ((i % m) as f64 + 0.5, (i / m) as f64 + 0.5);
        let interior = |i: usize| (3..m - 3).contains(&(i % m)) && (3..m - 3).contains(&(i / m));

        // On the exact lattice the 8th neighbour sits at √2·h for every
        // interior point.
        let lattice: Vec<Vec<f64>> = (0..n).map(|i| vec![cell(i).0 * h, cell(i).1 * h]).collect();
        let est = knn_density(&lattice, 8).unwrap();
        let exact = 8.0 / ((n - 1) as f64 * std::f64::consts::PI * 2.0 * h * h);
        for i in (0..n).filter(|&i| interior(i)) {
            assert!((est.densities[i] - exact).abs() < 1e-9 * exact);
        }

        // One uniform draw per cell: interior estimates centre on 1.
        let mut rng = RngStream::new(31, 0);
        let jittered: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let (a, b) = cell(i);
                vec![(a - 0.5 + rng.uniform()) * h, (b - 0.5 + rng.uniform()) * h]
            })
            .collect();
        let est = knn_density(&jittered, 8).unwrap();
        let inner: Vec<f64> = (0..n).filter(|&i| interior(i)).map(|i| est.densities[i]).collect();
        let med = crate::analysis::stats::median(&inner);
        assert!((med - 1.0).abs() < 0.2, "median {med}");
    }

    #[test]
    fn knn_duplicates_are_capped() {
        let pts = vec![vec![0.0], vec![0.0], vec![1.0], vec![3.0]];
        let est = knn_density(&pts, 1).unwrap();
        assert_eq!(est.capped, vec![0, 1]);
        assert!(est.densities.iter().all(|d| d.is_finite() && *d > 0.0));
        assert_eq!(est.densities[0], est.densities[2]);
    }

    #[test]
    fn knn_against_reference() {
        let reference: Vec<Vec<f64>> = (0..=10).map(|i| vec![i as f64]).collect();
        let est = knn_density_against(&reference, &[vec![5.0]], 3).unwrap();
        // neighbours at 0, 1, 1: r = 1
        assert!((est.densities[0] - 3.0 / (11.0 * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn kde_symmetry_and_normal_peak() {
        let est = kde_density(&[vec![-1.5], vec![1.5]]).unwrap();
        assert_eq!(est.densities[0], est.densities[1]);

        let mut rng = RngStream::new(21, 0);
        let pts: Vec<Vec<f64>> = (0..5000).map(|_| vec![rng.gauss()]).collect();
        let kde = Kde::fit(&pts).unwrap();
        let at0 = kde.log_density(&[0.0]).exp();
        let target = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!(((at0 - target) / target).abs() < 0.1);

        // trapezoid integral over a covering grid
        let (lo, hi, m) = (-7.0, 7.0, 2000);
        let h = (hi - lo) / m as f64;
        let mut integral = 0.0;
        for i in 0..=m {
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            integral += w * kde.log_density(&[lo + i as f64 * h]).exp() * h;
        }
        assert!((integral - 1.0).abs() < 0.02, "{integral}");
    }

    #[test]
    fn kde_rejects_zero_variance() {
        assert!(kde_density(&[vec![1.0, 0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn log_consistency_and_permutation_equivariance() {
        let mut rng = RngStream::new(2, 0);
        let pts: Vec<Vec<f64>> = (0..200).map(|_| rng.gauss_draw(2)).collect();
        let mut rev = pts.clone();
        rev.reverse();
        for (a, b) in [
            (knn_density(&pts, 10).unwrap(), knn_density(&rev, 10).unwrap()),
            (kde_density(&pts).unwrap(), kde_density(&rev).unwrap()),
        ] {
            for (i, (d, l)) in a.densities.iter().zip(&a.log_densities).enumerate() {
                assert!(*d > 0.0);
                assert!((d.ln() - l).abs() < 1e-12);
                let j = pts.len() - 1 - i;
                assert!(((a.log_densities[i] - b.log_densities[j]) / l).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_tracks_analytic_density_on_scaling_flow() {
        let f = GaussianOtField::scaling(2, 2.0).unwrap();
        let mut rng = RngStream::new(5, 0);
        let pts: Vec<Vec<f64>> = (0..2000).map(|_| f.transport(&rng.gauss_draw(2))).collect();
        let est = knn_density(&pts, 50).unwrap();
        let truth: Vec<f64> = pts.iter().map(|p| -p.iter().map(|v| v * v).sum::<f64>() / 8.0).collect();
        let rho = spearman(&est.log_densities, &truth).unwrap().rho;
        assert!(rho > 0.9, "rho = {rho}");
    }

    #[test]
    fn mixture_logpdf_examples() {
        let spec = MixtureSpec {
            components: vec![MixtureComponent {
                label: 0,
                weight: 1.0,
                mean: vec![0.0, 0.0],
                cov: Matrix::identity(2),
            }],
        };
        let l = mixture_logpdf(&spec, &[0.0, 0.0]).unwrap();
        assert!((l - (1.0 / (2.0 * std::f64::consts::PI)).ln()).abs() < 1e-14);
        let mut bad = spec.clone();
        bad.components[0].weight = 0.5;
        assert!(mixture_logpdf(&bad, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pca_examples() {
        let mut rng = RngStream::new(9, 0);
        let two: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.gauss() * 3.0, rng.gauss() + 1.0]).collect();
        let e = pca2(&two).unwrap();
        assert!((e.explained_variance - 1.0).abs() < 1e-12);
        assert!(!e.low_variance_warning);
        let gram = e.loadings.matmul(&e.loadings.transpose());
        assert!(gram.sub(&Matrix::identity(2)).max_abs() < 1e-10);

        let rank1: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                let s = rng.gauss();
                (0..5).map(|j| s * (j as f64 + 1.0) + 1e-3 * rng.gauss()).collect()
            })
            .collect();
        assert!(pca2(&rank1).unwrap().explained_variance > 0.99);

        let iso: Vec<Vec<f64>> = (0..2000).map(|_| rng.gauss_draw(5)).collect();
        let e = pca2(&iso).unwrap();
        assert!((e.explained_variance - 0.4).abs() < 0.05);
        assert!(e.low_variance_warning);

        let with_const: Vec<Vec<f64>> = two.iter().map(|r| vec![r[0], 7.0, r[1]]).collect();
        let e = pca2(&with_const).unwrap();
        assert_eq!(e.dropped_columns, vec![1]);
        let p = e.project(&with_const[3]);
        assert!((p[0] - e.coords[3][0]).abs() < 1e-12 && (p[1] - e.coords[3][1]).abs() < 1e-12);

        assert!(pca2(&two[..2]).is_err());
    }
}
