//! The six subcommands. Each takes a resolved [`RunConfig`], writes its
//! outputs under `config.out` and returns a value for the caller to print.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::density::{
    analytic_density, knn_density, knn_density_against, pca2, DensityEstimate, DensityMethod, Embedding2D, Kde,
};
use crate::analysis::stats::{correlation_report, extreme_groups, mean, median, sample_sd, StatsReport};
use crate::error::{KpeError, Result};
use crate::mathcore::{Matrix, RngStream};
use crate::mixture::{GaussianMixture, MixtureComponent, MixtureSpec};
use crate::sampler::{energy_records, sample_batch, SampleConfig, Tercile};
use crate::semantics::{margin_records, semantic_trend, SemanticTrend};
use crate::training::{train, LabeledPoints};

use super::config::{DatasetKind, ReferenceSet, RunConfig};
use super::io::{
    read_json, read_points_csv, read_records, records_to_jsonl, scaled_name, write_atomic, write_csv, write_json,
    TrajectoryRecord,
};
use super::model::{FieldSpec, ModelFile};
use super::{SCHEMA_VERSION, TOOL_VERSION};

/// Stream index used to draw synthetic datasets.
pub const DATASET_STREAM: u64 = 1 << 50;

/// Minimum sample count for density analysis.
pub const MIN_DENSITY_SAMPLES: usize = 100;

/// Class 0 ~ N((-3, 0), diag(9, 1)), class 1 ~ N((3, 0), diag(9, 1)),
/// equal weights. The classes overlap along the first axis.
pub fn two_class_mixture() -> Result<GaussianMixture> {
    let comp = |label, m: f64| MixtureComponent {
        label,
        weight: 0.5,
        mean: vec![m, 0.0],
        cov: Matrix::from_diag(&[9.0, 1.0]),
    };
    GaussianMixture::new(MixtureSpec {
        components: vec![comp(0, -3.0), comp(1, 3.0)],
    })
}

/// The generating mixture of a built-in dataset, if any.
pub fn dataset_mixture(config: &RunConfig) -> Result<Option<GaussianMixture>> {
    Ok(match config.dataset {
        DatasetKind::Ring => Some(GaussianMixture::ring(config.ring_modes, config.ring_radius, config.ring_std)?),
        DatasetKind::TwoClass => Some(two_class_mixture()?),
        DatasetKind::Mixture => {
            let spec = config
                .mixture
                .clone()
                .ok_or_else(|| KpeError::validation("dataset = \"mixture\" needs the mixture key"))?;
            Some(GaussianMixture::new(spec)?)
        }
        DatasetKind::File => None,
    })
}

/// Training points for the configured dataset.
pub fn build_dataset(config: &RunConfig) -> Result<LabeledPoints> {
    let data = match dataset_mixture(config)? {
        Some(mixture) => {
            if config.dataset_size == 0 {
                return Err(KpeError::validation("dataset_size must be at least 1"));
            }
            let mut rng = RngStream::new(config.seed, DATASET_STREAM);
            let (points, labels): (Vec<_>, Vec<_>) =
                (0..config.dataset_size).map(|_| mixture.sample(&mut rng)).unzip();
            let num_classes = mixture.labels().last().map_or(0, |l| l + 1);
            if config.use_labels {
                LabeledPoints {
                    points,
                    labels: Some(labels),
                    num_classes,
                }
            } else {
                LabeledPoints::unlabeled(points)
            }
        }
        None => {
            let path = config
                .dataset_path
                .as_ref()
                .ok_or_else(|| KpeError::validation("dataset = \"file\" needs the dataset_path key"))?;
            let (points, labels) = read_points_csv(path)?;
            match labels.filter(|_| config.use_labels) {
                Some(l) => {
                    let num_classes = l.iter().max().map_or(0, |m| m + 1);
                    LabeledPoints {
                        points,
                        labels: Some(l),
                        num_classes,
                    }
                }
                None => LabeledPoints::unlabeled(points),
            }
        }
    };
    data.validate()?;
    Ok(data)
}

/// Target mixture for posteriors and analytic densities: the `mixture` key,
/// then the model file's target, then the built-in dataset.
pub fn resolve_target(config: &RunConfig) -> Result<Option<GaussianMixture>> {
    if let Some(spec) = &config.mixture {
        return GaussianMixture::new(spec.clone()).map(Some);
    }
    if let Some(path) = &config.model {
        if let Some(spec) = ModelFile::load(path)?.resolved_target() {
            return GaussianMixture::new(spec).map(Some);
        }
    }
    if let Some(spec) = config.field.as_ref().and_then(FieldSpec::target) {
        return GaussianMixture::new(spec).map(Some);
    }
    match config.dataset {
        DatasetKind::File => Ok(None),
        _ => dataset_mixture(config),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub config: RunConfig,
    pub num_params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub model: PathBuf,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    let tc = config.train_config();
    tc.validate()?;
    let data = build_dataset(config)?;
    let outcome = train(&tc, &data)?;
    let target = dataset_mixture(config)?.map(|m| m.spec().clone());
    let model_path = config.out.join("model.json");
    ModelFile::new(FieldSpec::Mlp(outcome.field.clone()), target).save(&model_path)?;
    let rows: Vec<LossRow> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    write_csv(&config.out.join("train_log.csv"), &rows)?;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        kind: "train".into(),
        config: config.clone(),
        num_params: outcome.field.num_params(),
        initial_loss: outcome.losses[0],
        final_loss: outcome.final_loss(100),
        model: model_path,
    };
    write_json(&config.out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyRow {
    pub id: usize,
    pub kpe: f64,
    pub tercile: Tercile,
    pub label: Option<usize>,
    pub guidance_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRun {
    pub guidance_scale: Option<f64>,
    pub n: usize,
    pub mean_kpe: f64,
    pub sd_kpe: f64,
    /// ½ W₂² for Gaussian oracle fields.
    pub expected_kpe: Option<f64>,
    pub relative_error: Option<f64>,
    pub records: PathBuf,
    pub energies: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub config: RunConfig,
    pub runs: Vec<SampleRun>,
}

fn load_field(config: &RunConfig) -> Result<FieldSpec> {
    match (&config.model, &config.field) {
        (Some(path), _) => Ok(ModelFile::load(path)?.field),
        (None, Some(f)) => Ok(f.clone()),
        (None, None) => Err(KpeError::validation("sampling needs a model path or an inline field spec")),
    }
}

pub fn cmd_sample(config: &RunConfig) -> Result<SampleSummary> {
    config.validate_sampling()?;
    let spec = load_field(config)?;
    let field = spec.build()?;
    let expected = spec.expected_kpe()?;
    let scales: Vec<Option<f64>> = if config.guidance.is_empty() {
        vec![None]
    } else {
        config.guidance.iter().copied().map(Some).collect()
    };
    let mut runs = Vec::new();
    for scale in scales {
        let sc = SampleConfig {
            n: config.n,
            n_steps: config.n_steps,
            method: config.method,
            seed: config.seed,
            guidance_scale: scale,
        };
        let trajs = sample_batch(field.as_ref(), &sc)?;
        let records: Vec<TrajectoryRecord> = trajs
            .iter()
            .enumerate()
            .map(|(i, t)| TrajectoryRecord::from_trajectory(i, t, config.keep_states))
            .collect();
        let rows: Vec<EnergyRow> = energy_records(&trajs)?
            .into_iter()
            .map(|e| EnergyRow {
                id: e.id,
                kpe: e.kpe,
                tercile: e.tercile,
                label: e.label,
                guidance_scale: e.guidance_scale,
            })
            .collect();
        let rec_path = scaled_name(&config.out, "trajectories", "jsonl", scale);
        let csv_path = scaled_name(&config.out, "energies", "csv", scale);
        write_atomic(&rec_path, records_to_jsonl(&records)?.as_bytes())?;
        write_csv(&csv_path, &rows)?;
        let energies: Vec<f64> = trajs.iter().map(|t| t.kpe).collect();
        let m = mean(&energies);
        // The closed form describes the unguided field only.
        let expected = expected.filter(|_| scale.is_none());
        runs.push(SampleRun {
            guidance_scale: scale,
            n: energies.len(),
            mean_kpe: m,
            sd_kpe: sample_sd(&energies),
            expected_kpe: expected,
            relative_error: expected.map(|e| (m - e).abs() / e.abs()),
            records: rec_path,
            energies: csv_path,
        });
    }
    let summary = SampleSummary {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        kind: "sample".into(),
        config: config.clone(),
        runs,
    };
    write_json(&config.out.join("sample_summary.json"), &summary)?;
    Ok(summary)
}

/// Loads and verifies every record file, in order.
pub fn cmd_ingest(paths: &[PathBuf]) -> Result<Vec<(PathBuf, Vec<TrajectoryRecord>)>> {
    if paths.is_empty() {
        return Err(KpeError::validation("no record files given"));
    }
    paths.iter().map(|p| Ok((p.clone(), read_records(p)?))).collect()
}

fn load_records(config: &RunConfig) -> Result<Vec<TrajectoryRecord>> {
    Ok(cmd_ingest(&config.records)?
        .into_iter()
        .flat_map(|(_, r)| r)
        .collect())
}

fn final_features<'a>(records: impl IntoIterator<Item = &'a TrajectoryRecord>) -> Result<Vec<Vec<f64>>> {
    records
        .into_iter()
        .map(|r| {
            r.final_features
                .clone()
                .ok_or_else(|| KpeError::validation(format!("record {} has no final_features", r.id)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub explained_variance: f64,
    pub kept_columns: Vec<usize>,
    pub dropped_columns: Vec<usize>,
    pub low_variance_warning: bool,
}

impl From<&Embedding2D> for EmbeddingSummary {
    fn from(e: &Embedding2D) -> Self {
        EmbeddingSummary {
            explained_variance: e.explained_variance,
            kept_columns: e.kept_columns.clone(),
            dropped_columns: e.dropped_columns.clone(),
            low_variance_warning: e.low_variance_warning,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopEnergySummary {
    pub n: usize,
    pub median_log_density: f64,
    /// Share of top-10%-energy samples strictly below the median density.
    pub fraction_below_median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub config: RunConfig,
    pub method: DensityMethod,
    /// Point set the estimator was fitted on; absent for analytic densities.
    pub reference: Option<ReferenceSet>,
    pub n: usize,
    pub embedding: EmbeddingSummary,
    pub k: Option<usize>,
    pub bandwidths: Option<Vec<f64>>,
    pub capped: usize,
    pub stats: StatsReport,
    pub top_energy: TopEnergySummary,
}

#[derive(Serialize)]
struct ScatterRow {
    row: usize,
    id: usize,
    kpe: f64,
    log_density: f64,
    u: f64,
    v: f64,
}

#[derive(Serialize)]
struct TopRow {
    row: usize,
    id: usize,
    kpe: f64,
    log_density: f64,
    u: f64,
    v: f64,
    below_median: bool,
}

#[derive(Serialize)]
struct GridRow {
    u: f64,
    v: f64,
    log_density: Option<f64>,
    mean_kpe: Option<f64>,
    count: usize,
}

/// Estimator fitted on the reference set, evaluable at arbitrary 2-D points.
enum Surface {
    Knn { reference: Vec<Vec<f64>>, k: usize },
    Kde(Kde),
    /// Cell averages of the per-sample analytic log densities.
    CellMean,
}

fn grid_rows(
    coords: &[[f64; 2]],
    energies: &[f64],
    log_dens: &[f64],
    surface: &Surface,
    size: usize,
) -> Result<Vec<GridRow>> {
    let lo = |c: usize| coords.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
    let hi = |c: usize| coords.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
    let (u0, v0) = (lo(0), lo(1));
    let du = (hi(0) - u0).max(f64::MIN_POSITIVE) / size as f64;
    let dv = (hi(1) - v0).max(f64::MIN_POSITIVE) / size as f64;
    let cell = |x: f64, x0: f64, dx: f64| (((x - x0) / dx) as usize).min(size - 1);
    let mut count = vec![0usize; size * size];
    let mut kpe_sum = vec![0.0; size * size];
    let mut dens_sum = vec![0.0; size * size];
    for ((p, &e), &l) in coords.iter().zip(energies).zip(log_dens) {
        let c = cell(p[1], v0, dv) * size + cell(p[0], u0, du);
        count[c] += 1;
        kpe_sum[c] += e;
        dens_sum[c] += l;
    }
    let nodes: Vec<Vec<f64>> = (0..size * size)
        .map(|c| vec![u0 + (c % size) as f64 * du + 0.5 * du, v0 + (c / size) as f64 * dv + 0.5 * dv])
        .collect();
    let node_logs: Vec<Option<f64>> = match surface {
        Surface::Knn { reference, k } => knn_density_against(reference, &nodes, *k)?
            .log_densities
            .into_iter()
            .map(Some)
            .collect(),
        Surface::Kde(kde) => nodes.iter().map(|x| Some(kde.log_density(x))).collect(),
        Surface::CellMean => (0..size * size)
            .map(|c| (count[c] > 0).then(|| dens_sum[c] / count[c] as f64))
            .collect(),
    };
    Ok((0..size * size)
        .map(|c| GridRow {
            u: nodes[c][0],
            v: nodes[c][1],
            log_density: node_logs[c],
            mean_kpe: (count[c] > 0).then(|| kpe_sum[c] / count[c] as f64),
            count: count[c],
        })
        .collect())
}

pub fn cmd_analyze_density(config: &RunConfig) -> Result<Vec<DensityReport>> {
    config.validate_analysis()?;
    let records = load_records(config)?;
    let n = records.len();
    if n < MIN_DENSITY_SAMPLES {
        return Err(KpeError::validation(format!(
            "density analysis needs at least {MIN_DENSITY_SAMPLES} samples, got {n}"
        )));
    }
    let energies: Vec<f64> = records.iter().map(|r| r.kpe).collect();
    let features = final_features(&records)?;
    let embedding = pca2(&features)?;
    let points = embedding.points();

    let reference: Vec<Vec<f64>> = match config.reference {
        ReferenceSet::Generated => points.clone(),
        ReferenceSet::Training => {
            let data = build_dataset(config)?;
            if data.dim() != features[0].len() {
                return Err(KpeError::validation(format!(
                    "training points have dimension {}, records have {}",
                    data.dim(),
                    features[0].len()
                )));
            }
            data.points.iter().map(|p| embedding.project(p).to_vec()).collect()
        }
    };

    let mut reports = Vec::new();
    for &method in &config.density {
        let (est, surface, reference_used): (DensityEstimate, Surface, _) = match method {
            DensityMethod::Knn => {
                let est = match config.reference {
                    ReferenceSet::Generated => knn_density(&points, config.k)?,
                    ReferenceSet::Training => knn_density_against(&reference, &points, config.k)?,
                };
                let s = Surface::Knn {
                    reference: reference.clone(),
                    k: config.k,
                };
                (est, s, Some(config.reference))
            }
            DensityMethod::Kde => {
                let kde = Kde::fit(&reference)?;
                (kde.evaluate(&points)?, Surface::Kde(kde), Some(config.reference))
            }
            DensityMethod::Analytic => {
                let mixture = resolve_target(config)?.ok_or_else(|| {
                    KpeError::validation("analytic density needs a target mixture (mixture key or model target)")
                })?;
                (analytic_density(&mixture, &features)?, Surface::CellMean, None)
            }
        };
        let logs = &est.log_densities;
        let stats = correlation_report(&energies, logs)?;

        let med = median(logs);
        let (_, top) = extreme_groups(&energies, 0.1);
        let top_rows: Vec<TopRow> = top
            .iter()
            .map(|&i| TopRow {
                row: i,
                id: records[i].id,
                kpe: energies[i],
                log_density: logs[i],
                u: points[i][0],
                v: points[i][1],
                below_median: logs[i] < med,
            })
            .collect();
        let below = top_rows.iter().filter(|r| r.below_median).count();
        let scatter: Vec<ScatterRow> = (0..n)
            .map(|i| ScatterRow {
                row: i,
                id: records[i].id,
                kpe: energies[i],
                log_density: logs[i],
                u: points[i][0],
                v: points[i][1],
            })
            .collect();
        let grid = grid_rows(&embedding.coords, &energies, logs, &surface, config.grid_size)?;

        let report = DensityReport {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            kind: "density".into(),
            config: config.clone(),
            method,
            reference: reference_used,
            n,
            embedding: EmbeddingSummary::from(&embedding),
            k: est.k,
            bandwidths: est.bandwidths.clone(),
            capped: est.capped.len(),
            stats,
            top_energy: TopEnergySummary {
                n: top_rows.len(),
                median_log_density: med,
                fraction_below_median: below as f64 / top_rows.len().max(1) as f64,
            },
        };
        let out = &config.out;
        write_csv(&out.join(format!("scatter_{method}.csv")), &scatter)?;
        write_csv(&out.join(format!("grid_{method}.csv")), &grid)?;
        write_csv(&out.join(format!("top10_{method}.csv")), &top_rows)?;
        write_json(&out.join(format!("density_{method}.json")), &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// One table row per guidance scale: high-tercile margins against
/// low-tercile margins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticRow {
    pub guidance_scale: Option<f64>,
    pub n: usize,
    pub mean_diff: Option<f64>,
    pub welch_t: Option<f64>,
    pub welch_p: Option<f64>,
    pub cohens_d: Option<f64>,
    pub median_low: f64,
    pub median_mid: f64,
    pub median_high: f64,
    pub n_low: usize,
    pub n_mid: usize,
    pub n_high: usize,
    pub trend: SemanticTrend,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticsReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub config: RunConfig,
    pub rows: Vec<SemanticRow>,
}

#[derive(Serialize)]
struct MarginRow {
    id: usize,
    guidance_scale: Option<f64>,
    true_class: usize,
    margin: f64,
    kpe: f64,
    tercile: Tercile,
}

pub fn cmd_analyze_semantics(config: &RunConfig) -> Result<SemanticsReport> {
    let records = load_records(config)?;
    if let Some(r) = records.iter().find(|r| r.label.is_none()) {
        return Err(KpeError::validation(format!(
            "semantic analysis needs labeled records; record {} has no label",
            r.id
        )));
    }
    let mixture = resolve_target(config)?
        .ok_or_else(|| KpeError::validation("semantic analysis needs a mixture spec for class posteriors"))?;

    // Group by guidance scale, unguided first, then ascending.
    let mut groups: BTreeMap<(bool, u64), Vec<&TrajectoryRecord>> = BTreeMap::new();
    for r in &records {
        let key = match r.guidance_scale {
            None => (false, 0),
            Some(w) => (true, w.to_bits()),
        };
        groups.entry(key).or_default().push(r);
    }

    let mut rows = Vec::new();
    let mut margin_rows = Vec::new();
    for group in groups.values() {
        let scale = group[0].guidance_scale;
        let finals = final_features(group.iter().copied())?;
        let labels: Vec<usize> = group.iter().map(|r| r.label.expect("checked above")).collect();
        let energies: Vec<f64> = group.iter().map(|r| r.kpe).collect();
        let margins = margin_records(&mixture, &finals, &labels, &energies, scale)?;
        let m: Vec<f64> = margins.iter().map(|r| r.margin).collect();
        let trend = semantic_trend(&energies, &m)?;
        let hv = &trend.high_vs_low;
        rows.push(SemanticRow {
            guidance_scale: scale,
            n: group.len(),
            mean_diff: hv.mean_diff,
            welch_t: hv.welch.map(|t| t.t),
            welch_p: hv.welch.map(|t| t.p),
            cohens_d: hv.cohens_d,
            median_low: trend.bins[0].median,
            median_mid: trend.bins[1].median,
            median_high: trend.bins[2].median,
            n_low: trend.bins[0].n,
            n_mid: trend.bins[1].n,
            n_high: trend.bins[2].n,
            trend: trend.clone(),
        });
        margin_rows.extend(group.iter().zip(&margins).map(|(r, mr)| MarginRow {
            id: r.id,
            guidance_scale: scale,
            true_class: mr.true_class,
            margin: mr.margin,
            kpe: mr.kpe,
            tercile: mr.tercile,
        }));
    }
    let report = SemanticsReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        kind: "semantics".into(),
        config: config.clone(),
        rows,
    };
    write_csv(&config.out.join("margins.csv"), &margin_rows)?;
    write_json(&config.out.join("semantics_report.json"), &report)?;
    Ok(report)
}

const ALPHA: f64 = 0.01;

fn num(v: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(v, |acc, k| acc.get(k))?.as_f64()
}

fn sign(x: f64) -> &'static str {
    if x > 0.0 {
        "positive"
    } else if x < 0.0 {
        "negative"
    } else {
        "zero"
    }
}

fn significance(p: f64) -> String {
    if p < ALPHA {
        format!("p = {p:.3e}, significant at {ALPHA}")
    } else {
        format!("p = {p:.3e}, not significant at {ALPHA}")
    }
}

fn scale_label(v: &Value) -> String {
    v.get("guidance_scale")
        .and_then(Value::as_f64)
        .map_or("unguided".into(), |w| format!("w = {w}"))
}

fn findings(kind: &str, doc: &Value) -> Vec<String> {
    let mut out = Vec::new();
    match kind {
        "density" => {
            let method = doc.get("method").and_then(Value::as_str).unwrap_or("?");
            let reference = doc.get("reference").and_then(Value::as_str).unwrap_or("none");
            let tag = format!("density [{method}, reference {reference}]");
            if let (Some(rho), Some(p)) = (num(doc, &["stats", "spearman_rho"]), num(doc, &["stats", "spearman_p"])) {
                out.push(format!("{tag}: spearman rho = {rho:.4} ({}), {}", sign(rho), significance(p)));
            }
            if let (Some(d), Some(p)) = (num(doc, &["stats", "cliffs_delta"]), num(doc, &["stats", "mannwhitney_p"])) {
                out.push(format!(
                    "{tag}: cliffs delta (top vs bottom 20% energy) = {d:.4} ({}), mann-whitney {}",
                    sign(d),
                    significance(p)
                ));
            }
            if let Some(f) = num(doc, &["top_energy", "fraction_below_median"]) {
                out.push(format!("{tag}: {:.1}% of top-10% energy samples below median density", 100.0 * f));
            }
        }
        "semantics" => {
            for row in doc.get("rows").and_then(Value::as_array).into_iter().flatten() {
                let tag = format!("semantics [{}]", scale_label(row));
                match (num(row, &["mean_diff"]), num(row, &["welch_p"]), num(row, &["cohens_d"])) {
                    (Some(dm), Some(p), Some(d)) => out.push(format!(
                        "{tag}: margin high minus low = {dm:.4} ({}), {}, cohens d = {d:.4} ({})",
                        sign(dm),
                        significance(p),
                        sign(d)
                    )),
                    (Some(dm), _, d) => out.push(format!(
                        "{tag}: margin high minus low = {dm:.4} ({}), welch test undefined, cohens d = {}",
                        sign(dm),
                        d.map_or("undefined".into(), |d| format!("{d:.4}"))
                    )),
                    _ => {}
                }
            }
        }
        "sample" => {
            for run in doc.get("runs").and_then(Value::as_array).into_iter().flatten() {
                let tag = format!("sample [{}]", scale_label(run));
                if let Some(m) = num(run, &["mean_kpe"]) {
                    match num(run, &["expected_kpe"]) {
                        Some(e) => out.push(format!(
                            "{tag}: mean kpe = {m:.6}, closed form {e:.6}, relative error {:.3}%",
                            100.0 * (m - e).abs() / e.abs()
                        )),
                        None => out.push(format!("{tag}: mean kpe = {m:.6}")),
                    }
                }
            }
        }
        "train" => {
            if let (Some(a), Some(b)) = (num(doc, &["initial_loss"]), num(doc, &["final_loss"])) {
                out.push(format!("train: loss {a:.4} -> {b:.4} (ratio {:.3})", b / a));
            }
        }
        _ => {}
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Consolidated {
    pub schema_version: u32,
    pub tool_version: String,
    pub kind: String,
    pub config: RunConfig,
    pub sources: Vec<PathBuf>,
    /// Input documents grouped by their `kind`.
    pub sections: BTreeMap<String, Vec<Value>>,
    pub findings: Vec<String>,
}

fn schema_of(path: &Path, doc: &Value) -> Result<u64> {
    doc.get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| KpeError::Schema(format!("{} has no schema_version", path.display())))
}

pub fn cmd_report(config: &RunConfig, paths: &[PathBuf]) -> Result<Consolidated> {
    if paths.is_empty() {
        return Err(KpeError::validation("report needs at least one report file"));
    }
    let docs: Vec<Value> = paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let versions: Vec<u64> = paths.iter().zip(&docs).map(|(p, d)| schema_of(p, d)).collect::<Result<_>>()?;
    if versions.iter().any(|&v| v != versions[0]) {
        let listed: Vec<String> = paths
            .iter()
            .zip(&versions)
            .map(|(p, v)| format!("{} has version {v}", p.display()))
            .collect();
        return Err(KpeError::Schema(format!("conflicting schema versions: {}", listed.join(", "))));
    }
    if versions[0] != SCHEMA_VERSION as u64 {
        return Err(KpeError::Schema(format!(
            "inputs have schema version {}, this tool reads version {SCHEMA_VERSION}",
            versions[0]
        )));
    }

    let mut sections: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for doc in docs {
        let kind = doc.get("kind").and_then(Value::as_str).unwrap_or("unknown").to_string();
        if kind == "report" {
            if let Some(inner) = doc.get("sections").and_then(Value::as_object) {
                for (k, v) in inner {
                    sections.entry(k.clone()).or_default().extend(v.as_array().cloned().unwrap_or_default());
                }
            }
        } else {
            sections.entry(kind).or_default().push(doc);
        }
    }
    let findings: Vec<String> = sections
        .iter()
        .flat_map(|(kind, docs)| docs.iter().flat_map(move |d| findings(kind, d)))
        .collect();

    let report = Consolidated {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        kind: "report".into(),
        config: config.clone(),
        sources: paths.to_vec(),
        sections,
        findings,
    };
    write_json(&config.out.join("report.json"), &report)?;
    let mut text = format!("kpeflow {TOOL_VERSION} report, schema version {SCHEMA_VERSION}\n");
    for p in paths {
        text.push_str(&format!("source: {}\n", p.display()));
    }
    text.push('\n');
    for f in &report.findings {
        text.push_str(f);
        text.push('\n');
    }
    write_atomic(&config.out.join("summary.txt"), text.as_bytes())?;
    Ok(report)
}

/// Compact JSON line describing a command result, for stdout.
pub fn describe<T: Serialize>(value: &T) -> String {
    let mut v = serde_json::to_value(value).unwrap_or(Value::Null);
    if let Some(obj) = v.as_object_mut() {
        obj.remove("config");
    }
    v.to_string()
}
