//! File formats and atomic output.
//!
//! Trajectories are JSON Lines, tabular outputs are CSV, reports are JSON.
//! Floats are written in the shortest form that parses back to the same
//! double.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::sampler::{kpe_of, Method, Trajectory};

pub const QUADRATURE: &str = "left-riemann";
/// Relative tolerance for the stored-vs-recomputed energy check.
pub const KPE_TOLERANCE: f64 = 1e-9;

/// Writes via a sibling temp file and a rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| KpeError::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(KpeError::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| KpeError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| KpeError::validation(format!("cannot serialize {}: {e}", path.display())))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| KpeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| KpeError::Parse(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| KpeError::validation(format!("cannot serialize {}: {e}", path.display())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| KpeError::validation(format!("cannot serialize {}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// One line of a trajectory record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub id: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<u64>,
    pub n_steps: usize,
    pub dt: f64,
    pub quadrature: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    pub vel_sq_norms: Vec<f64>,
    pub kpe: f64,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<Vec<f64>>>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(id: usize, t: &Trajectory, keep_states: bool) -> Self {
        let (seed, stream) = t.seed.map_or((0, None), |(s, i)| (s, Some(i)));
        TrajectoryRecord {
            id,
            seed,
            stream,
            n_steps: t.n_steps,
            dt: t.dt(),
            quadrature: QUADRATURE.to_string(),
            method: Some(t.method),
            vel_sq_norms: t.vel_sq_norms.clone(),
            kpe: t.kpe,
            label: t.label(),
            guidance_scale: t.guidance.map(|g| g.scale),
            final_features: Some(t.final_state().to_vec()),
            states: keep_states.then(|| t.states.clone()),
        }
    }

    /// Structural checks (exit 2) followed by the energy cross-check (exit 3).
    pub fn verify(&self) -> Result<()> {
        if self.quadrature != QUADRATURE {
            return Err(KpeError::validation(format!(
                "quadrature must be \"{QUADRATURE}\", got \"{}\"",
                self.quadrature
            )));
        }
        if self.n_steps == 0 || self.vel_sq_norms.len() != self.n_steps {
            return Err(KpeError::Integrity(format!(
                "{} velocity norms recorded for n_steps = {}",
                self.vel_sq_norms.len(),
                self.n_steps
            )));
        }
        let want_dt = 1.0 / self.n_steps as f64;
        if !((self.dt - want_dt).abs() <= KPE_TOLERANCE * want_dt) {
            return Err(KpeError::Integrity(format!(
                "dt = {} does not match 1/n_steps = {want_dt}",
                self.dt
            )));
        }
        let recomputed = kpe_of(&self.vel_sq_norms, self.dt)?;
        if !((self.kpe - recomputed).abs() <= KPE_TOLERANCE * recomputed.abs().max(f64::MIN_POSITIVE)) {
            return Err(KpeError::Integrity(format!(
                "stored kpe {} differs from recomputed {recomputed}",
                self.kpe
            )));
        }
        if let Some(f) = &self.final_features {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(KpeError::validation("final_features contains non-finite values"));
            }
        }
        Ok(())
    }
}

pub fn records_to_jsonl(records: &[TrajectoryRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| KpeError::validation(format!("cannot serialize record {}: {e}", r.id)))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and verifies a record file. Errors name the 1-based line.
pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| KpeError::io(path, e))?;
    let at = |line: usize, e: KpeError| -> KpeError {
        let loc = format!("{} line {line}", path.display());
        match e {
            KpeError::Integrity(m) => KpeError::Integrity(format!("{loc}: {m}")),
            KpeError::Validation(m) => KpeError::Validation(format!("{loc}: {m}")),
            other => KpeError::Validation(format!("{loc}: {other}")),
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(line)
            .map_err(|e| KpeError::Parse(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rec.verify().map_err(|e| at(i + 1, e))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(KpeError::validation(format!("{} contains no records", path.display())));
    }
    Ok(out)
}

/// Points from a CSV with a header row. A column named `label` holds class
/// indices; every other column is a coordinate.
pub fn read_points_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Option<Vec<usize>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => KpeError::io(path, io),
        other => KpeError::Parse(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| KpeError::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let mut points = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| KpeError::Parse(format!("{} line {line}: {e}", path.display())))?;
        let mut p = Vec::with_capacity(row.len());
        for (j, cell) in row.iter().enumerate() {
            let cell = cell.trim();
            if Some(j) == label_col {
                let l = cell.parse::<usize>().map_err(|_| {
                    KpeError::Parse(format!("{} line {line}: label {cell:?} is not a class index", path.display()))
                })?;
                labels.as_mut().expect("label column").push(l);
            } else {
                p.push(cell.parse::<f64>().map_err(|_| {
                    KpeError::Parse(format!("{} line {line}: {cell:?} is not a number", path.display()))
                })?);
            }
        }
        points.push(p);
    }
    Ok((points, labels))
}

/// `base_w{scale}.ext` for guided runs, `base.ext` otherwise.
pub fn scaled_name(dir: &Path, base: &str, ext: &str, scale: Option<f64>) -> PathBuf {
    match scale {
        Some(w) => dir.join(format!("{base}_w{w}.{ext}")),
        None => dir.join(format!("{base}.{ext}")),
    }
}
