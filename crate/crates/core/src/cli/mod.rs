//! Command-line surface: argument parsing, config resolution and dispatch.

pub mod commands;
pub mod config;
pub mod io;
pub mod model;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis::density::DensityMethod;
use crate::error::{KpeError, Result};
use crate::sampler::Method;

pub use config::{DatasetKind, ReferenceSet, RunConfig};
pub use model::{FieldSpec, ModelFile};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "KPEFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "kpeflow", version, about = "Kinetic path energy diagnostics for flow-matching samplers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flags shared by every subcommand. Each overrides the config key of the
/// same name; `--steps` sets `steps` for `train` and `n_steps` otherwise.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training steps (train) or integration steps (sample).
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Number of trajectories.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub method: Option<Method>,
    /// Comma-separated guidance scales.
    #[arg(long, global = true, value_delimiter = ',')]
    pub guidance: Option<Vec<f64>>,
    /// Comma-separated density estimators: knn, kde, analytic.
    #[arg(long, global = true, value_delimiter = ',')]
    pub density: Option<Vec<DensityMethod>>,
    /// Neighbour count for the k-NN estimator.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an MLP velocity field on the configured dataset.
    Train,
    /// Integrate trajectories and record their energies.
    Sample,
    /// Validate trajectory record files.
    Ingest {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
    /// Correlate energy with sample density.
    AnalyzeDensity { records: Vec<PathBuf> },
    /// Compare class margins across energy terciles.
    AnalyzeSemantics { records: Vec<PathBuf> },
    /// Merge report files and summarize their findings.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

impl Cli {
    /// Config file (or defaults) with flags and positional paths applied.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let o = &self.overrides;
        let mut c = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = o.seed {
            c.seed = v;
        }
        if let Some(v) = o.steps {
            match self.command {
                Command::Train => c.steps = v,
                _ => c.n_steps = v,
            }
        }
        if let Some(v) = o.n {
            c.n = v;
        }
        if let Some(v) = o.method {
            c.method = v;
        }
        if let Some(v) = &o.guidance {
            c.guidance = v.clone();
        }
        if let Some(v) = &o.density {
            c.density = v.clone();
        }
        if let Some(v) = o.k {
            c.k = v;
        }
        if let Some(v) = &o.out {
            c.out = v.clone();
        }
        match &self.command {
            Command::AnalyzeDensity { records } | Command::AnalyzeSemantics { records } if !records.is_empty() => {
                c.records = records.clone();
            }
            _ => {}
        }
        Ok(c)
    }
}

/// Builds the global worker pool from `KPEFLOW_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| KpeError::validation(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool that already exists (e.g. in tests) is left as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let config = cli.resolve_config()?;
    match &cli.command {
        Command::Train => {
            let s = commands::cmd_train(&config)?;
            println!(
                "trained {} parameters, loss {:.4} -> {:.4}, model written to {}",
                s.num_params,
                s.initial_loss,
                s.final_loss,
                s.model.display()
            );
        }
        Command::Sample => {
            let s = commands::cmd_sample(&config)?;
            for r in &s.runs {
                let w = r.guidance_scale.map_or("unguided".into(), |w| format!("w = {w}"));
                print!("{w}: n = {}, mean kpe = {:.6}", r.n, r.mean_kpe);
                if let (Some(e), Some(rel)) = (r.expected_kpe, r.relative_error) {
                    print!(", half squared W2 = {e:.6}, relative error = {:.3}%", 100.0 * rel);
                }
                println!(", records {}", r.records.display());
            }
        }
        Command::Ingest { records } => {
            for (path, recs) in commands::cmd_ingest(records)? {
                let labeled = recs.iter().filter(|r| r.label.is_some()).count();
                let mean = recs.iter().map(|r| r.kpe).sum::<f64>() / recs.len() as f64;
                println!(
                    "{}: {} records verified, {labeled} labeled, mean kpe = {mean:.6}",
                    path.display(),
                    recs.len()
                );
            }
        }
        Command::AnalyzeDensity { .. } => {
            for r in commands::cmd_analyze_density(&config)? {
                println!(
                    "{}: rho = {:.4} (p = {:.3e}), cliffs delta = {:.4}, top-10% below median = {:.1}%",
                    r.method,
                    r.stats.spearman_rho.unwrap_or(f64::NAN),
                    r.stats.spearman_p.unwrap_or(f64::NAN),
                    r.stats.cliffs_delta.unwrap_or(f64::NAN),
                    100.0 * r.top_energy.fraction_below_median
                );
            }
        }
        Command::AnalyzeSemantics { .. } => {
            let r = commands::cmd_analyze_semantics(&config)?;
            println!("scale      n   delta_mu        t          p        d   low/mid/high");
            for row in &r.rows {
                let w = row.guidance_scale.map_or("none".into(), |w| w.to_string());
                println!(
                    "{w:>5} {:>6} {:>10.4} {:>8.3} {:>10.3e} {:>8.4}   {}/{}/{}",
                    row.n,
                    row.mean_diff.unwrap_or(f64::NAN),
                    row.welch_t.unwrap_or(f64::NAN),
                    row.welch_p.unwrap_or(f64::NAN),
                    row.cohens_d.unwrap_or(f64::NAN),
                    row.n_low,
                    row.n_mid,
                    row.n_high
                );
            }
        }
        Command::Report { reports } => {
            let r = commands::cmd_report(&config, reports)?;
            for f in &r.findings {
                println!("{f}");
            }
        }
    }
    Ok(())
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("kpeflow: {e}");
            e.exit_code()
        }
    }
}
