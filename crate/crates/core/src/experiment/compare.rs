//! Method-agnostic comparison of finished runs.
//!
//! Output CSV, one row per run directory:
//!
//! ```text
//! run,method,setup,seed,pde_solves,final_mean_val_J,best_mean_val_J,
//! baseline_mean_J,final_gap,best_gap,solves_to_<threshold>...
//! ```
//!
//! Gaps are absolute (`J_method − J_baseline`, averaged over problems) and
//! empty when no baseline is available. `solves_to_*` holds the first
//! cumulative training solve count whose validation mean is at or below the
//! threshold, or `not reached`.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::Method;
use super::metrics::{read_metrics, MetricsTable};
use super::run::{
    lookup_baseline, read_summary, read_validation_entries, RunSummary, ValidationEntry,
};
use super::run::{BASELINE_FILE, METRICS_FILE, VALIDATION_FILE};
use crate::baseline::{read_cache, suboptimality, BaselineRecord};
use crate::error::{Error, Result};

pub const NOT_REACHED: &str = "not reached";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Absolute(f64),
    /// `(1 + pct/100)·J_baseline`, written `25%`.
    AboveBaseline(f64),
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "bad threshold `{s}`; use a number or a percentage like 25%"
            ))
        };
        match s.trim().strip_suffix('%') {
            Some(p) => p
                .trim()
                .parse()
                .map(Threshold::AboveBaseline)
                .map_err(|_| bad()),
            None => s.trim().parse().map(Threshold::Absolute).map_err(|_| bad()),
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Absolute(v) => write!(f, "{v}"),
            Threshold::AboveBaseline(p) => write!(f, "baseline+{p}%"),
        }
    }
}

impl Threshold {
    pub fn value(&self, baseline_mean: Option<f64>) -> Result<f64> {
        match (self, baseline_mean) {
            (Threshold::Absolute(v), _) => Ok(*v),
            (Threshold::AboveBaseline(p), Some(b)) => Ok(b * (1.0 + p / 100.0)),
            (Threshold::AboveBaseline(_), None) => Err(Error::Config(
                "relative thresholds need baseline objectives for every problem".into(),
            )),
        }
    }
}

/// What a run directory contributes to a comparison.
#[derive(Clone, Debug)]
pub struct RunData {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub validation: Vec<ValidationEntry>,
    /// Learning curve; absent for baseline runs.
    pub metrics: Option<MetricsTable>,
    /// Per-problem optima written by baseline runs.
    pub baseline: Option<Vec<BaselineRecord>>,
}

pub fn load_run(dir: &Path) -> Result<RunData> {
    let summary = read_summary(dir)?;
    let validation = read_validation_entries(&dir.join(VALIDATION_FILE))?;
    let (metrics, baseline) = match summary.method {
        Method::Baseline => (
            None,
            Some(read_cache(File::open(dir.join(BASELINE_FILE))?)?),
        ),
        _ => (Some(read_metrics(&dir.join(METRICS_FILE))?), None),
    };
    Ok(RunData {
        dir: dir.to_path_buf(),
        summary,
        validation,
        metrics,
        baseline,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub method: Method,
    pub seed: u64,
    pub pde_solves: u64,
    pub final_mean_val_j: f64,
    pub best_mean_val_j: f64,
    pub final_gap: Option<f64>,
    pub best_gap: Option<f64>,
    /// One entry per threshold; `None` = not reached (or not applicable for
    /// baseline rows).
    pub solves_to: Vec<Option<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub setup: crate::env::Setup,
    pub thresholds: Vec<Threshold>,
    pub baseline_mean: Option<f64>,
    pub rows: Vec<ComparisonRow>,
}

/// Compares at least two runs measured on the same validation problems.
/// Baseline objectives come from `cache` or from any baseline run among
/// `runs`.
pub fn compare(
    runs: &[RunData],
    thresholds: &[Threshold],
    cache: Option<&[BaselineRecord]>,
) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Config(
            "compare needs at least two run directories".into(),
        ));
    }
    let reference = &runs[0].validation;
    if let Some(bad) = runs.iter().find(|r| &r.validation != reference) {
        return Err(Error::Config(format!(
            "incompatible validation sets: {} and {}",
            runs[0].dir.display(),
            bad.dir.display()
        )));
    }
    let mut pool: Vec<BaselineRecord> = cache.map(<[_]>::to_vec).unwrap_or_default();
    for r in runs {
        pool.extend(r.baseline.iter().flatten().cloned());
    }
    let baseline = lookup_baseline(&pool, reference);
    let baseline_mean = baseline
        .as_ref()
        .map(|j| j.iter().sum::<f64>() / j.len() as f64);
    let levels = thresholds
        .iter()
        .map(|t| t.value(baseline_mean))
        .collect::<Result<Vec<_>>>()?;

    let rows = runs
        .iter()
        .map(|r| ComparisonRow {
            run: r.dir.display().to_string(),
            method: r.summary.method,
            seed: r.summary.seed,
            pde_solves: r.summary.pde_solves,
            final_mean_val_j: r.summary.final_mean_val_j,
            best_mean_val_j: r.summary.best_mean_val_j,
            final_gap: baseline_mean.map(|b| suboptimality(r.summary.final_mean_val_j, b)),
            best_gap: baseline_mean.map(|b| suboptimality(r.summary.best_mean_val_j, b)),
            solves_to: levels
                .iter()
                .map(|&t| r.metrics.as_ref().and_then(|m| m.solves_to_reach(t)))
                .collect(),
        })
        .collect();
    Ok(Comparison {
        setup: runs[0].summary.setup,
        thresholds: thresholds.to_vec(),
        baseline_mean,
        rows,
    })
}

pub fn compare_dirs(
    dirs: &[PathBuf],
    thresholds: &[Threshold],
    cache: Option<&Path>,
) -> Result<Comparison> {
    let runs = dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>>>()?;
    let cache = cache
        .map(|p| File::open(p).map_err(Error::from).and_then(read_cache))
        .transpose()?;
    compare(&runs, thresholds, cache.as_deref())
}

pub fn write_comparison<W: Write>(w: W, c: &Comparison) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head: Vec<String> = [
        "run",
        "method",
        "setup",
        "seed",
        "pde_solves",
        "final_mean_val_J",
        "best_mean_val_J",
        "baseline_mean_J",
        "final_gap",
        "best_gap",
    ]
    .map(String::from)
    .to_vec();
    head.extend(c.thresholds.iter().map(|t| format!("solves_to_{t}")));
    out.write_record(&head)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &c.rows {
        let mut rec = vec![
            r.run.clone(),
            r.method.to_string(),
            c.setup.to_string(),
            r.seed.to_string(),
            r.pde_solves.to_string(),
            r.final_mean_val_j.to_string(),
            r.best_mean_val_j.to_string(),
            opt(c.baseline_mean),
            opt(r.final_gap),
            opt(r.best_gap),
        ];
        for s in &r.solves_to {
            rec.push(match (s, r.method) {
                (_, Method::Baseline) => String::new(),
                (Some(n), _) => n.to_string(),
                (None, _) => NOT_REACHED.to_string(),
            });
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
