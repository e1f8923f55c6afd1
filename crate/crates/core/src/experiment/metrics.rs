//! Metrics stream shared by every training method.
//!
//! ```text
//! # <accounting note>
//! iter,pde_solves,mean_val_J,val_J_0,...,val_J_{k-1},<loss columns...>,lr
//! ```
//!
//! One row per validation. Loss columns hold the most recent training
//! iteration's values and are empty on the initial row (iteration 0).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::hjb::ValidationResult;

pub const ACCOUNTING_NOTE: &str =
    "pde_solves counts implicit-Euler linear solves made by training rollouts only; \
validation rollouts are measurement and are not counted";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub pde_solves: u64,
    pub mean_val_j: f64,
    pub per_problem: Vec<f64>,
    pub losses: Vec<Option<f64>>,
    pub lr: Option<f64>,
}

impl MetricsRow {
    pub fn new(
        iter: usize,
        pde_solves: u64,
        val: &ValidationResult,
        losses: Vec<Option<f64>>,
        lr: Option<f64>,
    ) -> Self {
        Self {
            iter,
            pde_solves,
            mean_val_j: val.mean,
            per_problem: val.per_problem.clone(),
            losses,
            lr,
        }
    }
}

fn header(problems: usize, loss_columns: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["iter", "pde_solves", "mean_val_J"]
        .map(String::from)
        .to_vec();
    h.extend((0..problems).map(|k| format!("val_J_{k}")));
    h.extend(loss_columns.iter().cloned());
    h.push("lr".into());
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends rows to a metrics file, flushing after each one so a killed run
/// leaves a readable prefix.
pub struct MetricsWriter {
    out: csv::Writer<File>,
    problems: usize,
    losses: usize,
    last_solves: u64,
}

impl MetricsWriter {
    pub fn create(path: &Path, problems: usize, loss_columns: &[&str]) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "# {ACCOUNTING_NOTE}")?;
        let mut out = csv::Writer::from_writer(file);
        let names: Vec<String> = loss_columns.iter().map(|s| s.to_string()).collect();
        out.write_record(header(problems, &names))?;
        out.flush()?;
        Ok(Self {
            out,
            problems,
            losses: loss_columns.len(),
            last_solves: 0,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if row.per_problem.len() != self.problems || row.losses.len() != self.losses {
            return Err(Error::Format(
                "metrics row does not match the header".into(),
            ));
        }
        if row.pde_solves < self.last_solves {
            return Err(Error::Format("solve count went backwards".into()));
        }
        self.last_solves = row.pde_solves;
        let mut rec = vec![
            row.iter.to_string(),
            row.pde_solves.to_string(),
            row.mean_val_j.to_string(),
        ];
        rec.extend(row.per_problem.iter().map(|v| v.to_string()));
        rec.extend(row.losses.iter().map(|v| opt(*v)));
        rec.push(opt(row.lr));
        self.out.write_record(rec)?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub note: Option<String>,
    pub loss_columns: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn problems(&self) -> usize {
        self.rows.first().map_or(0, |r| r.per_problem.len())
    }

    /// First cumulative solve count whose validation mean is at or below
    /// `threshold`.
    pub fn solves_to_reach(&self, threshold: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.mean_val_j <= threshold)
            .map(|r| r.pde_solves)
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn best(&self) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .min_by(|a, b| a.mean_val_j.total_cmp(&b.mean_val_j))
    }
}

pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let note = first.strip_prefix("# ").map(|s| s.trim_end().to_string());
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let head = rd.headers()?.clone();
    let cols: Vec<&str> = head.iter().collect();
    if cols.len() < 4
        || cols[..3] != ["iter", "pde_solves", "mean_val_J"]
        || cols.last() != Some(&"lr")
    {
        return Err(Error::Format(format!(
            "{} is not a metrics file",
            path.display()
        )));
    }
    let problems = cols.iter().filter(|c| c.starts_with("val_J_")).count();
    let loss_columns: Vec<String> = cols[3 + problems..cols.len() - 1]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad number `{s}` in metrics")))
    };
    let maybe = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f: Vec<&str> = rec.iter().collect();
        let int = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad integer `{s}` in metrics")))
        };
        rows.push(MetricsRow {
            iter: int(f[0])? as usize,
            pde_solves: int(f[1])?,
            mean_val_j: num(f[2])?,
            per_problem: f[3..3 + problems]
                .iter()
                .map(|s| num(s))
                .collect::<Result<_>>()?,
            losses: f[3 + problems..f.len() - 1]
                .iter()
                .map(|s| maybe(s))
                .collect::<Result<_>>()?,
            lr: maybe(f[f.len() - 1])?,
        });
    }
    Ok(MetricsTable {
        note,
        loss_columns,
        rows,
    })
}
