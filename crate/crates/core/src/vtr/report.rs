use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::condition_names;

use super::teach::{FrameRecord, RunReport};

/// Per-run CSV columns.
pub const RUN_COLUMNS: [&str; 5] = ["frame", "vertex", "inliers", "failure", "pose_error"];
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MATRIX_FILE: &str = "condition_matrix.csv";

/// A repeat run tagged with the condition its map was taught under.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedRun {
    pub teach: String,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SummaryRow {
    teach: String,
    repeat: String,
    frames: usize,
    mean_inliers: f64,
    failures: usize,
    failure_fraction: f64,
    planar_rmse: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::data(path, e.to_string())
}

pub fn write_run_csv(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for f in &report.frames {
        w.serialize(f).map_err(|e| csv_err(path, e))?;
    }
    if report.frames.is_empty() {
        w.write_record(RUN_COLUMNS).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_run_csv(path: &Path, condition: &str) -> Result<RunReport> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(RUN_COLUMNS) {
        return Err(Error::data(path, format!("unexpected columns {header:?}")));
    }
    let frames = r
        .deserialize::<FrameRecord>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok(RunReport::from_frames(condition, frames))
}

/// Mean inliers with teach conditions as rows and repeat conditions as
/// columns. Both axes list the same conditions, so the matrix is square;
/// cells without a run are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMatrix {
    pub conditions: Vec<String>,
    pub mean_inliers: Vec<Vec<f64>>,
}

impl ConditionMatrix {
    pub fn from_runs(runs: &[TaggedRun]) -> Self {
        let used = |c: &str| runs.iter().any(|r| r.teach == c || r.report.condition == c);
        let mut conditions: Vec<String> = condition_names().filter(|c| used(c)).map(String::from).collect();
        for r in runs {
            for c in [&r.teach, &r.report.condition] {
                if !conditions.contains(c) {
                    conditions.push(c.clone());
                }
            }
        }
        let n = conditions.len();
        let mut mean_inliers = vec![vec![f64::NAN; n]; n];
        let index = |c: &str| conditions.iter().position(|x| x == c).expect("condition listed");
        for r in runs {
            mean_inliers[index(&r.teach)][index(&r.report.condition)] = r.report.mean_inliers;
        }
        Self {
            conditions,
            mean_inliers,
        }
    }

    pub fn get(&self, teach: &str, repeat: &str) -> Option<f64> {
        let i = self.conditions.iter().position(|c| c == teach)?;
        let j = self.conditions.iter().position(|c| c == repeat)?;
        Some(self.mean_inliers[i][j]).filter(|v| !v.is_nan())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = std::iter::once("teach").chain(self.conditions.iter().map(String::as_str));
        w.write_record(header).map_err(|e| csv_err(path, e))?;
        for (c, row) in self.conditions.iter().zip(&self.mean_inliers) {
            let cells = row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() });
            w.write_record(std::iter::once(c.clone()).chain(cells)).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let conditions: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut mean_inliers = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            if rec.get(0) != conditions.get(i).map(String::as_str) || rec.len() != conditions.len() + 1 {
                return Err(Error::data(path, format!("row {i} does not match the column conditions")));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| if v.is_empty() { Ok(f64::NAN) } else { v.parse::<f64>() })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::data(path, e.to_string()))?;
            mean_inliers.push(row);
        }
        if mean_inliers.len() != conditions.len() {
            return Err(Error::data(path, "condition matrix is not square"));
        }
        Ok(Self {
            conditions,
            mean_inliers,
        })
    }
}

/// Per-run file name inside the report directory.
pub fn run_file(run: &TaggedRun) -> String {
    format!("run_{}_{}.csv", run.teach, run.report.condition)
}

/// Writes one CSV per run, a summary table and the condition matrix.
/// Returns the paths written, in order.
pub fn emit_report(dir: &Path, runs: &[TaggedRun]) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::Config("no runs to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for run in runs {
        let path = dir.join(run_file(run));
        write_run_csv(&path, &run.report)?;
        written.push(path);
    }
    let path = dir.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for run in runs {
        let r = &run.report;
        w.serialize(SummaryRow {
            teach: run.teach.clone(),
            repeat: r.condition.clone(),
            frames: r.frames.len(),
            mean_inliers: r.mean_inliers,
            failures: r.failures,
            failure_fraction: r.failure_fraction,
            planar_rmse: r.planar_rmse,
        })
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);
    let path = dir.join(MATRIX_FILE);
    ConditionMatrix::from_runs(runs).write_csv(&path)?;
    written.push(path);
    Ok(written)
}

/// Reads back every run listed in a report directory's summary.
pub fn read_report(dir: &Path) -> Result<Vec<TaggedRun>> {
    let path = dir.join(SUMMARY_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let rows = r
        .deserialize::<SummaryRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| csv_err(&path, e))?;
    rows.into_iter()
        .map(|row| {
            let name = format!("run_{}_{}.csv", row.teach, row.repeat);
            let report = read_run_csv(&dir.join(name), &row.repeat)?;
            if report.frames.len() != row.frames {
                return Err(Error::data(&path, format!("{} frames listed, run has {}", row.frames, report.frames.len())));
            }
            Ok(TaggedRun {
                teach: row.teach,
                report,
            })
        })
        .collect()
}
