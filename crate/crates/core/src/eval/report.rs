use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::Report;
use super::metrics::{average_forgetting, average_performance};
use crate::error::{Error, Result};
use crate::reconstruct::{export_queries, QueryRecord};

pub const REPORT_FILE: &str = "report.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const QUERIES_FILE: &str = "queries.json";

/// Paths of the files written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedFiles {
    pub report: PathBuf,
    pub matrix: PathBuf,
    pub trajectory: PathBuf,
    pub queries: Option<PathBuf>,
}

/// Writes the JSON report, the matrix CSV (row `i` holds `a[i][i..T]`), the
/// per-session trajectory CSV and, when given, the query export.
pub fn emit_report(report: &Report, dir: &Path, queries: Option<&[QueryRecord]>) -> Result<EmittedFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(e).at_stage(format!("writing {}", dir.display())))?;
    let files = EmittedFiles {
        report: dir.join(REPORT_FILE),
        matrix: dir.join(MATRIX_FILE),
        trajectory: dir.join(TRAJECTORY_FILE),
        queries: queries.map(|_| dir.join(QUERIES_FILE)),
    };
    fs::write(&files.report, serde_json::to_vec_pretty(report)?)?;

    let t = report.matrix.sessions();
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(&files.matrix)?;
    for i in 0..t {
        let row: Vec<String> = (i..t)
            .map(|j| report.matrix.get(i, j).map_or(String::new(), |v| v.to_string()))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&files.trajectory)?;
    w.write_record(["session", "seen_mean", "final_loss"])?;
    for s in &report.sessions {
        w.write_record([(s.session + 1).to_string(), s.seen_mean.to_string(), s.final_loss.to_string()])?;
    }
    w.flush()?;

    if let (Some(q), Some(path)) = (queries, &files.queries) {
        export_queries(q, path)?;
    }
    Ok(files)
}

pub fn load_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Checks that AP and FG match a recomputation from the embedded matrix.
pub fn verify_report(report: &Report, tol: f64) -> Result<()> {
    let ap = average_performance(&report.matrix)?;
    if (ap - report.ap).abs() > tol {
        return Err(Error::Metric(format!("stored AP {} differs from recomputed {ap}", report.ap)));
    }
    if let Some(fg) = report.fg {
        let again = average_forgetting(&report.matrix)?;
        if (again - fg).abs() > tol {
            return Err(Error::Metric(format!("stored FG {fg} differs from recomputed {again}")));
        }
    }
    Ok(())
}
