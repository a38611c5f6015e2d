//! Report emission: fixed-column CSV, lossless JSON, and whitespace
//! (query, margin) curve blocks for external plotting tools.

use super::{EvalReport, SweepRow};
use crate::error::{Error, Result};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const CSV_HEADER: &str = "model,defense,defense_params,attack,norm,epsilon,budget,seed,\
clean_acc,robust_acc,logit_diff,universality,wall_time_s";

fn csv_row(report: &EvalReport, budget: u64, robust: f64) -> String {
    let universality = report
        .universality
        .map(|u| u.to_string())
        .unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        report.model_id,
        report.defense,
        report.defense_params,
        report.attack,
        report.norm,
        report.epsilon,
        budget,
        report.seed,
        report.clean_accuracy,
        robust,
        report.logit_diff,
        universality,
        report.wall_time_s,
    )
}

/// One CSV row per (report, budget checkpoint).
pub fn write_csv(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InputDomain("no reports to write".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        for &(budget, robust) in &r.robust_accuracy {
            writeln!(w, "{}", csv_row(r, budget, robust))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format sweep table: axis and value columns ahead of the standard
/// report columns.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InputDomain("no sweep rows to write".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "axis,value,{CSV_HEADER}")?;
    for row in rows {
        for &(budget, robust) in &row.report.robust_accuracy {
            writeln!(
                w,
                "{},{},{}",
                row.axis,
                row.value,
                csv_row(&row.report, budget, robust)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Lossless JSON superset of the CSV, margin curves included.
pub fn write_json(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InputDomain("no reports to write".into()));
    }
    let file = File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(file), reports)
        .map_err(|e| Error::Config(format!("json serialization: {e}")))?;
    Ok(())
}

pub fn read_json(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let file = File::open(path)?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Format {
            offset: 0,
            reason: format!("json parse: {e}"),
        })
}

/// Whitespace-separated (query, margin) blocks, one block per report.
pub fn write_curves(reports: &[EvalReport], path: impl AsRef<Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InputDomain("no reports to write".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        writeln!(
            w,
            "# model={} defense={} attack={} seed={}",
            r.model_id, r.defense, r.attack, r.seed
        )?;
        for &(q, m) in &r.margin_curve {
            writeln!(w, "{q} {m}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
