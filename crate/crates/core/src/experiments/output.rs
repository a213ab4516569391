//! File outputs. Column orders are part of the public contract.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::run::RunLog;
use super::scan::ScanRow;
use crate::error::Result;

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "chosen_logp",
    "rejected_logp",
    "margin",
    "alpha",
    "gamma",
    "grad_norm",
    "gamma_advantage",
    "gamma_pos_frac",
];

pub const MARGIN_SCAN_HEADER: [&str; 7] = [
    "index",
    "pair",
    "margin",
    "grad_norm",
    "similarity_factor",
    "pred_dlogp_w",
    "pred_dlogp_l",
];

pub const GAMMA_TRACE_HEADER: [&str; 5] = ["step", "margin", "alpha", "gamma", "gamma_advantage"];

#[derive(Serialize)]
struct GammaRow {
    step: usize,
    margin: f64,
    alpha: f64,
    gamma: f64,
    gamma_advantage: f64,
}

fn write_rows<T: Serialize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = T>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per evaluation point.
pub fn write_metrics(path: &Path, log: &RunLog) -> Result<()> {
    write_rows(path, &METRICS_HEADER, &log.evals)
}

/// One row per training update.
pub fn write_gamma_trace(path: &Path, log: &RunLog) -> Result<()> {
    write_rows(
        path,
        &GAMMA_TRACE_HEADER,
        log.steps.iter().map(|s| GammaRow {
            step: s.step,
            margin: s.margin,
            alpha: s.alpha,
            gamma: s.gamma,
            gamma_advantage: s.gamma_advantage,
        }),
    )
}

pub fn write_margin_scan(path: &Path, rows: &[ScanRow]) -> Result<()> {
    write_rows(path, &MARGIN_SCAN_HEADER, rows)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
