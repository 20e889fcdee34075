//! Artifact writers: CSV (shortest round-trip floats), JSON metadata
//! sidecar, and a small gnuplot script per experiment.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::CliError;
use psdflow::Diagnostics;

/// One CSV cell. Floats go through Rust's shortest-round-trip formatting,
/// so parsing the file recovers the exact f64.
pub enum Cell {
    F(f64),
    U(u64),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::F(v) => write!(f, "{v}"),
            Cell::U(v) => write!(f, "{v}"),
        }
    }
}

pub fn write_csv(
    dir: &Path,
    name: &str,
    header: &[&str],
    rows: &[Vec<Cell>],
) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    std::fs::write(&path, text)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

pub fn diagnostics_json(d: &Diagnostics) -> Value {
    json!({
        "near_singular_rs": d.near_singular_rs,
        "ill_conditioned_phi": d.ill_conditioned_phi,
        "positivity_clamps": d.positivity_clamps,
    })
}

/// Metadata sidecar: config echo, code version, wall-clock start, run
/// diagnostics, and experiment-specific summary numbers.
pub fn write_meta<C: Serialize>(
    dir: &Path,
    name: &str,
    experiment: &str,
    config: &C,
    diagnostics: &Diagnostics,
    summary: Value,
    started_at: &str,
) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let doc = json!({
        "experiment": experiment,
        "version": env!("CARGO_PKG_VERSION"),
        "started_at": started_at,
        "config": serde_json::to_value(config)
            .map_err(|e| CliError::Io(format!("serializing config: {e}")))?,
        "diagnostics": diagnostics_json(diagnostics),
        "summary": summary,
    });
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| CliError::Io(format!("serializing metadata: {e}")))?;
    std::fs::write(&path, text)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

/// Plot emission stays data + script text; nothing is rendered.
pub fn write_plot_script(
    dir: &Path,
    name: &str,
    csv_name: &str,
    title: &str,
    columns: &[(usize, &str)],
    logscale_y: bool,
) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let mut text = String::new();
    text.push_str("set datafile separator ','\n");
    text.push_str(&format!("set title '{title}'\n"));
    text.push_str("set key left top\n");
    if logscale_y {
        text.push_str("set logscale y\n");
    }
    let series: Vec<String> = columns
        .iter()
        .map(|(col, label)| format!("'{csv_name}' using 1:{col} with lines title '{label}'"))
        .collect();
    text.push_str(&format!("plot {}\n", series.join(", \\\n     ")));
    std::fs::write(&path, text)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}
