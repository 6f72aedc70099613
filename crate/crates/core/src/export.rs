//! Collect metric logs and diagnostics tables of a run directory into one
//! bundle.
//!
//! Every table found under the run directory is appended to the bundle file
//! of its schema, prefixed by a `source` column holding the directory it came
//! from (relative to the run directory). Rows without a terminating newline
//! or with the wrong field count are skipped, so a run that was interrupted
//! mid-write exports its completed rows. The bundle is rebuilt from scratch
//! on every call.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, VemError};
use crate::protocols::{CURVE_HEADER, DIAGNOSTICS_HEADER, FIGURE1_HEADER};
use crate::training::{METRICS_ECHO_HEADER, METRICS_HEADER};

pub const EXPORT_DIR: &str = "export";

/// `(bundle file, source file names, header)` per schema.
fn schemas() -> Vec<(&'static str, &'static [&'static str], String)> {
    vec![
        ("metrics.csv", &["metrics.csv"], format!("{METRICS_ECHO_HEADER},{METRICS_HEADER}")),
        ("diagnostics.csv", &["figure2.csv", "figure3.csv"], DIAGNOSTICS_HEADER.join(",")),
        ("figure1.csv", &["figure1.csv"], FIGURE1_HEADER.join(",")),
        ("figure1_curve.csv", &["figure1_curve.csv"], CURVE_HEADER.join(",")),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportSummary {
    pub bundle_dir: PathBuf,
    /// Rows written per bundle file, in schema order.
    pub rows: Vec<(String, usize)>,
}

fn collect_files(dir: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| VemError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| VemError::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p == skip {
            continue;
        }
        if p.is_dir() {
            collect_files(&p, skip, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn field_count(line: &str) -> usize {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes())
        .records()
        .next()
        .and_then(|r| r.ok())
        .map_or(0, |r| r.len())
}

fn source_label(run_dir: &Path, file: &Path) -> String {
    let rel = file
        .parent()
        .and_then(|p| p.strip_prefix(run_dir).ok())
        .map(|p| p.to_string_lossy().replace('\\', "/"))
        .unwrap_or_default();
    if rel.is_empty() {
        ".".to_string()
    } else {
        rel
    }
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Rebuild `<run_dir>/export` from the tables under `run_dir`.
pub fn export_results(run_dir: &Path) -> Result<ExportSummary> {
    if !run_dir.is_dir() {
        return Err(VemError::param(format!("run directory {} does not exist", run_dir.display())));
    }
    let bundle_dir = run_dir.join(EXPORT_DIR);
    let mut files = Vec::new();
    collect_files(run_dir, &bundle_dir, &mut files)?;
    fs::create_dir_all(&bundle_dir).map_err(|e| VemError::io(&bundle_dir, e))?;

    let mut rows = Vec::new();
    for (bundle, sources, header) in schemas() {
        let width = field_count(&header);
        let mut text = format!("source,{header}\n");
        let mut count = 0;
        for f in files.iter().filter(|f| {
            f.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| sources.contains(&n))
        }) {
            let content = fs::read_to_string(f).map_err(|e| VemError::io(f, e))?;
            let mut lines = content.split_inclusive('\n');
            if lines.next().map(str::trim_end) != Some(header.as_str()) {
                continue;
            }
            let label = quote(&source_label(run_dir, f));
            for line in lines {
                let Some(body) = line.strip_suffix('\n') else { continue };
                if field_count(body) != width {
                    continue;
                }
                text.push_str(&label);
                text.push(',');
                text.push_str(body);
                text.push('\n');
                count += 1;
            }
        }
        let path = bundle_dir.join(bundle);
        fs::write(&path, text).map_err(|e| VemError::io(&path, e))?;
        rows.push((bundle.to_string(), count));
    }
    Ok(ExportSummary { bundle_dir, rows })
}
