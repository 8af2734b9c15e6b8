//! Experiment reports: per-(model, dataset, metric) rows with per-seed raw
//! values, significance flags against the baseline, JSON/CSV persistence and
//! an aligned text rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics where smaller values are better; significance tests flip for
/// these so a flag always means "the model improved on the baseline".
pub fn lower_is_better(metric: &str) -> bool {
    metric.contains("failure_rate") || metric == "fprd"
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub dataset: String,
    pub metric: String,
    pub mean: f64,
    /// Absent when fewer than two seeds were run.
    pub std: Option<f64>,
    pub per_seed: Vec<f64>,
    /// One-sided Welch p against the baseline; baseline rows carry none.
    pub p_value: Option<f64>,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    /// Wall-clock stamp; everything else in the report is deterministic for
    /// a given config, so comparisons should ignore this field.
    pub created_unix: u64,
    pub baseline_model: String,
    /// The model set one normalization run was scoped to.
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<MetricRow>,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path.as_ref(), json)
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// CSV rows (config, dataset, metric, mean, std, p). Floats use the
    /// shortest round-trip representation so a parse-back is lossless, and
    /// no timestamp is written, making reruns byte-comparable.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["config", "dataset", "metric", "mean", "std", "p"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.dataset.clone(),
                r.metric.clone(),
                format!("{}", r.mean),
                r.std.map(|s| format!("{s}")).unwrap_or_default(),
                r.p_value.map(|p| format!("{p}")).unwrap_or_default(),
            ])?;
        }
        w.flush()
            .map_err(|e| Error::io(path.as_ref().display().to_string(), e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub config: String,
    pub dataset: String,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
    pub p: Option<f64>,
}

/// Parse-back of [`EvalReport::save_csv`].
pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let opt = |i: usize| -> Result<Option<f64>> {
            match record.get(i).unwrap_or("") {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| Error::InvalidValue {
                    what: "report csv",
                    details: format!("bad float `{s}`"),
                }),
            }
        };
        rows.push(CsvRow {
            config: record.get(0).unwrap_or("").to_string(),
            dataset: record.get(1).unwrap_or("").to_string(),
            metric: record.get(2).unwrap_or("").to_string(),
            mean: opt(3)?.ok_or(Error::InvalidValue {
                what: "report csv",
                details: "missing mean".into(),
            })?,
            std: opt(4)?,
            p: opt(5)?,
        });
    }
    Ok(rows)
}

/// Aligned text table: one row per model, one column per (dataset, metric)
/// pair in first-appearance order (the runner registers seen datasets before
/// unseen ones). Significant cells carry a `*` marker.
pub fn render_table(report: &EvalReport) -> String {
    let mut columns: Vec<(String, String)> = Vec::new();
    for r in &report.rows {
        let key = (r.dataset.clone(), r.metric.clone());
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    let mut models: Vec<String> = Vec::new();
    for r in &report.rows {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }

    let cell = |model: &str, col: &(String, String)| -> String {
        report
            .rows
            .iter()
            .find(|r| r.model == model && r.dataset == col.0 && r.metric == col.1)
            .map(|r| {
                let star = if r.significant == Some(true) { "*" } else { "" };
                match r.std {
                    Some(s) => format!("{:.4}±{:.4}{star}", r.mean, s),
                    None => format!("{:.4}{star}", r.mean),
                }
            })
            .unwrap_or_default()
    };

    let headers: Vec<String> = std::iter::once("model".to_string())
        .chain(columns.iter().map(|(d, m)| format!("{d}/{m}")))
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    let mut grid: Vec<Vec<String>> = Vec::new();
    for model in &models {
        let mut row = vec![model.clone()];
        for col in &columns {
            row.push(cell(model, col));
        }
        for (w, c) in widths.iter_mut().zip(&row) {
            *w = (*w).max(c.len());
        }
        grid.push(row);
    }

    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&fmt_row(&headers, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    out.push('\n');
    for row in &grid {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out.push_str("* significant improvement over the baseline (one-sided Welch, p < 0.05)\n");
    out
}

/// FNV-1a over the canonical JSON of a config value. `serde_json`'s default
/// map keeps keys sorted, so the serialization is stable.
pub fn hash_canonical_json(value: &serde_json::Value) -> String {
    let canon = value.to_string();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canon.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
