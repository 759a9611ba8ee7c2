//! Evaluation reports and their Markdown and CSV renderings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// A dataset file identified by name and content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub fingerprint: String,
}

impl DatasetRef {
    pub fn from_file(path: &Path) -> Result<Self> {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(DatasetRef { name, fingerprint: crate::data::fingerprint_file(path)? })
    }
}

/// All metrics of one model under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub seed: u64,
    pub datasets: Vec<DatasetRef>,
    pub metrics: Vec<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// SHA-256 of the run configuration's canonical JSON.
    pub config_hash: String,
    /// Seconds since the epoch taken from `SOURCE_DATE_EPOCH`, when set.
    pub timestamp: Option<u64>,
    pub revision: String,
}

impl ReportMeta {
    pub fn for_config<C: Serialize>(config: &C) -> Result<Self> {
        Ok(ReportMeta { config_hash: config_hash(config)?, timestamp: source_date_epoch(), revision: revision() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub rows: Vec<ReportRow>,
    pub meta: ReportMeta,
}

/// Hash of `config` serialized with sorted object keys.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let value = serde_json::to_value(config)?;
    let bytes = serde_json::to_vec(&value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn source_date_epoch() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok())
}

pub fn revision() -> String {
    match option_env!("EMBEDKIT_REVISION") {
        Some(r) => r.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl ReportFormat {
    /// CSV for a `.csv` extension, Markdown otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Markdown,
        }
    }
}

fn cell(m: &MetricReport) -> String {
    match m.stddev {
        Some(sd) => format!("{:.2} ± {:.2}", m.value, sd),
        None => format!("{:.2}", m.value),
    }
}

impl EvalReport {
    /// Metric names in first-seen order over rows.
    pub fn columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = Vec::new();
        for m in self.rows.iter().flat_map(|r| &r.metrics) {
            if !cols.contains(&m.name.as_str()) {
                cols.push(&m.name);
            }
        }
        cols
    }

    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let mut out = format!("# {}\n\n", self.title);
        let ts = self.meta.timestamp.map_or_else(|| "unpinned".to_string(), |t| t.to_string());
        out += &format!(
            "config `{}`, revision `{}`, timestamp {}\n\n",
            self.meta.config_hash, self.meta.revision, ts
        );
        out += "| model |";
        for c in &cols {
            out += &format!(" {c} |");
        }
        out += "\n|---|";
        out += &"---:|".repeat(cols.len());
        out += "\n";
        for r in &self.rows {
            out += &format!("| {} |", r.model);
            for c in &cols {
                match r.metrics.iter().find(|m| m.name == *c) {
                    Some(m) => out += &format!(" {} |", cell(m)),
                    None => out += " – |",
                }
            }
            out += "\n";
        }
        out += "\n";
        for r in &self.rows {
            let data: Vec<String> = r.datasets.iter().map(|d| format!("{} `{}`", d.name, d.fingerprint)).collect();
            out += &format!("- {}: seed {}; {}\n", r.model, r.seed, data.join(", "));
        }
        out
    }

    /// Long format, one line per metric, values at full precision.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["model", "seed", "datasets", "metric", "value", "stddev", "n"]).map_err(csv_err)?;
        for r in &self.rows {
            let data: Vec<String> = r.datasets.iter().map(|d| format!("{}={}", d.name, d.fingerprint)).collect();
            for m in &r.metrics {
                w.write_record([
                    r.model.clone(),
                    r.seed.to_string(),
                    data.join(";"),
                    m.name.clone(),
                    m.value.to_string(),
                    m.stddev.map_or_else(String::new, |s| s.to_string()),
                    m.n.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Markdown => Ok(self.to_markdown()),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render(ReportFormat::from_path(path))?)?;
        Ok(())
    }
}

/// `(model, metric, value, stddev)` per CSV line.
pub fn parse_csv(text: &str) -> Result<Vec<(String, String, f64, Option<f64>)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("csv: {e}")))?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("csv value {s:?}: {e}")));
        let sd = if rec[5].is_empty() { None } else { Some(num(&rec[5])?) };
        out.push((rec[0].to_string(), rec[3].to_string(), num(&rec[4])?, sd));
    }
    Ok(out)
}
