//! Dataset records, JSONL loading, corpus preprocessing and synthetic suites.

mod preprocess;
pub mod synth;

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{COSTRA_CATEGORIES, COSTRA_UNSCORED};
use crate::rng::{label, SeedKey};

pub use preprocess::{clean_text, preprocess_corpus, split_sentences, PreprocessOptions};
pub use synth::{make_synthetic_suite, SynthSizes, SynthSuite};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub a: String,
    pub b: String,
    pub score: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostraTriplet {
    pub anchor: String,
    pub closer: String,
    pub farther: String,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDoc {
    pub text: String,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDocPair {
    pub query_id: String,
    pub query: String,
    pub doc: String,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub src: String,
    pub tgt: String,
}

/// A JSONL record type with its field list and invariants.
pub trait Record: Serialize + DeserializeOwned {
    const FIELDS: &'static [&'static str];

    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }

    /// Invariants spanning records; returns the offending index.
    fn validate_all(_records: &[Self]) -> std::result::Result<(), (usize, String)> {
        Ok(())
    }
}

impl Record for StsPair {
    const FIELDS: &'static [&'static str] = &["a", "b", "score", "split"];

    fn validate(&self) -> std::result::Result<(), String> {
        if !self.score.is_finite() {
            return Err(format!("score must be finite, got {}", self.score));
        }
        Ok(())
    }
}

impl Record for CostraTriplet {
    const FIELDS: &'static [&'static str] = &["anchor", "closer", "farther", "category"];

    fn validate(&self) -> std::result::Result<(), String> {
        let c = self.category.as_str();
        if COSTRA_CATEGORIES.contains(&c) || COSTRA_UNSCORED.contains(&c) {
            Ok(())
        } else {
            Err(format!("unknown category {c:?}"))
        }
    }
}

impl Record for LabeledDoc {
    const FIELDS: &'static [&'static str] = &["text", "labels"];

    fn validate(&self) -> std::result::Result<(), String> {
        if self.labels.is_empty() {
            return Err("labels must be non-empty".into());
        }
        Ok(())
    }
}

impl Record for QueryDocPair {
    const FIELDS: &'static [&'static str] = &["query_id", "query", "doc", "label"];

    fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.label) {
            return Err(format!("label must lie in [0, 1], got {}", self.label));
        }
        Ok(())
    }

    fn validate_all(records: &[Self]) -> std::result::Result<(), (usize, String)> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let q = seen.entry(&r.query_id).or_insert(&r.query);
            if *q != r.query {
                return Err((
                    i,
                    format!(
                        "query_id {:?} carries two different query texts",
                        r.query_id
                    ),
                ));
            }
        }
        Ok(())
    }
}

impl Record for ParallelPair {
    const FIELDS: &'static [&'static str] = &["src", "tgt"];

    fn validate(&self) -> std::result::Result<(), String> {
        if self.src.trim().is_empty() || self.tgt.trim().is_empty() {
            return Err("src and tgt must be non-empty".into());
        }
        Ok(())
    }
}

/// Parsed records plus warnings about ignored fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded<R> {
    pub records: Vec<R>,
    pub warnings: Vec<String>,
}

/// Strictly parse one record per non-blank line; errors carry the 1-based line number.
pub fn load_jsonl<R: Record>(path: &Path) -> Result<Loaded<R>> {
    let file = std::fs::File::open(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    let mut lines_of = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| parse_err(n, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        let Some(obj) = value.as_object() else {
            return Err(parse_err(n, "expected a JSON object".into()));
        };
        for key in obj.keys() {
            if !R::FIELDS.contains(&key.as_str()) {
                warnings.push(format!(
                    "{}:{n}: ignoring unknown field {key:?}",
                    path.display()
                ));
            }
        }
        let rec: R = serde_json::from_value(value).map_err(|e| parse_err(n, e.to_string()))?;
        rec.validate().map_err(|m| parse_err(n, m))?;
        records.push(rec);
        lines_of.push(n);
    }
    R::validate_all(&records).map_err(|(i, m)| parse_err(lines_of[i], m))?;
    Ok(Loaded { records, warnings })
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn fingerprint_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// First `n` records of a seeded shuffle, so smaller subsets nest in larger ones.
pub fn subset<T: Clone>(records: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > records.len() {
        return Err(Error::Parameter(format!(
            "subset of {n} from {} records",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut SeedKey::new(seed).split(label("subset")).rng());
    Ok(order[..n].iter().map(|&i| records[i].clone()).collect())
}
