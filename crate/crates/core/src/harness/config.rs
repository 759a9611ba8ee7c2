//! Run configuration: JSON file, environment overrides and scale profiles.
//!
//! Keys resolve in this order, later winning: profile defaults, the JSON file,
//! `EMBEDKIT_<UPPER_KEY>` environment variables, explicit overrides.
//! Environment values are parsed as JSON and fall back to a plain string.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

use super::finetune::{FinetuneConfig, RankingLoss};
use super::probe::{HeadKind, ProbeConfig};
use super::zero_shot::PoolingChoice;

pub const ENV_PREFIX: &str = "EMBEDKIT_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    PretrainMlm,
    PretrainRetromae,
    Distill,
    FinetuneSimcse,
    ZeroShotEval,
    Probe,
    FinetuneEval,
    AblateDatasize,
    QuantizeCheck,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneTask {
    Classification,
    Ranking,
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub profile: Profile,
    pub output_dir: PathBuf,
    /// Report file name inside `output_dir`; `.csv` selects CSV.
    pub report: String,
    /// Input checkpoints. Pre-training starts from a fresh encoder when empty.
    pub models: Vec<PathBuf>,
    /// Adds the random-embedding baseline row to zero-shot reports.
    pub random_baseline: bool,
    pub vocab: Option<PathBuf>,
    /// Named inputs such as `corpus`, `sts`, `costra`, `docs`, `ranking_train`.
    pub data: BTreeMap<String, PathBuf>,

    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub vocab_size: usize,
    pub min_freq: usize,
    /// Lowercase text before learning a vocabulary.
    pub lowercase: bool,

    pub steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,

    pub temperature: f32,
    pub pooling: PoolingChoice,
    pub mask_ratio: f32,
    pub decoder_mask_ratio: f32,

    pub folds: usize,
    pub head_kind: HeadKind,
    pub finetune_task: FinetuneTask,
    pub ranking_loss: RankingLoss,

    pub sizes: Vec<usize>,
    pub repeats: usize,
}

fn desk_defaults(task: Option<Task>) -> Map<String, Value> {
    let (lr, steps, batch) = match task {
        Some(Task::PretrainMlm | Task::PretrainRetromae) => (1e-3, 3000, 32),
        Some(Task::FinetuneSimcse) => (1e-4, 100, 64),
        Some(Task::Distill) => (1e-3, 0, 32),
        Some(Task::Probe) => (1e-2, 300, 32),
        _ => (1e-4, 0, 32),
    };
    let v = json!({
        "profile": "desk",
        "report": "report.md",
        "models": [],
        "random_baseline": false,
        "vocab": null,
        "data": {},
        "layers": 4, "hidden": 64, "heads": 4, "max_len": 64, "dropout": 0.1,
        "vocab_size": crate::tokenizer::DEFAULT_VOCAB_SIZE, "min_freq": 2, "lowercase": false,
        "steps": steps, "epochs": 3, "batch_size": batch, "lr": lr,
        "warmup_frac": 0.1, "weight_decay": 0.01, "clip_norm": null,
        "temperature": 0.05, "pooling": "cls",
        "mask_ratio": 0.3, "decoder_mask_ratio": 0.5,
        "folds": 5, "head_kind": "multiclass-softmax", "finetune_task": "ranking",
        "ranking_loss": {"kind": "info-nce", "temperature": 0.05},
        "sizes": [100, 500, 1000, 5000], "repeats": 4,
    });
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

/// Full-scale values; documented, not exercised by the test suite.
fn full_scale_overrides() -> Map<String, Value> {
    let v = json!({
        "profile": "paper",
        "layers": 12, "hidden": 256, "heads": 4, "max_len": 512,
        "vocab_size": crate::tokenizer::FULL_VOCAB_SIZE,
        "batch_size": 512, "steps": 250_000, "lr": 5e-4,
    });
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

fn env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Builder that layers the configuration sources.
#[derive(Clone, Debug, Default)]
pub struct ConfigLoader {
    file: Map<String, Value>,
    overrides: Map<String, Value>,
    data: Vec<(String, PathBuf)>,
    env: Vec<(String, String)>,
    paper_scale: bool,
}

impl ConfigLoader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => self.file = m,
            Ok(_) => return Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
            Err(e) => return Err(Error::Config(format!("{}: {e}", path.display()))),
        }
        Ok(self)
    }

    /// Use the process environment for `EMBEDKIT_*` overrides.
    pub fn process_env(self) -> Self {
        self.env(std::env::vars())
    }

    pub fn env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Self {
        self.env = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        self.env.sort();
        self
    }

    pub fn set(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.overrides.insert(key.to_string(), value.into());
        self
    }

    /// Add or replace one named input without touching the others.
    pub fn data(mut self, name: &str, path: impl Into<PathBuf>) -> Self {
        self.data.push((name.to_string(), path.into()));
        self
    }

    pub fn paper_scale(mut self, on: bool) -> Self {
        self.paper_scale = on;
        self
    }

    /// Merge all layers, check types, mandatory keys and input paths.
    pub fn resolve(self) -> Result<RunConfig> {
        let mut top = self.file.clone();
        let known = desk_defaults(None);
        for (k, v) in &self.env {
            let key = k[ENV_PREFIX.len()..].to_lowercase();
            if key == "revision" {
                continue;
            }
            if !known.contains_key(&key) && !matches!(key.as_str(), "task" | "seed" | "output_dir") {
                return Err(Error::Config(format!("{k} names no configuration key")));
            }
            top.insert(key, env_value(v));
        }
        top.extend(self.overrides.clone());
        let task: Option<Task> = match top.get("task") {
            Some(t) => Some(
                serde_json::from_value(t.clone()).map_err(|e| Error::Config(format!("task: {e}")))?,
            ),
            None => None,
        };
        let paper = self.paper_scale || top.get("profile").and_then(Value::as_str) == Some("paper");
        let mut merged = desk_defaults(task);
        if paper {
            merged.extend(full_scale_overrides());
        }
        merged.extend(top);
        if !self.data.is_empty() {
            let entry = merged.entry("data").or_insert_with(|| json!({}));
            let Value::Object(map) = entry else {
                return Err(Error::Config("data must be an object of named paths".into()));
            };
            for (k, p) in &self.data {
                map.insert(k.clone(), Value::String(p.to_string_lossy().into_owned()));
            }
        }
        for key in ["task", "seed", "output_dir"] {
            if merged.get(key).is_none_or(Value::is_null) {
                return Err(Error::Config(format!("missing mandatory key {key:?}")));
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Every referenced input must exist before the run starts.
    pub fn check(&self) -> Result<()> {
        let inputs = self.models.iter().chain(&self.vocab).chain(self.data.values());
        for p in inputs {
            if !p.exists() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        if self.batch_size == 0 || self.repeats == 0 || self.folds < 2 {
            return Err(Error::Config("batch_size and repeats must be positive, folds at least 2".into()));
        }
        Ok(())
    }

    pub fn data_path(&self, name: &str) -> Result<&Path> {
        self.data
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Config(format!("task {:?} needs data.{name}", self.task)))
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join(&self.report)
    }

    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            max_len: self.max_len,
            dropout_p: self.dropout,
            ..EncoderConfig::desk(vocab_size)
        }
    }

    /// Training settings; `steps == 0` means `epochs` passes over `n` examples.
    pub fn train(&self, n: usize) -> TrainConfig {
        let mut t = TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            seed: self.seed,
        };
        if t.steps == 0 {
            t.steps = t.steps_for_epochs(n, self.epochs);
        }
        t
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            seed: self.seed,
            pooling: self.fixed_pooling(),
        }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            folds: self.folds,
            steps: self.steps.max(1),
            lr: self.lr as f32,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    /// The configured pooling, with `auto` read as CLS.
    pub fn fixed_pooling(&self) -> crate::Pooling {
        match self.pooling {
            PoolingChoice::Fixed(p) => p,
            PoolingChoice::Auto => crate::Pooling::Cls,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> PathBuf {
        let p = dir.path().join("c.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn file_then_env_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, r#"{"task": "pretrain-mlm", "seed": 3, "output_dir": "out", "lr": 0.5, "hidden": 32}"#);
        let env = [("EMBEDKIT_HIDDEN".to_string(), "48".to_string()), ("PATH".into(), "/bin".into())];
        let cfg = ConfigLoader::new().file(&p).unwrap().env(env).set("seed", 9).resolve().unwrap();
        assert_eq!((cfg.lr, cfg.hidden, cfg.seed), (0.5, 48, 9));
        assert_eq!(cfg.steps, 3000);
        assert_eq!(cfg.pooling, PoolingChoice::Fixed(crate::Pooling::Cls));
    }

    #[test]
    fn data_entries_merge_with_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        std::fs::write(&a, "").unwrap();
        let body = format!(r#"{{"task": "probe", "seed": 1, "output_dir": "o", "data": {{"docs": {:?}}}}}"#, a);
        let p = write(&dir, &body);
        let cfg = ConfigLoader::new().file(&p).unwrap().data("sts", &a).resolve().unwrap();
        assert_eq!(cfg.data.keys().collect::<Vec<_>>(), ["docs", "sts"]);
    }

    #[test]
    fn seed_is_mandatory() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, r#"{"task": "probe", "output_dir": "out"}"#);
        let r = ConfigLoader::new().file(&p).unwrap().resolve();
        assert!(matches!(r, Err(Error::Config(m)) if m.contains("seed")));
    }

    #[test]
    fn missing_inputs_and_unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, r#"{"task": "probe", "seed": 1, "output_dir": "o", "data": {"docs": "/no/such/file"}}"#);
        assert!(matches!(ConfigLoader::new().file(&p).unwrap().resolve(), Err(Error::Config(_))));
        let p = write(&dir, r#"{"task": "probe", "seed": 1, "output_dir": "o", "learning_rate": 1}"#);
        assert!(matches!(ConfigLoader::new().file(&p).unwrap().resolve(), Err(Error::Config(_))));
        let env = [("EMBEDKIT_NOPE".to_string(), "1".to_string())];
        let r = ConfigLoader::new().set("task", "probe").set("seed", 1).set("output_dir", "o").env(env).resolve();
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn full_scale_profile_swaps_defaults() {
        let base = || ConfigLoader::new().set("task", "pretrain-retromae").set("seed", 1).set("output_dir", "o");
        let desk = base().resolve().unwrap();
        let paper = base().paper_scale(true).resolve().unwrap();
        assert_eq!((desk.layers, desk.hidden, desk.batch_size), (4, 64, 32));
        assert_eq!((paper.layers, paper.hidden, paper.batch_size, paper.steps), (12, 256, 512, 250_000));
        assert_eq!(paper.lr, 5e-4);
        assert_eq!(paper.profile, Profile::Paper);
    }

    #[test]
    fn env_strings_fall_back_to_plain_text() {
        let env = [("EMBEDKIT_POOLING".to_string(), "auto".to_string())];
        let cfg = ConfigLoader::new().set("task", "zero-shot-eval").set("seed", 1).set("output_dir", "o").env(env).resolve().unwrap();
        assert_eq!(cfg.pooling, PoolingChoice::Auto);
    }

    #[test]
    fn epochs_fill_in_for_zero_steps() {
        let cfg = ConfigLoader::new().set("task", "distill").set("seed", 1).set("output_dir", "o").resolve().unwrap();
        assert_eq!(cfg.train(100).steps, 3 * 4);
    }
}
