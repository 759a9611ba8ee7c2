//! Evaluation metrics. Scores are reported in percentage points.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{label, SeedKey};
use crate::tensor::cosine;

/// One reported number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub stddev: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64, n: usize) -> Self {
        MetricReport {
            name: name.into(),
            value,
            stddev: None,
            n,
        }
    }

    pub fn with_stddev(mut self, sd: f64) -> Self {
        self.stddev = Some(sd);
        self
    }
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "correlation of {} and {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 pairs, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("an input is constant".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation in `[-1, 1]`.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "correlation of {} and {} values",
            x.len(),
            y.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

pub const COSTRA_CATEGORIES: [&str; 4] = ["time", "style", "generalization", "opposite"];
/// Categories present in the dataset but excluded from the score.
pub const COSTRA_UNSCORED: [&str; 2] = ["basic", "modality"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostraScore {
    /// Accuracy per scored category that has at least one triplet.
    pub per_category: BTreeMap<String, f64>,
    /// Unweighted mean of `per_category`.
    pub average: f64,
    pub n: usize,
}

/// One triplet's embeddings: anchor, closer, farther.
pub type TripletEmbeddings<'a> = (&'a [f32], &'a [f32], &'a [f32]);

/// A triplet is correct iff `cos(anchor, closer) > cos(anchor, farther)`.
pub fn costra_score(
    categories: &[impl AsRef<str>],
    triplets: &[TripletEmbeddings],
) -> Result<CostraScore> {
    if categories.len() != triplets.len() {
        return Err(Error::Dimension(format!(
            "{} categories for {} triplets",
            categories.len(),
            triplets.len()
        )));
    }
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut n = 0;
    for (cat, &(a, c, f)) in categories.iter().zip(triplets) {
        let cat = cat.as_ref();
        if COSTRA_UNSCORED.contains(&cat) {
            continue;
        }
        if !COSTRA_CATEGORIES.contains(&cat) {
            return Err(Error::Data(format!("unknown costra category {cat:?}")));
        }
        let e = tally.entry(cat).or_default();
        e.1 += 1;
        if cosine(a, c) > cosine(a, f) {
            e.0 += 1;
        }
        n += 1;
    }
    if tally.is_empty() {
        return Err(Error::Data("no scored costra triplets".into()));
    }
    let per_category: BTreeMap<String, f64> = tally
        .iter()
        .map(|(k, &(ok, all))| (k.to_string(), 100.0 * ok as f64 / all as f64))
        .collect();
    let average = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(CostraScore {
        per_category,
        average,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Mode {
    Micro,
    Macro,
}

/// F1 over label sets drawn from `0..num_classes`, ×100. In macro mode a
/// class with no true positives, false positives or false negatives scores 0.
pub fn f1_score(
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
    num_classes: usize,
    mode: F1Mode,
) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} gold records",
            pred.len(),
            gold.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (p, g) in pred.iter().zip(gold) {
        let mut ps = vec![false; num_classes];
        let mut gs = vec![false; num_classes];
        for (labels, set) in [(p, &mut ps), (g, &mut gs)] {
            for &l in labels {
                if l >= num_classes {
                    return Err(Error::Data(format!(
                        "label {l} outside {num_classes} classes"
                    )));
                }
                set[l] = true;
            }
        }
        for c in 0..num_classes {
            match (ps[c], gs[c]) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            0.0
        } else {
            100.0 * (2 * tp) as f64 / d as f64
        }
    };
    Ok(match mode {
        F1Mode::Micro => f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum()),
        F1Mode::Macro => {
            if num_classes == 0 {
                return Err(Error::Parameter("macro F1 needs at least one class".into()));
            }
            (0..num_classes)
                .map(|c| f1(tp[c], fp[c], fn_[c]))
                .sum::<f64>()
                / num_classes as f64
        }
    })
}

pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.5;

/// Relevance flags ordered by descending score; ties keep input order.
pub fn rank_by_score(scores: &[f64], labels: &[f64], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.into_iter().map(|i| labels[i] > threshold).collect()
}

/// Mean over queries of `|relevant ∩ top-k| / min(k, candidates)`, ×100.
pub fn precision_at_k(ranked: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    if ranked.is_empty() {
        return Err(Error::Data("no queries to score".into()));
    }
    let mut total = 0.0;
    for (q, list) in ranked.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::Data(format!("query {q} has no candidate documents")));
        }
        let denom = k.min(list.len());
        let hits = list[..denom].iter().filter(|&&r| r).count();
        total += hits as f64 / denom as f64;
    }
    Ok(100.0 * total / ranked.len() as f64)
}

/// Test-fold indices of a seeded shuffle; the first `n mod k` folds hold one extra record.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Parameter(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if k > n {
        return Err(Error::Parameter(format!("k = {k} exceeds {n} records")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedKey::new(seed).split(label("kfold")).rng());
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub stddev: f64,
    pub scores: Vec<f64>,
}

impl FoldSummary {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        FoldSummary {
            mean,
            stddev: var.sqrt(),
            scores,
        }
    }
}

/// Train on `k − 1` folds and score on the held-out one, for every fold.
pub fn kfold_eval<T, M>(
    records: &[T],
    k: usize,
    seed: u64,
    mut train: impl FnMut(&[&T]) -> Result<M>,
    mut score: impl FnMut(&M, &[&T]) -> Result<f64>,
) -> Result<FoldSummary> {
    let folds = kfold_indices(records.len(), k, seed)?;
    let mut fold_of = vec![0; records.len()];
    for (f, idx) in folds.iter().enumerate() {
        for &i in idx {
            fold_of[i] = f;
        }
    }
    let mut scores = Vec::with_capacity(k);
    for (f, test_idx) in folds.iter().enumerate() {
        let train_set: Vec<&T> = (0..records.len())
            .filter(|&i| fold_of[i] != f)
            .map(|i| &records[i])
            .collect();
        let test_set: Vec<&T> = test_idx.iter().map(|&i| &records[i]).collect();
        let model = train(&train_set)?;
        scores.push(score(&model, &test_set)?);
    }
    Ok(FoldSummary::from_scores(scores))
}
