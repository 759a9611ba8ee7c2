//! Linear probing: a classifier head trained on frozen sentence embeddings.

use serde::{Deserialize, Serialize};

use super::Embedder;
use crate::data::LabeledDoc;
use crate::encoder::{Checkpoint, Pooling};
use crate::error::{Error, Result};
use crate::metrics::{self, F1Mode, FoldSummary};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamSet;
use crate::rng::{label, SeedKey};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Independent sigmoid per label, threshold 0.5; scored by micro-F1.
    MultilabelSigmoid,
    /// One label per document, argmax; scored by macro-F1.
    MulticlassSoftmax,
}

impl HeadKind {
    pub fn f1_mode(self) -> F1Mode {
        match self {
            HeadKind::MultilabelSigmoid => F1Mode::Micro,
            HeadKind::MulticlassSoftmax => F1Mode::Macro,
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            HeadKind::MultilabelSigmoid => "micro-F1",
            HeadKind::MulticlassSoftmax => "macro-F1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub folds: usize,
    /// Full-batch optimizer steps per fold.
    pub steps: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { folds: 5, steps: 300, lr: 1e-2, weight_decay: 0.01, seed: 0 }
    }
}

/// Check label ids against the class universe and the head kind.
pub fn validate_labels(labels: &[Vec<usize>], num_classes: usize, kind: HeadKind) -> Result<()> {
    for (i, ls) in labels.iter().enumerate() {
        if let Some(&bad) = ls.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("document {i}: label {bad} outside 0..{num_classes}")));
        }
        if kind == HeadKind::MulticlassSoftmax && ls.len() != 1 {
            return Err(Error::Data(format!("document {i}: multiclass needs exactly one label, got {}", ls.len())));
        }
    }
    Ok(())
}

/// Head logits `x · w + b` on the tape.
pub(crate) fn head_logits(tape: &mut Tape, x: Var, head: &[Var]) -> Result<Var> {
    let y = tape.matmul(x, head[0])?;
    tape.add_row(y, head[1])
}

/// Classification loss for a batch of logits.
pub(crate) fn head_loss(tape: &mut Tape, logits: Var, labels: &[&Vec<usize>], num_classes: usize, kind: HeadKind) -> Result<Var> {
    match kind {
        HeadKind::MulticlassSoftmax => {
            let t: Vec<usize> = labels.iter().map(|l| l[0]).collect();
            tape.cross_entropy(logits, &t)
        }
        HeadKind::MultilabelSigmoid => {
            let mut t = vec![0.0; labels.len() * num_classes];
            for (i, ls) in labels.iter().enumerate() {
                for &l in ls.iter() {
                    t[i * num_classes + l] = 1.0;
                }
            }
            tape.bce_with_logits(logits, &t)
        }
    }
}

/// Decode logits to label sets; multilabel rows may be empty.
pub fn decode(logits: &Tensor, kind: HeadKind) -> Vec<Vec<usize>> {
    let (_, c) = logits.as_matrix();
    logits
        .data()
        .chunks(c)
        .map(|row| match kind {
            HeadKind::MultilabelSigmoid => (0..c).filter(|&j| row[j] > 0.0).collect(),
            HeadKind::MulticlassSoftmax => {
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                vec![best]
            }
        })
        .collect()
}

pub(crate) fn init_head(dim: usize, num_classes: usize, seed: u64) -> ParamSet {
    let mut set = ParamSet::new();
    let w = crate::objectives::ProjectionHead::init(dim, num_classes, seed).weight;
    set.push("probe.weight", w);
    set.push("probe.bias", Tensor::zeros([num_classes]));
    set
}

fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let (_, d) = x.as_matrix();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new([idx.len(), d], data).expect("rows share a width")
}

/// Train a linear head on fixed features with full-batch AdamW.
pub fn train_head(x: &Tensor, labels: &[&Vec<usize>], num_classes: usize, kind: HeadKind, cfg: &ProbeConfig) -> Result<ParamSet> {
    let (n, d) = x.as_matrix();
    if n == 0 {
        return Err(Error::Data("no training documents".into()));
    }
    let mut head = init_head(d, num_classes, SeedKey::new(cfg.seed).split(label("probe-head")).value());
    let oc = AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() };
    let mut opt = AdamW::for_params(oc, head.tensors());
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = head.bind(&mut tape, true);
        let logits = head_logits(&mut tape, xv, &hv)?;
        let loss = head_loss(&mut tape, logits, labels, num_classes, kind)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Numeric("probe loss is not finite".into()));
        }
        tape.backward(loss)?;
        let grads = head.collect_grads(&tape, &hv);
        opt.step(head.tensors_mut(), &grads, cfg.lr)?;
    }
    Ok(head)
}

pub fn predict(head: &ParamSet, x: &Tensor, kind: HeadKind) -> Result<Vec<Vec<usize>>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let hv = head.bind(&mut tape, false);
    let logits = head_logits(&mut tape, xv, &hv)?;
    Ok(decode(tape.value(logits), kind))
}

/// K-fold linear probe over precomputed embeddings; F1 ×100 per fold.
pub fn probe_embeddings(
    x: &Tensor,
    labels: &[Vec<usize>],
    num_classes: usize,
    kind: HeadKind,
    cfg: &ProbeConfig,
) -> Result<FoldSummary> {
    validate_labels(labels, num_classes, kind)?;
    let (n, _) = x.as_matrix();
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} embeddings for {} label sets", labels.len())));
    }
    let ids: Vec<usize> = (0..n).collect();
    metrics::kfold_eval(
        &ids,
        cfg.folds,
        cfg.seed,
        |train| {
            let idx: Vec<usize> = train.iter().map(|&&i| i).collect();
            let ls: Vec<&Vec<usize>> = idx.iter().map(|&i| &labels[i]).collect();
            train_head(&gather(x, &idx), &ls, num_classes, kind, cfg)
        },
        |head, test| {
            let idx: Vec<usize> = test.iter().map(|&&i| i).collect();
            let pred = predict(head, &gather(x, &idx), kind)?;
            let gold: Vec<Vec<usize>> = idx.iter().map(|&i| labels[i].clone()).collect();
            metrics::f1_score(&pred, &gold, num_classes, kind.f1_mode())
        },
    )
}

/// Number of classes implied by the largest label id.
pub fn class_count(docs: &[LabeledDoc]) -> usize {
    docs.iter().flat_map(|d| d.labels.iter()).max().map_or(0, |&m| m + 1)
}

/// Probe CLS embeddings of a frozen embedder.
pub fn run_probe<E: Embedder + ?Sized>(
    embedder: &E,
    docs: &[LabeledDoc],
    num_classes: usize,
    kind: HeadKind,
    cfg: &ProbeConfig,
) -> Result<FoldSummary> {
    let labels: Vec<Vec<usize>> = docs.iter().map(|d| d.labels.clone()).collect();
    validate_labels(&labels, num_classes, kind)?;
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let x = embedder.embed(&texts, Pooling::Cls)?;
    probe_embeddings(&x, &labels, num_classes, kind, cfg)
}

/// [`run_probe`] on a checkpoint, asserting its parameters are unchanged afterwards.
pub fn run_probe_frozen(
    ck: &Checkpoint,
    docs: &[LabeledDoc],
    num_classes: usize,
    kind: HeadKind,
    cfg: &ProbeConfig,
) -> Result<FoldSummary> {
    let before = ck.model.params.fingerprint();
    let out = run_probe(ck, docs, num_classes, kind, cfg)?;
    if ck.model.params.fingerprint() != before {
        return Err(Error::Contract("encoder parameters changed during probing".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Class `c` sits around `4·e_c` with unit Gaussian noise.
    fn separable(n: usize, classes: usize, dim: usize, seed: u64) -> (Tensor, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % classes;
            let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            v[c] += 8.0;
            rows.push(v);
            labels.push(vec![c]);
        }
        (Tensor::from_rows(&rows), labels)
    }

    #[test]
    fn separable_classes_are_probed_perfectly() {
        let (x, labels) = separable(300, 3, 8, 1);
        let s = probe_embeddings(&x, &labels, 3, HeadKind::MulticlassSoftmax, &ProbeConfig::default()).unwrap();
        assert!(s.mean >= 99.0, "{s:?}");
        assert_eq!(s.scores.len(), 5);
    }

    #[test]
    fn separable_multilabel_is_probed_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..300 {
            let mut ls: Vec<usize> = (0..4).filter(|_| rng.gen_bool(0.4)).collect();
            if ls.is_empty() {
                ls.push(rng.gen_range(0..4));
            }
            let mut v: Vec<f32> = (0..6).map(|_| 0.3 * rng.sample::<f32, _>(StandardNormal)).collect();
            for &l in &ls {
                v[l] += 3.0;
            }
            rows.push(v);
            labels.push(ls);
        }
        let x = Tensor::from_rows(&rows);
        let s = probe_embeddings(&x, &labels, 4, HeadKind::MultilabelSigmoid, &ProbeConfig::default()).unwrap();
        assert!(s.mean >= 99.0, "{s:?}");
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        let (x, _) = separable(600, 3, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<Vec<usize>> = (0..600).map(|_| vec![rng.gen_range(0..3)]).collect();
        let s = probe_embeddings(&x, &labels, 3, HeadKind::MulticlassSoftmax, &ProbeConfig::default()).unwrap();
        assert!((s.mean - 100.0 / 3.0).abs() < 5.0, "{s:?}");
    }

    #[test]
    fn labels_outside_the_universe_are_data_errors() {
        let x = Tensor::zeros([4, 2]);
        let labels = vec![vec![0], vec![1], vec![2], vec![0]];
        let r = probe_embeddings(&x, &labels, 2, HeadKind::MulticlassSoftmax, &ProbeConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
        let multi = vec![vec![0, 1]; 4];
        let r = probe_embeddings(&x, &multi, 2, HeadKind::MulticlassSoftmax, &ProbeConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn decode_thresholds_and_argmax() {
        let l = Tensor::from_rows(&[vec![0.5, -0.1, 2.0], vec![-1.0, -2.0, -0.5]]);
        assert_eq!(decode(&l, HeadKind::MultilabelSigmoid), vec![vec![0, 2], vec![]]);
        assert_eq!(decode(&l, HeadKind::MulticlassSoftmax), vec![vec![2], vec![2]]);
    }
}
