//! Full-model fine-tuning: classification with a head, ranking as a bi-encoder.

use serde::{Deserialize, Serialize};

use super::probe::{head_logits, head_loss, init_head, validate_labels, HeadKind};
use super::zero_shot::{ranking_precision, RANKING_K};
use crate::data::{LabeledDoc, QueryDocPair};
use crate::encoder::{pool, Batch, Checkpoint, EncoderModel, Pooling};
use crate::error::{Error, Result};
use crate::metrics::{self, FoldSummary, DEFAULT_RELEVANCE_THRESHOLD};
use crate::params::ParamSet;
use crate::rng::{derive, label};
use crate::tape::{Tape, Var};
use crate::tokenizer::{TokenSeq, Vocab};
use crate::train::{encode_all, BatchSampler, TrainConfig, TrainLog, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f32,
    pub seed: u64,
    pub pooling: Pooling,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { epochs: 3, batch_size: 32, lr: 1e-4, warmup_frac: 0.1, weight_decay: 0.01, seed: 0, pooling: Pooling::Cls }
    }
}

impl FinetuneConfig {
    fn train_config(&self, n: usize) -> TrainConfig {
        let mut tc = TrainConfig {
            steps: 1,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            weight_decay: self.weight_decay,
            clip_norm: None,
            seed: self.seed,
        };
        tc.steps = tc.steps_for_epochs(n, self.epochs);
        tc
    }
}

fn pick(seqs: &[TokenSeq], idx: &[usize]) -> Result<Batch> {
    let chosen: Vec<TokenSeq> = idx.iter().map(|&i| seqs[i].clone()).collect();
    Batch::collate(&chosen)
}

fn step_seed(seed: u64, what: &str, step: usize) -> u64 {
    derive(seed, &[label(what), step as u64])
}

/// Encoder plus linear head trained jointly on labeled documents.
pub fn train_classifier(
    model: &mut EncoderModel,
    vocab: &Vocab,
    docs: &[&LabeledDoc],
    num_classes: usize,
    kind: HeadKind,
    cfg: &FinetuneConfig,
) -> Result<(ParamSet, TrainLog)> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let seqs = encode_all(vocab, &texts, model.config.max_len)?;
    let tc = cfg.train_config(docs.len());
    let mut head = init_head(model.hidden(), num_classes, derive(cfg.seed, &[label("finetune-head")]));
    let mut sampler = BatchSampler::new(seqs.len(), tc.batch_size, tc.seed)?;
    let mut trainer = Trainer::new(&tc, &[&model.params, &head])?;
    let mut log = TrainLog::default();
    for step in 0..tc.steps {
        let idx = sampler.next_batch();
        let batch = pick(&seqs, &idx)?;
        let labels: Vec<&Vec<usize>> = idx.iter().map(|&i| &docs[i].labels).collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let hv = head.bind(&mut tape, true);
        let out = model.forward(&mut tape, &vars, &batch, true, step_seed(tc.seed, "dropout", step))?;
        let z = pool(&mut tape, &out, cfg.pooling)?;
        let logits = head_logits(&mut tape, z, &hv)?;
        let loss = head_loss(&mut tape, logits, &labels, num_classes, kind)?;
        log.losses.push(trainer.update(&mut tape, loss, &mut [&mut model.params, &mut head], &[&vars.all, &hv])?);
    }
    Ok((head, log))
}

fn classify(model: &EncoderModel, vocab: &Vocab, head: &ParamSet, docs: &[&LabeledDoc], kind: HeadKind, pooling: Pooling) -> Result<Vec<Vec<usize>>> {
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let x = model.embed_sentences(vocab, pooling, &texts, false)?;
    super::probe::predict(head, &x, kind)
}

/// K-fold fine-tuning from the same starting checkpoint; F1 ×100 per fold.
pub fn run_finetune_classification(
    ck: &Checkpoint,
    docs: &[LabeledDoc],
    num_classes: usize,
    kind: HeadKind,
    folds: usize,
    cfg: &FinetuneConfig,
) -> Result<FoldSummary> {
    let labels: Vec<Vec<usize>> = docs.iter().map(|d| d.labels.clone()).collect();
    validate_labels(&labels, num_classes, kind)?;
    let vocab = ck.vocab()?;
    metrics::kfold_eval(
        docs,
        folds,
        cfg.seed,
        |train| {
            let mut model = ck.model.clone();
            let (head, log) = train_classifier(&mut model, vocab, train, num_classes, kind, cfg)?;
            if log.losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::Numeric("fine-tuning loss is not finite".into()));
            }
            Ok((model, head))
        },
        |(model, head), test| {
            let pred = classify(model, vocab, head, test, kind, cfg.pooling)?;
            let gold: Vec<Vec<usize>> = test.iter().map(|d| d.labels.clone()).collect();
            metrics::f1_score(&pred, &gold, num_classes, kind.f1_mode())
        },
    )
}

/// Ranking fine-tune objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RankingLoss {
    /// Relevant pairs are positives; every document in the batch is a candidate.
    InfoNce { temperature: f32 },
    /// Squared error between cosine similarity and the graded label.
    CosineMse,
}

impl Default for RankingLoss {
    fn default() -> Self {
        RankingLoss::InfoNce { temperature: crate::objectives::DEFAULT_TEMPERATURE }
    }
}

/// `[n × 1]` row-wise cosine similarities of two `[n × d]` matrices.
fn row_cosines(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let a = tape.l2_normalize(a)?;
    let b = tape.l2_normalize(b)?;
    let prod = tape.mul(a, b)?;
    let d = tape.shape(prod)[1];
    let ones = tape.constant(crate::tensor::Tensor::full([d, 1], 1.0));
    tape.matmul(prod, ones)
}

#[allow(clippy::too_many_arguments)]
fn ranking_batch_loss(
    tape: &mut Tape,
    model: &EncoderModel,
    vars: &crate::encoder::EncoderVars,
    queries: &Batch,
    docs: &Batch,
    pairs: &[&QueryDocPair],
    loss: RankingLoss,
    pooling: Pooling,
    seeds: (u64, u64),
) -> Result<Option<Var>> {
    let qo = model.forward(tape, vars, queries, true, seeds.0)?;
    let q = pool(tape, &qo, pooling)?;
    let d_out = model.forward(tape, vars, docs, true, seeds.1)?;
    let d = pool(tape, &d_out, pooling)?;
    match loss {
        RankingLoss::InfoNce { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
            }
            let pos: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label > DEFAULT_RELEVANCE_THRESHOLD).collect();
            if pos.is_empty() {
                return Ok(None);
            }
            let qp = tape.gather_rows(q, &pos)?;
            let qn = tape.l2_normalize(qp)?;
            let dn = tape.l2_normalize(d)?;
            let sims = tape.matmul_bt(qn, dn)?;
            let logits = tape.scale(sims, 1.0 / temperature)?;
            Ok(Some(tape.cross_entropy(logits, &pos)?))
        }
        RankingLoss::CosineMse => {
            let cos = row_cosines(tape, q, d)?;
            let target: Vec<f32> = pairs.iter().map(|p| p.label as f32).collect();
            let t = tape.constant(crate::tensor::Tensor::new([pairs.len(), 1], target)?);
            let diff = tape.sub(cos, t)?;
            let sq = tape.mul(diff, diff)?;
            Ok(Some(tape.mean(sq)?))
        }
    }
}

/// Train a bi-encoder on query–document pairs. Batches without a relevant
/// pair cannot form the contrastive loss; they are skipped and counted.
pub fn train_ranker(
    model: &mut EncoderModel,
    vocab: &Vocab,
    pairs: &[QueryDocPair],
    loss: RankingLoss,
    cfg: &FinetuneConfig,
) -> Result<TrainLog> {
    let qs: Vec<&str> = pairs.iter().map(|p| p.query.as_str()).collect();
    let ds: Vec<&str> = pairs.iter().map(|p| p.doc.as_str()).collect();
    let qseqs = encode_all(vocab, &qs, model.config.max_len)?;
    let dseqs = encode_all(vocab, &ds, model.config.max_len)?;
    let tc = cfg.train_config(pairs.len());
    let mut sampler = BatchSampler::new(pairs.len(), tc.batch_size, tc.seed)?;
    let mut trainer = Trainer::new(&tc, &[&model.params])?;
    let mut log = TrainLog::default();
    for step in 0..tc.steps {
        let idx = sampler.next_batch();
        let chosen: Vec<&QueryDocPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let seeds = (step_seed(tc.seed, "query", step), step_seed(tc.seed, "doc", step));
        let (qb, db) = (pick(&qseqs, &idx)?, pick(&dseqs, &idx)?);
        match ranking_batch_loss(&mut tape, model, &vars, &qb, &db, &chosen, loss, cfg.pooling, seeds)? {
            None => log.skipped += 1,
            Some(l) => log.losses.push(trainer.update(&mut tape, l, &mut [&mut model.params], &[&vars.all])?),
        }
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct RankingOutcome {
    /// P@10 ×100 on the test split after fine-tuning.
    pub precision: f64,
    pub log: TrainLog,
    pub model: Option<Checkpoint>,
}

/// Fine-tune on `train`, score P@10 on `test` with the configured pooling.
pub fn run_finetune_ranking(
    ck: &Checkpoint,
    train: &[QueryDocPair],
    test: &[QueryDocPair],
    loss: RankingLoss,
    cfg: &FinetuneConfig,
    keep_model: bool,
) -> Result<RankingOutcome> {
    if ck.head.is_some() {
        return Err(Error::Contract("ranking fine-tuning takes a bi-encoder without a head".into()));
    }
    let vocab = ck.vocab()?;
    let mut model = ck.model.clone();
    let log = train_ranker(&mut model, vocab, train, loss, cfg)?;
    let tuned = Checkpoint::new(model, Some(vocab.clone()));
    let precision = ranking_precision(&tuned, test, cfg.pooling, RANKING_K)?;
    Ok(RankingOutcome { precision, log, model: keep_model.then_some(tuned) })
}
