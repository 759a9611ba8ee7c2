//! Training loops for the pretraining, contrastive and distillation recipes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::ParallelPair;
use crate::encoder::{Batch, EncoderModel, Pooling};
use crate::error::{Error, Result};
use crate::objectives::{self, MaskingPlan, ShallowDecoder};
use crate::optim::{AdamW, AdamWConfig, Schedule};
use crate::params::ParamSet;
use crate::rng::{derive, label, SeedKey};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSeq, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 32,
            lr: 5e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac must lie in [0, 1], got {}",
                self.warmup_frac
            )));
        }
        Ok(())
    }

    /// Steps needed for `epochs` passes over `n` examples.
    pub fn steps_for_epochs(&self, n: usize, epochs: usize) -> usize {
        (epochs * n.div_ceil(self.batch_size)).max(1)
    }
}

/// Per-step losses of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f32>,
    /// Batches dropped because they could not form a loss.
    pub skipped: usize,
}

impl TrainLog {
    /// Means over consecutive windows of `w` steps.
    pub fn smoothed(&self, w: usize) -> Vec<f32> {
        self.losses
            .chunks(w.max(1))
            .map(|c| c.iter().sum::<f32>() / c.len() as f32)
            .collect()
    }
}

/// AdamW plus schedule over an ordered list of parameter sets.
pub struct Trainer {
    opt: AdamW,
    schedule: Schedule,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, sets: &[&ParamSet]) -> Result<Self> {
        cfg.validate()?;
        let oc = AdamWConfig {
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            ..Default::default()
        };
        let opt = AdamW::for_params(oc, sets.iter().flat_map(|s| s.tensors()));
        Ok(Trainer {
            opt,
            schedule: Schedule::new(cfg.lr, cfg.steps, cfg.warmup_frac),
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Backpropagate `loss` and apply one update to `sets` (bound as `vars`).
    pub fn update(
        &mut self,
        tape: &mut Tape,
        loss: Var,
        sets: &mut [&mut ParamSet],
        vars: &[&[Var]],
    ) -> Result<f32> {
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {value} at step {}",
                self.step
            )));
        }
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = sets
            .iter()
            .zip(vars)
            .flat_map(|(s, v)| s.collect_grads(tape, v))
            .collect();
        let lr = self.schedule.lr_at(self.step) as f32;
        self.opt
            .step(sets.iter_mut().flat_map(|s| s.tensors_mut()), &grads, lr)?;
        self.step += 1;
        Ok(value)
    }
}

/// Seeded minibatch indices; reshuffles at every epoch boundary.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    batch: usize,
    key: SeedKey,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("no training examples".into()));
        }
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            epoch: 0,
            batch: batch.min(n),
            key: SeedKey::new(seed).split(label("sampler")),
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.key.split(self.epoch).rng());
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

pub fn encode_all<S: AsRef<str>>(
    vocab: &Vocab,
    texts: &[S],
    max_len: usize,
) -> Result<Vec<TokenSeq>> {
    texts
        .iter()
        .map(|t| vocab.encode(t.as_ref(), max_len))
        .collect()
}

fn pick(seqs: &[TokenSeq], idx: &[usize]) -> Result<Batch> {
    let chosen: Vec<TokenSeq> = idx.iter().map(|&i| seqs[i].clone()).collect();
    Batch::collate(&chosen)
}

fn step_seed(seed: u64, what: &str, step: usize) -> u64 {
    derive(seed, &[label(what), step as u64])
}

pub fn pretrain_mlm<S: AsRef<str>>(
    model: &mut EncoderModel,
    vocab: &Vocab,
    corpus: &[S],
    cfg: &TrainConfig,
    ratio: f32,
) -> Result<TrainLog> {
    let seqs = encode_all(vocab, corpus, model.config.max_len)?;
    let mut sampler = BatchSampler::new(seqs.len(), cfg.batch_size, cfg.seed)?;
    let mut trainer = Trainer::new(cfg, &[&model.params])?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = pick(&seqs, &sampler.next_batch())?;
        let plan = MaskingPlan::draw(
            &batch,
            ratio,
            model.config.vocab_size,
            SeedKey::new(step_seed(cfg.seed, "mask", step)),
        )?;
        if plan.count() == 0 {
            log.skipped += 1;
            continue;
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let loss = objectives::mlm_loss(
            &mut tape,
            model,
            &vars,
            &batch,
            &plan,
            true,
            step_seed(cfg.seed, "dropout", step),
        )?;
        let l = trainer.update(&mut tape, loss, &mut [&mut model.params], &[&vars.all])?;
        log.losses.push(l);
    }
    Ok(log)
}

pub fn pretrain_retromae<S: AsRef<str>>(
    model: &mut EncoderModel,
    decoder: &mut ShallowDecoder,
    vocab: &Vocab,
    corpus: &[S],
    cfg: &TrainConfig,
    enc_ratio: f32,
    dec_ratio: f32,
) -> Result<TrainLog> {
    let seqs = encode_all(vocab, corpus, model.config.max_len)?;
    let mut sampler = BatchSampler::new(seqs.len(), cfg.batch_size, cfg.seed)?;
    let mut trainer = Trainer::new(cfg, &[&model.params, &decoder.params])?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = pick(&seqs, &sampler.next_batch())?;
        let key = SeedKey::new(step_seed(cfg.seed, "mask", step));
        let (enc, dec) =
            objectives::retromae_plans(&batch, enc_ratio, dec_ratio, model.config.vocab_size, key)?;
        if enc.count() == 0 {
            log.skipped += 1;
            continue;
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let dvars = decoder.bind(&mut tape, true);
        let seed = step_seed(cfg.seed, "dropout", step);
        let loss = objectives::retromae_loss(
            &mut tape, model, &vars, &dvars, &batch, &enc, &dec, true, seed, true,
        )?;
        let l = trainer.update(
            &mut tape,
            loss.total,
            &mut [&mut model.params, &mut decoder.params],
            &[&vars.all, &dvars],
        )?;
        log.losses.push(l);
    }
    Ok(log)
}

pub fn train_simcse<S: AsRef<str>>(
    model: &mut EncoderModel,
    vocab: &Vocab,
    sentences: &[S],
    cfg: &TrainConfig,
    temperature: f32,
    pooling: Pooling,
) -> Result<TrainLog> {
    let seqs = encode_all(vocab, sentences, model.config.max_len)?;
    if seqs.len() < 2 {
        return Err(Error::Parameter(
            "contrastive training needs at least 2 sentences".into(),
        ));
    }
    let mut sampler = BatchSampler::new(seqs.len(), cfg.batch_size.max(2), cfg.seed)?;
    let mut trainer = Trainer::new(cfg, &[&model.params])?;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = pick(&seqs, &sampler.next_batch())?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let seeds = (
            step_seed(cfg.seed, "view-a", step),
            step_seed(cfg.seed, "view-b", step),
        );
        let loss =
            objectives::simcse_loss(&mut tape, model, &vars, &batch, pooling, temperature, seeds)?;
        let l = trainer.update(&mut tape, loss, &mut [&mut model.params], &[&vars.all])?;
        log.losses.push(l);
    }
    Ok(log)
}

pub const HEAD_NAME: &str = "head.weight";

/// Train student and projection so both sides of each pair land on the
/// pair's teacher row. `teacher` rows align with `pairs`.
#[allow(clippy::too_many_arguments)]
pub fn train_distill(
    model: &mut EncoderModel,
    head: &mut Tensor,
    vocab: &Vocab,
    pairs: &[ParallelPair],
    teacher: &Tensor,
    cfg: &TrainConfig,
    pooling: Pooling,
) -> Result<TrainLog> {
    let (rows, _) = teacher.as_matrix();
    if rows != pairs.len() {
        return Err(Error::Contract(format!(
            "{} teacher rows for {} pairs",
            rows,
            pairs.len()
        )));
    }
    let src: Vec<&str> = pairs.iter().map(|p| p.src.as_str()).collect();
    let tgt: Vec<&str> = pairs.iter().map(|p| p.tgt.as_str()).collect();
    let src = encode_all(vocab, &src, model.config.max_len)?;
    let tgt = encode_all(vocab, &tgt, model.config.max_len)?;
    let mut head_set = ParamSet::new();
    head_set.push(HEAD_NAME, head.clone());
    let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size, cfg.seed)?;
    let mut trainer = Trainer::new(cfg, &[&model.params, &head_set])?;
    let mut log = TrainLog::default();
    let dim = teacher.shape()[1];
    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let (sb, tb) = (pick(&src, &idx)?, pick(&tgt, &idx)?);
        let mut t_rows = Vec::with_capacity(idx.len() * dim);
        for &i in &idx {
            t_rows.extend_from_slice(teacher.row(i));
        }
        let t = Tensor::new([idx.len(), dim], t_rows)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let hvars = head_set.bind(&mut tape, true);
        let seed = step_seed(cfg.seed, "dropout", step);
        let loss = objectives::distill_loss(
            &mut tape, model, &vars, hvars[0], &sb, &tb, &t, pooling, true, seed,
        )?;
        let l = trainer.update(
            &mut tape,
            loss,
            &mut [&mut model.params, &mut head_set],
            &[&vars.all, &hvars],
        )?;
        log.losses.push(l);
    }
    *head = head_set.into_entries().remove(0).1;
    Ok(log)
}
