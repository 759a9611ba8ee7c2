//! Training objectives: masked LM, asymmetric-mask autoencoding with a
//! shallow decoder, in-batch contrastive loss, embedding distillation and
//! listwise similarity distillation.

use rand::Rng;

use crate::encoder::{
    block_forward, block_layout, init_param, pool, Batch, BlockCtx, BlockVars, Checkpoint,
    EncoderConfig, EncoderModel, EncoderVars, Pooling, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{label, SeedKey};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{CLS, MASK, PAD, SEP, SPECIAL_TOKENS};

pub const DEFAULT_ENCODER_RATIO: f32 = 0.30;
pub const DEFAULT_DECODER_RATIO: f32 = 0.50;
pub const DEFAULT_TEMPERATURE: f32 = 0.05;

fn maskable(id: u32) -> bool {
    !matches!(id, PAD | CLS | SEP | MASK)
}

/// Positions selected for prediction and the corrupted inputs fed to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingPlan {
    pub ratio: f32,
    /// Masked positions per sequence, ascending, relative to the row start.
    pub positions: Vec<Vec<usize>>,
    /// `batch × seq` input ids after replacement.
    pub inputs: Vec<u32>,
    /// Original ids at the masked positions, in batch order.
    pub targets: Vec<u32>,
    seq: usize,
}

impl MaskingPlan {
    /// Select `max(1, round(ratio·n))` of the `n` maskable tokens in every
    /// sequence; each is replaced by [MASK] (80%), a random token (10%) or
    /// kept (10%).
    pub fn draw(batch: &Batch, ratio: f32, vocab_size: usize, key: SeedKey) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Parameter(format!(
                "mask ratio must lie in (0, 1), got {ratio}"
            )));
        }
        let mut rng = key.rng();
        let lo = SPECIAL_TOKENS.len() as u32;
        let mut inputs = batch.ids.clone();
        let mut positions = Vec::with_capacity(batch.batch);
        let mut targets = Vec::new();
        for b in 0..batch.batch {
            let base = b * batch.seq;
            let candidates: Vec<usize> = (0..batch.seq)
                .filter(|&t| batch.mask[base + t] && maskable(batch.ids[base + t]))
                .collect();
            let n = candidates.len();
            let k = if n == 0 {
                0
            } else {
                ((ratio * n as f32).round() as usize).clamp(1, n)
            };
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, n, k)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable();
            for &t in &picked {
                let orig = batch.ids[base + t];
                targets.push(orig);
                let u: f32 = rng.gen();
                inputs[base + t] = if u < 0.8 || vocab_size as u32 <= lo {
                    MASK
                } else if u < 0.9 {
                    rng.gen_range(lo..vocab_size as u32)
                } else {
                    orig
                };
            }
            positions.push(picked);
        }
        Ok(MaskingPlan {
            ratio,
            positions,
            inputs,
            targets,
            seq: batch.seq,
        })
    }

    /// Plan over explicit positions, every one replaced by [MASK].
    pub fn fixed(batch: &Batch, ratio: f32, positions: Vec<Vec<usize>>) -> Result<Self> {
        if positions.len() != batch.batch {
            return Err(Error::Dimension(format!(
                "{} position lists for {} sequences",
                positions.len(),
                batch.batch
            )));
        }
        let mut inputs = batch.ids.clone();
        let mut targets = Vec::new();
        for (b, pos) in positions.iter().enumerate() {
            for &t in pos {
                let i = b * batch.seq + t;
                if t >= batch.seq || !batch.mask[i] || !maskable(batch.ids[i]) {
                    return Err(Error::Data(format!(
                        "position {t} of sequence {b} is not maskable"
                    )));
                }
                targets.push(batch.ids[i]);
                inputs[i] = MASK;
            }
        }
        Ok(MaskingPlan {
            ratio,
            positions,
            inputs,
            targets,
            seq: batch.seq,
        })
    }

    pub fn count(&self) -> usize {
        self.targets.len()
    }

    /// Flat `batch·seq` row indices of the masked positions.
    pub fn rows(&self) -> Vec<usize> {
        self.positions
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.iter().map(move |&t| b * self.seq + t))
            .collect()
    }

    fn apply(&self, batch: &Batch) -> Batch {
        Batch {
            ids: self.inputs.clone(),
            ..batch.clone()
        }
    }
}

/// Mean cross-entropy of tied-embedding logits at `rows` of `states`.
fn tied_prediction_loss(
    tape: &mut Tape,
    states: Var,
    token_emb: Var,
    plan: &MaskingPlan,
) -> Result<Var> {
    let picked = tape.gather_rows(states, &plan.rows())?;
    let logits = tape.matmul_bt(picked, token_emb)?;
    let targets: Vec<usize> = plan.targets.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, &targets)
}

/// Masked-LM loss over the plan's positions; logits are `states · token_embᵀ`.
pub fn mlm_loss(
    tape: &mut Tape,
    model: &EncoderModel,
    vars: &EncoderVars,
    batch: &Batch,
    plan: &MaskingPlan,
    training: bool,
    seed: u64,
) -> Result<Var> {
    if plan.count() == 0 {
        return Err(Error::Data("batch has no maskable tokens".into()));
    }
    let out = model.forward(tape, vars, &plan.apply(batch), training, seed)?;
    tied_prediction_loss(tape, out.states, vars.token_emb, plan)
}

/// One transformer block predicting through the encoder's tied embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ShallowDecoder {
    pub params: ParamSet,
}

impl ShallowDecoder {
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = SeedKey::new(seed).split(label("decoder-init")).rng();
        let mut params = ParamSet::new();
        for (name, shape) in block_layout("decoder", config.hidden, config.ffn_dim()) {
            let t = init_param(&name, &shape, &mut rng);
            params.push(name, t);
        }
        ShallowDecoder { params }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }
}

/// Terms of the autoencoding loss.
#[derive(Clone, Copy, Debug)]
pub struct RetroMaeLoss {
    pub total: Var,
    pub encoder: Var,
    /// `None` when the decoder plan masks nothing.
    pub decoder: Option<Var>,
}

/// Draw independent encoder and decoder plans after checking `enc_ratio < dec_ratio`.
pub fn retromae_plans(
    batch: &Batch,
    enc_ratio: f32,
    dec_ratio: f32,
    vocab_size: usize,
    key: SeedKey,
) -> Result<(MaskingPlan, MaskingPlan)> {
    if enc_ratio >= dec_ratio {
        return Err(Error::Parameter(format!(
            "encoder mask ratio {enc_ratio} must be below decoder ratio {dec_ratio}"
        )));
    }
    let enc = MaskingPlan::draw(batch, enc_ratio, vocab_size, key.split(0))?;
    let dec = MaskingPlan::draw(batch, dec_ratio, vocab_size, key.split(1))?;
    Ok((enc, dec))
}

/// Encoder MLM on the encoder plan plus decoder reconstruction of the
/// decoder plan from its own heavily masked input, whose position 0 carries
/// the encoder's [CLS] state (or zeros when `inject_cls` is false).
#[allow(clippy::too_many_arguments)]
pub fn retromae_loss(
    tape: &mut Tape,
    model: &EncoderModel,
    vars: &EncoderVars,
    decoder: &[Var],
    batch: &Batch,
    enc_plan: &MaskingPlan,
    dec_plan: &MaskingPlan,
    training: bool,
    seed: u64,
    inject_cls: bool,
) -> Result<RetroMaeLoss> {
    if enc_plan.ratio >= dec_plan.ratio {
        return Err(Error::Parameter(format!(
            "encoder mask ratio {} must be below decoder ratio {}",
            enc_plan.ratio, dec_plan.ratio
        )));
    }
    if decoder.len() != 16 {
        return Err(Error::Contract(format!(
            "decoder needs 16 tensors, got {}",
            decoder.len()
        )));
    }
    if enc_plan.count() == 0 {
        return Err(Error::Data("batch has no maskable tokens".into()));
    }
    let key = SeedKey::new(seed);
    let out = model.forward(
        tape,
        vars,
        &enc_plan.apply(batch),
        training,
        key.split(label("encoder")).value(),
    )?;
    let enc_loss = tied_prediction_loss(tape, out.states, vars.token_emb, enc_plan)?;
    if dec_plan.count() == 0 {
        return Ok(RetroMaeLoss {
            total: enc_loss,
            encoder: enc_loss,
            decoder: None,
        });
    }

    let dkey = key.split(label("decoder"));
    let ids: Vec<usize> = dec_plan.inputs.iter().map(|&i| i as usize).collect();
    let tok = tape.gather_rows(vars.token_emb, &ids)?;
    let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
    let pos = tape.gather_rows(vars.pos_emb, &positions)?;
    let x = tape.add(tok, pos)?;
    let x = tape.layer_norm(x, vars.emb_ln_g, vars.emb_ln_b, LAYER_NORM_EPS)?;
    let cls_rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
    let cls = if inject_cls {
        tape.gather_rows(out.states, &cls_rows)?
    } else {
        tape.constant(Tensor::zeros([batch.batch, model.hidden()]))
    };
    let x = tape.overwrite_rows(x, &cls_rows, cls)?;
    let x = tape.dropout(x, model.config.dropout_p, dkey.split(0), training)?;
    let ctx = BlockCtx {
        mask: &batch.mask,
        batch: batch.batch,
        heads: model.config.heads,
        dropout_p: model.config.dropout_p,
        training,
        pre_norm: model.config.pre_norm,
    };
    let h = block_forward(
        tape,
        &BlockVars::from_slice(decoder),
        x,
        &ctx,
        dkey.split(1),
    )?;
    let dec_loss = tied_prediction_loss(tape, h, vars.token_emb, dec_plan)?;
    let total = tape.add(enc_loss, dec_loss)?;
    Ok(RetroMaeLoss {
        total,
        encoder: enc_loss,
        decoder: Some(dec_loss),
    })
}

/// In-batch contrastive loss: row `i` of `z` must pick row `i` of `z_pos`
/// among all rows of `z_pos` under cosine similarity scaled by `1/τ`.
pub fn info_nce(tape: &mut Tape, z: Var, z_pos: Var, temperature: f32) -> Result<Var> {
    let n = tape.shape(z)[0];
    if n < 2 {
        return Err(Error::Parameter(format!(
            "contrastive loss needs at least 2 rows, got {n}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if tape.shape(z) != tape.shape(z_pos) {
        return Err(Error::Dimension(format!(
            "{:?} vs {:?}",
            tape.shape(z),
            tape.shape(z_pos)
        )));
    }
    let a = tape.l2_normalize(z)?;
    let b = tape.l2_normalize(z_pos)?;
    let sims = tape.matmul_bt(a, b)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &targets)
}

/// Unsupervised contrastive loss: two dropout-perturbed passes over the same batch.
#[allow(clippy::too_many_arguments)]
pub fn simcse_loss(
    tape: &mut Tape,
    model: &EncoderModel,
    vars: &EncoderVars,
    batch: &Batch,
    pooling: Pooling,
    temperature: f32,
    seeds: (u64, u64),
) -> Result<Var> {
    if batch.batch < 2 {
        return Err(Error::Parameter(format!(
            "contrastive loss needs at least 2 sentences, got {}",
            batch.batch
        )));
    }
    let first = model.forward(tape, vars, batch, true, seeds.0)?;
    let z = pool(tape, &first, pooling)?;
    let second = model.forward(tape, vars, batch, true, seeds.1)?;
    let zp = pool(tape, &second, pooling)?;
    info_nce(tape, z, zp, temperature)
}

/// Linear map from student to teacher space, used only while distilling.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub weight: Tensor,
}

impl ProjectionHead {
    /// Glorot-uniform `[student × teacher]` weight.
    pub fn init(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = SeedKey::new(seed).split(label("projection-init")).rng();
        let bound = (6.0 / (student_dim + teacher_dim) as f32).sqrt();
        let data = (0..student_dim * teacher_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        ProjectionHead {
            weight: Tensor::new([student_dim, teacher_dim], data).expect("shape matches data"),
        }
    }
}

fn check_teacher(teacher: &Tensor) -> Result<()> {
    if teacher.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "teacher embeddings must be a matrix, got {:?}",
            teacher.shape()
        )));
    }
    let (rows, dim) = teacher.as_matrix();
    for r in 0..rows {
        let n = teacher.data()[r * dim..(r + 1) * dim]
            .iter()
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt();
        if (n - 1.0).abs() > 1e-3 {
            return Err(Error::Data(format!(
                "teacher row {r} has norm {n}, expected unit length"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `‖normalize(x·W) − teacher‖²`.
fn projected_mse(tape: &mut Tape, x: Var, head: Var, teacher: Var) -> Result<Var> {
    let proj = tape.matmul(x, head)?;
    if tape.shape(proj) != tape.shape(teacher) {
        return Err(Error::Contract(format!(
            "projected student {:?} does not match teacher {:?}",
            tape.shape(proj),
            tape.shape(teacher)
        )));
    }
    let rows = tape.shape(proj)[0];
    let p = tape.l2_normalize(proj)?;
    let d = tape.sub(p, teacher)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / rows as f32)
}

/// Distillation loss given already pooled source- and target-side student embeddings.
pub fn distill_from_pooled(
    tape: &mut Tape,
    src: Var,
    tgt: Var,
    head: Var,
    teacher: &Tensor,
) -> Result<Var> {
    check_teacher(teacher)?;
    let (hs, _) = (tape.shape(head)[0], tape.shape(head)[1]);
    for side in [src, tgt] {
        if tape.shape(side).len() != 2 || tape.shape(side)[1] != hs {
            return Err(Error::Contract(format!(
                "student embeddings {:?} do not match head input {hs}",
                tape.shape(side)
            )));
        }
    }
    let t = tape.constant(teacher.clone());
    let a = projected_mse(tape, src, head, t)?;
    let b = projected_mse(tape, tgt, head, t)?;
    tape.add(a, b)
}

/// Both sides of each parallel pair regress onto the same teacher vector.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss(
    tape: &mut Tape,
    model: &EncoderModel,
    vars: &EncoderVars,
    head: Var,
    src: &Batch,
    tgt: &Batch,
    teacher: &Tensor,
    pooling: Pooling,
    training: bool,
    seed: u64,
) -> Result<Var> {
    let rows = teacher.shape().first().copied().unwrap_or(0);
    if src.batch != rows || tgt.batch != rows {
        return Err(Error::Contract(format!(
            "{} source and {} target sentences for {rows} teacher rows",
            src.batch, tgt.batch
        )));
    }
    let key = SeedKey::new(seed);
    let a = model.forward(tape, vars, src, training, key.split(0).value())?;
    let a = pool(tape, &a, pooling)?;
    let b = model.forward(tape, vars, tgt, training, key.split(1).value())?;
    let b = pool(tape, &b, pooling)?;
    distill_from_pooled(tape, a, b, head, teacher)
}

fn softmax(row: &[f32], tau: f32) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = row
        .iter()
        .map(|&v| (((v - max) / tau) as f64).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&x| (x / z) as f32).collect()
}

/// Listwise distillation: per row, cross-entropy between the teacher's and
/// the student's softmax over off-diagonal similarities.
pub fn listnet_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    tau_s: f32,
    tau_t: f32,
) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || teacher.shape() != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "listnet needs equal square matrices, got {shape:?} and {:?}",
            teacher.shape()
        )));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Parameter("listnet needs at least 2 items".into()));
    }
    if !(tau_s > 0.0 && tau_t > 0.0) {
        return Err(Error::Parameter(format!(
            "temperatures must be > 0, got {tau_s}, {tau_t}"
        )));
    }
    let mut target = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        let row: Vec<f32> = (0..n)
            .filter(|&j| j != i)
            .map(|j| teacher.data()[i * n + j])
            .collect();
        target.extend(softmax(&row, tau_t));
    }
    let off = tape.drop_diagonal(student)?;
    let logits = tape.scale(off, 1.0 / tau_s)?;
    tape.soft_cross_entropy(logits, &target)
}

/// Drop the distillation projection, leaving the bare encoder.
pub fn strip_projection(ck: &Checkpoint) -> Result<Checkpoint> {
    if ck.head.is_none() {
        return Err(Error::Contract(
            "checkpoint has no projection head to strip".into(),
        ));
    }
    Ok(Checkpoint {
        model: ck.model.clone(),
        vocab: ck.vocab.clone(),
        head: None,
    })
}
