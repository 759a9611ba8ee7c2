//! BERT-style transformer encoder and sentence pooling.

mod checkpoint;

pub use checkpoint::Checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SeedKey;
use crate::tape::{Tape, Var};
use crate::tensor::{normalize_rows, Tensor};
use crate::tokenizer::{TokenSeq, Vocab};

pub const LAYER_NORM_EPS: f32 = 1e-12;
const INIT_STD: f32 = 0.02;

fn default_ffn_mult() -> usize {
    4
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f32,
    /// Layer norm before each sublayer instead of after the residual sum.
    #[serde(default)]
    pub pre_norm: bool,
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, hidden 64, 4 heads, 64 positions.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn_mult: 4,
            max_len: 64,
            vocab_size,
            dropout_p: 0.1,
            pre_norm: false,
        }
    }

    /// Full-scale Small configuration: 12 layers, hidden 256.
    pub fn full_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 12,
            hidden: 256,
            heads: 4,
            max_len: 512,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.layers < 1 {
            return bad("encoder needs at least one layer".into());
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_len < 3 {
            return bad(format!("max_len must be at least 3, got {}", self.max_len));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if self.vocab_size <= crate::tokenizer::SPECIAL_TOKENS.len() {
            return bad(format!(
                "vocab_size {} leaves no room for real tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.ffn_dim());
        let mut out = vec![
            ("token_emb".to_string(), vec![self.vocab_size, h]),
            ("pos_emb".to_string(), vec![self.max_len, h]),
            ("emb_ln.gamma".to_string(), vec![h]),
            ("emb_ln.beta".to_string(), vec![h]),
        ];
        for l in 0..self.layers {
            out.extend(block_layout(&format!("blocks.{l}"), h, f));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

pub(crate) fn block_layout(prefix: &str, h: usize, f: usize) -> Vec<(String, Vec<usize>)> {
    let names: [(&str, Vec<usize>); 16] = [
        ("attn.wq", vec![h, h]),
        ("attn.bq", vec![h]),
        ("attn.wk", vec![h, h]),
        ("attn.bk", vec![h]),
        ("attn.wv", vec![h, h]),
        ("attn.bv", vec![h]),
        ("attn.wo", vec![h, h]),
        ("attn.bo", vec![h]),
        ("ln1.gamma", vec![h]),
        ("ln1.beta", vec![h]),
        ("ffn.w1", vec![h, f]),
        ("ffn.b1", vec![f]),
        ("ffn.w2", vec![f, h]),
        ("ffn.b2", vec![h]),
        ("ln2.gamma", vec![h]),
        ("ln2.beta", vec![h]),
    ];
    names
        .into_iter()
        .map(|(n, s)| (format!("{prefix}.{n}"), s))
        .collect()
}

/// Initial value of a parameter by naming convention: layer-norm gains are
/// one, biases and layer-norm shifts zero, everything else truncated normal.
pub(crate) fn init_param(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let data = if leaf == "gamma" {
        vec![1.0; n]
    } else if leaf == "beta" || (leaf.starts_with('b') && shape.len() == 1) {
        vec![0.0; n]
    } else {
        (0..n)
            .map(|_| loop {
                let z: f32 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * INIT_STD;
                }
            })
            .collect()
    };
    Tensor::new(shape.to_vec(), data).expect("layout shapes are consistent")
}

/// Sentence-vector reduction over token states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
    Max,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Cls, Pooling::Mean, Pooling::Max];
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

/// Token ids of a batch flattened to `batch × seq`, trimmed to the longest real sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn collate(seqs: &[TokenSeq]) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::Data("empty batch".into()));
        };
        let max_len = first.max_len();
        if seqs
            .iter()
            .any(|s| s.max_len() != max_len || s.attention_mask.len() != max_len)
        {
            return Err(Error::Data(
                "all sequences in a batch must share max_len".into(),
            ));
        }
        let seq = seqs
            .iter()
            .map(TokenSeq::real_len)
            .max()
            .unwrap_or(1)
            .max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(&s.ids[..seq]);
            mask.extend(s.attention_mask[..seq].iter().map(|&m| m == 1));
        }
        Ok(Batch {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn row_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.seq..(b + 1) * self.seq]
    }
}

/// Tape handles of one transformer block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

impl BlockVars {
    pub(crate) fn from_slice(v: &[Var]) -> Self {
        BlockVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            ln1_g: v[8],
            ln1_b: v[9],
            w1: v[10],
            b1: v[11],
            w2: v[12],
            b2: v[13],
            ln2_g: v[14],
            ln2_b: v[15],
        }
    }
}

/// Tape handles of a bound encoder.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub all: Vec<Var>,
    pub token_emb: Var,
    pub pos_emb: Var,
    pub(crate) emb_ln_g: Var,
    pub(crate) emb_ln_b: Var,
    blocks: Vec<BlockVars>,
}

impl EncoderVars {
    /// Handles in [`EncoderConfig::layout`] order.
    pub fn from_vars(all: Vec<Var>) -> Self {
        EncoderVars {
            token_emb: all[0],
            pos_emb: all[1],
            emb_ln_g: all[2],
            emb_ln_b: all[3],
            blocks: all[4..].chunks(16).map(BlockVars::from_slice).collect(),
            all,
        }
    }
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch·seq × hidden]` token states.
    pub states: Var,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

pub(crate) struct BlockCtx<'a> {
    pub mask: &'a [bool],
    pub batch: usize,
    pub heads: usize,
    pub dropout_p: f32,
    pub training: bool,
    pub pre_norm: bool,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub(crate) fn block_forward(
    tape: &mut Tape,
    p: &BlockVars,
    x: Var,
    ctx: &BlockCtx,
    key: SeedKey,
) -> Result<Var> {
    let attn = |tape: &mut Tape, inp: Var| -> Result<Var> {
        let q = linear(tape, inp, p.wq, p.bq)?;
        let k = linear(tape, inp, p.wk, p.bk)?;
        let v = linear(tape, inp, p.wv, p.bv)?;
        let a = tape.attention(q, k, v, ctx.mask, ctx.batch, ctx.heads)?;
        let o = linear(tape, a, p.wo, p.bo)?;
        tape.dropout(o, ctx.dropout_p, key.split(0), ctx.training)
    };
    let ffn = |tape: &mut Tape, inp: Var| -> Result<Var> {
        let h = linear(tape, inp, p.w1, p.b1)?;
        let h = tape.gelu(h)?;
        let o = linear(tape, h, p.w2, p.b2)?;
        tape.dropout(o, ctx.dropout_p, key.split(1), ctx.training)
    };
    if ctx.pre_norm {
        let n1 = tape.layer_norm(x, p.ln1_g, p.ln1_b, LAYER_NORM_EPS)?;
        let a = attn(tape, n1)?;
        let h = tape.add(x, a)?;
        let n2 = tape.layer_norm(h, p.ln2_g, p.ln2_b, LAYER_NORM_EPS)?;
        let f = ffn(tape, n2)?;
        tape.add(h, f)
    } else {
        let a = attn(tape, x)?;
        let s = tape.add(x, a)?;
        let h = tape.layer_norm(s, p.ln1_g, p.ln1_b, LAYER_NORM_EPS)?;
        let f = ffn(tape, h)?;
        let s = tape.add(h, f)?;
        tape.layer_norm(s, p.ln2_g, p.ln2_b, LAYER_NORM_EPS)
    }
}

/// Encoder parameters plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderModel {
    /// Randomly initialized encoder; deterministic per `(config, seed)`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedKey::new(seed)
            .split(crate::rng::label("encoder-init"))
            .rng();
        let mut params = ParamSet::new();
        for (name, shape) in config.layout() {
            let t = init_param(&name, &shape, &mut rng);
            params.push(name, t);
        }
        Ok(EncoderModel { config, params })
    }

    /// Rebuild from stored parameters after checking them against the config layout.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} encoder tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::Data(format!(
                    "parameter {pn} {:?} does not match expected {name} {shape:?}",
                    pt.shape()
                )));
            }
        }
        Ok(EncoderModel { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        EncoderVars::from_vars(self.params.bind(tape, trainable))
    }

    /// Token embedding + position embedding, normalized, with dropout.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        batch: &Batch,
        training: bool,
        key: SeedKey,
    ) -> Result<Var> {
        if batch.seq > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq, self.config.max_len
            )));
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} ≥ vocab size {}",
                self.config.vocab_size
            )));
        }
        let tok = tape.gather_rows(vars.token_emb, &ids)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let pos = tape.gather_rows(vars.pos_emb, &positions)?;
        let x = tape.add(tok, pos)?;
        let x = tape.layer_norm(x, vars.emb_ln_g, vars.emb_ln_b, LAYER_NORM_EPS)?;
        tape.dropout(x, self.config.dropout_p, key, training)
    }

    /// Run the transformer stack over already-embedded inputs.
    pub fn run_blocks(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        x: Var,
        batch: &Batch,
        training: bool,
        key: SeedKey,
    ) -> Result<Var> {
        let ctx = BlockCtx {
            mask: &batch.mask,
            batch: batch.batch,
            heads: self.config.heads,
            dropout_p: self.config.dropout_p,
            training,
            pre_norm: self.config.pre_norm,
        };
        let mut h = x;
        for (l, block) in vars.blocks.iter().enumerate() {
            h = block_forward(tape, block, h, &ctx, key.split(l as u64 + 1))?;
        }
        Ok(h)
    }

    /// Token states for a batch; deterministic per `(inputs, seed, training)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        batch: &Batch,
        training: bool,
        seed: u64,
    ) -> Result<EncoderOutput> {
        let key = SeedKey::new(seed);
        let x = self.embed_tokens(tape, vars, batch, training, key.split(0))?;
        let states = self.run_blocks(tape, vars, x, batch, training, key)?;
        Ok(EncoderOutput {
            states,
            mask: batch.mask.clone(),
            batch: batch.batch,
            seq: batch.seq,
        })
    }

    /// Convenience forward returning `[batch × seq × hidden]` token states.
    pub fn token_states(&self, seqs: &[TokenSeq], training: bool, seed: u64) -> Result<Tensor> {
        let batch = Batch::collate(seqs)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, &batch, training, seed)?;
        tape.check_finite()?;
        tape.value(out.states)
            .clone()
            .reshape([batch.batch, batch.seq, self.config.hidden])
    }

    /// Pooled, optionally unit-normalized, eval-mode sentence embeddings.
    pub fn embed_sentences<S: AsRef<str>>(
        &self,
        vocab: &Vocab,
        pooling: Pooling,
        texts: &[S],
        normalize: bool,
    ) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let h = self.config.hidden;
        let mut data = Vec::with_capacity(texts.len() * h);
        for chunk in texts.chunks(CHUNK) {
            let seqs = chunk
                .iter()
                .map(|t| vocab.encode(t.as_ref(), self.config.max_len))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::collate(&seqs)?;
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let out = self.forward(&mut tape, &vars, &batch, false, 0)?;
            let pooled = pool(&mut tape, &out, pooling)?;
            tape.check_finite()?;
            data.extend_from_slice(tape.data(pooled));
        }
        let mut t = Tensor::new([texts.len(), h], data)?;
        if normalize {
            normalize_rows(&mut t);
        }
        Ok(t)
    }
}

/// Reduce token states to one vector per sequence on the tape.
pub fn pool(tape: &mut Tape, out: &EncoderOutput, pooling: Pooling) -> Result<Var> {
    for b in 0..out.batch {
        if !out.mask[b * out.seq..(b + 1) * out.seq].iter().any(|&m| m) {
            return Err(Error::Data(format!(
                "pooling: row {b} has an all-zero mask"
            )));
        }
    }
    match pooling {
        Pooling::Cls => {
            let rows: Vec<usize> = (0..out.batch).map(|b| b * out.seq).collect();
            tape.gather_rows(out.states, &rows)
        }
        Pooling::Mean => tape.mean_pool(out.states, &out.mask, out.batch),
        Pooling::Max => tape.max_pool(out.states, &out.mask, out.batch),
    }
}

/// Pool `[batch × seq × hidden]` states under a `[batch × seq]` 0/1 mask.
pub fn pool_states(states: &Tensor, mask: &[Vec<u8>], pooling: Pooling) -> Result<Tensor> {
    let shape = states.shape();
    if shape.len() != 3 || mask.len() != shape[0] || mask.iter().any(|m| m.len() != shape[1]) {
        return Err(Error::Dimension(format!(
            "pool: states {shape:?} vs mask {}×?",
            mask.len()
        )));
    }
    let (b, s, h) = (shape[0], shape[1], shape[2]);
    let mut tape = Tape::new();
    let x = tape.constant(states.clone().reshape([b * s, h])?);
    let out = EncoderOutput {
        states: x,
        mask: mask.iter().flatten().map(|&m| m == 1).collect(),
        batch: b,
        seq: s,
    };
    let p = pool(&mut tape, &out, pooling)?;
    Ok(tape.value(p).clone())
}
