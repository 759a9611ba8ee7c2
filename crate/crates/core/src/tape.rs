//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! enough cached state to run the backward rule. Node ids are assigned in
//! creation order, so inputs always precede their consumers and a single
//! reverse sweep visits each node once. The tape is rebuilt for every
//! training step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::rng::SeedKey;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulBt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    OverwriteRows {
        x: Var,
        src: Var,
        idx: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    MeanPool {
        x: Var,
        seq: usize,
        weights: Vec<f32>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    L2Norm {
        x: Var,
        norms: Vec<f32>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f32>,
        probs: Vec<f32>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f32>,
    },
    DropDiagonal {
        x: Var,
        n: usize,
    },
    Reshape {
        x: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBt { .. } => "matmul_bt",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax_rows",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather_rows",
            Op::OverwriteRows { .. } => "overwrite_rows",
            Op::Attention { .. } => "attention",
            Op::MeanPool { .. } => "mean_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::L2Norm { .. } => "l2_normalize",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::DropDiagonal { .. } => "drop_diagonal",
            Op::Reshape { .. } => "reshape",
        }
    }
}

fn accumulator<'g>(grads: &'g mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> &'g mut Vec<f32> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    nonfinite: Option<String>,
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.as_matrix()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
        self.nonfinite = None;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        value.grad = None;
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad;
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].value.requires_grad = requires_grad;
        v
    }

    /// Trainable leaf copied from a parameter tensor.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut t = value.clone();
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut t = value;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Branch choices of every piecewise op recorded so far (max-pool argmax positions).
    ///
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::MaxPool { argmax, .. } = &n.op {
                out.extend_from_slice(argmax);
            }
        }
        out
    }

    /// Error if any op so far produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(at) => Err(Error::Numeric(format!("non-finite value produced by {at}"))),
            None => Ok(()),
        }
    }

    fn matrix2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what}: expected 2-D tensor, got {shape:?}"
            )));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix2(a, "matmul lhs")?;
        let (k2, n) = self.matrix2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul: inner dims {k} and {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            0.0,
        );
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix2(a, "matmul_bt lhs")?;
        let (n, k2) = self.matrix2(b, "matmul_bt rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt: inner dims {k} and {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            true,
            &mut out,
            0.0,
        );
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::MatMulBt { a, b, m, k, n }, &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// Broadcast-add a `[h]` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, h) = dims(self.value(x));
        if self.value(bias).numel() != h {
            return Err(Error::Dimension(format!(
                "add_row: bias of {} for rows of {h}",
                self.value(bias).numel()
            )));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(h) {
            row.iter_mut().zip(&b).for_each(|(o, &bb)| *o += bb);
        }
        Ok(self.push(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        Ok(self.push(out, Op::Scale { x, c }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        Ok(self.push(out, Op::Gelu { x }, &[x]))
    }

    /// Per-row normalization to zero mean and unit variance, then `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (rows, h) = dims(self.value(x));
        if self.value(gamma).numel() != h || self.value(beta).numel() != h {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/bias size does not match {h}"
            )));
        }
        let g = self.data(gamma);
        let bt = self.data(beta);
        let xs = self.data(x);
        let mut xhat = vec![0.0; rows * h];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * h];
        for r in 0..rows {
            let row = &xs[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f32>() / h as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / h as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j] + bt[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, m) = dims(self.value(x));
        let mut out = self.value(x).clone();
        if m > 0 {
            out.data_mut().chunks_mut(m).for_each(softmax_in_place);
        }
        Ok(self.push(out, Op::Softmax { x }, &[x]))
    }

    /// Inverted dropout. The mask is a pure function of `key`; eval mode and
    /// `p = 0` return `x` unchanged without recording a node.
    pub fn dropout(&mut self, x: Var, p: f32, key: SeedKey, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let mut rng = key.rng();
        let mask: Vec<f32> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, &m)| *v *= m);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, h) = self.matrix2(table, "gather_rows")?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= rows {
                return Err(Error::Data(format!(
                    "row id {id} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        let t = Tensor::new([ids.len(), h], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Copy of `x` with rows `idx` replaced by the rows of `src`.
    pub fn overwrite_rows(&mut self, x: Var, idx: &[usize], src: Var) -> Result<Var> {
        let (rows, h) = self.matrix2(x, "overwrite_rows")?;
        let (srows, sh) = self.matrix2(src, "overwrite_rows src")?;
        if sh != h || srows != idx.len() {
            return Err(Error::Dimension(format!(
                "overwrite_rows: {} rows of width {sh} for {} slots of width {h}",
                srows,
                idx.len()
            )));
        }
        let mut out = self.value(x).clone();
        let s = self.data(src).to_vec();
        for (i, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::Dimension(format!(
                    "overwrite_rows: row {r} of {rows}"
                )));
            }
            out.data_mut()[r * h..(r + 1) * h].copy_from_slice(&s[i * h..(i + 1) * h]);
        }
        Ok(self.push(
            out,
            Op::OverwriteRows {
                x,
                src,
                idx: idx.to_vec(),
            },
            &[x, src],
        ))
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences
    /// of length `seq`. `q`, `k`, `v` are `[batch·seq × hidden]`; keys whose
    /// `key_mask` entry is false receive zero attention weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let (rows, hidden) = self.matrix2(q, "attention q")?;
        self.same_shape(q, k, "attention k")?;
        self.same_shape(q, v, "attention v")?;
        if batch == 0 || rows % batch != 0 || key_mask.len() != rows {
            return Err(Error::Dimension(format!(
                "attention: {rows} rows, batch {batch}, mask {}",
                key_mask.len()
            )));
        }
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention: {hidden} not divisible by {heads} heads"
            )));
        }
        let seq = rows / batch;
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut out = vec![0.0f32; rows * hidden];
        let mut scores = vec![0.0f32; seq];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            if !mask.iter().any(|&m| m) {
                return Err(Error::Data(format!(
                    "attention: sequence {b} has no unmasked token"
                )));
            }
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * hidden + off..][..dh];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[j] {
                            let kj = &kd[(b * seq + j) * hidden + off..][..dh];
                            let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f32>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + hd) * seq + i) * seq..][..seq];
                    let mut sum = 0.0;
                    for j in 0..seq {
                        if mask[j] {
                            p[j] = (scores[j] - max).exp();
                            sum += p[j];
                        }
                    }
                    let o = &mut out[(b * seq + i) * hidden + off..][..dh];
                    for j in 0..seq {
                        if mask[j] {
                            p[j] /= sum;
                            let vj = &vd[(b * seq + j) * hidden + off..][..dh];
                            o.iter_mut().zip(vj).for_each(|(oo, &vv)| *oo += p[j] * vv);
                        }
                    }
                }
            }
        }
        let t = Tensor::new([rows, hidden], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Masked average over the `seq` rows of each sequence: `[batch·seq × h] → [batch × h]`.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool], batch: usize) -> Result<Var> {
        let (rows, h) = self.matrix2(x, "mean_pool")?;
        if batch == 0 || rows != batch * (rows / batch) || mask.len() != rows {
            return Err(Error::Dimension(format!(
                "mean_pool: {rows} rows for batch {batch}"
            )));
        }
        let seq = rows / batch;
        let mut weights = vec![0.0f32; rows];
        for b in 0..batch {
            let count = mask[b * seq..(b + 1) * seq].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Data(format!(
                    "pooling: row {b} has an all-zero mask"
                )));
            }
            for t in 0..seq {
                if mask[b * seq + t] {
                    weights[b * seq + t] = 1.0 / count as f32;
                }
            }
        }
        let xs = self.data(x);
        let mut out = vec![0.0f32; batch * h];
        for b in 0..batch {
            let o = &mut out[b * h..(b + 1) * h];
            for t in 0..seq {
                let w = weights[b * seq + t];
                if w > 0.0 {
                    let r = &xs[(b * seq + t) * h..][..h];
                    o.iter_mut().zip(r).for_each(|(oo, &v)| *oo += w * v);
                }
            }
        }
        let t = Tensor::new([batch, h], out)?;
        Ok(self.push(t, Op::MeanPool { x, seq, weights }, &[x]))
    }

    /// Masked elementwise maximum over each sequence.
    pub fn max_pool(&mut self, x: Var, mask: &[bool], batch: usize) -> Result<Var> {
        let (rows, h) = self.matrix2(x, "max_pool")?;
        if batch == 0 || rows % batch != 0 || mask.len() != rows {
            return Err(Error::Dimension(format!(
                "max_pool: {rows} rows for batch {batch}"
            )));
        }
        let seq = rows / batch;
        let xs = self.data(x);
        let mut out = vec![f32::NEG_INFINITY; batch * h];
        let mut argmax = vec![usize::MAX; batch * h];
        for b in 0..batch {
            for t in 0..seq {
                if !mask[b * seq + t] {
                    continue;
                }
                let r = (b * seq + t) * h;
                for j in 0..h {
                    if xs[r + j] > out[b * h + j] || argmax[b * h + j] == usize::MAX {
                        out[b * h + j] = xs[r + j];
                        argmax[b * h + j] = r + j;
                    }
                }
            }
            if argmax[b * h..(b + 1) * h].contains(&usize::MAX) {
                return Err(Error::Data(format!(
                    "pooling: row {b} has an all-zero mask"
                )));
            }
        }
        let t = Tensor::new([batch, h], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, h) = dims(self.value(x));
        let mut out = self.value(x).clone();
        let mut norms = vec![0.0f32; rows];
        for (r, row) in out.data_mut().chunks_mut(h.max(1)).enumerate().take(rows) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            norms[r] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(out, Op::L2Norm { x, norms }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let s = self.data(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        Ok(self.push(Tensor::scalar(s as f32), Op::Mean { x }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.matrix2(logits, "cross_entropy")?;
        if targets.len() != rows || rows == 0 {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Data(format!(
                "cross_entropy: target {t} out of {classes} classes"
            )));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row
                .iter()
                .map(|&v| ((v - max) as f64).exp())
                .sum::<f64>()
                .ln()
                + max as f64;
            total += lse - row[targets[r]] as f64;
            softmax_in_place(row);
        }
        let loss = Tensor::scalar((total / rows as f64) as f32);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over rows of `-Σ target · log softmax(logits)`; `target` rows are distributions.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &[f32]) -> Result<Var> {
        let (rows, classes) = self.matrix2(logits, "soft_cross_entropy")?;
        if target.len() != rows * classes || rows == 0 {
            return Err(Error::Dimension("soft_cross_entropy: target shape".into()));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row
                .iter()
                .map(|&v| ((v - max) as f64).exp())
                .sum::<f64>()
                .ln()
                + max as f64;
            let q = &target[r * classes..(r + 1) * classes];
            total += row
                .iter()
                .zip(q)
                .map(|(&v, &qq)| qq as f64 * (lse - v as f64))
                .sum::<f64>();
            softmax_in_place(row);
        }
        let loss = Tensor::scalar((total / rows as f64) as f32);
        Ok(self.push(
            loss,
            Op::SoftCrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean elementwise binary cross-entropy on logits against `{0,1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f32]) -> Result<Var> {
        let n = self.value(logits).numel();
        if target.len() != n || n == 0 {
            return Err(Error::Dimension("bce_with_logits: target shape".into()));
        }
        let total: f64 = self
            .data(logits)
            .iter()
            .zip(target)
            .map(|(&x, &y)| {
                let x = x as f64;
                x.max(0.0) - x * y as f64 + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let loss = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(
            loss,
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
            &[logits],
        ))
    }

    /// `[n×n] → [n×(n−1)]` with the diagonal removed from every row.
    pub fn drop_diagonal(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix2(x, "drop_diagonal")?;
        if n != m || n < 2 {
            return Err(Error::Dimension(format!(
                "drop_diagonal: needs square n≥2, got {n}×{m}"
            )));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(xs[i * n + j]);
                }
            }
        }
        let t = Tensor::new([n, n - 1], out)?;
        Ok(self.push(t, Op::DropDiagonal { x, n }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Populate `grad` on every trainable leaf with `∂loss/∂leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].value.requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                accumulator(grads, nodes, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if want(*a) {
                    gemm(*m, *n, *k, g, false, val(*b), true, acc!(*a), 1.0);
                }
                if want(*b) {
                    gemm(*k, *m, *n, val(*a), true, g, false, acc!(*b), 1.0);
                }
            }
            Op::MatMulBt { a, b, m, k, n } => {
                if want(*a) {
                    gemm(*m, *n, *k, g, false, val(*b), false, acc!(*a), 1.0);
                }
                if want(*b) {
                    gemm(*n, *m, *k, g, true, val(*a), false, acc!(*b), 1.0);
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if want(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Sub { a, b } => {
                if want(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                }
                if want(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(d, &gg)| *d -= gg);
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let other = val(*b);
                    acc!(*a)
                        .iter_mut()
                        .zip(g)
                        .zip(other)
                        .for_each(|((d, &gg), &o)| *d += gg * o);
                }
                if want(*b) {
                    let other = val(*a);
                    acc!(*b)
                        .iter_mut()
                        .zip(g)
                        .zip(other)
                        .for_each(|((d, &gg), &o)| *d += gg * o);
                }
            }
            Op::AddRow { x, bias } => {
                if want(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                }
                if want(*bias) {
                    let db = acc!(*bias);
                    let h = db.len();
                    for row in g.chunks(h) {
                        db.iter_mut().zip(row).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Scale { x, c } => {
                acc!(*x).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * c);
            }
            Op::Gelu { x } => {
                let xs = val(*x);
                acc!(*x)
                    .iter_mut()
                    .zip(g)
                    .zip(xs)
                    .for_each(|((d, &gg), &xx)| *d += gg * gelu_grad(xx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma);
                let h = gm.len();
                if want(*x) {
                    let dx = acc!(*x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * h..(r + 1) * h];
                        let xh = &xhat[r * h..(r + 1) * h];
                        let mut mean_d = 0.0f32;
                        let mut mean_dx = 0.0f32;
                        for j in 0..h {
                            let d = gr[j] * gm[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= h as f32;
                        mean_dx /= h as f32;
                        for j in 0..h {
                            let d = gr[j] * gm[j];
                            dx[r * h + j] += rs * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if want(*gamma) {
                    let dg = acc!(*gamma);
                    for (row, xh) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            dg[j] += row[j] * xh[j];
                        }
                    }
                }
                if want(*beta) {
                    let db = acc!(*beta);
                    for row in g.chunks(h) {
                        db.iter_mut().zip(row).for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = nodes[i].value.data();
                let (_, m) = dims(&nodes[i].value);
                let dx = acc!(*x);
                for ((dr, gr), yr) in dx.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                acc!(*x)
                    .iter_mut()
                    .zip(g)
                    .zip(mask)
                    .for_each(|((d, &gg), &m)| *d += gg * m);
            }
            Op::Gather { table, ids } => {
                let h = dims(&nodes[table.0].value).1;
                let dt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * h..(r + 1) * h];
                    dt[id * h..(id + 1) * h]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &gg)| *d += gg);
                }
            }
            Op::OverwriteRows { x, src, idx } => {
                let h = dims(&nodes[x.0].value).1;
                if want(*x) {
                    let dx = acc!(*x);
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
                    for &r in idx {
                        dx[r * h..(r + 1) * h]
                            .iter_mut()
                            .zip(&g[r * h..(r + 1) * h])
                            .for_each(|(d, &gg)| *d -= gg);
                    }
                }
                if want(*src) {
                    let ds = acc!(*src);
                    for (s, &r) in idx.iter().enumerate() {
                        ds[s * h..(s + 1) * h]
                            .iter_mut()
                            .zip(&g[r * h..(r + 1) * h])
                            .for_each(|(d, &gg)| *d += gg);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                self.attention_backward(g, *q, *k, *v, *batch, *seq, *heads, probs, grads);
            }
            Op::MeanPool { x, seq, weights } => {
                let h = dims(&nodes[i].value).1;
                let dx = acc!(*x);
                for (r, &w) in weights.iter().enumerate() {
                    if w > 0.0 {
                        let b = r / seq;
                        let gr = &g[b * h..(b + 1) * h];
                        dx[r * h..(r + 1) * h]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, &gg)| *d += w * gg);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let dx = acc!(*x);
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            }
            Op::L2Norm { x, norms } => {
                let y = nodes[i].value.data();
                let h = dims(&nodes[i].value).1;
                let dx = acc!(*x);
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * h..(r + 1) * h];
                    let gr = &g[r * h..(r + 1) * h];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..h {
                        dx[r * h + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::Sum { x } => {
                acc!(*x).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { x } => {
                let dx = acc!(*x);
                let s = g[0] / dx.len() as f32;
                dx.iter_mut().for_each(|d| *d += s);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = dims(&nodes[logits.0].value).1;
                let s = g[0] / targets.len() as f32;
                let dl = acc!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * classes + j] += s * (probs[r * classes + j] - onehot);
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let classes = dims(&nodes[logits.0].value).1;
                let rows = target.len() / classes;
                let s = g[0] / rows as f32;
                let dl = acc!(*logits);
                for r in 0..rows {
                    let q = &target[r * classes..(r + 1) * classes];
                    let mass: f32 = q.iter().sum();
                    for j in 0..classes {
                        dl[r * classes + j] += s * (mass * probs[r * classes + j] - q[j]);
                    }
                }
            }
            Op::BceWithLogits { logits, target } => {
                let xs = val(*logits);
                let s = g[0] / target.len() as f32;
                let dl = acc!(*logits);
                for ((d, &x), &y) in dl.iter_mut().zip(xs).zip(target) {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    *d += s * (sig - y);
                }
            }
            Op::DropDiagonal { x, n } => {
                let dx = acc!(*x);
                let mut c = 0;
                for r in 0..*n {
                    for j in 0..*n {
                        if r != j {
                            dx[r * n + j] += g[c];
                            c += 1;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                acc!(*x).iter_mut().zip(g).for_each(|(d, &gg)| *d += gg);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f32],
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let hidden = dims(&self.nodes[q.0].value).1;
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let n = qd.len();
        let mut dq = vec![0.0f32; n];
        let mut dk = vec![0.0f32; n];
        let mut dv = vec![0.0f32; n];
        let mut dp = vec![0.0f32; seq];
        for b in 0..batch {
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + hd) * seq + i) * seq..][..seq];
                    let go = &g[(b * seq + i) * hidden + off..][..dh];
                    let mut dot = 0.0f32;
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * hidden + off..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += dp[j] * p[j];
                        let dvj = &mut dv[(b * seq + j) * hidden + off..][..dh];
                        dvj.iter_mut().zip(go).for_each(|(d, &gg)| *d += p[j] * gg);
                    }
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &kd[(b * seq + j) * hidden + off..][..dh];
                        let qi = &qd[(b * seq + i) * hidden + off..][..dh];
                        let dqi = &mut dq[(b * seq + i) * hidden + off..][..dh];
                        dqi.iter_mut().zip(kj).for_each(|(d, &kk)| *d += ds * kk);
                        let dkj = &mut dk[(b * seq + j) * hidden + off..][..dh];
                        dkj.iter_mut().zip(qi).for_each(|(d, &qq)| *d += ds * qq);
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].value.requires_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
                slot.iter_mut().zip(&d).for_each(|(s, &x)| *s += x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let y = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let d = tape.matmul(x, y).unwrap();
        assert_eq!(tape.data(d), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let r = gradcheck::check(
            &[random(&[3, 4], 1), random(&[4, 2], 2)],
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let sq = t.mul(c, c)?;
                t.sum(sq)
            },
            1e-3,
        )
        .unwrap();
        assert!(r.max_error < 1e-3, "{r:?}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4], 2.5));
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_zero_gain_outputs_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[3, 4], 3));
        let g = tape.constant(Tensor::zeros([4]));
        let b = tape.constant(Tensor::full([4], 0.7));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.7));
        let bad = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            tape.layer_norm(x, bad, b, 1e-5),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            tape.layer_norm(x, g, b, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let r = gradcheck::check(
            &[
                random(&[2, 4], 4),
                random(&[4], 5),
                random(&[4], 6),
                random(&[2, 4], 7),
            ],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = t.mul(y, v[3])?;
                t.sum(w)
            },
            1e-3,
        )
        .unwrap();
        assert!(r.max_error < 1e-2, "{r:?}");
    }

    #[test]
    fn softmax_rows_are_stable_distributions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
        let x = tape.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-6);
        assert!(tape.data(y)[1].abs() < 1e-6);
        tape.check_finite().unwrap();
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let r = gradcheck::check(
            &[random(&[3, 5], 8), random(&[3, 5], 9)],
            |t, v| {
                let y = t.softmax_rows(v[0])?;
                let w = t.mul(y, v[1])?;
                t.sum(w)
            },
            1e-3,
        )
        .unwrap();
        assert!(r.max_error < 1e-3, "{r:?}");
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 4], 10));
        let key = SeedKey::new(1);
        assert_eq!(tape.dropout(x, 0.0, key, true).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, key, false).unwrap(), x);
        assert!(matches!(
            tape.dropout(x, 1.0, key, true),
            Err(Error::Parameter(_))
        ));
        let a = tape.dropout(x, 0.5, key, true).unwrap();
        let b = tape.dropout(x, 0.5, key, true).unwrap();
        assert_eq!(tape.data(a), tape.data(b));
        let c = tape.dropout(x, 0.5, key.split(1), true).unwrap();
        assert_ne!(tape.data(a), tape.data(c));
    }

    #[test]
    fn dropout_zero_fraction_follows_p() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([100_000], 1.0));
        let y = tape.dropout(x, 0.5, SeedKey::new(42), true).unwrap();
        let zeros = tape.data(y).iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((0.49..=0.51).contains(&zeros), "{zeros}");
        assert!(tape.data(y).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_on_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(&random(&[2, 3], 11));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let xv = random(&[5], 12);
        let x = tape.param(&xv);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), xv.data());
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.param(&random(&[2, 2], 13));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.reset();
        let x = tape.param(&random(&[2, 2], 13));
        let s = tape.sum(x).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::full([3], 2.0));
        let a = tape.add(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0; 3]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let r = gradcheck::check(
            &[
                random(&[4, 3], 20),
                random(&[3, 5], 21),
                random(&[5], 22),
                random(&[5, 2], 23),
                random(&[2], 24),
            ],
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add_row(h, v[2])?;
                let h = t.gelu(h)?;
                let o = t.matmul(h, v[3])?;
                let o = t.add_row(o, v[4])?;
                t.cross_entropy(o, &[0, 1, 1, 0])
            },
            1e-3,
        )
        .unwrap();
        assert!(r.max_error < 1e-2, "{r:?}");
    }

    #[test]
    fn attention_ignores_masked_keys() {
        let (b, s, h) = (2, 4, 8);
        let q = random(&[b * s, h], 30);
        let k = random(&[b * s, h], 31);
        let v = random(&[b * s, h], 32);
        let mask = [true, true, false, false, true, true, true, false];
        let run = |v: &Tensor| {
            let mut tape = Tape::new();
            let (qq, kk, vv) = (
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(v.clone()),
            );
            let o = tape.attention(qq, kk, vv, &mask, b, 2).unwrap();
            tape.data(o).to_vec()
        };
        let base = run(&v);
        let mut v2 = v.clone();
        v2.data_mut()[2 * h..3 * h]
            .iter_mut()
            .for_each(|x| *x = 99.0);
        let changed = run(&v2);
        assert_eq!(base, changed);
    }

    #[test]
    fn fused_ops_match_finite_differences() {
        let mask = [true, true, true, false, true, false];
        let r = gradcheck::check(
            &[
                random(&[6, 4], 40),
                random(&[6, 4], 41),
                random(&[6, 4], 42),
                random(&[2, 4], 43),
            ],
            |t, v| {
                let o = t.attention(v[0], v[1], v[2], &mask, 2, 2)?;
                let mp = t.mean_pool(o, &mask, 2)?;
                let xp = t.max_pool(o, &mask, 2)?;
                let s = t.add(mp, xp)?;
                let n = t.l2_normalize(s)?;
                let w = t.mul(n, v[3])?;
                t.sum(w)
            },
            1e-3,
        )
        .unwrap();
        assert!(r.max_error < 1e-2, "{r:?}");
    }

    #[test]
    fn pooling_rejects_empty_mask_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([4, 2]));
        let mask = [true, false, false, false];
        assert!(matches!(tape.mean_pool(x, &mask, 2), Err(Error::Data(_))));
        assert!(matches!(tape.max_pool(x, &mask, 2), Err(Error::Data(_))));
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let target: Vec<f32> = {
            let raw = random(&[3, 3], 50);
            let mut t: Vec<f32> = raw.data().iter().map(|x| x.abs() + 0.1).collect();
            for row in t.chunks_mut(3) {
                let s: f32 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            t
        };
        let bits = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let r = gradcheck::check(
            &[
                random(&[4, 4], 51),
                random(&[2, 4], 52),
                random(&[4, 4], 53),
            ],
            |t, v| {
                let d = t.drop_diagonal(v[0])?;
                let sce = t.soft_cross_entropy(d, &{
                    let mut q = target.clone();
                    q.extend_from_slice(&target[..3]);
                    q
                })?;
                let bce = t.bce_with_logits(v[1], &bits)?;
                let g = t.gather_rows(v[2], &[3, 1, 3])?;
                let src = t.gather_rows(v[0], &[0])?;
                let ow = t.overwrite_rows(g, &[1], src)?;
                let ce = t.cross_entropy(ow, &[0, 2, 3])?;
                let dr = t.dropout(v[2], 0.3, SeedKey::new(5), true)?;
                let m = t.mean(dr)?;
                let a = t.add(sce, bce)?;
                let b = t.sub(ce, m)?;
                t.add(a, b)
            },
            1e-3,
        )
        .unwrap();
        assert!(r.max_error < 1e-2, "{r:?}");
    }

    #[test]
    fn nonfinite_values_are_reported() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new([2], vec![f32::MAX, f32::MAX]).unwrap());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        assert!(matches!(tape.check_finite(), Err(Error::Numeric(_))));
        assert!(matches!(tape.backward(s), Err(Error::Numeric(_))));
    }
}
