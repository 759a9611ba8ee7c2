//! Evaluation regimes, training-recipe orchestration and reporting.

pub mod ablation;
pub mod config;
pub mod finetune;
pub mod probe;
pub mod quantize;
pub mod report;
pub mod zero_shot;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::encoder::{Checkpoint, Pooling};
use crate::error::Result;
use crate::tensor::Tensor;

/// Anything that maps sentences to vectors.
pub trait Embedder {
    fn dim(&self) -> usize;

    /// One row per text, not normalized.
    fn embed(&self, texts: &[String], pooling: Pooling) -> Result<Tensor>;
}

impl Embedder for Checkpoint {
    fn dim(&self) -> usize {
        self.embedding_dim()
    }

    fn embed(&self, texts: &[String], pooling: Pooling) -> Result<Tensor> {
        let pooled = self
            .model
            .embed_sentences(self.vocab()?, pooling, texts, false)?;
        match &self.head {
            None => Ok(pooled),
            Some(w) => project(&pooled, w),
        }
    }
}

/// `x · w` for row-major matrices.
pub fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, k) = x.as_matrix();
    let (k2, m) = w.as_matrix();
    if k != k2 {
        return Err(crate::Error::Dimension(format!(
            "project: {n}×{k} by {k2}×{m}"
        )));
    }
    let mut out = vec![0.0; n * m];
    crate::kernels::gemm(n, k, m, x.data(), false, w.data(), false, &mut out, 0.0);
    Tensor::new([n, m], out)
}

/// Gaussian vectors keyed by a hash of the text; identical texts share a vector.
#[derive(Clone, Debug)]
pub struct RandomEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for RandomEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String], _pooling: Pooling) -> Result<Tensor> {
        let mut data = Vec::with_capacity(texts.len() * self.dim);
        for t in texts {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(t.as_bytes());
            let seed: [u8; 32] = h.finalize().into();
            let mut rng = ChaCha8Rng::from_seed(seed);
            data.extend((0..self.dim).map(|_| {
                let x: f32 = StandardNormal.sample(&mut rng);
                x
            }));
        }
        Tensor::new([texts.len(), self.dim], data)
    }
}

/// Embed each distinct text once; returns the matrix and each text's row.
pub fn embed_unique<E: Embedder + ?Sized>(
    embedder: &E,
    texts: &[&str],
    pooling: Pooling,
) -> Result<(Tensor, HashMap<String, usize>)> {
    let mut index = HashMap::new();
    let mut unique = Vec::new();
    for &t in texts {
        if !index.contains_key(t) {
            index.insert(t.to_string(), unique.len());
            unique.push(t.to_string());
        }
    }
    Ok((embedder.embed(&unique, pooling)?, index))
}
