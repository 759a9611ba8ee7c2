//! Half-precision round trip of stored embeddings.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub rows: usize,
    pub dim: usize,
    pub max_abs_error: f64,
    /// Largest `|cos(original, round trip) − 1|`; zero rows count as exact.
    pub max_cos_deviation: f64,
}

/// Convert f32 → f16 → f32 and measure the damage.
pub fn quantize_roundtrip(emb: &Tensor) -> Result<QuantReport> {
    let (rows, dim) = emb.as_matrix();
    if !emb.all_finite() {
        return Err(Error::Numeric("embeddings contain non-finite values".into()));
    }
    let limit = f16::MAX.to_f32();
    let over: Vec<usize> = (0..rows).filter(|&r| emb.row(r).iter().any(|x| x.abs() > limit)).collect();
    if !over.is_empty() {
        return Err(Error::Overflow { rows: over });
    }
    let mut max_abs = 0.0f64;
    let mut max_cos = 0.0f64;
    for r in 0..rows {
        let orig = emb.row(r);
        let back: Vec<f32> = orig.iter().map(|&x| f16::from_f32(x).to_f32()).collect();
        for (a, b) in orig.iter().zip(&back) {
            max_abs = max_abs.max((a - b).abs() as f64);
        }
        if orig.iter().any(|&x| x != 0.0) {
            max_cos = max_cos.max((cosine(orig, &back) - 1.0).abs());
        }
    }
    Ok(QuantReport { rows, dim, max_abs_error: max_abs, max_cos_deviation: max_cos })
}

/// `n` Gaussian rows normalized to unit length.
pub fn random_unit_embeddings(n: usize, dim: usize, seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = crate::rng::SeedKey::new(seed).split(crate::rng::label("unit-embeddings")).rng();
    let data: Vec<f32> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut t = Tensor::new([n, dim], data).expect("shape matches data");
    crate::tensor::normalize_rows(&mut t);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rows_have_zero_error() {
        let r = quantize_roundtrip(&Tensor::zeros([3, 8])).unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        assert_eq!(r.max_cos_deviation, 0.0);
    }

    #[test]
    fn unit_embeddings_survive_half_precision() {
        for dim in [64, 256] {
            let r = quantize_roundtrip(&random_unit_embeddings(1000, dim, 5)).unwrap();
            assert!(r.max_cos_deviation < 1e-3, "{r:?}");
            // Half precision keeps 11 significant bits; |x| < 1 rounds by at most 2^-12.
            assert!(r.max_abs_error <= 2f64.powi(-12), "{r:?}");
        }
    }

    #[test]
    fn out_of_range_values_name_their_rows() {
        let mut t = Tensor::zeros([4, 2]);
        t.data_mut()[3] = 1e6;
        t.data_mut()[6] = -7e4;
        match quantize_roundtrip(&t) {
            Err(Error::Overflow { rows }) => assert_eq!(rows, vec![1, 3]),
            other => panic!("{other:?}"),
        }
        t.data_mut()[3] = f32::NAN;
        assert!(matches!(quantize_roundtrip(&t), Err(Error::Numeric(_))));
    }
}
