//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward closure; the numeric estimate is
//! independent of every backward rule it validates.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest discrepancy found by [`check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)`, maximized over all elements.
    pub max_error: f64,
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements skipped because `x ± h` crossed a max-pool switch.
    pub kinks: usize,
    /// Elements compared.
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_error < tol
    }
}

/// Error above which a central difference is refined by extrapolation.
pub const REFINE_ABOVE: f64 = 1e-3;

fn error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn run<F>(inputs: &[Tensor], f: &F) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item() as f64, tape.branch_pattern()))
}

/// Compare tape gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
///
/// The numeric estimate is the central difference `D(h)`. Where that misses the
/// tape gradient by more than [`REFINE_ABOVE`] it is replaced by the Richardson
/// combination `(4·D(h/2) − D(h)) / 3`, accurate to `O(h⁴)`.
///
/// An element whose perturbed evaluations take a different max-pool branch
/// than `x` has no valid difference quotient; it is counted in
/// [`GradCheck::kinks`] instead of compared.
pub fn check<F>(inputs: &[Tensor], f: F, h: f32) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let pattern = tape.branch_pattern();
    tape.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut worst = GradCheck {
        max_error: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        kinks: 0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for e in 0..grads.len() {
            let orig = probe[i].data()[e];
            let mut at = |step: f32| -> Result<(f64, bool)> {
                probe[i].data_mut()[e] = orig + step;
                let (up, up_pattern) = run(&probe, &f)?;
                probe[i].data_mut()[e] = orig - step;
                let (down, down_pattern) = run(&probe, &f)?;
                probe[i].data_mut()[e] = orig;
                let smooth = up_pattern == pattern && down_pattern == pattern;
                Ok(((up - down) / (2.0 * step as f64), smooth))
            };
            let a = grads[e] as f64;
            let (wide, smooth) = at(h)?;
            if !smooth {
                worst.kinks += 1;
                continue;
            }
            let mut numeric = wide;
            if error(a, numeric) > REFINE_ABOVE {
                let (narrow, smooth) = at(h / 2.0)?;
                if !smooth {
                    worst.kinks += 1;
                    continue;
                }
                numeric = (4.0 * narrow - wide) / 3.0;
            }
            worst.checked += 1;
            let err = error(a, numeric);
            if err > worst.max_error {
                worst = GradCheck { max_error: err, input: i, element: e, analytic: a, numeric, ..worst };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_functions_have_no_kinks() {
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]);
        let g = check(&[x], |t, v| {
            let y = t.gelu(v[0])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        }, 1e-3)
        .unwrap();
        assert!(g.passes(1e-3), "{g:?}");
        assert_eq!((g.kinks, g.checked), (0, 4));
    }

    #[test]
    fn max_pool_switches_are_skipped_not_compared() {
        // Column 0 is nearly tied across the two positions; column 1 is not.
        let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![1.0004, -2.0]]);
        let g = check(&[x], |t, v| {
            let p = t.max_pool(v[0], &[true, true], 1)?;
            let y = t.mul(p, p)?;
            t.sum(y)
        }, 1e-3)
        .unwrap();
        assert_eq!(g.kinks, 2);
        assert_eq!(g.checked, 2);
        assert!(g.passes(1e-3), "{g:?}");
    }
}
