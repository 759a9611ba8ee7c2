//! Ranking fine-tuning on growing random subsets of the training split.

use serde::{Deserialize, Serialize};

use crate::encoder::Checkpoint;
use crate::data::{subset, QueryDocPair};
use crate::error::{Error, Result};
use crate::metrics::FoldSummary;
use crate::rng::derive;

use super::finetune::{run_finetune_ranking, FinetuneConfig, RankingLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub init: String,
    pub size: usize,
    pub mean: f64,
    pub stddev: f64,
    /// P@10 of each repeat.
    pub scores: Vec<f64>,
}

/// Fine-tune every init on every subset size, `repeats` times, and score P@10 on `test`.
///
/// Repeat `r` draws its subsets with one seed for all sizes, so they nest.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    inits: &[(String, Checkpoint)],
    train: &[QueryDocPair],
    test: &[QueryDocPair],
    sizes: &[usize],
    repeats: usize,
    loss: RankingLoss,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<AblationPoint>> {
    if repeats == 0 {
        return Err(Error::Parameter("repeats must be at least 1".into()));
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter(format!("sizes must be strictly ascending, got {sizes:?}")));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > train.len()) {
        return Err(Error::Parameter(format!("size {s} exceeds the {} training pairs", train.len())));
    }
    let mut out = Vec::new();
    for (name, ck) in inits {
        for &size in sizes {
            let mut scores = Vec::with_capacity(repeats);
            for r in 0..repeats {
                let sub = subset(train, size, derive(seed, &[r as u64]))?;
                let run_cfg = FinetuneConfig { seed: derive(cfg.seed, &[r as u64]), ..cfg.clone() };
                scores.push(run_finetune_ranking(ck, &sub, test, loss, &run_cfg, false)?.precision);
            }
            let s = FoldSummary::from_scores(scores);
            out.push(AblationPoint { init: name.clone(), size, mean: s.mean, stddev: s.stddev, scores: s.scores });
        }
    }
    Ok(out)
}

/// `init,size,mean,stddev` with one line per point.
pub fn ablation_csv(points: &[AblationPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record(["init", "size", "mean", "stddev"]).map_err(err)?;
    for p in points {
        w.write_record([p.init.clone(), p.size.to_string(), p.mean.to_string(), p.stddev.to_string()]).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Points of one init in ascending size order.
pub fn curve<'a>(points: &'a [AblationPoint], init: &str) -> Vec<&'a AblationPoint> {
    let mut c: Vec<&AblationPoint> = points.iter().filter(|p| p.init == init).collect();
    c.sort_by_key(|p| p.size);
    c
}

/// Non-decreasing means, tolerating one drop no larger than the larger neighbouring stddev.
pub fn is_monotone_within_noise(curve: &[&AblationPoint]) -> bool {
    let mut inversions = 0;
    for w in curve.windows(2) {
        let drop = w[0].mean - w[1].mean;
        if drop > 0.0 {
            inversions += 1;
            if inversions > 1 || drop > w[0].stddev.max(w[1].stddev) {
                return false;
            }
        }
    }
    true
}

/// Whether `upper` has a strictly higher mean than `lower` at every shared size.
pub fn dominates(upper: &[&AblationPoint], lower: &[&AblationPoint]) -> bool {
    let mut shared = 0;
    for u in upper {
        if let Some(l) = lower.iter().find(|l| l.size == u.size) {
            shared += 1;
            if u.mean <= l.mean {
                return false;
            }
        }
    }
    shared > 0
}
