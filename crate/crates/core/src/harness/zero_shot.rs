//! Frozen-embedding evaluation: cosine similarity, no training.

use serde::{Deserialize, Serialize};

use super::{embed_unique, Embedder};
use crate::data::{CostraTriplet, QueryDocPair, Split, StsPair};
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::metrics::{self, CostraScore, MetricReport, DEFAULT_RELEVANCE_THRESHOLD};
use crate::tensor::cosine;

/// Fixed pooling, or pick the best on the STS train split.
///
/// Written as `cls`, `mean`, `max` or `auto`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PoolingChoice {
    Fixed(Pooling),
    Auto,
}

impl std::str::FromStr for PoolingChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(PoolingChoice::Auto)
        } else {
            s.parse().map(PoolingChoice::Fixed)
        }
    }
}

impl std::fmt::Display for PoolingChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolingChoice::Fixed(p) => p.fmt(f),
            PoolingChoice::Auto => f.write_str("auto"),
        }
    }
}

impl TryFrom<String> for PoolingChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PoolingChoice> for String {
    fn from(p: PoolingChoice) -> String {
        p.to_string()
    }
}

/// Spearman ×100 between cosine similarities and gold scores.
pub fn sts_spearman<E: Embedder + ?Sized>(
    embedder: &E,
    pairs: &[&StsPair],
    pooling: Pooling,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no STS pairs to score".into()));
    }
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.a.as_str(), p.b.as_str()])
        .collect();
    let (emb, idx) = embed_unique(embedder, &texts, pooling)?;
    let sims: Vec<f64> = pairs
        .iter()
        .map(|p| cosine(emb.row(idx[&p.a]), emb.row(idx[&p.b])))
        .collect();
    let gold: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    Ok(100.0 * metrics::spearman(&sims, &gold)?)
}

fn split_of(pairs: &[StsPair], split: Split) -> Vec<&StsPair> {
    pairs.iter().filter(|p| p.split == split).collect()
}

/// Train-split Spearman for every pooling and the winner. An undefined
/// correlation counts as 0; ties go to the earlier entry of `Pooling::ALL`.
pub fn select_pooling<E: Embedder + ?Sized>(
    embedder: &E,
    sts: &[StsPair],
) -> Result<(Pooling, Vec<(Pooling, f64)>)> {
    let train = split_of(sts, Split::Train);
    if train.is_empty() {
        return Err(Error::Config(
            "automatic pooling needs a train split in the STS data".into(),
        ));
    }
    let mut scores = Vec::new();
    for p in Pooling::ALL {
        let s = match sts_spearman(embedder, &train, p) {
            Err(Error::UndefinedCorrelation(_)) => 0.0,
            other => other?,
        };
        scores.push((p, s));
    }
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok((best.0, scores))
}

pub fn costra<E: Embedder + ?Sized>(
    embedder: &E,
    triplets: &[CostraTriplet],
    pooling: Pooling,
) -> Result<CostraScore> {
    let texts: Vec<&str> = triplets
        .iter()
        .flat_map(|t| [t.anchor.as_str(), t.closer.as_str(), t.farther.as_str()])
        .collect();
    let (emb, idx) = embed_unique(embedder, &texts, pooling)?;
    let rows: Vec<_> = triplets
        .iter()
        .map(|t| {
            (
                emb.row(idx[&t.anchor]),
                emb.row(idx[&t.closer]),
                emb.row(idx[&t.farther]),
            )
        })
        .collect();
    let cats: Vec<&str> = triplets.iter().map(|t| t.category.as_str()).collect();
    metrics::costra_score(&cats, &rows)
}

/// Relevance flags per query, ordered by descending score; queries keep first-seen order.
pub fn rank_queries<F>(pairs: &[QueryDocPair], mut score: F) -> Result<Vec<Vec<bool>>>
where
    F: FnMut(&[&QueryDocPair]) -> Result<Vec<f64>>,
{
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<&QueryDocPair>> = Default::default();
    for p in pairs {
        groups.entry(&p.query_id).or_insert_with(|| {
            order.push(&p.query_id);
            Vec::new()
        });
        groups
            .get_mut(p.query_id.as_str())
            .expect("inserted above")
            .push(p);
    }
    order
        .iter()
        .map(|q| {
            let g = &groups[q];
            let s = score(g)?;
            let labels: Vec<f64> = g.iter().map(|p| p.label).collect();
            Ok(metrics::rank_by_score(
                &s,
                &labels,
                DEFAULT_RELEVANCE_THRESHOLD,
            ))
        })
        .collect()
}

/// P@k ×100 ranking each query's candidates by cosine similarity.
pub fn ranking_precision<E: Embedder + ?Sized>(
    embedder: &E,
    pairs: &[QueryDocPair],
    pooling: Pooling,
    k: usize,
) -> Result<f64> {
    let texts: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.query.as_str(), p.doc.as_str()])
        .collect();
    let (emb, idx) = embed_unique(embedder, &texts, pooling)?;
    let ranked = rank_queries(pairs, |g| {
        Ok(g.iter()
            .map(|p| cosine(emb.row(idx[&p.query]), emb.row(idx[&p.doc])))
            .collect())
    })?;
    metrics::precision_at_k(&ranked, k)
}

/// Inputs of one zero-shot run; missing sets are skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroShotData<'a> {
    pub sts: Option<&'a [StsPair]>,
    pub costra: Option<&'a [CostraTriplet]>,
    pub ranking: Option<&'a [QueryDocPair]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub pooling: Pooling,
    /// Train-split scores behind an automatic choice.
    pub pooling_scores: Vec<(Pooling, f64)>,
    pub metrics: Vec<MetricReport>,
}

pub const RANKING_K: usize = 10;

/// STS Spearman on the test split, Costra accuracy and P@10.
pub fn run_zero_shot<E: Embedder + ?Sized>(
    embedder: &E,
    data: ZeroShotData,
    pooling: PoolingChoice,
) -> Result<ZeroShotResult> {
    let (pooling, pooling_scores) = match pooling {
        PoolingChoice::Fixed(p) => (p, Vec::new()),
        PoolingChoice::Auto => {
            let sts = data
                .sts
                .ok_or_else(|| Error::Config("automatic pooling needs STS data".into()))?;
            select_pooling(embedder, sts)?
        }
    };
    let mut out = Vec::new();
    if let Some(sts) = data.sts {
        let test = split_of(sts, Split::Test);
        out.push(MetricReport::new(
            "sts-test spearman",
            sts_spearman(embedder, &test, pooling)?,
            test.len(),
        ));
    }
    if let Some(c) = data.costra {
        let s = costra(embedder, c, pooling)?;
        for (cat, v) in &s.per_category {
            out.push(MetricReport::new(format!("costra {cat}"), *v, s.n));
        }
        out.push(MetricReport::new("costra average", s.average, s.n));
    }
    if let Some(r) = data.ranking {
        out.push(MetricReport::new(
            format!("ranking P@{RANKING_K}"),
            ranking_precision(embedder, r, pooling, RANKING_K)?,
            r.len(),
        ));
    }
    Ok(ZeroShotResult {
        pooling,
        pooling_scores,
        metrics: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Fixed vectors looked up by text.
    struct Table(Vec<(&'static str, Vec<f32>)>);

    impl Embedder for Table {
        fn dim(&self) -> usize {
            self.0[0].1.len()
        }
        fn embed(&self, texts: &[String], pooling: Pooling) -> Result<Tensor> {
            let rows: Vec<Vec<f32>> = texts
                .iter()
                .map(|t| {
                    let v = &self.0.iter().find(|(k, _)| k == t).expect("known text").1;
                    match pooling {
                        // CLS is constant, MEAN informative, MAX reversed.
                        Pooling::Cls => vec![1.0, 0.0],
                        Pooling::Mean => v.clone(),
                        Pooling::Max => vec![v[1], v[0]],
                    }
                })
                .collect();
            Ok(Tensor::from_rows(&rows))
        }
    }

    fn pair(a: &str, b: &str, score: f64, split: Split) -> StsPair {
        StsPair {
            a: a.into(),
            b: b.into(),
            score,
            split,
        }
    }

    fn table() -> Table {
        Table(vec![
            ("a", vec![1.0, 0.0]),
            ("b", vec![1.0, 0.1]),
            ("c", vec![1.0, 1.0]),
            ("d", vec![0.0, 1.0]),
        ])
    }

    #[test]
    fn auto_pooling_picks_the_informative_reduction() {
        let sts = vec![
            pair("a", "b", 5.0, Split::Train),
            pair("a", "c", 3.0, Split::Train),
            pair("a", "d", 0.0, Split::Train),
            pair("b", "d", 1.0, Split::Test),
            pair("a", "b", 4.0, Split::Test),
        ];
        let (p, scores) = select_pooling(&table(), &sts).unwrap();
        assert_eq!(p, Pooling::Mean);
        assert_eq!(scores[0], (Pooling::Cls, 0.0));
        let r = run_zero_shot(
            &table(),
            ZeroShotData {
                sts: Some(&sts),
                ..Default::default()
            },
            PoolingChoice::Auto,
        )
        .unwrap();
        assert_eq!(r.pooling, Pooling::Mean);
        assert_eq!(r.metrics[0].name, "sts-test spearman");
        assert!((r.metrics[0].value - 100.0).abs() < 1e-9);
    }

    #[test]
    fn auto_pooling_ties_go_to_cls() {
        let sts = vec![
            pair("a", "a", 1.0, Split::Train),
            pair("d", "d", 2.0, Split::Train),
        ];
        assert_eq!(select_pooling(&table(), &sts).unwrap().0, Pooling::Cls);
    }

    #[test]
    fn auto_pooling_without_train_split_is_a_config_error() {
        let sts = vec![
            pair("a", "b", 1.0, Split::Test),
            pair("a", "c", 2.0, Split::Test),
        ];
        assert!(matches!(
            select_pooling(&table(), &sts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ranking_groups_by_query_in_first_seen_order() {
        let q = |id: &str, doc: &str, label: f64| QueryDocPair {
            query_id: id.into(),
            query: "a".into(),
            doc: doc.into(),
            label,
        };
        let pairs = vec![
            q("2", "d", 0.0),
            q("1", "c", 1.0),
            q("2", "b", 1.0),
            q("1", "d", 0.0),
        ];
        let ranked = rank_queries(&pairs, |g| {
            Ok(g.iter()
                .map(|p| if p.doc == "b" { 0.9 } else { 0.1 })
                .collect())
        })
        .unwrap();
        assert_eq!(ranked, vec![vec![true, false], vec![true, false]]);
        assert_eq!(
            ranking_precision(&table(), &pairs, Pooling::Mean, 1).unwrap(),
            100.0
        );
    }

    #[test]
    fn costra_through_embedder() {
        let t = vec![CostraTriplet {
            anchor: "a".into(),
            closer: "b".into(),
            farther: "d".into(),
            category: "time".into(),
        }];
        let s = costra(&table(), &t, Pooling::Mean).unwrap();
        assert_eq!(s.average, 100.0);
        assert_eq!(costra(&table(), &t, Pooling::Max).unwrap().average, 100.0);
    }
}
