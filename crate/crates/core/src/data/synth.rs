//! Seeded generator of a desk-scale evaluation suite with known ground truth.
//!
//! Sentences are bags of latent concepts. Every concept has several
//! synonymous surface words, so surface overlap only partly reveals meaning
//! and a model has to learn from co-occurrence that synonyms are
//! interchangeable. Concepts belong to topics, and topics are split into
//! subgroups that tend to co-occur.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::{CostraTriplet, LabeledDoc, ParallelPair, QueryDocPair, Split, StsPair};
use crate::error::{Error, Result};
use crate::metrics::COSTRA_CATEGORIES;
use crate::rng::{label, SeedKey};

pub const TOPICS: usize = 8;
pub const SUBGROUPS: usize = 3;
pub const CONCEPTS_PER_SUBGROUP: usize = 4;
pub const SYNONYMS: usize = 3;
pub const CANDIDATES_PER_QUERY: usize = 30;
pub const RELEVANT_PER_QUERY: usize = 12;
pub const PARTIAL_PER_QUERY: usize = 8;
/// Number of sentiment classes (negative, neutral, positive).
pub const SENTIMENT_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub corpus: usize,
    pub sts: usize,
    /// Fraction of STS pairs in the train split, in percent.
    pub sts_train_percent: usize,
    pub costra: usize,
    pub topic_docs: usize,
    pub sentiment_docs: usize,
    pub train_queries: usize,
    pub test_queries: usize,
    pub parallel: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            corpus: 4000,
            sts: 1500,
            sts_train_percent: 30,
            costra: 400,
            topic_docs: 400,
            sentiment_docs: 450,
            train_queries: 200,
            test_queries: 60,
            parallel: 600,
        }
    }
}

/// Surface vocabulary and its hidden meaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    /// Surface forms of each concept.
    pub concepts: Vec<Vec<String>>,
    pub function_words: Vec<String>,
    pub past: String,
    pub future: String,
    pub negation: String,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    /// Word-by-word translation into the second language.
    pub translation: Vec<(String, String)>,
}

impl Lexicon {
    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn topic_of(concept: usize) -> usize {
        concept / (SUBGROUPS * CONCEPTS_PER_SUBGROUP)
    }

    pub fn subgroup_of(concept: usize) -> usize {
        concept / CONCEPTS_PER_SUBGROUP
    }

    fn subgroup_concepts(subgroup: usize) -> std::ops::Range<usize> {
        subgroup * CONCEPTS_PER_SUBGROUP..(subgroup + 1) * CONCEPTS_PER_SUBGROUP
    }

    fn topic_concepts(topic: usize) -> std::ops::Range<usize> {
        let n = SUBGROUPS * CONCEPTS_PER_SUBGROUP;
        topic * n..(topic + 1) * n
    }

    fn word_index(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for (c, forms) in self.concepts.iter().enumerate() {
            for f in forms {
                m.insert(f.as_str(), c);
            }
        }
        m
    }

    /// Latent concepts mentioned in `text`.
    pub fn concept_set(&self, text: &str) -> BTreeSet<usize> {
        let index = self.word_index();
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .filter_map(|w| index.get(w.to_lowercase().as_str()).copied())
            .collect()
    }

    /// Jaccard overlap of latent concepts: the generator's hidden similarity.
    pub fn concept_overlap(&self, a: &str, b: &str) -> f64 {
        jaccard(&self.concept_set(a), &self.concept_set(b))
    }

    /// Frozen teacher: unit sum of one fixed Gaussian direction per mentioned concept.
    ///
    /// Texts without concepts share a single extra direction.
    pub fn teacher_embeddings<S: AsRef<str>>(&self, texts: &[S], dim: usize, seed: u64) -> crate::Tensor {
        let mut rng = SeedKey::new(seed).split(label("teacher")).rng();
        let normal = Normal::new(0.0f32, 1.0).expect("valid normal");
        let dirs: Vec<Vec<f32>> = (0..=self.concept_count())
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut data = Vec::with_capacity(texts.len() * dim);
        for t in texts {
            let concepts = self.concept_set(t.as_ref());
            let mut row = vec![0.0f32; dim];
            let ids: Vec<usize> = if concepts.is_empty() { vec![self.concept_count()] } else { concepts.into_iter().collect() };
            for c in ids {
                row.iter_mut().zip(&dirs[c]).for_each(|(r, d)| *r += d);
            }
            data.extend(row);
        }
        let mut t = crate::Tensor::new([texts.len(), dim], data).expect("shape matches data");
        crate::tensor::normalize_rows(&mut t);
        t
    }

    pub fn translate(&self, text: &str) -> String {
        let map: HashMap<&str, &str> = self
            .translation
            .iter()
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect();
        let mut out = String::with_capacity(text.len());
        let mut word = String::new();
        let flush = |word: &mut String, out: &mut String| {
            if word.is_empty() {
                return;
            }
            let lower = word.to_lowercase();
            let t = map.get(lower.as_str()).copied().unwrap_or(lower.as_str());
            if word.chars().next().is_some_and(char::is_uppercase) {
                out.push_str(&capitalize(t));
            } else {
                out.push_str(t);
            }
            word.clear();
        };
        for c in text.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                flush(&mut word, &mut out);
                out.push(c);
            }
        }
        flush(&mut word, &mut out);
        out
    }
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct WordMaker {
    onsets: &'static [&'static str],
    vowels: &'static [&'static str],
    used: HashSet<String>,
}

impl WordMaker {
    fn make(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        self.onsets.choose(rng).unwrap(),
                        self.vowels.choose(rng).unwrap()
                    )
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn make_lexicon(rng: &mut ChaCha8Rng) -> Lexicon {
    let mut src = WordMaker {
        onsets: &[
            "b", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
        ],
        vowels: &["a", "e", "i", "o", "u"],
        used: HashSet::new(),
    };
    let concepts: Vec<Vec<String>> = (0..TOPICS * SUBGROUPS * CONCEPTS_PER_SUBGROUP)
        .map(|_| (0..SYNONYMS).map(|_| src.make(rng)).collect())
        .collect();
    let function_words: Vec<String> = (0..12).map(|_| src.make(rng)).collect();
    let past = src.make(rng);
    let future = src.make(rng);
    let negation = src.make(rng);
    let positive: Vec<String> = (0..6).map(|_| src.make(rng)).collect();
    let negative: Vec<String> = (0..6).map(|_| src.make(rng)).collect();

    let mut tgt = WordMaker {
        onsets: &[
            "č", "š", "ř", "ž", "tr", "kl", "st", "pr", "ch", "br", "dv", "sk",
        ],
        vowels: &["á", "é", "í", "ú", "y", "o"],
        used: HashSet::new(),
    };
    let all_src = concepts
        .iter()
        .flatten()
        .chain(&function_words)
        .chain([&past, &future, &negation])
        .chain(&positive)
        .chain(&negative);
    let translation = all_src.map(|w| (w.clone(), tgt.make(rng))).collect();
    Lexicon {
        concepts,
        function_words,
        past,
        future,
        negation,
        positive,
        negative,
        translation,
    }
}

/// A sentence before rendering: concepts with chosen surface forms plus extra words.
#[derive(Clone, Debug)]
struct Draft {
    words: Vec<(usize, usize)>,
    extra: Vec<String>,
}

struct Generator {
    lex: Lexicon,
    rng: ChaCha8Rng,
    function_word: WeightedIndex<f64>,
}

impl Generator {
    fn form(&mut self) -> usize {
        self.rng.gen_range(0..SYNONYMS)
    }

    fn draft(&mut self, concepts: &[usize]) -> Draft {
        let words = concepts.iter().map(|&c| (c, self.form())).collect();
        Draft {
            words,
            extra: Vec::new(),
        }
    }

    fn render(&mut self, d: &Draft) -> String {
        let mut tokens: Vec<String> = d
            .words
            .iter()
            .map(|&(c, f)| self.lex.concepts[c][f].clone())
            .collect();
        tokens.extend(d.extra.iter().cloned());
        tokens.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(tokens.len() * 2);
        for t in tokens {
            if self.rng.gen_bool(0.4) {
                let i = self.function_word.sample(&mut self.rng);
                out.push(self.lex.function_words[i].clone());
            }
            out.push(t);
        }
        format!("{}.", capitalize(&out.join(" ")))
    }

    fn pick_from(
        &mut self,
        range: std::ops::Range<usize>,
        n: usize,
        exclude: &[usize],
    ) -> Vec<usize> {
        let pool: Vec<usize> = range.filter(|c| !exclude.contains(c)).collect();
        pool.choose_multiple(&mut self.rng, n.min(pool.len()))
            .copied()
            .collect()
    }

    /// Concepts mostly from one subgroup, topped up from the same topic.
    fn topical_concepts(&mut self, topic: usize, n: usize) -> Vec<usize> {
        let sub = topic * SUBGROUPS + self.rng.gen_range(0..SUBGROUPS);
        let core = self.rng.gen_range(2..=n.min(CONCEPTS_PER_SUBGROUP));
        let mut cs = self.pick_from(Lexicon::subgroup_concepts(sub), core, &[]);
        let rest = self.pick_from(Lexicon::topic_concepts(topic), n - cs.len(), &cs);
        cs.extend(rest);
        cs
    }

    fn corpus_sentence(&mut self) -> String {
        let topic = self.rng.gen_range(0..TOPICS);
        let n = self.rng.gen_range(3..=6);
        let mut cs = self.topical_concepts(topic, n);
        if self.rng.gen_bool(0.2) {
            let other = (topic + self.rng.gen_range(1..TOPICS)) % TOPICS;
            let c = self.pick_from(Lexicon::topic_concepts(other), 1, &[]);
            *cs.last_mut().unwrap() = c[0];
        }
        let d = self.draft(&cs);
        self.render(&d)
    }

    /// Replacement concept: same subgroup, same topic or another topic with equal odds.
    fn replacement(&mut self, anchor: usize, exclude: &[usize]) -> usize {
        let topic = Lexicon::topic_of(anchor);
        let range = match self.rng.gen_range(0..3) {
            0 => Lexicon::subgroup_concepts(Lexicon::subgroup_of(anchor)),
            1 => Lexicon::topic_concepts(topic),
            _ => Lexicon::topic_concepts((topic + self.rng.gen_range(1..TOPICS)) % TOPICS),
        };
        let picked = self.pick_from(range, 1, exclude);
        picked
            .first()
            .copied()
            .unwrap_or_else(|| self.pick_from(0..self.lex.concept_count(), 1, exclude)[0])
    }

    fn sts_pair(&mut self, noise: &Normal<f64>, split: Split) -> StsPair {
        let topic = self.rng.gen_range(0..TOPICS);
        let na = self.rng.gen_range(3..=6);
        let a = self.topical_concepts(topic, na);
        let keep = self.rng.gen_range(0..=na);
        let mut b: Vec<usize> = a.choose_multiple(&mut self.rng, keep).copied().collect();
        let nb = self.rng.gen_range(keep.max(3)..=6.max(keep));
        while b.len() < nb {
            let anchor = *a.choose(&mut self.rng).unwrap();
            let mut exclude = a.clone();
            exclude.extend(&b);
            b.push(self.replacement(anchor, &exclude));
        }
        let (da, db) = (self.draft(&a), self.draft(&b));
        let (ta, tb) = (self.render(&da), self.render(&db));
        let sa: BTreeSet<usize> = a.iter().copied().collect();
        let sb: BTreeSet<usize> = b.iter().copied().collect();
        let score = (5.0 * jaccard(&sa, &sb) + noise.sample(&mut self.rng)).clamp(0.0, 5.0);
        StsPair {
            a: ta,
            b: tb,
            score,
            split,
        }
    }

    fn replace_some(&mut self, d: &Draft, n: usize) -> Draft {
        let mut out = d.clone();
        let idx: Vec<usize> = (0..d.words.len()).collect();
        let chosen: Vec<usize> = idx
            .choose_multiple(&mut self.rng, n.min(d.words.len()))
            .copied()
            .collect();
        let mut used: Vec<usize> = d.words.iter().map(|w| w.0).collect();
        for i in chosen {
            let c = self.replacement(d.words[i].0, &used);
            used.push(c);
            out.words[i] = (c, self.form());
        }
        out
    }

    fn costra(&mut self, category: &str) -> CostraTriplet {
        let topic = self.rng.gen_range(0..TOPICS);
        let n = self.rng.gen_range(4..=6);
        let cs = self.topical_concepts(topic, n);
        let base = self.draft(&cs);
        let half = n.div_ceil(2);
        let (anchor, closer, farther) = match category {
            "time" => {
                let mut a = base.clone();
                a.extra.push(self.lex.past.clone());
                let mut c = base.clone();
                c.extra.push(self.lex.future.clone());
                let f = self.replace_some(&a, half);
                (a, c, f)
            }
            "style" => {
                let mut c = base.clone();
                for w in &mut c.words {
                    w.1 = (w.1 + 1 + self.rng.gen_range(0..SYNONYMS - 1)) % SYNONYMS;
                }
                let f = self.replace_some(&base, half);
                (base, c, f)
            }
            "generalization" => {
                let mut c = base.clone();
                let drop = self.rng.gen_range(0..c.words.len());
                c.words.remove(drop);
                let f = self.replace_some(&base, half + 1);
                (base, c, f)
            }
            _ => {
                let mut c = base.clone();
                c.extra.push(self.lex.negation.clone());
                let f = self.replace_some(&base, half);
                (base, c, f)
            }
        };
        CostraTriplet {
            anchor: self.render(&anchor),
            closer: self.render(&closer),
            farther: self.render(&farther),
            category: category.to_string(),
        }
    }

    fn topic_doc(&mut self) -> LabeledDoc {
        let k = self.rng.gen_range(1..=3);
        let topics: Vec<usize> = (0..TOPICS)
            .collect::<Vec<_>>()
            .choose_multiple(&mut self.rng, k)
            .copied()
            .collect();
        let sentences = self.rng.gen_range(k.max(2)..=4.max(k));
        let mut parts = Vec::with_capacity(sentences);
        for s in 0..sentences {
            let t = if s < k {
                topics[s]
            } else {
                *topics.choose(&mut self.rng).unwrap()
            };
            let n = self.rng.gen_range(3..=5);
            let cs = self.topical_concepts(t, n);
            let d = self.draft(&cs);
            parts.push(self.render(&d));
        }
        parts.shuffle(&mut self.rng);
        let mut labels = topics;
        labels.sort_unstable();
        LabeledDoc {
            text: parts.join(" "),
            labels,
        }
    }

    fn sentiment_doc(&mut self, class: usize) -> LabeledDoc {
        let sentences = self.rng.gen_range(1..=2);
        let mut parts = Vec::with_capacity(sentences);
        for s in 0..sentences {
            let topic = self.rng.gen_range(0..TOPICS);
            let n = self.rng.gen_range(3..=5);
            let cs = self.topical_concepts(topic, n);
            let mut d = self.draft(&cs);
            if s == 0 && class != 1 {
                let pool = if class == 2 {
                    &self.lex.positive
                } else {
                    &self.lex.negative
                };
                let pool = pool.clone();
                let m = self.rng.gen_range(1..=2);
                d.extra
                    .extend(pool.choose_multiple(&mut self.rng, m).cloned());
            }
            parts.push(self.render(&d));
        }
        LabeledDoc {
            text: parts.join(" "),
            labels: vec![class],
        }
    }

    fn query(&mut self, id: String) -> Vec<QueryDocPair> {
        let topic = self.rng.gen_range(0..TOPICS);
        let sub = topic * SUBGROUPS + self.rng.gen_range(0..SUBGROUPS);
        let q = self.pick_from(Lexicon::subgroup_concepts(sub), 2, &[]);
        let query = {
            let d = self.draft(&q);
            d.words
                .iter()
                .map(|&(c, f)| self.lex.concepts[c][f].clone())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut docs = Vec::with_capacity(CANDIDATES_PER_QUERY);
        for i in 0..CANDIDATES_PER_QUERY {
            let (cs, label) = if i < RELEVANT_PER_QUERY {
                let n = self.rng.gen_range(2..=3);
                let mut cs = q.clone();
                cs.extend(self.pick_from(Lexicon::topic_concepts(topic), n, &q));
                (cs, 1.0)
            } else if i < RELEVANT_PER_QUERY + PARTIAL_PER_QUERY {
                let mut cs = vec![q[i % 2]];
                cs.extend(self.pick_from(Lexicon::topic_concepts(topic), 3, &q));
                (cs, 0.3)
            } else {
                let t = if i % 2 == 0 {
                    topic
                } else {
                    (topic + self.rng.gen_range(1..TOPICS)) % TOPICS
                };
                (self.pick_from(Lexicon::topic_concepts(t), 4, &q), 0.0)
            };
            let d = self.draft(&cs);
            docs.push((self.render(&d), label));
        }
        docs.shuffle(&mut self.rng);
        docs.into_iter()
            .map(|(doc, label)| QueryDocPair {
                query_id: id.clone(),
                query: query.clone(),
                doc,
                label,
            })
            .collect()
    }
}

/// Everything the harness needs, generated from one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSuite {
    pub lexicon: Lexicon,
    pub corpus: Vec<String>,
    pub sts: Vec<StsPair>,
    pub costra: Vec<CostraTriplet>,
    pub topic_docs: Vec<LabeledDoc>,
    pub sentiment_docs: Vec<LabeledDoc>,
    pub ranking_train: Vec<QueryDocPair>,
    pub ranking_test: Vec<QueryDocPair>,
    pub parallel: Vec<ParallelPair>,
}

impl SynthSuite {
    pub fn topic_count(&self) -> usize {
        TOPICS
    }

    /// Write every dataset as JSONL (plus the corpus as plain text) into `dir`.
    pub fn write_to(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("corpus.txt"), self.corpus.join("\n") + "\n")?;
        super::write_jsonl(&dir.join("sts.jsonl"), &self.sts)?;
        super::write_jsonl(&dir.join("costra.jsonl"), &self.costra)?;
        super::write_jsonl(&dir.join("topics.jsonl"), &self.topic_docs)?;
        super::write_jsonl(&dir.join("sentiment.jsonl"), &self.sentiment_docs)?;
        super::write_jsonl(&dir.join("ranking_train.jsonl"), &self.ranking_train)?;
        super::write_jsonl(&dir.join("ranking_test.jsonl"), &self.ranking_test)?;
        super::write_jsonl(&dir.join("parallel.jsonl"), &self.parallel)?;
        std::fs::write(
            dir.join("lexicon.json"),
            serde_json::to_vec_pretty(&self.lexicon)?,
        )?;
        Ok(())
    }
}

/// Generate the full suite; identical `(seed, sizes)` give identical suites.
pub fn make_synthetic_suite(seed: u64, sizes: &SynthSizes) -> Result<SynthSuite> {
    if sizes.sts < 2
        || sizes.sts_train_percent > 100
        || sizes.train_queries == 0
        || sizes.test_queries == 0
    {
        return Err(Error::Parameter(format!(
            "invalid synthetic sizes {sizes:?}"
        )));
    }
    let key = SeedKey::new(seed);
    let lex = make_lexicon(&mut key.split(label("lexicon")).rng());
    let zipf = (0..lex.function_words.len()).map(|i| 1.0 / (i + 1) as f64);
    let mut g = Generator {
        lex,
        rng: key.split(label("corpus")).rng(),
        function_word: WeightedIndex::new(zipf).expect("positive weights"),
    };
    let corpus = (0..sizes.corpus).map(|_| g.corpus_sentence()).collect();

    g.rng = key.split(label("sts")).rng();
    let noise = Normal::new(0.0, 0.15).expect("valid normal");
    let n_train = sizes.sts * sizes.sts_train_percent / 100;
    let sts = (0..sizes.sts)
        .map(|i| {
            g.sts_pair(
                &noise,
                if i < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            )
        })
        .collect();

    g.rng = key.split(label("costra")).rng();
    let costra = (0..sizes.costra)
        .map(|i| g.costra(COSTRA_CATEGORIES[i % 4]))
        .collect();

    g.rng = key.split(label("topic-docs")).rng();
    let topic_docs = (0..sizes.topic_docs).map(|_| g.topic_doc()).collect();

    g.rng = key.split(label("sentiment-docs")).rng();
    let sentiment_docs = (0..sizes.sentiment_docs)
        .map(|i| g.sentiment_doc(i % SENTIMENT_CLASSES))
        .collect();

    g.rng = key.split(label("ranking")).rng();
    let ranking_train = (0..sizes.train_queries)
        .flat_map(|i| g.query(format!("train-{i:04}")))
        .collect();
    let ranking_test = (0..sizes.test_queries)
        .flat_map(|i| g.query(format!("test-{i:04}")))
        .collect();

    g.rng = key.split(label("parallel")).rng();
    let parallel = (0..sizes.parallel)
        .map(|_| {
            let src = g.corpus_sentence();
            let tgt = g.lex.translate(&src);
            ParallelPair { src, tgt }
        })
        .collect();

    Ok(SynthSuite {
        lexicon: g.lex,
        corpus,
        sts,
        costra,
        topic_docs,
        sentiment_docs,
        ranking_train,
        ranking_test,
        parallel,
    })
}
