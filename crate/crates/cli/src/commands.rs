use std::collections::BTreeMap;
use std::path::Path;

use embedkit::container::{read_embeddings, write_embeddings};
use embedkit::data::{
    fingerprint_file, load_jsonl, make_synthetic_suite, preprocess_corpus, CostraTriplet, LabeledDoc, ParallelPair,
    PreprocessOptions, QueryDocPair, Record, StsPair, SynthSizes,
};
use embedkit::harness::ablation::{ablation_csv, run_ablation};
use embedkit::harness::config::{ConfigLoader, FinetuneTask, RunConfig, Task};
use embedkit::harness::finetune::{run_finetune_classification, run_finetune_ranking};
use embedkit::harness::probe::{class_count, run_probe, run_probe_frozen};
use embedkit::harness::quantize::quantize_roundtrip;
use embedkit::harness::report::{DatasetRef, EvalReport, ReportMeta, ReportRow};
use embedkit::harness::zero_shot::{run_zero_shot, ZeroShotData};
use embedkit::harness::{Embedder, RandomEmbedder};
use embedkit::metrics::MetricReport;
use embedkit::objectives::{strip_projection, ProjectionHead, ShallowDecoder};
use embedkit::rng::{derive, label};
use embedkit::train::{pretrain_mlm, pretrain_retromae, train_distill, train_simcse, TrainLog};
use embedkit::{Checkpoint, EncoderModel, Error, Pooling, Result, Vocab};

use super::{Command, Objective, Regime, RunArgs, VocabCommand};

const MODEL_FILE: &str = "model.ekc";

/// Files `synth` writes, by data key.
const SUITE_FILES: [(&str, &str); 9] = [
    ("corpus", "corpus.txt"),
    ("sts", "sts.jsonl"),
    ("costra", "costra.jsonl"),
    ("topics", "topics.jsonl"),
    ("sentiment", "sentiment.jsonl"),
    ("ranking_train", "ranking_train.jsonl"),
    ("ranking_test", "ranking_test.jsonl"),
    ("parallel", "parallel.jsonl"),
    ("teacher", "teacher.emb"),
];

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, seed, small, teacher_dim } => synth(&out, seed, small, teacher_dim),
        Command::Vocab(v) => vocab(v),
        Command::Pretrain { objective, run } => {
            let task = match objective {
                Objective::Mlm => Task::PretrainMlm,
                Objective::Retromae => Task::PretrainRetromae,
            };
            pretrain(&resolve(task, run, ConfigLoader::new())?)
        }
        Command::Distill { teacher_emb, parallel, run } => {
            let mut extra = ConfigLoader::new();
            if let Some(t) = teacher_emb {
                extra = extra.data("teacher", t);
            }
            if let Some(p) = parallel {
                extra = extra.data("parallel", p);
            }
            distill(&resolve(Task::Distill, run, extra)?)
        }
        Command::Simcse { run } => simcse(&resolve(Task::FinetuneSimcse, run, ConfigLoader::new())?),
        Command::Eval { regime, run, random_baseline, head_kind, folds, task } => {
            let explicit_head = head_kind.is_some();
            let mut extra = ConfigLoader::new();
            if random_baseline {
                extra = extra.set("random_baseline", true);
            }
            if let Some(h) = head_kind {
                extra = extra.set("head_kind", h);
            }
            if let Some(f) = folds {
                extra = extra.set("folds", f);
            }
            if let Some(t) = task {
                extra = extra.set("finetune_task", t);
            }
            match regime {
                Regime::ZeroShot => zero_shot(&resolve(Task::ZeroShotEval, run, extra)?),
                Regime::Probe => probe(&resolve(Task::Probe, run, extra)?),
                Regime::Finetune => {
                    let cfg = resolve(Task::FinetuneEval, run, extra)?;
                    if explicit_head && cfg.finetune_task == FinetuneTask::Ranking {
                        return Err(Error::Contract("ranking fine-tuning scores query-document pairs and takes no classification head".into()));
                    }
                    finetune(&cfg)
                }
            }
        }
        Command::Ablate { sizes, repeats, random_init, run } => {
            let mut extra = ConfigLoader::new();
            if let Some(s) = sizes {
                extra = extra.set("sizes", s);
            }
            if let Some(r) = repeats {
                extra = extra.set("repeats", r);
            }
            ablate(&resolve(Task::AblateDatasize, run, extra)?, random_init)
        }
        Command::Quantcheck { emb, report } => quantcheck(&emb, report.as_deref()),
        Command::Embed { model, input, out, pooling, normalize } => embed(&model, &input, &out, &pooling, normalize),
        Command::Strip { model, out } => strip_projection(&Checkpoint::load(&model)?)?.save(&out),
    }
}

/// Layer the config file, environment, then command-line flags.
fn resolve(task: Task, args: RunArgs, extra: ConfigLoader) -> Result<RunConfig> {
    let mut l = match &args.config {
        Some(p) => extra.file(p)?,
        None => extra,
    };
    l = l.process_env().set("task", serde_json::to_value(task)?).paper_scale(args.paper_scale);
    if let Some(s) = args.seed {
        l = l.set("seed", s);
    }
    if let Some(r) = &args.report {
        let dir = r.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = r.file_name().ok_or_else(|| Error::Config(format!("report path {} has no file name", r.display())))?;
        l = l.set("output_dir", dir.to_string_lossy().as_ref()).set("report", name.to_string_lossy().as_ref());
    }
    if let Some(d) = &args.output_dir {
        l = l.set("output_dir", d.to_string_lossy().as_ref());
    }
    if !args.models.is_empty() {
        let paths: Vec<String> = args.models.iter().map(|p| p.to_string_lossy().into_owned()).collect();
        l = l.set("models", paths);
    }
    if let Some(v) = &args.vocab {
        l = l.set("vocab", v.to_string_lossy().as_ref());
    }
    for d in &args.data {
        match d.split_once('=') {
            Some((k, v)) => l = l.data(k, v),
            None => {
                let dir = Path::new(d);
                if !dir.is_dir() {
                    return Err(Error::Config(format!("--data {d}: expected name=path or a directory")));
                }
                for (k, f) in SUITE_FILES {
                    if dir.join(f).exists() {
                        l = l.data(k, dir.join(f));
                    }
                }
            }
        }
    }
    if let Some(p) = &args.pooling {
        l = l.set("pooling", p.as_str());
    }
    for (k, v) in [("steps", args.steps), ("epochs", args.epochs), ("batch_size", args.batch_size)] {
        if let Some(v) = v {
            l = l.set(k, v);
        }
    }
    if let Some(lr) = args.lr {
        l = l.set("lr", lr);
    }
    if let Some(t) = args.temperature {
        l = l.set("temperature", t);
    }
    l.resolve()
}

fn synth(out: &Path, seed: u64, small: bool, teacher_dim: usize) -> Result<()> {
    let sizes = if small {
        SynthSizes {
            corpus: 400,
            sts: 200,
            costra: 80,
            topic_docs: 60,
            sentiment_docs: 60,
            train_queries: 12,
            test_queries: 6,
            parallel: 60,
            ..Default::default()
        }
    } else {
        SynthSizes::default()
    };
    let suite = make_synthetic_suite(seed, &sizes)?;
    suite.write_to(out)?;
    let src: Vec<&str> = suite.parallel.iter().map(|p| p.src.as_str()).collect();
    let teacher = suite.lexicon.teacher_embeddings(&src, teacher_dim, derive(seed, &[label("teacher")]));
    write_embeddings(&out.join("teacher.emb"), &teacher, true)?;
    for (_, f) in SUITE_FILES {
        println!("{}", out.join(f).display());
    }
    Ok(())
}

fn vocab(cmd: VocabCommand) -> Result<()> {
    match cmd {
        VocabCommand::Train { corpus, size, min_freq, lowercase, out } => {
            let lines = read_corpus(&corpus)?;
            Vocab::train(&lines, size, min_freq, lowercase)?.save(&out)
        }
        VocabCommand::Merge { first, second, out } => Vocab::merge(&Vocab::load(&first)?, &Vocab::load(&second)?).save(&out),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let out = preprocess_corpus(&lines, PreprocessOptions::default());
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no usable sentences", path.display())));
    }
    Ok(out)
}

fn records<R: Record>(cfg: &RunConfig, name: &str) -> Result<Vec<R>> {
    let loaded = load_jsonl(cfg.data_path(name)?)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded.records)
}

fn optional<R: Record>(cfg: &RunConfig, name: &str) -> Result<Option<Vec<R>>> {
    if cfg.data.contains_key(name) {
        records(cfg, name).map(Some)
    } else {
        Ok(None)
    }
}

fn dataset_refs(cfg: &RunConfig, names: &[&str]) -> Result<Vec<DatasetRef>> {
    names
        .iter()
        .filter_map(|n| cfg.data.get(*n).map(|p| (n, p)))
        .map(|(n, p)| Ok(DatasetRef { name: n.to_string(), fingerprint: fingerprint_file(p)? }))
        .collect()
}

fn write_report(cfg: &RunConfig, title: &str, rows: Vec<ReportRow>) -> Result<()> {
    let report = EvalReport { title: title.to_string(), rows, meta: ReportMeta::for_config(cfg)? };
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.report_path();
    report.write(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn first_model(cfg: &RunConfig) -> Result<Option<Checkpoint>> {
    cfg.models.first().map(|p| Checkpoint::load(p)).transpose()
}

fn require_model(cfg: &RunConfig) -> Result<Checkpoint> {
    first_model(cfg)?.ok_or_else(|| Error::Config(format!("task {:?} needs an input model", cfg.task)))
}

/// Vocabulary from the config, else the input model, else learned from `texts`.
fn vocab_for(cfg: &RunConfig, init: Option<&Checkpoint>, texts: &[String]) -> Result<Vocab> {
    if let Some(p) = &cfg.vocab {
        return Vocab::load(p);
    }
    if let Some(v) = init.and_then(|c| c.vocab.clone()) {
        return Ok(v);
    }
    Vocab::train(texts, cfg.vocab_size, cfg.min_freq, cfg.lowercase)
}

fn encoder_for(cfg: &RunConfig, init: Option<Checkpoint>, vocab: &Vocab) -> Result<EncoderModel> {
    match init {
        Some(ck) => {
            if ck.model.config.vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "model expects {} vocabulary entries, vocabulary has {}",
                    ck.model.config.vocab_size,
                    vocab.len()
                )));
            }
            Ok(ck.model)
        }
        None => EncoderModel::init(cfg.encoder(vocab.len()), derive(cfg.seed, &[label("encoder-init")])),
    }
}

fn training_row(name: &str, cfg: &RunConfig, log: &TrainLog, datasets: Vec<DatasetRef>) -> Result<ReportRow> {
    if log.losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    let n = log.losses.len();
    let tail = &log.losses[n - (n / 10).max(1).min(n)..];
    let mean = |xs: &[f32]| xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len().max(1) as f64;
    let first = &log.losses[..(n / 10).max(1).min(n)];
    Ok(ReportRow {
        model: name.to_string(),
        seed: cfg.seed,
        datasets,
        metrics: vec![
            MetricReport::new("first-decile loss", mean(first), first.len()),
            MetricReport::new("last-decile loss", mean(tail), tail.len()),
            MetricReport::new("steps", n as f64, n),
            MetricReport::new("skipped batches", log.skipped as f64, log.skipped),
        ],
    })
}

fn save_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(MODEL_FILE);
    ck.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let corpus = read_corpus(cfg.data_path("corpus")?)?;
    let init = first_model(cfg)?;
    let vocab = vocab_for(cfg, init.as_ref(), &corpus)?;
    let mut model = encoder_for(cfg, init, &vocab)?;
    let tc = cfg.train(corpus.len());
    let (name, log) = match cfg.task {
        Task::PretrainMlm => ("mlm", pretrain_mlm(&mut model, &vocab, &corpus, &tc, cfg.mask_ratio)?),
        _ => {
            let mut decoder = ShallowDecoder::init(&model.config, derive(cfg.seed, &[label("decoder-init")]));
            let log = pretrain_retromae(&mut model, &mut decoder, &vocab, &corpus, &tc, cfg.mask_ratio, cfg.decoder_mask_ratio)?;
            ("retromae", log)
        }
    };
    let row = training_row(name, cfg, &log, dataset_refs(cfg, &["corpus"])?)?;
    save_model(cfg, &Checkpoint::new(model, Some(vocab)))?;
    write_report(cfg, "Pre-training", vec![row])
}

fn distill(cfg: &RunConfig) -> Result<()> {
    let pairs: Vec<ParallelPair> = records(cfg, "parallel")?;
    let (teacher, _) = read_embeddings(cfg.data_path("teacher")?)?;
    let init = first_model(cfg)?;
    let mut texts: Vec<String> = match cfg.data.get("corpus") {
        Some(p) => read_corpus(p)?,
        None => Vec::new(),
    };
    texts.extend(pairs.iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]));
    let vocab = vocab_for(cfg, init.as_ref(), &texts)?;
    let mut model = encoder_for(cfg, init, &vocab)?;
    let mut head = ProjectionHead::init(model.hidden(), teacher.shape()[1], derive(cfg.seed, &[label("projection")])).weight;
    let log = train_distill(&mut model, &mut head, &vocab, &pairs, &teacher, &cfg.train(pairs.len()), cfg.fixed_pooling())?;
    let row = training_row("distill", cfg, &log, dataset_refs(cfg, &["parallel", "teacher", "corpus"])?)?;
    let mut ck = Checkpoint::new(model, Some(vocab));
    ck.head = Some(head);
    save_model(cfg, &ck)?;
    write_report(cfg, "Distillation", vec![row])
}

fn simcse(cfg: &RunConfig) -> Result<()> {
    let corpus = read_corpus(cfg.data_path("corpus")?)?;
    let mut ck = require_model(cfg)?;
    let vocab = ck.vocab()?.clone();
    let log = train_simcse(&mut ck.model, &vocab, &corpus, &cfg.train(corpus.len()), cfg.temperature, cfg.fixed_pooling())?;
    let row = training_row("simcse", cfg, &log, dataset_refs(cfg, &["corpus"])?)?;
    save_model(cfg, &ck)?;
    write_report(cfg, "Contrastive fine-tuning", vec![row])
}

fn model_label(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn zero_shot(cfg: &RunConfig) -> Result<()> {
    let sts: Option<Vec<StsPair>> = optional(cfg, "sts")?;
    let costra: Option<Vec<CostraTriplet>> = optional(cfg, "costra")?;
    let ranking: Option<Vec<QueryDocPair>> = optional(cfg, "ranking_test")?;
    if sts.is_none() && costra.is_none() && ranking.is_none() {
        return Err(Error::Config("zero-shot evaluation needs data.sts, data.costra or data.ranking_test".into()));
    }
    let datasets = dataset_refs(cfg, &["sts", "costra", "ranking_test"])?;
    let data = || ZeroShotData { sts: sts.as_deref(), costra: costra.as_deref(), ranking: ranking.as_deref() };
    let mut embedders: Vec<(String, Box<dyn Embedder>)> = Vec::new();
    for p in &cfg.models {
        embedders.push((model_label(p), Box::new(Checkpoint::load(p)?)));
    }
    if cfg.random_baseline {
        let dim = embedders.first().map_or(cfg.hidden, |(_, e)| e.dim());
        embedders.push(("random embeddings".into(), Box::new(RandomEmbedder { dim, seed: cfg.seed })));
    }
    if embedders.is_empty() {
        return Err(Error::Config("nothing to evaluate: give --model or --random-baseline".into()));
    }
    let mut rows = Vec::new();
    for (name, e) in &embedders {
        let r = run_zero_shot(e.as_ref(), data(), cfg.pooling)?;
        rows.push(ReportRow { model: format!("{name} [{}]", r.pooling), seed: cfg.seed, datasets: datasets.clone(), metrics: r.metrics });
    }
    write_report(cfg, "Zero-shot evaluation", rows)
}

fn classification_docs(cfg: &RunConfig) -> Result<(Vec<LabeledDoc>, usize)> {
    let docs: Vec<LabeledDoc> = records(cfg, "docs")?;
    let c = class_count(&docs);
    Ok((docs, c))
}

fn probe(cfg: &RunConfig) -> Result<()> {
    let (docs, c) = classification_docs(cfg)?;
    let datasets = dataset_refs(cfg, &["docs"])?;
    let pc = cfg.probe();
    let mut rows = Vec::new();
    let mut dim = cfg.hidden;
    for p in &cfg.models {
        let ck = Checkpoint::load(p)?;
        dim = ck.dim();
        let s = run_probe_frozen(&ck, &docs, c, cfg.head_kind, &pc)?;
        rows.push(fold_row(model_label(p), cfg, &datasets, cfg.head_kind.metric_name(), s.mean, s.stddev, docs.len()));
    }
    if cfg.random_baseline {
        let s = run_probe(&RandomEmbedder { dim, seed: cfg.seed }, &docs, c, cfg.head_kind, &pc)?;
        rows.push(fold_row("random embeddings".into(), cfg, &datasets, cfg.head_kind.metric_name(), s.mean, s.stddev, docs.len()));
    }
    if rows.is_empty() {
        return Err(Error::Config("nothing to evaluate: give --model or --random-baseline".into()));
    }
    write_report(cfg, "Linear probing", rows)
}

fn fold_row(model: String, cfg: &RunConfig, datasets: &[DatasetRef], metric: &str, mean: f64, sd: f64, n: usize) -> ReportRow {
    ReportRow {
        model,
        seed: cfg.seed,
        datasets: datasets.to_vec(),
        metrics: vec![MetricReport::new(metric, mean, n).with_stddev(sd)],
    }
}

fn finetune(cfg: &RunConfig) -> Result<()> {
    if cfg.models.is_empty() {
        return Err(Error::Config("fine-tuning needs --model".into()));
    }
    let fc = cfg.finetune();
    let mut rows = Vec::new();
    match cfg.finetune_task {
        FinetuneTask::Classification => {
            let (docs, c) = classification_docs(cfg)?;
            let datasets = dataset_refs(cfg, &["docs"])?;
            for p in &cfg.models {
                let s = run_finetune_classification(&Checkpoint::load(p)?, &docs, c, cfg.head_kind, cfg.folds, &fc)?;
                rows.push(fold_row(model_label(p), cfg, &datasets, cfg.head_kind.metric_name(), s.mean, s.stddev, docs.len()));
            }
        }
        FinetuneTask::Ranking => {
            let train: Vec<QueryDocPair> = records(cfg, "ranking_train")?;
            let test: Vec<QueryDocPair> = records(cfg, "ranking_test")?;
            let datasets = dataset_refs(cfg, &["ranking_train", "ranking_test"])?;
            let single = cfg.models.len() == 1;
            for p in &cfg.models {
                let out = run_finetune_ranking(&Checkpoint::load(p)?, &train, &test, cfg.ranking_loss, &fc, single)?;
                if let Some(ck) = &out.model {
                    save_model(cfg, ck)?;
                }
                let queries = test.iter().map(|q| q.query_id.as_str()).collect::<std::collections::BTreeSet<_>>().len();
                rows.push(ReportRow {
                    model: model_label(p),
                    seed: cfg.seed,
                    datasets: datasets.clone(),
                    metrics: vec![
                        MetricReport::new("ranking P@10", out.precision, queries),
                        MetricReport::new("skipped batches", out.log.skipped as f64, out.log.skipped),
                    ],
                });
            }
        }
    }
    write_report(cfg, "Fine-tuning", rows)
}

fn ablate(cfg: &RunConfig, random_init: bool) -> Result<()> {
    let train: Vec<QueryDocPair> = records(cfg, "ranking_train")?;
    let test: Vec<QueryDocPair> = records(cfg, "ranking_test")?;
    let mut inits = Vec::new();
    for p in &cfg.models {
        inits.push((model_label(p), Checkpoint::load(p)?));
    }
    if random_init {
        let first = inits.first().map(|(_, c)| c.clone()).ok_or_else(|| Error::Config("--random-init copies the first model's architecture; give --model".into()))?;
        let model = EncoderModel::init(first.model.config.clone(), derive(cfg.seed, &[label("encoder-init")]))?;
        inits.push(("random init".into(), Checkpoint::new(model, first.vocab)));
    }
    if inits.is_empty() {
        return Err(Error::Config("ablation needs at least one --model".into()));
    }
    let pts = run_ablation(&inits, &train, &test, &cfg.sizes, cfg.repeats, cfg.ranking_loss, &cfg.finetune(), cfg.seed)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("ablation.csv"), ablation_csv(&pts)?)?;
    let datasets = dataset_refs(cfg, &["ranking_train", "ranking_test"])?;
    let mut by_init: BTreeMap<usize, ReportRow> = BTreeMap::new();
    for p in &pts {
        let i = inits.iter().position(|(n, _)| *n == p.init).expect("point from a known init");
        by_init
            .entry(i)
            .or_insert_with(|| ReportRow { model: p.init.clone(), seed: cfg.seed, datasets: datasets.clone(), metrics: Vec::new() })
            .metrics
            .push(MetricReport::new(format!("P@10 n={}", p.size), p.mean, p.scores.len()).with_stddev(p.stddev));
    }
    write_report(cfg, "Data-size ablation", by_init.into_values().collect())
}

fn quantcheck(emb: &Path, report: Option<&Path>) -> Result<()> {
    let (t, _) = read_embeddings(emb)?;
    let q = quantize_roundtrip(&t)?;
    let json = serde_json::to_string_pretty(&q)?;
    println!("{json}");
    if let Some(r) = report {
        std::fs::write(r, json + "\n")?;
    }
    Ok(())
}

fn embed(model: &Path, input: &Path, out: &Path, pooling: &str, normalize: bool) -> Result<()> {
    let ck = Checkpoint::load(model)?;
    let pooling: Pooling = pooling.parse()?;
    let texts: Vec<String> = std::fs::read_to_string(input)?.lines().map(str::to_string).filter(|l| !l.trim().is_empty()).collect();
    if texts.is_empty() {
        return Err(Error::Data(format!("{}: no texts to embed", input.display())));
    }
    let mut e = ck.embed(&texts, pooling)?;
    if normalize {
        embedkit::tensor::normalize_rows(&mut e);
    }
    write_embeddings(out, &e, normalize)
}
