//! `mantis`: data generation, training, generation and evaluation.
//!
//! Exit codes: 0 on success, 2 for usage or validation errors, 1 for
//! failures at run time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use mantis::checkpoint::{load_checkpoint, save_checkpoint};
use mantis::conditioner::CondMode;
use mantis::config::RunConfig;
use mantis::datakit::{self, attribute_recall, load_jsonl, split_of, Sample, Scope, Split};
use mantis::metrics::{score_all, EvalCorpus, Scores};
use mantis::model::{Model, Strategy};
use mantis::tokenizer::{train_bpe, Vocab};
use mantis::trainer::train;

/// Bad input from the user; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

#[derive(Parser)]
#[command(name = "mantis", version, about = "Multimodal conditional text generation experiments")]
struct Cli {
    /// Flat `key = value` config file (model.*, train.*, gen.*, data.* keys).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra config override, repeatable; applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic corpus and learn its vocabulary.
    Datagen(DatagenArgs),
    /// Fine-tune a model on a generated or ingested corpus.
    Train(TrainArgs),
    /// Describe every item of a split with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score one or more generation files.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    min_images: Option<usize>,
    #[arg(long)]
    max_images: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.jsonl, val.jsonl and vocab.txt.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<CondMode>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=5))]
    max_images: Option<u64>,
    #[arg(long)]
    p_text_dropout: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Vocabulary file; defaults to `<data>/vocab.txt`.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["greedy", "top_k"])]
    strategy: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Generation files: `{"id", "generated"}` lines scored against the
    /// dataset split, or `{"id", "candidate", "references"}` lines.
    #[arg(required = true)]
    generations: Vec<PathBuf>,
    /// Dataset directory supplying references and attributes.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> std::result::Result<CondMode, String> {
    CondMode::parse(s).ok_or_else(|| format!("unknown mode `{}` (expected mantis, pseudo_self, context_attn or unconditional)", s))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            let validation = e.downcast_ref::<Usage>().is_some() || matches!(e.downcast_ref::<mantis::Error>(), Some(mantis::Error::Config(_)));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cli.config {
        rc.apply_file(path)?;
    }
    for kv in &cli.set {
        let Some((k, v)) = kv.split_once('=') else {
            return usage(format!("--set expects KEY=VALUE, got `{}`", kv));
        };
        rc.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        rc.seed = seed;
    }
    match cli.cmd {
        Cmd::Datagen(a) => datagen(rc, a),
        Cmd::Train(a) => train_cmd(rc, a),
        Cmd::Generate(a) => generate_cmd(rc, a),
        Cmd::Eval(a) => eval_cmd(rc, a),
    }
}

fn make_out_dir(dir: &Path) -> Result<()> {
    if let Err(e) = fs::create_dir_all(dir) {
        return usage(format!("cannot use output directory {}: {}", dir.display(), e));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn split_file(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{}.jsonl", split))
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Sample>> {
    let path = split_file(data, split);
    if !path.is_file() {
        return usage(format!("dataset file {} not found", path.display()));
    }
    let (samples, stats) = load_jsonl(&path)?;
    if stats.total() > 0 {
        log::info!("{}: dropped {} records ({:?})", path.display(), stats.total(), stats);
    }
    Ok(samples)
}

fn load_vocab(explicit: Option<&Path>, data: &Path) -> Result<Vocab> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| data.join("vocab.txt"));
    if !path.is_file() {
        return usage(format!("vocabulary {} not found", path.display()));
    }
    Ok(Vocab::load(&path)?)
}

fn datagen(mut rc: RunConfig, a: DatagenArgs) -> Result<()> {
    if let Some(n) = a.n {
        rc.data.n_samples = n;
    }
    if let Some(n) = a.min_images {
        rc.data.min_images = n;
    }
    if let Some(n) = a.max_images {
        rc.data.max_images = n;
    }
    if let Some(n) = a.vocab_size {
        rc.data.vocab_size = n;
    }
    if rc.data.n_samples == 0 {
        return usage("--n must be at least 1");
    }
    if rc.data.min_images == 0 || rc.data.min_images > rc.data.max_images {
        return usage(format!("image count range {}..={} is empty or starts at 0", rc.data.min_images, rc.data.max_images));
    }
    rc.paths.out = Some(a.out.clone());
    make_out_dir(&a.out)?;

    let samples = datakit::generate(&rc.synth_spec())?;
    let mut parts: HashMap<Split, Vec<Sample>> = HashMap::new();
    for s in samples {
        parts.entry(split_of(&s.id)).or_default().push(s);
    }
    let mut counts = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let part = parts.remove(&split).unwrap_or_default();
        datakit::write_jsonl(&part, &split_file(&a.out, split.name()))?;
        counts.insert(split.name(), part.len());
        if split == Split::Train {
            let corpus: Vec<&str> = part.iter().flat_map(|s| [s.name.as_str(), s.description.as_str()]).collect();
            let vocab = train_bpe(&corpus, rc.data.vocab_size)?;
            vocab.save(&a.out.join("vocab.txt"))?;
            counts.insert("vocab", vocab.len());
        }
    }
    write_json(&a.out.join("manifest.json"), &json!({ "run_config": rc.to_json(), "counts": counts, "build": mantis::trainer::build_id() }))?;
    println!("wrote {} samples to {} ({:?})", rc.data.n_samples, a.out.display(), counts);
    Ok(())
}

fn train_cmd(mut rc: RunConfig, a: TrainArgs) -> Result<()> {
    if let Some(m) = a.mode {
        rc.model.cond_mode = m;
    }
    if let Some(m) = a.max_images {
        rc.model.max_images = m as usize;
    }
    if let Some(p) = a.p_text_dropout {
        rc.train.p_text_dropout = p;
    }
    if let Some(s) = a.steps {
        rc.train.total_steps = s;
        rc.train.warmup_steps = rc.train.warmup_steps.min(s);
    }
    if let Some(lr) = a.lr {
        rc.train.lr_peak = lr;
    }
    if let Some(b) = a.batch_size {
        rc.train.batch_size = b;
    }
    rc.sync_seed();
    rc.paths.data = Some(a.data.clone());
    rc.paths.out = Some(a.out.clone());
    rc.paths.vocab = a.vocab.clone();

    let vocab = load_vocab(a.vocab.as_deref(), &a.data)?;
    rc.model.vocab_size = vocab.len();
    rc.model.validate()?;
    rc.train.validate()?;
    let train_set = load_split(&a.data, "train")?;
    let val_set = load_split(&a.data, "val")?;
    if train_set.is_empty() {
        return usage(format!("{} has no usable records", split_file(&a.data, "train").display()));
    }
    make_out_dir(&a.out)?;

    let to_bundles = |xs: &[Sample]| xs.iter().map(|s| s.to_bundle(&vocab, rc.model.max_images)).collect::<Vec<_>>();
    let (train_b, val_b) = (to_bundles(&train_set), to_bundles(&val_set));
    let mut model: Model<f32> = Model::new(rc.model.clone(), &mut ChaCha8Rng::seed_from_u64(rc.seed))?;
    let name = rc.run_name();
    let embedded = rc.to_json();
    let hash = vocab.hash();
    let started = Instant::now();
    let total = rc.train.total_steps;
    let report = train(&mut model, &train_b, &val_b, &vocab, &rc.train, &mut |step, m| {
        let file = if step == total { format!("{}.ckpt", name) } else { format!("{}.step{}.ckpt", name, step) };
        save_checkpoint(m, &hash, &embedded, &a.out.join(file))
    })?;
    let wall = started.elapsed().as_secs_f64();
    write_json(&a.out.join(format!("{}.report.json", name)), &json!({ "run_config": embedded, "report": report }))?;
    write_json(&a.out.join(format!("{}.timing.json", name)), &json!({ "run_config": embedded, "wall_seconds": wall }))?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{}: {} params, {} steps ({} skipped), final loss {:.4}, eval loss {}, {:.1}s",
        name,
        report.num_params,
        report.losses.len(),
        report.skipped_steps,
        last,
        report.final_eval_loss.map_or("n/a".into(), |l| format!("{:.4}", l)),
        wall
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GenRecord {
    id: String,
    generated: String,
}

fn generate_cmd(mut rc: RunConfig, a: GenerateArgs) -> Result<()> {
    if let Some(s) = &a.strategy {
        rc.gen.strategy = if s == "greedy" { Strategy::Greedy } else { Strategy::TopK };
    }
    if let Some(k) = a.k {
        rc.gen.k = k;
    }
    if let Some(t) = a.temperature {
        rc.gen.temperature = t;
    }
    if let Some(n) = a.max_new_tokens {
        rc.gen.max_new_tokens = n;
    }
    rc.sync_seed();
    rc.gen.validate()?;
    rc.paths.checkpoint = Some(a.checkpoint.clone());
    rc.paths.data = Some(a.data.clone());
    rc.paths.out = Some(a.out.clone());
    rc.paths.vocab = a.vocab.clone();
    if !a.checkpoint.is_file() {
        return usage(format!("checkpoint {} not found", a.checkpoint.display()));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = load_vocab(a.vocab.as_deref(), &a.data)?;
    if let Some(w) = ckpt.vocab_warning(&vocab) {
        eprintln!("warning: {}", w);
    }
    if vocab.len() != ckpt.model.config.vocab_size {
        return usage(format!("vocabulary has {} entries but the model expects {}", vocab.len(), ckpt.model.config.vocab_size));
    }
    rc.model = ckpt.model.config.clone();
    let samples = load_split(&a.data, &a.split)?;
    make_out_dir(&a.out)?;

    let max_images = ckpt.model.config.max_images;
    let mut lines = String::new();
    for chunk in samples.chunks(32) {
        let bundles: Vec<_> = chunk.iter().map(|s| s.to_bundle(&vocab, max_images)).collect();
        let outs = ckpt.model.generate_batch(&bundles, &rc.gen, &vocab)?;
        for (s, ids) in chunk.iter().zip(outs) {
            lines.push_str(&serde_json::to_string(&GenRecord { id: s.id.clone(), generated: vocab.decode(&ids)? })?);
            lines.push('\n');
        }
    }
    let stem = a.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let path = a.out.join(format!("{}.{}.jsonl", stem, a.split));
    fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
    write_json(
        &a.out.join(format!("{}.{}.meta.json", stem, a.split)),
        &json!({ "run_config": rc.to_json(), "checkpoint_run_config": ckpt.run_config, "vocab_hash": vocab.hash(), "count": samples.len() }),
    )?;
    println!("wrote {} generations to {}", samples.len(), path.display());
    Ok(())
}

#[derive(Deserialize)]
struct EvalRecord {
    id: String,
    #[serde(alias = "candidate")]
    generated: String,
    references: Option<Vec<String>>,
}

#[derive(Serialize)]
struct ModelRow {
    model: String,
    file: PathBuf,
    corpus_size: usize,
    #[serde(flatten)]
    scores: Scores,
    attribute_recall_image_only: Option<f64>,
    attribute_recall_name_only: Option<f64>,
}

fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    if !path.is_file() {
        return usage(format!("generation file {} not found", path.display()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) => return usage(format!("{}:{}: {}", path.display(), i + 1, e)),
        }
    }
    Ok(out)
}

fn score_file(path: &Path, dataset: Option<&HashMap<String, Sample>>) -> Result<ModelRow> {
    let records = read_records(path)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return usage(format!("{}: duplicate id {}", path.display(), r.id));
        }
    }
    let mut items = Vec::with_capacity(records.len());
    let (mut img, mut name) = (0.0, 0.0);
    match dataset {
        Some(ds) => {
            let mut missing: Vec<&str> = ds.keys().filter(|k| !seen.contains(k.as_str())).map(String::as_str).collect();
            let mut unknown: Vec<&str> = records.iter().filter(|r| !ds.contains_key(&r.id)).map(|r| r.id.as_str()).collect();
            if !missing.is_empty() || !unknown.is_empty() {
                missing.sort_unstable();
                unknown.sort_unstable();
                return usage(format!(
                    "{}: ids do not match the dataset split; missing: [{}]; unknown: [{}]",
                    path.display(),
                    missing.join(", "),
                    unknown.join(", ")
                ));
            }
            for r in &records {
                let s = &ds[&r.id];
                img += attribute_recall(&r.generated, &s.attributes, Scope::ImageOnly)?;
                name += attribute_recall(&r.generated, &s.attributes, Scope::NameOnly)?;
                items.push((r.generated.clone(), vec![s.description.clone()]));
            }
        }
        None => {
            for r in &records {
                let Some(refs) = &r.references else {
                    return usage(format!("{}: record {} has no references and no --data was given", path.display(), r.id));
                };
                items.push((r.generated.clone(), refs.clone()));
            }
        }
    }
    let n = items.len();
    let scores = score_all(&EvalCorpus::from_texts(&items)?)?;
    let recall = |total: f64| (dataset.is_some() && n > 0).then(|| total / n as f64);
    Ok(ModelRow {
        model: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        file: path.to_path_buf(),
        corpus_size: n,
        scores,
        attribute_recall_image_only: recall(img),
        attribute_recall_name_only: recall(name),
    })
}

fn table(rows: &[ModelRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.4}", v));
    let mut out = format!(
        "{:<w$}  {:>6}  {:>7}  {:>7}  {:>7}  {:>7}  {:>9}  {:>9}\n",
        "model",
        "n",
        "BLEU4",
        "CIDEr-D",
        "METEOR",
        "ROUGE-L",
        "attr_img",
        "attr_name",
        w = width
    );
    for r in rows {
        out += &format!(
            "{:<w$}  {:>6}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>9}  {:>9}\n",
            r.model,
            r.corpus_size,
            r.scores.bleu4,
            r.scores.cider_d,
            r.scores.meteor_lite,
            r.scores.rouge_l,
            opt(r.attribute_recall_image_only),
            opt(r.attribute_recall_name_only),
            w = width
        );
    }
    out
}

fn eval_cmd(mut rc: RunConfig, a: EvalArgs) -> Result<()> {
    rc.paths.data = a.data.clone();
    rc.paths.out = Some(a.out.clone());
    rc.paths.generations = a.generations.clone();
    let dataset = match &a.data {
        Some(dir) => Some(load_split(dir, &a.split)?.into_iter().map(|s| (s.id.clone(), s)).collect::<HashMap<_, _>>()),
        None => None,
    };
    let rows = a.generations.iter().map(|p| score_file(p, dataset.as_ref())).collect::<Result<Vec<_>>>()?;
    make_out_dir(&a.out)?;
    let text = table(&rows);
    write_json(&a.out.join("eval.json"), &json!({ "run_config": rc.to_json(), "split": a.split, "models": rows }))?;
    fs::write(a.out.join("eval.txt"), &text)?;
    print!("{}", text);
    Ok(())
}
