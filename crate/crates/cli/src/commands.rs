//! Subcommand bodies. Every artifact goes through [`write_atomic`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ltgbert::corpus::{parse_documents, render_markdown, split_corpus, split_manifest, SplitSpec};
use ltgbert::eval::data::{parse_classifier_examples, parse_minimal_pairs, parse_probe_examples};
use ltgbert::eval::{
    extract_reps, finetune_classifier, minimal_pair_eval, train_probe_on_reps, FinetuneConfig,
    LayerReport, ProbeConfig, TaskKind,
};
use ltgbert::model::{Batch, Checkpoint, Model};
use ltgbert::objectives::batch_rng;
use ltgbert::tokenizer::{coverage_report, train_vocab, TokenId, Vocabulary, SPECIAL_TOKENS};
use ltgbert::training::{Trainer, CHECKPOINT_FILE};
use rand::Rng;

use crate::config::RunConfig;
use crate::UsageError;

/// Optional overrides shared by `probe` and `finetune`.
pub struct TrainOpts {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

/// Writes through a temp file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    config.path("out_dir").map(PathBuf::from).ok_or_else(|| {
        UsageError("an output directory is required (--out or out_dir)".into()).into()
    })
}

/// Flag value if given, else the config path under `key`.
fn pick(flag: Option<PathBuf>, config: &RunConfig, key: &str) -> Result<PathBuf> {
    flag.or_else(|| config.path(key).map(PathBuf::from))
        .ok_or_else(|| UsageError(format!("missing path: pass a flag or set `{key}`")).into())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn record_config(config: &RunConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.txt"), config.resolved().as_bytes())
}

/// Expands directories into their `*.xml` files, sorted by name.
fn collect_sources(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            found.retain(|p| p.extension().is_some_and(|x| x == "xml"));
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        bail!(UsageError("no source files found".into()));
    }
    Ok(files)
}

fn text_lines(inputs: &[PathBuf]) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for path in inputs {
        lines.extend(read(path)?.lines().map(str::to_owned));
    }
    Ok(lines)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    let checkpoint =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Model::from_checkpoint(&checkpoint)?)
}

fn load_model_and_vocab(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
) -> Result<(Model, Vocabulary)> {
    let model = load_model(&pick(checkpoint, config, "checkpoint_path")?)?;
    let vocab = load_vocab(&pick(vocab, config, "vocab_path")?)?;
    if vocab.len() != model.config().vocab_size {
        bail!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            model.config().vocab_size
        );
    }
    Ok((model, vocab))
}

pub fn preprocess(config: &RunConfig, inputs: &[PathBuf], dev_fraction: f64) -> Result<()> {
    let dir = out_dir(config)?;
    record_config(config, &dir)?;
    let mut docs = Vec::new();
    for path in collect_sources(inputs)? {
        let parsed = parse_documents(&read(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        docs.extend(parsed.iter().map(render_markdown));
    }
    let spec = SplitSpec {
        dev_fraction,
        seed: config.pretrain.seed,
    };
    let (train, dev) = split_corpus(docs, spec)?;
    for (name, part) in [("train", &train), ("dev", &dev)] {
        let text: Vec<&str> = part.iter().map(|d| d.text.as_str()).collect();
        write_atomic(&dir.join(format!("{name}.md")), text.join("\n").as_bytes())?;
        let manifest = split_manifest(part.iter().map(|d| d.id.as_str()));
        write_atomic(&dir.join(format!("{name}_ids.txt")), manifest.as_bytes())?;
    }
    let words: usize = train.iter().map(|d| d.word_count).sum();
    println!("train\t{}\tdocuments\t{words}\twords", train.len());
    println!("dev\t{}\tdocuments", dev.len());
    Ok(())
}

pub fn train_tokenizer(config: &RunConfig, inputs: &[PathBuf], vocab_size: usize) -> Result<()> {
    let dir = out_dir(config)?;
    record_config(config, &dir)?;
    let vocab = train_vocab(text_lines(inputs)?, vocab_size)?;
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    write_atomic(&dir.join("vocab.txt"), text.as_bytes())?;
    println!("vocab\t{}", vocab.len());
    Ok(())
}

pub fn coverage(
    config: &RunConfig,
    vocab: Option<PathBuf>,
    inputs: &[PathBuf],
    threshold: u64,
) -> Result<()> {
    let vocab = load_vocab(&pick(vocab, config, "vocab_path")?)?;
    let share = coverage_report(&vocab, text_lines(inputs)?, threshold)?;
    let line = format!("coverage\t{threshold}\t{share:.6}\n");
    print!("{line}");
    if let Some(dir) = config.path("out_dir") {
        write_atomic(&Path::new(dir).join("coverage.txt"), line.as_bytes())?;
    }
    Ok(())
}

/// Documents start at `# ` headers; every other non-empty line is one
/// segment (sentence, list item or turn).
fn markdown_documents(text: &str, vocab: &Vocabulary) -> Vec<Vec<Vec<TokenId>>> {
    let mut docs: Vec<Vec<Vec<TokenId>>> = Vec::new();
    for line in text.lines() {
        if line.starts_with("# ") || docs.is_empty() {
            docs.push(Vec::new());
        }
        let ids = vocab.encode(line.trim());
        if !ids.is_empty() {
            docs.last_mut().expect("pushed above").push(ids);
        }
    }
    docs.retain(|d| !d.is_empty());
    docs
}

pub fn pretrain(
    config: &RunConfig,
    train: Option<PathBuf>,
    vocab: Option<PathBuf>,
    resume: bool,
) -> Result<()> {
    let dir = out_dir(config)?;
    let vocab = load_vocab(&pick(vocab, config, "vocab_path")?)?;
    let mut model_config = config.model.clone();
    if config.is_explicit("vocab_size") && model_config.vocab_size != vocab.len() {
        bail!(UsageError(format!(
            "vocab_size = {} but the vocabulary has {} tokens",
            model_config.vocab_size,
            vocab.len()
        )));
    }
    model_config.vocab_size = vocab.len();
    let docs = markdown_documents(&read(&pick(train, config, "train_data")?)?, &vocab);
    let seed = config.pretrain.seed;
    let model = Model::init(model_config, seed)?;
    record_config(config, &dir)?;
    let mut trainer = Trainer::new(
        model,
        &vocab,
        &docs,
        config.masking.clone(),
        config.pretrain.clone(),
    )?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if resume {
        if !ckpt_path.exists() {
            bail!(UsageError(format!(
                "--resume: no checkpoint at {}",
                ckpt_path.display()
            )));
        }
        trainer.resume(&Checkpoint::load(&ckpt_path)?)?;
        eprintln!("resumed at step {}", trainer.step);
    }
    let metrics = trainer.run(Some(&dir))?;
    if let Some(last) = metrics.last() {
        eprintln!("{}", last.to_line());
    }
    let digest = Checkpoint::load(&ckpt_path)?.digest()?;
    println!("checkpoint\t{}", ckpt_path.display());
    println!("digest\t{digest}");
    Ok(())
}

pub fn score_pairs(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
    pairs: &Path,
    threads: usize,
) -> Result<()> {
    let (model, vocab) = load_model_and_vocab(config, checkpoint, vocab)?;
    let pairs = parse_minimal_pairs(&read(pairs)?)?;
    let report = minimal_pair_eval(&model, &vocab, &pairs, threads)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = config.path("out_dir") {
        write_atomic(&Path::new(dir).join("pairs.tsv"), table.as_bytes())?;
    }
    Ok(())
}

pub fn probe(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
    train: &Path,
    test: &Path,
    opts: TrainOpts,
    include_embedding: bool,
) -> Result<()> {
    let dir = out_dir(config)?;
    let (model, vocab) = load_model_and_vocab(config, checkpoint, vocab)?;
    let (train, classes) = parse_probe_examples(&read(train)?, &vocab, None)?;
    let (test, _) = parse_probe_examples(&read(test)?, &vocab, Some(&classes))?;
    let mut probe_config = ProbeConfig {
        seed: config.pretrain.seed,
        include_embedding,
        ..ProbeConfig::default()
    };
    if let Some(e) = opts.epochs {
        probe_config.epochs = e;
    }
    if let Some(b) = opts.batch_size {
        probe_config.batch_size = b;
    }
    if let Some(lr) = opts.lr {
        probe_config.lr = lr;
    }
    record_config(config, &dir)?;
    let train_reps = extract_reps(&model, &train, include_embedding)?;
    let test_reps = extract_reps(&model, &test, include_embedding)?;
    let probe = train_probe_on_reps(
        &train_reps,
        model.config().hidden,
        classes.len(),
        probe_config,
    )?;
    let accuracy = probe.accuracy(&test_reps)?;
    let mut gamma = String::from("layer\tgamma\n");
    for (i, g) in probe.gamma().iter().enumerate() {
        gamma.push_str(&format!("{i}\t{g:e}\n"));
    }
    write_atomic(&dir.join("gamma.tsv"), gamma.as_bytes())?;
    let report = probe.layer_report().to_table();
    write_atomic(&dir.join("layer_report.tsv"), report.as_bytes())?;
    println!("accuracy\t{accuracy:.4}");
    print!("{report}");
    Ok(())
}

/// Reads the `layer<TAB>gamma` table written by `probe`.
fn parse_gamma(text: &str) -> Result<Vec<f64>> {
    let mut gamma = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("layer")) {
            continue;
        }
        let value = line
            .split('\t')
            .nth(1)
            .ok_or_else(|| anyhow::anyhow!("line {}: expected `layer<TAB>gamma`", n + 1))?;
        gamma.push(
            value
                .trim()
                .parse::<f64>()
                .with_context(|| format!("line {}", n + 1))?,
        );
    }
    if gamma.is_empty() {
        bail!("no layer weights found");
    }
    Ok(gamma)
}

pub fn layer_report(config: &RunConfig, gamma: &Path) -> Result<()> {
    let report = LayerReport::from_gamma(&parse_gamma(&read(gamma)?)?).to_table();
    print!("{report}");
    if let Some(dir) = config.path("out_dir") {
        write_atomic(&Path::new(dir).join("layer_report.tsv"), report.as_bytes())?;
    }
    Ok(())
}

pub fn finetune(
    config: &RunConfig,
    checkpoint: Option<PathBuf>,
    vocab: Option<PathBuf>,
    train: &Path,
    test: &Path,
    task: &str,
    opts: TrainOpts,
) -> Result<()> {
    let kind: TaskKind = task.parse().map_err(UsageError)?;
    let dir = out_dir(config)?;
    let (model, vocab) = load_model_and_vocab(config, checkpoint, vocab)?;
    let (train, classes) = parse_classifier_examples(&read(train)?, &vocab, kind, None)?;
    let (test, _) = parse_classifier_examples(&read(test)?, &vocab, kind, Some(&classes))?;
    let mut ft = FinetuneConfig {
        seed: config.pretrain.seed,
        max_len: model.config().max_len,
        ..FinetuneConfig::default()
    };
    if let Some(e) = opts.epochs {
        ft.epochs = e;
    }
    if let Some(b) = opts.batch_size {
        ft.batch_size = b;
    }
    if let Some(lr) = opts.lr {
        ft.peak_lr = lr;
    }
    record_config(config, &dir)?;
    let classifier = finetune_classifier(model, &train, kind, classes.len(), &ft)?;
    let metrics = classifier.evaluate(&test)?;
    let mut out = String::new();
    for (name, value) in [
        ("accuracy", metrics.accuracy),
        ("pearson", metrics.pearson),
        ("spearman", metrics.spearman),
    ] {
        if let Some(v) = value {
            out.push_str(&format!("{name}\t{v:.4}\n"));
        }
    }
    print!("{out}");
    write_atomic(&dir.join("finetune.tsv"), out.as_bytes())?;
    Ok(())
}

pub fn grad_check(config: &RunConfig, step: f64, tolerance: f64) -> Result<()> {
    let model = Model::init(config.model.clone(), config.pretrain.seed)?;
    let cfg = model.config();
    let (rows, len) = (2, cfg.max_len.min(8));
    let mut rng = batch_rng(config.pretrain.seed, 0);
    let first = SPECIAL_TOKENS.len() as TokenId;
    if cfg.vocab_size <= SPECIAL_TOKENS.len() {
        bail!(UsageError(
            "vocab_size must exceed the special tokens".into()
        ));
    }
    let ids: Vec<TokenId> = (0..rows * len)
        .map(|_| rng.random_range(first..cfg.vocab_size as TokenId))
        .collect();
    let targets: Vec<Option<usize>> = (0..rows * len)
        .map(|i| (i % 3 == 1).then(|| rng.random_range(0..cfg.vocab_size)))
        .collect();
    let mut batch = Batch::new(ids, rows, len)?;
    if model.embedding_params().segments.is_some() {
        batch = batch.with_segments(vec![0; rows * len])?;
    }
    let report = model.gradient_check(&batch, &targets, step)?;
    println!(
        "max_relative_error\t{:e}\t{}\t{} scalars",
        report.max_error, report.worst_param, report.checked
    );
    if report.max_error > tolerance {
        bail!(
            "gradient check failed: {:e} > {tolerance:e}",
            report.max_error
        );
    }
    Ok(())
}

pub fn inspect_checkpoint(path: &Path) -> Result<()> {
    let checkpoint =
        Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    println!("digest\t{}", checkpoint.digest()?);
    for (k, v) in checkpoint.config.to_pairs() {
        println!("config\t{k}\t{v}");
    }
    for (k, v) in &checkpoint.meta {
        println!("meta\t{k}\t{v}");
    }
    let mut total = 0;
    for (name, tensor) in &checkpoint.tensors {
        total += tensor.numel();
        println!("tensor\t{name}\t{:?}", tensor.shape());
    }
    println!("scalars\t{total}");
    Ok(())
}
