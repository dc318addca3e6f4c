use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::optim::{clip_param_gradients, Optimizer, OptimizerConfig, OptimizerKind};
use super::schedule::ScheduleConfig;
use super::TrainingError;
use crate::model::{Batch, Checkpoint, Model};
use crate::numerics::Graph;
use crate::objectives::{
    apply_plan, batch_rng, pack_segments, plan, total_loss, MaskingConfig, PairObjective,
    PairSampler,
};
use crate::tokenizer::{TokenId, Vocabulary};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Attempts at drawing a batch with at least one MLM target.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// Learning-rate schedule; its `total_steps` is the run length.
    pub schedule: ScheduleConfig,
    /// Share of steps trained at `phase1_seq_len`.
    pub phase1_fraction: f64,
    pub phase1_seq_len: usize,
    pub phase2_seq_len: usize,
    pub tokens_per_step: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// 0 writes a checkpoint only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Concatenate consecutive sentences of a document up to the sequence
    /// length; otherwise each sentence is its own sequence.
    pub pack_sentences: bool,
    /// Pair task used when the model carries a sentence-pair head.
    pub pair_objective: PairObjective,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            phase1_fraction: 0.9,
            phase1_seq_len: 128,
            phase2_seq_len: 512,
            tokens_per_step: 4_194_304,
            grad_clip: 2.0,
            weight_decay: 0.1,
            optimizer: OptimizerKind::Lamb,
            checkpoint_every: 0,
            seed: 0,
            pack_sentences: true,
            pair_objective: PairObjective::Document,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.schedule.validate()?;
        let bad = |m: String| Err(TrainingError::Config(m));
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return bad(format!(
                "phase1_fraction {} outside [0, 1]",
                self.phase1_fraction
            ));
        }
        for len in [self.phase1_seq_len, self.phase2_seq_len] {
            if len < 3 {
                return bad(format!("sequence length {len} leaves no room for content"));
            }
            if self.tokens_per_step == 0 || self.tokens_per_step % len != 0 {
                return bad(format!(
                    "tokens_per_step {} is not a multiple of seq_len {len}",
                    self.tokens_per_step
                ));
            }
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Lamb => OptimizerConfig::lamb(self.weight_decay),
            OptimizerKind::AdamW => OptimizerConfig::adamw(self.weight_decay),
        }
    }

    /// Last step (1-based) of the short-sequence phase.
    pub fn phase_boundary(&self) -> u64 {
        (self.phase1_fraction * self.schedule.total_steps as f64).round() as u64
    }

    pub fn seq_len_at(&self, step: u64) -> usize {
        if step <= self.phase_boundary() {
            self.phase1_seq_len
        } else {
            self.phase2_seq_len
        }
    }

    pub fn batch_size_at(&self, step: u64) -> usize {
        self.tokens_per_step / self.seq_len_at(step)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = self.schedule.to_pairs();
        pairs.extend([
            ("phase1_fraction", self.phase1_fraction.to_string()),
            ("phase1_seq_len", self.phase1_seq_len.to_string()),
            ("phase2_seq_len", self.phase2_seq_len.to_string()),
            ("tokens_per_step", self.tokens_per_step.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            ("pack_sentences", self.pack_sentences.to_string()),
            ("pair_objective", self.pair_objective.to_string()),
        ]);
        pairs
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainingError> {
        if self.schedule.set(key, value)? {
            return Ok(true);
        }
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainingError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e: T::Err| TrainingError::Config(format!("{key} = {value}: {e}")))
        }
        match key {
            "phase1_fraction" => self.phase1_fraction = parse(key, value)?,
            "phase1_seq_len" => self.phase1_seq_len = parse(key, value)?,
            "phase2_seq_len" => self.phase2_seq_len = parse(key, value)?,
            "tokens_per_step" => self.tokens_per_step = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "optimizer" => self.optimizer = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "pack_sentences" => self.pack_sentences = parse(key, value)?,
            "pair_objective" => self.pair_objective = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.step, self.lr, self.loss, self.grad_norm
        )
    }
}

/// `[CLS] content [SEP]` sequences of at most `seq_len` tokens. With
/// `pack`, consecutive sentences of one document share a sequence while they
/// fit; an over-long sentence is cut.
pub fn build_sequences(
    docs: &[Vec<Vec<TokenId>>],
    seq_len: usize,
    pack: bool,
) -> Vec<Vec<TokenId>> {
    let budget = seq_len.saturating_sub(2);
    let mut out = Vec::new();
    for doc in docs {
        let mut current: Vec<TokenId> = Vec::new();
        for sentence in doc.iter().filter(|s| !s.is_empty()) {
            if !current.is_empty() && (!pack || current.len() + sentence.len() > budget) {
                out.push(pack_segments(&current, None, seq_len).0);
                current.clear();
            }
            current.extend_from_slice(sentence);
        }
        if !current.is_empty() {
            out.push(pack_segments(&current, None, seq_len).0);
        }
    }
    out
}

/// Masked rows ready for a forward pass.
struct Prepared {
    batch: Batch,
    targets: Vec<Option<TokenId>>,
    pair_labels: Option<Vec<usize>>,
}

fn mask_rows<R: Rng + ?Sized>(
    rows: &[Vec<TokenId>],
    vocab: &Vocabulary,
    masking: &MaskingConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<TokenId>>, Vec<Option<TokenId>>), TrainingError> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    for _ in 0..MAX_REDRAWS {
        let mut corrupted = Vec::with_capacity(rows.len());
        let mut targets = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let p = plan(row, vocab, masking, rng)?;
            let (ids, t) = apply_plan(row, &p, vocab.len(), rng);
            targets.extend(t);
            targets.extend(std::iter::repeat_n(None, width - row.len()));
            corrupted.push(ids);
        }
        if targets.iter().any(Option::is_some) {
            return Ok((corrupted, targets));
        }
    }
    Err(crate::objectives::ObjectiveError::NoTargets.into())
}

/// Mean MLM loss with dropout off, over every sequence once, masks drawn
/// from `seed`.
pub fn evaluate_mlm(
    model: &Model,
    vocab: &Vocabulary,
    sequences: &[Vec<TokenId>],
    masking: &MaskingConfig,
    seed: u64,
) -> Result<f64, TrainingError> {
    if sequences.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let mut rng = batch_rng(seed, u64::MAX);
    let (rows, targets) = mask_rows(sequences, vocab, masking, &mut rng)?;
    let mut batch = Batch::from_rows(&rows)?;
    if model.nsp_head_params().is_some() {
        batch = batch.clone().with_segments(vec![0; batch.ids.len()])?;
    }
    let graph = Graph::new();
    let out = model.forward(&graph, &batch, false, &mut rng)?;
    Ok(total_loss(out.mlm_logits, &targets, None)?.item())
}

/// Owns the model and optimizer state of one pretraining run.
pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: PretrainConfig,
    pub masking: MaskingConfig,
    /// Steps completed so far.
    pub step: u64,
    vocab: &'a Vocabulary,
    docs: &'a [Vec<Vec<TokenId>>],
    phase1: Vec<Vec<TokenId>>,
    phase2: Vec<Vec<TokenId>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Model,
        vocab: &'a Vocabulary,
        docs: &'a [Vec<Vec<TokenId>>],
        masking: MaskingConfig,
        config: PretrainConfig,
    ) -> Result<Self, TrainingError> {
        config.validate()?;
        masking.validate()?;
        if vocab.len() != model.config().vocab_size {
            return Err(TrainingError::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        let max_len = model.config().max_len;
        for len in [config.phase1_seq_len, config.phase2_seq_len] {
            if len > max_len {
                return Err(TrainingError::Config(format!(
                    "seq_len {len} exceeds model max_len {max_len}"
                )));
            }
        }
        let phase1 = build_sequences(docs, config.phase1_seq_len, config.pack_sentences);
        let phase2 = build_sequences(docs, config.phase2_seq_len, config.pack_sentences);
        if phase1.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        if model.nsp_head_params().is_some() {
            PairSampler::new(docs, config.pair_objective)?;
        }
        let optimizer = Optimizer::for_params(config.optimizer_config(), model.params());
        Ok(Self {
            model,
            optimizer,
            config,
            masking,
            step: 0,
            vocab,
            docs,
            phase1,
            phase2,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(&mut self, checkpoint: &Checkpoint) -> Result<(), TrainingError> {
        let model = Model::from_checkpoint(checkpoint)?;
        if model.config() != self.model.config() {
            return Err(TrainingError::Config(
                "checkpoint model config differs".into(),
            ));
        }
        self.optimizer =
            Optimizer::load_from(self.config.optimizer_config(), checkpoint, model.params())?;
        self.step = self.optimizer.step;
        self.model = model;
        Ok(())
    }

    fn prepare(&self, step: u64, rng: &mut impl Rng) -> Result<Prepared, TrainingError> {
        let seq_len = self.config.seq_len_at(step);
        let size = self.config.batch_size_at(step);
        if self.model.nsp_head_params().is_some() {
            let sampler = PairSampler::new(self.docs, self.config.pair_objective)?;
            let mut rows = Vec::with_capacity(size);
            let mut segments = Vec::with_capacity(size);
            let mut labels = Vec::with_capacity(size);
            for _ in 0..size {
                let pair = sampler.sample(rng);
                let (ids, segs) = pair.pack(seq_len);
                rows.push(ids);
                segments.push(segs);
                labels.push(usize::from(pair.positive));
            }
            let (corrupted, targets) = mask_rows(&rows, self.vocab, &self.masking, rng)?;
            let width = corrupted.iter().map(Vec::len).max().unwrap_or(0);
            let flat_segments = segments
                .into_iter()
                .flat_map(|mut s| {
                    s.resize(width, 0);
                    s
                })
                .collect();
            let batch = Batch::from_rows(&corrupted)?.with_segments(flat_segments)?;
            return Ok(Prepared {
                batch,
                targets,
                pair_labels: Some(labels),
            });
        }
        let pool = if seq_len == self.config.phase1_seq_len {
            &self.phase1
        } else {
            &self.phase2
        };
        let rows: Vec<Vec<TokenId>> = (0..size)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        let (corrupted, targets) = mask_rows(&rows, self.vocab, &self.masking, rng)?;
        Ok(Prepared {
            batch: Batch::from_rows(&corrupted)?,
            targets,
            pair_labels: None,
        })
    }

    /// Runs one optimizer step. On a non-finite loss or gradient the model
    /// is left untouched and an error returned.
    pub fn train_step(&mut self) -> Result<StepMetrics, TrainingError> {
        let step = self.step + 1;
        let lr = self.config.schedule.lr_at(step)?;
        let mut rng = batch_rng(self.config.seed, step);
        let prepared = self.prepare(step, &mut rng)?;

        let graph = Graph::new();
        let bound = self.model.params().bind(&graph, true);
        let out = self
            .model
            .forward_bound(&graph, &bound, &prepared.batch, true, &mut rng)?;
        let nsp = match (out.nsp_logits, prepared.pair_labels.as_deref()) {
            (Some(logits), Some(labels)) => Some((logits, labels)),
            _ => None,
        };
        let loss = total_loss(out.mlm_logits, &prepared.targets, nsp)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(TrainingError::NonFinite(format!("loss at step {step}")));
        }
        let grads = graph.backward(loss)?;
        drop(bound);

        let params = self.model.params_mut();
        params.zero_grad();
        params.accumulate(&grads)?;
        let grad_norm = clip_param_gradients(params, self.config.grad_clip)?;
        self.optimizer.step(params, lr)?;
        params.zero_grad();
        self.step = step;
        Ok(StepMetrics {
            step,
            lr,
            loss: loss_value,
            grad_norm,
        })
    }

    /// Model weights, optimizer moments and run metadata.
    pub fn checkpoint(&self) -> Result<Checkpoint, TrainingError> {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.meta.push(("step".into(), self.step.to_string()));
        ckpt.meta
            .push(("seed".into(), self.config.seed.to_string()));
        self.optimizer.save_into(&mut ckpt, self.model.params())?;
        Ok(ckpt)
    }

    /// Trains until `total_steps`. With `out_dir`, appends one metrics line
    /// per step and writes checkpoints atomically; a failed step leaves the
    /// last written checkpoint in place.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<StepMetrics>, TrainingError> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(METRICS_FILE);
                let file = if self.step == 0 {
                    fs::File::create(path)?
                } else {
                    OpenOptions::new().create(true).append(true).open(path)?
                };
                Some(file)
            }
            None => None,
        };
        let mut metrics = Vec::new();
        while self.step < self.config.schedule.total_steps {
            let m = self.train_step()?;
            if let Some(file) = log.as_mut() {
                writeln!(file, "{}", m.to_line())?;
                file.flush()?;
            }
            metrics.push(m);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0
                    && self.step % every == 0
                    && self.step < self.config.schedule.total_steps
                {
                    self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(metrics)
    }
}
