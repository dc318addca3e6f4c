//! Masked-language-modeling corruption plans (subword, whole-word, span),
//! sentence-pair sampling and the combined training loss.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use thiserror::Error;

use crate::model::text_enum;
use crate::numerics::{NumericsError, Var};
use crate::tokenizer::{is_special, TokenId, Vocabulary, CLS_ID, MASK_ID, SEP_ID, SPECIAL_TOKENS};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid masking config: {0}")]
    InvalidConfig(String),
    #[error("word boundaries do not partition the non-special positions: {0}")]
    NotAPartition(String),
    #[error("no position carries an MLM target")]
    NoTargets,
    #[error("{0}")]
    Pairs(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

text_enum!(
    MaskStrategy { Subword => "subword", WholeWord => "whole_word", Span => "span" }
);

text_enum!(
    /// Sentence-pair discrimination task.
    PairObjective { Document => "document", Order => "order" }
);

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingConfig {
    pub select_rate: f64,
    pub mask_rate: f64,
    pub random_rate: f64,
    pub keep_rate: f64,
    pub strategy: MaskStrategy,
    /// Success probability of the geometric span-length law.
    pub span_p: f64,
    pub span_mod: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_rate: 0.8,
            random_rate: 0.1,
            keep_rate: 0.1,
            strategy: MaskStrategy::Subword,
            span_p: 1.0 / 3.0,
            span_mod: 10,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let invalid = |msg: String| Err(ObjectiveError::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.select_rate) {
            return invalid(format!("select_rate {} outside [0, 1)", self.select_rate));
        }
        let split = [self.mask_rate, self.random_rate, self.keep_rate];
        if split.iter().any(|r| !(0.0..=1.0).contains(r))
            || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return invalid(format!(
                "corruption split {split:?} must be rates summing to 1"
            ));
        }
        if !(self.span_p > 0.0 && self.span_p <= 1.0) {
            return invalid(format!("span_p {} outside (0, 1]", self.span_p));
        }
        if self.span_mod < 2 {
            return invalid(format!("span_mod {} must be at least 2", self.span_mod));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("select_rate", self.select_rate.to_string()),
            ("mask_rate", self.mask_rate.to_string()),
            ("random_rate", self.random_rate.to_string()),
            ("keep_rate", self.keep_rate.to_string()),
            ("strategy", self.strategy.to_string()),
            ("span_p", self.span_p.to_string()),
            ("span_mod", self.span_mod.to_string()),
        ]
    }

    /// Sets one field from text; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ObjectiveError> {
        let bad = |e: String| ObjectiveError::InvalidConfig(format!("{key} = {value}: {e}"));
        let float = || value.parse::<f64>().map_err(|e| bad(e.to_string()));
        match key {
            "select_rate" => self.select_rate = float()?,
            "mask_rate" => self.mask_rate = float()?,
            "random_rate" => self.random_rate = float()?,
            "keep_rate" => self.keep_rate = float()?,
            "strategy" => self.strategy = value.parse().map_err(bad)?,
            "span_p" => self.span_p = float()?,
            "span_mod" => {
                self.span_mod = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Selected positions, ascending, with their corruption action.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub selected: Vec<(usize, MaskAction)>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().map(|&(p, _)| p)
    }

    fn from_actions(actions: Vec<Option<MaskAction>>) -> Self {
        let selected = actions
            .into_iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|a| (i, a)))
            .collect();
        Self { selected }
    }
}

fn sample_action<R: Rng + ?Sized>(cfg: &MaskingConfig, rng: &mut R) -> MaskAction {
    let u: f64 = rng.random();
    if u < cfg.mask_rate {
        MaskAction::Mask
    } else if u < cfg.mask_rate + cfg.random_rate {
        MaskAction::Random
    } else {
        MaskAction::Keep
    }
}

/// Number of positions a coverage-driven strategy must reach.
fn coverage_target(cfg: &MaskingConfig, candidates: usize) -> usize {
    (cfg.select_rate * candidates as f64).ceil() as usize
}

/// Each non-special position is selected independently with
/// `select_rate`, then given its own action.
pub fn plan_subword<R: Rng + ?Sized>(
    ids: &[TokenId],
    cfg: &MaskingConfig,
    rng: &mut R,
) -> MaskPlan {
    let mut selected = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if !is_special(id) && rng.random::<f64>() < cfg.select_rate {
            selected.push((i, sample_action(cfg, rng)));
        }
    }
    MaskPlan { selected }
}

/// Groups non-special positions into words: a word is a head piece plus the
/// `##` pieces that follow it.
pub fn word_boundaries(ids: &[TokenId], vocab: &Vocabulary) -> Vec<Range<usize>> {
    let mut words: Vec<Range<usize>> = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        if is_special(id) {
            continue;
        }
        match words.last_mut() {
            Some(last) if vocab.is_continuation(id) && last.end == i => last.end = i + 1,
            _ => words.push(i..i + 1),
        }
    }
    words
}

/// Selects whole words in random order until at least `select_rate` of the
/// non-special positions are covered; all pieces of a word share one action.
pub fn plan_whole_word<R: Rng + ?Sized>(
    ids: &[TokenId],
    words: &[Range<usize>],
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskPlan, ObjectiveError> {
    let mut owner = vec![false; ids.len()];
    for w in words {
        if w.is_empty() || w.end > ids.len() {
            return Err(ObjectiveError::NotAPartition(format!("bad word {w:?}")));
        }
        for i in w.clone() {
            if owner[i] || is_special(ids[i]) {
                return Err(ObjectiveError::NotAPartition(format!(
                    "position {i} in word {w:?}"
                )));
            }
            owner[i] = true;
        }
    }
    if let Some(i) = (0..ids.len()).find(|&i| !owner[i] && !is_special(ids[i])) {
        return Err(ObjectiveError::NotAPartition(format!(
            "position {i} belongs to no word"
        )));
    }
    let candidates = owner.iter().filter(|&&o| o).count();
    let target = coverage_target(cfg, candidates);
    let mut order: Vec<usize> = (0..words.len()).collect();
    order.shuffle(rng);
    let mut actions = vec![None; ids.len()];
    let mut covered = 0;
    for w in order {
        if covered >= target {
            break;
        }
        let action = sample_action(cfg, rng);
        for i in words[w].clone() {
            actions[i] = Some(action);
        }
        covered += words[w].len();
    }
    Ok(MaskPlan::from_actions(actions))
}

/// Geometric failure count with success probability `p`, reduced modulo
/// `modulus`; a zero result is redrawn.
pub fn sample_span_length<R: Rng + ?Sized>(p: f64, modulus: usize, rng: &mut R) -> usize {
    let geometric = Geometric::new(p).expect("span_p validated to lie in (0, 1]");
    loop {
        let length = (geometric.sample(rng) % modulus as u64) as usize;
        if length > 0 {
            return length;
        }
    }
}

/// Marks random spans until at least `select_rate` of the non-special
/// positions are covered. Spans start at an unselected non-special position
/// and stop early at a special token or the end of the sequence.
pub fn plan_span<R: Rng + ?Sized>(ids: &[TokenId], cfg: &MaskingConfig, rng: &mut R) -> MaskPlan {
    let candidates = ids.iter().filter(|&&id| !is_special(id)).count();
    let target = coverage_target(cfg, candidates);
    let mut actions: Vec<Option<MaskAction>> = vec![None; ids.len()];
    let mut covered = 0;
    while covered < target {
        let length = sample_span_length(cfg.span_p, cfg.span_mod, rng);
        let starts: Vec<usize> = (0..ids.len())
            .filter(|&i| actions[i].is_none() && !is_special(ids[i]))
            .collect();
        let start = starts[rng.random_range(0..starts.len())];
        let action = sample_action(cfg, rng);
        for i in start..(start + length).min(ids.len()) {
            if is_special(ids[i]) {
                break;
            }
            if actions[i].is_none() {
                actions[i] = Some(action);
                covered += 1;
            }
        }
    }
    MaskPlan::from_actions(actions)
}

/// Dispatches on `cfg.strategy`.
pub fn plan<R: Rng + ?Sized>(
    ids: &[TokenId],
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Result<MaskPlan, ObjectiveError> {
    Ok(match cfg.strategy {
        MaskStrategy::Subword => plan_subword(ids, cfg, rng),
        MaskStrategy::WholeWord => plan_whole_word(ids, &word_boundaries(ids, vocab), cfg, rng)?,
        MaskStrategy::Span => plan_span(ids, cfg, rng),
    })
}

/// Corrupts `ids` according to `plan`. Targets hold the original id at
/// selected positions and `None` elsewhere.
pub fn apply_plan<R: Rng + ?Sized>(
    ids: &[TokenId],
    plan: &MaskPlan,
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<Option<TokenId>>) {
    let mut corrupted = ids.to_vec();
    let mut targets = vec![None; ids.len()];
    for &(i, action) in &plan.selected {
        targets[i] = Some(ids[i]);
        corrupted[i] = match action {
            MaskAction::Mask => MASK_ID,
            MaskAction::Random => {
                rng.random_range(SPECIAL_TOKENS.len() as TokenId..vocab_size as TokenId)
            }
            MaskAction::Keep => ids[i],
        };
    }
    (corrupted, targets)
}

/// Independent generator for batch `index`, so batches can be built in any
/// order or on any thread.
pub fn batch_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed ^ index)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPair {
    pub a: Vec<TokenId>,
    pub b: Vec<TokenId>,
    /// `true` for a genuine continuation in the original order.
    pub positive: bool,
    pub objective: PairObjective,
}

/// `[CLS] a [SEP]`, or `[CLS] a [SEP] b [SEP]` when `b` is given, trimming
/// the longer segment first until the whole input fits `max_len`. Returns
/// ids and segment indices.
pub fn pack_segments(
    a: &[TokenId],
    b: Option<&[TokenId]>,
    max_len: usize,
) -> (Vec<TokenId>, Vec<u8>) {
    let specials = if b.is_some() { 3 } else { 2 };
    let budget = max_len.saturating_sub(specials);
    let (mut la, mut lb) = (a.len(), b.map_or(0, <[TokenId]>::len));
    while la + lb > budget {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let mut ids = Vec::with_capacity(la + lb + specials);
    ids.push(CLS_ID);
    ids.extend_from_slice(&a[..la]);
    ids.push(SEP_ID);
    let mut segments = vec![0u8; ids.len()];
    if let Some(b) = b {
        ids.extend_from_slice(&b[..lb]);
        ids.push(SEP_ID);
        segments.resize(ids.len(), 1);
    }
    (ids, segments)
}

impl SegmentPair {
    pub fn pack(&self, max_len: usize) -> (Vec<TokenId>, Vec<u8>) {
        pack_segments(&self.a, Some(&self.b), max_len)
    }
}

/// Draws sentence pairs from a corpus of documents, each a list of
/// segments. Positive and negative pairs are equally likely.
pub struct PairSampler<'a> {
    docs: &'a [Vec<Vec<TokenId>>],
    objective: PairObjective,
    /// (document, segment) starts that have a following segment.
    anchors: Vec<(usize, usize)>,
}

impl<'a> PairSampler<'a> {
    pub fn new(
        docs: &'a [Vec<Vec<TokenId>>],
        objective: PairObjective,
    ) -> Result<Self, ObjectiveError> {
        if objective == PairObjective::Document && docs.len() < 2 {
            return Err(ObjectiveError::Pairs(
                "the document objective needs at least 2 documents".into(),
            ));
        }
        let anchors: Vec<(usize, usize)> = docs
            .iter()
            .enumerate()
            .flat_map(|(d, segs)| (0..segs.len().saturating_sub(1)).map(move |s| (d, s)))
            .collect();
        if anchors.is_empty() {
            return Err(ObjectiveError::Pairs(
                "no document has two consecutive segments".into(),
            ));
        }
        Ok(Self {
            docs,
            objective,
            anchors,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SegmentPair {
        let (d, s) = self.anchors[rng.random_range(0..self.anchors.len())];
        let first = self.docs[d][s].clone();
        let next = self.docs[d][s + 1].clone();
        let positive = rng.random_bool(0.5);
        let (a, b) = match (self.objective, positive) {
            (_, true) => (first, next),
            (PairObjective::Order, false) => (next, first),
            (PairObjective::Document, false) => {
                let other = loop {
                    let o = rng.random_range(0..self.docs.len());
                    if o != d && !self.docs[o].is_empty() {
                        break o;
                    }
                };
                let segs = &self.docs[other];
                (first, segs[rng.random_range(0..segs.len())].clone())
            }
        };
        SegmentPair {
            a,
            b,
            positive,
            objective: self.objective,
        }
    }
}

/// `n` pairs from [`PairSampler`].
pub fn make_pairs<R: Rng + ?Sized>(
    docs: &[Vec<Vec<TokenId>>],
    objective: PairObjective,
    n: usize,
    rng: &mut R,
) -> Result<Vec<SegmentPair>, ObjectiveError> {
    let sampler = PairSampler::new(docs, objective)?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

/// Mean MLM cross-entropy over positions with a target, plus the
/// sentence-pair cross-entropy (weight 1) when logits and labels are given.
pub fn total_loss<'g>(
    mlm_logits: Var<'g>,
    mlm_targets: &[Option<TokenId>],
    nsp: Option<(Var<'g>, &[usize])>,
) -> Result<Var<'g>, ObjectiveError> {
    if mlm_targets.iter().all(Option::is_none) {
        return Err(ObjectiveError::NoTargets);
    }
    let shape = mlm_logits.shape();
    let vocab = *shape.last().expect("logits have a vocabulary axis");
    let rows = shape.iter().product::<usize>() / vocab;
    let targets: Vec<Option<usize>> = mlm_targets.iter().map(|t| t.map(|t| t as usize)).collect();
    let mut loss = mlm_logits
        .reshape(&[rows, vocab])?
        .cross_entropy(&targets)?;
    if let Some((logits, labels)) = nsp {
        let labels: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        loss = loss.add(logits.cross_entropy(&labels)?)?;
    }
    Ok(loss)
}
