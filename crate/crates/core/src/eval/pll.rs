use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;
use crate::model::{Batch, Model};
use crate::numerics::Graph;
use crate::tokenizer::{TokenId, Vocabulary, CLS_ID, MASK_ID, SEP_ID};

/// `[CLS] ids [SEP]`.
pub fn frame(ids: &[TokenId]) -> Vec<TokenId> {
    let mut framed = Vec::with_capacity(ids.len() + 2);
    framed.push(CLS_ID);
    framed.extend_from_slice(ids);
    framed.push(SEP_ID);
    framed
}

fn log_prob(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[target] - log_z
}

fn check(model: &Model, ids: &[TokenId]) -> Result<(), EvalError> {
    if ids.is_empty() {
        return Err(EvalError::EmptySentence);
    }
    let max_len = model.config().max_len;
    if ids.len() + 2 > max_len {
        return Err(EvalError::TooLong {
            len: ids.len() + 2,
            max_len,
        });
    }
    Ok(())
}

/// Frozen forward over `rows` (each already framed, equal length); returns
/// the MLM logits as a flat `rows x len x vocab` buffer.
fn logits(model: &Model, rows: &[Vec<TokenId>]) -> Result<Vec<f64>, EvalError> {
    let mut batch = Batch::from_rows(rows)?;
    if model.nsp_head_params().is_some() {
        let n = batch.ids.len();
        batch = batch.with_segments(vec![0; n])?;
    }
    let graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(model
        .forward(&graph, &batch, false, &mut rng)?
        .mlm_logits
        .to_vec())
}

/// Pseudo-log-likelihood of content ids (no specials): each position is
/// masked in its own row of one batch and scored by the log-probability of
/// its original id.
pub fn pll_ids(model: &Model, ids: &[TokenId]) -> Result<f64, EvalError> {
    check(model, ids)?;
    let framed = frame(ids);
    let (len, vocab) = (framed.len(), model.config().vocab_size);
    let rows: Vec<Vec<TokenId>> = (1..=ids.len())
        .map(|t| {
            let mut row = framed.clone();
            row[t] = MASK_ID;
            row
        })
        .collect();
    let flat = logits(model, &rows)?;
    Ok((1..=ids.len())
        .map(|t| {
            let start = ((t - 1) * len + t) * vocab;
            log_prob(&flat[start..start + vocab], framed[t] as usize)
        })
        .sum())
}

/// One forward per position; the reference for [`pll_ids`].
pub fn pll_ids_naive(model: &Model, ids: &[TokenId]) -> Result<f64, EvalError> {
    check(model, ids)?;
    let framed = frame(ids);
    let vocab = model.config().vocab_size;
    let mut total = 0.0;
    for t in 1..=ids.len() {
        let mut row = framed.clone();
        row[t] = MASK_ID;
        let flat = logits(model, &[row])?;
        total += log_prob(&flat[t * vocab..(t + 1) * vocab], framed[t] as usize);
    }
    Ok(total)
}

pub fn pll_score(model: &Model, vocab: &Vocabulary, sentence: &str) -> Result<f64, EvalError> {
    pll_ids(model, &vocab.encode(sentence))
}
