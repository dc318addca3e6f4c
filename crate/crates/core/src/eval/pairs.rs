use std::collections::BTreeMap;

use super::pll::pll_ids;
use super::EvalError;
use crate::model::Model;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalPair {
    pub phenomenon: String,
    pub good: String,
    pub bad: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenomenonScore {
    pub phenomenon: String,
    pub pairs: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    /// Sorted by phenomenon name.
    pub phenomena: Vec<PhenomenonScore>,
    pub pairs: usize,
    pub accuracy: f64,
}

impl PairReport {
    /// One tab-separated row per phenomenon, then the overall row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("phenomenon\tpairs\taccuracy\n");
        for p in &self.phenomena {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\n",
                p.phenomenon, p.pairs, p.accuracy
            ));
        }
        out.push_str(&format!("overall\t{}\t{:.4}\n", self.pairs, self.accuracy));
        out
    }
}

/// 1 when the good sentence scores higher, 0.5 on an exact tie, else 0.
pub fn pair_outcome(good: f64, bad: f64) -> f64 {
    if good > bad {
        1.0
    } else if good == bad {
        0.5
    } else {
        0.0
    }
}

fn outcome(model: &Model, vocab: &Vocabulary, pair: &MinimalPair) -> Result<f64, EvalError> {
    let good = pll_ids(model, &vocab.encode(&pair.good))?;
    let bad = pll_ids(model, &vocab.encode(&pair.bad))?;
    Ok(pair_outcome(good, bad))
}

/// Scores every pair by PLL on up to `threads` worker threads. Outcomes are
/// collected by pair index and summed in that order, so the report does not
/// depend on the thread count.
pub fn minimal_pair_eval(
    model: &Model,
    vocab: &Vocabulary,
    pairs: &[MinimalPair],
    threads: usize,
) -> Result<PairReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("minimal pairs"));
    }
    let threads = threads.clamp(1, pairs.len());
    let chunk = pairs.len().div_ceil(threads);
    let outcomes: Vec<f64> = if threads == 1 {
        pairs
            .iter()
            .map(|p| outcome(model, vocab, p))
            .collect::<Result<_, _>>()?
    } else {
        let results: Vec<Result<Vec<f64>, EvalError>> = std::thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || part.iter().map(|p| outcome(model, vocab, p)).collect())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring thread panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(pairs.len());
        for part in results {
            all.extend(part?);
        }
        all
    };

    let mut groups: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (pair, &o) in pairs.iter().zip(&outcomes) {
        let entry = groups.entry(&pair.phenomenon).or_default();
        entry.0 += 1;
        entry.1 += o;
    }
    let phenomena = groups
        .into_iter()
        .map(|(name, (n, sum))| PhenomenonScore {
            phenomenon: name.to_string(),
            pairs: n,
            accuracy: sum / n as f64,
        })
        .collect();
    let accuracy = outcomes.iter().sum::<f64>() / pairs.len() as f64;
    Ok(PairReport {
        phenomena,
        pairs: pairs.len(),
        accuracy,
    })
}
