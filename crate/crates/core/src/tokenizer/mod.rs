//! Cased WordPiece-style subword vocabulary.
//!
//! Training is BPE-style: start from the observed characters (continuation
//! characters carry a `##` prefix) and repeatedly merge the most frequent
//! adjacent pair. Inference is greedy longest-prefix matching per
//! whitespace-separated word.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub type TokenId = u32;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const MASK_ID: TokenId = 4;

pub const CONTINUATION: &str = "##";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target size {target} is below the {minimum} specials and observed characters")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("target size {target} unreachable: merges exhausted at {max} tokens")]
    Unreachable { target: usize, max: usize },
    #[error("empty text stream")]
    EmptyStream,
    #[error("threshold must be at least 1")]
    InvalidThreshold,
    #[error("vocabulary line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIAL_TOKENS.len()
}

fn normalize(text: &str) -> String {
    text.nfc().collect()
}

impl Vocabulary {
    /// Builds a vocabulary from tokens that follow the specials.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if i < SPECIAL_TOKENS.len() && token != SPECIAL_TOKENS[i] {
                return Err(TokenizerError::Format {
                    line: i + 1,
                    msg: format!(
                        "expected special token {}, found `{token}`",
                        SPECIAL_TOKENS[i]
                    ),
                });
            }
            if token.is_empty() || token == CONTINUATION || token.chars().any(char::is_whitespace) {
                return Err(TokenizerError::Format {
                    line: i + 1,
                    msg: format!("invalid token `{token}`"),
                });
            }
            if id_of.insert(token.clone(), i as TokenId).is_some() {
                return Err(TokenizerError::Format {
                    line: i + 1,
                    msg: format!("duplicate token `{token}`"),
                });
            }
        }
        Ok(Self { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `true` for `##` pieces, which continue the preceding word.
    pub fn is_continuation(&self, id: TokenId) -> bool {
        self.token(id).is_some_and(|t| t.starts_with(CONTINUATION))
    }

    /// The first `size` tokens, i.e. the vocabulary training would have
    /// produced with a smaller target.
    pub fn truncated(&self, size: usize) -> Result<Self, TokenizerError> {
        Self::from_full_list(self.tokens[..size.clamp(SPECIAL_TOKENS.len(), self.len())].to_vec())
    }

    /// Greedy longest-prefix pieces for a single word; `[UNK]` when some
    /// suffix cannot be matched. A word spelled exactly like a special token
    /// maps to that token.
    pub fn encode_word(&self, word: &str) -> Vec<TokenId> {
        if let Some(i) = SPECIAL_TOKENS.iter().position(|&s| s == word) {
            return vec![i as TokenId];
        }
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain([word.len()])
            .collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::with_capacity(word.len() + 2);
        while start + 1 < bounds.len() {
            let found = (start + 1..bounds.len()).rev().find_map(|end| {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.push_str(&word[bounds[start]..bounds[end]]);
                self.id_of.get(candidate.as_str()).map(|&id| (id, end))
            });
            match found {
                Some((id, end)) if !is_special(id) => {
                    pieces.push(id);
                    start = end;
                }
                _ => return vec![UNK_ID],
            }
        }
        pieces
    }

    /// NFC-normalizes, splits on whitespace and encodes every word.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        normalize(text)
            .split_whitespace()
            .flat_map(|w| self.encode_word(w))
            .collect()
    }

    /// Like [`Vocabulary::encode`] but keeps the per-word grouping.
    pub fn encode_words(&self, text: &str) -> Vec<Vec<TokenId>> {
        normalize(text)
            .split_whitespace()
            .map(|w| self.encode_word(w))
            .collect()
    }

    /// Strips `##` and joins; words are separated by single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).unwrap_or(SPECIAL_TOKENS[UNK_ID as usize]);
            match token.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(token);
                }
            }
        }
        out
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let tokens = reader.lines().collect::<Result<Vec<_>, _>>()?;
        Self::from_full_list(tokens)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TokenizerError> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains a vocabulary of exactly `target_size` tokens.
///
/// Merge rule: the adjacent pair with the highest corpus frequency wins,
/// ties broken by the lexicographically smallest `(left, right)` strings.
/// Words spelled like special tokens are skipped, and a merge that would
/// spell a special token is never taken.
pub fn train_vocab<I, S>(lines: I, target_size: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in lines {
        for word in normalize(line.as_ref()).split_whitespace() {
            if !SPECIAL_TOKENS.contains(&word) {
                *word_counts.entry(word.to_string()).or_default() += 1;
            }
        }
    }

    let spelled = |word: &str| -> Vec<String> {
        word.chars()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    c.to_string()
                } else {
                    format!("{CONTINUATION}{c}")
                }
            })
            .collect()
    };
    let alphabet: BTreeSet<String> = word_counts.keys().flat_map(|w| spelled(w)).collect();
    let minimum = SPECIAL_TOKENS.len() + alphabet.len();
    if target_size < minimum {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            minimum,
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut id_of: HashMap<String, TokenId> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    let mut words: Vec<(Vec<TokenId>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (spelled(w).iter().map(|p| id_of[p]).collect(), c))
        .collect();
    let mut forbidden: HashSet<(TokenId, TokenId)> = HashSet::new();

    while tokens.len() < target_size {
        let mut pairs: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (pieces, count) in &words {
            for pair in pieces.windows(2) {
                let key = (pair[0], pair[1]);
                if !forbidden.contains(&key) {
                    *pairs.entry(key).or_default() += count;
                }
            }
        }
        let best = pairs.into_iter().max_by(|(a, ca), (b, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&tokens[a.0 as usize], &tokens[a.1 as usize]);
                let kb = (&tokens[b.0 as usize], &tokens[b.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else {
            return Err(TokenizerError::Unreachable {
                target: target_size,
                max: tokens.len(),
            });
        };
        let merged = format!(
            "{}{}",
            tokens[left as usize],
            tokens[right as usize]
                .strip_prefix(CONTINUATION)
                .unwrap_or(&tokens[right as usize])
        );
        if SPECIAL_TOKENS.contains(&merged.as_str()) {
            forbidden.insert((left, right));
            continue;
        }
        let new_id = *id_of.entry(merged.clone()).or_insert_with(|| {
            tokens.push(merged);
            (tokens.len() - 1) as TokenId
        });
        for (pieces, _) in &mut words {
            let mut out = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && pieces[i] == left && pieces[i + 1] == right {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(pieces[i]);
                    i += 1;
                }
            }
            *pieces = out;
        }
    }
    Vocabulary::from_full_list(tokens)
}

/// Occurrence count of every token id when encoding `lines`.
pub fn token_counts<I, S>(vocab: &Vocabulary, lines: I) -> Result<Vec<u64>, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts = vec![0u64; vocab.len()];
    let mut any = false;
    for line in lines {
        any = true;
        for id in vocab.encode(line.as_ref()) {
            counts[id as usize] += 1;
        }
    }
    if !any {
        return Err(TokenizerError::EmptyStream);
    }
    Ok(counts)
}

/// Fraction of non-special tokens whose count reaches `threshold`.
pub fn coverage_from_counts(counts: &[u64], threshold: u64) -> Result<f64, TokenizerError> {
    if threshold == 0 {
        return Err(TokenizerError::InvalidThreshold);
    }
    let regular = counts.get(SPECIAL_TOKENS.len()..).unwrap_or_default();
    if regular.is_empty() {
        return Ok(0.0);
    }
    let covered = regular.iter().filter(|&&c| c >= threshold).count();
    Ok(covered as f64 / regular.len() as f64)
}

/// Fraction of the (non-special) vocabulary that occurs at least
/// `threshold` times in `lines`.
pub fn coverage_report<I, S>(
    vocab: &Vocabulary,
    lines: I,
    threshold: u64,
) -> Result<f64, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if threshold == 0 {
        return Err(TokenizerError::InvalidThreshold);
    }
    coverage_from_counts(&token_counts(vocab, lines)?, threshold)
}

/// Writes the `token<TAB>count` sidecar.
pub fn save_counts(vocab: &Vocabulary, counts: &[u64], path: &Path) -> Result<(), TokenizerError> {
    let mut text = String::new();
    for (token, count) in vocab.tokens().iter().zip(counts) {
        text.push_str(&format!("{token}\t{count}\n"));
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_counts(vocab: &Vocabulary, path: &Path) -> Result<Vec<u64>, TokenizerError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut counts = vec![0u64; vocab.len()];
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let format = |msg: String| TokenizerError::Format { line: n + 1, msg };
        let (token, count) = line
            .split_once('\t')
            .ok_or_else(|| format("missing tab".into()))?;
        let id = vocab
            .id(token)
            .ok_or_else(|| format(format!("unknown token `{token}`")))?;
        counts[id as usize] = count
            .parse()
            .map_err(|_| format(format!("bad count `{count}`")))?;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests;
