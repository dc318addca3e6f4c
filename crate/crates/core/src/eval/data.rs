//! Tab-separated dataset readers.

use super::finetune::{ClassifierExample, TaskKind};
use super::pairs::MinimalPair;
use super::probe::ProbeExample;
use super::EvalError;
use crate::tokenizer::{TokenId, Vocabulary, CLS_ID, SEP_ID};

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn format_error(line: usize, msg: impl Into<String>) -> EvalError {
    EvalError::Format {
        line,
        msg: msg.into(),
    }
}

/// `phenomenon<TAB>good<TAB>bad` per line.
pub fn parse_minimal_pairs(text: &str) -> Result<Vec<MinimalPair>, EvalError> {
    lines(text)
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let [phenomenon, good, bad] = fields[..] else {
                return Err(format_error(
                    n,
                    format!("expected 3 fields, found {}", fields.len()),
                ));
            };
            if good == bad {
                return Err(format_error(n, "good and bad sentences are identical"));
            }
            Ok(MinimalPair {
                phenomenon: phenomenon.into(),
                good: good.into(),
                bad: bad.into(),
            })
        })
        .collect()
}

/// Maps label strings to class indices. With `known`, labels must come from
/// it; otherwise the sorted distinct labels define the classes.
fn index_labels(
    raw: &[(usize, String)],
    known: Option<&[String]>,
) -> Result<(Vec<usize>, Vec<String>), EvalError> {
    let classes: Vec<String> = match known {
        Some(k) => k.to_vec(),
        None => {
            let mut c: Vec<String> = raw.iter().map(|(_, l)| l.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let ids = raw
        .iter()
        .map(|(n, l)| {
            classes
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| format_error(*n, format!("unknown label {l:?}")))
        })
        .collect::<Result<_, _>>()?;
    Ok((ids, classes))
}

/// `label<TAB>s1_start<TAB>s1_end[<TAB>s2_start<TAB>s2_end]<TAB>tokens`,
/// spans counted in whitespace-separated words. Words are encoded with
/// `vocab` and the sequence framed with `[CLS]`/`[SEP]`; spans are mapped to
/// the covering subword positions. Returns examples and class names.
pub fn parse_probe_examples(
    text: &str,
    vocab: &Vocabulary,
    known_labels: Option<&[String]>,
) -> Result<(Vec<ProbeExample>, Vec<String>), EvalError> {
    let mut raw_labels = Vec::new();
    let mut examples = Vec::new();
    for (n, line) in lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 && fields.len() != 6 {
            return Err(format_error(
                n,
                format!("expected 4 or 6 fields, found {}", fields.len()),
            ));
        }
        let nums = fields[1..fields.len() - 1]
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|e| format_error(n, format!("span bound {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let words: Vec<&str> = fields[fields.len() - 1].split_whitespace().collect();
        let mut ids: Vec<TokenId> = vec![CLS_ID];
        let mut starts = Vec::with_capacity(words.len() + 1);
        for w in &words {
            starts.push(ids.len());
            ids.extend(vocab.encode_word(w));
        }
        starts.push(ids.len());
        ids.push(SEP_ID);
        let span = |s: usize, e: usize| {
            if e <= s || e > words.len() {
                Err(format_error(
                    n,
                    format!("span [{s}, {e}) outside {} words", words.len()),
                ))
            } else {
                Ok((starts[s], starts[e]))
            }
        };
        let span1 = span(nums[0], nums[1])?;
        let span2 = if nums.len() == 4 {
            Some(span(nums[2], nums[3])?)
        } else {
            None
        };
        raw_labels.push((n, fields[0].to_string()));
        examples.push(ProbeExample {
            ids,
            span1,
            span2,
            label: 0,
        });
    }
    let (ids, classes) = index_labels(&raw_labels, known_labels)?;
    for (ex, id) in examples.iter_mut().zip(ids) {
        ex.label = id;
    }
    Ok((examples, classes))
}

/// `label<TAB>text_a[<TAB>text_b]`. Regression labels are parsed as numbers;
/// class names otherwise (returned for classification tasks).
pub fn parse_classifier_examples(
    text: &str,
    vocab: &Vocabulary,
    kind: TaskKind,
    known_labels: Option<&[String]>,
) -> Result<(Vec<ClassifierExample>, Vec<String>), EvalError> {
    let mut raw_labels = Vec::new();
    let mut examples = Vec::new();
    for (n, line) in lines(text) {
        let fields: Vec<&str> = line.split('\t').collect();
        let (label, a, b) = match fields[..] {
            [l, a] => (l, a, None),
            [l, a, b] => (l, a, Some(b)),
            _ => {
                return Err(format_error(
                    n,
                    format!("expected 2 or 3 fields, found {}", fields.len()),
                ))
            }
        };
        let value = if kind == TaskKind::Regression {
            label
                .parse::<f64>()
                .map_err(|e| format_error(n, format!("label {label:?}: {e}")))?
        } else {
            raw_labels.push((n, label.to_string()));
            0.0
        };
        examples.push(ClassifierExample {
            a: vocab.encode(a),
            b: b.map(|b| vocab.encode(b)),
            label: value,
        });
    }
    if kind == TaskKind::Regression {
        return Ok((examples, Vec::new()));
    }
    let (ids, classes) = index_labels(&raw_labels, known_labels)?;
    for (ex, id) in examples.iter_mut().zip(ids) {
        ex.label = id as f64;
    }
    Ok((examples, classes))
}
