use std::collections::{HashSet, VecDeque};

use proptest::prelude::*;

use super::*;

fn toy_vocab() -> Vocabulary {
    Vocabulary::from_tokens([
        "un", "##aff", "##able", "u", "##n", "##a", "##f", "##b", "##l", "##e", "a", "b", "l", "e",
        "f",
    ])
    .unwrap()
}

/// Fewest merges of adjacent pieces that turn `word` into a single piece,
/// found by breadth-first search over every possible merge order.
fn min_merges_to_single(word: &str) -> usize {
    let start: Vec<String> = word.chars().map(String::from).collect();
    let mut seen = HashSet::new();
    let mut queue = VecDeque::from([(start, 0)]);
    while let Some((pieces, steps)) = queue.pop_front() {
        if pieces.len() == 1 {
            return steps;
        }
        for i in 0..pieces.len() - 1 {
            let mut next = pieces.clone();
            let right = next.remove(i + 1);
            next[i].push_str(&right);
            if seen.insert(next.clone()) {
                queue.push_back((next, steps + 1));
            }
        }
    }
    unreachable!()
}

#[test]
fn specials_take_low_ids() {
    let vocab = toy_vocab();
    for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
        assert_eq!(vocab.id(s), Some(i as TokenId));
    }
    assert_eq!(vocab.id("[MASK]"), Some(MASK_ID));
}

#[test]
fn whole_word_target_matches_merge_search() {
    // alphabet as observed: a, ##a, ##b
    let minimum = SPECIAL_TOKENS.len() + 3 + min_merges_to_single("aaab");
    assert_eq!(minimum, 11);
    let corpus = ["aaab aaab aaab"];
    let vocab = train_vocab(corpus, minimum).unwrap();
    assert!(vocab.id("aaab").is_some());
    assert_eq!(vocab.encode("aaab"), vec![vocab.id("aaab").unwrap()]);
    let smaller = train_vocab(corpus, minimum - 1).unwrap();
    assert!(smaller.id("aaab").is_none());
}

#[test]
fn target_below_alphabet_is_rejected() {
    let err = train_vocab(["abc def"], 8).unwrap_err();
    assert!(
        matches!(err, TokenizerError::TargetTooSmall { minimum: 11, .. }),
        "{err}"
    );
}

#[test]
fn unreachable_target_reports_maximum() {
    match train_vocab(["ab"], 100).unwrap_err() {
        TokenizerError::Unreachable { max, .. } => assert_eq!(max, 5 + 2 + 1),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn training_is_deterministic_and_exact_size() {
    let corpus = [
        "the cat sat on the mat",
        "the dog sat on the log",
        "cats and dogs",
    ];
    let a = train_vocab(corpus, 30).unwrap();
    let b = train_vocab(corpus, 30).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 30);
}

#[test]
fn encode_examples() {
    let vocab = toy_vocab();
    assert!(vocab.encode("").is_empty());
    assert_eq!(vocab.encode("un"), vec![vocab.id("un").unwrap()]);
    let ids = vocab.encode("unaffable");
    let expected: Vec<_> = ["un", "##aff", "##able"]
        .iter()
        .map(|t| vocab.id(t).unwrap())
        .collect();
    assert_eq!(ids, expected);
    assert_eq!(vocab.encode("unaffablez"), vec![UNK_ID]);
    assert_eq!(
        vocab.encode("[UNK] un"),
        vec![UNK_ID, vocab.id("un").unwrap()]
    );
}

#[test]
fn casing_is_preserved() {
    let vocab = train_vocab(["Cat cat"], 12).unwrap();
    assert_ne!(vocab.encode("Cat"), vocab.encode("cat"));
}

#[test]
fn merges_never_spell_specials() {
    let vocab = train_vocab(["[PAD]x [PAD]x [PAD]x"], 14).unwrap();
    let specials = vocab
        .tokens()
        .iter()
        .filter(|t| SPECIAL_TOKENS.contains(&t.as_str()))
        .count();
    assert_eq!(specials, SPECIAL_TOKENS.len());
}

#[test]
fn coverage_examples() {
    assert_eq!(
        coverage_from_counts(&[0, 0, 0, 0, 0, 5, 5, 1, 0], 2).unwrap(),
        0.5
    );
    let vocab = train_vocab(["ab ab ab"], 7).unwrap();
    assert_eq!(coverage_report(&vocab, ["ab ab"], 2).unwrap(), 1.0);
    let empty: [&str; 0] = [];
    assert!(matches!(
        coverage_report(&vocab, empty, 2),
        Err(TokenizerError::EmptyStream)
    ));
    assert!(matches!(
        coverage_report(&vocab, ["ab"], 0),
        Err(TokenizerError::InvalidThreshold)
    ));
}

#[test]
fn vocab_and_counts_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = train_vocab(["the cat sat on the mat"], 20).unwrap();
    let path = dir.path().join("vocab.txt");
    vocab.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    let counts = token_counts(&vocab, ["the cat sat"]).unwrap();
    let counts_path = dir.path().join("counts.tsv");
    save_counts(&vocab, &counts, &counts_path).unwrap();
    assert_eq!(load_counts(&vocab, &counts_path).unwrap(), counts);
}

#[test]
fn malformed_vocab_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\na\n").unwrap();
    assert!(matches!(
        Vocabulary::load(&path),
        Err(TokenizerError::Format { line: 7, .. })
    ));
    fs::write(&path, "a\n").unwrap();
    assert!(matches!(
        Vocabulary::load(&path),
        Err(TokenizerError::Format { line: 1, .. })
    ));
}

proptest! {
    #[test]
    fn decode_inverts_encode(words in prop::collection::vec("[a-dA-D]{1,8}", 1..6)) {
        let corpus = words.join(" ");
        let alphabet: String = "abcdABCD".chars().map(|c| format!("{c}{c} ")).collect();
        let vocab = train_vocab([alphabet.as_str(), "abcd ABCD bcda BCDA"], 30).unwrap();
        prop_assert_eq!(vocab.decode(&vocab.encode(&corpus)), corpus);
    }

    #[test]
    fn encoding_is_prefix_stable(a in "[a-e]{1,6}", b in "[a-e]{1,6}") {
        let vocab = train_vocab(["abcde edcba aabbcc ddeeab cabbed"], 20).unwrap();
        let mut joined = vocab.encode(&a);
        joined.extend(vocab.encode(&b));
        prop_assert_eq!(vocab.encode(&format!("{a} {b}")), joined);
    }
}
