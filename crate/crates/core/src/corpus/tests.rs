use proptest::prelude::*;

use super::*;

fn words(text: &str) -> Sentence {
    Sentence(
        text.split_whitespace()
            .map(|w| Piece::Word(w.to_string()))
            .collect(),
    )
}

fn doc(blocks: Vec<Block>) -> Document {
    Document {
        id: "d".into(),
        kind: DocKind::Written,
        blocks,
    }
}

#[test]
fn minimal_document() {
    let parsed = parse_source("<doc id=a><h1>T</h1><p><s>Hi.</s></p></doc>").unwrap();
    assert_eq!(
        parsed,
        Document {
            id: "a".into(),
            kind: DocKind::Written,
            blocks: vec![
                Block::Header {
                    level: 1,
                    text: words("T")
                },
                Block::Paragraph(vec![words("Hi.")])
            ],
        }
    );
    assert_eq!(render_markdown(&parsed).text, "# T\n\nHi.\n");
}

#[test]
fn missing_title_is_rejected() {
    let err = parse_source("<doc id=a><p><s>Hi.</s></p></doc>").unwrap_err();
    assert_eq!(err.to_string(), "document must start with top-level header");
    assert_eq!(
        parse_source("<doc id=a><h2>T</h2></doc>").unwrap_err(),
        CorpusError::MissingTitle
    );
}

#[test]
fn unknown_tag_is_named() {
    let err = parse_source("<doc id=a>\n<h1>T</h1>\n  <table/></doc>").unwrap_err();
    assert_eq!(
        err,
        CorpusError::UnknownTag {
            line: 3,
            column: 3,
            tag: "table".into()
        }
    );
}

#[test]
fn malformed_markup_reports_position() {
    match parse_source("<doc id=a>\n<h1>T</h1>\n<p><s>x</p></doc>").unwrap_err() {
        CorpusError::Parse { line, .. } => assert_eq!(line, 3),
        other => panic!("unexpected {other}"),
    }
    assert!(matches!(
        parse_source("<doc id=a><h1>T</h1>"),
        Err(CorpusError::Parse { .. })
    ));
    assert!(matches!(
        parse_source("<doc><h1>T</h1></doc>"),
        Err(CorpusError::Parse { .. })
    ));
    assert!(matches!(
        parse_source("<doc id=a><h1>T</h1><p>loose</p></doc>"),
        Err(CorpusError::Parse { .. })
    ));
    assert!(matches!(
        parse_source("<doc id=a><h1>T</h1><p><s> </s></p></doc>"),
        Err(CorpusError::Parse { .. })
    ));
}

#[test]
fn gap_inside_speech_turn() {
    let parsed =
        parse_source("<doc id=s kind=spoken><h1>T</h1><u who=Ann><s>one <gap/> two</s></u></doc>")
            .unwrap();
    assert_eq!(parsed.kind, DocKind::Spoken);
    assert_eq!(
        parsed.blocks[1],
        Block::SpeechTurn {
            speaker: "Ann".into(),
            sentences: vec![Sentence(vec![
                Piece::Word("one".into()),
                Piece::Gap,
                Piece::Word("two".into())
            ])],
        }
    );
    assert_eq!(parsed.blocks[1].render(), "Ann: 'one [UNK] two'");
}

#[test]
fn block_rendering() {
    assert_eq!(
        Block::Header {
            level: 2,
            text: words("SUBJECTS")
        }
        .render(),
        "## SUBJECTS"
    );
    assert_eq!(
        Block::SpeechTurn {
            speaker: "Britta".into(),
            sentences: vec![words("Mhm .")]
        }
        .render(),
        "Britta: 'Mhm.'"
    );
    assert_eq!(
        Block::List(vec![words("an area of interest ,")]).render(),
        "- an area of interest,"
    );
    assert_eq!(
        Block::Quote(vec![words("a"), words("b")]).render(),
        "> a\n> b"
    );
    assert_eq!(Block::Gap.render(), "[UNK]");
}

#[test]
fn detokenization_rules() {
    assert_eq!(
        detokenize(&["Hi", ",", "you", "(", "x", ")", "."]),
        "Hi, you (x)."
    );
    assert_eq!(detokenize(&["I", "'m", "[", "a", "]", "!"]), "I'm [a]!");
    assert_eq!(detokenize(&["'", "quoted"]), "'quoted");
    assert_eq!(detokenize::<&str>(&[]), "");
}

#[test]
fn entities_are_unescaped() {
    let parsed = parse_source("<doc id=a><h1>A &amp; B</h1></doc>").unwrap();
    assert_eq!(render_markdown(&parsed).text, "# A & B\n");
}

#[test]
fn several_documents_per_source() {
    let raw = "<doc id=a><h1>A</h1></doc>\n<doc id=b><h1>B</h1></doc>\n";
    assert_eq!(parse_documents(raw).unwrap().len(), 2);
    assert_eq!(
        parse_source(raw).unwrap_err(),
        CorpusError::DocumentCount(2)
    );
}

#[test]
fn truncation_drops_whole_trailing_blocks() {
    let d = doc(vec![
        Block::Header {
            level: 1,
            text: words("T"),
        },
        Block::Paragraph(vec![words("a b c"), words("d e")]),
        Block::Paragraph(vec![words("f g h")]),
    ]);
    let full = render_markdown(&d);
    assert_eq!(full.word_count, 2 + 5 + 3);
    let cut = render_markdown_with_limit(&d, 9);
    assert_eq!(cut.text, "# T\n\na b c\nd e\n");
    assert_eq!(cut.word_count, 7);
}

#[test]
fn split_examples() {
    let docs: Vec<usize> = (0..100).collect();
    let (train, dev) = split_corpus(
        docs.clone(),
        SplitSpec {
            dev_fraction: 0.01,
            seed: 7,
        },
    )
    .unwrap();
    assert_eq!((train.len(), dev.len()), (99, 1));
    assert_eq!(
        split_corpus(
            docs,
            SplitSpec {
                dev_fraction: 0.01,
                seed: 7
            }
        )
        .unwrap(),
        (train, dev)
    );

    let bnc: Vec<usize> = (0..4049).collect();
    let (train, dev) = split_corpus(
        bnc,
        SplitSpec {
            dev_fraction: 35.0 / 4049.0,
            seed: 1,
        },
    )
    .unwrap();
    assert_eq!((train.len(), dev.len()), (4014, 35));

    assert_eq!(
        split_corpus(
            vec![1],
            SplitSpec {
                dev_fraction: 0.5,
                seed: 0
            }
        )
        .unwrap_err(),
        CorpusError::TooFewDocuments(1)
    );
    assert!(split_corpus(
        vec![1, 2],
        SplitSpec {
            dev_fraction: 0.0,
            seed: 0
        }
    )
    .is_err());
    let (_, dev) = split_corpus(
        vec![1, 2, 3],
        SplitSpec {
            dev_fraction: 0.01,
            seed: 0,
        },
    )
    .unwrap();
    assert_eq!(dev.len(), 1);
}

#[test]
fn manifest_lists_ids() {
    assert_eq!(split_manifest(["a", "b"]), "a\nb\n");
}

fn arb_block() -> impl Strategy<Value = Block> {
    let sentence = prop::collection::vec("[a-z]{1,5}", 1..8).prop_map(|w| words(&w.join(" ")));
    let sentences = prop::collection::vec(sentence.clone(), 1..4);
    prop_oneof![
        (1u8..=6, sentence.clone()).prop_map(|(level, text)| Block::Header { level, text }),
        sentences.clone().prop_map(Block::Paragraph),
        sentences.clone().prop_map(|s| Block::SpeechTurn {
            speaker: "A".into(),
            sentences: s
        }),
        sentences.clone().prop_map(Block::Quote),
        sentences.prop_map(Block::List),
        Just(Block::Gap),
    ]
}

proptest! {
    #[test]
    fn truncation_is_monotone(blocks in prop::collection::vec(arb_block(), 1..12), limit in 0usize..80) {
        let mut all = vec![Block::Header { level: 1, text: words("T") }];
        all.extend(blocks);
        let d = doc(all);
        let full = render_markdown_with_limit(&d, usize::MAX);
        let cut = render_markdown_with_limit(&d, limit);
        prop_assert!(cut.word_count <= full.word_count);
        prop_assert!(cut.word_count <= limit);
        prop_assert_eq!(cut.word_count, cut.text.split_whitespace().count());
        prop_assert!(full.text.starts_with(&cut.text));
        // every kept line is a whole line of the full rendering
        let full_lines: Vec<&str> = full.text.lines().collect();
        for line in cut.text.lines() {
            prop_assert!(full_lines.contains(&line));
        }
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let docs: Vec<usize> = (0..n).collect();
        let (train, dev) = split_corpus(docs, SplitSpec { dev_fraction: frac, seed }).unwrap();
        prop_assert_eq!(train.len() + dev.len(), n);
        let mut all: Vec<usize> = train.iter().chain(&dev).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(dev.len(), ((frac * n as f64).round() as usize).clamp(1, n - 1));
    }
}
