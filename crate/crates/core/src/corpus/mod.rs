//! Source documents to Markdown, plus deterministic train/dev splits.
//!
//! The source schema is a small XML dialect with the same blocks as the
//! spoken and written parts of a reference corpus:
//!
//! ```text
//! <doc id=ID kind=written|spoken>
//!   <h1>..</h1> ... <h6>..</h6>      header, first block must be <h1>
//!   <p><s>..</s>...</p>              paragraph of sentences
//!   <u who=NAME><s>..</s>...</u>     speech turn
//!   <quote><s>..</s>...</quote>      quoted block
//!   <list><item>..</item>...</list>  list
//!   <gap/>                           incomprehensible segment
//! </doc>
//! ```
//!
//! Sentence, header and item text is a whitespace-separated token stream
//! that may contain `<gap/>`. Attribute values may be quoted or bare.

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAX_WORDS: usize = 45_000;
pub const GAP_MARKER: &str = "[UNK]";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("line {line}, column {column}: unknown tag <{tag}>")]
    UnknownTag {
        line: usize,
        column: usize,
        tag: String,
    },
    #[error("document must start with top-level header")]
    MissingTitle,
    #[error("expected exactly one document, found {0}")]
    DocumentCount(usize),
    #[error("splitting needs at least 2 documents, got {0}")]
    TooFewDocuments(usize),
    #[error("dev fraction {0} outside (0, 1)")]
    BadFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocKind {
    Written,
    Spoken,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Gap,
}

/// Tokens of one sentence (or header, or list item).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence(pub Vec<Piece>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Block {
    Header {
        level: u8,
        text: Sentence,
    },
    Paragraph(Vec<Sentence>),
    SpeechTurn {
        speaker: String,
        sentences: Vec<Sentence>,
    },
    Quote(Vec<Sentence>),
    List(Vec<Sentence>),
    Gap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub kind: DocKind,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkdownDoc {
    pub id: String,
    pub text: String,
    pub word_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub dev_fraction: f64,
    pub seed: u64,
}

fn no_space_before(token: &str) -> bool {
    token.starts_with(['.', ',', ';', ':', '!', '?', '\'', ')', ']'])
}

fn no_space_after(token: &str) -> bool {
    matches!(token, "(" | "[" | "'")
}

/// Joins tokens with single spaces, except before `.,;:!?')]` and after a
/// bare `(`, `[` or `'`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = true;
    for token in tokens {
        let token = token.as_ref();
        if !glue && !no_space_before(token) {
            out.push(' ');
        }
        out.push_str(token);
        glue = no_space_after(token);
    }
    out
}

impl Sentence {
    pub fn render(&self) -> String {
        let tokens: Vec<&str> = self
            .0
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                Piece::Gap => GAP_MARKER,
            })
            .collect();
        detokenize(&tokens)
    }
}

impl Block {
    pub fn render(&self) -> String {
        let lines = |sentences: &[Sentence], prefix: &str| -> Vec<String> {
            sentences
                .iter()
                .map(|s| format!("{prefix}{}", s.render()))
                .collect()
        };
        match self {
            Block::Header { level, text } => {
                format!("{} {}", "#".repeat(usize::from(*level)), text.render())
            }
            Block::Paragraph(sentences) => lines(sentences, "").join("\n"),
            Block::SpeechTurn { speaker, sentences } => {
                format!("{speaker}: '{}'", lines(sentences, "").join("\n"))
            }
            Block::Quote(sentences) => lines(sentences, "> ").join("\n"),
            Block::List(items) => lines(items, "- ").join("\n\n"),
            Block::Gap => GAP_MARKER.to_string(),
        }
    }
}

/// Renders with the default 45,000-word cap.
pub fn render_markdown(doc: &Document) -> MarkdownDoc {
    render_markdown_with_limit(doc, MAX_WORDS)
}

/// Renders block by block, dropping the first block that would push the
/// whitespace-token count past `max_words` and everything after it.
pub fn render_markdown_with_limit(doc: &Document, max_words: usize) -> MarkdownDoc {
    let mut rendered = Vec::new();
    let mut word_count = 0;
    for block in &doc.blocks {
        let text = block.render();
        let words = text.split_whitespace().count();
        if word_count + words > max_words {
            break;
        }
        word_count += words;
        rendered.push(text);
    }
    let mut text = rendered.join("\n\n");
    if !text.is_empty() {
        text.push('\n');
    }
    MarkdownDoc {
        id: doc.id.clone(),
        text,
        word_count,
    }
}

/// Partitions `docs` into `(train, dev)`, each keeping input order.
/// `|dev| = round(dev_fraction * |docs|)`, at least 1.
pub fn split_corpus<T>(docs: Vec<T>, spec: SplitSpec) -> Result<(Vec<T>, Vec<T>), CorpusError> {
    let n = docs.len();
    if n < 2 {
        return Err(CorpusError::TooFewDocuments(n));
    }
    if !(spec.dev_fraction > 0.0 && spec.dev_fraction < 1.0) {
        return Err(CorpusError::BadFraction(spec.dev_fraction));
    }
    let dev_size = ((spec.dev_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut in_dev = vec![false; n];
    for &i in &order[..dev_size] {
        in_dev[i] = true;
    }
    let (mut train, mut dev) = (
        Vec::with_capacity(n - dev_size),
        Vec::with_capacity(dev_size),
    );
    for (doc, dev_member) in docs.into_iter().zip(in_dev) {
        if dev_member {
            dev.push(doc);
        } else {
            train.push(doc);
        }
    }
    Ok((train, dev))
}

/// One document id per line.
pub fn split_manifest<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    ids.into_iter().map(|id| format!("{id}\n")).collect()
}

/// Parses a source containing exactly one `<doc>`.
pub fn parse_source(raw: &str) -> Result<Document, CorpusError> {
    let mut docs = parse_documents(raw)?;
    match docs.len() {
        1 => Ok(docs.remove(0)),
        n => Err(CorpusError::DocumentCount(n)),
    }
}

/// Parses every top-level `<doc>` in `raw`.
pub fn parse_documents(raw: &str) -> Result<Vec<Document>, CorpusError> {
    Parser::new(raw).documents()
}

#[derive(Debug)]
enum Item {
    Open(String, Vec<(String, String)>),
    Close(String),
    Empty(String),
    Text(String),
    Eof,
}

struct Parser<'a> {
    raw: &'a str,
    reader: Reader<&'a [u8]>,
    /// Byte offset where the last returned event started.
    at: u64,
}

const KNOWN_TAGS: &[&str] = &[
    "doc", "h1", "h2", "h3", "h4", "h5", "h6", "p", "u", "quote", "list", "item", "s", "gap",
];

fn header_level(tag: &str) -> Option<u8> {
    match tag.as_bytes() {
        [b'h', d @ b'1'..=b'6'] => Some(d - b'0'),
        _ => None,
    }
}

impl<'a> Parser<'a> {
    fn new(raw: &'a str) -> Self {
        let mut reader = Reader::from_str(raw);
        reader.config_mut().check_end_names = true;
        Self { raw, reader, at: 0 }
    }

    fn position(&self, offset: u64) -> (usize, usize) {
        let prefix = &self.raw[..(offset as usize).min(self.raw.len())];
        let line = prefix.matches('\n').count() + 1;
        let column = prefix.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        (line, column)
    }

    fn error(&self, msg: impl Into<String>) -> CorpusError {
        let (line, column) = self.position(self.at);
        CorpusError::Parse {
            line,
            column,
            msg: msg.into(),
        }
    }

    fn unknown(&self, tag: &str) -> CorpusError {
        let (line, column) = self.position(self.at);
        CorpusError::UnknownTag {
            line,
            column,
            tag: tag.to_string(),
        }
    }

    fn tag(&self, start: &BytesStart<'_>) -> Result<(String, Vec<(String, String)>), CorpusError> {
        let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
        if !KNOWN_TAGS.contains(&name.as_str()) {
            return Err(self.unknown(&name));
        }
        let mut attrs = Vec::new();
        for attr in start.html_attributes() {
            let attr = attr.map_err(|e| self.error(e.to_string()))?;
            let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
            let value = attr
                .unescape_value()
                .map_err(|e| self.error(e.to_string()))?
                .into_owned();
            attrs.push((key, value));
        }
        Ok((name, attrs))
    }

    fn next(&mut self) -> Result<Item, CorpusError> {
        loop {
            self.at = self.reader.buffer_position();
            let event = match self.reader.read_event() {
                Ok(event) => event,
                Err(e) => {
                    self.at = self.reader.error_position();
                    return Err(self.error(e.to_string()));
                }
            };
            return Ok(match event {
                Event::Start(start) => {
                    let (name, attrs) = self.tag(&start)?;
                    Item::Open(name, attrs)
                }
                Event::Empty(start) => Item::Empty(self.tag(&start)?.0),
                Event::End(end) => {
                    Item::Close(String::from_utf8_lossy(end.name().as_ref()).into_owned())
                }
                Event::Text(text) => Item::Text(
                    text.unescape()
                        .map_err(|e| self.error(e.to_string()))?
                        .into_owned(),
                ),
                Event::CData(data) => Item::Text(String::from_utf8_lossy(&data).into_owned()),
                Event::Comment(_) | Event::Decl(_) | Event::PI(_) | Event::DocType(_) => continue,
                Event::Eof => Item::Eof,
            });
        }
    }

    fn documents(mut self) -> Result<Vec<Document>, CorpusError> {
        let mut docs = Vec::new();
        loop {
            match self.next()? {
                Item::Eof => break,
                Item::Text(t) if t.trim().is_empty() => {}
                Item::Open(name, attrs) if name == "doc" => docs.push(self.document(attrs)?),
                Item::Open(name, _) | Item::Empty(name) => {
                    return Err(self.error(format!("<{name}> outside <doc>")));
                }
                other => return Err(self.error(format!("unexpected {other:?} outside <doc>"))),
            }
        }
        Ok(docs)
    }

    fn document(&mut self, attrs: Vec<(String, String)>) -> Result<Document, CorpusError> {
        let mut id = None;
        let mut kind = DocKind::Written;
        for (key, value) in attrs {
            match key.as_str() {
                "id" => id = Some(value),
                "kind" => {
                    kind = match value.as_str() {
                        "written" => DocKind::Written,
                        "spoken" => DocKind::Spoken,
                        other => return Err(self.error(format!("unknown document kind `{other}`"))),
                    }
                }
                other => return Err(self.error(format!("unknown attribute `{other}` on <doc>"))),
            }
        }
        let id = id.ok_or_else(|| self.error("<doc> needs an id attribute"))?;
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(self.error(format!("invalid document id `{id}`")));
        }
        let mut blocks = Vec::new();
        loop {
            match self.next()? {
                Item::Close(name) if name == "doc" => break,
                Item::Text(t) if t.trim().is_empty() => {}
                Item::Empty(name) if name == "gap" => blocks.push(Block::Gap),
                Item::Open(name, attrs) => blocks.push(self.block(&name, attrs)?),
                Item::Eof => return Err(self.error("unterminated <doc>")),
                other => return Err(self.error(format!("unexpected {other:?} inside <doc>"))),
            }
        }
        if !matches!(blocks.first(), Some(Block::Header { level: 1, .. })) {
            return Err(CorpusError::MissingTitle);
        }
        Ok(Document { id, kind, blocks })
    }

    fn block(&mut self, name: &str, attrs: Vec<(String, String)>) -> Result<Block, CorpusError> {
        if let Some(level) = header_level(name) {
            return Ok(Block::Header {
                level,
                text: self.tokens(name)?,
            });
        }
        let expect_no_attrs = |p: &Self| -> Result<(), CorpusError> {
            match attrs.first() {
                Some((key, _)) => Err(p.error(format!("unknown attribute `{key}` on <{name}>"))),
                None => Ok(()),
            }
        };
        match name {
            "p" => {
                expect_no_attrs(self)?;
                Ok(Block::Paragraph(self.children(name, "s")?))
            }
            "quote" => {
                expect_no_attrs(self)?;
                Ok(Block::Quote(self.children(name, "s")?))
            }
            "list" => {
                expect_no_attrs(self)?;
                Ok(Block::List(self.children(name, "item")?))
            }
            "u" => {
                let mut speaker = None;
                for (key, value) in attrs {
                    if key != "who" {
                        return Err(self.error(format!("unknown attribute `{key}` on <u>")));
                    }
                    speaker = Some(value);
                }
                let speaker = speaker.ok_or_else(|| self.error("<u> needs a who attribute"))?;
                Ok(Block::SpeechTurn {
                    speaker,
                    sentences: self.children(name, "s")?,
                })
            }
            other => Err(self.error(format!("<{other}> is not a block"))),
        }
    }

    /// Reads `<child>` elements until `</parent>`.
    fn children(&mut self, parent: &str, child: &str) -> Result<Vec<Sentence>, CorpusError> {
        let mut out = Vec::new();
        loop {
            match self.next()? {
                Item::Close(name) if name == parent => break,
                Item::Text(t) if t.trim().is_empty() => {}
                Item::Open(name, _) if name == child => out.push(self.tokens(child)?),
                Item::Open(name, _) | Item::Empty(name) => {
                    return Err(self.error(format!("<{name}> not allowed in <{parent}>")));
                }
                Item::Text(_) => {
                    return Err(self.error(format!("text outside <{child}> in <{parent}>")))
                }
                Item::Close(name) => return Err(self.error(format!("unexpected </{name}>"))),
                Item::Eof => return Err(self.error(format!("unterminated <{parent}>"))),
            }
        }
        if out.is_empty() {
            return Err(self.error(format!("empty <{parent}>")));
        }
        Ok(out)
    }

    /// Reads a token stream with optional `<gap/>` markers until `</tag>`.
    fn tokens(&mut self, tag: &str) -> Result<Sentence, CorpusError> {
        let mut pieces = Vec::new();
        loop {
            match self.next()? {
                Item::Close(name) if name == tag => break,
                Item::Text(t) => {
                    pieces.extend(t.split_whitespace().map(|w| Piece::Word(w.to_string())))
                }
                Item::Empty(name) if name == "gap" => pieces.push(Piece::Gap),
                Item::Open(name, _) | Item::Empty(name) => {
                    return Err(self.error(format!("<{name}> not allowed in <{tag}>")));
                }
                Item::Close(name) => return Err(self.error(format!("unexpected </{name}>"))),
                Item::Eof => return Err(self.error(format!("unterminated <{tag}>"))),
            }
        }
        if pieces.is_empty() {
            return Err(self.error(format!("empty <{tag}>")));
        }
        Ok(Sentence(pieces))
    }
}

#[cfg(test)]
mod tests;
