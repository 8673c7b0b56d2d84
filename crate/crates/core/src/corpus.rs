//! DEFT column corpora: token/label types, parsing, sentence reconstruction and
//! prediction writers.
//!
//! A corpus line carries eight tab-separated columns:
//!
//! ```text
//! token  source  start_char  end_char  tag  tag_id  root_id  relation
//! ```
//!
//! Blank lines delimit context windows. Inside a window, sentences end at a
//! `.`, `!` or `?` token that is followed by a capitalized token or by the end
//! of the window. The literal `0` marks an absent tag id, root id or relation.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest number of distinct tag ids a context window may carry.
pub const MAX_TAG_IDS_PER_WINDOW: usize = 10;

const NONE_MARKER: &str = "0";
const SENTENCE_FINAL: [&str; 3] = [".", "!", "?"];
const ATTACH_LEFT: [char; 9] = ['.', ',', ';', ':', '!', '?', ')', ']', '\''];
const ATTACH_RIGHT: [char; 2] = ['(', '['];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaseTag {
    Term,
    AliasTerm,
    ReferentialTerm,
    Definition,
    ReferentialDefinition,
    Qualifier,
}

impl BaseTag {
    pub const ALL: [BaseTag; 6] = [
        BaseTag::Term,
        BaseTag::AliasTerm,
        BaseTag::ReferentialTerm,
        BaseTag::Definition,
        BaseTag::ReferentialDefinition,
        BaseTag::Qualifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaseTag::Term => "Term",
            BaseTag::AliasTerm => "Alias-Term",
            BaseTag::ReferentialTerm => "Referential-Term",
            BaseTag::Definition => "Definition",
            BaseTag::ReferentialDefinition => "Referential-Definition",
            BaseTag::Qualifier => "Qualifier",
        }
    }

    pub fn from_name(name: &str) -> Option<BaseTag> {
        BaseTag::ALL.into_iter().find(|t| t.name() == name)
    }

    fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for BaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A BIO label over the six base tags. The index mapping is fixed:
/// `O` is 0, then `B-X`, `I-X` pairs in [`BaseTag::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Outside,
    Begin(BaseTag),
    Inside(BaseTag),
}

impl Label {
    pub const COUNT: usize = 1 + 2 * BaseTag::ALL.len();

    pub fn index(self) -> usize {
        match self {
            Label::Outside => 0,
            Label::Begin(t) => 1 + 2 * t.ordinal(),
            Label::Inside(t) => 2 + 2 * t.ordinal(),
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::Outside),
            i if i < Label::COUNT => {
                let base = BaseTag::ALL[(i - 1) / 2];
                Some(if i % 2 == 1 {
                    Label::Begin(base)
                } else {
                    Label::Inside(base)
                })
            }
            _ => None,
        }
    }

    pub fn all() -> Vec<Label> {
        (0..Label::COUNT).filter_map(Label::from_index).collect()
    }

    pub fn base(self) -> Option<BaseTag> {
        match self {
            Label::Outside => None,
            Label::Begin(t) | Label::Inside(t) => Some(t),
        }
    }

    /// The label a non-initial subword of a token labelled `self` receives.
    pub fn continuation(self) -> Label {
        match self {
            Label::Begin(t) => Label::Inside(t),
            other => other,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Outside => f.write_str("O"),
            Label::Begin(t) => write!(f, "B-{}", t.name()),
            Label::Inside(t) => write!(f, "I-{}", t.name()),
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Label::Outside);
        }
        let parsed = if let Some(rest) = s.strip_prefix("B-") {
            BaseTag::from_name(rest).map(Label::Begin)
        } else if let Some(rest) = s.strip_prefix("I-") {
            BaseTag::from_name(rest).map(Label::Inside)
        } else {
            None
        };
        parsed.ok_or_else(|| s.to_string())
    }
}

/// Number of `I-X` labels not preceded by `B-X` or `I-X`.
pub fn bio_violations(labels: &[Label]) -> usize {
    let mut prev = Label::Outside;
    let mut count = 0;
    for &label in labels {
        if let Label::Inside(t) = label {
            if prev != Label::Begin(t) && prev != Label::Inside(t) {
                count += 1;
            }
        }
        prev = label;
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    None,
    DirectDefines,
    IndirectDefines,
    RefersTo,
    Aka,
    Supplements,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::None,
        Relation::DirectDefines,
        Relation::IndirectDefines,
        Relation::RefersTo,
        Relation::Aka,
        Relation::Supplements,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Relation> {
        Relation::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::None => NONE_MARKER,
            Relation::DirectDefines => "Direct-defines",
            Relation::IndirectDefines => "Indirect-defines",
            Relation::RefersTo => "Refers-to",
            Relation::Aka => "AKA",
            Relation::Supplements => "Supplements",
        }
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| s.to_string())
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeftToken {
    pub text: String,
    pub source: String,
    pub start_char: usize,
    pub end_char: usize,
    pub tag: Label,
    pub tag_id: Option<u32>,
    pub root_id: Option<u32>,
    pub relation: Relation,
}

impl DeftToken {
    /// A token with only text and tag; offsets are synthesized by the caller.
    pub fn new(text: impl Into<String>, start_char: usize, tag: Label) -> Self {
        let text = text.into();
        let end_char = start_char + text.chars().count().max(1);
        DeftToken {
            text,
            source: String::from("-"),
            start_char,
            end_char,
            tag,
            tag_id: None,
            root_id: None,
            relation: Relation::None,
        }
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.text,
            self.source,
            self.start_char,
            self.end_char,
            self.tag,
            optional_id(self.tag_id),
            optional_id(self.root_id),
            self.relation
        )
    }
}

fn optional_id(id: Option<u32>) -> String {
    id.map_or_else(|| NONE_MARKER.to_string(), |v| v.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceRecord {
    pub tokens: Vec<DeftToken>,
    pub sentence_text: String,
    pub has_definition: bool,
}

impl SentenceRecord {
    pub fn new(tokens: Vec<DeftToken>) -> Self {
        let sentence_text = reconstruct_sentence(&tokens).text;
        let has_definition = derive_sentence_label(&tokens);
        SentenceRecord {
            tokens,
            sentence_text,
            has_definition,
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        self.tokens.iter().map(|t| t.tag).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub window_id: usize,
    pub sentences: Vec<SentenceRecord>,
}

impl ContextWindow {
    pub fn tokens(&self) -> impl Iterator<Item = &DeftToken> {
        self.sentences.iter().flat_map(|s| s.tokens.iter())
    }

    pub fn distinct_tag_ids(&self) -> usize {
        self.tokens()
            .filter_map(|t| t.tag_id)
            .collect::<HashSet<_>>()
            .len()
    }
}

/// Which prediction view a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Sentence classification.
    Classification,
    /// Token labeling with the CRF.
    Labeling,
    /// Joint tags, tag ids and relations.
    MultiTask,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Task::Classification),
            "2" => Ok(Task::Labeling),
            "multitask" | "3" => Ok(Task::MultiTask),
            other => Err(format!(
                "unknown task `{other}` (expected 1, 2 or multitask)"
            )),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "1",
            Task::Labeling => "2",
            Task::MultiTask => "multitask",
        })
    }
}

/// True iff any token carries a Definition tag.
pub fn derive_sentence_label(tokens: &[DeftToken]) -> bool {
    tokens
        .iter()
        .any(|t| t.tag.base() == Some(BaseTag::Definition))
}

/// A detokenized sentence with the byte span of every source token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reconstruction {
    pub text: String,
    pub spans: Vec<std::ops::Range<usize>>,
}

/// Joins token texts with single spaces, omitting the space before tokens
/// that open with closing punctuation and after tokens that end with opening
/// brackets.
pub fn reconstruct_sentence<T: TokenText>(tokens: &[T]) -> Reconstruction {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(tokens.len());
    let mut prev: Option<&str> = None;
    for token in tokens {
        let word = token.token_text();
        if let Some(prev) = prev {
            let attach_left = word.starts_with(|c| ATTACH_LEFT.contains(&c));
            let attach_right = prev.ends_with(|c| ATTACH_RIGHT.contains(&c));
            if !attach_left && !attach_right {
                text.push(' ');
            }
        }
        let start = text.len();
        text.push_str(word);
        spans.push(start..text.len());
        prev = Some(word);
    }
    Reconstruction { text, spans }
}

/// Anything that exposes the surface text of a corpus token.
pub trait TokenText {
    fn token_text(&self) -> &str;
}

impl TokenText for DeftToken {
    fn token_text(&self) -> &str {
        &self.text
    }
}

impl TokenText for &str {
    fn token_text(&self) -> &str {
        self
    }
}

impl TokenText for String {
    fn token_text(&self) -> &str {
        self
    }
}

/// Splits a window's tokens into sentences.
pub fn segment_sentences(tokens: Vec<DeftToken>) -> Vec<SentenceRecord> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    let mut iter = tokens.into_iter().peekable();
    while let Some(token) = iter.next() {
        let terminal = SENTENCE_FINAL.contains(&token.text.as_str());
        current.push(token);
        let boundary = match iter.peek() {
            None => true,
            Some(next) => terminal && next.text.starts_with(char::is_uppercase),
        };
        if boundary {
            sentences.push(SentenceRecord::new(std::mem::take(&mut current)));
        }
    }
    sentences
}

pub fn parse_deft_file(path: impl AsRef<Path>) -> Result<Vec<ContextWindow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_deft_str(&text, path)
}

/// Parses DEFT text; `origin` is only used in error messages.
pub fn parse_deft_str(text: &str, origin: &Path) -> Result<Vec<ContextWindow>> {
    let mut windows = Vec::new();
    let mut current: Vec<DeftToken> = Vec::new();
    let mut window_start = 0;

    let mut flush = |tokens: &mut Vec<DeftToken>, first_line: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let window = ContextWindow {
            window_id: windows.len(),
            sentences: segment_sentences(std::mem::take(tokens)),
        };
        if window.distinct_tag_ids() > MAX_TAG_IDS_PER_WINDOW {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: first_line,
                message: format!(
                    "window carries {} distinct tag ids (at most {MAX_TAG_IDS_PER_WINDOW})",
                    window.distinct_tag_ids()
                ),
            });
        }
        windows.push(window);
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut current, window_start)?;
            continue;
        }
        if current.is_empty() {
            window_start = line_no;
        }
        current.push(parse_line(line, line_no, origin)?);
    }
    flush(&mut current, window_start)?;
    Ok(windows)
}

fn parse_line(line: &str, line_no: usize, origin: &Path) -> Result<DeftToken> {
    let parse_err = |message: String| Error::Parse {
        path: origin.to_path_buf(),
        line: line_no,
        message,
    };
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 8 {
        return Err(parse_err(format!("expected 8 columns, found {}", cols.len())));
    }
    if cols[0].is_empty() {
        return Err(parse_err("empty token text".into()));
    }
    let offset = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(format!("{what} `{s}` is not a non-negative integer")))
    };
    let id = |s: &str, what: &str| -> Result<Option<u32>> {
        let v = s
            .parse::<u32>()
            .map_err(|_| parse_err(format!("{what} `{s}` is not a non-negative integer")))?;
        Ok((v != 0).then_some(v))
    };
    let start_char = offset(cols[2], "start offset")?;
    let end_char = offset(cols[3], "end offset")?;
    if end_char <= start_char {
        return Err(parse_err(format!(
            "end offset {end_char} must exceed start offset {start_char}"
        )));
    }
    let tag = cols[4].parse::<Label>().map_err(|label| Error::UnknownTag {
        path: origin.to_path_buf(),
        line: line_no,
        label,
    })?;
    let relation = cols[7]
        .parse::<Relation>()
        .map_err(|r| parse_err(format!("unknown relation `{r}`")))?;
    Ok(DeftToken {
        text: cols[0].to_string(),
        source: cols[1].to_string(),
        start_char,
        end_char,
        tag,
        tag_id: id(cols[5], "tag id")?,
        root_id: id(cols[6], "root id")?,
        relation,
    })
}

/// Renders windows in the 8-column layout, one blank line between windows.
pub fn format_deft(windows: &[ContextWindow]) -> String {
    let mut out = String::new();
    for (i, window) in windows.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for token in window.tokens() {
            out.push_str(&token.to_line());
            out.push('\n');
        }
    }
    out
}

pub fn write_deft_file(windows: &[ContextWindow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_deft(windows)).map_err(|e| Error::io(path, e))
}

/// Task 1 writes `sentence<TAB>0|1` per sentence; the token tasks write the
/// DEFT layout with whatever tags the windows currently hold.
pub fn format_predictions(windows: &[ContextWindow], task: Task) -> String {
    match task {
        Task::Classification => {
            let mut out = String::new();
            for sentence in windows.iter().flat_map(|w| &w.sentences) {
                out.push_str(&sentence.sentence_text);
                out.push('\t');
                out.push(if sentence.has_definition { '1' } else { '0' });
                out.push('\n');
            }
            out
        }
        Task::Labeling | Task::MultiTask => format_deft(windows),
    }
}

pub fn write_predictions(
    windows: &[ContextWindow],
    task: Task,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_predictions(windows, task)).map_err(|e| Error::io(path, e))
}

/// Reads a `sentence<TAB>0|1` file.
pub fn parse_sentence_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, bool)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (sentence, label) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected `sentence<TAB>label`".into(),
        })?;
        let label = match label.trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        rows.push((sentence.to_string(), label));
    }
    Ok(rows)
}

pub fn format_sentence_tsv(rows: &[(String, bool)]) -> String {
    rows.iter()
        .map(|(s, l)| format!("{s}\t{}\n", u8::from(*l)))
        .collect()
}
