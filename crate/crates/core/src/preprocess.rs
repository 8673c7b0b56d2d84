//! Text cleaning and class balancing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{BaseTag, SentenceRecord};
use crate::error::{Error, Result};

pub const URL_TOKEN: &str = "<url>";
pub const EQUATION_TOKEN: &str = "<equation>";
pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Whether the token representation is being trained (`Finetune`) or held
/// fixed (`Frozen`). Drives URL/equation handling and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleaningMode {
    Frozen,
    Finetune,
}

impl FromStr for CleaningMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "frozen" => Ok(CleaningMode::Frozen),
            "finetune" => Ok(CleaningMode::Finetune),
            other => Err(format!(
                "unknown mode `{other}` (expected frozen or finetune)"
            )),
        }
    }
}

impl fmt::Display for CleaningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CleaningMode::Frozen => "frozen",
            CleaningMode::Finetune => "finetune",
        })
    }
}

struct Patterns {
    artifact: Regex,
    url: Regex,
    space_before: Regex,
    space_after: Regex,
}

fn patterns() -> &'static Patterns {
    static PATTERNS: OnceLock<Patterns> = OnceLock::new();
    PATTERNS.get_or_init(|| Patterns {
        artifact: Regex::new(r"size\s*\d+\s*\{[^{}]*\}").unwrap(),
        url: Regex::new(r"(?:https?://|ftp://|www\.)\S+").unwrap(),
        space_before: Regex::new(r" +([.,;:!?)\]'])").unwrap(),
        space_after: Regex::new(r"([(\[]) +").unwrap(),
    })
}

const SPECIALS: [&str; 3] = [URL_TOKEN, EQUATION_TOKEN, UNKNOWN_TOKEN];
const EQUATION_OPERATORS: [char; 4] = ['=', '+', '^', '\\'];
const MATH_SYMBOLS: [char; 10] = ['=', '+', '^', '\\', '*', '/', '<', '>', '|', '~'];

/// Cleans a sentence. The result is a fixed point: cleaning it again returns
/// it unchanged.
pub fn clean_sentence(s: &str, mode: CleaningMode) -> String {
    let mut current = clean_pass(s, mode);
    // Each pass only removes or canonicalizes material; a handful of passes
    // reaches the fixed point in practice.
    for _ in 0..16 {
        let next = clean_pass(&current, mode);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Cleans one corpus token for subword tokenization. Tokens that clean to
/// nothing become the unknown marker so every token keeps a subword.
pub fn clean_token(s: &str, mode: CleaningMode) -> String {
    let cleaned = clean_sentence(s, mode).replace(' ', "");
    if cleaned.is_empty() {
        UNKNOWN_TOKEN.to_string()
    } else {
        cleaned
    }
}

fn clean_pass(s: &str, mode: CleaningMode) -> String {
    let p = patterns();

    let folded: String = s
        .nfd()
        .filter(|c| !is_combining_mark(*c))
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|c| (' '..='~').contains(c))
        .collect();

    let mut text = folded;
    while p.artifact.is_match(&text) {
        text = p.artifact.replace_all(&text, " ").into_owned();
    }

    let url_replacement = match mode {
        CleaningMode::Finetune => URL_TOKEN,
        CleaningMode::Frozen => " ",
    };
    text = p.url.replace_all(&text, url_replacement).into_owned();
    text = replace_equations(&text, mode);

    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let text = p.space_before.replace_all(&text, "$1");
    p.space_after.replace_all(&text, "$1").into_owned()
}

fn is_math_like(word: &str) -> bool {
    if SPECIALS.contains(&word) {
        return false;
    }
    if word.contains(|c| MATH_SYMBOLS.contains(&c)) {
        return true;
    }
    let bytes = word.as_bytes();
    let numeric = word.starts_with(|c: char| c.is_ascii_digit())
        && word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',');
    let single_letter = !bytes.is_empty()
        && bytes[0].is_ascii_alphabetic()
        && (bytes.len() == 1 || (bytes.len() == 2 && b".,;:".contains(&bytes[1])));
    let bracketing = word.chars().all(|c| "()[]{}-.,".contains(c));
    numeric || single_letter || bracketing
}

/// Replaces maximal runs of math-like words that contain at least one of
/// `= + ^ \`.
fn replace_equations(text: &str, mode: CleaningMode) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out: Vec<&str> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        if !is_math_like(words[i]) {
            out.push(words[i]);
            i += 1;
            continue;
        }
        let start = i;
        while i < words.len() && is_math_like(words[i]) {
            i += 1;
        }
        let run = &words[start..i];
        if run
            .iter()
            .any(|w| w.contains(|c| EQUATION_OPERATORS.contains(&c)))
        {
            if mode == CleaningMode::Finetune {
                out.push(EQUATION_TOKEN);
            }
        } else {
            out.extend_from_slice(run);
        }
    }
    out.join(" ")
}

/// Duplicates every positive record. The output is the input in its original
/// order followed by the positives again, in their original relative order.
pub fn balance_task1<T: Clone>(records: &[(T, bool)]) -> Vec<(T, bool)> {
    let mut out = records.to_vec();
    out.extend(records.iter().filter(|(_, positive)| *positive).cloned());
    out
}

/// Per-tag replication factors for oversampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorTable {
    factors: BTreeMap<BaseTag, u32>,
    outside: u32,
}

impl Default for FactorTable {
    fn default() -> Self {
        let factors = BTreeMap::from([
            (BaseTag::Definition, 1),
            (BaseTag::Term, 1),
            (BaseTag::AliasTerm, 4),
            (BaseTag::Qualifier, 4),
            (BaseTag::ReferentialDefinition, 8),
            (BaseTag::ReferentialTerm, 16),
        ]);
        FactorTable {
            factors,
            outside: 1,
        }
    }
}

impl FactorTable {
    /// Factor of a base tag; `None` is the outside label.
    pub fn factor(&self, tag: Option<BaseTag>) -> u32 {
        match tag {
            None => self.outside,
            Some(t) => self.factors.get(&t).copied().unwrap_or(1),
        }
    }

    pub fn set(&mut self, tag: Option<BaseTag>, factor: u32) -> Result<()> {
        if factor == 0 {
            return Err(Error::Config("multiplication factors must be >= 1".into()));
        }
        match tag {
            None => self.outside = factor,
            Some(t) => {
                self.factors.insert(t, factor);
            }
        }
        Ok(())
    }

    /// Parses `tag = factor` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = FactorTable::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("factor table line {}: expected `tag = factor`", i + 1))
            })?;
            let key = key.trim();
            let tag = match key {
                "O" => None,
                name => Some(BaseTag::from_name(name).ok_or_else(|| {
                    Error::Config(format!("factor table line {}: unknown tag `{name}`", i + 1))
                })?),
            };
            let factor = value.trim().parse::<u32>().map_err(|_| {
                Error::Config(format!(
                    "factor table line {}: `{}` is not a positive integer",
                    i + 1,
                    value.trim()
                ))
            })?;
            table.set(tag, factor)?;
        }
        Ok(table)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FactorTable::parse(&text)
    }

    /// Replication count of a sentence: the largest factor among its tags.
    pub fn sentence_factor(&self, sentence: &SentenceRecord) -> u32 {
        sentence
            .tokens
            .iter()
            .map(|t| self.factor(t.tag.base()))
            .max()
            .unwrap_or(1)
    }
}

/// Emits each sentence as many times as its largest tag factor, copies
/// immediately after the original.
pub fn oversample_task2(sentences: &[SentenceRecord], table: &FactorTable) -> Vec<SentenceRecord> {
    let mut out = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        let copies = table.sentence_factor(sentence) as usize;
        out.extend(std::iter::repeat(sentence).take(copies).cloned());
    }
    out
}

/// Token counts per base tag (B- and I- together).
pub fn tag_counts<'a>(sentences: impl IntoIterator<Item = &'a SentenceRecord>) -> BTreeMap<BaseTag, usize> {
    let mut counts: BTreeMap<BaseTag, usize> = BaseTag::ALL.iter().map(|t| (*t, 0)).collect();
    for sentence in sentences {
        for token in &sentence.tokens {
            if let Some(base) = token.tag.base() {
                *counts.entry(base).or_default() += 1;
            }
        }
    }
    counts
}
