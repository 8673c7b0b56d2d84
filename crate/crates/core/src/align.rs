//! Byte-pair subword vocabulary, subword tokenization with character spans,
//! and label projection between corpus tokens and subwords.
//!
//! Words are pre-split so that every ASCII punctuation character is its own
//! unit. Reconstructed sentences only glue tokens together at punctuation, so
//! no subword can straddle two corpus tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::preprocess::{EQUATION_TOKEN, UNKNOWN_TOKEN, URL_TOKEN};

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<s>";

/// Specials in id order; they head the vocabulary file.
pub const SPECIALS: [&str; 5] = [PAD_TOKEN, START_TOKEN, UNKNOWN_TOKEN, URL_TOKEN, EQUATION_TOKEN];

pub const PAD_ID: u32 = 0;
pub const START_ID: u32 = 1;
pub const UNKNOWN_ID: u32 = 2;

/// Smallest vocabulary size `build_vocabulary` accepts.
pub const MIN_VOCAB_SIZE: usize = 256 + SPECIALS.len();
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

const BASE_CHARS: Range<u8> = 0x20..0x7f;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl SubwordVocabulary {
    pub fn base() -> Self {
        let mut vocab = SubwordVocabulary {
            pieces: Vec::new(),
            index: HashMap::new(),
        };
        for special in SPECIALS {
            vocab.push(special.to_string());
        }
        for b in BASE_CHARS {
            vocab.push(char::from(b).to_string());
        }
        vocab
    }

    fn push(&mut self, piece: String) -> bool {
        if self.index.contains_key(&piece) {
            return false;
        }
        self.index.insert(piece.clone(), self.pieces.len() as u32);
        self.pieces.push(piece);
        true
    }

    fn first_merge_id(&self) -> u32 {
        (SPECIALS.len() + BASE_CHARS.len()) as u32
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    /// Learned merges in rank order.
    pub fn merges(&self) -> &[String] {
        &self.pieces[self.first_merge_id() as usize..]
    }

    /// Rank of a merged piece, if `piece` is one.
    fn merge_rank(&self, piece: &str) -> Option<u32> {
        self.id(piece).filter(|&id| id >= self.first_merge_id())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            out.push_str(piece);
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .strip_suffix('\n')
            .unwrap_or(text)
            .split('\n')
            .collect();
        let base = SubwordVocabulary::base();
        if lines.len() < base.len() || lines[..base.len()] != base.pieces[..] {
            return Err(Error::Config(
                "vocabulary file must start with the special pieces and the printable ASCII alphabet"
                    .into(),
            ));
        }
        let mut vocab = base;
        for (i, line) in lines.iter().enumerate().skip(vocab.len()) {
            if line.is_empty() || !vocab.push(line.to_string()) {
                return Err(Error::Config(format!(
                    "vocabulary line {}: empty or duplicate piece",
                    i + 1
                )));
            }
        }
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SubwordVocabulary::parse(&text)
    }
}

/// Splits text into pre-tokenization units with their byte offsets: special
/// markers whole, every ASCII punctuation character alone, and maximal runs
/// of everything else between whitespace.
pub fn pre_tokenize(s: &str) -> Vec<(&str, usize)> {
    let mut units = Vec::new();
    let mut word_start = None;
    for (i, c) in s.char_indices().chain(std::iter::once((s.len(), ' '))) {
        if c.is_whitespace() {
            if let Some(start) = word_start.take() {
                split_word(s, start, i, &mut units);
            }
        } else if word_start.is_none() {
            word_start = Some(i);
        }
    }
    units
}

fn split_word<'a>(s: &'a str, start: usize, end: usize, units: &mut Vec<(&'a str, usize)>) {
    let word = &s[start..end];
    let mut run_start: Option<usize> = None;
    let mut pos = 0;
    while pos < word.len() {
        if let Some(special) = SPECIALS.iter().find(|sp| word[pos..].starts_with(*sp)) {
            if let Some(rs) = run_start.take() {
                units.push((&word[rs..pos], start + rs));
            }
            units.push((&word[pos..pos + special.len()], start + pos));
            pos += special.len();
            continue;
        }
        let c = word[pos..].chars().next().unwrap();
        if c.is_ascii_punctuation() {
            if let Some(rs) = run_start.take() {
                units.push((&word[rs..pos], start + rs));
            }
            units.push((&word[pos..pos + 1], start + pos));
        } else if run_start.is_none() {
            run_start = Some(pos);
        }
        pos += c.len_utf8();
    }
    if let Some(rs) = run_start {
        units.push((&word[rs..], start + rs));
    }
}

/// Learns byte-pair merges over the pre-tokenized corpus until the vocabulary
/// holds `size` pieces or no adjacent pair remains. Ties between equally
/// frequent pairs go to the lexicographically smallest pair.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S], size: usize) -> Result<SubwordVocabulary> {
    if size < MIN_VOCAB_SIZE {
        return Err(Error::Config(format!(
            "vocabulary size {size} is below the minimum of {MIN_VOCAB_SIZE}"
        )));
    }
    let mut vocab = SubwordVocabulary::base();

    let mut word_freq: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for (unit, _) in pre_tokenize(line.as_ref()) {
            if !SPECIALS.contains(&unit) {
                *word_freq.entry(unit).or_default() += 1;
            }
        }
    }
    // Sorted for run-to-run determinism of the word table.
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(String::from).collect(), f))
        .collect();
    words.sort();

    while vocab.len() < size {
        let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].as_str(), pair[1].as_str()))
                    .or_default() += freq;
            }
        }
        let Some(((left, right), _)) = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            merge_in_place(symbols, &left, &right, &merged);
        }
        vocab.push(merged);
    }
    Ok(vocab)
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            symbols[i] = merged.to_string();
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subword {
    pub piece: String,
    pub id: u32,
    /// Byte span in the tokenized string.
    pub span: Range<usize>,
}

/// Segments `s` into subwords. Within each unit, the adjacent pair whose
/// concatenation has the lowest merge rank is merged until none applies.
pub fn tokenize_subwords(s: &str, vocab: &SubwordVocabulary) -> Vec<Subword> {
    let mut out = Vec::new();
    for (unit, offset) in pre_tokenize(s) {
        if let Some(id) = SPECIALS.contains(&unit).then(|| vocab.id(unit)).flatten() {
            out.push(Subword {
                piece: unit.to_string(),
                id,
                span: offset..offset + unit.len(),
            });
            continue;
        }
        // (start, end) byte ranges within the unit.
        let mut parts: Vec<(usize, usize)> = unit
            .char_indices()
            .map(|(i, c)| (i, i + c.len_utf8()))
            .collect();
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| vocab.merge_rank(&unit[w[0].0..w[1].1]).map(|r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            parts[i].1 = parts[i + 1].1;
            parts.remove(i + 1);
        }
        for (start, end) in parts {
            let piece = &unit[start..end];
            out.push(Subword {
                piece: piece.to_string(),
                id: vocab.id(piece).unwrap_or(UNKNOWN_ID),
                span: offset + start..offset + end,
            });
        }
    }
    out
}

/// Mapping between corpus tokens and the subwords covering them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordAlignment {
    /// For each token, the contiguous range of subword indices covering it.
    pub token_subwords: Vec<Range<usize>>,
    /// For each subword, its byte span in the reconstructed sentence.
    pub subword_spans: Vec<Range<usize>>,
}

impl SubwordAlignment {
    pub fn num_tokens(&self) -> usize {
        self.token_subwords.len()
    }

    pub fn num_subwords(&self) -> usize {
        self.subword_spans.len()
    }
}

/// Assigns each subword to the token whose span contains the subword's start.
pub fn align_tokens(token_spans: &[Range<usize>], subwords: &[Subword]) -> Result<SubwordAlignment> {
    let mut token_subwords: Vec<Range<usize>> = token_spans.iter().map(|_| 0..0).collect();
    let mut token = 0;
    for (j, sub) in subwords.iter().enumerate() {
        while token < token_spans.len() && sub.span.start >= token_spans[token].end {
            token += 1;
        }
        let Some(span) = token_spans.get(token) else {
            return Err(Error::Alignment(format!(
                "subword {j} `{}` at {:?} lies past the last token",
                sub.piece, sub.span
            )));
        };
        if sub.span.start < span.start || sub.span.end > span.end {
            return Err(Error::Alignment(format!(
                "subword {j} `{}` at {:?} crosses the boundary of token {token} at {span:?}",
                sub.piece, sub.span
            )));
        }
        let range = &mut token_subwords[token];
        if range.start == range.end {
            *range = j..j + 1;
        } else {
            range.end = j + 1;
        }
    }
    if let Some(t) = token_subwords.iter().position(|r| r.is_empty()) {
        return Err(Error::Alignment(format!("token {t} received no subword")));
    }
    Ok(SubwordAlignment {
        token_subwords,
        subword_spans: subwords.iter().map(|s| s.span.clone()).collect(),
    })
}

/// Token labels onto subwords: the first subword keeps the token's label,
/// later subwords of a `B-X` token become `I-X`.
pub fn project_labels(labels: &[Label], alignment: &SubwordAlignment) -> Vec<Label> {
    let mut out = vec![Label::Outside; alignment.num_subwords()];
    for (label, range) in labels.iter().zip(&alignment.token_subwords) {
        for (k, j) in range.clone().enumerate() {
            out[j] = if k == 0 { *label } else { label.continuation() };
        }
    }
    out
}

/// Copies a per-token value onto every subword of the token.
pub fn project_values<T: Clone + Default>(values: &[T], alignment: &SubwordAlignment) -> Vec<T> {
    let mut out = vec![T::default(); alignment.num_subwords()];
    for (value, range) in values.iter().zip(&alignment.token_subwords) {
        for j in range.clone() {
            out[j] = value.clone();
        }
    }
    out
}

/// Subword predictions back onto tokens: the strictly most frequent label of
/// each token's subwords, or the first subword's label when the top count is
/// shared.
pub fn resolve_labels<T: Clone + PartialEq>(subword_labels: &[T], alignment: &SubwordAlignment) -> Vec<T> {
    alignment
        .token_subwords
        .iter()
        .map(|range| majority_or_first(&subword_labels[range.clone()]))
        .collect()
}

/// [`resolve_labels`] for BIO tags. When the first subword reads `B-X`, later
/// `I-X` subwords are the continuation of that same tag and vote for `B-X`,
/// so resolving a projection returns the token labels.
pub fn resolve_tags(subword_labels: &[Label], alignment: &SubwordAlignment) -> Vec<Label> {
    alignment
        .token_subwords
        .iter()
        .map(|range| {
            let labels = &subword_labels[range.clone()];
            let first = labels[0];
            let folded: Vec<Label> = labels
                .iter()
                .map(|&l| if l != first && first.continuation() == l { first } else { l })
                .collect();
            majority_or_first(&folded)
        })
        .collect()
}

fn majority_or_first<T: Clone + PartialEq>(labels: &[T]) -> T {
    let mut counts: Vec<(&T, usize)> = Vec::new();
    for label in labels {
        match counts.iter_mut().find(|(l, _)| *l == label) {
            Some((_, c)) => *c += 1,
            None => counts.push((label, 1)),
        }
    }
    let top = counts.iter().map(|(_, c)| *c).max().unwrap_or(0);
    let mut leaders = counts.iter().filter(|(_, c)| *c == top);
    match (leaders.next(), leaders.next()) {
        (Some((label, _)), None) => (*label).clone(),
        _ => labels[0].clone(),
    }
}
