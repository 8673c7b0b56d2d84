//! Subword tiling and label resolution over generated sentences.

use std::collections::HashMap;

use deftag::align::{
    align_tokens, build_vocabulary, project_labels, resolve_labels, resolve_tags, tokenize_subwords,
    SubwordAlignment, SubwordVocabulary,
};
use deftag::corpus::{reconstruct_sentence, BaseTag, Label};
use deftag::preprocess::{clean_token, CleaningMode};
use proptest::prelude::*;

fn vocab() -> &'static SubwordVocabulary {
    use std::sync::OnceLock;
    static VOCAB: OnceLock<SubwordVocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let corpus = [
            "the extrapolate term is defined as a function of the variable",
            "an alias refers to the definition given above ( see section 2 )",
            "polymerase chain reaction : a method , e.g. for amplification",
        ];
        build_vocabulary(&corpus, 400).unwrap()
    })
}

fn any_label() -> impl Strategy<Value = Label> {
    (0..Label::COUNT).prop_map(|i| Label::from_index(i).unwrap())
}

fn word() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-zA-Z]{1,12}",
        1 => "[0-9]{1,4}",
        1 => "[.,;:!?()'-]",
        1 => "[a-z]{1,5}[-'][a-z]{1,5}",
        1 => "[ -~]{1,6}",
        1 => "[a-zà-ÿ]{1,8}",
    ]
}

/// Cleaned tokens, reconstructed sentence, token spans, subwords, alignment.
fn aligned(words: &[String]) -> (String, Vec<std::ops::Range<usize>>, SubwordAlignment) {
    let tokens: Vec<String> = words.iter().map(|w| clean_token(w, CleaningMode::Finetune)).collect();
    let rec = reconstruct_sentence(&tokens);
    let subwords = tokenize_subwords(&rec.text, vocab());
    let alignment = align_tokens(&rec.spans, &subwords).unwrap();
    (rec.text, rec.spans, alignment)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn subwords_tile_tokens_and_resolution_inverts_projection(
        words in prop::collection::vec(word(), 1..20),
        seed in prop::collection::vec(any_label(), 20),
    ) {
        let (text, spans, alignment) = aligned(&words);
        prop_assert_eq!(alignment.num_tokens(), spans.len());
        let mut next = 0;
        for (span, range) in spans.iter().zip(&alignment.token_subwords) {
            prop_assert!(!range.is_empty());
            prop_assert_eq!(range.start, next);
            next = range.end;
            let pieces = &alignment.subword_spans[range.clone()];
            prop_assert_eq!(pieces[0].start, span.start);
            prop_assert_eq!(pieces[pieces.len() - 1].end, span.end);
            for w in pieces.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            let joined: String = pieces.iter().map(|p| &text[p.clone()]).collect();
            prop_assert_eq!(joined.as_str(), &text[span.clone()]);
        }
        prop_assert_eq!(next, alignment.num_subwords());

        let labels: Vec<Label> = seed[..spans.len()].to_vec();
        let projected = project_labels(&labels, &alignment);
        prop_assert_eq!(&resolve_tags(&projected, &alignment), &labels);
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let spread: Vec<usize> = alignment
            .token_subwords
            .iter()
            .zip(&idx)
            .flat_map(|(r, &v)| std::iter::repeat(v).take(r.len()))
            .collect();
        prop_assert_eq!(resolve_labels(&spread, &alignment), idx);
    }
}

/// Count occurrences, take the strict maximum, else the first element.
fn counting_oracle(labels: &[u8]) -> u8 {
    let mut counts: HashMap<u8, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let top = *counts.values().max().unwrap();
    let winners: Vec<u8> = counts.iter().filter(|(_, &c)| c == top).map(|(&l, _)| l).collect();
    if winners.len() == 1 {
        winners[0]
    } else {
        labels[0]
    }
}

fn one_token(n: usize) -> SubwordAlignment {
    SubwordAlignment {
        token_subwords: vec![0..n],
        subword_spans: (0..n).map(|i| i..i + 1).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn resolution_agrees_with_counting(labels in prop::collection::vec(0u8..5, 1..9)) {
        let got = resolve_labels(&labels, &one_token(labels.len()));
        prop_assert_eq!(got, vec![counting_oracle(&labels)]);
    }

    #[test]
    fn permuting_later_subwords_keeps_a_strict_majority(
        labels in prop::collection::vec(0u8..4, 2..9),
        rot in 0usize..8,
    ) {
        let mut permuted = labels.clone();
        let tail_len = permuted.len() - 1;
        permuted[1..].rotate_left(rot % tail_len);
        let a = resolve_labels(&labels, &one_token(labels.len()));
        let b = resolve_labels(&permuted, &one_token(labels.len()));
        let mut counts: HashMap<u8, usize> = HashMap::new();
        for &l in &labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        let top = *counts.values().max().unwrap();
        if counts.values().filter(|&&c| c == top).count() == 1 {
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn majority_and_tie_cases() {
    let term = Label::Begin(BaseTag::Term);
    let def = Label::Inside(BaseTag::Definition);
    assert_eq!(resolve_labels(&[term, term, def], &one_token(3)), vec![term]);
    assert_eq!(resolve_tags(&[term, term, def], &one_token(3)), vec![term]);
    let x = Label::Begin(BaseTag::Qualifier);
    assert_eq!(resolve_labels(&[x, def], &one_token(2)), vec![x]);
    assert_eq!(resolve_labels(&[def, x], &one_token(2)), vec![def]);
    assert_eq!(resolve_labels(&[x], &one_token(1)), vec![x]);
}
