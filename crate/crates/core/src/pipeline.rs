//! Glue between corpus records and model inputs: subword examples with
//! projected targets, and the prediction paths that fold subword outputs
//! back onto corpus tokens.

use crate::align::{
    align_tokens, project_labels, project_values, resolve_labels, resolve_tags, tokenize_subwords,
    SubwordAlignment, SubwordVocabulary, START_ID, START_TOKEN,
};
use crate::corpus::{derive_sentence_label, reconstruct_sentence, ContextWindow, DeftToken, Label, Relation};
use crate::crf::viterbi_decode;
use crate::encoder::{pooled_representation, ExternalBlock, ExternalEmbeddings, SequenceInput};
use crate::error::{Error, Result};
use crate::heads::{classify_sentence, encode_tag_ids, NO_ID_CATEGORY};
use crate::linalg::Matrix;
use crate::preprocess::{clean_sentence, clean_token, CleaningMode};
use crate::train::Model;
use rand_chacha::ChaCha8Rng;

/// One sentence ready for the encoder. Position 0 is always `<s>`; the
/// alignment and the per-subword targets cover positions `1..`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pieces: Vec<String>,
    pub ids: Vec<u32>,
    pub alignment: SubwordAlignment,
    pub token_tags: Vec<Label>,
    pub tags: Vec<usize>,
    pub id_categories: Vec<usize>,
    pub relations: Vec<usize>,
    pub has_definition: bool,
    /// Externally supplied vectors for every position, `<s>` included.
    pub vectors: Option<Matrix>,
}

impl Example {
    pub fn input(&self) -> SequenceInput<'_> {
        match &self.vectors {
            Some(m) => SequenceInput::Vectors(m),
            None => SequenceInput::Ids(&self.ids),
        }
    }

    /// Number of subwords after `<s>`.
    pub fn num_subwords(&self) -> usize {
        self.ids.len() - 1
    }
}

fn start_and_subwords(text: &str, vocab: &SubwordVocabulary) -> (Vec<String>, Vec<u32>, Vec<crate::align::Subword>) {
    let subwords = tokenize_subwords(text, vocab);
    let mut pieces = vec![START_TOKEN.to_string()];
    let mut ids = vec![START_ID];
    for s in &subwords {
        pieces.push(s.piece.clone());
        ids.push(s.id);
    }
    (pieces, ids, subwords)
}

/// A sentence-classification example from already cleaned text.
pub fn sentence_example(text: &str, has_definition: bool, vocab: &SubwordVocabulary) -> Example {
    let (pieces, ids, _) = start_and_subwords(text, vocab);
    Example {
        pieces,
        ids,
        alignment: SubwordAlignment {
            token_subwords: Vec::new(),
            subword_spans: Vec::new(),
        },
        token_tags: Vec::new(),
        tags: Vec::new(),
        id_categories: Vec::new(),
        relations: Vec::new(),
        has_definition,
        vectors: None,
    }
}

/// The sentence text used for classification: the reconstructed sentence,
/// cleaned as a whole.
pub fn classification_text(tokens: &[DeftToken], mode: CleaningMode) -> String {
    clean_sentence(&reconstruct_sentence(tokens).text, mode)
}

/// The text used for token labeling: each token cleaned on its own, then
/// joined, so that every token keeps its own span.
pub fn labeling_text(tokens: &[DeftToken], mode: CleaningMode) -> (String, Vec<std::ops::Range<usize>>) {
    let cleaned: Vec<String> = tokens.iter().map(|t| clean_token(&t.text, mode)).collect();
    let r = reconstruct_sentence(&cleaned);
    (r.text, r.spans)
}

/// A token-labeling example. `id_categories` holds one id-head category per
/// token.
pub fn token_example(
    tokens: &[DeftToken],
    id_categories: &[usize],
    mode: CleaningMode,
    vocab: &SubwordVocabulary,
) -> Result<Example> {
    let (text, spans) = labeling_text(tokens, mode);
    let (pieces, ids, subwords) = start_and_subwords(&text, vocab);
    let alignment = align_tokens(&spans, &subwords)?;
    let token_tags: Vec<Label> = tokens.iter().map(|t| t.tag).collect();
    let relations: Vec<usize> = tokens.iter().map(|t| t.relation.index()).collect();
    Ok(Example {
        pieces,
        ids,
        tags: project_labels(&token_tags, &alignment)
            .iter()
            .map(|l| l.index())
            .collect(),
        id_categories: project_values(id_categories, &alignment),
        relations: project_values(&relations, &alignment),
        alignment,
        token_tags,
        has_definition: derive_sentence_label(tokens),
        vectors: None,
    })
}

/// Token-labeling examples for every sentence of every window, in corpus
/// order. Tag ids are numbered per window.
pub fn window_examples(
    windows: &[ContextWindow],
    mode: CleaningMode,
    vocab: &SubwordVocabulary,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for window in windows {
        let tag_ids: Vec<Option<u32>> = window.tokens().map(|t| t.tag_id).collect();
        let (categories, _) = encode_tag_ids(&tag_ids)?;
        let mut offset = 0;
        for sentence in &window.sentences {
            let n = sentence.tokens.len();
            out.push(token_example(
                &sentence.tokens,
                &categories[offset..offset + n],
                mode,
                vocab,
            )?);
            offset += n;
        }
    }
    Ok(out)
}

/// Sentence-classification examples for every sentence of every window.
pub fn window_sentence_examples(
    windows: &[ContextWindow],
    mode: CleaningMode,
    vocab: &SubwordVocabulary,
) -> Vec<Example> {
    windows
        .iter()
        .flat_map(|w| &w.sentences)
        .map(|s| sentence_example(&classification_text(&s.tokens, mode), s.has_definition, vocab))
        .collect()
}

/// Attaches external vectors block by block, checking each block's pieces.
pub fn attach_external(examples: &mut [Example], external: &ExternalEmbeddings) -> Result<()> {
    if external.blocks.len() != examples.len() {
        return Err(Error::Mismatch(format!(
            "embedding file has {} sentence blocks, corpus has {} sentences",
            external.blocks.len(),
            examples.len()
        )));
    }
    for (i, ex) in examples.iter_mut().enumerate() {
        let pieces: Vec<&str> = ex.pieces.iter().map(String::as_str).collect();
        ex.vectors = Some(external.block_for(i, &pieces)?.vectors.clone());
    }
    Ok(())
}

/// Builds an embedding file for `examples` with vectors from `vector_of`
/// (called with the sentence index, the position and the piece).
pub fn external_embeddings_for(
    examples: &[Example],
    dim: usize,
    mut vector_of: impl FnMut(usize, usize, &str) -> Vec<f64>,
) -> ExternalEmbeddings {
    let blocks = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| ExternalBlock {
            pieces: ex.pieces.clone(),
            vectors: Matrix::from_rows(
                &ex.pieces
                    .iter()
                    .enumerate()
                    .map(|(j, p)| vector_of(i, j, p))
                    .collect::<Vec<_>>(),
            ),
        })
        .collect();
    ExternalEmbeddings { dim, blocks }
}

pub(crate) fn subword_rows(encoded: &Matrix) -> Matrix {
    Matrix {
        rows: encoded.rows - 1,
        cols: encoded.cols,
        data: encoded.data[encoded.cols..].to_vec(),
    }
}

fn encode(model: &Model, ex: &Example) -> Result<Matrix> {
    Ok(model
        .encoder
        .encode_sequence::<ChaCha8Rng>(ex.input(), None)?
        .0)
}

/// Probability that the example's sentence holds a definition.
pub fn predict_sentence(model: &Model, ex: &Example) -> Result<f64> {
    let head = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no sentence classifier".into()))?;
    Ok(classify_sentence(pooled_representation(&encode(model, ex)?), head))
}

/// Viterbi labels per subword, resolved onto the example's tokens.
pub fn predict_tags(model: &Model, ex: &Example) -> Result<Vec<Label>> {
    let crf = model
        .crf
        .as_ref()
        .ok_or_else(|| Error::Config("model has no CRF tagger".into()))?;
    let x = subword_rows(&encode(model, ex)?);
    let path = viterbi_decode(&x, crf)?;
    let labels: Vec<Label> = path.iter().map(|&i| Label::from_index(i).unwrap()).collect();
    Ok(resolve_tags(&labels, &ex.alignment))
}

/// Per-token outputs of the multi-task model.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskPrediction {
    pub tags: Vec<Label>,
    pub id_categories: Vec<usize>,
    pub relations: Vec<Relation>,
}

pub fn predict_multitask(model: &Model, ex: &Example) -> Result<MultiTaskPrediction> {
    let crf = model
        .crf
        .as_ref()
        .ok_or_else(|| Error::Config("model has no CRF tagger".into()))?;
    let heads = model
        .heads
        .as_ref()
        .ok_or_else(|| Error::Config("model has no tag-id and relation heads".into()))?;
    let x = subword_rows(&encode(model, ex)?);
    let path = viterbi_decode(&x, crf)?;
    let labels: Vec<Label> = path.iter().map(|&i| Label::from_index(i).unwrap()).collect();
    let (ids, rels) = heads.predict(&x);
    let relations = resolve_labels(&rels, &ex.alignment)
        .into_iter()
        .map(|c| Relation::from_index(c).unwrap_or(Relation::None))
        .collect();
    Ok(MultiTaskPrediction {
        tags: resolve_tags(&labels, &ex.alignment),
        id_categories: resolve_labels(&ids, &ex.alignment),
        relations,
    })
}

/// Fraction of tokens whose predicted tag equals the gold tag.
pub fn token_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let pred = predict_tags(model, ex)?;
        correct += pred.iter().zip(&ex.token_tags).filter(|(a, b)| a == b).count();
        total += ex.token_tags.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Gold id categories of a window with every token outside a tag span.
pub fn untagged_categories(n: usize) -> Vec<usize> {
    vec![NO_ID_CATEGORY; n]
}
