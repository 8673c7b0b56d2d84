//! Subword representations: an internal embedding table or externally
//! supplied contextual vectors, projected by a feed-forward network with
//! inverted dropout on its hidden layers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::align::START_ID;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, join_name, Matrix, Parameters, Tensor};
use crate::preprocess::CleaningMode;

pub const HIDDEN_WIDTH: usize = 512;
pub const DEFAULT_EMBEDDING_DIM: usize = 256;
pub const DEFAULT_OUTPUT_DIM: usize = 128;
pub const EMBEDDING_INIT_BOUND: f64 = 0.05;

/// Hidden-layer dropout probability for a training mode.
pub fn dropout_for(mode: CleaningMode) -> f64 {
    match mode {
        CleaningMode::Finetune => 0.8,
        CleaningMode::Frozen => 0.2,
    }
}

/// Affine map `y = W x + b` with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Weights uniform in `±1/sqrt(input)`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        let n_in = self.input_dim();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(&self.weight.data[o * n_in..(o + 1) * n_in], x) + self.bias.data[o];
        }
    }

    /// Accumulates parameter gradients into `grads`; when `grad_x` is given,
    /// also accumulates `W^T grad_y` into it.
    pub fn backward(&self, x: &[f64], grad_y: &[f64], grads: &mut Linear, grad_x: Option<&mut [f64]>) {
        let n_in = self.input_dim();
        for (o, &g) in grad_y.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, &mut grads.weight.data[o * n_in..(o + 1) * n_in]);
            grads.bias.data[o] += g;
        }
        if let Some(grad_x) = grad_x {
            for (o, &g) in grad_y.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &self.weight.data[o * n_in..(o + 1) * n_in], grad_x);
                }
            }
        }
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join_name(prefix, "weight"), &self.weight);
        f(join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join_name(prefix, "weight"), &mut self.weight);
        f(join_name(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn init(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        EmbeddingTable {
            table: Tensor::uniform(&[vocab_size, dim], EMBEDDING_INIT_BOUND, rng),
        }
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EmbeddingTable {
            table: Tensor::zeros(&[vocab_size, dim]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape[1]
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let d = self.dim();
        &self.table.data[id as usize * d..(id as usize + 1) * d]
    }

    fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let d = self.dim();
        &mut self.table.data[id as usize * d..(id as usize + 1) * d]
    }
}

impl Parameters for EmbeddingTable {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join_name(prefix, "table"), &self.table);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join_name(prefix, "table"), &mut self.table);
    }
}

/// Feed-forward projection `d_emb -> 512 (-> 512) -> d_out` with the ramp
/// nonlinearity and dropout after every hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub hidden: Vec<Linear>,
    pub output: Linear,
    pub dropout: f64,
}

impl Projector {
    pub fn init(
        input: usize,
        hidden_layers: usize,
        output: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut width = input;
        for _ in 0..hidden_layers {
            hidden.push(Linear::init(width, HIDDEN_WIDTH, rng));
            width = HIDDEN_WIDTH;
        }
        Projector {
            hidden,
            output: Linear::init(width, output, rng),
            dropout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Projector {
            hidden: self
                .hidden
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            output: Linear::zeros(self.output.input_dim(), self.output.output_dim()),
            dropout: self.dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.output.input_dim(), Linear::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }
}

impl Parameters for Projector {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, layer) in self.hidden.iter().enumerate() {
            layer.visit(&join_name(prefix, &format!("hidden{i}")), f);
        }
        self.output.visit(&join_name(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            layer.visit_mut(&join_name(prefix, &format!("hidden{i}")), f);
        }
        self.output.visit_mut(&join_name(prefix, "output"), f);
    }
}

/// Input rows for one sequence.
#[derive(Debug, Clone, Copy)]
pub enum SequenceInput<'a> {
    /// Subword ids looked up in the internal table.
    Ids(&'a [u32]),
    /// Precomputed vectors, one row per subword.
    Vectors(&'a Matrix),
}

impl SequenceInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            SequenceInput::Ids(ids) => ids.len(),
            SequenceInput::Vectors(m) => m.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// With internal embeddings the sequence-start row is `<s>` plus the mean of
/// the other rows' embeddings, so that the pooled row sees the sentence.
fn has_summary_row(ids: &[u32]) -> bool {
    ids.len() > 1 && ids[0] == START_ID
}

/// The trainable token-representation stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// `None` when vectors come from an external file.
    pub embedding: Option<EmbeddingTable>,
    pub projector: Projector,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    ids: Option<Vec<u32>>,
    /// Input to each layer: the embeddings, then each hidden activation.
    layer_inputs: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pre_activations: Vec<Matrix>,
    /// Dropout multipliers (0 or 1/(1-p)) of each hidden layer; empty when
    /// dropout was inactive.
    masks: Vec<Vec<f64>>,
}

impl Encoder {
    pub fn zeros_like(&self) -> Self {
        Encoder {
            embedding: self
                .embedding
                .as_ref()
                .map(|e| EmbeddingTable::zeros(e.vocab_size(), e.dim())),
            projector: self.projector.zeros_like(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projector.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.projector.output_dim()
    }

    fn embed(&self, input: SequenceInput<'_>) -> Result<Matrix> {
        let dim = self.input_dim();
        match (input, &self.embedding) {
            (SequenceInput::Ids(ids), Some(table)) => {
                let mut m = Matrix::zeros(ids.len(), dim);
                for (i, &id) in ids.iter().enumerate() {
                    if id as usize >= table.vocab_size() {
                        return Err(Error::Encoding(format!(
                            "subword id {id} out of range for a vocabulary of {}",
                            table.vocab_size()
                        )));
                    }
                    m.row_mut(i).copy_from_slice(table.row(id));
                }
                if has_summary_row(ids) {
                    let scale = 1.0 / (ids.len() - 1) as f64;
                    for &id in &ids[1..] {
                        axpy(scale, table.row(id), m.row_mut(0));
                    }
                }
                Ok(m)
            }
            (SequenceInput::Vectors(m), _) => {
                if m.cols != dim {
                    return Err(Error::Encoding(format!(
                        "external vectors have width {}, encoder expects {dim}",
                        m.cols
                    )));
                }
                Ok(m.clone())
            }
            (SequenceInput::Ids(_), None) => Err(Error::Encoding(
                "encoder has no embedding table; supply external vectors".into(),
            )),
        }
    }

    /// Encodes one sequence to an `n x d_out` matrix. Dropout is applied only
    /// when `dropout_rng` is given (training).
    pub fn encode_sequence<R: Rng>(
        &self,
        input: SequenceInput<'_>,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Matrix, EncodeCache)> {
        let embedded = self.embed(input)?;
        let n = embedded.rows;
        let p = self.projector.dropout;
        let mut cache = EncodeCache {
            ids: match input {
                SequenceInput::Ids(ids) => Some(ids.to_vec()),
                SequenceInput::Vectors(_) => None,
            },
            layer_inputs: vec![embedded],
            pre_activations: Vec::new(),
            masks: Vec::new(),
        };
        for layer in &self.projector.hidden {
            let x = cache.layer_inputs.last().unwrap();
            let width = layer.output_dim();
            let mut pre = Matrix::zeros(n, width);
            for i in 0..n {
                layer.forward(x.row(i), pre.row_mut(i));
            }
            let mut act = pre.clone();
            act.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..n * width)
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    act.data.iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
                    mask
                }
                _ => Vec::new(),
            };
            cache.pre_activations.push(pre);
            cache.masks.push(mask);
            cache.layer_inputs.push(act);
        }
        let x = cache.layer_inputs.last().unwrap();
        let mut out = Matrix::zeros(n, self.output_dim());
        for i in 0..n {
            self.projector.output.forward(x.row(i), out.row_mut(i));
        }
        Ok((out, cache))
    }

    /// Back-propagates `grad_out` (`n x d_out`). Embedding-table gradients are
    /// produced only when `train_embeddings` is set.
    pub fn backward(
        &self,
        cache: &EncodeCache,
        grad_out: &Matrix,
        grads: &mut Encoder,
        train_embeddings: bool,
    ) {
        let need_input_grad = train_embeddings && cache.ids.is_some() && self.embedding.is_some();
        let grad_input = self.backward_projector(cache, grad_out, &mut grads.projector, need_input_grad);
        if let (Some(grad_input), Some(ids), Some(table)) =
            (grad_input, cache.ids(), grads.embedding.as_mut())
        {
            scatter_embedding_grad(ids, &grad_input, table);
        }
    }

    /// Projector part of [`Encoder::backward`]; returns the gradient with
    /// respect to the embedded input rows when `need_input_grad` is set.
    pub fn backward_projector(
        &self,
        cache: &EncodeCache,
        grad_out: &Matrix,
        grads: &mut Projector,
        need_input_grad: bool,
    ) -> Option<Matrix> {
        let n = grad_out.rows;
        let layers = self.projector.hidden.len();

        let mut grad = Matrix::zeros(n, self.projector.output.input_dim());
        let last_input = &cache.layer_inputs[layers];
        for i in 0..n {
            let g_in = (layers > 0 || need_input_grad).then(|| grad.row_mut(i));
            self.projector
                .output
                .backward(last_input.row(i), grad_out.row(i), &mut grads.output, g_in);
        }
        for l in (0..layers).rev() {
            let layer = &self.projector.hidden[l];
            let pre = &cache.pre_activations[l];
            let mask = &cache.masks[l];
            for (k, g) in grad.data.iter_mut().enumerate() {
                let gate = if pre.data[k] > 0.0 { 1.0 } else { 0.0 };
                let m = if mask.is_empty() { 1.0 } else { mask[k] };
                *g *= gate * m;
            }
            let x = &cache.layer_inputs[l];
            let mut next = Matrix::zeros(n, layer.input_dim());
            for i in 0..n {
                let g_in = (l > 0 || need_input_grad).then(|| next.row_mut(i));
                layer.backward(x.row(i), grad.row(i), &mut grads.hidden[l], g_in);
            }
            grad = next;
        }
        need_input_grad.then_some(grad)
    }
}

impl EncodeCache {
    /// The looked-up ids, `None` for external vectors.
    pub fn ids(&self) -> Option<&[u32]> {
        self.ids.as_deref()
    }
}

/// Adds the gradient of the embedded rows of `ids` into `table`.
pub fn scatter_embedding_grad(ids: &[u32], grad_input: &Matrix, table: &mut EmbeddingTable) {
    for (i, &id) in ids.iter().enumerate() {
        axpy(1.0, grad_input.row(i), table.row_mut(id));
    }
    if has_summary_row(ids) {
        let scale = 1.0 / (ids.len() - 1) as f64;
        for &id in &ids[1..] {
            axpy(scale, grad_input.row(0), table.row_mut(id));
        }
    }
}

impl Parameters for Encoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(e) = &self.embedding {
            e.visit(&join_name(prefix, "embedding"), f);
        }
        self.projector.visit(&join_name(prefix, "projector"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(e) = &mut self.embedding {
            e.visit_mut(&join_name(prefix, "embedding"), f);
        }
        self.projector.visit_mut(&join_name(prefix, "projector"), f);
    }
}

/// The sentence representation: the row at the sequence-start position.
pub fn pooled_representation(encoded: &Matrix) -> &[f64] {
    encoded.row(0)
}

/// One sentence of an external embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalBlock {
    pub pieces: Vec<String>,
    pub vectors: Matrix,
}

/// Contextual vectors per subword per sentence, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub blocks: Vec<ExternalBlock>,
}

impl ExternalEmbeddings {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| err(1, "missing `<num_sentences> <dim>` header".into()))?;
        let mut fields = header.split_whitespace();
        let parse_usize = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok());
        let (Some(count), Some(dim), None) =
            (parse_usize(fields.next()), parse_usize(fields.next()), fields.next())
        else {
            return Err(err(1, "header must be `<num_sentences> <dim>`".into()));
        };

        let mut blocks = Vec::with_capacity(count);
        let mut pieces = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut finish = |pieces: &mut Vec<String>, rows: &mut Vec<Vec<f64>>| {
            if !pieces.is_empty() {
                blocks.push(ExternalBlock {
                    pieces: std::mem::take(pieces),
                    vectors: Matrix::from_rows(&std::mem::take(rows)),
                });
            }
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                finish(&mut pieces, &mut rows);
                continue;
            }
            let mut fields = line.split(' ');
            let piece = fields.next().unwrap_or_default();
            let values = fields
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(i + 1, format!("bad float: {e}")))?;
            if values.len() != dim {
                return Err(err(
                    i + 1,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            pieces.push(piece.to_string());
            rows.push(values);
        }
        finish(&mut pieces, &mut rows);
        if blocks.len() != count {
            return Err(Error::Mismatch(format!(
                "{}: header announces {count} sentences, file holds {}",
                origin.display(),
                blocks.len()
            )));
        }
        Ok(ExternalEmbeddings { dim, blocks })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExternalEmbeddings::parse(&text, path)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{} {}\n", self.blocks.len(), self.dim);
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                out.push('\n');
            }
            for (i, piece) in block.pieces.iter().enumerate() {
                out.push_str(piece);
                for v in block.vectors.row(i) {
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// The block for sentence `index`, checked against the expected pieces.
    pub fn block_for(&self, index: usize, pieces: &[&str]) -> Result<&ExternalBlock> {
        let block = self.blocks.get(index).ok_or_else(|| {
            Error::Mismatch(format!(
                "sentence {index}: embedding file holds only {} blocks",
                self.blocks.len()
            ))
        })?;
        if block.pieces.len() != pieces.len() {
            return Err(Error::Mismatch(format!(
                "sentence {index}: embedding block has {} rows, sequence has {} subwords",
                block.pieces.len(),
                pieces.len()
            )));
        }
        if let Some(k) = (0..pieces.len()).find(|&k| block.pieces[k] != pieces[k]) {
            return Err(Error::Mismatch(format!(
                "sentence {index}: embedding row {k} is `{}`, expected `{}`",
                block.pieces[k], pieces[k]
            )));
        }
        Ok(block)
    }
}
