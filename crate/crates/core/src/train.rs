//! Adam optimization, the epoch loop with best-on-dev selection, and
//! checkpoint storage.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Label, Task};
use crate::crf::{nll_and_gradient, CrfParameters};
use crate::encoder::{dropout_for, scatter_embedding_grad, EmbeddingTable, Encoder, Projector};
use crate::error::{Error, Result};
use crate::eval::{sentence_metrics, tag_metrics};
use crate::heads::{decide, multitask_objective, LossWeights, MultiTaskHeads, SentenceClassifierHead};
use crate::linalg::{join_name, Matrix, Parameters, Tensor};
use crate::pipeline::{predict_sentence, predict_tags, subword_rows, Example};
use crate::preprocess::CleaningMode;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";
pub const TRACE_FILE: &str = "trace.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: CleaningMode,
    pub task: Task,
    pub weights: LossWeights,
    pub seed: u64,
    pub hidden_layers: usize,
    pub embedding_dim: usize,
    pub output_dim: usize,
    /// Overrides the mode's dropout rate.
    pub dropout: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            epochs: 100,
            batch_size: 16,
            mode: CleaningMode::Finetune,
            task: Task::Labeling,
            weights: LossWeights::default(),
            seed: 0,
            hidden_layers: 1,
            embedding_dim: crate::encoder::DEFAULT_EMBEDDING_DIM,
            output_dim: crate::encoder::DEFAULT_OUTPUT_DIM,
            dropout: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "learning_rate",
        "epochs",
        "batch_size",
        "mode",
        "task",
        "lambda_tag",
        "lambda_id",
        "lambda_relation",
        "seed",
        "hidden_layers",
        "embedding_dim",
        "output_dim",
        "dropout",
    ];

    pub fn dropout(&self) -> f64 {
        self.dropout.unwrap_or_else(|| dropout_for(self.mode))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.output_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("dimensions must be at least 1".into()));
        }
        let p = self.dropout();
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {p}")));
        }
        self.weights.validate()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "mode" => self.mode = value.parse().map_err(Error::Config)?,
            "task" => self.task = value.parse().map_err(Error::Config)?,
            "lambda_tag" => self.weights.tag = parse_value(key, value)?,
            "lambda_id" => self.weights.id = parse_value(key, value)?,
            "lambda_relation" => self.weights.relation = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "hidden_layers" => self.hidden_layers = parse_value(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(key, value)?,
            "output_dim" => self.output_dim = parse_value(key, value)?,
            "dropout" => self.dropout = Some(parse_value(key, value)?),
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`TrainConfig::KEYS`] order; the dropout entry
    /// is the effective rate.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("mode", self.mode.to_string()),
            ("task", self.task.to_string()),
            ("lambda_tag", self.weights.tag.to_string()),
            ("lambda_id", self.weights.id.to_string()),
            ("lambda_relation", self.weights.relation.to_string()),
            ("seed", self.seed.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("output_dim", self.output_dim.to_string()),
            ("dropout", self.dropout().to_string()),
        ]
    }
}

/// Where the encoder's input rows come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// A trainable table over the subword vocabulary.
    Internal { vocab_size: usize },
    /// Vectors of this width supplied with every example.
    External { dim: usize },
}

// Stream labels for the seeded generators.
const INIT_EMBEDDING: u64 = 1;
const INIT_PROJECTOR: u64 = 2;
const INIT_CLASSIFIER: u64 = 3;
const INIT_CRF: u64 = 4;
const INIT_HEADS: u64 = 5;
const SHUFFLE: u64 = 6;
const DROPOUT: u64 = 7;

/// An independent generator for `(seed, label, index)`. Separate streams keep
/// component initializations independent of which other components exist.
pub fn seeded_stream(seed: u64, label: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&label.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: Option<SentenceClassifierHead>,
    pub crf: Option<CrfParameters>,
    pub heads: Option<MultiTaskHeads>,
}

impl Model {
    pub fn init(config: &TrainConfig, source: EmbeddingSource) -> Model {
        let seed = config.seed;
        let (embedding, input_dim) = match source {
            EmbeddingSource::Internal { vocab_size } => (
                Some(EmbeddingTable::init(
                    vocab_size,
                    config.embedding_dim,
                    &mut seeded_stream(seed, INIT_EMBEDDING, 0),
                )),
                config.embedding_dim,
            ),
            EmbeddingSource::External { dim } => (None, dim),
        };
        let projector = Projector::init(
            input_dim,
            config.hidden_layers,
            config.output_dim,
            config.dropout(),
            &mut seeded_stream(seed, INIT_PROJECTOR, 0),
        );
        let d = config.output_dim;
        let tagging = matches!(config.task, Task::Labeling | Task::MultiTask);
        let mut model = Model {
            encoder: Encoder {
                embedding,
                projector,
            },
            classifier: (config.task == Task::Classification)
                .then(|| SentenceClassifierHead::init(d, &mut seeded_stream(seed, INIT_CLASSIFIER, 0))),
            crf: tagging.then(|| CrfParameters::init(Label::COUNT, d, &mut seeded_stream(seed, INIT_CRF, 0))),
            heads: (config.task == Task::MultiTask)
                .then(|| MultiTaskHeads::init(d, &mut seeded_stream(seed, INIT_HEADS, 0))),
        };
        model.round_to_f32();
        model
    }

    pub fn source(&self) -> EmbeddingSource {
        match &self.encoder.embedding {
            Some(t) => EmbeddingSource::Internal {
                vocab_size: t.vocab_size(),
            },
            None => EmbeddingSource::External {
                dim: self.encoder.input_dim(),
            },
        }
    }

    /// Zero gradients for everything except the embedding table.
    fn dense_zeros(&self) -> Model {
        Model {
            encoder: Encoder {
                embedding: None,
                projector: self.encoder.projector.zeros_like(),
            },
            classifier: self.classifier.as_ref().map(SentenceClassifierHead::zeros_like),
            crf: self
                .crf
                .as_ref()
                .map(|c| CrfParameters::zeros(c.num_labels(), c.dim())),
            heads: self.heads.as_ref().map(MultiTaskHeads::zeros_like),
        }
    }

    fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.round_to_f32();
        }
    }

    fn missing(part: &str) -> Error {
        Error::Config(format!("model has no {part} for this task"))
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit(&join_name(prefix, "encoder"), f);
        if let Some(c) = &self.classifier {
            c.visit(&join_name(prefix, "classifier"), f);
        }
        if let Some(c) = &self.crf {
            c.visit(&join_name(prefix, "crf"), f);
        }
        if let Some(h) = &self.heads {
            h.visit(&join_name(prefix, "heads"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.encoder.visit_mut(&join_name(prefix, "encoder"), f);
        if let Some(c) = &mut self.classifier {
            c.visit_mut(&join_name(prefix, "classifier"), f);
        }
        if let Some(c) = &mut self.crf {
            c.visit_mut(&join_name(prefix, "crf"), f);
        }
        if let Some(h) = &mut self.heads {
            h.visit_mut(&join_name(prefix, "heads"), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        AdamMoments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place; `t` is the 1-based
/// step number.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamMoments,
    t: u64,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam step over {} parameters with {} gradients and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let c1 = 1.0 - config.beta1.powi(t as i32);
    let c2 = 1.0 - config.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// Adam over a fixed, ordered list of parameter blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter blocks but {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| AdamMoments::zeros(p.len())).collect();
        }
        self.step += 1;
        for ((p, g), state) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if p.shape != g.shape {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} but gradient shape {:?}",
                    p.shape, g.shape
                )));
            }
            adam_step(&mut p.data, &g.data, state, self.step, lr, &self.config)?;
        }
        Ok(())
    }
}

struct ExampleGrad {
    loss: f64,
    dense: Model,
    input: Option<Matrix>,
}

fn example_gradient(
    model: &Model,
    ex: &Example,
    config: &TrainConfig,
    mut dropout_rng: ChaCha8Rng,
    train_embeddings: bool,
) -> Result<ExampleGrad> {
    let (encoded, cache) = model
        .encoder
        .encode_sequence(ex.input(), Some(&mut dropout_rng))?;
    let mut grads = model.dense_zeros();
    let mut grad_enc = Matrix::zeros(encoded.rows, encoded.cols);
    let loss = match config.task {
        Task::Classification => {
            let head = model.classifier.as_ref().ok_or_else(|| Model::missing("classifier"))?;
            let (loss, g) = head.bce_and_gradient(
                encoded.row(0),
                ex.has_definition,
                grads.classifier.as_mut().unwrap(),
            );
            grad_enc.row_mut(0).copy_from_slice(&g);
            loss
        }
        Task::Labeling => {
            let crf = model.crf.as_ref().ok_or_else(|| Model::missing("CRF"))?;
            let r = nll_and_gradient(&subword_rows(&encoded), &ex.tags, crf)?;
            grad_enc.data[encoded.cols..].copy_from_slice(&r.input.data);
            grads.crf = Some(r.params);
            r.loss
        }
        Task::MultiTask => {
            let crf = model.crf.as_ref().ok_or_else(|| Model::missing("CRF"))?;
            let heads = model.heads.as_ref().ok_or_else(|| Model::missing("multi-task heads"))?;
            let r = multitask_objective(
                &subword_rows(&encoded),
                &ex.tags,
                &ex.id_categories,
                &ex.relations,
                crf,
                heads,
                &config.weights,
            )?;
            grad_enc.data[encoded.cols..].copy_from_slice(&r.input.data);
            grads.crf = Some(r.crf);
            grads.heads = Some(r.heads);
            r.loss
        }
    };
    let need_input = train_embeddings && cache.ids().is_some();
    let input = model
        .encoder
        .backward_projector(&cache, &grad_enc, &mut grads.encoder.projector, need_input);
    Ok(ExampleGrad {
        loss,
        dense: grads,
        input,
    })
}

/// Selection criterion on dev data: positive-class F1 for sentence
/// classification, macro-F1 over the tag labels otherwise.
pub fn dev_metric(model: &Model, dev: &[Example], task: Task) -> Result<f64> {
    match task {
        Task::Classification => {
            let pred = dev
                .par_iter()
                .map(|ex| predict_sentence(model, ex).map(decide))
                .collect::<Result<Vec<bool>>>()?;
            let gold: Vec<bool> = dev.iter().map(|ex| ex.has_definition).collect();
            Ok(sentence_metrics(&gold, &pred)?.labels[1].f1)
        }
        Task::Labeling | Task::MultiTask => {
            let pred = dev
                .par_iter()
                .map(|ex| predict_tags(model, ex))
                .collect::<Result<Vec<Vec<Label>>>>()?;
            let gold: Vec<Vec<Label>> = dev.iter().map(|ex| ex.token_tags.clone()).collect();
            Ok(tag_metrics(&gold, &pred)?.macro_f1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the highest dev metric (first on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Parameters after the last epoch.
    pub last: Model,
    pub trace: Vec<TraceRow>,
    /// Mean batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Initializes a model from `config` and trains it.
pub fn train_loop(
    config: &TrainConfig,
    source: EmbeddingSource,
    train: &[Example],
    dev: &[Example],
) -> Result<TrainOutcome> {
    config.validate()?;
    train_model(config, Model::init(config, source), train, dev)
}

/// Trains `model` for exactly `config.epochs` epochs, evaluating on `dev`
/// after every epoch.
pub fn train_model(
    config: &TrainConfig,
    mut model: Model,
    train: &[Example],
    dev: &[Example],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("development data is empty".into()));
    }
    let train_embeddings = config.mode == CleaningMode::Finetune && model.encoder.embedding.is_some();
    let mut adam = Adam::new(AdamConfig::default());
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let n = train.len();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_stream(config.seed, SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let first = (epoch - 1) * n + b * config.batch_size;
            let results: Vec<Result<ExampleGrad>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let rng = seeded_stream(config.seed, DROPOUT, (first + j) as u64);
                    example_gradient(&model, &train[idx], config, rng, train_embeddings)
                })
                .collect();

            // Fixed-order reduction keeps the sums independent of scheduling.
            let mut acc = model.dense_zeros();
            let mut table_grad = model
                .encoder
                .embedding
                .as_ref()
                .filter(|_| train_embeddings)
                .map(|t| EmbeddingTable::zeros(t.vocab_size(), t.dim()));
            let mut batch_loss = 0.0;
            for (result, &idx) in results.into_iter().zip(batch) {
                let g = result?;
                batch_loss += g.loss;
                for ((_, a), (_, d)) in acc.tensors_mut().into_iter().zip(g.dense.tensors()) {
                    a.add_assign(d);
                }
                if let (Some(table), Some(input)) = (table_grad.as_mut(), g.input.as_ref()) {
                    scatter_embedding_grad(&train[idx].ids, input, table);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (_, t) in acc.tensors_mut() {
                t.scale(scale);
            }
            if let Some(t) = table_grad.as_mut() {
                t.table.scale(scale);
            }

            let mut grads: Vec<&Tensor> = Vec::new();
            if let Some(t) = &table_grad {
                grads.push(&t.table);
            }
            grads.extend(acc.tensors().into_iter().map(|(_, t)| t));
            let mut params: Vec<&mut Tensor> = model
                .tensors_mut()
                .into_iter()
                .filter(|(name, _)| train_embeddings || !name.starts_with("encoder.embedding"))
                .map(|(_, t)| t)
                .collect();
            adam.update(&mut params, &grads, config.learning_rate)?;
            model.round_to_f32();

            step_losses.push(batch_loss * scale);
            epoch_loss += batch_loss;
        }

        let metric = dev_metric(&model, dev, config.task)?;
        trace.push(TraceRow {
            epoch,
            train_loss: epoch_loss / n as f64,
            dev_metric: metric,
        });
        if best.as_ref().map_or(true, |(_, _, m)| metric > *m) {
            best = Some((model.clone(), epoch, metric));
        }
    }

    let (best, best_epoch, best_metric) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        last: model,
        trace,
        step_losses,
    })
}

pub fn format_trace(trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tdev_metric\n");
    for row in trace {
        let _ = writeln!(out, "{}\t{}\t{}", row.epoch, row.train_loss, row.dev_metric);
    }
    out
}

pub fn write_trace(dir: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = dir.as_ref().join(TRACE_FILE);
    fs::write(&path, format_trace(trace)).map_err(|e| Error::io(&path, e))
}

/// A trained model with the information needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab_fingerprint: String,
    pub dev_metric: f64,
    pub epoch: usize,
    pub model: Model,
}

impl Checkpoint {
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format_version = {CHECKPOINT_FORMAT}");
        let _ = writeln!(out, "vocab_fingerprint = {}", self.vocab_fingerprint);
        match self.model.source() {
            EmbeddingSource::Internal { vocab_size } => {
                let _ = writeln!(out, "embedding_source = internal");
                let _ = writeln!(out, "input_size = {vocab_size}");
            }
            EmbeddingSource::External { dim } => {
                let _ = writeln!(out, "embedding_source = external");
                let _ = writeln!(out, "input_size = {dim}");
            }
        }
        for (key, value) in self.config.to_pairs() {
            let _ = writeln!(out, "{key} = {value}");
        }
        let _ = writeln!(out, "dev_metric = {}", self.dev_metric);
        let _ = writeln!(out, "epoch = {}", self.epoch);
        for (name, t) in self.model.tensors() {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param = {name} {}", dims.join(" "));
        }
        out
    }

    /// Writes `manifest.txt` and `params.bin` (little-endian `f32` values in
    /// manifest order).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, self.manifest()).map_err(|e| Error::io(&manifest, e))?;
        let mut bytes = Vec::new();
        for (_, t) in self.model.tensors() {
            for v in &t.data {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let params = dir.join(PARAMS_FILE);
        fs::write(&params, bytes).map_err(|e| Error::io(&params, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: manifest_path.clone(),
            line,
            message,
        };

        let mut config = TrainConfig::default();
        let mut fingerprint = None;
        let mut source_kind = None;
        let mut input_size = None;
        let mut dev_metric = None;
        let mut epoch = None;
        let mut declared: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got `{line}`")))?;
            match key {
                "format_version" => {
                    if value != CHECKPOINT_FORMAT.to_string() {
                        return Err(parse_err(line_no, format!("unsupported format version {value}")));
                    }
                }
                "vocab_fingerprint" => fingerprint = Some(value.to_string()),
                "embedding_source" => source_kind = Some(value.to_string()),
                "input_size" => input_size = Some(parse_value::<usize>(key, value)?),
                "dev_metric" => dev_metric = Some(parse_value::<f64>(key, value)?),
                "epoch" => epoch = Some(parse_value::<usize>(key, value)?),
                "param" => {
                    let mut parts = value.split_whitespace();
                    let name = parts.next().unwrap_or_default().to_string();
                    let dims = parts
                        .map(|d| parse_value::<usize>(key, d))
                        .collect::<Result<Vec<_>>>()?;
                    declared.push((name, dims));
                }
                k if TrainConfig::KEYS.contains(&k) => config.set(k, value)?,
                other => return Err(parse_err(line_no, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| parse_err(0, format!("manifest lacks `{what}`"));
        let input_size = input_size.ok_or_else(|| missing("input_size"))?;
        let source = match source_kind.as_deref() {
            Some("internal") => EmbeddingSource::Internal {
                vocab_size: input_size,
            },
            Some("external") => EmbeddingSource::External { dim: input_size },
            Some(other) => return Err(parse_err(0, format!("unknown embedding source `{other}`"))),
            None => return Err(missing("embedding_source")),
        };
        let mut model = Model::init(&config, source);

        let params_path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let mut tensors = model.tensors_mut();
        if tensors.len() != declared.len() {
            return Err(Error::Mismatch(format!(
                "manifest declares {} parameter blocks, configuration implies {}",
                declared.len(),
                tensors.len()
            )));
        }
        let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        if bytes.len() != 4 * total {
            return Err(Error::Mismatch(format!(
                "{} holds {} bytes, expected {}",
                params_path.display(),
                bytes.len(),
                4 * total
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for ((name, t), (d_name, d_shape)) in tensors.iter_mut().zip(&declared) {
            if name != d_name || &t.shape != d_shape {
                return Err(Error::Mismatch(format!(
                    "parameter `{d_name}` {d_shape:?} does not match `{name}` {:?}",
                    t.shape
                )));
            }
            for v in t.data.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        drop(tensors);

        Ok(Checkpoint {
            config,
            vocab_fingerprint: fingerprint.ok_or_else(|| missing("vocab_fingerprint"))?,
            dev_metric: dev_metric.ok_or_else(|| missing("dev_metric"))?,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            model,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::SubwordVocabulary;
    use crate::corpus::{BaseTag, DeftToken};
    use crate::pipeline::{sentence_example, token_example};

    #[test]
    fn zero_gradient_keeps_parameters_and_decays_moments() {
        let mut p = vec![0.5, -1.0];
        let mut state = AdamMoments {
            m: vec![0.2, -0.4],
            v: vec![0.01, 0.04],
        };
        let before = state.clone();
        let cfg = AdamConfig::default();
        // With zero gradient the update is driven by the old moments only;
        // starting from zero moments nothing moves at all.
        let mut fresh = AdamMoments::zeros(2);
        let mut q = p.clone();
        adam_step(&mut q, &[0.0, 0.0], &mut fresh, 1, 0.1, &cfg).unwrap();
        assert_eq!(q, p);
        adam_step(&mut p, &[0.0, 0.0], &mut state, 3, 0.1, &cfg).unwrap();
        for i in 0..2 {
            assert_eq!(state.m[i], 0.9 * before.m[i]);
            assert_eq!(state.v[i], 0.999 * before.v[i]);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![1.0, 1.0, 1.0];
        let mut state = AdamMoments::zeros(3);
        adam_step(&mut p, &[3.0, -0.5, 1e-3], &mut state, 1, 0.01, &AdamConfig::default()).unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 0.01)).abs() < 1e-9);
        assert!((p[2] - (1.0 - 0.01)).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamMoments::zeros(2);
        assert!(adam_step(&mut [0.0, 0.0], &[1.0], &mut state, 1, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn quadratic_converges_like_the_reference_recurrence() {
        // f(x, y) = (x - 1)^2 + 10 (y + 2)^2
        let loss = |p: &[f64]| (p[0] - 1.0).powi(2) + 10.0 * (p[1] + 2.0).powi(2);
        let grad = |p: &[f64]| vec![2.0 * (p[0] - 1.0), 20.0 * (p[1] + 2.0)];
        let lr = 0.3;

        let mut p = vec![4.0, 3.0];
        let mut state = AdamMoments::zeros(2);
        let mut losses = vec![loss(&p)];
        for t in 1..=50 {
            let g = grad(&p);
            adam_step(&mut p, &g, &mut state, t, lr, &AdamConfig::default()).unwrap();
            losses.push(loss(&p));
        }

        // Reference: the textbook recurrence written out independently.
        let (mut x, mut m, mut v) = ([4.0f64, 3.0], [0.0f64; 2], [0.0f64; 2]);
        for t in 1..=50i32 {
            let g = grad(&x);
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        assert!((p[0] - x[0]).abs() < 1e-12 && (p[1] - x[1]).abs() < 1e-12);
        assert!(losses[50] < 1e-3 * losses[0], "final {} initial {}", losses[50], losses[0]);
    }

    fn tiny_labeling_data(vocab: &SubwordVocabulary) -> Vec<Example> {
        let sentences: [&[(&str, Label)]; 3] = [
            &[
                ("cat", Label::Begin(BaseTag::Term)),
                ("is", Label::Outside),
                ("pet", Label::Begin(BaseTag::Definition)),
            ],
            &[("dog", Label::Begin(BaseTag::Term)), ("runs", Label::Outside)],
            &[("a", Label::Outside), ("b", Label::Inside(BaseTag::Definition))],
        ];
        sentences
            .iter()
            .map(|s| {
                let mut start = 0;
                let toks: Vec<DeftToken> = s
                    .iter()
                    .map(|(w, l)| {
                        let t = DeftToken::new(*w, start, *l);
                        start += w.len() + 1;
                        t
                    })
                    .collect();
                token_example(&toks, &vec![10; toks.len()], CleaningMode::Finetune, vocab).unwrap()
            })
            .collect()
    }

    fn small_config(task: Task) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 3,
            batch_size: 2,
            task,
            embedding_dim: 8,
            output_dim: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let vocab = SubwordVocabulary::base();
        let data = tiny_labeling_data(&vocab);
        let source = EmbeddingSource::Internal { vocab_size: vocab.len() };
        let mut cfg = small_config(Task::Labeling);
        cfg.epochs = 0;
        assert!(matches!(train_loop(&cfg, source, &data, &data), Err(Error::Config(_))));
        let cfg = small_config(Task::Labeling);
        assert!(matches!(train_loop(&cfg, source, &[], &data), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_seed_deterministic_and_best_matches_trace() {
        let vocab = SubwordVocabulary::base();
        let data = tiny_labeling_data(&vocab);
        let source = EmbeddingSource::Internal { vocab_size: vocab.len() };
        let cfg = small_config(Task::Labeling);
        let a = train_loop(&cfg, source, &data, &data).unwrap();
        let b = train_loop(&cfg, source, &data, &data).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.step_losses.len(), 3 * 2);
        let max = a.trace.iter().map(|r| r.dev_metric).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_metric, max);
        let first_best = a.trace.iter().find(|r| r.dev_metric == max).unwrap().epoch;
        assert_eq!(a.best_epoch, first_best);
    }

    #[test]
    fn frozen_mode_keeps_the_table() {
        let vocab = SubwordVocabulary::base();
        let data = tiny_labeling_data(&vocab);
        let source = EmbeddingSource::Internal { vocab_size: vocab.len() };
        let cfg = TrainConfig {
            mode: CleaningMode::Frozen,
            ..small_config(Task::Labeling)
        };
        let init = Model::init(&cfg, source);
        let out = train_loop(&cfg, source, &data, &data).unwrap();
        assert_eq!(out.last.encoder.embedding, init.encoder.embedding);
        assert_ne!(out.last.encoder.projector, init.encoder.projector);

        let fine = train_loop(&small_config(Task::Labeling), source, &data, &data).unwrap();
        assert_ne!(fine.last.encoder.embedding, init.encoder.embedding);
    }

    #[test]
    fn multitask_with_tag_weight_only_matches_single_task() {
        let vocab = SubwordVocabulary::base();
        let data = tiny_labeling_data(&vocab);
        let source = EmbeddingSource::Internal { vocab_size: vocab.len() };
        let single = train_loop(&small_config(Task::Labeling), source, &data, &data).unwrap();
        let cfg = TrainConfig {
            weights: LossWeights {
                tag: 1.0,
                id: 0.0,
                relation: 0.0,
            },
            ..small_config(Task::MultiTask)
        };
        let multi = train_loop(&cfg, source, &data, &data).unwrap();
        assert_eq!(single.step_losses, multi.step_losses);
    }

    #[test]
    fn classification_trains_and_checkpoint_round_trips() {
        let vocab = SubwordVocabulary::base();
        let data = vec![
            sentence_example("a cat is a pet", true, &vocab),
            sentence_example("it rains", false, &vocab),
        ];
        let source = EmbeddingSource::Internal { vocab_size: vocab.len() };
        let out = train_loop(&small_config(Task::Classification), source, &data, &data).unwrap();
        let ckpt = Checkpoint {
            config: small_config(Task::Classification),
            vocab_fingerprint: vocab.fingerprint(),
            dev_metric: out.best_metric,
            epoch: out.best_epoch,
            model: out.best,
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.model, ckpt.model);
        assert_eq!(back.dev_metric, ckpt.dev_metric);
        assert_eq!(back.config.learning_rate, 1e-2);
        for ex in &data {
            assert_eq!(
                predict_sentence(&back.model, ex).unwrap(),
                predict_sentence(&ckpt.model, ex).unwrap()
            );
        }
    }

    #[test]
    fn config_echo_defaults() {
        let pairs = TrainConfig::default().to_pairs();
        let get = |k: &str| pairs.iter().find(|(key, _)| *key == k).unwrap().1.clone();
        assert_eq!(get("learning_rate"), "2e-5");
        assert_eq!(get("epochs"), "100");
        assert_eq!(get("batch_size"), "16");
        assert_eq!(get("lambda_tag"), "0.33");
        assert_eq!(get("dropout"), "0.8");
        let mut cfg = TrainConfig::default();
        cfg.set("mode", "frozen").unwrap();
        assert_eq!(cfg.dropout(), 0.2);
        assert!(cfg.set("bogus", "1").is_err());
    }
}
