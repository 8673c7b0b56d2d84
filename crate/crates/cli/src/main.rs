//! `deftag`: prepare corpora, build vocabularies, train, predict and evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use deftag::align::{build_vocabulary, SubwordVocabulary, DEFAULT_VOCAB_SIZE};
use deftag::corpus::{
    format_sentence_tsv, parse_deft_file, parse_sentence_tsv, write_deft_file, write_predictions,
    ContextWindow, Label, Relation, SentenceRecord, Task,
};
use deftag::encoder::ExternalEmbeddings;
use deftag::eval::{compute_metrics, sentence_metrics, tag_metrics, EvalReport};
use deftag::heads::{assign_tag_ids, decide, TagIdSlots};
use deftag::pipeline::{
    attach_external, classification_text, labeling_text, predict_multitask, predict_sentence,
    predict_tags, sentence_example, window_examples, window_sentence_examples, Example,
};
use deftag::preprocess::{
    balance_task1, clean_sentence, clean_token, oversample_task2, tag_counts, CleaningMode,
    FactorTable,
};
use deftag::train::{train_loop, write_trace, Checkpoint, EmbeddingSource, TrainConfig};
use deftag::{Error, Result};

const REPORT_FILE: &str = "prepare_report.tsv";
const PREPARED_CORPUS: &str = "train.deft";
const PREPARED_SENTENCES: &str = "sentences.tsv";

#[derive(Parser)]
#[command(
    name = "deftag",
    version,
    about = "Definition extraction: corpus preparation, subword vocabularies, CRF and classifier training, prediction, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean and rebalance a raw DEFT corpus
    Prepare(PrepareArgs),
    /// Learn a byte-pair subword vocabulary
    Vocab(VocabArgs),
    /// Train a model and write the best-on-dev checkpoint
    Train(TrainArgs),
    /// Label a corpus with a trained checkpoint
    Predict(PredictArgs),
    /// Score predictions against gold annotations
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory of raw `.deft` files, or a single file
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    output: Option<PathBuf>,
    /// Task view: 1, 2 or multitask [default: 2]
    #[arg(long)]
    task: Option<Task>,
    /// Cleaning mode: finetune or frozen [default: finetune]
    #[arg(long)]
    mode: Option<CleaningMode>,
    /// `tag = factor` file overriding the default multiplication factors
    #[arg(long)]
    factor_table: Option<PathBuf>,
    /// Flat `key = value` file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VocabArgs {
    /// DEFT file or `sentence<TAB>label` file
    #[arg(long)]
    input: Option<PathBuf>,
    /// Vocabulary file to write
    #[arg(long)]
    output: Option<PathBuf>,
    /// Vocabulary size [default: 4096]
    #[arg(long)]
    size: Option<usize>,
    /// Cleaning mode: finetune or frozen [default: finetune]
    #[arg(long)]
    mode: Option<CleaningMode>,
    /// Flat `key = value` file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training data (DEFT, or `sentence<TAB>label` for task 1)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Development data [default: the training data]
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Vocabulary file
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    output: Option<PathBuf>,
    /// External embedding file for the training data
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// External embedding file for the development data
    #[arg(long)]
    dev_embeddings: Option<PathBuf>,
    /// Task: 1, 2 or multitask [default: 2]
    #[arg(long)]
    task: Option<Task>,
    /// finetune trains the embedding table, frozen keeps it [default: finetune]
    #[arg(long)]
    mode: Option<CleaningMode>,
    /// Adam learning rate [default: 2e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// Number of epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the CRF tag loss in multitask training [default: 0.33]
    #[arg(long)]
    lambda_tag: Option<f64>,
    /// Weight of the tag-id loss in multitask training [default: 0.33]
    #[arg(long)]
    lambda_id: Option<f64>,
    /// Weight of the relation loss in multitask training [default: 0.33]
    #[arg(long)]
    lambda_relation: Option<f64>,
    /// Hidden layers of 512 units in the projector [default: 1]
    #[arg(long)]
    hidden_layers: Option<usize>,
    /// Width of the internal embedding table [default: 256]
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Width of the projected token vectors [default: 128]
    #[arg(long)]
    output_dim: Option<usize>,
    /// Dropout rate [default: 0.8 finetune, 0.2 frozen]
    #[arg(long)]
    dropout: Option<f64>,
    /// Flat `key = value` file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint directory
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vocabulary file the checkpoint was trained with
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// DEFT file, or `sentence<TAB>label` file for task 1
    #[arg(long)]
    input: Option<PathBuf>,
    /// Prediction file to write
    #[arg(long)]
    output: Option<PathBuf>,
    /// External embedding file for the input
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Expected task; must match the checkpoint [default: the checkpoint's]
    #[arg(long)]
    task: Option<Task>,
    /// Flat `key = value` file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Gold file
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Prediction file
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Task: 1, 2 or multitask [default: 2]
    #[arg(long)]
    task: Option<Task>,
    /// Directory for the TSV reports [default: the prediction file's directory]
    #[arg(long)]
    output: Option<PathBuf>,
    /// Flat `key = value` file; command-line flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Values from a `--config` file.
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn load(path: Option<&Path>) -> Result<Settings> {
        let mut map = BTreeMap::new();
        let Some(path) = path else {
            return Ok(Settings(map));
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1))
            })?;
            map.insert(key.trim().replace('-', "_"), value.trim().to_string());
        }
        Ok(Settings(map))
    }

    fn value<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}` in config file"))),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.value(flag, key)?.unwrap_or(default))
    }

    fn required(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.value(flag, key)?
            .ok_or_else(|| Error::Config(format!("missing required `--{}`", key.replace('_', "-"))))
    }
}

fn read_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(read_error(path))
}

fn is_sentence_tsv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "tsv")
}

/// `.deft` files of a directory in name order, or the path itself.
fn corpus_files(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.exists() {
        return Err(Error::Config(format!("input `{}` does not exist", input.display())));
    }
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(read_error(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "deft"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .deft files in `{}`", input.display())));
    }
    Ok(files)
}

/// One window per sentence, numbered in order.
fn sentence_windows(sentences: Vec<SentenceRecord>) -> Vec<ContextWindow> {
    sentences
        .into_iter()
        .enumerate()
        .map(|(window_id, s)| ContextWindow {
            window_id,
            sentences: vec![s],
        })
        .collect()
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let input = s.required(args.input, "input")?;
    let output = s.required(args.output, "output")?;
    let task = s.or(args.task, "task", Task::Labeling)?;
    let mode = s.or(args.mode, "mode", CleaningMode::Finetune)?;
    let table = match s.value(args.factor_table, "factor_table")? {
        Some(path) => FactorTable::from_file(path)?,
        None => FactorTable::default(),
    };

    let mut sentences = Vec::new();
    for file in corpus_files(&input)? {
        sentences.extend(parse_deft_file(&file)?.into_iter().flat_map(|w| w.sentences));
    }
    if sentences.is_empty() {
        return Err(Error::Config(format!("no sentences in `{}`", input.display())));
    }
    // Output of an earlier run carries the report; rebalancing it again
    // would compound the factors.
    let previous_report = input.is_dir().then(|| input.join(REPORT_FILE)).filter(|p| p.exists());
    fs::create_dir_all(&output).map_err(read_error(&output))?;

    let mut report = String::from("category\tinitial\tfactor\tfinal\n");
    let prepared: Vec<SentenceRecord> = match task {
        Task::Classification => {
            let records: Vec<(SentenceRecord, bool)> = sentences
                .into_iter()
                .map(|s| {
                    let label = s.has_definition;
                    (s, label)
                })
                .collect();
            let balanced = match previous_report {
                Some(_) => records.clone(),
                None => balance_task1(&records),
            };
            let count = |rows: &[(SentenceRecord, bool)], positive: bool| {
                rows.iter().filter(|(_, l)| *l == positive).count()
            };
            for (name, positive, factor) in [("positive", true, 2), ("negative", false, 1)] {
                report.push_str(&format!(
                    "{name}\t{}\t{factor}\t{}\n",
                    count(&records, positive),
                    count(&balanced, positive)
                ));
            }
            report.push_str(&format!("sentences\t{}\t-\t{}\n", records.len(), balanced.len()));
            let rows: Vec<(String, bool)> = balanced
                .iter()
                .map(|(s, l)| (classification_text(&s.tokens, mode), *l))
                .collect();
            write_text(&output.join(PREPARED_SENTENCES), &format_sentence_tsv(&rows))?;
            balanced.into_iter().map(|(s, _)| s).collect()
        }
        Task::Labeling | Task::MultiTask => {
            let cleaned: Vec<SentenceRecord> = sentences
                .into_iter()
                .map(|s| {
                    let tokens = s
                        .tokens
                        .into_iter()
                        .map(|mut t| {
                            t.text = clean_token(&t.text, mode);
                            t
                        })
                        .collect();
                    SentenceRecord::new(tokens)
                })
                .collect();
            let oversampled = match previous_report {
                Some(_) => cleaned.clone(),
                None => oversample_task2(&cleaned, &table),
            };
            let before = tag_counts(&cleaned);
            let after = tag_counts(&oversampled);
            for (tag, initial) in &before {
                report.push_str(&format!(
                    "{tag}\t{initial}\t{}\t{}\n",
                    table.factor(Some(*tag)),
                    after[tag]
                ));
            }
            report.push_str(&format!("sentences\t{}\t-\t{}\n", cleaned.len(), oversampled.len()));
            oversampled
        }
    };
    write_deft_file(&sentence_windows(prepared), output.join(PREPARED_CORPUS))?;
    match previous_report {
        Some(path) => {
            eprintln!("input already prepared; balancing skipped");
            let text = fs::read_to_string(&path).map_err(read_error(&path))?;
            write_text(&output.join(REPORT_FILE), &text)?;
            print!("{text}");
        }
        None => {
            write_text(&output.join(REPORT_FILE), &report)?;
            print!("{report}");
        }
    }
    Ok(())
}

fn cmd_vocab(args: VocabArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let input = s.required(args.input, "input")?;
    let output = s.required(args.output, "output")?;
    let size = s.or(args.size, "size", DEFAULT_VOCAB_SIZE)?;
    let mode = s.or(args.mode, "mode", CleaningMode::Finetune)?;

    let texts: Vec<String> = if is_sentence_tsv(&input) {
        parse_sentence_tsv(&input)?
            .into_iter()
            .map(|(t, _)| clean_sentence(&t, mode))
            .collect()
    } else {
        parse_deft_file(&input)?
            .iter()
            .flat_map(|w| &w.sentences)
            .flat_map(|s| [labeling_text(&s.tokens, mode).0, classification_text(&s.tokens, mode)])
            .collect()
    };
    let vocab = build_vocabulary(&texts, size)?;
    vocab.save(&output)?;
    println!("{} pieces, fingerprint {}", vocab.len(), vocab.fingerprint());
    Ok(())
}

/// Examples for `task` from a DEFT or sentence file.
fn load_examples(
    path: &Path,
    task: Task,
    mode: CleaningMode,
    vocab: &SubwordVocabulary,
) -> Result<Vec<Example>> {
    match task {
        Task::Classification if is_sentence_tsv(path) => Ok(parse_sentence_tsv(path)?
            .iter()
            .map(|(t, l)| sentence_example(&clean_sentence(t, mode), *l, vocab))
            .collect()),
        Task::Classification => Ok(window_sentence_examples(&parse_deft_file(path)?, mode, vocab)),
        Task::Labeling | Task::MultiTask => window_examples(&parse_deft_file(path)?, mode, vocab),
    }
}

fn attach_file(examples: &mut [Example], path: &Path) -> Result<usize> {
    let external = ExternalEmbeddings::load(path)?;
    attach_external(examples, &external)?;
    Ok(external.dim)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let train_path = s.required(args.train, "train")?;
    let vocab_path = s.required(args.vocab, "vocab")?;
    let output = s.required(args.output, "output")?;
    let dev_path: Option<PathBuf> = s.value(args.dev, "dev")?;
    let embeddings: Option<PathBuf> = s.value(args.embeddings, "embeddings")?;
    let dev_embeddings: Option<PathBuf> = s.value(args.dev_embeddings, "dev_embeddings")?;

    let mut config = TrainConfig::default();
    for (key, value) in &s.0 {
        if TrainConfig::KEYS.contains(&key.as_str()) {
            config.set(key, value)?;
        } else if key == "lr" {
            config.set("learning_rate", value)?;
        }
    }
    let mut set = |key: &str, value: Option<String>| match value {
        Some(v) => config.set(key, &v),
        None => Ok(()),
    };
    set("task", args.task.map(|v| v.to_string()))?;
    set("mode", args.mode.map(|v| v.to_string()))?;
    set("learning_rate", args.lr.map(|v| v.to_string()))?;
    set("epochs", args.epochs.map(|v| v.to_string()))?;
    set("batch_size", args.batch_size.map(|v| v.to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("lambda_tag", args.lambda_tag.map(|v| v.to_string()))?;
    set("lambda_id", args.lambda_id.map(|v| v.to_string()))?;
    set("lambda_relation", args.lambda_relation.map(|v| v.to_string()))?;
    set("hidden_layers", args.hidden_layers.map(|v| v.to_string()))?;
    set("embedding_dim", args.embedding_dim.map(|v| v.to_string()))?;
    set("output_dim", args.output_dim.map(|v| v.to_string()))?;
    set("dropout", args.dropout.map(|v| v.to_string()))?;
    config.validate()?;

    let vocab = SubwordVocabulary::load(&vocab_path)?;
    let mut train = load_examples(&train_path, config.task, config.mode, &vocab)?;
    let source = match &embeddings {
        Some(path) => EmbeddingSource::External {
            dim: attach_file(&mut train, path)?,
        },
        None => EmbeddingSource::Internal {
            vocab_size: vocab.len(),
        },
    };
    let dev = match &dev_path {
        Some(path) => {
            let mut dev = load_examples(path, config.task, config.mode, &vocab)?;
            match (&embeddings, &dev_embeddings) {
                (Some(_), Some(file)) => {
                    attach_file(&mut dev, file)?;
                }
                (Some(_), None) => {
                    return Err(Error::Config(
                        "external training embeddings need `--dev-embeddings` for the dev data".into(),
                    ))
                }
                _ => {}
            }
            dev
        }
        None => train.clone(),
    };

    let outcome = train_loop(&config, source, &train, &dev)?;
    let checkpoint = Checkpoint {
        config,
        vocab_fingerprint: vocab.fingerprint(),
        dev_metric: outcome.best_metric,
        epoch: outcome.best_epoch,
        model: outcome.best,
    };
    checkpoint.save(&output)?;
    write_trace(&output, &outcome.trace)?;
    println!(
        "best epoch {} dev metric {:.6}; checkpoint in {}",
        checkpoint.epoch,
        checkpoint.dev_metric,
        output.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let checkpoint_dir = s.required(args.checkpoint, "checkpoint")?;
    let vocab_path = s.required(args.vocab, "vocab")?;
    let input = s.required(args.input, "input")?;
    let output = s.required(args.output, "output")?;
    let embeddings: Option<PathBuf> = s.value(args.embeddings, "embeddings")?;

    let checkpoint = Checkpoint::load(&checkpoint_dir)?;
    let vocab = SubwordVocabulary::load(&vocab_path)?;
    if vocab.fingerprint() != checkpoint.vocab_fingerprint {
        return Err(Error::Mismatch(format!(
            "vocabulary `{}` does not match the checkpoint (fingerprint {} vs {})",
            vocab_path.display(),
            vocab.fingerprint(),
            checkpoint.vocab_fingerprint
        )));
    }
    let task = checkpoint.config.task;
    if let Some(requested) = s.value(args.task, "task")? {
        if requested != task {
            return Err(Error::Config(format!(
                "checkpoint was trained for task {task}, not {requested}"
            )));
        }
    }
    let mode = checkpoint.config.mode;
    let model = &checkpoint.model;

    let mut examples = load_examples(&input, task, mode, &vocab)?;
    match (model.source(), &embeddings) {
        (EmbeddingSource::External { dim }, Some(path)) => {
            let got = attach_file(&mut examples, path)?;
            if got != dim {
                return Err(Error::Mismatch(format!(
                    "embedding file has width {got}, checkpoint expects {dim}"
                )));
            }
        }
        (EmbeddingSource::External { .. }, None) => {
            return Err(Error::Config(
                "checkpoint uses external embeddings; pass `--embeddings`".into(),
            ))
        }
        (EmbeddingSource::Internal { .. }, Some(_)) => {
            return Err(Error::Config(
                "checkpoint uses its own embedding table; `--embeddings` does not apply".into(),
            ))
        }
        (EmbeddingSource::Internal { .. }, None) => {}
    }

    if task == Task::Classification && is_sentence_tsv(&input) {
        let rows = parse_sentence_tsv(&input)?;
        let mut out = Vec::with_capacity(rows.len());
        for ((text, _), ex) in rows.into_iter().zip(&examples) {
            out.push((text, decide(predict_sentence(model, ex)?)));
        }
        return write_text(&output, &format_sentence_tsv(&out));
    }

    let mut windows = parse_deft_file(&input)?;
    let mut next = examples.iter();
    for window in &mut windows {
        let mut id_categories = Vec::new();
        for sentence in &mut window.sentences {
            let ex = next.next().expect("one example per sentence");
            match task {
                Task::Classification => {
                    sentence.has_definition = decide(predict_sentence(model, ex)?);
                }
                Task::Labeling => {
                    let tags = predict_tags(model, ex)?;
                    for (token, tag) in sentence.tokens.iter_mut().zip(tags) {
                        token.tag = tag;
                        token.tag_id = None;
                        token.root_id = None;
                        token.relation = Relation::None;
                    }
                }
                Task::MultiTask => {
                    let p = predict_multitask(model, ex)?;
                    for ((token, tag), relation) in sentence.tokens.iter_mut().zip(p.tags).zip(p.relations) {
                        token.tag = tag;
                        token.root_id = None;
                        token.relation = relation;
                    }
                    id_categories.extend(p.id_categories);
                }
            }
        }
        if task == Task::MultiTask {
            let ids = assign_tag_ids(window, &id_categories, &TagIdSlots::fresh(window.window_id))?;
            for (token, id) in window.sentences.iter_mut().flat_map(|s| &mut s.tokens).zip(ids) {
                token.tag_id = id;
            }
        }
    }
    write_predictions(&windows, task, &output)
}

fn sentence_labels(path: &Path) -> Result<Vec<bool>> {
    if is_sentence_tsv(path) {
        Ok(parse_sentence_tsv(path)?.into_iter().map(|(_, l)| l).collect())
    } else {
        Ok(parse_deft_file(path)?
            .iter()
            .flat_map(|w| &w.sentences)
            .map(|s| s.has_definition)
            .collect())
    }
}

fn write_report(dir: &Path, prefix: &str, report: &EvalReport) -> Result<()> {
    write_text(&dir.join(format!("{prefix}report.tsv")), &report.to_tsv())?;
    write_text(&dir.join(format!("{prefix}confusion.tsv")), &report.confusion_tsv())?;
    write_text(
        &dir.join(format!("{prefix}confusion_normalized.tsv")),
        &report.normalized_confusion_tsv(),
    )
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let s = Settings::load(args.config.as_deref())?;
    let gold_path = s.required(args.gold, "gold")?;
    let pred_path = s.required(args.pred, "pred")?;
    let task = s.or(args.task, "task", Task::Labeling)?;
    for path in [&gold_path, &pred_path] {
        if !path.is_file() {
            return Err(Error::Config(format!("`{}` does not exist", path.display())));
        }
    }
    let out_dir: PathBuf = match s.value(args.output, "output")? {
        Some(dir) => dir,
        None => pred_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out_dir).map_err(read_error(&out_dir))?;

    if task == Task::Classification {
        let report = sentence_metrics(&sentence_labels(&gold_path)?, &sentence_labels(&pred_path)?)?;
        print!("{}", report.to_text());
        return write_report(&out_dir, "", &report);
    }

    let gold: Vec<SentenceRecord> = parse_deft_file(&gold_path)?
        .into_iter()
        .flat_map(|w| w.sentences)
        .collect();
    let pred: Vec<SentenceRecord> = parse_deft_file(&pred_path)?
        .into_iter()
        .flat_map(|w| w.sentences)
        .collect();
    if gold.len() != pred.len() {
        return Err(Error::Mismatch(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(&pred).enumerate() {
        let same = g.tokens.len() == p.tokens.len()
            && g.tokens.iter().zip(&p.tokens).all(|(a, b)| a.start_char == b.start_char);
        if !same {
            return Err(Error::Mismatch(format!(
                "sentence {i}: gold and predicted tokens do not line up"
            )));
        }
    }
    let tags = |s: &[SentenceRecord]| -> Vec<Vec<Label>> { s.iter().map(SentenceRecord::labels).collect() };
    let report = tag_metrics(&tags(&gold), &tags(&pred))?;
    print!("{}", report.to_text());
    write_report(&out_dir, "", &report)?;

    if task == Task::MultiTask {
        let rels = |s: &[SentenceRecord]| -> Vec<Vec<usize>> {
            s.iter()
                .map(|r| r.tokens.iter().map(|t| t.relation.index()).collect())
                .collect()
        };
        let names: Vec<String> = Relation::ALL.iter().map(|r| r.name().to_string()).collect();
        let eval: Vec<usize> = (1..Relation::ALL.len()).collect();
        let relations = compute_metrics(&rels(&gold), &rels(&pred), &names, &eval)?;
        println!("relations");
        print!("{}", relations.to_text());
        write_report(&out_dir, "relations_", &relations)?;
    }
    Ok(())
}

/// 2 for usage, configuration and missing inputs; 3 for data that does not
/// fit together.
fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::Io { .. } => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Vocab(a) => cmd_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
