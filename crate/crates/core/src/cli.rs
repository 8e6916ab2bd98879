//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builder::{self, BuildOptions, ImagePool, QAPair};
use crate::error::{Error, ErrorKind, Result};
use crate::eval::{self, Metric, Prediction};
use crate::io;
use crate::nn::train::{load_checkpoint, save_checkpoint, TrainConfig, TrainReport};
use crate::search::classify::{self, classifier_question, features, AnswerClassifier, AnswerVocab};
use crate::search::pipeline::{reformulate_record, Settings};
use crate::search::reader::{self, finetune_reader, reader_vocab, Reader};
use crate::search::{answer_pipeline, Aggregation, Bm25Index, Bm25Params, ChainRetriever, Mode, Models, Reformulation, Retriever};
use crate::select::{self, train_select, SelectModel};
use crate::substitute::{self, train_substitute, LossConfig, SubstituteModel};
use crate::types::{InstanceRecord, Split, Taxonomy};

#[derive(Debug, Parser)]
#[command(name = "reformqa", version, about = "Select, substitute and search question answering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the span selector.
    TrainSelect,
    /// Predict spans for every record.
    PredictSelect,
    /// Train the object substitution scorer.
    TrainSubstitute,
    /// Rewrite questions with the select and substitute models.
    Reformulate,
    /// Fine-tune the reader on gold reformulations.
    TrainReader,
    /// Train the answer classifier on top of a reader.
    TrainClassifier,
    /// Build a BM25 index over a corpus.
    BuildIndex,
    /// Retrieve snippets for one question.
    Search,
    /// Run the full pipeline on every record.
    Answer,
    /// Score predictions against gold records.
    Evaluate,
    /// Percentage of test instances whose answer occurs in train.
    AuditOverlap,
    /// Most-frequent-answer baseline.
    BaselineFreq,
    /// Span length and detection coverage statistics.
    Stats,
    /// Build templated records from question/answer pairs.
    BuildDataset,
}

/// Every setting, optional so a config file can fill the gaps. Flags win
/// over file values.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Options {
    /// Key-value config file (TOML syntax).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Encoder width.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Projection hidden width.
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Projection output width.
    #[arg(long, global = true)]
    pub proj_out: Option<usize>,
    #[arg(long, global = true)]
    pub fusion_hidden: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub margin: Option<f64>,
    /// Answer vocabulary size for classification.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Keep encoder weights fixed while training heads.
    #[arg(long, global = true)]
    pub freeze_encoder: Option<bool>,
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, global = true, value_enum)]
    pub aggregation: Option<Aggregation>,
    #[arg(long, global = true, value_enum)]
    pub reformulation: Option<Reformulation>,
    /// Only use records from this split.
    #[arg(long, global = true, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    #[arg(long, global = true)]
    pub predictions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub snippets: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, global = true)]
    pub coords: Option<PathBuf>,
    #[arg(long, global = true)]
    pub select_model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub substitute_model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub reader_model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub classifier_model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pairs: Option<PathBuf>,
    #[arg(long, global = true)]
    pub images: Option<PathBuf>,
    /// Template for built questions; `{t}` is the hypernym.
    #[arg(long, global = true)]
    pub pattern: Option<String>,
    #[arg(long, global = true)]
    pub question: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown split {s:?} (expected train, dev or test)"))
}

/// Resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub proj_out: usize,
    pub fusion_hidden: usize,
    pub alpha: f64,
    pub margin: f64,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_encoder: bool,
    pub jobs: usize,
    pub mode: Mode,
    pub aggregation: Aggregation,
    pub reformulation: Reformulation,
    pub split: Option<Split>,
    pub dataset: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub snippets: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub coords: Option<PathBuf>,
    pub select_model: Option<PathBuf>,
    pub substitute_model: Option<PathBuf>,
    pub reader_model: Option<PathBuf>,
    pub classifier_model: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub pattern: String,
    pub question: Option<String>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Overlay flags on the config file, then fill defaults.
    pub fn resolve(flags: &Options) -> Result<Self> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str::<Options>(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?
            }
            None => Options::default(),
        };
        let mut merged = serde_json::to_value(&file)?;
        let over = serde_json::to_value(flags)?;
        if let (Some(m), Some(o)) = (merged.as_object_mut(), over.as_object()) {
            for (k, v) in o {
                if !v.is_null() {
                    m.insert(k.clone(), v.clone());
                }
            }
        }
        let o: Options = serde_json::from_value(merged)?;
        Ok(RunConfig {
            seed: o.seed.unwrap_or(0),
            dim: o.dim.unwrap_or(768),
            layers: o.layers.unwrap_or(2),
            hidden: o.hidden.unwrap_or(2048),
            proj_out: o.proj_out.unwrap_or(1024),
            fusion_hidden: o.fusion_hidden.unwrap_or(512),
            alpha: o.alpha.unwrap_or(0.5),
            margin: o.margin.unwrap_or(0.2),
            k: o.k.unwrap_or(classify::DEFAULT_K),
            epochs: o.epochs.unwrap_or(20),
            batch_size: o.batch_size.unwrap_or(8),
            lr: o.lr.unwrap_or(1e-3),
            freeze_encoder: o.freeze_encoder.unwrap_or(false),
            jobs: o.jobs.unwrap_or(1),
            mode: o.mode.unwrap_or(Mode::OpenDomain),
            aggregation: o.aggregation.unwrap_or(Aggregation::Sing),
            reformulation: o.reformulation.unwrap_or(Reformulation::Gold),
            split: o.split,
            dataset: o.dataset,
            train: o.train,
            test: o.test,
            predictions: o.predictions,
            snippets: o.snippets,
            corpus: o.corpus,
            index: o.index,
            taxonomy: o.taxonomy,
            coords: o.coords,
            select_model: o.select_model,
            substitute_model: o.substitute_model,
            reader_model: o.reader_model,
            classifier_model: o.classifier_model,
            pairs: o.pairs,
            images: o.images,
            pattern: o.pattern.unwrap_or_else(|| builder::DEFAULT_PATTERN.to_string()),
            question: o.question,
            out: o.out,
        })
    }

    /// Every violation for `command`, not just the first.
    pub fn validate(&self, command: Command) -> Result<()> {
        let mut errors = Vec::new();
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("proj-out", self.proj_out),
            ("fusion-hidden", self.fusion_hidden),
            ("k", self.k),
            ("epochs", self.epochs),
            ("batch-size", self.batch_size),
            ("jobs", self.jobs),
        ];
        for (name, v) in positive {
            if v == 0 {
                errors.push(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            errors.push(format!("alpha {} is outside [0, 1]", self.alpha));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            errors.push(format!("margin {} must be positive", self.margin));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errors.push(format!("lr {} must be positive", self.lr));
        }
        if !self.pattern.contains("{t}") {
            errors.push(format!("pattern {:?} has no {{t}} placeholder", self.pattern));
        }
        let mut need = |name: &str, path: &Option<PathBuf>| match path {
            None => errors.push(format!("--{name} is required for this command")),
            Some(p) if !p.exists() => errors.push(format!("--{name} {} does not exist", p.display())),
            Some(_) => {}
        };
        use Command::*;
        match command {
            TrainSelect => need("dataset", &self.dataset),
            PredictSelect => {
                need("dataset", &self.dataset);
                need("select-model", &self.select_model);
            }
            TrainSubstitute => {
                need("dataset", &self.dataset);
                need("taxonomy", &self.taxonomy);
            }
            Reformulate => {
                need("dataset", &self.dataset);
                need("select-model", &self.select_model);
                need("substitute-model", &self.substitute_model);
            }
            TrainReader => need("dataset", &self.dataset),
            TrainClassifier => {
                need("dataset", &self.dataset);
                need("reader-model", &self.reader_model);
            }
            BuildIndex => need("corpus", &self.corpus),
            Search => {
                if self.question.is_none() {
                    errors.push("--question is required for this command".into());
                }
            }
            Answer => {
                need("dataset", &self.dataset);
                need("reader-model", &self.reader_model);
                if self.reformulation == Reformulation::Predicted {
                    need("select-model", &self.select_model);
                    need("substitute-model", &self.substitute_model);
                }
                if self.mode == Mode::Classification {
                    need("classifier-model", &self.classifier_model);
                }
            }
            Evaluate => {
                need("dataset", &self.dataset);
                need("predictions", &self.predictions);
            }
            AuditOverlap | BaselineFreq => {
                need("train", &self.train);
                need("test", &self.test);
            }
            Stats => need("dataset", &self.dataset),
            BuildDataset => {
                need("pairs", &self.pairs);
                need("taxonomy", &self.taxonomy);
                need("images", &self.images);
            }
        }
        let needs_retriever = matches!(command, TrainReader | TrainClassifier | Search | Answer);
        if needs_retriever && self.snippets.is_none() && self.corpus.is_none() && self.index.is_none() {
            errors.push("one of --snippets, --corpus or --index is required for this command".into());
        }
        for (name, path) in [
            ("snippets", &self.snippets),
            ("corpus", &self.corpus),
            ("index", &self.index),
            ("coords", &self.coords),
            ("taxonomy", &self.taxonomy),
            ("train", &self.train),
            ("test", &self.test),
        ] {
            if let Some(p) = path {
                if !p.exists() && !errors.iter().any(|e| e.starts_with(&format!("--{name} "))) {
                    errors.push(format!("--{name} {} does not exist", p.display()));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// SHA-256 of the resolved settings.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            lr: self.lr,
            train_encoder: !self.freeze_encoder,
        }
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Validation => 3,
        ErrorKind::Data => 4,
        ErrorKind::Internal => 5,
    }
}

/// Parse `args` (program name first), run, and return the exit code.
/// Results without `--out` go to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit_code(ErrorKind::Usage) } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, &cli.options, stdout) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(e.kind())
        }
    }
}

pub fn execute(command: Command, options: &Options, stdout: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::resolve(options)?;
    cfg.validate(command)?;
    log::info!("{command:?}: config hash {} seed {}", cfg.hash(), cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Data(format!("thread pool: {e}")))?;
    let mut ctx = Ctx { cfg: &cfg, stdout, pool };
    dispatch(command, &mut ctx)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    stdout: &'a mut dyn Write,
    pool: rayon::ThreadPool,
}

impl Ctx<'_> {
    /// Order-preserving parallel map on the `--jobs` pool.
    fn par_map<T, U, F>(&self, items: &[T], f: F) -> Result<Vec<U>>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> Result<U> + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    fn records(&self, path: &Option<PathBuf>) -> Result<Vec<InstanceRecord>> {
        let records = io::load_dataset(path.as_ref().expect("validated"))?;
        Ok(match self.cfg.split {
            Some(split) => records.into_iter().filter(|r| r.split == split).collect(),
            None => records,
        })
    }

    fn out_path(&self) -> Result<&Path> {
        self.cfg
            .out
            .as_deref()
            .ok_or_else(|| Error::Config(vec!["--out is required for this command".into()]))
    }

    /// Write to `--out` atomically, else to stdout.
    fn emit(&mut self, bytes: &[u8]) -> Result<()> {
        match &self.cfg.out {
            Some(path) => io::write_atomic(path, bytes),
            None => self
                .stdout
                .write_all(bytes)
                .map_err(|e| Error::io("<stdout>", e)),
        }
    }

    fn emit_json<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.emit(&bytes)
    }

    fn emit_jsonl<T: Serialize>(&mut self, items: &[T]) -> Result<()> {
        let bytes = io::to_jsonl(items)?;
        self.emit(&bytes)
    }

    fn taxonomy(&self) -> Result<Option<Taxonomy>> {
        self.cfg
            .taxonomy
            .as_deref()
            .map(|t| io::load_taxonomy(t, self.cfg.coords.as_deref()))
            .transpose()
    }

    fn retriever(&self) -> Result<ChainRetriever> {
        let cache = self.cfg.snippets.as_deref().map(io::load_snippet_cache).transpose()?;
        let index = match (&self.cfg.index, &self.cfg.corpus) {
            (Some(path), _) => Some(io::read_json::<Bm25Index>(path)?),
            (None, Some(corpus)) => Some(Bm25Index::build(&io::load_corpus(corpus)?, Bm25Params::default())?),
            (None, None) => None,
        };
        Ok(ChainRetriever { cache, index })
    }

    /// Model-init and shuffle seeds, both drawn from the run seed.
    fn seeds(&self) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        (rng.next_u64(), rng.next_u64())
    }
}

fn log_report(what: &str, report: &TrainReport) {
    log::info!(
        "{what}: used {} of {} ({} skipped, {} adjusted), final loss {:.6}",
        report.used,
        report.total,
        report.skipped,
        report.adjusted,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    if !report.skipped_ids.is_empty() {
        log::warn!("{what}: skipped {:?}", report.skipped_ids);
    }
}

fn dispatch(command: Command, ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    match command {
        Command::TrainSelect => {
            let out = ctx.out_path()?.to_path_buf();
            let records = ctx.records(&cfg.dataset)?;
            let (init, shuffle) = ctx.seeds();
            let mut model = SelectModel::new(init, SelectModel::vocab_for(&records), cfg.dim, cfg.layers);
            let report = train_select(&records, &mut model, &cfg.train_config(shuffle))?;
            log_report("train-select", &report);
            save_checkpoint(&out, select::CHECKPOINT_KIND, &model)
        }
        Command::PredictSelect => {
            let records = ctx.records(&cfg.dataset)?;
            let model: SelectModel = load_checkpoint(cfg.select_model.as_deref().expect("validated"), select::CHECKPOINT_KIND)?;
            let preds = ctx.par_map(&records, |r| {
                    let p = model.predict(&r.question)?;
                    Ok(Prediction {
                        id: r.id.clone(),
                        span: p.char_span(&r.question, &crate::text::tokenize(&r.question)),
                        ..Default::default()
                    })
                })?;
            ctx.emit_jsonl(&preds)
        }
        Command::TrainSubstitute => {
            let out = ctx.out_path()?.to_path_buf();
            let records = ctx.records(&cfg.dataset)?;
            let taxonomy = ctx.taxonomy()?.expect("validated");
            let loss = LossConfig::new(cfg.alpha, cfg.margin)?;
            let (init, shuffle) = ctx.seeds();
            let mut model = SubstituteModel::new(
                init,
                SubstituteModel::vocab_for(&records),
                cfg.dim,
                cfg.layers,
                cfg.hidden,
                cfg.proj_out,
            );
            let report = train_substitute(&records, &mut model, &taxonomy, &loss, &cfg.train_config(shuffle))?;
            log_report("train-substitute", &report);
            save_checkpoint(&out, substitute::CHECKPOINT_KIND, &model)
        }
        Command::Reformulate => {
            let records = ctx.records(&cfg.dataset)?;
            let sel: SelectModel = load_checkpoint(cfg.select_model.as_deref().expect("validated"), select::CHECKPOINT_KIND)?;
            let sub: SubstituteModel =
                load_checkpoint(cfg.substitute_model.as_deref().expect("validated"), substitute::CHECKPOINT_KIND)?;
            let taxonomy = ctx.taxonomy()?;
            let out = ctx.par_map(&records, |r| reformulate_record(r, Some(&sel), Some(&sub), taxonomy.as_ref(), Reformulation::Predicted))?;
            ctx.emit_jsonl(&out)
        }
        Command::TrainReader => {
            let out = ctx.out_path()?.to_path_buf();
            let records = ctx.records(&cfg.dataset)?;
            let retriever = ctx.retriever()?;
            let (init, shuffle) = ctx.seeds();
            let mut model = Reader::new(init, reader_vocab(&records, &retriever), cfg.dim, cfg.layers);
            let report = finetune_reader(&records, &retriever, &mut model, &cfg.train_config(shuffle))?;
            log_report("train-reader", &report);
            save_checkpoint(&out, reader::CHECKPOINT_KIND, &model)
        }
        Command::TrainClassifier => {
            let out = ctx.out_path()?.to_path_buf();
            let records = ctx.records(&cfg.dataset)?;
            let retriever = ctx.retriever()?;
            let reader: Reader = load_checkpoint(cfg.reader_model.as_deref().expect("validated"), reader::CHECKPOINT_KIND)?;
            let feats = ctx.par_map(&records, |r| {
                    let q = classifier_question(r);
                    let found = retriever.retrieve(q)?;
                    Ok(features(q, &found.snippets.snippets, &reader, cfg.aggregation))
                })?;
            let (init, shuffle) = ctx.seeds();
            let vocab = AnswerVocab::build(&records, cfg.k);
            let mut model = AnswerClassifier::new(init, vocab, reader.dim(), cfg.fusion_hidden, cfg.aggregation)?;
            let report = classify::train_classifier(&records, &feats, &mut model, &cfg.train_config(shuffle))?;
            log_report("train-classifier", &report);
            save_checkpoint(&out, classify::CHECKPOINT_KIND, &model)
        }
        Command::BuildIndex => {
            let corpus = io::load_corpus(cfg.corpus.as_deref().expect("validated"))?;
            let index = Bm25Index::build(&corpus, Bm25Params::default())?;
            log::info!("indexed {} documents", index.len());
            ctx.emit_json(&index)
        }
        Command::Search => {
            let retriever = ctx.retriever()?;
            let found = retriever.retrieve(cfg.question.as_deref().expect("validated"))?;
            ctx.emit_json(&found)
        }
        Command::Answer => {
            let records = ctx.records(&cfg.dataset)?;
            let retriever = ctx.retriever()?;
            let reader: Reader = load_checkpoint(cfg.reader_model.as_deref().expect("validated"), reader::CHECKPOINT_KIND)?;
            let predicted = cfg.reformulation == Reformulation::Predicted;
            let sel: Option<SelectModel> = if predicted {
                Some(load_checkpoint(cfg.select_model.as_deref().expect("validated"), select::CHECKPOINT_KIND)?)
            } else {
                None
            };
            let sub: Option<SubstituteModel> = if predicted {
                Some(load_checkpoint(cfg.substitute_model.as_deref().expect("validated"), substitute::CHECKPOINT_KIND)?)
            } else {
                None
            };
            let classifier: Option<AnswerClassifier> = cfg
                .classifier_model
                .as_deref()
                .map(|p| load_checkpoint(p, classify::CHECKPOINT_KIND))
                .transpose()?;
            let taxonomy = ctx.taxonomy()?;
            let aggregator = classifier
                .as_ref()
                .filter(|c| c.aggregation == Aggregation::Mult)
                .map(|c| &c.aggregator);
            if cfg.mode == Mode::OpenDomain && cfg.aggregation == Aggregation::Mult && aggregator.is_none() {
                log::warn!("no trained attention query; open-domain mult uses uniform weights");
            }
            let models = Models {
                select: sel.as_ref(),
                substitute: sub.as_ref(),
                taxonomy: taxonomy.as_ref(),
                retriever: &retriever,
                reader: &reader,
                aggregator,
                classifier: classifier.as_ref(),
            };
            let settings = Settings {
                mode: cfg.mode,
                aggregation: cfg.aggregation,
                reformulation: cfg.reformulation,
            };
            let out = ctx.par_map(&records, |r| answer_pipeline(r, &models, &settings))?;
            ctx.emit_jsonl(&out)
        }
        Command::Evaluate => {
            let gold = ctx.records(&cfg.dataset)?;
            let preds: Vec<Prediction> = io::read_jsonl(cfg.predictions.as_deref().expect("validated"))?;
            let metric = Metric::detect(&gold);
            let mut report = eval::stage_accuracies(&preds, &gold, metric)?;
            report.dataset = cfg.dataset.as_ref().map(|p| file_label(p)).unwrap_or_default();
            report.mode = format!(
                "{}/{}/{}",
                enum_label(&cfg.mode),
                enum_label(&cfg.aggregation),
                enum_label(&cfg.reformulation)
            );
            if let Some(train) = &cfg.train {
                let train = io::load_dataset(train)?;
                report.overlap_percent = Some(eval::audit_overlap(&train, &gold)?);
                report.baseline = Some(eval::frequency_baseline(&train, &gold, metric)?.score);
            }
            eprint!("{}", report.to_table());
            ctx.emit_json(&report)
        }
        Command::AuditOverlap => {
            let train = io::load_dataset(cfg.train.as_deref().expect("validated"))?;
            let test = io::load_dataset(cfg.test.as_deref().expect("validated"))?;
            let overlap = eval::audit_overlap(&train, &test)?;
            ctx.emit_json(&serde_json::json!({
                "train_instances": train.len(),
                "test_instances": test.len(),
                "overlap_percent": overlap,
            }))
        }
        Command::BaselineFreq => {
            let train = io::load_dataset(cfg.train.as_deref().expect("validated"))?;
            let test = io::load_dataset(cfg.test.as_deref().expect("validated"))?;
            let metric = Metric::detect(&test);
            let b = eval::frequency_baseline(&train, &test, metric)?;
            ctx.emit_json(&serde_json::json!({
                "metric": metric,
                "answer": b.answer,
                "score": b.score,
            }))
        }
        Command::Stats => {
            let records = ctx.records(&cfg.dataset)?;
            ctx.emit_json(&eval::dataset_stats(&records))
        }
        Command::BuildDataset => {
            let out = ctx.out_path()?.to_path_buf();
            let pairs: Vec<QAPair> = io::read_jsonl(cfg.pairs.as_deref().expect("validated"))?;
            let taxonomy = ctx.taxonomy()?.expect("validated");
            let pool = ImagePool::load(cfg.images.as_deref().expect("validated"))?;
            let options = BuildOptions {
                pattern: cfg.pattern.clone(),
                split: cfg.split.unwrap_or(Split::Test),
                ..Default::default()
            };
            let built = builder::build_dataset(&pairs, &taxonomy, &pool, &[], &options)?;
            log::info!("built {} records, rejected {} pairs", built.records.len(), built.rejections.len());
            io::save_dataset(&out, &built.records)
        }
    }
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn enum_label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(args: &[&str]) -> Options {
        let mut full = vec!["reformqa", "stats"];
        full.extend_from_slice(args);
        Cli::try_parse_from(full).unwrap().options
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\nalpha = 0.25\nmode = \"classification\"\n").unwrap();
        let mut o = opts(&["--alpha", "0.75"]);
        o.config = Some(path);
        let cfg = RunConfig::resolve(&o).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alpha, 0.75);
        assert_eq!(cfg.mode, Mode::Classification);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sed = 7\n").unwrap();
        let mut o = Options::default();
        o.config = Some(path);
        assert!(matches!(RunConfig::resolve(&o), Err(Error::Config(_))));
    }

    #[test]
    fn validation_lists_every_violation() {
        let cfg = RunConfig::resolve(&opts(&["--alpha", "2", "--margin", "0", "--epochs", "0"])).unwrap();
        match cfg.validate(Command::TrainSubstitute) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 5, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_tracks_settings() {
        let a = RunConfig::resolve(&opts(&[])).unwrap();
        let b = RunConfig::resolve(&opts(&["--seed", "1"])).unwrap();
        assert_eq!(a.hash(), RunConfig::resolve(&opts(&[])).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_command_is_a_usage_error() {
        let mut sink = Vec::new();
        assert_eq!(run(["reformqa", "frobnicate"], &mut sink), 2);
        assert_eq!(run(["reformqa", "stats", "--bogus"], &mut sink), 2);
    }

    #[test]
    fn missing_inputs_are_validation_errors() {
        let mut sink = Vec::new();
        assert_eq!(run(["reformqa", "stats", "--dataset", "/nonexistent.jsonl"], &mut sink), 3);
    }
}
