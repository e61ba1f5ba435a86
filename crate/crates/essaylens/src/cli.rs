//! `essaylens` command line. Exit status 0 on success, 1 on a usage error,
//! 2 on a data error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use essaylens_core::corpus::{make_folds, reduce_training_set, Catalog, EssayRecord, EssaySetMeta};
use essaylens_core::embeddings::{EmbeddedDocument, SentenceEncoder};
use essaylens_core::evaluation::{cross_validate, qwk, reduced_data_sweep, render_table, CvReport, QwkTable, SweepRow};
use essaylens_core::hypergen::{generate_hyperparams, HyperParams};
use essaylens_core::scorers::{train, ModelKind, ModelSpec, NeuralLearner, ScoreModel, TrainReport};
use essaylens_core::synthetic::{smoke_hyperparams, synthetic_corpus, SyntheticConfig};
use serde::{Deserialize, Serialize};

use crate::config::{Config, Overrides};
use crate::container::{save_model, ModelMeta};
use crate::embfile::{read_embedding_file, write_embedding_file};
use crate::error::{Error, Result};
use crate::pipeline::{self, build_dataset, passage_doc_id, AnalyzeRequest, Dataset, EmbeddingSource};
use crate::registry::{resolve_model, Registry, MODEL_EXT};
use crate::{http, provider, textio};

#[derive(Parser, Debug)]
#[command(name = "essaylens", version, about = "Essay scoring over sentence embeddings", arg_required_else_help = true)]
struct Cli {
    /// JSON config file (lowest precedence above the defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Segment and embed a corpus into a JSONL embedding file.
    Embed {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect generated hyperparameters.
    Hypergen {
        #[command(subcommand)]
        action: HypergenCmd,
    },
    /// Train one scorer on fold 0 and save it.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Container path; defaults to `<model_dir>/<kind>-set<N>.eslm`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Five-fold cross-validation, one table row per model kind.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Cross-validation at several training fractions.
    ReduceSweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8, 1.0])]
        fraction: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Score one essay with a saved model.
    Score {
        /// Model id in the model directory, or a path to a container.
        #[arg(long)]
        model: String,
        #[arg(long)]
        essay_file: PathBuf,
        #[arg(long)]
        passage_file: Option<PathBuf>,
        /// Overrides the provider recorded in the model
        #[arg(long)]
        provider: Option<String>,
    },
    /// Similarity and highlights between an essay and its passage.
    Analyze {
        #[arg(long)]
        passage_file: PathBuf,
        #[arg(long)]
        essay_file: PathBuf,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        /// Overrides the provider recorded in the model
        #[arg(long)]
        provider: Option<String>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Default provider for requests that name none
        #[arg(long)]
        provider: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum HypergenCmd {
    Show {
        #[arg(long)]
        set: u32,
        /// Essay-set metadata overrides (JSON array).
        #[arg(long)]
        meta: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// ASAP-layout TSV corpus.
    corpus: Option<PathBuf>,
    /// Use the built-in synthetic corpus (set 100) instead of a TSV file.
    #[arg(long, conflicts_with = "corpus")]
    synthetic: bool,
    /// Essay sets to use; all sets present when omitted.
    #[arg(long = "set")]
    sets: Vec<u32>,
    /// Pre-computed JSONL embeddings keyed by essay id.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embedding provider, e.g. `hashed-bow:seed=1:dim=256`
    #[arg(long)]
    provider: Option<String>,
    /// Seeds the folds and training
    #[arg(long)]
    seed: Option<u64>,
    /// Essay-set metadata overrides (JSON array).
    #[arg(long)]
    meta: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// lstm, mha, mha2, mha_blstm or passage_conditioned. Repeat for several.
    #[arg(long = "kind", default_values_t = vec!["mha2".to_string()])]
    kinds: Vec<String>,
    /// Overrides the generated model width
    #[arg(long)]
    d_model: Option<usize>,
    /// Overrides the epoch count and caps patience at it
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

/// JSON form of `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub table: Vec<QwkTable>,
    pub runs: Vec<EvaluateRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRun {
    pub kind: ModelKind,
    pub set_id: u32,
    pub provider: String,
    pub report: CvReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: ModelKind,
    pub set_id: u32,
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub kind: ModelKind,
    pub set_id: u32,
    pub provider: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub test_qwk: f64,
    pub report: TrainReport,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

impl From<essaylens_core::Error> for Failure {
    fn from(e: essaylens_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

/// Parses `args` (including the program name) and runs the command with the
/// process environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{}", text);
            } else {
                let _ = write!(err, "{}", text);
            }
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {}\n\nFor more information, try '--help'.", m);
            1
        }
        Err(Failure::Data(e)) => {
            let _ = writeln!(err, "error: {}", e);
            2
        }
    }
}

fn load_config(file: Option<&Path>, flags: Overrides) -> CliResult<Config> {
    Ok(Config::load(file, std::env::vars(), &flags)?)
}

fn write_json<T: Serialize>(out: &mut dyn Write, v: &T) -> CliResult {
    let s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    writeln!(out, "{}", s).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_file(path: &Path) -> CliResult<String> {
    Ok(textio::read_text(path)?.text)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    let cfile = cli.config.as_deref();
    match cli.command {
        Cmd::Embed { data, out: path } => {
            let cfg = load_config(cfile, data.overrides())?;
            let catalog = data.catalog(&cfg)?;
            let records = data.records(&catalog)?;
            let enc = provider::resolve(&cfg.provider)?;
            let docs = embed_records(enc.as_ref(), &records, &catalog)?;
            let mut buf = Vec::new();
            write_embedding_file(&docs, &mut buf)?;
            write_file(&path, &buf)?;
            writeln!(out, "wrote {} documents ({}) to {}", docs.len(), enc.id(), path.display())
                .map_err(|e| Error::io("<stdout>", e))?;
            Ok(())
        }
        Cmd::Hypergen {
            action: HypergenCmd::Show { set, meta },
        } => {
            let cfg = load_config(cfile, Overrides::default())?;
            let catalog = textio::catalog(meta.as_deref().or(cfg.meta_file.as_deref()))?;
            let m = catalog.get(set)?;
            write_json(out, &generate_hyperparams(m, catalog.mean_classes()))
        }
        Cmd::Train {
            data,
            model,
            fraction,
            out: path,
        } => {
            let cfg = load_config(cfile, data.overrides())?;
            let kind = model.single_kind()?;
            let mut sets = data.datasets(&cfg)?;
            if sets.len() != 1 {
                return Err(usage("train needs exactly one essay set; pass --set N"));
            }
            let (ds, hp) = sets.remove(0);
            let hp = model.apply(hp);
            let summary = train_one(&ds, kind, hp, fraction, cfg.seed, path, &cfg.model_dir)?;
            write_json(out, &summary)
        }
        Cmd::Evaluate {
            data,
            model,
            fraction,
            out: path,
            format,
        } => {
            let cfg = load_config(cfile, data.overrides())?;
            let kinds = model.kinds()?;
            let sets = data.datasets(&cfg)?;
            let mut runs = Vec::new();
            let mut table = Vec::new();
            for &kind in &kinds {
                let mut per_set = std::collections::BTreeMap::new();
                for (ds, hp) in &sets {
                    let mut learner = learner(kind, model.apply(hp.clone()), ds);
                    let report = cross_validate(
                        &mut learner,
                        &ds.examples,
                        ds.meta.score_min,
                        ds.meta.score_max,
                        cfg.seed,
                        fraction,
                    )?;
                    per_set.insert(ds.meta.set_id, report.mean_qwk);
                    runs.push(EvaluateRun {
                        kind,
                        set_id: ds.meta.set_id,
                        provider: ds.provider.clone(),
                        report,
                    });
                }
                table.push(QwkTable::new(kind.as_str(), per_set));
            }
            let report = EvaluateReport { table, runs };
            if let Some(p) = path {
                write_file(&p, serde_json::to_string_pretty(&report).map_err(Error::from)?.as_bytes())?;
            }
            match format {
                Format::Json => write_json(out, &report),
                Format::Table => {
                    write!(out, "{}", render_table(&report.table)).map_err(|e| Error::io("<stdout>", e))?;
                    Ok(())
                }
            }
        }
        Cmd::ReduceSweep {
            data,
            model,
            fraction,
            out: path,
            format,
        } => {
            let cfg = load_config(cfile, data.overrides())?;
            let kinds = model.kinds()?;
            let sets = data.datasets(&cfg)?;
            let mut reports = Vec::new();
            for &kind in &kinds {
                for (ds, hp) in &sets {
                    let mut learner = learner(kind, model.apply(hp.clone()), ds);
                    let rows = reduced_data_sweep(
                        &mut learner,
                        &ds.examples,
                        ds.meta.score_min,
                        ds.meta.score_max,
                        &fraction,
                        cfg.seed,
                    )?;
                    reports.push(SweepReport {
                        kind,
                        set_id: ds.meta.set_id,
                        rows,
                    });
                }
            }
            if let Some(p) = path {
                write_file(&p, serde_json::to_string_pretty(&reports).map_err(Error::from)?.as_bytes())?;
            }
            match format {
                Format::Json => write_json(out, &reports),
                Format::Table => {
                    let mut text = format!("{:<20} {:>5} {:>8} {:>8}\n", "Model", "Set", "Fraction", "QWK");
                    for r in &reports {
                        for row in &r.rows {
                            text.push_str(&format!(
                                "{:<20} {:>5} {:>8.2} {:>8.3}\n",
                                r.kind.as_str(),
                                r.set_id,
                                row.fraction,
                                row.mean_qwk
                            ));
                        }
                    }
                    write!(out, "{}", text).map_err(|e| Error::io("<stdout>", e))?;
                    Ok(())
                }
            }
        }
        Cmd::Score {
            model,
            essay_file,
            passage_file,
            provider: prov,
        } => {
            let cfg = load_config(cfile, Overrides::default())?;
            let essay = read_file(&essay_file)?;
            let passage = passage_file.as_deref().map(read_file).transpose()?;
            let loaded = resolve_model(&model, &cfg.model_dir)?;
            let default = provider::resolve(&cfg.provider)?;
            let pred = pipeline::score_with(&loaded, &essay, passage.as_deref(), prov.as_deref(), &default)?;
            write_json(out, &pred)
        }
        Cmd::Analyze {
            passage_file,
            essay_file,
            prompt_file,
            model,
            provider: prov,
        } => {
            let cfg = load_config(cfile, Overrides::default())?;
            let req = AnalyzeRequest {
                passage: read_file(&passage_file)?,
                essay: read_file(&essay_file)?,
                prompt: prompt_file.as_deref().map(read_file).transpose()?,
                model: None,
                provider: prov,
            };
            let registry = match &model {
                Some(m) => {
                    let loaded = resolve_model(m, &cfg.model_dir)?;
                    Registry::from_models([loaded])
                }
                None => Registry::default(),
            };
            let req = AnalyzeRequest {
                model: registry.manifests().first().map(|m| m.id.clone()),
                ..req
            };
            let default = provider::resolve(&cfg.provider)?;
            let resp = pipeline::analyze(&req, &registry, &default, cfg.tau)?;
            write_json(out, &resp)
        }
        Cmd::Serve { port, provider: prov } => {
            let cfg = load_config(
                cfile,
                Overrides {
                    port,
                    provider: prov,
                    ..Overrides::default()
                },
            )?;
            let registry = Registry::load_dir(&cfg.model_dir)?;
            let state = http::AppState {
                registry: Arc::new(registry),
                encoder: provider::resolve(&cfg.provider)?,
                catalog: Arc::new(textio::catalog(cfg.meta_file.as_deref())?),
                tau: cfg.tau,
            };
            eprintln!(
                "{} model(s) from {}; provider {}",
                state.registry.len(),
                cfg.model_dir.display(),
                state.encoder.id()
            );
            let static_dir = cfg.static_dir.is_dir().then(|| cfg.static_dir.clone());
            let addr = format!("{}:{}", cfg.bind, cfg.port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
            rt.block_on(http::serve(state, static_dir, &addr))
                .map_err(|e| Error::io(addr.as_str(), e))?;
            Ok(())
        }
    }
}

impl DataArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            provider: self.provider.clone(),
            seed: self.seed,
            ..Overrides::default()
        }
    }

    fn catalog(&self, cfg: &Config) -> CliResult<Catalog> {
        Ok(textio::catalog(self.meta.as_deref().or(cfg.meta_file.as_deref()))?)
    }

    fn records(&self, catalog: &Catalog) -> CliResult<Vec<EssayRecord>> {
        let path = self
            .corpus
            .as_deref()
            .ok_or_else(|| usage("a corpus TSV path is required"))?;
        let mut records = textio::load_corpus(path, catalog)?;
        if !self.sets.is_empty() {
            records.retain(|r| self.sets.contains(&r.set_id));
        }
        if records.is_empty() {
            return Err(Error::InvalidRequest(format!("{}: no essays in the selected sets", path.display())).into());
        }
        Ok(records)
    }

    /// Datasets with their generated hyperparameters.
    fn datasets(&self, cfg: &Config) -> CliResult<Vec<(Dataset, HyperParams)>> {
        if self.synthetic {
            if self.embeddings.is_some() {
                return Err(usage("--embeddings cannot be combined with --synthetic"));
            }
            // the corpus itself is fixed; --seed drives folds and training
            let corpus = synthetic_corpus(SyntheticConfig::default())?;
            if !self.sets.is_empty() && !self.sets.contains(&corpus.meta.set_id) {
                return Err(usage(format!("the synthetic corpus is set {}", corpus.meta.set_id)));
            }
            let hp = smoke_hyperparams(&corpus.meta, Catalog::builtin().mean_classes());
            let ds = Dataset {
                provider: corpus.provider.id(),
                dim: corpus.provider.dim,
                meta: corpus.meta,
                examples: corpus.examples,
            };
            return Ok(vec![(ds, hp)]);
        }
        let catalog = self.catalog(cfg)?;
        let records = self.records(&catalog)?;
        let docs: Option<Vec<EmbeddedDocument>> = match &self.embeddings {
            Some(p) => {
                let f = fs::File::open(p).map_err(|e| Error::io(p, e))?;
                Some(read_embedding_file(BufReader::new(f)).map_err(|e| match e {
                    Error::MalformedLine { line, detail } => Error::MalformedLine {
                        line,
                        detail: format!("{}: {}", p.display(), detail),
                    },
                    other => other,
                })?)
            }
            None => None,
        };
        let enc = match &docs {
            Some(_) => None,
            None => Some(provider::resolve(&cfg.provider)?),
        };
        let source = match (&docs, &enc) {
            (Some(d), _) => EmbeddingSource::File(d),
            (None, Some(e)) => EmbeddingSource::Provider(e.as_ref()),
            (None, None) => unreachable!("one source is always set"),
        };
        let mut set_ids: Vec<u32> = records.iter().map(|r| r.set_id).collect();
        set_ids.sort_unstable();
        set_ids.dedup();
        set_ids
            .into_iter()
            .map(|id| {
                let meta = catalog.get(id)?;
                let ds = build_dataset(&records, meta, &source)?;
                Ok((ds, generate_hyperparams(meta, catalog.mean_classes())))
            })
            .collect()
    }
}

impl ModelArgs {
    fn kinds(&self) -> CliResult<Vec<ModelKind>> {
        self.kinds
            .iter()
            .map(|k| ModelKind::parse(k).map_err(|e| usage(e.to_string())))
            .collect()
    }

    fn single_kind(&self) -> CliResult<ModelKind> {
        match self.kinds()?.as_slice() {
            [k] => Ok(*k),
            _ => Err(usage("train takes a single --kind")),
        }
    }

    fn apply(&self, mut hp: HyperParams) -> HyperParams {
        if let Some(d) = self.d_model {
            hp.d_model = d;
        }
        if let Some(e) = self.epochs {
            hp.epochs = e;
            // a short run keeps early stopping meaningful
            hp.patience = hp.patience.min(e);
        }
        hp
    }
}

fn learner(kind: ModelKind, hp: HyperParams, ds: &Dataset) -> NeuralLearner {
    NeuralLearner::new(kind, hp, ds.dim, ds.meta.score_min, ds.meta.score_max)
}

fn embed_records(enc: &dyn SentenceEncoder, records: &[EssayRecord], catalog: &Catalog) -> Result<Vec<EmbeddedDocument>> {
    let mut docs = Vec::with_capacity(records.len());
    let mut seen_sets: Vec<&EssaySetMeta> = Vec::new();
    for r in records {
        docs.push(EmbeddedDocument::from_text(enc, &r.essay_id, &r.text)?);
        let meta = catalog.get(r.set_id)?;
        if !seen_sets.iter().any(|m| m.set_id == meta.set_id) {
            seen_sets.push(meta);
        }
    }
    for m in seen_sets {
        if let Some(p) = &m.passage {
            docs.push(EmbeddedDocument::from_text(enc, &passage_doc_id(m.set_id), p)?);
        }
    }
    Ok(docs)
}

/// Trains on fold 0's train and dev partitions and scores its test partition.
fn train_one(
    ds: &Dataset,
    kind: ModelKind,
    mut hp: HyperParams,
    fraction: f64,
    seed: u64,
    out: Option<PathBuf>,
    model_dir: &Path,
) -> CliResult<TrainSummary> {
    let data = &ds.examples;
    let plan = make_folds(data.len(), seed)?;
    let fold = &plan.folds[0];
    let labels = |idx: &[usize]| idx.iter().map(|&i| data[i].score).collect::<Vec<_>>();
    let train_idx = reduce_training_set(&fold.train, &labels(&fold.train), fraction, seed)?;
    let dev_idx = reduce_training_set(&fold.dev, &labels(&fold.dev), fraction, seed ^ 0xDEF)?;
    hp.seed = seed;
    let spec = ModelSpec::new(kind, hp, ds.dim, ds.meta.score_min, ds.meta.score_max);
    let model = ScoreModel::build(spec, seed)?;
    let (model, report) = train(model, data, &train_idx, &dev_idx)?;
    let inputs: Vec<_> = fold.test.iter().map(|&i| &data[i].input).collect();
    let pred: Vec<i64> = model.predict_batch(&inputs)?.into_iter().map(|p| p.score).collect();
    let test_qwk = qwk(&labels(&fold.test), &pred, ds.meta.score_min, ds.meta.score_max)?.value;
    let path = out.unwrap_or_else(|| model_dir.join(format!("{}-set{}.{}", kind.as_str(), ds.meta.set_id, MODEL_EXT)));
    let meta = ModelMeta {
        provider: Some(ds.provider.clone()),
        set_id: Some(ds.meta.set_id),
        qwk: [(ds.meta.set_id, test_qwk)].into_iter().collect(),
    };
    write_file(&path, &save_model(&model, &meta)?)?;
    Ok(TrainSummary {
        model_path: path,
        kind,
        set_id: ds.meta.set_id,
        provider: ds.provider.clone(),
        n_train: train_idx.len(),
        n_dev: dev_idx.len(),
        n_test: fold.test.len(),
        test_qwk,
        report,
    })
}
