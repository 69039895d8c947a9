//! The `iotsh` command line.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use iotsh_core::classify::{evaluate, train_nb, validate_table_json, Classifier, Prediction};
use iotsh_core::flow::{split, textualize, FeaturePolicy, FlowTable, TextualizedRow};
use iotsh_core::jsonl;
use iotsh_core::rag::{Mode, QueryRequest, RagPipeline};
use iotsh_core::resource::aggregate;
use iotsh_core::{Error, RagRecord};

use crate::app::{self, render_eval, Components, EvalOutput};
use crate::config::Config;
use crate::{reports, server};

pub const DEFAULT_SEED: u64 = 42;
/// Rows sent per classify call.
const CLASSIFY_BATCH: usize = 256;
const CONFIG_FILE: &str = "iotsh.toml";

#[derive(Parser)]
#[command(
    name = "iotsh",
    version,
    about = "Retrieval QA and flow classification for IoT deployments"
)]
struct Cli {
    /// TOML config file; defaults to ./iotsh.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring config fields; they take precedence over the file and
/// `IOTSH_*` variables.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true, value_name = "DIR")]
    corpus_dir: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    store_path: Option<String>,
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    embed_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    embed_dim: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    chat_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "NAME")]
    chat_model: Option<String>,
    #[arg(long, global = true, value_name = "URL")]
    classify_endpoint: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    baseline_model_path: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    default_k: Option<String>,
    #[arg(long, global = true, value_name = "BYTES")]
    chunk_size: Option<String>,
    #[arg(long, global = true, value_name = "BYTES")]
    chunk_overlap: Option<String>,
    #[arg(long, global = true, value_name = "NAME")]
    label_column: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    feature_policy_path: Option<String>,
    #[arg(long, global = true, value_name = "ADDR")]
    listen_address: Option<String>,
    #[arg(long, global = true, value_name = "P")]
    alert_threshold: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    parallelism: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("corpus_dir", &self.corpus_dir),
            ("store_path", &self.store_path),
            ("data_dir", &self.data_dir),
            ("embed_endpoint", &self.embed_endpoint),
            ("embed_dim", &self.embed_dim),
            ("chat_endpoint", &self.chat_endpoint),
            ("chat_model", &self.chat_model),
            ("classify_endpoint", &self.classify_endpoint),
            ("baseline_model_path", &self.baseline_model_path),
            ("default_k", &self.default_k),
            ("chunk_size", &self.chunk_size),
            ("chunk_overlap", &self.chunk_overlap),
            ("label_column", &self.label_column),
            ("feature_policy_path", &self.feature_policy_path),
            ("listen_address", &self.listen_address),
            ("alert_threshold", &self.alert_threshold),
            ("parallelism", &self.parallelism),
        ]
    }
}

#[derive(Subcommand)]
enum Command {
    /// Chunk, embed and store every document under a directory.
    Ingest {
        /// Defaults to `corpus_dir`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Answer one question.
    Query {
        #[arg(long, default_value = "wc")]
        mode: Mode,
        #[arg(short, long)]
        k: Option<usize>,
        question: String,
    },
    /// Run a QA benchmark and score it.
    Eval {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "nc,wc")]
        modes: Vec<Mode>,
        #[arg(short, long)]
        k: Option<usize>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a flow CSV into train and test CSVs.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        no_stratify: bool,
    },
    /// Apply the feature policy and write one text row per flow as JSON Lines.
    Textualize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// JSON feature policy; overrides `feature_policy_path`.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Keep every column.
        #[arg(long, conflicts_with = "policy")]
        no_policy: bool,
    },
    /// Fit the naive Bayes baseline on a flow CSV.
    TrainBaseline {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Classify a labelled flow CSV and report per-class scores.
    Classify {
        #[arg(long)]
        input: PathBuf,
        /// Local baseline model; overrides the configured classifier.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Show stored results.
    Report {
        #[command(subcommand)]
        what: ReportCommand,
    },
    /// Run the HTTP service.
    Serve,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Resource table over the record log.
    Resources {
        /// Defaults to `<data_dir>/records.jsonl`.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// A saved evaluation or classification report.
    Show { id: String },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Build(#[from] app::BuildError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Other(String),
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None if Path::new(CONFIG_FILE).is_file() => Config::from_file(Path::new(CONFIG_FILE))?,
        None => Config::default(),
    };
    config.apply_env(std::env::vars())?;
    for (name, value) in cli.overrides.pairs() {
        if let Some(v) = value {
            config.set(name, v)?;
        }
    }
    Ok(config)
}

struct Out {
    json: bool,
}

impl Out {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> CliResult {
        let text = if self.json {
            serde_json::to_string_pretty(value).expect("output serializes")
        } else {
            human()
        };
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "{}", text.trim_end()).map_err(|e| CliError::Other(format!("stdout: {e}")))
    }
}

fn execute(cli: Cli) -> CliResult {
    let config = load_config(&cli)?;
    let out = Out { json: cli.json };
    match cli.command {
        Command::Ingest { dir } => {
            let c = Components::build(config)?;
            let dir = dir.unwrap_or_else(|| c.config.corpus_dir.clone());
            let mut store = c.open_store()?;
            let report = app::ingest(&c, &mut store, &dir)?;
            store.persist()?;
            for f in &report.failures {
                eprintln!("warning: skipped {}: {}", f.source_id, f.message);
            }
            out.emit(&report, || {
                format!(
                    "{} chunks added ({} already stored, {} documents)",
                    report.added, report.skipped, report.documents
                )
            })
        }
        Command::Query { mode, k, question } => {
            let c = Components::build(config)?;
            let store = c.open_store()?;
            let log = c.record_log()?;
            let request = QueryRequest::new(question, mode).with_k(k.unwrap_or(c.config.default_k));
            let record = RagPipeline::new(c.embedder.as_ref(), &store, c.generator.as_ref())
                .with_log(&log)
                .answer(request)?;
            if let Some(e) = &record.error {
                return Err(CliError::Other(format!("generation failed: {e}")));
            }
            out.emit(&record, || render_record(&record))
        }
        Command::Eval {
            qa,
            modes,
            k,
            out: path,
        } => {
            let c = Components::build(config)?;
            let store = c.open_store()?;
            let log = c.record_log()?;
            let k = k.unwrap_or(c.config.default_k);
            let result = app::evaluate_qa(&c, &store, &qa, &modes, k, Some(&log))?;
            let value = serde_json::to_value(&result).expect("report serializes");
            let id = reports::save(&c.reports_dir(), "eval", &value)?;
            if let Some(p) = &path {
                write_json(p, &value)?;
            }
            out.emit(&value, || {
                format!("{}\nsaved as report {id}", render_eval(&result))
            })
        }
        Command::Split {
            input,
            train,
            test,
            ratio,
            seed,
            no_stratify,
        } => {
            let table = FlowTable::load(&input, config.label_column()?)?;
            let (tr, te, warnings) = split(&table, ratio, seed, !no_stratify)?;
            warn_all(&warnings);
            tr.write_csv(&train)?;
            te.write_csv(&test)?;
            let summary =
                serde_json::json!({ "train": tr.len(), "test": te.len(), "warnings": warnings });
            out.emit(&summary, || {
                format!("{} train rows, {} test rows", tr.len(), te.len())
            })
        }
        Command::Textualize {
            input,
            output,
            policy,
            no_policy,
        } => {
            let policy = match policy.or_else(|| config.feature_policy_path.clone()) {
                _ if no_policy => FeaturePolicy::empty(),
                Some(p) => FeaturePolicy::load(p)?,
                None => FeaturePolicy::edge_iiot_default(),
            };
            let rows = textualize_with(&input, config.label_column()?, &policy)?;
            app::ensure_parent(&output)?;
            jsonl::write_all(&output, &rows)?;
            let summary = serde_json::json!({ "rows": rows.len(), "output": output });
            out.emit(&summary, || {
                format!("{} rows written to {}", rows.len(), output.display())
            })
        }
        Command::TrainBaseline { train, output } => {
            let c = Components::build(config)?;
            let rows = flow_rows(&c, &train)?;
            let model = train_nb::<f64>(&rows)?;
            if model.degenerate {
                eprintln!("warning: training data holds a single class; the model cannot predict");
            }
            app::ensure_parent(&output)?;
            write_json(
                &output,
                &serde_json::to_value(&model).expect("model serializes"),
            )?;
            let summary = serde_json::json!({
                "rows": rows.len(),
                "classes": model.classes,
                "vocabulary": model.vocab.len(),
                "output": output,
            });
            out.emit(&summary, || {
                format!(
                    "trained on {} rows: {} classes, {} tokens; saved {}",
                    rows.len(),
                    model.classes.len(),
                    model.vocab.len(),
                    output.display()
                )
            })
        }
        Command::Classify {
            input,
            model,
            report_out,
        } => {
            let c = Components::build(config)?;
            let classifier: Arc<dyn Classifier<f64>> = match &model {
                Some(path) => Arc::new(app::load_model(path)?),
                None => c.classifier.clone().ok_or_else(|| {
                    CliError::Other(
                        "no classifier configured; pass --model or set classify_endpoint".into(),
                    )
                })?,
            };
            let rows = flow_rows(&c, &input)?;
            let (classes, mut predictions) = classify_all(classifier.as_ref(), &rows)?;
            let golds: Vec<String> = rows.into_iter().map(|r| r.label).collect();
            let classes = with_gold_classes(classes, &golds, &mut predictions);
            let report = evaluate(&predictions, &golds, &classes)?;
            let table = report.to_table_json();
            let id = reports::save(&c.reports_dir(), "cls", &table)?;
            if let Some(p) = &report_out {
                write_json(p, &table)?;
            }
            out.emit(&table, || {
                format!("{}\nsaved as report {id}", report.render())
            })
        }
        Command::Report { what } => match what {
            ReportCommand::Resources { records } => {
                let path = records.unwrap_or_else(|| config.data_dir.join("records.jsonl"));
                let records: Vec<RagRecord> = if path.exists() {
                    jsonl::read(&path)?
                } else {
                    Vec::new()
                };
                let table = aggregate(&records);
                warn_all(&table.warnings);
                out.emit(&table.to_json(), || table.render())
            }
            ReportCommand::Show { id } => {
                let dir = config.data_dir.join("reports");
                let value = reports::load(&dir, &id)?
                    .ok_or_else(|| CliError::Other(format!("no report {id}")))?;
                out.emit(&value, || render_saved(&value))
            }
        },
        Command::Serve => serve(config),
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn write_json(path: &Path, value: &Value) -> CliResult {
    app::ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e).into())
}

fn textualize_with(
    input: &Path,
    label: &str,
    policy: &FeaturePolicy,
) -> CliResult<Vec<TextualizedRow>> {
    let table = FlowTable::load(input, label)?;
    let outcome = iotsh_core::flow::apply_policy(&table, policy);
    warn_all(&outcome.warnings);
    Ok(textualize(&outcome.table)?)
}

fn flow_rows(c: &Components, input: &Path) -> CliResult<Vec<TextualizedRow>> {
    textualize_with(input, c.config.label_column()?, &c.feature_policy()?)
}

fn classify_all(
    classifier: &dyn Classifier<f64>,
    rows: &[TextualizedRow],
) -> CliResult<(Vec<String>, Vec<Prediction<f64>>)> {
    let mut classes: Option<Vec<String>> = None;
    let mut predictions = Vec::with_capacity(rows.len());
    for batch in rows.chunks(CLASSIFY_BATCH) {
        let texts: Vec<&str> = batch.iter().map(|r| r.text.as_str()).collect();
        let got = classifier.classify(&texts)?;
        match &classes {
            None => classes = Some(got.classes),
            Some(seen) if *seen != got.classes => {
                return Err(Error::Integrity(format!(
                    "{} changed its class list between batches",
                    classifier.name()
                ))
                .into())
            }
            Some(_) => {}
        }
        predictions.extend(got.predictions);
    }
    Ok((classes.unwrap_or_default(), predictions))
}

/// Appends gold labels the classifier does not know, with zero probability,
/// so the report still counts those rows as misses.
fn with_gold_classes(
    mut classes: Vec<String>,
    golds: &[String],
    predictions: &mut [Prediction<f64>],
) -> Vec<String> {
    for g in golds {
        if !classes.contains(g) {
            eprintln!("warning: gold label {g:?} is unknown to the classifier");
            classes.push(g.clone());
        }
    }
    for p in predictions {
        p.probs.resize(classes.len(), 0.0);
    }
    classes
}

fn render_record(r: &RagRecord) -> String {
    let mut s = format!("{}\n", r.answer.trim_end());
    if !r.retrieved.is_empty() {
        s.push_str("\nsources:\n");
        for h in &r.retrieved {
            s.push_str(&format!(
                "  {:.4}  {} p{}  {}\n",
                h.score, h.source, h.page, h.chunk_id
            ));
        }
    }
    s.push_str(&format!(
        "\n{}: {:.3} s, {} tokens, {} bytes\n",
        r.model, r.metrics.execution_time_s, r.metrics.tokens, r.metrics.response_bytes
    ));
    s
}

fn render_saved(value: &Value) -> String {
    if let Ok(eval) = serde_json::from_value::<EvalOutput>(value.clone()) {
        return render_eval(&eval);
    }
    if validate_table_json(value).is_ok() {
        if let Ok(text) = render_table_json(value) {
            return text;
        }
    }
    serde_json::to_string_pretty(value).expect("json value serializes")
}

fn render_table_json(value: &Value) -> Result<String, ()> {
    use std::fmt::Write as _;
    let rows = value["rows"].as_array().ok_or(())?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<24} {:>9} {:>9} {:>9} {:>9}",
        "class", "precision", "recall", "f1-score", "support"
    );
    let line = |s: &mut String, name: &str, v: &Value| {
        let _ = writeln!(
            s,
            "{:<24} {:>9.2} {:>9.2} {:>9.2} {:>9}",
            name,
            v["precision"].as_f64().unwrap_or(f64::NAN),
            v["recall"].as_f64().unwrap_or(f64::NAN),
            v["f1-score"].as_f64().unwrap_or(f64::NAN),
            v["support"]
        );
    };
    for r in rows {
        line(&mut s, r["class"].as_str().unwrap_or("?"), r);
    }
    line(&mut s, "Macro Avg", &value["macro avg"]);
    line(&mut s, "Weighted Avg", &value["weighted avg"]);
    let _ = writeln!(
        s,
        "{:<24} {:>9.2}",
        "Accuracy",
        value["accuracy"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(s)
}

fn serve(config: Config) -> CliResult {
    let c = Components::build(config)?;
    let addr = c.config.listen_address.clone();
    let state = Arc::new(server::ServerState::new(c)?);
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::Other(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| {
            CliError::Other(format!(
                "config field `listen_address`: cannot bind {addr}: {e}"
            ))
        })?;
        log::info!("listening on {addr}");
        eprintln!("listening on http://{addr}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        server::serve(state, listener, shutdown)
            .await
            .map_err(|e| CliError::Other(format!("server failed: {e}")))
    })
}
