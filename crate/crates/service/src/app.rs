//! Runtime components shared by the CLI and the HTTP server.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use iotsh_core::classify::{Classifier, HttpClassifier, NbModel};
use iotsh_core::corpus::Splitter;
use iotsh_core::embed::{Embedder, HttpEmbedder, StubEmbedder, StubTokenFallback};
use iotsh_core::flow::FeaturePolicy;
use iotsh_core::generate::{EchoGenerator, Generator, HttpGenerator};
use iotsh_core::ingest::{ingest_dir, IngestReport};
use iotsh_core::jsonl::Sink;
use iotsh_core::metrics::{summarize, MetricReport};
use iotsh_core::rag::{load_qa, BenchmarkRow, Mode, RagPipeline};
use iotsh_core::resource::{aggregate, ResourceTable};
use iotsh_core::{Error, Result, Store};

use crate::config::{Config, ConfigError, STUB};

pub struct Components {
    pub config: Config,
    pub embedder: Arc<dyn Embedder<f64>>,
    pub generator: Arc<dyn Generator>,
    pub classifier: Option<Arc<dyn Classifier<f64>>>,
}

impl Components {
    pub fn build(config: Config) -> std::result::Result<Self, BuildError> {
        config.validate()?;
        let embedder: Arc<dyn Embedder<f64>> = if config.embed_endpoint == STUB {
            Arc::new(StubEmbedder::new(config.embed_dim)?)
        } else {
            Arc::new(HttpEmbedder::new(
                config.embed_endpoint.clone(),
                config.embed_dim,
            ))
        };
        let generator: Arc<dyn Generator> = if config.chat_endpoint == STUB {
            Arc::new(EchoGenerator)
        } else {
            Arc::new(HttpGenerator::new(
                config.chat_endpoint.clone(),
                config.chat_model.clone(),
            ))
        };
        let classifier: Option<Arc<dyn Classifier<f64>>> =
            match (&config.classify_endpoint, &config.baseline_model_path) {
                (Some(e), _) if e != STUB => Some(Arc::new(HttpClassifier::new(e.clone()))),
                (_, Some(path)) => Some(Arc::new(load_model(path)?)),
                _ => None,
            };
        Ok(Components {
            config,
            embedder,
            generator,
            classifier,
        })
    }

    pub fn splitter(&self) -> Result<Splitter> {
        Splitter::new(self.config.chunk_size, self.config.chunk_overlap)
    }

    pub fn open_store(&self) -> Result<Store> {
        ensure_parent(&self.config.store_path)?;
        Store::open(&self.config.store_path, self.embedder.dim())
    }

    pub fn record_log(&self) -> Result<Sink> {
        ensure_dir(&self.config.data_dir)?;
        Sink::open(self.config.data_dir.join("records.jsonl"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.config.data_dir.join("reports")
    }

    pub fn feature_policy(&self) -> Result<FeaturePolicy> {
        match &self.config.feature_policy_path {
            Some(p) => FeaturePolicy::load(p),
            None => Ok(FeaturePolicy::edge_iiot_default()),
        }
    }

    pub fn classifier(&self) -> Result<&dyn Classifier<f64>> {
        self.classifier.as_deref().ok_or_else(|| {
            Error::Config("no classifier: set classify_endpoint or baseline_model_path".into())
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] Error),
}

pub fn load_model(path: &Path) -> Result<NbModel<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

pub fn ingest(c: &Components, store: &mut Store, dir: &Path) -> Result<IngestReport> {
    let report = ingest_dir(dir, &c.splitter()?, c.embedder.as_ref(), store)?;
    log::info!(
        "ingested {}: {} chunks, {} added, {} skipped",
        dir.display(),
        report.chunks,
        report.added,
        report.skipped
    );
    Ok(report)
}

/// Paired benchmark output: metric means per (model, mode, use case) and
/// resource aggregates per (model, mode).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub qa_path: PathBuf,
    pub modes: Vec<Mode>,
    pub k: usize,
    pub pairs: usize,
    pub metrics: Vec<MetricReport<f64>>,
    pub resources: ResourceTable,
}

pub fn evaluate_qa(
    c: &Components,
    store: &Store,
    qa_path: &Path,
    modes: &[Mode],
    k: usize,
    log: Option<&Sink>,
) -> Result<EvalOutput> {
    if modes.is_empty() {
        return Err(Error::Precondition("at least one mode is required".into()));
    }
    let qa = load_qa(qa_path)?;
    let mut pipeline = RagPipeline::new(c.embedder.as_ref(), store, c.generator.as_ref());
    if let Some(sink) = log {
        pipeline = pipeline.with_log(sink);
    }
    let mut rows: Vec<BenchmarkRow<f64>> = Vec::new();
    for &mode in modes {
        rows.extend(pipeline.run_benchmark(&qa, mode, k, c.config.parallelism)?);
    }
    let scorer = StubTokenFallback::new(c.embedder.as_ref());
    let metrics = summarize(&rows, &scorer)?;
    let records: Vec<_> = rows.into_iter().map(|r| r.record).collect();
    Ok(EvalOutput {
        qa_path: qa_path.to_owned(),
        modes: modes.to_vec(),
        k,
        pairs: qa.len(),
        metrics,
        resources: aggregate(&records),
    })
}

/// Plain-text rendering of an evaluation: metric means, then resources.
pub fn render_eval(out: &EvalOutput) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<4} {:<18} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "model",
        "mode",
        "use case",
        "pairs",
        "BERT",
        "ROUGE1",
        "ROUGE2",
        "ROUGEL",
        "BLEU",
        "METEOR"
    );
    for m in &out.metrics {
        let _ = writeln!(
            s,
            "{:<10} {:<4} {:<18} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            m.model,
            m.mode.label(),
            m.use_case,
            m.pairs,
            m.bert.f,
            m.rouge1.f,
            m.rouge2.f,
            m.rouge_l.f,
            m.bleu,
            m.meteor
        );
    }
    s.push('\n');
    s.push_str(&out.resources.render());
    s
}
