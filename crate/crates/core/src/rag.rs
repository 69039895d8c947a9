//! Query execution in no-context (NC) and with-context (WC) modes.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::generate::Generator;
use crate::jsonl::{self, Sink};
use crate::resource::{measure, ResourceMetrics};
use crate::scalar::Real;
use crate::store::VectorStore;

pub const DEFAULT_K: usize = 5;
pub const CONTEXT_PREAMBLE: &str = "Answer the question based only on the following context:\n\n";
pub const CONTEXT_SEPARATOR: &str = "\n\n---\n\n";
pub const QUESTION_PREFIX: &str = "Question: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Nc,
    Wc,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Nc => "NC",
            Mode::Wc => "WC",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nc" => Ok(Mode::Nc),
            "wc" => Ok(Mode::Wc),
            other => Err(Error::param(
                "mode",
                format!("expected nc or wc, got {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UseCase {
    DeviceManagement,
    Maintenance,
    SecurityPrivacy,
    Troubleshooting,
    DeviceSetup,
}

impl UseCase {
    pub fn as_str(self) -> &'static str {
        match self {
            UseCase::DeviceManagement => "device_management",
            UseCase::Maintenance => "maintenance",
            UseCase::SecurityPrivacy => "security_privacy",
            UseCase::Troubleshooting => "troubleshooting",
            UseCase::DeviceSetup => "device_setup",
        }
    }
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub question: String,
    pub mode: Mode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_case: Option<UseCase>,
}

impl QueryRequest {
    pub fn new(question: impl Into<String>, mode: Mode) -> Self {
        QueryRequest {
            question: question.into(),
            mode,
            k: DEFAULT_K,
            use_case: None,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Precondition("question must not be empty".into()));
        }
        if self.k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        Ok(())
    }
}

/// A retrieval hit together with the provenance needed to cite it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk<T> {
    pub chunk_id: String,
    pub score: T,
    pub source: String,
    pub page: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagRecord<T> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub model: String,
    pub request: QueryRequest,
    pub retrieved: Vec<RetrievedChunk<T>>,
    pub prompt: String,
    pub answer: String,
    pub metrics: ResourceMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Builds the generation prompt. Chunks keep retrieval rank order; with no
/// chunks only the question block remains.
pub fn build_prompt(question: &str, chunks: &[&str]) -> String {
    let tail = format!("{QUESTION_PREFIX}{question}\nAnswer:");
    if chunks.is_empty() {
        return tail;
    }
    format!(
        "{CONTEXT_PREAMBLE}{}\n\n{tail}",
        chunks.join(CONTEXT_SEPARATOR)
    )
}

/// One query pipeline over a store, its embedder and a generator.
pub struct RagPipeline<'a, T> {
    pub embedder: &'a dyn Embedder<T>,
    pub store: &'a VectorStore<T>,
    pub generator: &'a dyn Generator,
    pub log: Option<&'a Sink>,
}

impl<'a, T: Real + Serialize> RagPipeline<'a, T> {
    pub fn new(
        embedder: &'a dyn Embedder<T>,
        store: &'a VectorStore<T>,
        generator: &'a dyn Generator,
    ) -> Self {
        RagPipeline {
            embedder,
            store,
            generator,
            log: None,
        }
    }

    pub fn with_log(mut self, log: &'a Sink) -> Self {
        self.log = Some(log);
        self
    }

    /// Runs one query. Invalid requests and misconfiguration are errors;
    /// embedding and generation failures produce a record with `error` set,
    /// which is logged like any other.
    pub fn answer(&self, request: QueryRequest) -> Result<RagRecord<T>> {
        request.validate()?;
        if request.mode == Mode::Wc {
            if self.store.is_empty() {
                return Err(Error::Config(
                    "with-context query against an empty store".into(),
                ));
            }
            if self.embedder.dim() != self.store.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.store.dim(),
                    actual: self.embedder.dim(),
                });
            }
        }
        let mut record = RagRecord {
            id: None,
            model: self.generator.model().to_owned(),
            request,
            retrieved: Vec::new(),
            prompt: String::new(),
            answer: String::new(),
            metrics: ResourceMetrics::from_answer("", Some(0), Default::default()),
            error: None,
        };
        match self.retrieve(&record.request) {
            Ok(retrieved) => record.retrieved = retrieved,
            Err(e) => {
                record.error = Some(format!("retrieval failed: {e}"));
                self.log_record(&record)?;
                return Ok(record);
            }
        }
        let texts: Vec<&str> = record
            .retrieved
            .iter()
            .filter_map(|h| self.store.get(&h.chunk_id))
            .map(|e| e.chunk.text.as_str())
            .collect();
        record.prompt = build_prompt(&record.request.question, &texts);
        let (outcome, metrics) = measure(|| self.generator.generate(&record.prompt));
        record.metrics = metrics;
        match outcome {
            Ok(g) => record.answer = g.text,
            Err(e) => record.error = Some(format!("generation failed: {e}")),
        }
        self.log_record(&record)?;
        Ok(record)
    }

    fn retrieve(&self, request: &QueryRequest) -> Result<Vec<RetrievedChunk<T>>> {
        if request.mode == Mode::Nc {
            return Ok(Vec::new());
        }
        let query = self.embedder.embed_one(&request.question)?;
        let hits = self.store.top_k(&query, request.k)?;
        Ok(hits
            .into_iter()
            .map(|h| {
                let chunk = &self
                    .store
                    .get(&h.chunk_id)
                    .expect("hit refers to stored chunk")
                    .chunk;
                RetrievedChunk {
                    source: chunk.source_id.clone(),
                    page: chunk.page,
                    chunk_id: h.chunk_id,
                    score: h.score,
                }
            })
            .collect())
    }

    fn log_record(&self, record: &RagRecord<T>) -> Result<()> {
        match self.log {
            Some(sink) => sink.append(record),
            None => Ok(()),
        }
    }

    /// Runs every QA pair in `mode`, keeping input order. Up to
    /// `parallelism` pairs run at once.
    pub fn run_benchmark(
        &self,
        qa_set: &[QaPair],
        mode: Mode,
        k: usize,
        parallelism: usize,
    ) -> Result<Vec<BenchmarkRow<T>>> {
        if qa_set.is_empty() {
            return Err(Error::Precondition("QA set is empty".into()));
        }
        let run_one = |pair: &QaPair| -> Result<BenchmarkRow<T>> {
            let mut request = QueryRequest::new(pair.question.clone(), mode).with_k(k);
            request.use_case = pair.use_case;
            let mut record = self.answer(request)?;
            record.id = Some(pair.id.clone());
            Ok(BenchmarkRow {
                qa_id: pair.id.clone(),
                use_case: pair.use_case,
                reference: pair.reference.clone(),
                record,
            })
        };
        let workers = parallelism.clamp(1, qa_set.len());
        if workers == 1 {
            return qa_set.iter().map(run_one).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<BenchmarkRow<T>>>>> =
            Mutex::new((0..qa_set.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= qa_set.len() {
                        break;
                    }
                    let row = run_one(&qa_set[i]);
                    slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(row);
                });
            }
        });
        slots
            .into_inner()
            .unwrap_or_else(|p| p.into_inner())
            .into_iter()
            .map(|slot| slot.expect("every slot filled"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    #[serde(default)]
    pub use_case: Option<UseCase>,
    pub question: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow<T> {
    pub qa_id: String,
    pub use_case: Option<UseCase>,
    pub reference: String,
    pub record: RagRecord<T>,
}

/// Loads a QA set; errors name the offending line.
pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QaPair>> {
    let pairs: Vec<QaPair> = jsonl::read(path)?;
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Chunk, Span};
    use crate::embed::{stub_embed, StubEmbedder};
    use crate::generate::{EchoGenerator, Generation};
    use crate::store::StoredEntry;

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk {
            id: id.into(),
            source_id: "manual.txt".into(),
            page: 1,
            seq: 0,
            text: text.into(),
            char_span: Span::new(0, text.chars().count()),
        }
    }

    fn stub_store(texts: &[(&str, &str)]) -> VectorStore<f64> {
        let mut store = VectorStore::in_memory(256);
        let entries = texts
            .iter()
            .map(|(id, t)| StoredEntry {
                chunk: chunk(id, t),
                vector: stub_embed(t, 256).unwrap(),
            })
            .collect();
        store.upsert(entries).unwrap();
        store
    }

    struct Failing;

    impl Generator for Failing {
        fn model(&self) -> &str {
            "failing"
        }

        fn generate(&self, _: &str) -> Result<Generation> {
            Err(Error::Transport {
                attempts: 3,
                message: "connection refused".into(),
            })
        }
    }

    #[test]
    fn prompt_template() {
        assert_eq!(build_prompt("q", &[]), "Question: q\nAnswer:");
        let p = build_prompt("q", &["c1"]);
        assert_eq!(
            p,
            "Answer the question based only on the following context:\n\nc1\n\nQuestion: q\nAnswer:"
        );
        assert_eq!(p.matches("c1").count(), 1);
        let p = build_prompt("q", &["c1", "c2"]);
        assert!(p.contains("c1\n\n---\n\nc2"));
    }

    #[test]
    fn wc_self_retrieval_with_echo() {
        let store = stub_store(&[
            ("a", "reset the hub by holding the button"),
            ("b", "pair the lock using the companion app"),
        ]);
        let embedder = StubEmbedder::default();
        let pipeline = RagPipeline::new(&embedder, &store, &EchoGenerator);
        let rec = pipeline
            .answer(QueryRequest::new(
                "pair the lock using the companion app",
                Mode::Wc,
            ))
            .unwrap();
        assert_eq!(rec.retrieved[0].chunk_id, "b");
        assert_eq!(rec.retrieved[0].score, 1.0);
        assert_eq!(rec.answer, "pair the lock using the companion app");
        for hit in &rec.retrieved {
            assert!(rec
                .prompt
                .contains(&store.get(&hit.chunk_id).unwrap().chunk.text));
        }
    }

    #[test]
    fn nc_has_no_context() {
        let store = VectorStore::<f64>::in_memory(256);
        let embedder = StubEmbedder::default();
        let pipeline = RagPipeline::new(&embedder, &store, &EchoGenerator);
        let rec = pipeline
            .answer(QueryRequest::new("why?", Mode::Nc))
            .unwrap();
        assert!(rec.retrieved.is_empty());
        assert!(!rec.prompt.contains(CONTEXT_PREAMBLE.trim()));
        assert_eq!(rec.answer, "why?");
    }

    #[test]
    fn wc_against_empty_store_is_config_error() {
        let store = VectorStore::<f64>::in_memory(256);
        let embedder = StubEmbedder::default();
        let pipeline = RagPipeline::new(&embedder, &store, &EchoGenerator);
        assert!(matches!(
            pipeline.answer(QueryRequest::new("q", Mode::Wc)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            pipeline.answer(QueryRequest::new("  ", Mode::Nc)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn generation_failure_is_recorded_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let sink = Sink::open(dir.path().join("records.jsonl")).unwrap();
        let store = stub_store(&[("a", "text")]);
        let embedder = StubEmbedder::default();
        let pipeline = RagPipeline::new(&embedder, &store, &Failing).with_log(&sink);
        let rec = pipeline
            .answer(QueryRequest::new("text", Mode::Wc))
            .unwrap();
        assert!(rec.error.as_deref().unwrap().contains("connection refused"));
        let logged: Vec<RagRecord<f64>> = jsonl::read(sink.path()).unwrap();
        assert_eq!(logged, vec![rec]);
    }

    #[test]
    fn benchmark_keeps_order_under_parallelism() {
        let store = stub_store(&[
            ("a", "alpha beta"),
            ("b", "gamma delta"),
            ("c", "epsilon zeta"),
        ]);
        let embedder = StubEmbedder::default();
        let pipeline = RagPipeline::new(&embedder, &store, &EchoGenerator);
        let qa: Vec<QaPair> = (0..9)
            .map(|i| QaPair {
                id: format!("q{i}"),
                use_case: Some(UseCase::Troubleshooting),
                question: ["alpha beta", "gamma delta", "epsilon zeta"][i % 3].into(),
                reference: "r".into(),
            })
            .collect();
        let serial = pipeline.run_benchmark(&qa, Mode::Wc, 2, 1).unwrap();
        let parallel = pipeline.run_benchmark(&qa, Mode::Wc, 2, 4).unwrap();
        let ids = |rows: &[BenchmarkRow<f64>]| -> Vec<(String, Vec<String>)> {
            rows.iter()
                .map(|r| {
                    (
                        r.qa_id.clone(),
                        r.record
                            .retrieved
                            .iter()
                            .map(|h| h.chunk_id.clone())
                            .collect(),
                    )
                })
                .collect()
        };
        assert_eq!(ids(&serial), ids(&parallel));
        assert_eq!(serial[4].qa_id, "q4");
        assert!(pipeline.run_benchmark(&[], Mode::Nc, 1, 1).is_err());
    }

    #[test]
    fn qa_loading_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"1\",\"use_case\":\"maintenance\",\"question\":\"q\",\"reference\":\"r\"}\n\
             {\"id\":\"2\",\"use_case\":\"gardening\",\"question\":\"q\",\"reference\":\"r\"}\n",
        )
        .unwrap();
        assert!(matches!(load_qa(&path), Err(Error::Parse { line: 2, .. })));
    }
}
