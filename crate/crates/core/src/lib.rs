//! Retrieval-augmented question answering over IoT documentation and
//! textualized network-flow anomaly classification, with the evaluation
//! tooling (text-overlap metrics, classification reports, resource
//! accounting) used to compare them.
//!
//! The numeric modules are generic over [`Real`]; the aliases below fix the
//! scalar to `f64`.

pub mod classify;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod flow;
pub mod generate;
pub mod http;
pub mod ingest;
pub mod jsonl;
pub mod metrics;
pub mod rag;
pub mod resource;
pub mod scalar;
pub mod store;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Embedding = embed::EmbeddingVector<f64>;
pub type Store = store::VectorStore<f64>;
pub type Hit = store::Hit<f64>;
pub type RagRecord = rag::RagRecord<f64>;
pub type MetricScore = metrics::MetricScore<f64>;
pub type NbModel = classify::NbModel<f64>;
pub type Prediction = classify::Prediction<f64>;
pub type EvalReport = classify::EvalReport<f64>;
