//! Directory ingestion: load, chunk, embed the chunks the store lacks, upsert.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_document, load_documents, Chunk, LoadFailure, Splitter};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::store::{StoredEntry, VectorStore};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks: usize,
    pub added: usize,
    /// Chunks whose id was already stored.
    pub skipped: usize,
    pub failures: Vec<LoadFailure>,
}

/// Chunks of every loadable document below `dir`, in source order.
pub fn collect_chunks(
    dir: impl AsRef<Path>,
    splitter: &Splitter,
) -> Result<(Vec<Chunk>, usize, Vec<LoadFailure>)> {
    let report = load_documents(dir)?;
    let chunks = report
        .documents
        .iter()
        .flat_map(|d| chunk_document(d, splitter))
        .collect();
    Ok((chunks, report.documents.len(), report.failures))
}

/// Embeds the chunks not yet in `store` and adds them. Nothing is added
/// if embedding fails part-way.
pub fn ingest_chunks<T: Real>(
    chunks: Vec<Chunk>,
    embedder: &dyn Embedder<T>,
    store: &mut VectorStore<T>,
) -> Result<(usize, usize)> {
    if embedder.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            actual: embedder.dim(),
        });
    }
    let total = chunks.len();
    let mut seen = std::collections::HashSet::new();
    let fresh: Vec<Chunk> = chunks
        .into_iter()
        .filter(|c| !store.contains(&c.id) && seen.insert(c.id.clone()))
        .collect();
    if fresh.is_empty() {
        return Ok((0, total));
    }
    let texts: Vec<&str> = fresh.iter().map(|c| c.text.as_str()).collect();
    let vectors = embedder.embed(&texts)?;
    let added = store.upsert(
        fresh
            .into_iter()
            .zip(vectors)
            .map(|(chunk, vector)| StoredEntry { chunk, vector })
            .collect(),
    )?;
    Ok((added, total - added))
}

pub fn ingest_dir<T: Real>(
    dir: impl AsRef<Path>,
    splitter: &Splitter,
    embedder: &dyn Embedder<T>,
    store: &mut VectorStore<T>,
) -> Result<IngestReport> {
    let (chunks, documents, failures) = collect_chunks(dir, splitter)?;
    let n = chunks.len();
    let (added, skipped) = ingest_chunks(chunks, embedder, store)?;
    Ok(IngestReport {
        documents,
        chunks: n,
        added,
        skipped,
        failures,
    })
}
