//! Exact cosine-similarity vector store with JSON Lines persistence.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, Span};
use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredEntry<T> {
    pub chunk: Chunk,
    pub vector: EmbeddingVector<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit<T> {
    pub chunk_id: String,
    pub score: T,
}

/// `dot(u, v) / sqrt(|u|^2 |v|^2)`, clamped to `[-1, 1]`.
///
/// Taking a single square root of the product makes `cosine(u, u)` exactly 1.
pub fn cosine<T: Real>(u: &EmbeddingVector<T>, v: &EmbeddingVector<T>) -> Result<T> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    let uu = u.dot(u);
    let vv = v.dot(v);
    if uu <= T::zero() || vv <= T::zero() {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let c = u.dot(v) / (uu * vv).sqrt();
    Ok(c.max(-T::one()).min(T::one()))
}

/// Orders hits by descending score, then ascending chunk id.
pub fn rank_order<T: Real>(a: &Hit<T>, b: &Hit<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    source: String,
    page: u32,
    seq: usize,
    text: String,
    vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct VectorStore<T> {
    dim: usize,
    entries: Vec<StoredEntry<T>>,
    index: HashMap<String, usize>,
    path: Option<PathBuf>,
}

impl<T: Real> PartialEq for VectorStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

impl<T: Real> VectorStore<T> {
    pub fn in_memory(dim: usize) -> Self {
        VectorStore {
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
            path: None,
        }
    }

    /// Opens the store file at `path`, or starts an empty store bound to it
    /// when the file does not exist yet.
    pub fn open(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        if path.exists() {
            let store = Self::load(path)?;
            if store.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: store.dim,
                });
            }
            Ok(store)
        } else {
            let mut store = Self::in_memory(dim);
            store.path = Some(path.to_path_buf());
            Ok(store)
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&StoredEntry<T>> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[StoredEntry<T>] {
        &self.entries
    }

    /// Adds entries whose chunk id is not yet present and returns how many
    /// were added. The whole batch is rejected if any vector has the wrong
    /// dimension or zero norm. File-backed stores are persisted afterwards.
    pub fn upsert(&mut self, batch: Vec<StoredEntry<T>>) -> Result<usize> {
        for entry in &batch {
            if entry.vector.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: entry.vector.dim(),
                });
            }
            if entry.vector.dot(&entry.vector) <= T::zero() {
                return Err(Error::Integrity(format!(
                    "entry {} has a zero vector",
                    entry.chunk.id
                )));
            }
        }
        let mut added = 0;
        for entry in batch {
            if self.index.contains_key(&entry.chunk.id) {
                continue;
            }
            self.index
                .insert(entry.chunk.id.clone(), self.entries.len());
            self.entries.push(entry);
            added += 1;
        }
        if added > 0 && self.path.is_some() {
            self.persist()?;
        }
        Ok(added)
    }

    /// Exact top-k by linear scan.
    pub fn top_k(&self, query: &EmbeddingVector<T>, k: usize) -> Result<Vec<Hit<T>>> {
        if k == 0 {
            return Err(Error::param("k", "must be at least 1"));
        }
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let mut hits = self
            .entries
            .iter()
            .map(|e| {
                Ok(Hit {
                    chunk_id: e.chunk.id.clone(),
                    score: cosine(query, &e.vector)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }

    /// Writes to the bound path. In-memory stores are a no-op.
    pub fn persist(&self) -> Result<()> {
        match &self.path {
            Some(path) => self.save(path),
            None => Ok(()),
        }
    }

    /// Atomically writes the store to `path` (temp file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            let header = Header {
                schema: SCHEMA_VERSION,
                dim: self.dim,
            };
            write_line(&mut w, &header).map_err(|e| Error::io(path, e))?;
            for e in &self.entries {
                let record = Record {
                    id: e.chunk.id.clone(),
                    source: e.chunk.source_id.clone(),
                    page: e.chunk.page,
                    seq: e.chunk.seq,
                    text: e.chunk.text.clone(),
                    vector: e.vector.to_f64(),
                    span: Some((e.chunk.char_span.start, e.chunk.char_span.end)),
                };
                write_line(&mut w, &record).map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    /// Loads a store file. Errors name the 1-based line of the first bad
    /// record.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "missing header".into(),
            })?
            .map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.schema != SCHEMA_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported schema {}", header.schema),
            });
        }
        let mut store = Self::in_memory(header.dim);
        store.path = Some(path.to_path_buf());
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: lineno,
                message: format!("record {i}: {message}"),
            };
            let record: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if record.vector.len() != header.dim {
                return Err(bad(format!(
                    "vector has {} components, header says {}",
                    record.vector.len(),
                    header.dim
                )));
            }
            if store.index.contains_key(&record.id) {
                return Err(bad(format!("duplicate id {}", record.id)));
            }
            let vector = EmbeddingVector::new(record.vector.into_iter().map(T::of).collect())
                .map_err(|e| bad(e.to_string()))?;
            let (start, end) = record.span.unwrap_or((0, record.text.chars().count()));
            let chunk = Chunk {
                id: record.id,
                source_id: record.source,
                page: record.page,
                seq: record.seq,
                text: record.text,
                char_span: Span::new(start, end),
            };
            store.index.insert(chunk.id.clone(), store.entries.len());
            store.entries.push(StoredEntry { chunk, vector });
        }
        Ok(store)
    }
}

fn write_line<S: Serialize>(w: &mut impl Write, value: &S) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}
