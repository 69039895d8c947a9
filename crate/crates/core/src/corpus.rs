//! Document loading, cleaning and recursive character chunking.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: usize = 800;
pub const DEFAULT_CHUNK_OVERLAP: usize = 80;

/// Separators tried in priority order. The empty separator is a hard
/// character split.
pub const SEPARATORS: [&str; 5] = ["\n\n", "\n", ". ", " ", ""];

const PAGE_BREAK: char = '\u{000C}';
const PAGE_MARKER_LINE: &str = "\\f";
const SUPPORTED_EXTENSIONS: [&str; 2] = ["txt", "md"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Page {
    pub number: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub source_id: String,
    pub pages: Vec<Page>,
}

impl Document {
    /// Builds a document from raw extracted text, splitting on page markers
    /// and cleaning every page.
    pub fn from_text(source_id: impl Into<String>, raw: &str) -> Self {
        let pages = split_pages(raw)
            .into_iter()
            .enumerate()
            .map(|(i, text)| Page {
                number: i as u32 + 1,
                text: clean(&text),
            })
            .collect();
        Document {
            source_id: source_id.into(),
            pages,
        }
    }
}

/// Half-open character range `[start, end)` into a page's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageChunk {
    pub span: Span,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub source_id: String,
    pub page: u32,
    pub seq: usize,
    pub text: String,
    pub char_span: Span,
}

pub fn chunk_id(source_id: &str, page: u32, seq: usize) -> String {
    format!("{source_id}:{page}:{seq}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadFailure {
    pub source_id: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub documents: Vec<Document>,
    pub failures: Vec<LoadFailure>,
}

/// Loads every `.txt` / `.md` file below `dir`, ordered by source id.
///
/// Files that are not valid UTF-8 are reported in `failures`; the rest
/// still load.
pub fn load_documents(dir: impl AsRef<Path>) -> Result<LoadReport> {
    let dir = dir.as_ref();
    fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;

    let mut report = LoadReport::default();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() || !is_supported(entry.path()) {
            continue;
        }
        let source_id = source_id_for(dir, entry.path());
        match fs::read(entry.path()) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(raw) => report.documents.push(Document::from_text(source_id, &raw)),
                Err(e) => {
                    log::warn!("skipping {source_id}: {e}");
                    report.failures.push(LoadFailure {
                        source_id,
                        message: format!("invalid UTF-8: {e}"),
                    });
                }
            },
            Err(e) => report.failures.push(LoadFailure {
                source_id,
                message: e.to_string(),
            }),
        }
    }
    report
        .documents
        .sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(report)
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            SUPPORTED_EXTENSIONS
                .iter()
                .any(|s| s.eq_ignore_ascii_case(e))
        })
        .unwrap_or(false)
}

fn source_id_for(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Splits raw text into page sections. A form feed or a line consisting
/// solely of `\f` starts a new page; a trailing empty section is dropped.
pub fn split_pages(raw: &str) -> Vec<String> {
    let mut normalized = String::with_capacity(raw.len());
    for line in raw.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if body == PAGE_MARKER_LINE {
            normalized.push(PAGE_BREAK);
        } else {
            normalized.push_str(line);
        }
    }
    let mut pages: Vec<String> = normalized.split(PAGE_BREAK).map(str::to_owned).collect();
    if pages.len() > 1 && pages.last().is_some_and(|p| p.trim().is_empty()) {
        pages.pop();
    }
    pages
}

/// Three or more newlines separated only by spaces or tabs.
fn blank_run() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n(?:[ \t]*\n){2,}").expect("static regex"))
}

/// Removes control characters except newline and tab, collapses runs of
/// blank lines to a single blank line, and trims. Idempotent.
pub fn clean(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|&c| c == '\n' || c == '\t' || !c.is_control())
        .collect();
    blank_run().replace_all(&stripped, "\n\n").trim().to_owned()
}

/// Recursive character splitter with character-measured overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Splitter {
    chunk_size: usize,
    overlap: usize,
}

impl Default for Splitter {
    fn default() -> Self {
        Splitter {
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_CHUNK_OVERLAP,
        }
    }
}

impl Splitter {
    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::param("chunk_size", "must be positive"));
        }
        if overlap >= chunk_size {
            return Err(Error::param(
                "overlap",
                format!("{overlap} must be smaller than chunk_size {chunk_size}"),
            ));
        }
        Ok(Splitter {
            chunk_size,
            overlap,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    /// Splits one cleaned page into overlapping chunks.
    pub fn split(&self, text: &str) -> Vec<PageChunk> {
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Vec::new();
        }
        let separators: Vec<Vec<char>> = SEPARATORS.iter().map(|s| s.chars().collect()).collect();
        let mut pieces = Vec::new();
        collect_pieces(
            &chars,
            0,
            chars.len(),
            &separators,
            self.chunk_size,
            &mut pieces,
        );
        self.merge(&chars, &pieces)
    }

    /// Greedily packs contiguous pieces. A new chunk starts at the earliest
    /// piece boundary inside the predecessor's last `overlap` characters
    /// that still leaves room for the next piece.
    fn merge(&self, chars: &[char], pieces: &[Span]) -> Vec<PageChunk> {
        let total = chars.len();
        let mut out = Vec::new();
        let mut first = 0;
        loop {
            let start = pieces[first].start;
            let mut next = first;
            let mut end = start;
            while next < pieces.len() && pieces[next].end - start <= self.chunk_size {
                end = pieces[next].end;
                next += 1;
            }
            let span = Span::new(start, end);
            out.push(PageChunk {
                span,
                text: chars[start..end].iter().collect(),
            });
            if end == total {
                break;
            }
            let limit = pieces[next].end;
            let floor = end.saturating_sub(self.overlap);
            first = (first + 1..=next)
                .find(|&m| pieces[m].start >= floor && limit - pieces[m].start <= self.chunk_size)
                .unwrap_or(next);
        }
        out
    }
}

/// Splits `[start, end)` into contiguous pieces no longer than `size`,
/// keeping each separator attached to the piece it terminates.
fn collect_pieces(
    chars: &[char],
    start: usize,
    end: usize,
    separators: &[Vec<char>],
    size: usize,
    out: &mut Vec<Span>,
) {
    if end - start <= size {
        out.push(Span::new(start, end));
        return;
    }
    for (i, sep) in separators.iter().enumerate() {
        if sep.is_empty() {
            out.extend((start..end).map(|p| Span::new(p, p + 1)));
            return;
        }
        let cuts = separator_cuts(&chars[start..end], sep);
        if cuts.is_empty() {
            continue;
        }
        let mut from = start;
        for cut in cuts
            .into_iter()
            .map(|c| c + start)
            .chain(std::iter::once(end))
        {
            if cut <= from {
                continue;
            }
            if cut - from <= size {
                out.push(Span::new(from, cut));
            } else {
                collect_pieces(chars, from, cut, &separators[i + 1..], size, out);
            }
            from = cut;
        }
        return;
    }
    // Unreachable with a trailing empty separator; fall back to one piece
    // per character all the same.
    out.extend((start..end).map(|p| Span::new(p, p + 1)));
}

/// Offsets just past each non-overlapping occurrence of `sep`.
fn separator_cuts(chars: &[char], sep: &[char]) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut i = 0;
    while i + sep.len() <= chars.len() {
        if &chars[i..i + sep.len()] == sep {
            i += sep.len();
            cuts.push(i);
        } else {
            i += 1;
        }
    }
    cuts
}

/// Convenience wrapper over [`Splitter`].
pub fn chunk_page(text: &str, chunk_size: usize, overlap: usize) -> Result<Vec<PageChunk>> {
    Ok(Splitter::new(chunk_size, overlap)?.split(text))
}

/// Assigns `source:page:seq` identifiers; `seq` restarts at 0 on each page.
pub fn assign_ids(source_id: &str, page_chunks: &[(u32, Vec<PageChunk>)]) -> Vec<Chunk> {
    page_chunks
        .iter()
        .flat_map(|(page, chunks)| {
            chunks.iter().enumerate().map(move |(seq, c)| Chunk {
                id: chunk_id(source_id, *page, seq),
                source_id: source_id.to_owned(),
                page: *page,
                seq,
                text: c.text.clone(),
                char_span: c.span,
            })
        })
        .collect()
}

pub fn chunk_document(document: &Document, splitter: &Splitter) -> Vec<Chunk> {
    let per_page: Vec<(u32, Vec<PageChunk>)> = document
        .pages
        .iter()
        .map(|p| (p.number, splitter.split(&p.text)))
        .collect();
    assign_ids(&document.source_id, &per_page)
}
