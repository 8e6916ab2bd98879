//! JSON-lines and TSV readers/writers. Every writer goes through
//! [`write_atomic`], so a failed run never leaves a half-written artifact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{InstanceRecord, SnippetCache, Taxonomy};

/// Read one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(items)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Write to a temporary file in the target directory, then rename over
/// the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Load and validate a dataset file.
pub fn load_dataset(path: &Path) -> Result<Vec<InstanceRecord>> {
    let records: Vec<InstanceRecord> = read_jsonl(path)?;
    for (idx, record) in records.iter().enumerate() {
        record.validate().map_err(|e| match e {
            Error::Validation { field, message } => Error::Validation {
                field,
                message: format!("record {} ({:?}): {message}", idx + 1, record.id),
            },
            other => other,
        })?;
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[InstanceRecord]) -> Result<()> {
    write_jsonl(path, records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SnippetLine {
    question: String,
    snippets: Vec<String>,
}

pub fn load_snippet_cache(path: &Path) -> Result<SnippetCache> {
    let lines: Vec<SnippetLine> = read_jsonl(path)?;
    let mut cache = SnippetCache::new();
    for line in lines {
        if line.snippets.len() < crate::types::SNIPPETS_PER_QUESTION {
            log::debug!(
                "padding {} snippet(s) for {:?}",
                crate::types::SNIPPETS_PER_QUESTION - line.snippets.len(),
                line.question
            );
        }
        cache.insert(line.question, line.snippets);
    }
    Ok(cache)
}

pub fn save_snippet_cache(path: &Path, cache: &SnippetCache) -> Result<()> {
    let lines: Vec<SnippetLine> = cache
        .iter()
        .map(|(q, s)| SnippetLine {
            question: q.to_string(),
            snippets: s.snippets.clone(),
        })
        .collect();
    write_jsonl(path, &lines)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordLine {
    pub label: String,
    pub vector: Vec<f64>,
}

/// Parse `child<TAB>parent` lines. Blank lines and `#` comments are skipped.
pub fn parse_taxonomy_tsv(source: &str, path: &Path) -> Result<Taxonomy> {
    let mut tax = Taxonomy::new();
    for (idx, line) in source.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(child), Some(parent), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: "expected `child<TAB>parent`".into(),
            });
        };
        tax.add_edge(child, parent).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
    }
    Ok(tax)
}

pub fn load_taxonomy(tsv: &Path, coords: Option<&Path>) -> Result<Taxonomy> {
    let source = fs::read_to_string(tsv).map_err(|e| Error::io(tsv, e))?;
    let mut tax = parse_taxonomy_tsv(&source, tsv)?;
    if let Some(coords) = coords {
        for line in read_jsonl::<CoordLine>(coords)? {
            tax.set_coords(&line.label, line.vector)?;
        }
    }
    Ok(tax)
}

pub fn save_taxonomy(tsv: &Path, coords: Option<&Path>, tax: &Taxonomy) -> Result<()> {
    let mut out = String::new();
    for (child, parent) in tax.edges() {
        out.push_str(child);
        out.push('\t');
        out.push_str(parent);
        out.push('\n');
    }
    write_atomic(tsv, out.as_bytes())?;
    if let Some(coords) = coords {
        let lines: Vec<CoordLine> = tax
            .embedded_labels()
            .map(|(l, v)| CoordLine {
                label: l.to_string(),
                vector: v.to_vec(),
            })
            .collect();
        write_jsonl(coords, &lines)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub text: String,
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
    read_jsonl(path)
}
