//! Snippet retrieval: a cache of stored snippets and a local BM25 index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CorpusDoc;
use crate::text::tokenize;
use crate::types::{SnippetCache, SnippetList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalSource {
    Cache,
    Index,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub snippets: SnippetList,
    pub source: RetrievalSource,
}

impl Retrieved {
    /// True when nothing real was found.
    pub fn is_all_padding(&self) -> bool {
        self.snippets.snippets.iter().all(|s| s.trim().is_empty())
    }
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, question: &str) -> Result<Retrieved>;
}

impl Retriever for SnippetCache {
    fn retrieve(&self, question: &str) -> Result<Retrieved> {
        self.get(question)
            .map(|s| Retrieved {
                snippets: s.clone(),
                source: RetrievalSource::Cache,
            })
            .ok_or_else(|| Error::RetrievalMiss(question.to_string()))
    }
}

fn terms(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.text.chars().any(char::is_alphanumeric))
        .map(|t| t.text.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexedDoc {
    doc_id: String,
    text: String,
    length: usize,
}

/// Okapi BM25 over a fixed corpus. Documents are stored sorted by id, so
/// the index does not depend on insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<IndexedDoc>,
    /// term -> (doc position, term frequency)
    postings: BTreeMap<String, Vec<(usize, usize)>>,
    avg_length: f64,
}

impl Bm25Index {
    pub fn build(corpus: &[CorpusDoc], params: Bm25Params) -> Result<Self> {
        let mut sorted: Vec<&CorpusDoc> = corpus.iter().collect();
        sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(w) = sorted.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(Error::Data(format!("duplicate doc_id {:?}", w[0].doc_id)));
        }
        let mut docs = Vec::with_capacity(sorted.len());
        let mut postings: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for (pos, doc) in sorted.iter().enumerate() {
            let doc_terms = terms(&doc.text);
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for t in &doc_terms {
                *counts.entry(t.clone()).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((pos, tf));
            }
            docs.push(IndexedDoc {
                doc_id: doc.doc_id.clone(),
                text: doc.text.clone(),
                length: doc_terms.len(),
            });
        }
        let avg_length = if docs.is_empty() {
            0.0
        } else {
            docs.iter().map(|d| d.length).sum::<usize>() as f64 / docs.len() as f64
        };
        Ok(Bm25Index {
            params,
            docs,
            postings,
            avg_length,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5)).ln_1p()
    }

    /// Documents with a positive score, best first; ties by doc id.
    pub fn search(&self, query: &str, limit: usize) -> Vec<(&str, f64)> {
        let mut query_terms = terms(query);
        query_terms.sort();
        query_terms.dedup();
        let mut scores = vec![0.0; self.docs.len()];
        let Bm25Params { k1, b } = self.params;
        for term in &query_terms {
            let Some(posting) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(posting.len());
            for &(pos, tf) in posting {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.docs[pos].length as f64 / self.avg_length.max(f64::MIN_POSITIVE);
                scores[pos] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .collect();
        // docs are sorted by id, so position order is id order
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
            .into_iter()
            .take(limit)
            .map(|(pos, s)| (self.docs[pos].doc_id.as_str(), s))
            .collect()
    }

    fn text_of(&self, doc_id: &str) -> &str {
        let pos = self
            .docs
            .binary_search_by(|d| d.doc_id.as_str().cmp(doc_id))
            .expect("doc id from this index");
        &self.docs[pos].text
    }
}

impl Retriever for Bm25Index {
    fn retrieve(&self, question: &str) -> Result<Retrieved> {
        let hits: Vec<String> = self
            .search(question, crate::types::SNIPPETS_PER_QUESTION)
            .into_iter()
            .map(|(id, _)| self.text_of(id).to_string())
            .collect();
        let snippets = SnippetList::padded(hits);
        if snippets.padded == crate::types::SNIPPETS_PER_QUESTION {
            log::warn!("no indexed document matches {question:?}");
        }
        Ok(Retrieved {
            snippets,
            source: RetrievalSource::Index,
        })
    }
}

/// Cache first, then the local index.
#[derive(Debug, Clone, Default)]
pub struct ChainRetriever {
    pub cache: Option<SnippetCache>,
    pub index: Option<Bm25Index>,
}

impl Retriever for ChainRetriever {
    fn retrieve(&self, question: &str) -> Result<Retrieved> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.retrieve(question).ok()) {
            return Ok(hit);
        }
        match &self.index {
            Some(index) => index.retrieve(question),
            None => Err(Error::RetrievalMiss(question.to_string())),
        }
    }
}
