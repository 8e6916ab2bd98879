//! Domain records shared by every stage.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

/// Number of snippets kept per question.
pub const SNIPPETS_PER_QUESTION: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub label: String,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

impl DetectedObject {
    pub fn new(label: impl Into<String>, confidence: f64) -> Self {
        DetectedObject {
            label: label.into(),
            confidence,
            bbox: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::validation("detections.label", "label is empty"));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::validation(
                "detections.confidence",
                format!("{} is outside [0, 1]", self.confidence),
            ));
        }
        Ok(())
    }
}

/// Character span (`end` exclusive) together with the text it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl CharSpan {
    /// Build a span by slicing `source`.
    pub fn from_source(source: &str, start: usize, end: usize) -> Result<Self> {
        let text = text::slice_chars(source, start, end).ok_or_else(|| {
            Error::validation(
                "span",
                format!("[{start}, {end}) is out of bounds for {source:?}"),
            )
        })?;
        Ok(CharSpan {
            start,
            end,
            text: text.to_string(),
        })
    }

    pub fn validate_against(&self, source: &str, field: &str) -> Result<()> {
        if self.start > self.end {
            return Err(Error::validation(field, "start is after end"));
        }
        match text::slice_chars(source, self.start, self.end) {
            Some(s) if s == self.text => Ok(()),
            Some(s) => Err(Error::validation(
                field,
                format!("text {:?} does not match source slice {s:?}", self.text),
            )),
            None => Err(Error::validation(
                field,
                format!("[{}, {}) is out of bounds", self.start, self.end),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub answer: String,
    #[serde(default = "one")]
    pub human_count: u32,
}

fn one() -> u32 {
    1
}

impl Answer {
    pub fn new(answer: impl Into<String>, human_count: u32) -> Self {
        Answer {
            answer: answer.into(),
            human_count,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub question: String,
    pub image_id: String,
    #[serde(default)]
    pub detections: Vec<DetectedObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_span: Option<CharSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reformulated_gold: Option<String>,
    #[serde(default)]
    pub answers: Vec<Answer>,
    pub split: Split,
    /// Paraphrase suggestions carried through from dataset construction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternate_questions: Vec<String>,
}

impl InstanceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("id", "id is empty"));
        }
        if let Some(span) = &self.gold_span {
            span.validate_against(&self.question, "gold_span")?;
        }
        for det in &self.detections {
            det.validate()?;
        }
        if let Some(obj) = &self.gold_object {
            if obj.trim().is_empty() {
                return Err(Error::validation("gold_object", "label is empty"));
            }
        }
        for a in &self.answers {
            if a.human_count < 1 {
                return Err(Error::validation(
                    "answers.human_count",
                    format!("answer {:?} has human_count 0", a.answer),
                ));
            }
        }
        Ok(())
    }

    /// Stricter check for records built with a single reference answer.
    pub fn validate_single_answer(&self) -> Result<()> {
        self.validate()?;
        if self.answers.len() != 1 {
            return Err(Error::validation(
                "answers",
                format!("expected exactly one answer, found {}", self.answers.len()),
            ));
        }
        Ok(())
    }

    /// Whether `label` is among the detections (normalized comparison).
    pub fn has_detection(&self, label: &str) -> bool {
        let label = text::normalize_answer(label);
        self.detections
            .iter()
            .any(|d| text::normalize_answer(&d.label) == label)
    }
}

/// Hyponym to hypernym edges plus optional Poincaré-ball coordinates.
/// Labels are stored lowercased.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    edges: BTreeMap<String, String>,
    coords: BTreeMap<String, Vec<f64>>,
}

impl Taxonomy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_edge(&mut self, child: &str, parent: &str) -> Result<()> {
        let child = child.trim().to_lowercase();
        let parent = parent.trim().to_lowercase();
        if child.is_empty() || parent.is_empty() {
            return Err(Error::validation("taxonomy", "empty label"));
        }
        if child == parent {
            return Err(Error::validation(
                "taxonomy",
                format!("self-loop on {child:?}"),
            ));
        }
        self.edges.insert(child, parent);
        Ok(())
    }

    pub fn set_coords(&mut self, label: &str, vector: Vec<f64>) -> Result<()> {
        let norm_sq: f64 = vector.iter().map(|x| x * x).sum();
        if vector.iter().any(|x| !x.is_finite()) || norm_sq >= 1.0 {
            return Err(Error::validation(
                "coords",
                format!("vector for {label:?} is not inside the open unit ball"),
            ));
        }
        self.coords.insert(label.trim().to_lowercase(), vector);
        Ok(())
    }

    pub fn parent(&self, label: &str) -> Option<&str> {
        self.edges.get(&label.to_lowercase()).map(String::as_str)
    }

    pub fn coords(&self, label: &str) -> Option<&[f64]> {
        self.coords.get(&label.to_lowercase()).map(Vec::as_slice)
    }

    pub fn contains(&self, label: &str) -> bool {
        let label = label.to_lowercase();
        self.edges.contains_key(&label)
            || self.edges.values().any(|p| *p == label)
            || self.coords.contains_key(&label)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(c, p)| (c.as_str(), p.as_str()))
    }

    pub fn embedded_labels(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.coords.iter().map(|(l, v)| (l.as_str(), v.as_slice()))
    }
}

/// Exactly [`SNIPPETS_PER_QUESTION`] snippets, with the number of padding
/// entries that were appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetList {
    pub snippets: Vec<String>,
    pub padded: usize,
}

impl SnippetList {
    pub fn padded(mut snippets: Vec<String>) -> Self {
        snippets.truncate(SNIPPETS_PER_QUESTION);
        let padded = SNIPPETS_PER_QUESTION - snippets.len();
        snippets.resize(SNIPPETS_PER_QUESTION, String::new());
        SnippetList { snippets, padded }
    }
}

/// Question text to its stored snippets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SnippetCache {
    entries: BTreeMap<String, SnippetList>,
}

impl SnippetCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, question: impl Into<String>, snippets: Vec<String>) {
        self.entries
            .insert(question.into(), SnippetList::padded(snippets));
    }

    /// Exact lookup first, then by normalized question text.
    pub fn get(&self, question: &str) -> Option<&SnippetList> {
        self.entries.get(question).or_else(|| {
            let key = text::normalize_answer(question);
            self.entries
                .iter()
                .find(|(q, _)| text::normalize_answer(q) == key)
                .map(|(_, v)| v)
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SnippetList)> {
        self.entries.iter().map(|(q, s)| (q.as_str(), s))
    }
}
