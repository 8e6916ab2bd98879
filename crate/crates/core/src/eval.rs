//! Answer metrics, stage accuracies, overlap audit and dataset statistics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::AnswerVocab;
use crate::text::{align_char_span, char_len, normalize_answer, tokenize};
use crate::types::{Answer, CharSpan, InstanceRecord};

/// `min(#annotators who gave the prediction / 3, 1)`.
pub fn vqa_accuracy(predicted: &str, answers: &[Answer]) -> f64 {
    let pred = normalize_answer(predicted);
    if pred.is_empty() {
        return 0.0;
    }
    let humans: u32 = answers
        .iter()
        .filter(|a| normalize_answer(&a.answer) == pred)
        .map(|a| a.human_count)
        .sum();
    (humans as f64 / 3.0).min(1.0)
}

pub fn exact_match(predicted: &str, gold: &str) -> f64 {
    if normalize_answer(predicted) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Vqa,
    Exact,
}

impl Metric {
    /// Exact match when every record carries one reference answer.
    pub fn detect(records: &[InstanceRecord]) -> Self {
        if !records.is_empty() && records.iter().all(|r| r.answers.len() == 1) {
            Metric::Exact
        } else {
            Metric::Vqa
        }
    }

    pub fn score(self, predicted: Option<&str>, record: &InstanceRecord) -> f64 {
        let Some(pred) = predicted else { return 0.0 };
        match self {
            Metric::Vqa => vqa_accuracy(pred, &record.answers),
            Metric::Exact => record
                .answers
                .iter()
                .map(|a| exact_match(pred, &a.answer))
                .fold(0.0, f64::max),
        }
    }
}

/// One line of a predictions file. Reads pipeline output directly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(default, alias = "predicted_span", skip_serializing_if = "Option::is_none")]
    pub span: Option<CharSpan>,
    #[serde(default, alias = "predicted_object", skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default)]
    pub answer: Option<String>,
}

impl Prediction {
    /// The gold annotations of `record`, as if predicted perfectly.
    pub fn oracle(record: &InstanceRecord) -> Self {
        let best = record
            .answers
            .iter()
            .max_by(|a, b| a.human_count.cmp(&b.human_count).then(b.answer.cmp(&a.answer)));
        Prediction {
            id: record.id.clone(),
            span: record.gold_span.clone(),
            object: record.gold_object.clone(),
            answer: best.map(|a| a.answer.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_exact: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substitute: Option<bool>,
    pub search: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mode: String,
    pub metric: Metric,
    pub instances: usize,
    /// Stage scores are `None` when no prediction carries that stage.
    pub select_exact: Option<f64>,
    pub select_f1: Option<f64>,
    pub substitute: Option<f64>,
    pub search: f64,
    /// Substitute accuracy over instances whose span was selected exactly.
    pub substitute_given_select: Option<f64>,
    /// Search score over instances whose earlier stages were all correct.
    pub search_given_upstream: Option<f64>,
    pub overlap_percent: Option<f64>,
    pub baseline: Option<f64>,
    pub rows: Vec<EvalRow>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn token_range(question: &str, span: &CharSpan) -> Option<(usize, usize)> {
    let tokens = tokenize(question);
    let al = align_char_span(&tokens, span.start, span.end)?;
    Some((al.start, al.end))
}

/// Token-level F1 between two inclusive ranges.
fn range_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if lo > hi {
        return 0.0;
    }
    let common = (hi - lo + 1) as f64;
    let p = common / (pred.1 - pred.0 + 1) as f64;
    let r = common / (gold.1 - gold.0 + 1) as f64;
    2.0 * p * r / (p + r)
}

pub fn stage_accuracies(
    predictions: &[Prediction],
    gold: &[InstanceRecord],
    metric: Metric,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to evaluate".into()));
    }
    if predictions.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold records",
            predictions.len(),
            gold.len()
        )));
    }
    if let Some((p, g)) = predictions.iter().zip(gold).find(|(p, g)| p.id != g.id) {
        return Err(Error::Data(format!("prediction id {:?} is aligned with gold id {:?}", p.id, g.id)));
    }
    let scores_select = predictions.iter().any(|p| p.span.is_some());
    let scores_substitute = predictions.iter().any(|p| p.object.is_some());
    let rows: Vec<EvalRow> = predictions
        .iter()
        .zip(gold)
        .map(|(p, g)| {
            let (select_exact, select_f1) = match (&g.gold_span, scores_select) {
                (Some(gs), true) => {
                    let gr = token_range(&g.question, gs);
                    let pr = p.span.as_ref().and_then(|ps| token_range(&g.question, ps));
                    match (pr, gr) {
                        (Some(pr), Some(gr)) => (Some(pr == gr), Some(range_f1(pr, gr))),
                        _ => (Some(false), Some(0.0)),
                    }
                }
                _ => (None, None),
            };
            let substitute = match (&g.gold_object, scores_substitute) {
                (Some(go), true) => Some(
                    p.object
                        .as_deref()
                        .is_some_and(|o| normalize_answer(o) == normalize_answer(go)),
                ),
                _ => None,
            };
            EvalRow {
                id: g.id.clone(),
                select_exact,
                select_f1,
                substitute,
                search: metric.score(p.answer.as_deref(), g),
            }
        })
        .collect();
    let ratio = |flags: &mut dyn Iterator<Item = bool>| mean(flags.map(|b| if b { 1.0 } else { 0.0 }));
    let select_exact = ratio(&mut rows.iter().filter_map(|r| r.select_exact));
    let select_f1 = mean(rows.iter().filter_map(|r| r.select_f1));
    let substitute = ratio(&mut rows.iter().filter_map(|r| r.substitute));
    let substitute_given_select = ratio(
        &mut rows
            .iter()
            .filter(|r| r.select_exact == Some(true))
            .filter_map(|r| r.substitute),
    );
    let upstream_ok = |r: &EvalRow| r.select_exact != Some(false) && r.substitute != Some(false);
    let search_given_upstream = if scores_select || scores_substitute {
        mean(rows.iter().filter(|r| upstream_ok(r)).map(|r| r.search))
    } else {
        None
    };
    Ok(EvalReport {
        dataset: String::new(),
        mode: String::new(),
        metric,
        instances: rows.len(),
        select_exact,
        select_f1,
        substitute,
        search: mean(rows.iter().map(|r| r.search)).unwrap_or(0.0),
        substitute_given_select,
        search_given_upstream,
        overlap_percent: None,
        baseline: None,
        rows,
    })
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "dataset    {}", self.dataset);
        let _ = writeln!(out, "mode       {}", self.mode);
        let _ = writeln!(out, "metric     {:?}", self.metric);
        let _ = writeln!(out, "instances  {}", self.instances);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<28}{:>10}", "stage", "score");
        let lines = [
            ("select (exact span)", self.select_exact),
            ("select (overlap F1)", self.select_f1),
            ("substitute", self.substitute),
            ("search", Some(self.search)),
            ("substitute | select", self.substitute_given_select),
            ("search | upstream", self.search_given_upstream),
            ("train-test overlap %", self.overlap_percent),
            ("frequency baseline", self.baseline),
        ];
        for (name, v) in lines {
            let _ = writeln!(out, "{:<28}{:>10}", name, fmt(v));
        }
        out
    }
}

fn answer_set(records: &[InstanceRecord]) -> BTreeSet<String> {
    records
        .iter()
        .flat_map(|r| r.answers.iter().map(|a| normalize_answer(&a.answer)))
        .filter(|a| !a.is_empty())
        .collect()
}

/// Percentage of test instances with at least one gold answer that also
/// occurs among the train answers.
pub fn audit_overlap(train: &[InstanceRecord], test: &[InstanceRecord]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("overlap audit needs non-empty train and test splits".into()));
    }
    let seen = answer_set(train);
    let hits = test
        .iter()
        .filter(|r| r.answers.iter().any(|a| seen.contains(&normalize_answer(&a.answer))))
        .count();
    Ok(100.0 * hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub answer: String,
    pub score: f64,
}

/// Predict the most frequent train answer everywhere.
pub fn frequency_baseline(train: &[InstanceRecord], test: &[InstanceRecord], metric: Metric) -> Result<Baseline> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test split".into()));
    }
    let vocab = AnswerVocab::build(train, 1);
    let answer = vocab
        .answers()
        .first()
        .cloned()
        .ok_or_else(|| Error::InvalidArgument("train split has no answers".into()))?;
    let score = mean(test.iter().map(|r| metric.score(Some(&answer), r))).unwrap_or(0.0);
    Ok(Baseline { answer, score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub instances: usize,
    pub spans: usize,
    pub span_words_mean: f64,
    pub span_words_std: f64,
    pub span_chars_mean: f64,
    pub span_chars_std: f64,
    /// Over records with a gold object.
    pub objects: usize,
    pub detection_coverage_percent: f64,
    pub missing_object_percent: f64,
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn dataset_stats(records: &[InstanceRecord]) -> DatasetStats {
    let spans: Vec<&CharSpan> = records.iter().filter_map(|r| r.gold_span.as_ref()).collect();
    let words: Vec<f64> = spans.iter().map(|s| s.text.split_whitespace().count() as f64).collect();
    let chars: Vec<f64> = spans.iter().map(|s| char_len(&s.text) as f64).collect();
    let (wm, ws) = mean_std(&words);
    let (cm, cs) = mean_std(&chars);
    let with_object: Vec<&InstanceRecord> = records.iter().filter(|r| r.gold_object.is_some()).collect();
    let covered = with_object
        .iter()
        .filter(|r| r.has_detection(r.gold_object.as_deref().unwrap_or_default()))
        .count();
    let coverage = if with_object.is_empty() {
        0.0
    } else {
        100.0 * covered as f64 / with_object.len() as f64
    };
    DatasetStats {
        instances: records.len(),
        spans: spans.len(),
        span_words_mean: wm,
        span_words_std: ws,
        span_chars_mean: cm,
        span_chars_std: cs,
        objects: with_object.len(),
        detection_coverage_percent: coverage,
        missing_object_percent: if with_object.is_empty() { 0.0 } else { 100.0 - coverage },
    }
}
