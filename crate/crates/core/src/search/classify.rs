//! Classification over the most frequent training answers.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{concatenate, Array1, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregate::{mrc_mult, AttentionAggregator};
use super::reader::{mrc_sing, Reader};
use crate::error::{Error, Result};
use crate::nn::train::{run_epochs, TrainConfig, TrainReport};
use crate::nn::{cross_entropy, Linear, Module};
use crate::text::normalize_answer;
use crate::types::InstanceRecord;

pub const CHECKPOINT_KIND: &str = "classifier";
pub const DEFAULT_K: usize = 1084;
pub const DEFAULT_K_LARGE: usize = 2048;

/// The `k` most frequent normalized answers. Each instance counts an answer
/// once, however many annotators gave it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerVocab {
    answers: Vec<String>,
}

impl AnswerVocab {
    pub fn build(records: &[InstanceRecord], k: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for r in records {
            let distinct: BTreeSet<String> = r
                .answers
                .iter()
                .map(|a| normalize_answer(&a.answer))
                .filter(|a| !a.is_empty())
                .collect();
            for a in distinct {
                *counts.entry(a).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        // BTreeMap order is lexicographic and the sort is stable
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        AnswerVocab {
            answers: ranked.into_iter().take(k).map(|(a, _)| a).collect(),
        }
    }

    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = answers.iter().collect();
        if unique.len() != answers.len() {
            return Err(Error::validation("answers", "duplicate vocabulary entry"));
        }
        Ok(AnswerVocab { answers })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        let norm = normalize_answer(answer);
        self.answers.iter().position(|a| *a == norm)
    }

    /// Class index for a record: its most frequent in-vocabulary answer by
    /// annotator count, ties lexicographic.
    pub fn target(&self, record: &InstanceRecord) -> Option<usize> {
        let mut votes: BTreeMap<String, u32> = BTreeMap::new();
        for a in &record.answers {
            *votes.entry(normalize_answer(&a.answer)).or_default() += a.human_count;
        }
        let mut best: Option<(u32, usize)> = None;
        for (answer, n) in votes {
            if let Some(idx) = self.index_of(&answer) {
                if best.is_none_or(|(b, _)| n > b) {
                    best = Some((n, idx));
                }
            }
        }
        best.map(|(_, idx)| idx)
    }
}

/// Merges a question representation with an answer representation into
/// one logit per vocabulary entry.
pub trait Fusion {
    fn logits(&self, question: ArrayView1<f64>, answer: ArrayView1<f64>) -> Array1<f64>;
    fn classes(&self) -> usize;
}

/// `[q; a] -> tanh(Linear) -> Linear(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatMlpFusion {
    pub hidden: Linear,
    pub output: Linear,
}

impl ConcatMlpFusion {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize, classes: usize) -> Self {
        ConcatMlpFusion {
            hidden: Linear::new(rng, 2 * dim, hidden),
            output: Linear::new(rng, hidden, classes),
        }
    }

    fn joint(q: ArrayView1<f64>, a: ArrayView1<f64>) -> Array1<f64> {
        concatenate(Axis(0), &[q, a]).expect("1-d vectors")
    }

    /// Returns `(dq, da)`.
    pub fn backward(
        &mut self,
        q: ArrayView1<f64>,
        a: ArrayView1<f64>,
        dlogits: ArrayView1<f64>,
    ) -> (Array1<f64>, Array1<f64>) {
        let x = Self::joint(q, a);
        let act = self.hidden.forward(x.view()).mapv(f64::tanh);
        let dact = self.output.backward(act.view(), dlogits);
        let dpre = dact * act.mapv(|t| 1.0 - t * t);
        let dx = self.hidden.backward(x.view(), dpre.view());
        let d = q.len();
        (dx.slice(ndarray::s![..d]).to_owned(), dx.slice(ndarray::s![d..]).to_owned())
    }
}

impl Fusion for ConcatMlpFusion {
    fn logits(&self, q: ArrayView1<f64>, a: ArrayView1<f64>) -> Array1<f64> {
        let act = self.hidden.forward(Self::joint(q, a).view()).mapv(f64::tanh);
        self.output.forward(act.view())
    }

    fn classes(&self) -> usize {
        self.output.output_dim()
    }
}

impl Module for ConcatMlpFusion {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.hidden.visit_params(f);
        self.output.visit_params(f);
    }
}

/// Highest logit; equal logits go to the lexicographically smaller answer.
pub fn argmax_label<'a>(logits: &[f64], vocab: &'a AnswerVocab) -> Result<&'a str> {
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("empty answer vocabulary".into()));
    }
    if logits.len() != vocab.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logits for {} answers",
            logits.len(),
            vocab.len()
        )));
    }
    let mut best = 0;
    for i in 1..logits.len() {
        let better = logits[i] > logits[best]
            || (logits[i] == logits[best] && vocab.answers[i] < vocab.answers[best]);
        if better {
            best = i;
        }
    }
    Ok(&vocab.answers[best])
}

pub fn classify<'a>(
    question_rep: ArrayView1<f64>,
    answer_rep: ArrayView1<f64>,
    vocab: &'a AnswerVocab,
    fusion: &dyn Fusion,
) -> Result<&'a str> {
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("empty answer vocabulary".into()));
    }
    let logits = fusion.logits(question_rep, answer_rep);
    argmax_label(logits.as_slice().expect("contiguous"), vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sing,
    Mult,
}

/// Classifier inputs read off a frozen reader: the question summary and
/// the span representations to pool (one for `sing`).
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub question: Array1<f64>,
    pub spans: Vec<Array1<f64>>,
}

pub fn features<S: AsRef<str>>(
    question: &str,
    snippets: &[S],
    reader: &Reader,
    aggregation: Aggregation,
) -> Features {
    let spans = match aggregation {
        Aggregation::Sing => vec![mrc_sing(question, snippets, reader).rep],
        Aggregation::Mult => {
            // weights are recomputed from the classifier's own query
            let read = mrc_mult(question, snippets, reader, &AttentionAggregator::uniform(reader.dim()));
            let reps = read.span_reps();
            if reps.is_empty() {
                vec![Array1::zeros(reader.dim())]
            } else {
                reps
            }
        }
    };
    Features {
        question: reader.question_rep(question),
        spans,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerClassifier {
    pub vocab: AnswerVocab,
    pub fusion: ConcatMlpFusion,
    pub aggregator: AttentionAggregator,
    pub aggregation: Aggregation,
}

impl AnswerClassifier {
    pub fn new(seed: u64, vocab: AnswerVocab, dim: usize, hidden: usize, aggregation: Aggregation) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::InvalidArgument("empty answer vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = ConcatMlpFusion::new(&mut rng, dim, hidden, vocab.len());
        let aggregator = AttentionAggregator::new(&mut rng, dim);
        Ok(AnswerClassifier {
            vocab,
            fusion,
            aggregator,
            aggregation,
        })
    }

    fn answer_rep(&self, f: &Features) -> (Vec<f64>, Array1<f64>) {
        match self.aggregation {
            Aggregation::Sing => (vec![1.0], f.spans[0].clone()),
            Aggregation::Mult => self.aggregator.aggregate(&f.spans),
        }
    }

    pub fn logits(&self, f: &Features) -> Array1<f64> {
        let (_, a) = self.answer_rep(f);
        self.fusion.logits(f.question.view(), a.view())
    }

    pub fn predict(&self, f: &Features) -> Result<&str> {
        let (_, a) = self.answer_rep(f);
        classify(f.question.view(), a.view(), &self.vocab, &self.fusion)
    }

    /// Cross entropy against `target`; accumulates gradients.
    pub fn accumulate(&mut self, f: &Features, target: usize) -> f64 {
        let (w, a) = self.answer_rep(f);
        let logits = self.fusion.logits(f.question.view(), a.view());
        let (loss, grad) = cross_entropy(logits.as_slice().expect("contiguous"), target);
        let (_, da) = self
            .fusion
            .backward(f.question.view(), a.view(), Array1::from(grad).view());
        if self.aggregation == Aggregation::Mult {
            self.aggregator.backward(&f.spans, &w, &da);
        }
        loss
    }
}

impl Module for AnswerClassifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.fusion.visit_params(f);
        self.aggregator.visit_params(f);
    }
}

/// A record's question for classification: the gold reformulation if
/// present, else the original question.
pub fn classifier_question(record: &InstanceRecord) -> &str {
    record.reformulated_gold.as_deref().unwrap_or(&record.question)
}

/// Train fusion (and the attention query under `mult`) on precomputed
/// features. Records whose answers are all outside the vocabulary are
/// skipped.
pub fn train_classifier(
    records: &[InstanceRecord],
    features: &[Features],
    model: &mut AnswerClassifier,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if records.len() != features.len() {
        return Err(Error::InvalidArgument("one feature set per record required".into()));
    }
    let mut report = TrainReport {
        total: records.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    for (r, f) in records.iter().zip(features) {
        match model.vocab.target(r) {
            Some(t) => examples.push((f, t)),
            None => {
                report.skipped += 1;
                report.skipped_ids.push(r.id.clone());
            }
        }
    }
    report.used = examples.len();
    if examples.is_empty() {
        return Err(Error::NoUsableInstances {
            skipped: report.skipped,
            total: report.total,
        });
    }
    report.epoch_losses = run_epochs(
        model,
        examples.len(),
        config,
        |m, i| m.accumulate(examples[i].0, examples[i].1),
        |m| {
            if m.aggregation == Aggregation::Sing {
                m.aggregator.zero_grad();
            }
        },
    );
    Ok(report)
}
