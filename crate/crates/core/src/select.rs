//! Span selection: which part of the question stands for something in the
//! image.
//!
//! Start and end positions are predicted independently by a linear head over
//! token encodings. When the predicted start falls after the predicted end,
//! the prediction is the empty span.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::encoder::{MixerEncoder, TokenEncoder, Vocab};
use crate::nn::train::{run_epochs, TrainConfig, TrainReport};
use crate::nn::{argmax_first, cross_entropy, Linear, Module};
use crate::text::{align_char_span, BasicTokenizer, Token, Tokenizer};
use crate::types::{CharSpan, InstanceRecord};

pub const CHECKPOINT_KIND: &str = "select";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    /// Inclusive token range, `None` for the empty span.
    pub span: Option<(usize, usize)>,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

impl SpanPrediction {
    pub fn from_logits(start_logits: Vec<f64>, end_logits: Vec<f64>) -> Self {
        let span = decode_span(&start_logits, &end_logits);
        SpanPrediction {
            span,
            start_logits,
            end_logits,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.span.is_none()
    }

    /// The predicted span as characters of `question`.
    pub fn char_span(&self, question: &str, tokens: &[Token]) -> Option<CharSpan> {
        let (s, e) = self.span?;
        CharSpan::from_source(question, tokens[s].start, tokens[e].end).ok()
    }
}

/// Independent argmax of start and end (lowest index on ties); empty if
/// start comes after end.
pub fn decode_span(start_logits: &[f64], end_logits: &[f64]) -> Option<(usize, usize)> {
    let s = argmax_first(start_logits)?;
    let e = argmax_first(end_logits)?;
    (s <= e).then_some((s, e))
}

/// Split per-token `D×2` head output into start and end logits.
pub fn head_logits(encoded: &Array2<f64>, head: &Linear) -> (Vec<f64>, Vec<f64>) {
    let logits = head.forward_rows(encoded.view());
    (
        logits.column(0).to_vec(),
        logits.column(1).to_vec(),
    )
}

pub fn select_span_with(
    question: &str,
    tokenizer: &dyn Tokenizer,
    encoder: &dyn TokenEncoder,
    head: &Linear,
) -> Result<SpanPrediction> {
    let tokens = tokenizer.tokenize(question);
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("question has no tokens".into()));
    }
    let (start, end) = head_logits(&encoder.encode(&tokens), head);
    Ok(SpanPrediction::from_logits(start, end))
}

pub fn select_span(question: &str, encoder: &dyn TokenEncoder, head: &Linear) -> Result<SpanPrediction> {
    select_span_with(question, &BasicTokenizer, encoder, head)
}

/// Sum of start and end cross entropies, with gradients w.r.t. both logit
/// vectors.
pub fn span_loss_grad(
    start_logits: &[f64],
    end_logits: &[f64],
    gold_start: usize,
    gold_end: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = start_logits.len();
    if end_logits.len() != n {
        return Err(Error::InvalidArgument("start/end logit lengths differ".into()));
    }
    if gold_start >= n || gold_end >= n {
        return Err(Error::InvalidArgument(format!(
            "gold span ({gold_start}, {gold_end}) out of range for {n} tokens"
        )));
    }
    let (ls, gs) = cross_entropy(start_logits, gold_start);
    let (le, ge) = cross_entropy(end_logits, gold_end);
    Ok((ls + le, gs, ge))
}

pub fn span_loss(start_logits: &[f64], end_logits: &[f64], gold_start: usize, gold_end: usize) -> Result<f64> {
    span_loss_grad(start_logits, end_logits, gold_start, gold_end).map(|(l, _, _)| l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectModel {
    pub encoder: MixerEncoder,
    pub head: Linear,
}

impl SelectModel {
    pub fn new(seed: u64, vocab: Vocab, dim: usize, layers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = MixerEncoder::new(&mut rng, vocab, dim, layers);
        let head = Linear::new(&mut rng, dim, 2);
        SelectModel { encoder, head }
    }

    /// Vocabulary over the questions of `records`.
    pub fn vocab_for(records: &[InstanceRecord]) -> Vocab {
        Vocab::build(records.iter().map(|r| r.question.as_str()))
    }

    pub fn predict(&self, question: &str) -> Result<SpanPrediction> {
        select_span(question, &self.encoder, &self.head)
    }

    /// Forward, loss, and gradient accumulation for one question.
    pub fn accumulate(&mut self, tokens: &[Token], gold: (usize, usize), train_encoder: bool) -> Result<f64> {
        let (h, trace) = self.encoder.forward_traced(tokens);
        let (start, end) = head_logits(&h, &self.head);
        let (loss, gs, ge) = span_loss_grad(&start, &end, gold.0, gold.1)?;
        let mut dlogits = Array2::zeros((tokens.len(), 2));
        dlogits.column_mut(0).assign(&ndarray::Array1::from(gs));
        dlogits.column_mut(1).assign(&ndarray::Array1::from(ge));
        let dh = self.head.backward_rows(h.view(), dlogits.view());
        if train_encoder {
            self.encoder.backward(&trace, dh.view());
        }
        Ok(loss)
    }

    fn drop_encoder_grads(&mut self) {
        self.encoder.zero_grad();
    }
}

impl Module for SelectModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.encoder.visit_params(f);
        self.head.visit_params(f);
    }
}

/// Token-level supervision for one record: `(tokens, (start, end), exact)`.
pub fn gold_token_span(record: &InstanceRecord) -> Option<(Vec<Token>, (usize, usize), bool)> {
    let span = record.gold_span.as_ref()?;
    let tokens = crate::text::tokenize(&record.question);
    let al = align_char_span(&tokens, span.start, span.end)?;
    Some((tokens, (al.start, al.end), al.exact))
}

pub fn train_select(records: &[InstanceRecord], model: &mut SelectModel, config: &TrainConfig) -> Result<TrainReport> {
    let mut report = TrainReport {
        total: records.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    for r in records {
        match gold_token_span(r) {
            Some((tokens, gold, exact)) => {
                if !exact {
                    report.adjusted += 1;
                }
                examples.push((tokens, gold));
            }
            None => {
                log::warn!("skipping {:?}: gold span missing or not alignable to tokens", r.id);
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
    let train_encoder = config.train_encoder;
    report.epoch_losses = run_epochs(
        model,
        examples.len(),
        config,
        |m, i| {
            let (tokens, gold) = &examples[i];
            m.accumulate(tokens, *gold, train_encoder)
                .expect("gold indices were aligned to tokens")
        },
        |m| {
            if !train_encoder {
                m.drop_encoder_grads();
            }
        },
    );
    Ok(report)
}

/// Fraction of `records` whose predicted token span equals the gold span.
pub fn exact_span_accuracy(model: &SelectModel, records: &[InstanceRecord]) -> f64 {
    let scored: Vec<bool> = records
        .iter()
        .filter_map(|r| {
            let (_, gold, _) = gold_token_span(r)?;
            let pred = model.predict(&r.question).ok()?;
            Some(pred.span == Some(gold))
        })
        .collect();
    if scored.is_empty() {
        return 0.0;
    }
    scored.iter().filter(|&&ok| ok).count() as f64 / scored.len() as f64
}

/// Mean encoding over a question's tokens, used as a question summary.
pub fn mean_encoding(encoder: &dyn TokenEncoder, tokens: &[Token]) -> ndarray::Array1<f64> {
    let h = encoder.encode(tokens);
    h.mean_axis(Axis(0))
        .unwrap_or_else(|| ndarray::Array1::zeros(encoder.dim()))
}
