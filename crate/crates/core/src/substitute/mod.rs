//! Substitution: choose the detected object that the selected span refers to
//! and rewrite the question with it.
//!
//! The span (anchor) and every detection, encoded inside its own rewritten
//! question, are projected into a shared space. Cosine distance to the
//! anchor and the taxonomy score are combined by a 2→1 linear layer into a
//! logit per detection.

pub mod hyperbolic;
pub mod losses;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hyperbolic::{hypernym_score, poincare_distance};
pub use losses::{bce_loss, combined_loss, cosine_distance, triplet_loss, LossConfig};

use crate::error::{Error, Result};
use crate::nn::encoder::{EncoderTrace, MixerEncoder, TokenEncoder, Vocab};
use crate::nn::train::{run_epochs, TrainConfig, TrainReport};
use crate::nn::{mean_rows, neg_log_sigmoid, sigmoid, Linear, Module};
use crate::text::{align_char_span, replace_chars, tokenize, Token, TokenAlignment};
use crate::types::{CharSpan, DetectedObject, InstanceRecord, Taxonomy};

pub const CHECKPOINT_KIND: &str = "substitute";

/// Two-layer projection `D -> hidden -> out` with a tanh in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNet {
    pub hidden: Linear,
    pub output: Linear,
}

impl ProjectionNet {
    pub fn new(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        ProjectionNet {
            hidden: Linear::new(rng, input, hidden),
            output: Linear::new(rng, hidden, output),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.forward_traced(x).0
    }

    /// Returns the output and the tanh activations.
    pub fn forward_traced(&self, x: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
        let act = self.hidden.forward(x).mapv(f64::tanh);
        (self.output.forward(act.view()), act)
    }

    pub fn backward(&mut self, x: ArrayView1<f64>, act: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
        let dact = self.output.backward(act, dy);
        let dpre = &dact * &act.mapv(|a| 1.0 - a * a);
        self.hidden.backward(x, dpre.view())
    }
}

impl Module for ProjectionNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.hidden.visit_params(f);
        self.output.visit_params(f);
    }
}

/// Linear `[cosine distance, hypernym score] -> logit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCombiner {
    pub layer: Linear,
}

impl FeatureCombiner {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        FeatureCombiner {
            layer: Linear::new(rng, 2, 1),
        }
    }

    pub fn logit(&self, distance: f64, hyper: f64) -> f64 {
        self.layer.forward(ndarray::arr1(&[distance, hyper]).view())[0]
    }

    /// Accumulates gradients; returns `dL/d(distance)`.
    pub fn backward(&mut self, distance: f64, hyper: f64, dlogit: f64) -> f64 {
        let dx = self
            .layer
            .backward(ndarray::arr1(&[distance, hyper]).view(), ndarray::arr1(&[dlogit]).view());
        dx[0]
    }
}

impl Module for FeatureCombiner {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.layer.visit_params(f);
    }
}

/// Rewrite `question` with `label` in place of `span`. Returns the new
/// question and the character span the label occupies in it.
pub fn reformulate(question: &str, span: &CharSpan, label: &str) -> Result<(String, CharSpan)> {
    let rewritten = replace_chars(question, span.start, span.end, label)
        .ok_or_else(|| Error::InvalidArgument(format!("span [{}, {}) out of bounds", span.start, span.end)))?;
    let end = span.start + label.chars().count();
    let label_span = CharSpan::from_source(&rewritten, span.start, end)?;
    Ok((rewritten, label_span))
}

fn aligned(tokens: &[Token], span: &CharSpan) -> Result<TokenAlignment> {
    align_char_span(tokens, span.start, span.end)
        .ok_or_else(|| Error::InvalidArgument(format!("span {:?} covers no token", span.text)))
}

/// Projected mean encoding of the span's tokens.
pub fn embed_span(
    question: &str,
    span: Option<&CharSpan>,
    encoder: &dyn TokenEncoder,
    projection: &ProjectionNet,
) -> Result<Array1<f64>> {
    let span = span.ok_or_else(|| Error::InvalidArgument("empty span".into()))?;
    span.validate_against(question, "span")?;
    let tokens = tokenize(question);
    let al = aligned(&tokens, span)?;
    let h = encoder.encode(&tokens);
    Ok(projection.forward(mean_rows(h.view(), al.start, al.end).view()))
}

/// Projected mean encoding of `label`'s tokens inside the rewritten question.
pub fn embed_candidate(
    question: &str,
    span: Option<&CharSpan>,
    label: &str,
    encoder: &dyn TokenEncoder,
    projection: &ProjectionNet,
) -> Result<Array1<f64>> {
    let span = span.ok_or_else(|| Error::InvalidArgument("empty span".into()))?;
    if label.trim().is_empty() {
        return Err(Error::InvalidArgument("empty object label".into()));
    }
    span.validate_against(question, "span")?;
    let (rewritten, label_span) = reformulate(question, span, label)?;
    embed_span(&rewritten, Some(&label_span), encoder, projection)
}

/// One detection prepared for scoring.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub label: String,
    pub tokens: Vec<Token>,
    pub range: (usize, usize),
    pub hyper: f64,
}

/// A question span with its candidate replacements.
#[derive(Debug, Clone)]
pub struct ScoringInput {
    pub tokens: Vec<Token>,
    pub range: (usize, usize),
    pub candidates: Vec<Candidate>,
}

impl ScoringInput {
    pub fn prepare(question: &str, span: &CharSpan, labels: &[&str], taxonomy: &Taxonomy) -> Result<Self> {
        span.validate_against(question, "span")?;
        let tokens = tokenize(question);
        let al = aligned(&tokens, span)?;
        let candidates = labels
            .iter()
            .map(|&label| {
                if label.trim().is_empty() {
                    return Err(Error::InvalidArgument("empty object label".into()));
                }
                let (rewritten, label_span) = reformulate(question, span, label)?;
                let cand_tokens = tokenize(&rewritten);
                let cal = aligned(&cand_tokens, &label_span)?;
                Ok(Candidate {
                    label: label.to_string(),
                    tokens: cand_tokens,
                    range: (cal.start, cal.end),
                    hyper: hypernym_score(&span.text, label, taxonomy),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoringInput {
            tokens,
            range: (al.start, al.end),
            candidates,
        })
    }
}

/// Per-candidate features and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub label: String,
    pub distance: f64,
    pub hyper: f64,
    pub logit: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstituteModel {
    pub encoder: MixerEncoder,
    pub projection: ProjectionNet,
    pub combiner: FeatureCombiner,
}

/// Per-forward values kept for backpropagation.
struct Side {
    trace: EncoderTrace,
    encoded: Array2<f64>,
    range: (usize, usize),
    pooled: Array1<f64>,
    act: Array1<f64>,
    projected: Array1<f64>,
}

/// Gradient of `1 - cos(a, b)` with respect to `a`.
fn cosine_distance_grad(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    let cos = a.dot(b) / (na * nb);
    -(b / (na * nb) - a * (cos / (na * na)))
}

impl SubstituteModel {
    pub fn new(seed: u64, vocab: Vocab, dim: usize, layers: usize, hidden: usize, out: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = MixerEncoder::new(&mut rng, vocab, dim, layers);
        let projection = ProjectionNet::new(&mut rng, dim, hidden, out);
        let combiner = FeatureCombiner::new(&mut rng);
        SubstituteModel {
            encoder,
            projection,
            combiner,
        }
    }

    /// Vocabulary over questions and detection labels.
    pub fn vocab_for(records: &[InstanceRecord]) -> Vocab {
        Vocab::build(records.iter().flat_map(|r| {
            std::iter::once(r.question.as_str())
                .chain(r.detections.iter().map(|d| d.label.as_str()))
                .chain(r.gold_object.as_deref())
        }))
    }

    fn side(&self, tokens: &[Token], range: (usize, usize)) -> Side {
        let (encoded, trace) = self.encoder.forward_traced(tokens);
        let pooled = mean_rows(encoded.view(), range.0, range.1);
        let (projected, act) = self.projection.forward_traced(pooled.view());
        Side {
            trace,
            encoded,
            range,
            pooled,
            act,
            projected,
        }
    }

    pub fn score(&self, input: &ScoringInput) -> Result<Vec<CandidateScore>> {
        let anchor = self.side(&input.tokens, input.range).projected;
        input
            .candidates
            .iter()
            .map(|c| {
                let emb = self.side(&c.tokens, c.range).projected;
                let distance = cosine_distance(anchor.view(), emb.view())?;
                let logit = self.combiner.logit(distance, c.hyper);
                Ok(CandidateScore {
                    label: c.label.clone(),
                    distance,
                    hyper: c.hyper,
                    logit,
                    probability: sigmoid(logit),
                })
            })
            .collect()
    }

    fn backprop_side(&mut self, side: &Side, dproj: &Array1<f64>, train_encoder: bool) {
        let dpooled = self
            .projection
            .backward(side.pooled.view(), side.act.view(), dproj.view());
        if train_encoder {
            let (s, e) = side.range;
            let mut dh = Array2::zeros(side.encoded.raw_dim());
            let share = &dpooled / (e - s + 1) as f64;
            for row in s..=e {
                dh.row_mut(row).assign(&share);
            }
            self.encoder.backward(&side.trace, dh.view());
        }
    }

    /// Combined loss for one instance, accumulating gradients.
    /// With no negatives the triplet term is taken as 0.
    pub fn accumulate(
        &mut self,
        input: &ScoringInput,
        gold: usize,
        loss: &LossConfig,
        train_encoder: bool,
    ) -> Result<f64> {
        let n = input.candidates.len();
        if gold >= n {
            return Err(Error::InvalidArgument(format!("gold index {gold} out of range")));
        }
        let anchor = self.side(&input.tokens, input.range);
        let cands: Vec<Side> = input
            .candidates
            .iter()
            .map(|c| self.side(&c.tokens, c.range))
            .collect();
        let distances = cands
            .iter()
            .map(|c| cosine_distance(anchor.projected.view(), c.projected.view()))
            .collect::<Result<Vec<_>>>()?;

        let mut ddist = vec![0.0; n];
        let negatives = n - 1;
        let mut triplet = 0.0;
        if negatives > 0 {
            for j in (0..n).filter(|&j| j != gold) {
                let hinge = distances[gold] - distances[j] + loss.margin;
                if hinge > 0.0 {
                    triplet += hinge;
                    ddist[gold] += loss.alpha / negatives as f64;
                    ddist[j] -= loss.alpha / negatives as f64;
                }
            }
            triplet /= negatives as f64;
        }

        let mut bce = 0.0;
        for (j, c) in input.candidates.iter().enumerate() {
            let z = self.combiner.logit(distances[j], c.hyper);
            let y = if j == gold { 1.0 } else { 0.0 };
            bce += if j == gold { neg_log_sigmoid(z) } else { neg_log_sigmoid(-z) };
            let dz = (1.0 - loss.alpha) * (sigmoid(z) - y) / n as f64;
            ddist[j] += self.combiner.backward(distances[j], c.hyper, dz);
        }
        bce /= n as f64;

        let mut danchor = Array1::zeros(anchor.projected.len());
        for (j, c) in cands.iter().enumerate() {
            if ddist[j] == 0.0 {
                continue;
            }
            danchor += &(cosine_distance_grad(&anchor.projected, &c.projected) * ddist[j]);
            let dc = cosine_distance_grad(&c.projected, &anchor.projected) * ddist[j];
            self.backprop_side(c, &dc, train_encoder);
        }
        self.backprop_side(&anchor, &danchor, train_encoder);

        Ok(loss.alpha * triplet + (1.0 - loss.alpha) * bce)
    }
}

impl Module for SubstituteModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.encoder.visit_params(f);
        self.projection.visit_params(f);
        self.combiner.visit_params(f);
    }
}

/// Index of the best candidate: highest probability, then higher detection
/// confidence, then lexicographically smaller label.
pub fn choose_candidate(probabilities: &[f64], detections: &[DetectedObject]) -> Option<usize> {
    (0..probabilities.len()).reduce(|best, j| {
        let ord = probabilities[j]
            .partial_cmp(&probabilities[best])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                detections[j]
                    .confidence
                    .partial_cmp(&detections[best].confidence)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then_with(|| detections[best].label.cmp(&detections[j].label));
        if ord == std::cmp::Ordering::Greater {
            j
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    /// `None` when the span was empty and the question passed through.
    pub label: Option<String>,
    pub reformulated: String,
    pub empty_span: bool,
    pub scores: Vec<CandidateScore>,
}

pub fn predict_object(
    question: &str,
    span: Option<&CharSpan>,
    detections: &[DetectedObject],
    model: &SubstituteModel,
    taxonomy: &Taxonomy,
) -> Result<Substitution> {
    if detections.is_empty() {
        return Err(Error::InvalidArgument("no detections to substitute".into()));
    }
    let Some(span) = span else {
        return Ok(Substitution {
            label: None,
            reformulated: question.to_string(),
            empty_span: true,
            scores: vec![],
        });
    };
    let labels: Vec<&str> = detections.iter().map(|d| d.label.as_str()).collect();
    let input = ScoringInput::prepare(question, span, &labels, taxonomy)?;
    let scores = model.score(&input)?;
    let probs: Vec<f64> = scores.iter().map(|s| s.probability).collect();
    let best = choose_candidate(&probs, detections).expect("non-empty detections");
    let label = detections[best].label.clone();
    let (reformulated, _) = reformulate(question, span, &label)?;
    Ok(Substitution {
        label: Some(label),
        reformulated,
        empty_span: false,
        scores,
    })
}

/// Training view of a record: the token-aligned gold span, the scoring
/// input and the gold candidate index. `None` if the record is unusable.
pub fn training_input(record: &InstanceRecord, taxonomy: &Taxonomy) -> Option<(ScoringInput, usize)> {
    let span = record.gold_span.as_ref()?;
    let gold = crate::text::normalize_answer(record.gold_object.as_deref()?);
    let gold_idx = record
        .detections
        .iter()
        .position(|d| crate::text::normalize_answer(&d.label) == gold)?;
    let tokens = tokenize(&record.question);
    let al = align_char_span(&tokens, span.start, span.end)?;
    let span = CharSpan::from_source(&record.question, tokens[al.start].start, tokens[al.end].end).ok()?;
    let labels: Vec<&str> = record.detections.iter().map(|d| d.label.as_str()).collect();
    let input = ScoringInput::prepare(&record.question, &span, &labels, taxonomy).ok()?;
    Some((input, gold_idx))
}

pub fn train_substitute(
    records: &[InstanceRecord],
    model: &mut SubstituteModel,
    taxonomy: &Taxonomy,
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<TrainReport> {
    loss.validate()?;
    let mut report = TrainReport {
        total: records.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    for r in records {
        match training_input(r, taxonomy) {
            Some(ex) => examples.push(ex),
            None => {
                log::warn!("skipping {:?}: needs a gold span and a detected gold object", r.id);
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
            let (input, gold) = &examples[i];
            m.accumulate(input, *gold, loss, train_encoder)
                .unwrap_or_else(|e| {
                    log::warn!("instance {i}: {e}");
                    0.0
                })
        },
        |m| {
            if !train_encoder {
                m.encoder.zero_grad();
            }
        },
    );
    Ok(report)
}

/// Fraction of usable records where the gold object is ranked first.
pub fn gold_object_accuracy(model: &SubstituteModel, records: &[InstanceRecord], taxonomy: &Taxonomy) -> f64 {
    let hits: Vec<bool> = records
        .iter()
        .filter_map(|r| {
            let (input, gold) = training_input(r, taxonomy)?;
            let scores = model.score(&input).ok()?;
            let probs: Vec<f64> = scores.iter().map(|s| s.probability).collect();
            Some(choose_candidate(&probs, &r.detections) == Some(gold))
        })
        .collect();
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}
