//! Attention pooling over per-snippet answer spans.

use ndarray::{Array1, Ix1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::reader::{Context, ReadSpan, Reader};
use crate::nn::{argmax_first, normal_vector, softmax, Module, Param};

/// Softmax over attention scores.
pub fn attention_weights(scores: &[f64]) -> Vec<f64> {
    softmax(scores)
}

/// Learned query vector; a span's weight is `softmax(q · r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAggregator {
    pub query: Param<Ix1>,
}

impl AttentionAggregator {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        AttentionAggregator {
            query: Param::new(normal_vector(rng, dim, 0.1)),
        }
    }

    /// Zero query: uniform weights.
    pub fn uniform(dim: usize) -> Self {
        AttentionAggregator {
            query: Param::new(Array1::zeros(dim)),
        }
    }

    pub fn weights(&self, reps: &[Array1<f64>]) -> Vec<f64> {
        let scores: Vec<f64> = reps.iter().map(|r| self.query.value.dot(r)).collect();
        attention_weights(&scores)
    }

    /// Weights and the weighted sum of `reps`.
    pub fn aggregate(&self, reps: &[Array1<f64>]) -> (Vec<f64>, Array1<f64>) {
        let w = self.weights(reps);
        let mut out = Array1::zeros(self.query.value.len());
        for (wj, r) in w.iter().zip(reps) {
            out.scaled_add(*wj, r);
        }
        (w, out)
    }

    /// Accumulate the query gradient given `dL/d(pooled)`.
    pub fn backward(&mut self, reps: &[Array1<f64>], weights: &[f64], dpooled: &Array1<f64>) {
        let dw: Vec<f64> = reps.iter().map(|r| r.dot(dpooled)).collect();
        let mean: f64 = weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
        for ((w, d), r) in weights.iter().zip(&dw).zip(reps) {
            self.query.grad.scaled_add(w * (d - mean), r);
        }
    }
}

impl Module for AttentionAggregator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.query.visit(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultRead {
    /// Text of the highest-weight span, `None` if every snippet was empty.
    pub answer: Option<String>,
    pub rep: Array1<f64>,
    /// Per-snippet reads, sentinels included.
    pub spans: Vec<ReadSpan>,
    /// Attention weight per snippet; `None` for sentinels.
    pub weights: Vec<Option<f64>>,
}

impl MultRead {
    /// Representations of the non-sentinel spans, in snippet order.
    pub fn span_reps(&self) -> Vec<Array1<f64>> {
        self.spans
            .iter()
            .filter(|s| !s.is_sentinel())
            .map(|s| s.rep.clone())
            .collect()
    }
}

/// Read each snippet separately and pool the resulting spans.
pub fn mrc_mult<S: AsRef<str>>(
    question: &str,
    snippets: &[S],
    reader: &Reader,
    aggregator: &AttentionAggregator,
) -> MultRead {
    let spans: Vec<ReadSpan> = snippets
        .iter()
        .map(|s| reader.read(question, &Context::single(s.as_ref())))
        .collect();
    let live: Vec<usize> = (0..spans.len()).filter(|&i| !spans[i].is_sentinel()).collect();
    if live.is_empty() {
        return MultRead {
            answer: None,
            rep: Array1::zeros(reader.dim()),
            weights: vec![None; spans.len()],
            spans,
        };
    }
    let reps: Vec<Array1<f64>> = live.iter().map(|&i| spans[i].rep.clone()).collect();
    let (w, rep) = aggregator.aggregate(&reps);
    let mut weights = vec![None; spans.len()];
    for (k, &i) in live.iter().enumerate() {
        weights[i] = Some(w[k]);
    }
    let best = live[argmax_first(&w).expect("non-empty")];
    MultRead {
        answer: spans[best].answer.clone(),
        rep,
        spans,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::encoder::Vocab;
    use crate::search::reader::mrc_sing;
    use ndarray::array;

    #[test]
    fn singleton_gets_all_weight() {
        let agg = AttentionAggregator {
            query: Param::new(array![0.3, -0.2]),
        };
        let (w, rep) = agg.aggregate(&[array![1.0, 2.0]]);
        assert_eq!(w, vec![1.0]);
        assert_eq!(rep, array![1.0, 2.0]);
    }

    #[test]
    fn equal_scores_average() {
        let agg = AttentionAggregator {
            query: Param::new(array![1.0, 0.0]),
        };
        let (w, rep) = agg.aggregate(&[array![2.0, 0.0], array![2.0, 4.0]]);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        assert!((&rep - &array![2.0, 2.0]).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn three_span_weights_match_manual_softmax() {
        let agg = AttentionAggregator {
            query: Param::new(array![1.0, 0.5]),
        };
        let reps = [array![1.0, 0.0], array![0.0, 2.0], array![-1.0, 2.0]];
        // scores 1, 1, 0 -> e/(2e+1), e/(2e+1), 1/(2e+1)
        let e = std::f64::consts::E;
        let expected = [e / (2.0 * e + 1.0), e / (2.0 * e + 1.0), 1.0 / (2.0 * e + 1.0)];
        let w = agg.weights(&reps);
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mult_agrees_with_sing_on_one_snippet() {
        let vocab = Vocab::build(["what is elephant poached for ? elephants are poached for their tusk"]);
        let reader = Reader::new(2, vocab, 8, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let agg = AttentionAggregator::new(&mut rng, 8);
        let mut snippets = vec![String::new(); 10];
        snippets[3] = "elephants are poached for their tusk".into();
        let q = "what is elephant poached for?";
        let sing = mrc_sing(q, &snippets, &reader);
        let mult = mrc_mult(q, &snippets, &reader, &agg);
        assert_eq!(mult.answer, sing.answer);
        assert_eq!(mult.rep, sing.rep);
        assert_eq!(mult.weights[3], Some(1.0));
    }

    #[test]
    fn all_empty_snippets_give_sentinel() {
        let reader = Reader::new(2, Vocab::build(["x"]), 4, 1);
        let agg = AttentionAggregator::uniform(4);
        let out = mrc_mult("q", &vec![String::new(); 10], &reader, &agg);
        assert!(out.answer.is_none());
    }

    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn weights_are_a_distribution_and_shift_invariant(
            scores in prop::collection::vec(-30.0f64..30.0, 1..11),
            c in -50.0f64..50.0,
        ) {
            let w = attention_weights(&scores);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            for (a, b) in w.iter().zip(attention_weights(&shifted)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
