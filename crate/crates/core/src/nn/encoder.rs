//! Token encoders.
//!
//! [`TokenEncoder`] is the seam where a pretrained encoder can be plugged in.
//! [`MixerEncoder`] is the trainable default: an embedding table followed by
//! residual layers that mix each token with its left and right neighbours
//! and with the sequence mean.

use std::collections::{BTreeSet, HashMap};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{normal_matrix, Linear, Module, Param};
use crate::text::Token;

pub const UNK_TOKEN: &str = "[UNK]";
pub const SEP_TOKEN: &str = "[SEP]";

pub trait TokenEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// One row per token.
    fn encode(&self, tokens: &[Token]) -> Array2<f64>;
}

/// Lowercased token vocabulary. Ids 0 and 1 are reserved for the unknown
/// and separator tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub const UNK: usize = 0;
    pub const SEP: usize = 1;

    /// Vocabulary over every token of `texts`, sorted for determinism.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut seen = BTreeSet::new();
        for text in texts {
            for tok in crate::text::tokenize(text) {
                seen.insert(tok.text.to_lowercase());
            }
        }
        let mut tokens = vec![UNK_TOKEN.to_string(), SEP_TOKEN.to_string()];
        tokens.extend(seen.into_iter().filter(|t| t != UNK_TOKEN && t != SEP_TOKEN));
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if token == SEP_TOKEN {
            return Self::SEP;
        }
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(Self::UNK)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerLayer {
    pub own: Linear,
    pub left: Param<Ix2>,
    pub right: Param<Ix2>,
    pub global: Param<Ix2>,
}

impl MixerLayer {
    fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        let std = 0.5 / (dim as f64).sqrt();
        let mut own = Linear::new(rng, dim, dim);
        own.weight.value = normal_matrix(rng, dim, dim, std);
        MixerLayer {
            own,
            left: Param::new(normal_matrix(rng, dim, dim, std)),
            right: Param::new(normal_matrix(rng, dim, dim, std)),
            global: Param::new(normal_matrix(rng, dim, dim, std)),
        }
    }

    /// Returns `tanh(pre)`; the layer output is `h + tanh(pre)`.
    fn mix(&self, h: ArrayView2<f64>) -> Array2<f64> {
        let n = h.nrows();
        let mut pre = self.own.forward_rows(h);
        if n > 1 {
            let from_left = h.slice(s![..n - 1, ..]).dot(&self.left.value);
            let from_right = h.slice(s![1.., ..]).dot(&self.right.value);
            pre.slice_mut(s![1.., ..]).zip_mut_with(&from_left, |p, v| *p += v);
            pre.slice_mut(s![..n - 1, ..]).zip_mut_with(&from_right, |p, v| *p += v);
        }
        let mean = h.mean_axis(Axis(0)).expect("non-empty");
        pre += &mean.dot(&self.global.value);
        pre.mapv_inplace(f64::tanh);
        pre
    }

    fn backward(&mut self, h: ArrayView2<f64>, t: ArrayView2<f64>, dout: ArrayView2<f64>) -> Array2<f64> {
        let n = h.nrows();
        let dpre = &dout * &t.mapv(|v| 1.0 - v * v);
        let mut dh = dout.to_owned();
        dh += &self.own.backward_rows(h, dpre.view());
        if n > 1 {
            let dpre_tail = dpre.slice(s![1.., ..]);
            let dpre_head = dpre.slice(s![..n - 1, ..]);
            self.left.grad += &h.slice(s![..n - 1, ..]).t().dot(&dpre_tail);
            self.right.grad += &h.slice(s![1.., ..]).t().dot(&dpre_head);
            let to_left = dpre_tail.dot(&self.left.value.t());
            let to_right = dpre_head.dot(&self.right.value.t());
            dh.slice_mut(s![..n - 1, ..]).zip_mut_with(&to_left, |d, v| *d += v);
            dh.slice_mut(s![1.., ..]).zip_mut_with(&to_right, |d, v| *d += v);
        }
        let mean = h.mean_axis(Axis(0)).expect("non-empty");
        let dsum: Array1<f64> = dpre.sum_axis(Axis(0));
        self.global.grad += &mean
            .view()
            .insert_axis(Axis(1))
            .dot(&dsum.view().insert_axis(Axis(0)));
        let dmean = self.global.value.dot(&dsum) / n as f64;
        dh += &dmean;
        dh
    }
}

impl Module for MixerLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.own.visit_params(f);
        self.left.visit(f);
        self.right.visit(f);
        self.global.visit(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerEncoder {
    pub vocab: Vocab,
    pub embedding: Param<Ix2>,
    pub layers: Vec<MixerLayer>,
}

/// Intermediate values kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    ids: Vec<usize>,
    inputs: Vec<Array2<f64>>,
    activations: Vec<Array2<f64>>,
}

impl MixerEncoder {
    pub fn new<R: Rng>(rng: &mut R, vocab: Vocab, dim: usize, layers: usize) -> Self {
        let embedding = Param::new(normal_matrix(rng, vocab.len(), dim, 1.0));
        let layers = (0..layers).map(|_| MixerLayer::new(rng, dim)).collect();
        MixerEncoder {
            vocab,
            embedding,
            layers,
        }
    }

    pub fn ids(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|t| self.vocab.id(&t.text)).collect()
    }

    pub fn forward_traced(&self, tokens: &[Token]) -> (Array2<f64>, EncoderTrace) {
        let ids = self.ids(tokens);
        let dim = self.dim();
        let mut h = Array2::zeros((ids.len(), dim));
        for (row, &id) in ids.iter().enumerate() {
            h.row_mut(row).assign(&self.embedding.value.row(id));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        if !ids.is_empty() {
            for layer in &self.layers {
                let t = layer.mix(h.view());
                let next = &h + &t;
                inputs.push(std::mem::replace(&mut h, next));
                activations.push(t);
            }
        }
        (
            h,
            EncoderTrace {
                ids,
                inputs,
                activations,
            },
        )
    }

    /// Accumulate gradients given `dL/d(output)`.
    pub fn backward(&mut self, trace: &EncoderTrace, doutput: ArrayView2<f64>) {
        if trace.ids.is_empty() {
            return;
        }
        let mut d = doutput.to_owned();
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            d = layer.backward(trace.inputs[idx].view(), trace.activations[idx].view(), d.view());
        }
        for (row, &id) in trace.ids.iter().enumerate() {
            let mut g = self.embedding.grad.row_mut(id);
            g += &d.row(row);
        }
    }
}

impl TokenEncoder for MixerEncoder {
    fn dim(&self) -> usize {
        self.embedding.value.ncols()
    }

    fn encode(&self, tokens: &[Token]) -> Array2<f64> {
        self.forward_traced(tokens).0
    }
}

impl Module for MixerEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.embedding.visit(f);
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }
}
