//! Small dense-network toolkit: parameters with gradient buffers, a linear
//! layer, Adam, and numerically stable helpers. Everything is `f64` so that
//! finite-difference checks are meaningful.

pub mod encoder;
pub mod gradcheck;
pub mod train;

use ndarray::{Array, Array1, Array2, ArrayView1, ArrayView2, Axis, Dimension, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let value = value.as_standard_layout().into_owned();
        let grad = Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(
            self.value.as_slice_mut().expect("standard layout"),
            self.grad.as_slice_mut().expect("standard layout"),
        );
    }
}

impl<D: Dimension + Serialize> Serialize for Param<D> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.value.serialize(s)
    }
}

impl<'de, D: Dimension + Deserialize<'de>> Deserialize<'de> for Param<D> {
    fn deserialize<De: Deserializer<'de>>(d: De) -> Result<Self, De::Error> {
        Ok(Param::new(Array::<f64, D>::deserialize(d)?))
    }
}

/// Anything that owns parameters. `visit_params` must always walk them in
/// the same order.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |v, _| n += v.len());
        n
    }

    /// Flattened copy of every parameter value.
    fn snapshot(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |v, _| out.extend_from_slice(v));
        out
    }

    fn all_finite(&mut self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |v, _| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn normal_vector<R: Rng>(rng: &mut R, len: usize, std: f64) -> Array1<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array1::from_shape_simple_fn(len, || dist.sample(rng))
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param<Ix2>,
    pub bias: Param<Ix1>,
}

impl Linear {
    /// Gaussian init with std `1/sqrt(in)`, zero bias.
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Param::new(normal_matrix(rng, input, output, std)),
            bias: Param::new(Array1::zeros(output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    pub fn forward_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    /// Accumulate parameter gradients and return `dL/dx`.
    pub fn backward(&mut self, x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
        let x2 = x.insert_axis(Axis(1));
        let dy2 = dy.insert_axis(Axis(0));
        self.weight.grad += &x2.dot(&dy2);
        self.bias.grad += &dy;
        self.weight.value.dot(&dy)
    }

    pub fn backward_rows(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.weight.grad += &x.t().dot(&dy);
        self.bias.grad += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value.t())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.weight.visit(f);
        self.bias.visit(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with moment buffers keyed by parameter visiting order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let moments = &mut self.moments;
        let mut idx = 0;
        module.visit_params(&mut |value, grad| {
            if moments.len() <= idx {
                moments.push((vec![0.0; value.len()], vec![0.0; value.len()]));
            }
            let (m, v) = &mut moments[idx];
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                value[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
            idx += 1;
        });
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| (v - lse).exp()).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(z)` without overflow.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Cross entropy of `logits` against class `target`, and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let loss = lse - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Mean over rows `[start, end]` (inclusive).
pub fn mean_rows(h: ArrayView2<f64>, start: usize, end: usize) -> Array1<f64> {
    h.slice(ndarray::s![start..=end, ..])
        .mean_axis(Axis(0))
        .expect("non-empty span")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_n() {
        let (loss, grad) = cross_entropy(&[0.5; 4], 2);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn stable_sigmoid_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((neg_log_sigmoid(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(neg_log_sigmoid(800.0) < 1e-300);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn param_serializes_as_plain_array() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut rng, 3, 2);
        let json = serde_json::to_string(&lin).unwrap();
        let back: Linear = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lin);
        assert_eq!(back.weight.grad.dim(), (3, 2));
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        struct Quad(Param<Ix1>);
        impl Module for Quad {
            fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
                self.0.visit(f);
            }
        }
        let mut q = Quad(Param::new(Array1::from(vec![3.0, -2.0])));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            q.zero_grad();
            let v = q.0.value.clone();
            q.0.grad.assign(&(v * 2.0));
            opt.step(&mut q);
        }
        assert!(q.0.value.iter().all(|x| x.abs() < 1e-2));
    }
}
