//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the loss closure and reads values; it shares
//! no code with any backward pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Module;

/// Denominator floor for the relative error, so gradients that are
/// essentially zero are judged on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn nudge<M: Module + ?Sized>(module: &mut M, flat: usize, delta: f64) {
    let mut offset = 0;
    module.visit_params(&mut |v, _| {
        if flat >= offset && flat < offset + v.len() {
            v[flat - offset] += delta;
        }
        offset += v.len();
    });
}

fn gradients<M: Module + ?Sized>(module: &mut M) -> Vec<f64> {
    let mut out = Vec::new();
    module.visit_params(&mut |_, g| out.extend_from_slice(g));
    out
}

/// Compare accumulated gradients with central differences.
///
/// `loss` must zero the module's gradients, run forward and backward, and
/// return the loss. Up to `samples` coordinates are checked, chosen with
/// `seed`; pass `usize::MAX` to check all of them.
pub fn check<M, F>(module: &mut M, mut loss: F, step: f64, samples: usize, seed: u64) -> GradCheckReport
where
    M: Module + ?Sized,
    F: FnMut(&mut M) -> f64,
{
    loss(module);
    let analytic = gradients(module);
    let total = analytic.len();
    let indices: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, total, samples).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut report = GradCheckReport {
        checked: indices.len(),
        max_relative_error: 0.0,
        worst: None,
    };
    for idx in indices {
        nudge(module, idx, step);
        let plus = loss(module);
        nudge(module, idx, -2.0 * step);
        let minus = loss(module);
        nudge(module, idx, step);
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[idx], numeric);
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some(Mismatch {
                index: idx,
                analytic: analytic[idx],
                numeric,
            });
        }
    }
    // leave gradients as the analytic pass produced them
    loss(module);
    report
}
