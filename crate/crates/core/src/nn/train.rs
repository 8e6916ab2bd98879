//! Shared mini-batch training loop and checkpoint container.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Module};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub train_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            seed: 0,
            lr: 1e-3,
            train_encoder: true,
        }
    }
}

/// What happened during a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the instances seen in each epoch.
    pub epoch_losses: Vec<f64>,
    pub total: usize,
    pub used: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
    /// Instances whose supervision had to be adjusted (e.g. span expansion).
    pub adjusted: usize,
}

impl TrainReport {
    pub fn skipped_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.skipped as f64 / self.total as f64
        }
    }
}

/// Run `config.epochs` passes over `n` items in seeded shuffled order.
///
/// `step` must accumulate gradients for one item and return its loss.
/// `before_update` runs after each batch's gradients are averaged and
/// before the optimizer step (used to drop frozen gradients).
pub fn run_epochs<M, S, B>(
    model: &mut M,
    n: usize,
    config: &TrainConfig,
    mut step: S,
    mut before_update: B,
) -> Vec<f64>
where
    M: Module,
    S: FnMut(&mut M, usize) -> f64,
    B: FnMut(&mut M),
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let batch = config.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            model.zero_grad();
            for &i in chunk {
                total += step(model, i);
            }
            let scale = 1.0 / chunk.len() as f64;
            model.visit_params(&mut |_, g| g.iter_mut().for_each(|x| *x *= scale));
            before_update(model);
            opt.step(model);
        }
        losses.push(if n == 0 { 0.0 } else { total / n as f64 });
    }
    losses
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    kind: String,
    format_version: u32,
    model: T,
}

const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, model: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Out<'a, T> {
        kind: &'a str,
        format_version: u32,
        model: &'a T,
    }
    let bytes = serde_json::to_vec(&Out {
        kind,
        format_version: FORMAT_VERSION,
        model,
    })?;
    io::write_atomic(path, &bytes)
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let ckpt: Checkpoint<T> = io::read_json(path)?;
    if ckpt.kind != kind {
        return Err(Error::Data(format!(
            "{}: expected a {kind} checkpoint, found {}",
            path.display(),
            ckpt.kind
        )));
    }
    if ckpt.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            ckpt.format_version
        )));
    }
    Ok(ckpt.model)
}
