//! Minibatch SGD training, masked fine-tuning and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::TensorGraph;
use crate::mask::MaskSet;
use crate::optim::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Data-parallel gradient workers.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, lr: 0.05, momentum: 0.9, seed: 0, threads: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub data_loss: f64,
}

/// Optimizer plus shuffling state shared across epochs.
pub struct Trainer {
    pub opt: Sgd<f32>,
    pub rng: ChaCha8Rng,
    pub batch_size: usize,
    pub threads: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(Self {
            opt: Sgd::new(cfg.lr, cfg.momentum)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            batch_size: cfg.batch_size,
            threads: cfg.threads.max(1),
        })
    }

    /// One pass over `data`; `after_step` runs after every parameter update.
    /// Returns the sample-weighted mean data loss.
    pub fn epoch(
        &mut self,
        epoch: usize,
        graph: &mut TensorGraph,
        data: &Dataset,
        masks: Option<&MaskSet>,
        mut after_step: impl FnMut(&mut TensorGraph) -> Result<()>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for idx in data.epoch_batches(self.batch_size, &mut self.rng) {
            let (x, y) = data.gather(&idx);
            let grads = graph.backward_parallel(&x, &y, self.threads).map_err(|e| diverged(epoch, e))?;
            if !grads.loss.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("data loss {}", grads.loss) });
            }
            total += grads.loss * idx.len() as f64;
            self.opt.step(graph, &grads, masks)?;
            after_step(graph)?;
        }
        Ok(total / data.len() as f64)
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged { epoch, detail: format!("non-finite activations in `{op}`") },
        other => other,
    }
}

/// Plain (optionally masked) training.
pub fn train(
    graph: &mut TensorGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    masks: Option<&MaskSet>,
) -> Result<Vec<EpochStats>> {
    if let Some(m) = masks {
        graph.apply_masks(m)?;
    }
    let mut trainer = Trainer::new(cfg)?;
    (0..cfg.epochs)
        .map(|epoch| {
            let data_loss = trainer.epoch(epoch, graph, data, masks, |_| Ok(()))?;
            log::debug!("epoch {epoch}: loss {data_loss:.5}");
            Ok(EpochStats { epoch, data_loss })
        })
        .collect()
}

/// Masked training after pruning; masked positions stay exactly zero.
pub fn finetune(
    graph: &mut TensorGraph,
    masks: &MaskSet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    train(graph, data, cfg, Some(masks))
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(graph: &TensorGraph, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.gather(chunk);
        let out = graph.forward(&x)?;
        let k = out.shape()[1];
        for (row, &label) in out.data().chunks_exact(k).zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
