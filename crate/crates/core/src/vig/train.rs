use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{vig_gradients, vig_loss, EnergyConfig, ViGModel};
use crate::error::{Error, Result};
use crate::graph::MultiModalGraph;
use crate::linalg::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct VigTrainConfig {
    pub energy: EnergyConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VigTrainConfig {
    fn default() -> Self {
        Self {
            energy: EnergyConfig::default(),
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl VigTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("ViG learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VigEpoch {
    pub mean_loss: f64,
    pub mean_cross_entropy: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VigRun {
    pub model: ViGModel,
    /// Full-set evaluation before training (row 0) and after every epoch.
    pub trace: Vec<VigEpoch>,
}

pub fn evaluate_vig(samples: &[(MultiModalGraph, usize)], model: &ViGModel, energy: &EnergyConfig) -> Result<VigEpoch> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let losses = samples
        .par_iter()
        .map(|(g, y)| vig_loss(g, *y, model, energy))
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len() as f64;
    let correct = losses
        .iter()
        .zip(samples)
        .filter(|(l, (_, y))| argmax(&l.logits) == *y)
        .count();
    Ok(VigEpoch {
        mean_loss: losses.iter().map(|l| l.total).sum::<f64>() / n,
        mean_cross_entropy: losses.iter().map(|l| l.cross_entropy).sum::<f64>() / n,
        accuracy: correct as f64 / n,
    })
}

/// Mini-batch SGD with momentum.
///
/// Per-sample gradients are computed in parallel and summed in sample
/// order, so results do not depend on the thread count.
pub fn train_vig(samples: &[(MultiModalGraph, usize)], initial: ViGModel, config: &VigTrainConfig) -> Result<VigRun> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut model = initial;
    let mut velocity = model.zeros_like();
    let mut trace = Vec::with_capacity(config.epochs + 1);
    trace.push(evaluate_vig(samples, &model, &config.energy)?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let grads = chunk
                .par_iter()
                .map(|&i| vig_gradients(&samples[i].0, samples[i].1, &model, &config.energy))
                .collect::<Result<Vec<_>>>()?;
            let mut sum = model.zeros_like();
            for g in &grads {
                sum.add_scaled(1.0 / chunk.len() as f64, &g.params);
            }
            let mut next = velocity.zeros_like();
            next.add_scaled(config.momentum, &velocity);
            next.add_scaled(1.0, &sum);
            velocity = next;
            model.add_scaled(-config.learning_rate, &velocity);
        }
        if !model.is_finite() {
            return Err(Error::Invalid(format!("ViG weights diverged at epoch {}", epoch + 1)));
        }
        let row = evaluate_vig(samples, &model, &config.energy)?;
        log::debug!(
            "vig epoch {} loss {:.6} acc {:.4}",
            epoch + 1,
            row.mean_loss,
            row.accuracy
        );
        trace.push(row);
    }
    Ok(VigRun { model, trace })
}

/// CSV with columns `epoch,loss,cross_entropy,accuracy`.
pub fn vig_trace_csv(trace: &[VigEpoch]) -> String {
    let mut out = String::from("epoch,loss,cross_entropy,accuracy\n");
    for (e, row) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{e},{},{},{}\n",
            row.mean_loss, row.mean_cross_entropy, row.accuracy
        ));
    }
    out
}
