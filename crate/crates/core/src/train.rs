//! Plain gradient descent on the synthetic set.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CamoFormer, ModelConfig};
use crate::synth::{synthetic_set, Sample};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 2000;
pub const DEFAULT_LR: f64 = 0.005;
pub const DEFAULT_SEED: u64 = 7;
/// Mean loss below which an overfit run counts as converged.
pub const TARGET_LOSS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Seeds both the model weights and the synthetic textures.
    pub seed: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            lr: DEFAULT_LR,
            seed: DEFAULT_SEED,
        }
    }
}

impl OverfitConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..ModelConfig::micro()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `losses[k]` is the mean total loss after `k` updates; length `steps + 1`.
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }

    pub fn converged(&self) -> bool {
        self.last() < TARGET_LOSS
    }

    /// One `step,total_loss` line per entry, with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,total_loss\n");
        for (k, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{k},{l:.17e}\n"));
        }
        out
    }
}

/// Mean loss and mean gradients over `samples`, reduced in sample order.
pub fn batch_loss_and_grads(model: &CamoFormer, samples: &[Sample]) -> Result<(f64, Vec<Tensor>)> {
    let per: Vec<(f64, Vec<Tensor>)> = samples
        .par_iter()
        .map(|s| model.loss_and_grads(&s.image, &s.mask).map(|(r, g)| (r.total, g)))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Data("empty training set".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grads))
}

pub fn batch_loss(model: &CamoFormer, samples: &[Sample]) -> Result<f64> {
    let per: Vec<f64> = samples
        .par_iter()
        .map(|s| model.loss(&s.image, &s.mask).map(|r| r.total))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / samples.len().max(1) as f64)
}

fn check_finite(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

// Overflow inside the forward pass surfaces as a non-finite op error.
fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

/// Runs `steps` updates of `p ← p − lr·∇L` on `samples`.
pub fn train(model: &mut CamoFormer, samples: &[Sample], steps: usize, lr: f64) -> Result<Trajectory> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    let start = Instant::now();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = batch_loss_and_grads(model, samples).map_err(|e| diverged(step, e))?;
        check_finite(step, loss)?;
        losses.push(loss);
        for (p, g) in model.params.tensors_mut().iter_mut().zip(&grads) {
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
        if step % 100 == 0 {
            log::info!("step {step}: loss {loss:.6} ({:.1?})", start.elapsed());
        }
    }
    let last = batch_loss(model, samples).map_err(|e| diverged(steps, e))?;
    check_finite(steps, last)?;
    losses.push(last);
    Ok(Trajectory { losses })
}

/// Maps `[0, 1]` pixels to `[-1, 1]`.
pub fn normalize_input(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

/// Trains a fresh micro model on the normalized built-in synthetic set.
pub fn overfit(cfg: &OverfitConfig) -> Result<(CamoFormer, Trajectory)> {
    let mut model = CamoFormer::new(cfg.model_config())?;
    let samples: Vec<Sample> = synthetic_set(cfg.seed)
        .into_iter()
        .map(|s| Sample {
            image: normalize_input(&s.image),
            ..s
        })
        .collect();
    let traj = train(&mut model, &samples, cfg.steps, cfg.lr)?;
    Ok((model, traj))
}
