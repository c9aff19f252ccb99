use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{save_checkpoint, ExtractorWeights};
use crate::synth::{Dataset, Sample};

use super::adam::{adam_step, AdamState};
use super::losses::LossConfig;
use super::objective::total_loss;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 4,
            max_epochs: 20,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

/// One row of the loss curve. Epoch 0 evaluates the initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_pose_err: f64,
    pub val_pose_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_weights: ExtractorWeights,
}

impl TrainReport {
    /// Last epoch that was run.
    pub fn final_epoch(&self) -> usize {
        self.curve.last().map_or(0, |r| r.epoch)
    }
}

pub const CURVE_FILE: &str = "loss_curve.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

fn evaluate(weights: &ExtractorWeights, data: &Dataset, samples: &[Sample], cfg: &LossConfig) -> Result<(f64, f64, f64)> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let out = total_loss(weights, &refs, &data.intrinsics, cfg, false)?;
    if out.used == 0 {
        return Ok((f64::INFINITY, f64::INFINITY, f64::INFINITY));
    }
    Ok((out.loss, out.pose_error, out.pose_loss))
}

/// Mini-batch Adam on the training split with early stopping on the
/// validation loss. With `out`, the best weights and the loss curve are
/// written there after every epoch.
pub fn train(
    data: &Dataset,
    init: ExtractorWeights,
    tc: &TrainConfig,
    lc: &LossConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    tc.validate()?;
    lc.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    let mut weights = init;
    let mut params = weights.flatten();
    let mut adam = AdamState::new(params.len());

    let (train0, ..) = evaluate(&weights, data, &data.train, lc)?;
    let (val_loss, val_pose_err, val_pose_loss) = evaluate(&weights, data, &data.val, lc)?;
    let first = EpochRecord {
        epoch: 0,
        train_loss: train0,
        val_loss,
        val_pose_err,
        val_pose_loss,
    };
    progress(&first);
    let mut report = TrainReport {
        curve: vec![first],
        best_epoch: 0,
        best_weights: weights.clone(),
    };
    persist(&report, out)?;

    let mut best = val_loss;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=tc.max_epochs {
        let mut rng = crate::seed::rng(crate::seed::derive(tc.seed, "epoch", epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let b = total_loss(&weights, &batch, &data.intrinsics, lc, true)?;
            if b.used == 0 {
                continue;
            }
            let grads = b.grads.expect("gradients were requested");
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::DegenerateGradient(format!("non-finite gradient in epoch {epoch}")));
            }
            adam_step(&mut params, &grads, &mut adam, tc.learning_rate)?;
            weights.set_flat(&params)?;
            sum += b.loss;
            batches += 1;
        }
        let (val_loss, val_pose_err, val_pose_loss) = evaluate(&weights, data, &data.val, lc)?;
        let record = EpochRecord {
            epoch,
            train_loss: if batches > 0 { sum / batches as f64 } else { f64::INFINITY },
            val_loss,
            val_pose_err,
            val_pose_loss,
        };
        progress(&record);
        report.curve.push(record);
        if val_loss < best {
            best = val_loss;
            stale = 0;
            report.best_epoch = epoch;
            report.best_weights = weights.clone();
        } else {
            stale += 1;
        }
        persist(&report, out)?;
        if stale >= tc.patience {
            break;
        }
    }
    Ok(report)
}

fn persist(report: &TrainReport, out: Option<&Path>) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&report.best_weights, &dir.join(CHECKPOINT_DIR))?;
    write_curve(&dir.join(CURVE_FILE), &report.curve)
}

pub fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    for r in curve {
        w.serialize(r).map_err(|e| Error::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::data(path, e.to_string())))
        .collect()
}
