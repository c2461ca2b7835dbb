//! Shared training loop: Adam optimization, inverse-frequency class weights,
//! dev-loss early stopping, best-epoch checkpointing, and seed-determined
//! data order. The loop is generic over the model so the pixel-wise detector
//! and the trainable baselines share one implementation.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::Split;
use crate::nn::{Adam, AdamConfig, Param};

pub mod gradcheck;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training set contains a single class; class weighting needs both")]
    SingleClass,
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("sample tagged {found:?} fed to the {expected:?} path; splits must not leak")]
    SplitViolation { expected: Split, found: Split },
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("model error: {0}")]
    Model(String),
    #[error("state mismatch: {0}")]
    State(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            min_delta: 0.0,
            seed: 1,
            class_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.patience < 1 {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(TrainError::InvalidConfig(
                "batch_size and max_epochs must be >= 1".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.min_delta < 0.0 {
            return Err(TrainError::InvalidConfig(
                "weight_decay and min_delta must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Label/split access the loop needs from every sample type.
pub trait TrainSampleMeta {
    /// 1.0 = attack, 0.0 = bona fide.
    fn binary_label(&self) -> f64;
    fn split(&self) -> Split;
}

/// A model trainable by [`train`]. Gradients accumulate into parameters;
/// `forward_backward` returns the mean weighted loss over the batch.
pub trait TrainableModel {
    type Sample: TrainSampleMeta;

    fn zero_grads(&mut self);
    fn forward_backward(&mut self, batch: &[(&Self::Sample, f64)]) -> Result<f64, TrainError>;
    fn eval_loss(&mut self, batch: &[(&Self::Sample, f64)]) -> Result<f64, TrainError>;
    /// Probability in (0,1), higher = more attack-like.
    fn predict(&mut self, sample: &Self::Sample) -> Result<f64, TrainError>;
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);
    fn export_state(&mut self) -> Vec<(String, ArrayD<f64>)>;
    fn import_state(&mut self, state: &[(String, ArrayD<f64>)]) -> Result<(), TrainError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per epoch, then a summary line.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<(), TrainError> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.epochs {
            writeln!(w, "{}", serde_json::to_string(e).expect("epoch record json"))?;
        }
        writeln!(
            w,
            "{}",
            serde_json::json!({
                "summary": true,
                "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early,
            })
        )?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Model state at the best (minimum dev loss) epoch.
    pub best_state: Vec<(String, ArrayD<f64>)>,
}

/// Inverse-frequency class weights, normalized so their mean is 1.
/// Returns (w_attack, w_bonafide).
pub fn compute_class_weights(binary_labels: &[f64]) -> Result<(f64, f64), TrainError> {
    let n_attack = binary_labels.iter().filter(|&&y| y >= 0.5).count();
    let n_bona = binary_labels.len() - n_attack;
    if n_attack == 0 || n_bona == 0 {
        return Err(TrainError::SingleClass);
    }
    let (na, nb) = (n_attack as f64, n_bona as f64);
    let c = 2.0 * na * nb / (na + nb);
    Ok((c / na, c / nb))
}

fn check_split<S: TrainSampleMeta>(
    samples: &[S],
    expected: Split,
    name: &'static str,
) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit(name));
    }
    for s in samples {
        if s.split() != expected {
            return Err(TrainError::SplitViolation {
                expected,
                found: s.split(),
            });
        }
    }
    Ok(())
}

/// Train until dev loss stops improving. Deterministic given `config.seed`:
/// the per-epoch sample order is drawn from a seeded generator and gradient
/// steps run single-threaded.
pub fn train<M: TrainableModel>(
    model: &mut M,
    train_samples: &[M::Sample],
    dev_samples: &[M::Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_split(train_samples, Split::Train, "train")?;
    check_split(dev_samples, Split::Dev, "dev")?;

    let (w_attack, w_bona) = if config.class_weighting {
        let labels: Vec<f64> = train_samples.iter().map(|s| s.binary_label()).collect();
        compute_class_weights(&labels)?
    } else {
        (1.0, 1.0)
    };
    let weight_of = |s: &M::Sample| if s.binary_label() >= 0.5 { w_attack } else { w_bona };

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });

    let n = train_samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_loss = f64::INFINITY;
    let mut best_state: Vec<(String, ArrayD<f64>)> = Vec::new();
    let mut bad_epochs = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&M::Sample, f64)> = chunk
                .iter()
                .map(|&i| (&train_samples[i], weight_of(&train_samples[i])))
                .collect();
            model.zero_grads();
            let loss = model.forward_backward(&batch)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            let mut params = Vec::new();
            model.collect_params(&mut params);
            adam.step(&mut params);
        }
        let train_loss = loss_sum / n as f64;

        let mut dev_sum = 0.0;
        for chunk in dev_samples.chunks(config.batch_size) {
            let batch: Vec<(&M::Sample, f64)> =
                chunk.iter().map(|s| (s, weight_of(s))).collect();
            dev_sum += model.eval_loss(&batch)? * batch.len() as f64;
        }
        let dev_loss = dev_sum / dev_samples.len() as f64;
        if !dev_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let mut errors = 0usize;
        for s in dev_samples {
            let p = model.predict(s)?;
            let predicted_attack = p >= 0.5;
            if predicted_attack != (s.binary_label() >= 0.5) {
                errors += 1;
            }
        }
        let dev_error = errors as f64 / dev_samples.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_error,
        });

        if dev_loss < best_loss - config.min_delta {
            best_loss = dev_loss;
            log.best_epoch = epoch;
            best_state = model.export_state();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    if best_state.is_empty() {
        // Every epoch failed to improve on +inf cannot happen with finite losses,
        // but guard anyway.
        best_state = model.export_state();
        log.best_epoch = log.epochs.last().map(|e| e.epoch).unwrap_or(0);
    }
    Ok(TrainOutcome {
        log,
        best_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weights_balanced() {
        let labels = [vec![1.0; 100], vec![0.0; 100]].concat();
        let (wa, wb) = compute_class_weights(&labels).unwrap();
        assert!((wa - 1.0).abs() < 1e-12);
        assert!((wb - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_lma_train_counts() {
        // 96 attacks vs 121 bona fides: ratio 121/96, mean exactly 1.
        let labels = [vec![1.0; 96], vec![0.0; 121]].concat();
        let (wa, wb) = compute_class_weights(&labels).unwrap();
        assert!((wa / wb - 121.0 / 96.0).abs() < 1e-12);
        assert!(((wa + wb) / 2.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_one_attack_three_bonafide() {
        let labels = vec![1.0, 0.0, 0.0, 0.0];
        let (wa, wb) = compute_class_weights(&labels).unwrap();
        assert!((wa - 1.5).abs() < 1e-12);
        assert!((wb - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_weights_single_class_rejected() {
        assert!(matches!(
            compute_class_weights(&[1.0, 1.0]),
            Err(TrainError::SingleClass)
        ));
    }
}
