//! Frozen backbone + fine-tuned classification head: the final layer is
//! replaced with a two-class head and only its weights receive gradient
//! updates, trained through the shared loop.

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

use super::providers::BackboneProvider;
use super::BaselineError;
use crate::datakit::Split;
use crate::nn::init::Init;
use crate::nn::Linear;
use crate::scoring::{Detector, ScoreError};
use crate::trainkit::{self, TrainConfig, TrainError, TrainLog, TrainSampleMeta, TrainableModel};

#[derive(Debug, Clone)]
pub struct FeatureSample {
    pub image_id: String,
    pub features: Vec<f64>,
    pub binary_target: f64,
    pub split: Split,
}

impl TrainSampleMeta for FeatureSample {
    fn binary_label(&self) -> f64 {
        self.binary_target
    }

    fn split(&self) -> Split {
        self.split
    }
}

/// The replaceable two-class head: (feature_dim + 1) x 2 parameters.
pub struct LinearHeadModel {
    head: Linear,
    dim: usize,
}

impl LinearHeadModel {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut init = Init::seeded(seed);
        LinearHeadModel {
            head: Linear::new(dim, 2, &mut init),
            dim,
        }
    }

    pub fn param_count(&self) -> usize {
        (self.dim + 1) * 2
    }

    fn logits(&mut self, batch: &[(&FeatureSample, f64)]) -> Result<Array2<f64>, TrainError> {
        let n = batch.len();
        let mut x = Array2::zeros((n, self.dim));
        for (i, (s, _)) in batch.iter().enumerate() {
            if s.features.len() != self.dim {
                return Err(TrainError::Model(format!(
                    "feature dim {} != head dim {}",
                    s.features.len(),
                    self.dim
                )));
            }
            x.row_mut(i).assign(&Array1::from_vec(s.features.clone()));
        }
        Ok(self.head.forward(&x))
    }

    fn ce_loss(
        p: &Array2<f64>,
        batch: &[(&FeatureSample, f64)],
    ) -> (f64, Array2<f64>) {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = Array2::zeros(p.raw_dim());
        for (i, (s, w)) in batch.iter().enumerate() {
            let target = [1.0 - s.binary_target, s.binary_target];
            for k in 0..2 {
                loss -= w * target[k] * p[[i, k]].max(1e-12).ln() / n;
                grad[[i, k]] = w * (p[[i, k]] - target[k]) / n;
            }
        }
        (loss, grad)
    }

    pub fn score_features(&mut self, features: &[f64]) -> Result<f64, TrainError> {
        let sample = FeatureSample {
            image_id: String::new(),
            features: features.to_vec(),
            binary_target: 0.0,
            split: Split::Unassigned,
        };
        let logits = self.logits(&[(&sample, 1.0)])?;
        Ok(softmax_row(&logits, 0)[1])
    }

    pub fn export_weights(&mut self) -> HeadWeights {
        let mut w = Vec::new();
        let mut b = Vec::new();
        self.head.visit_state("head", &mut |name: &str, t: &mut ArrayD<f64>| {
            if name.ends_with("weight") {
                w = t.iter().copied().collect();
            } else if name.ends_with("bias") {
                b = t.iter().copied().collect();
            }
        });
        HeadWeights {
            dim: self.dim,
            weights: w,
            bias: b,
        }
    }

    pub fn from_weights(hw: &HeadWeights) -> Result<Self, BaselineError> {
        let mut model = LinearHeadModel::new(hw.dim, 0);
        if hw.weights.len() != 2 * hw.dim || hw.bias.len() != 2 {
            return Err(BaselineError::FeatureDim {
                expected: 2 * hw.dim + 2,
                got: hw.weights.len() + hw.bias.len(),
            });
        }
        model.head.visit_state("head", &mut |name: &str, t: &mut ArrayD<f64>| {
            if name.ends_with("weight") {
                for (dst, src) in t.iter_mut().zip(hw.weights.iter()) {
                    *dst = *src;
                }
            } else if name.ends_with("bias") {
                for (dst, src) in t.iter_mut().zip(hw.bias.iter()) {
                    *dst = *src;
                }
            }
        });
        Ok(model)
    }
}

fn softmax_row(logits: &Array2<f64>, i: usize) -> [f64; 2] {
    let m = logits[[i, 0]].max(logits[[i, 1]]);
    let e0 = (logits[[i, 0]] - m).exp();
    let e1 = (logits[[i, 1]] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadWeights {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TrainableModel for LinearHeadModel {
    type Sample = FeatureSample;

    fn zero_grads(&mut self) {
        let mut params = Vec::new();
        self.head.collect_params(&mut params);
        for p in params {
            p.zero_grad();
        }
    }

    fn forward_backward(&mut self, batch: &[(&FeatureSample, f64)]) -> Result<f64, TrainError> {
        let logits = self.logits(batch)?;
        let mut p = Array2::zeros(logits.raw_dim());
        for i in 0..batch.len() {
            let row = softmax_row(&logits, i);
            p[[i, 0]] = row[0];
            p[[i, 1]] = row[1];
        }
        let (loss, grad) = Self::ce_loss(&p, batch);
        self.head.backward(&grad);
        Ok(loss)
    }

    fn eval_loss(&mut self, batch: &[(&FeatureSample, f64)]) -> Result<f64, TrainError> {
        let logits = self.logits(batch)?;
        let mut p = Array2::zeros(logits.raw_dim());
        for i in 0..batch.len() {
            let row = softmax_row(&logits, i);
            p[[i, 0]] = row[0];
            p[[i, 1]] = row[1];
        }
        Ok(Self::ce_loss(&p, batch).0)
    }

    fn predict(&mut self, sample: &FeatureSample) -> Result<f64, TrainError> {
        self.score_features(&sample.features)
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut crate::nn::Param>) {
        self.head.collect_params(out);
    }

    fn export_state(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.head.visit_state("head", &mut |name: &str, t: &mut ArrayD<f64>| {
            out.push((name.to_string(), t.clone()));
        });
        out
    }

    fn import_state(&mut self, state: &[(String, ArrayD<f64>)]) -> Result<(), TrainError> {
        let map: std::collections::BTreeMap<&str, &ArrayD<f64>> =
            state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut errors = Vec::new();
        self.head.visit_state("head", &mut |name: &str, t: &mut ArrayD<f64>| {
            match map.get(name) {
                Some(src) if src.shape() == t.shape() => t.assign(src),
                _ => errors.push(name.to_string()),
            }
        });
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TrainError::State(errors.join("; ")))
        }
    }
}

/// Extract features for a labeled image list through a frozen provider.
pub fn extract_feature_samples(
    provider: &dyn BackboneProvider,
    items: &[(String, RgbImage, f64, Split)],
) -> Result<Vec<FeatureSample>, BaselineError> {
    items
        .iter()
        .map(|(id, image, label, split)| {
            Ok(FeatureSample {
                image_id: id.clone(),
                features: provider.extract(image)?,
                binary_target: *label,
                split: *split,
            })
        })
        .collect()
}

/// Train only the replaced head; backbone weights never see a gradient (the
/// provider is behind an immutable reference).
pub fn finetune_classifier_head(
    provider: &dyn BackboneProvider,
    train: &[FeatureSample],
    dev: &[FeatureSample],
    config: &TrainConfig,
) -> Result<(LinearHeadModel, TrainLog), BaselineError> {
    let mut head = LinearHeadModel::new(provider.feature_dim(), config.seed);
    let outcome = trainkit::train(&mut head, train, dev, config)?;
    head.import_state(&outcome.best_state).map_err(BaselineError::Train)?;
    Ok((head, outcome.log))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetunedParams {
    pub provider_name: String,
    pub head: HeadWeights,
}

pub struct FinetunedDetector {
    pub params: FinetunedParams,
    pub provider: Box<dyn BackboneProvider>,
    head: LinearHeadModel,
}

impl FinetunedDetector {
    pub fn new(
        params: FinetunedParams,
        provider: Box<dyn BackboneProvider>,
    ) -> Result<Self, BaselineError> {
        let head = LinearHeadModel::from_weights(&params.head)?;
        Ok(FinetunedDetector {
            params,
            provider,
            head,
        })
    }
}

impl Detector for FinetunedDetector {
    fn model_name(&self) -> String {
        "finetune".to_string()
    }

    fn score(&mut self, image: &RgbImage) -> Result<f64, ScoreError> {
        let features = self.provider.extract(image).map_err(ScoreError::from_err)?;
        self.head.score_features(&features).map_err(ScoreError::from_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::providers::{CheckpointBackbone, ProviderRegistry};
    use crate::baselines::scratch::{build_scratch, ScratchSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn feature_set(n: usize, sep: f64, split: Split, seed: u64) -> Vec<FeatureSample> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as f64;
                let center = if label > 0.5 { sep } else { -sep };
                FeatureSample {
                    image_id: format!("f{i}"),
                    features: vec![
                        center + rng.gen_range(-0.3..0.3),
                        -center + rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ],
                    binary_target: label,
                    split,
                }
            })
            .collect()
    }

    #[test]
    fn head_param_count_matches_dimension_arithmetic() {
        let mut head = LinearHeadModel::new(354, 0);
        assert_eq!(head.param_count(), 355 * 2);
        let mut params = Vec::new();
        head.collect_params(&mut params);
        let total: usize = params.iter().map(|p| p.len()).sum();
        assert_eq!(total, head.param_count());
    }

    #[test]
    fn toy_overfit_reaches_full_accuracy() {
        let train = feature_set(16, 2.0, Split::Train, 1);
        let dev = feature_set(8, 2.0, Split::Dev, 2);
        struct Fake(usize);
        impl BackboneProvider for Fake {
            fn name(&self) -> String {
                "fake".into()
            }
            fn input_size(&self) -> usize {
                16
            }
            fn feature_dim(&self) -> usize {
                self.0
            }
            fn extract(&self, _image: &RgbImage) -> Result<Vec<f64>, BaselineError> {
                unreachable!("not used with precomputed features")
            }
        }
        let config = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 300,
            batch_size: 8,
            patience: 300,
            seed: 3,
            ..TrainConfig::default()
        };
        let (mut head, log) = finetune_classifier_head(&Fake(3), &train, &dev, &config).unwrap();
        assert!(!log.epochs.is_empty());
        for s in &train {
            let p = head.score_features(&s.features).unwrap();
            assert_eq!(p >= 0.5, s.binary_target >= 0.5);
        }
    }

    #[test]
    fn backbone_bytes_identical_before_and_after_training() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = ScratchSpec {
            input_size: 16,
            width: 2,
            ..ScratchSpec::default()
        };
        let mut model = build_scratch(&spec, 13).unwrap();
        let ckpt = tmp.path().join("bb.ckpt");
        model.save_checkpoint(&ckpt).unwrap();
        let mut reg = ProviderRegistry::empty(tmp.path());
        reg.register("bb", "bb.ckpt").unwrap();
        reg.save().unwrap();

        let provider = CheckpointBackbone::load("bb", &ckpt).unwrap();
        let bytes_before = std::fs::read(&ckpt).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let items: Vec<(String, RgbImage, f64, Split)> = (0..12)
            .map(|i| {
                let img = RgbImage::from_fn(16, 16, |_, _| {
                    image::Rgb([rng.gen_range(0..=255), rng.gen_range(0..=255), rng.gen_range(0..=255)])
                });
                (format!("i{i}"), img, (i % 2) as f64, if i < 8 { Split::Train } else { Split::Dev })
            })
            .collect();
        let samples = extract_feature_samples(&provider, &items).unwrap();
        let (train, dev): (Vec<_>, Vec<_>) =
            samples.into_iter().partition(|s| s.split == Split::Train);
        let config = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 20,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        finetune_classifier_head(&provider, &train, &dev, &config).unwrap();
        let bytes_after = std::fs::read(&ckpt).unwrap();
        assert_eq!(bytes_before, bytes_after);
        // A fresh load extracts identical features: nothing leaked into memory state either.
        let fresh = CheckpointBackbone::load("bb", &ckpt).unwrap();
        let probe = RgbImage::from_pixel(16, 16, image::Rgb([10, 200, 30]));
        assert_eq!(provider.extract(&probe).unwrap(), fresh.extract(&probe).unwrap());
    }

    #[test]
    fn head_weights_roundtrip() {
        let train = feature_set(16, 2.0, Split::Train, 4);
        let dev = feature_set(8, 2.0, Split::Dev, 5);
        struct Fake;
        impl BackboneProvider for Fake {
            fn name(&self) -> String {
                "fake".into()
            }
            fn input_size(&self) -> usize {
                16
            }
            fn feature_dim(&self) -> usize {
                3
            }
            fn extract(&self, _image: &RgbImage) -> Result<Vec<f64>, BaselineError> {
                unreachable!()
            }
        }
        let config = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 50,
            batch_size: 8,
            seed: 6,
            ..TrainConfig::default()
        };
        let (mut head, _) = finetune_classifier_head(&Fake, &train, &dev, &config).unwrap();
        let weights = head.export_weights();
        let mut restored = LinearHeadModel::from_weights(&weights).unwrap();
        for s in &train {
            assert_eq!(
                head.score_features(&s.features).unwrap(),
                restored.score_features(&s.features).unwrap()
            );
        }
    }
}
