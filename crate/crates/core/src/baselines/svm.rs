//! Backbone features -> per-dimension standardization (fit on train only) ->
//! linear max-margin classifier -> monotone sigmoid calibration to (0,1).

use image::RgbImage;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::providers::BackboneProvider;
use super::BaselineError;
use crate::scoring::{Detector, ScoreError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Array2<f64>) -> Result<Self, BaselineError> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(BaselineError::Empty("feature matrix"));
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let col = features.column(j);
            let m = col.sum() / n as f64;
            let var = col.fold(0.0, |acc, &v| acc + (v - m) * (v - m)) / n as f64;
            mean[j] = m;
            std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Standardizer { mean, std })
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>, BaselineError> {
        if x.len() != self.mean.len() {
            return Err(BaselineError::FeatureDim {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn transform(&self, features: &Array2<f64>) -> Result<Array2<f64>, BaselineError> {
        let (n, d) = features.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let row = self.transform_row(&features.row(i).to_vec())?;
            out.row_mut(i).assign(&Array1::from_vec(row));
        }
        Ok(out)
    }
}

/// Linear SVM trained by deterministic full-batch subgradient descent on the
/// L2-regularized hinge loss `0.5/C * ||w||^2 + mean_i w_i * max(0, 1 - y f)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
}

impl LinearSvm {
    pub fn margin(&self, x: &[f64]) -> Result<f64, BaselineError> {
        if x.len() != self.weights.len() {
            return Err(BaselineError::FeatureDim {
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    /// Labels are +-1 (+1 = attack); weights are per-sample.
    pub fn train(
        features: &Array2<f64>,
        labels_pm1: &[f64],
        sample_weights: &[f64],
        c: f64,
        iterations: usize,
    ) -> Result<Self, BaselineError> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(BaselineError::Empty("feature matrix"));
        }
        if !labels_pm1.iter().any(|&y| y > 0.0) || !labels_pm1.iter().any(|&y| y < 0.0) {
            return Err(BaselineError::SingleClass);
        }
        let lambda = 1.0 / c.max(1e-12);
        let mut w = Array1::<f64>::zeros(d);
        let mut b = 0.0f64;
        for t in 0..iterations {
            let lr = 1.0 / (1.0 + 0.01 * t as f64);
            let mut grad_w = &w * (lambda / n as f64);
            let mut grad_b = 0.0;
            for i in 0..n {
                let x = features.row(i);
                let f = w.dot(&x) + b;
                if labels_pm1[i] * f < 1.0 {
                    let scale = sample_weights[i] * labels_pm1[i] / n as f64;
                    grad_w.scaled_add(-scale, &x);
                    grad_b -= scale;
                }
            }
            w.scaled_add(-lr, &grad_w);
            b -= lr * grad_b;
        }
        Ok(LinearSvm {
            weights: w.to_vec(),
            bias: b,
            c,
        })
    }

    pub fn mean_hinge(&self, features: &Array2<f64>, labels_pm1: &[f64]) -> f64 {
        let n = features.nrows();
        (0..n)
            .map(|i| {
                let f = self.margin(&features.row(i).to_vec()).expect("dim checked");
                (1.0 - labels_pm1[i] * f).max(0.0)
            })
            .sum::<f64>()
            / n as f64
    }
}

/// sigma(exp(log_slope) * margin + intercept): the slope is positive by
/// construction, so larger margins always calibrate to larger probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmoidCalibration {
    pub log_slope: f64,
    pub intercept: f64,
}

impl SigmoidCalibration {
    /// Clamped into the open interval so the scoring contract (score in
    /// (0,1)) survives f64 sigmoid saturation.
    pub fn probability(&self, margin: f64) -> f64 {
        crate::pwmad::clamp_prob(crate::nn::sigmoid(self.log_slope.exp() * margin + self.intercept))
    }

    /// Fit on train margins by gradient descent on cross-entropy.
    pub fn fit(margins: &[f64], labels: &[f64], iterations: usize) -> Result<Self, BaselineError> {
        if margins.is_empty() {
            return Err(BaselineError::Empty("margin list"));
        }
        let n = margins.len() as f64;
        let mut u = 0.0f64; // log slope
        let mut b = 0.0f64;
        let lr = 0.5;
        for _ in 0..iterations {
            let slope = u.exp();
            let mut gu = 0.0;
            let mut gb = 0.0;
            for (m, y) in margins.iter().zip(labels) {
                let p = crate::nn::sigmoid(slope * m + b);
                let d = (p - y) / n;
                gu += d * slope * m;
                gb += d;
            }
            u -= lr * gu;
            b -= lr * gb;
        }
        Ok(SigmoidCalibration {
            log_slope: u,
            intercept: b,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSvmParams {
    pub provider_name: String,
    pub standardizer: Standardizer,
    pub svm: LinearSvm,
    pub calibration: SigmoidCalibration,
}

/// Frozen backbone features scored through the standardize-svm-calibrate
/// chain.
pub struct FeatureSvmDetector {
    pub params: FeatureSvmParams,
    pub provider: Box<dyn BackboneProvider>,
}

/// Fit the chain on already-extracted train features. Labels are 0/1.
pub fn train_feature_svm_on_features(
    provider_name: &str,
    features: &Array2<f64>,
    labels: &[f64],
    sample_weights: &[f64],
    c: f64,
) -> Result<FeatureSvmParams, BaselineError> {
    let standardizer = Standardizer::fit(features)?;
    let scaled = standardizer.transform(features)?;
    let labels_pm1: Vec<f64> = labels.iter().map(|&y| if y >= 0.5 { 1.0 } else { -1.0 }).collect();
    let svm = LinearSvm::train(&scaled, &labels_pm1, sample_weights, c, 2000)?;
    let margins: Vec<f64> = (0..scaled.nrows())
        .map(|i| svm.margin(&scaled.row(i).to_vec()).expect("dim checked"))
        .collect();
    let calibration = SigmoidCalibration::fit(&margins, labels, 1000)?;
    Ok(FeatureSvmParams {
        provider_name: provider_name.to_string(),
        standardizer,
        svm,
        calibration,
    })
}

impl FeatureSvmDetector {
    pub fn score_features(&self, features: &[f64]) -> Result<f64, BaselineError> {
        let scaled = self.params.standardizer.transform_row(features)?;
        let margin = self.params.svm.margin(&scaled)?;
        Ok(self.params.calibration.probability(margin))
    }
}

impl Detector for FeatureSvmDetector {
    fn model_name(&self) -> String {
        "feature_svm".to_string()
    }

    fn score(&mut self, image: &RgbImage) -> Result<f64, ScoreError> {
        let features = self.provider.extract(image).map_err(ScoreError::from_err)?;
        self.score_features(&features).map_err(ScoreError::from_err)
    }
}
