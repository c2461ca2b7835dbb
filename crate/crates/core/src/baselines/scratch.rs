//! From-scratch trainable CNN with inception-style parallel branches. The
//! registry builds a named architecture without any external weights; the
//! classifier is a two-class softmax head and the attack probability is the
//! detector score. The penultimate pooled features double as the backbone
//! feature vector for provider assets.

use image::RgbImage;
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::datakit::Split;
use crate::nn::init::Init;
use crate::nn::{
    AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Module, ParallelConcat,
    ReLU, Sequential, StateVisitor,
};
use crate::pwmad::{preprocess, Normalization};
use crate::scoring::{Detector, ScoreError};
use crate::trainkit::{TrainError, TrainSampleMeta, TrainableModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScratchSpec {
    pub architecture: String,
    pub input_size: usize,
    /// Base branch width in channels.
    pub width: usize,
    pub normalization: Normalization,
}

impl Default for ScratchSpec {
    fn default() -> Self {
        ScratchSpec {
            architecture: "inception".to_string(),
            input_size: 64,
            width: 8,
            normalization: Normalization::default(),
        }
    }
}

fn conv_bn_relu(seq: &mut Sequential, c_in: usize, c_out: usize, k: usize, s: usize, p: usize, init: &mut Init) {
    seq.push(Conv2d::new(c_in, c_out, k, s, p, false, init));
    seq.push(BatchNorm2d::new(c_out));
    seq.push(ReLU::new());
}

/// Four parallel branches: 1x1, 1x1-3x3, 1x1-3x3-3x3, pool-1x1. Output 4w.
fn inception_block(c_in: usize, w: usize, init: &mut Init) -> ParallelConcat {
    let mut b1 = Sequential::new();
    conv_bn_relu(&mut b1, c_in, w, 1, 1, 0, init);
    let mut b2 = Sequential::new();
    conv_bn_relu(&mut b2, c_in, w, 1, 1, 0, init);
    conv_bn_relu(&mut b2, w, w, 3, 1, 1, init);
    let mut b3 = Sequential::new();
    conv_bn_relu(&mut b3, c_in, w, 1, 1, 0, init);
    conv_bn_relu(&mut b3, w, w, 3, 1, 1, init);
    conv_bn_relu(&mut b3, w, w, 3, 1, 1, init);
    let mut b4 = Sequential::new();
    b4.push(AvgPool2d::new(3, 1, 1));
    conv_bn_relu(&mut b4, c_in, w, 1, 1, 0, init);
    ParallelConcat::new(vec![b1, b2, b3, b4])
}

/// Stride-2 branches plus a pooled pass-through. Output 2w + c_in.
fn reduction_block(c_in: usize, w: usize, init: &mut Init) -> ParallelConcat {
    let mut b1 = Sequential::new();
    conv_bn_relu(&mut b1, c_in, w, 3, 2, 1, init);
    let mut b2 = Sequential::new();
    conv_bn_relu(&mut b2, c_in, w, 1, 1, 0, init);
    conv_bn_relu(&mut b2, w, w, 3, 2, 1, init);
    let mut b3 = Sequential::new();
    b3.push(MaxPool2d::new(3, 2, 1));
    ParallelConcat::new(vec![b1, b2, b3])
}

pub struct ScratchModel {
    pub spec: ScratchSpec,
    features: Sequential,
    gap: GlobalAvgPool,
    classifier: Linear,
    final_channels: usize,
}

/// Build a named architecture from scratch (no external weights involved).
pub fn build_scratch(spec: &ScratchSpec, seed: u64) -> Result<ScratchModel, BaselineError> {
    if spec.architecture != "inception" {
        return Err(BaselineError::UnknownArchitecture(spec.architecture.clone()));
    }
    if spec.width == 0 || spec.input_size == 0 || spec.input_size % 8 != 0 {
        return Err(BaselineError::UnknownArchitecture(format!(
            "inception needs width > 0 and input divisible by 8, got width {} input {}",
            spec.width, spec.input_size
        )));
    }
    let w = spec.width;
    let mut init = Init::seeded(seed);
    let mut features = Sequential::new();
    // Stem: /4.
    conv_bn_relu(&mut features, 3, w, 3, 2, 1, &mut init);
    conv_bn_relu(&mut features, w, w, 3, 1, 1, &mut init);
    features.push(MaxPool2d::new(3, 2, 1));
    features.push(inception_block(w, w, &mut init));
    features.push(reduction_block(4 * w, w, &mut init));
    features.push(inception_block(6 * w, w, &mut init));
    let final_channels = 4 * w;
    let classifier = Linear::new(final_channels, 2, &mut init);
    Ok(ScratchModel {
        spec: spec.clone(),
        features,
        gap: GlobalAvgPool::new(),
        classifier,
        final_channels,
    })
}

fn softmax2(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = Array2::zeros(logits.raw_dim());
    for i in 0..logits.nrows() {
        let m = logits[[i, 0]].max(logits[[i, 1]]);
        let e0 = (logits[[i, 0]] - m).exp();
        let e1 = (logits[[i, 1]] - m).exp();
        p[[i, 0]] = e0 / (e0 + e1);
        p[[i, 1]] = e1 / (e0 + e1);
    }
    p
}

impl ScratchModel {
    pub fn final_channels(&self) -> usize {
        self.final_channels
    }

    fn stack(&self, batch: &[(&ImageSample, f64)]) -> Array4<f64> {
        let s = self.spec.input_size;
        let mut x = Array4::zeros((batch.len(), 3, s, s));
        for (i, (sample, _)) in batch.iter().enumerate() {
            x.index_axis_mut(Axis(0), i).assign(&sample.image);
        }
        x
    }

    pub fn forward_logits(&mut self, x: &Array4<f64>, train: bool) -> Array2<f64> {
        let feat = self.features.forward(x, train);
        let pooled = self.gap.forward(&feat);
        self.classifier.forward(&pooled)
    }

    fn backward_logits(&mut self, grad_logits: &Array2<f64>) {
        let g_pooled = self.classifier.backward(grad_logits);
        let g_feat = self.gap.backward(&g_pooled);
        self.features.backward(&g_feat);
    }

    /// Pooled penultimate features of one image (eval mode).
    pub fn extract_features(&mut self, image: &RgbImage) -> Vec<f64> {
        let arr = preprocess(image, self.spec.input_size, &self.spec.normalization);
        let (c, h, w) = arr.dim();
        let x = arr.into_shape_with_order((1, c, h, w)).expect("batch of one");
        let feat = self.features.forward(&x, false);
        let pooled = self.gap.forward(&feat);
        pooled.row(0).to_vec()
    }

    pub fn score_array(&mut self, image: &Array3<f64>) -> f64 {
        let (c, h, w) = image.dim();
        let x = image
            .clone()
            .into_shape_with_order((1, c, h, w))
            .expect("batch of one");
        let logits = self.forward_logits(&x, false);
        softmax2(&logits)[[0, 1]]
    }

    fn visit_all(&mut self, v: &mut dyn StateVisitor) {
        self.features.visit_state("features", v);
        self.classifier.visit_state("classifier", v);
    }

    pub fn save_checkpoint(&mut self, path: &std::path::Path) -> Result<(), BaselineError> {
        let meta = serde_json::json!({
            "model": "scratch",
            "spec": self.spec,
        });
        let mut state = Vec::new();
        self.visit_all(&mut |name: &str, t: &mut ArrayD<f64>| {
            state.push((name.to_string(), t.clone()));
        });
        crate::nn::checkpoint::save(path, &meta, &state)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, BaselineError> {
        let (meta, state) = crate::nn::checkpoint::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("scratch") {
            return Err(BaselineError::Nn(crate::nn::NnError::Checkpoint(format!(
                "{} is not a scratch checkpoint",
                path.display()
            ))));
        }
        let spec: ScratchSpec = serde_json::from_value(
            meta.get("spec")
                .cloned()
                .ok_or_else(|| crate::nn::NnError::Checkpoint("missing spec".into()))?,
        )?;
        let mut model = build_scratch(&spec, 0)?;
        model.import_state(&state).map_err(BaselineError::Train)?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image_id: String,
    pub image: Array3<f64>,
    pub binary_target: f64,
    pub split: Split,
}

impl TrainSampleMeta for ImageSample {
    fn binary_label(&self) -> f64 {
        self.binary_target
    }

    fn split(&self) -> Split {
        self.split
    }
}

impl TrainableModel for ScratchModel {
    type Sample = ImageSample;

    fn zero_grads(&mut self) {
        let mut params = Vec::new();
        self.collect_params(&mut params);
        for p in params {
            p.zero_grad();
        }
    }

    fn forward_backward(&mut self, batch: &[(&ImageSample, f64)]) -> Result<f64, TrainError> {
        let x = self.stack(batch);
        let logits = self.forward_logits(&x, true);
        let p = softmax2(&logits);
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = Array2::zeros(logits.raw_dim());
        for (i, (s, w)) in batch.iter().enumerate() {
            let target = [1.0 - s.binary_target, s.binary_target];
            for k in 0..2 {
                loss -= w * target[k] * p[[i, k]].max(1e-12).ln() / n;
                grad[[i, k]] = w * (p[[i, k]] - target[k]) / n;
            }
        }
        self.backward_logits(&grad);
        Ok(loss)
    }

    fn eval_loss(&mut self, batch: &[(&ImageSample, f64)]) -> Result<f64, TrainError> {
        let x = self.stack(batch);
        let logits = self.forward_logits(&x, false);
        let p = softmax2(&logits);
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for (i, (s, w)) in batch.iter().enumerate() {
            let target = [1.0 - s.binary_target, s.binary_target];
            for k in 0..2 {
                loss -= w * target[k] * p[[i, k]].max(1e-12).ln() / n;
            }
        }
        Ok(loss)
    }

    fn predict(&mut self, sample: &ImageSample) -> Result<f64, TrainError> {
        Ok(self.score_array(&sample.image))
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut crate::nn::Param>) {
        self.features.collect_params(out);
        self.classifier.collect_params(out);
    }

    fn export_state(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit_all(&mut |name: &str, t: &mut ArrayD<f64>| {
            out.push((name.to_string(), t.clone()));
        });
        out
    }

    fn import_state(&mut self, state: &[(String, ArrayD<f64>)]) -> Result<(), TrainError> {
        let map: std::collections::BTreeMap<&str, &ArrayD<f64>> =
            state.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut errors: Vec<String> = Vec::new();
        self.visit_all(&mut |name: &str, t: &mut ArrayD<f64>| match map.get(name) {
            Some(src) if src.shape() == t.shape() => t.assign(src),
            Some(src) => errors.push(format!("{name}: shape {:?} vs {:?}", src.shape(), t.shape())),
            None => errors.push(format!("{name}: missing")),
        });
        if errors.is_empty() {
            Ok(())
        } else {
            Err(TrainError::State(errors.join("; ")))
        }
    }
}

impl Detector for ScratchModel {
    fn model_name(&self) -> String {
        "scratch".to_string()
    }

    fn score(&mut self, image: &RgbImage) -> Result<f64, ScoreError> {
        let arr = preprocess(image, self.spec.input_size, &self.spec.normalization);
        Ok(self.score_array(&arr))
    }
}
