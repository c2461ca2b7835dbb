//! Pixel-wise supervised morphing attack detector: a densely connected
//! backbone truncated to two dense blocks and two transition blocks, a 1x1
//! convolution head producing a per-cell attack probability map, and a fully
//! connected head producing the binary score. Training optimizes
//! `lambda * L_pw + (1 - lambda) * L_b` with binary cross-entropy on both
//! heads; the test-time score is the binary output alone.

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datakit::Split;
use crate::nn::init::Init;
use crate::nn::layers::{concat_channels, split_channels};
use crate::nn::{
    sigmoid, AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Module, ReLU,
    Sequential, StateVisitor,
};
use crate::trainkit::{TrainError, TrainSampleMeta, TrainableModel};

#[derive(Debug, Error)]
pub enum PwMadError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("probability {0} outside (0,1); clamp inputs before computing bce")]
    ProbabilityDomain(f64),
    #[error("binary target {0} is not 0 or 1")]
    BadTarget(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("nn error: {0}")]
    Nn(#[from] crate::nn::NnError),
}

/// Probabilities are clamped into [PROB_CLAMP, 1 - PROB_CLAMP] before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn clamp_prob(x: f64) -> f64 {
    if x < PROB_CLAMP {
        log::debug!("probability {x} clamped to {PROB_CLAMP}");
        PROB_CLAMP
    } else if x > 1.0 - PROB_CLAMP {
        log::debug!("probability {x} clamped to {}", 1.0 - PROB_CLAMP);
        1.0 - PROB_CLAMP
    } else {
        x
    }
}

/// Binary cross-entropy -[y log x + (1-y) log(1-x)].
pub fn bce(y: f64, x: f64) -> Result<f64, PwMadError> {
    if !(0.0..=1.0).contains(&y) || (y != 0.0 && y != 1.0) {
        return Err(PwMadError::BadTarget(y));
    }
    if x <= 0.0 || x >= 1.0 {
        return Err(PwMadError::ProbabilityDomain(x));
    }
    Ok(-(y * x.ln() + (1.0 - y) * (1.0 - x).ln()))
}

/// Per-channel normalization applied after scaling pixels to [0,1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5, 0.5, 0.5],
            std: [0.5, 0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PwMadConfig {
    /// Square input resolution in pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub bn_size: usize,
    /// Layers per dense block; each block is followed by a transition block.
    pub block_layers: Vec<usize>,
    /// Weight of the pixel-wise loss term.
    pub lambda: f64,
    pub normalization: Normalization,
}

impl Default for PwMadConfig {
    fn default() -> Self {
        // DenseNet-121 family parameters, truncated after the second block.
        PwMadConfig {
            input_size: 224,
            stem_channels: 64,
            growth_rate: 32,
            bn_size: 4,
            block_layers: vec![6, 12],
            lambda: 0.5,
            normalization: Normalization::default(),
        }
    }
}

impl PwMadConfig {
    /// Total downsampling: stem /4, then /2 per transition block.
    pub fn total_stride(&self) -> usize {
        4 * (1 << self.block_layers.len())
    }

    pub fn validate(&self) -> Result<(), PwMadError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PwMadError::InvalidConfig(format!(
                "lambda {} outside [0,1]",
                self.lambda
            )));
        }
        if self.block_layers.is_empty() || self.block_layers.iter().any(|&l| l == 0) {
            return Err(PwMadError::InvalidConfig(
                "block_layers must be nonempty with positive layer counts".into(),
            ));
        }
        if self.stem_channels == 0 || self.growth_rate == 0 || self.bn_size == 0 {
            return Err(PwMadError::InvalidConfig(
                "stem_channels, growth_rate, bn_size must be positive".into(),
            ));
        }
        let stride = self.total_stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(PwMadError::InvalidConfig(format!(
                "input size {} is not divisible by the total stride {stride}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn map_size(&self) -> Result<(usize, usize), PwMadError> {
        self.validate()?;
        let m = self.input_size / self.total_stride();
        Ok((m, m))
    }

    /// A small configuration handy for tests and desk-scale experiments.
    pub fn miniature(input_size: usize, block_layers: Vec<usize>) -> Self {
        PwMadConfig {
            input_size,
            stem_channels: 8,
            growth_rate: 4,
            bn_size: 2,
            block_layers,
            lambda: 0.5,
            normalization: Normalization::default(),
        }
    }
}

/// One dense layer: BN-ReLU-Conv1x1 bottleneck then BN-ReLU-Conv3x3, emitting
/// `growth_rate` new channels that get concatenated onto its input.
struct DenseLayer {
    seq: Sequential,
    in_ch: usize,
}

impl DenseLayer {
    fn new(in_ch: usize, growth: usize, bn_size: usize, init: &mut Init) -> Self {
        let inter = bn_size * growth;
        let mut seq = Sequential::new();
        seq.push(BatchNorm2d::new(in_ch));
        seq.push(ReLU::new());
        seq.push(Conv2d::new(in_ch, inter, 1, 1, 0, false, init));
        seq.push(BatchNorm2d::new(inter));
        seq.push(ReLU::new());
        seq.push(Conv2d::new(inter, growth, 3, 1, 1, false, init));
        DenseLayer { seq, in_ch }
    }
}

struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    fn new(in_ch: usize, num_layers: usize, growth: usize, bn_size: usize, init: &mut Init) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            layers.push(DenseLayer::new(in_ch + i * growth, growth, bn_size, init));
        }
        DenseBlock { layers }
    }

    fn forward(&mut self, x: &Array4<f64>, train: bool) -> Array4<f64> {
        let mut features = x.clone();
        for layer in &mut self.layers {
            let new = layer.seq.forward(&features, train);
            features = concat_channels(&[&features, &new]);
        }
        features
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            let growth = g.dim().1 - layer.in_ch;
            let parts = split_channels(&g, &[layer.in_ch, growth]);
            let gx = layer.seq.backward(&parts[1]);
            g = &parts[0] + &gx;
        }
        g
    }
}

fn transition(in_ch: usize, out_ch: usize, init: &mut Init) -> Sequential {
    let mut seq = Sequential::new();
    seq.push(BatchNorm2d::new(in_ch));
    seq.push(ReLU::new());
    seq.push(Conv2d::new(in_ch, out_ch, 1, 1, 0, false, init));
    seq.push(AvgPool2d::new(2, 2, 0));
    seq
}

/// Sigmoid logits of one forward pass.
pub struct PwMadLogits {
    /// [N, 1, mh, mw]
    pub map: Array4<f64>,
    /// [N]
    pub binary: Array1<f64>,
}

/// Probabilities (all strictly inside (0,1), sigmoid outputs).
#[derive(Debug, Clone)]
pub struct PwMadOutput {
    /// [N, mh, mw]
    pub pixel_map: Array3<f64>,
    /// [N]
    pub binary_score: Array1<f64>,
}

impl PwMadLogits {
    pub fn output(&self) -> PwMadOutput {
        let (n, _, mh, mw) = self.map.dim();
        let mut pixel_map = Array3::zeros((n, mh, mw));
        for i in 0..n {
            for y in 0..mh {
                for x in 0..mw {
                    pixel_map[[i, y, x]] = sigmoid(self.map[[i, 0, y, x]]);
                }
            }
        }
        PwMadOutput {
            pixel_map,
            binary_score: self.binary.mapv(sigmoid),
        }
    }
}

pub struct PwMadModel {
    pub config: PwMadConfig,
    stem: Sequential,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Sequential>,
    pixel_head: Conv2d,
    gap: GlobalAvgPool,
    binary_head: Linear,
    final_channels: usize,
}

impl PwMadModel {
    /// Build the network. Both heads start at zero so an untrained model
    /// scores exactly sigmoid(0) = 0.5.
    pub fn new(config: PwMadConfig, seed: u64) -> Result<Self, PwMadError> {
        config.validate()?;
        let mut init = Init::seeded(seed);
        let mut stem = Sequential::new();
        stem.push(Conv2d::new(3, config.stem_channels, 7, 2, 3, false, &mut init));
        stem.push(BatchNorm2d::new(config.stem_channels));
        stem.push(ReLU::new());
        stem.push(MaxPool2d::new(3, 2, 1));

        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut ch = config.stem_channels;
        for &layers in &config.block_layers {
            blocks.push(DenseBlock::new(ch, layers, config.growth_rate, config.bn_size, &mut init));
            ch += layers * config.growth_rate;
            let out = ch / 2;
            transitions.push(transition(ch, out, &mut init));
            ch = out;
        }

        let mut pixel_head = Conv2d::new(ch, 1, 1, 1, 0, true, &mut init);
        pixel_head.w.value.fill(0.0);
        if let Some(b) = &mut pixel_head.b {
            b.value.fill(0.0);
        }
        let mut binary_head = Linear::new(ch, 1, &mut init);
        binary_head.w.value.fill(0.0);
        binary_head.b.value.fill(0.0);

        Ok(PwMadModel {
            config,
            stem,
            blocks,
            transitions,
            pixel_head,
            gap: GlobalAvgPool::new(),
            binary_head,
            final_channels: ch,
        })
    }

    pub fn final_channels(&self) -> usize {
        self.final_channels
    }

    pub fn forward(&mut self, x: &Array4<f64>, train: bool) -> Result<PwMadLogits, PwMadError> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(PwMadError::ShapeMismatch {
                expected: format!("[N,3,{0},{0}]", self.config.input_size),
                got: format!("[N,{c},{h},{w}]"),
            });
        }
        let mut feat = self.stem.forward(x, train);
        for (block, trans) in self.blocks.iter_mut().zip(self.transitions.iter_mut()) {
            feat = block.forward(&feat, train);
            feat = trans.forward(&feat, train);
        }
        let map = self.pixel_head.forward(&feat, train);
        let pooled = self.gap.forward(&feat);
        let binary = self.binary_head.forward(&pooled);
        Ok(PwMadLogits {
            map,
            binary: binary.index_axis(Axis(1), 0).to_owned(),
        })
    }

    /// Backpropagate logit gradients; parameter gradients accumulate.
    pub fn backward(&mut self, grad_map: &Array4<f64>, grad_binary: &Array1<f64>) {
        let n = grad_binary.len();
        let gb = grad_binary.clone().into_shape_with_order((n, 1)).unwrap();
        let g_pooled = self.binary_head.backward(&gb);
        let g_feat_binary = self.gap.backward(&g_pooled);
        let g_feat_pixel = self.pixel_head.backward(grad_map);
        let mut g = g_feat_binary + g_feat_pixel;
        for (block, trans) in self.blocks.iter_mut().zip(self.transitions.iter_mut()).rev() {
            g = trans.backward(&g);
            g = block.backward(&g);
        }
        self.stem.backward(&g);
    }

    fn visit_all(&mut self, v: &mut dyn StateVisitor) {
        self.stem.visit_state("stem", v);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (j, layer) in block.layers.iter_mut().enumerate() {
                layer.seq.visit_state(&format!("block{i}.layer{j}"), v);
            }
        }
        for (i, trans) in self.transitions.iter_mut().enumerate() {
            trans.visit_state(&format!("transition{i}"), v);
        }
        self.pixel_head.visit_state("pixel_head", v);
        self.binary_head.visit_state("binary_head", v);
    }

    pub fn collect_params_internal<'a>(&'a mut self, out: &mut Vec<&'a mut crate::nn::Param>) {
        self.stem.collect_params(out);
        for block in &mut self.blocks {
            for layer in &mut block.layers {
                layer.seq.collect_params(out);
            }
        }
        for trans in &mut self.transitions {
            trans.collect_params(out);
        }
        self.pixel_head.collect_params(out);
        self.binary_head.collect_params(out);
    }

    pub fn state(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        self.visit_all(&mut |name: &str, t: &mut ArrayD<f64>| {
            out.push((name.to_string(), t.clone()));
        });
        out
    }

    pub fn set_state(&mut self, entries: &[(String, ArrayD<f64>)]) -> Result<(), PwMadError> {
        let map: std::collections::BTreeMap<&str, &ArrayD<f64>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut errors: Vec<String> = Vec::new();
        self.visit_all(&mut |name: &str, t: &mut ArrayD<f64>| match map.get(name) {
            Some(src) if src.shape() == t.shape() => t.assign(src),
            Some(src) => errors.push(format!(
                "{name}: shape {:?} vs {:?}",
                src.shape(),
                t.shape()
            )),
            None => errors.push(format!("{name}: missing")),
        });
        if errors.is_empty() {
            Ok(())
        } else {
            Err(PwMadError::Checkpoint(errors.join("; ")))
        }
    }

    /// Score one preprocessed image (eval mode). Higher = more attack-like.
    pub fn score_array(&mut self, image: &Array3<f64>) -> Result<f64, PwMadError> {
        let (c, h, w) = image.dim();
        let x = image
            .clone()
            .into_shape_with_order((1, c, h, w))
            .expect("batch of one");
        let logits = self.forward(&x, false)?;
        Ok(sigmoid(logits.binary[0]))
    }

    /// Preprocess then score an image file's pixels.
    pub fn score_image(&mut self, image: &RgbImage) -> Result<f64, PwMadError> {
        let arr = preprocess(image, self.config.input_size, &self.config.normalization);
        self.score_array(&arr)
    }

    pub fn save_checkpoint(&mut self, path: &std::path::Path) -> Result<(), PwMadError> {
        let meta = serde_json::json!({
            "model": "pwmad",
            "config": self.config,
        });
        crate::nn::checkpoint::save(path, &meta, &self.state())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, PwMadError> {
        let (meta, state) = crate::nn::checkpoint::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("pwmad") {
            return Err(PwMadError::Checkpoint(format!(
                "{} is not a pwmad checkpoint",
                path.display()
            )));
        }
        let config: PwMadConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| PwMadError::Checkpoint("missing config in header".into()))?,
        )
        .map_err(|e| PwMadError::Checkpoint(format!("config decode: {e}")))?;
        let mut model = PwMadModel::new(config, 0)?;
        model.set_state(&state)?;
        Ok(model)
    }
}

/// Overall training loss for one sample: `lambda * mean-cell BCE(pixel map)
/// + (1 - lambda) * BCE(binary)`. Probabilities are clamped before logs.
pub fn overall_loss(
    pixel_map: &Array2<f64>,
    binary_score: f64,
    pixel_target: &Array2<f64>,
    binary_target: f64,
    lambda: f64,
) -> Result<f64, PwMadError> {
    if pixel_map.dim() != pixel_target.dim() {
        return Err(PwMadError::ShapeMismatch {
            expected: format!("{:?}", pixel_target.dim()),
            got: format!("{:?}", pixel_map.dim()),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PwMadError::InvalidConfig(format!("lambda {lambda}")));
    }
    let mut pw = 0.0;
    for (x, y) in pixel_map.iter().zip(pixel_target.iter()) {
        pw += bce(*y, clamp_prob(*x))?;
    }
    pw /= pixel_map.len() as f64;
    let lb = bce(binary_target, clamp_prob(binary_score))?;
    Ok(lambda * pw + (1.0 - lambda) * lb)
}

/// Resize and normalize an image into a [3,H,W] tensor.
pub fn preprocess(image: &RgbImage, input_size: usize, norm: &Normalization) -> Array3<f64> {
    let resized = if image.width() as usize == input_size && image.height() as usize == input_size {
        image.clone()
    } else {
        image::imageops::resize(
            image,
            input_size as u32,
            input_size as u32,
            image::imageops::FilterType::CatmullRom,
        )
    };
    let mut out = Array3::zeros((3, input_size, input_size));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            let v = px.0[c] as f64 / 255.0;
            out[[c, y as usize, x as usize]] = (v - norm.mean[c]) / norm.std[c];
        }
    }
    out
}

/// One training sample: preprocessed image plus its targets.
pub struct PwMadSample {
    pub image_id: String,
    pub image: Array3<f64>,
    pub pixel_target: Array2<f64>,
    pub binary_target: f64,
    pub split: Split,
}

impl TrainSampleMeta for PwMadSample {
    fn binary_label(&self) -> f64 {
        self.binary_target
    }

    fn split(&self) -> Split {
        self.split
    }
}

fn stack_batch(batch: &[(&PwMadSample, f64)], input_size: usize) -> Array4<f64> {
    let n = batch.len();
    let mut x = Array4::zeros((n, 3, input_size, input_size));
    for (i, (s, _)) in batch.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&s.image);
    }
    x
}

impl PwMadModel {
    /// Weighted batch loss; `train_mode` controls batch-norm statistics.
    fn batch_loss(
        &mut self,
        logits: &PwMadLogits,
        batch: &[(&PwMadSample, f64)],
    ) -> Result<f64, PwMadError> {
        let n = batch.len() as f64;
        let mut total = 0.0;
        for (i, (s, w)) in batch.iter().enumerate() {
            let map_i = logits
                .map
                .index_axis(Axis(0), i)
                .index_axis(Axis(0), 0)
                .mapv(sigmoid);
            let loss = overall_loss(
                &map_i,
                sigmoid(logits.binary[i]),
                &s.pixel_target,
                s.binary_target,
                self.config.lambda,
            )?;
            total += w * loss;
        }
        Ok(total / n)
    }
}

impl crate::scoring::Detector for PwMadModel {
    fn model_name(&self) -> String {
        "pwmad".to_string()
    }

    fn score(&mut self, image: &RgbImage) -> Result<f64, crate::scoring::ScoreError> {
        self.score_image(image).map_err(crate::scoring::ScoreError::from_err)
    }
}

impl TrainableModel for PwMadModel {
    type Sample = PwMadSample;

    fn zero_grads(&mut self) {
        let mut params = Vec::new();
        self.collect_params_internal(&mut params);
        for p in params {
            p.zero_grad();
        }
    }

    fn forward_backward(&mut self, batch: &[(&PwMadSample, f64)]) -> Result<f64, TrainError> {
        let lambda = self.config.lambda;
        let x = stack_batch(batch, self.config.input_size);
        let logits = self
            .forward(&x, true)
            .map_err(|e| TrainError::Model(e.to_string()))?;
        let loss = self
            .batch_loss(&logits, batch)
            .map_err(|e| TrainError::Model(e.to_string()))?;

        let (n, _, mh, mw) = logits.map.dim();
        let cells = (mh * mw) as f64;
        let mut grad_map = Array4::zeros((n, 1, mh, mw));
        let mut grad_bin = Array1::zeros(n);
        for (i, (s, w)) in batch.iter().enumerate() {
            if s.pixel_target.dim() != (mh, mw) {
                return Err(TrainError::Model(format!(
                    "pixel target {:?} does not match map {mh}x{mw}",
                    s.pixel_target.dim()
                )));
            }
            for y in 0..mh {
                for xx in 0..mw {
                    let p = sigmoid(logits.map[[i, 0, y, xx]]);
                    grad_map[[i, 0, y, xx]] =
                        w * lambda * (p - s.pixel_target[[y, xx]]) / cells / n as f64;
                }
            }
            let p = sigmoid(logits.binary[i]);
            grad_bin[i] = w * (1.0 - lambda) * (p - s.binary_target) / n as f64;
        }
        self.backward(&grad_map, &grad_bin);
        Ok(loss)
    }

    fn eval_loss(&mut self, batch: &[(&PwMadSample, f64)]) -> Result<f64, TrainError> {
        let x = stack_batch(batch, self.config.input_size);
        let logits = self
            .forward(&x, false)
            .map_err(|e| TrainError::Model(e.to_string()))?;
        self.batch_loss(&logits, batch)
            .map_err(|e| TrainError::Model(e.to_string()))
    }

    fn predict(&mut self, sample: &PwMadSample) -> Result<f64, TrainError> {
        self.score_array(&sample.image)
            .map_err(|e| TrainError::Model(e.to_string()))
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut crate::nn::Param>) {
        self.collect_params_internal(out);
    }

    fn export_state(&mut self) -> Vec<(String, ArrayD<f64>)> {
        self.state()
    }

    fn import_state(&mut self, state: &[(String, ArrayD<f64>)]) -> Result<(), TrainError> {
        self.set_state(state).map_err(|e| TrainError::State(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
