//! Multi-channel uniform LBP features: the face crop is resized to 64x64,
//! converted to HSV and YCbCr, and each of the six channels yields a 59-bin
//! uniform-pattern histogram (58 uniform codes + 1 catch-all), normalized to
//! sum 1 and concatenated into a 354-vector. A two-class softmax classifier
//! on top produces the decision score.

use image::{DynamicImage, RgbImage};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::scoring::{Detector, ScoreError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbpConfig {
    pub crop_size: (u32, u32),
    pub radius: u32,
    pub neighbors: u32,
    pub bins_per_channel: usize,
}

impl Default for LbpConfig {
    fn default() -> Self {
        LbpConfig {
            crop_size: (64, 64),
            radius: 1,
            neighbors: 8,
            bins_per_channel: 59,
        }
    }
}

impl LbpConfig {
    /// Six channels (HSV + YCbCr) x 59 bins.
    pub fn feature_len(&self) -> usize {
        6 * self.bins_per_channel
    }
}

pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> [u8; 3] {
    let (rf, gf, bf) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = rf.max(gf).max(bf);
    let min = rf.min(gf).min(bf);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == rf {
        60.0 * (((gf - bf) / delta).rem_euclid(6.0))
    } else if max == gf {
        60.0 * ((bf - rf) / delta + 2.0)
    } else {
        60.0 * ((rf - gf) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [
        (h / 360.0 * 255.0).round().clamp(0.0, 255.0) as u8,
        (s * 255.0).round().clamp(0.0, 255.0) as u8,
        (max * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

/// BT.601 full-range conversion.
pub fn rgb_to_ycbcr(r: u8, g: u8, b: u8) -> [u8; 3] {
    let (rf, gf, bf) = (r as f64, g as f64, b as f64);
    let y = 0.299 * rf + 0.587 * gf + 0.114 * bf;
    let cb = 128.0 - 0.168736 * rf - 0.331264 * gf + 0.5 * bf;
    let cr = 128.0 + 0.5 * rf - 0.418688 * gf - 0.081312 * bf;
    [
        y.round().clamp(0.0, 255.0) as u8,
        cb.round().clamp(0.0, 255.0) as u8,
        cr.round().clamp(0.0, 255.0) as u8,
    ]
}

/// Circularly ordered 8-neighborhood offsets (radius 1).
const NEIGHBOR_OFFSETS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

/// Bit i is set when the center is strictly brighter than neighbor i, so a
/// constant region produces the all-zero pattern.
pub fn lbp_code_at(channel: &Array2<u8>, x: usize, y: usize, wrap: bool) -> Option<u8> {
    let (h, w) = channel.dim();
    let center = channel[[y, x]];
    let mut code = 0u8;
    for (i, (dx, dy)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let (mut nx, mut ny) = (x as i64 + dx, y as i64 + dy);
        if wrap {
            nx = nx.rem_euclid(w as i64);
            ny = ny.rem_euclid(h as i64);
        } else if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
            return None;
        }
        if center > channel[[ny as usize, nx as usize]] {
            code |= 1 << i;
        }
    }
    Some(code)
}

fn circular_transitions(code: u8) -> u32 {
    let rotated = code.rotate_left(1);
    (code ^ rotated).count_ones()
}

/// Map each 8-bit code to its uniform-pattern bin: the 58 patterns with at
/// most two circular transitions get their own bin (in ascending code order);
/// everything else shares bin 58.
pub fn uniform_bin_table() -> &'static [usize; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[usize; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [58usize; 256];
        let mut next = 0usize;
        for code in 0..=255u8 {
            if circular_transitions(code) <= 2 {
                table[code as usize] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next, 58);
        table
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderMode {
    /// Ignore pixels whose neighborhood leaves the image (the feature path).
    Skip,
    /// Toroidal wraparound; histograms become exactly shift-invariant.
    Wrap,
}

/// Normalized 59-bin uniform LBP histogram of one channel.
pub fn lbp_histogram(channel: &Array2<u8>, mode: BorderMode) -> Vec<f64> {
    let (h, w) = channel.dim();
    let table = uniform_bin_table();
    let mut hist = vec![0.0f64; 59];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let code = match mode {
                BorderMode::Wrap => lbp_code_at(channel, x, y, true),
                BorderMode::Skip => lbp_code_at(channel, x, y, false),
            };
            if let Some(code) = code {
                hist[table[code as usize]] += 1.0;
                count += 1;
            }
        }
    }
    if count > 0 {
        for v in &mut hist {
            *v /= count as f64;
        }
    }
    hist
}

fn channels_hsv_ycbcr(img: &RgbImage) -> [Array2<u8>; 6] {
    let (w, h) = img.dimensions();
    let mut out: [Array2<u8>; 6] =
        std::array::from_fn(|_| Array2::zeros((h as usize, w as usize)));
    for (x, y, px) in img.enumerate_pixels() {
        let hsv = rgb_to_hsv(px.0[0], px.0[1], px.0[2]);
        let ycbcr = rgb_to_ycbcr(px.0[0], px.0[1], px.0[2]);
        for c in 0..3 {
            out[c][[y as usize, x as usize]] = hsv[c];
            out[3 + c][[y as usize, x as usize]] = ycbcr[c];
        }
    }
    out
}

/// Concatenated per-channel uniform LBP histograms of the resized face crop.
/// The face is expected to be detected and cropped upstream.
pub fn lbp_features(image: &DynamicImage, config: &LbpConfig) -> Result<Vec<f64>, BaselineError> {
    if matches!(
        image,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    ) {
        return Err(BaselineError::NonRgbInput);
    }
    let rgb = image.to_rgb8();
    let resized = if rgb.dimensions() == config.crop_size {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            config.crop_size.0,
            config.crop_size.1,
            image::imageops::FilterType::CatmullRom,
        )
    };
    let channels = channels_hsv_ycbcr(&resized);
    let mut features = Vec::with_capacity(config.feature_len());
    for channel in &channels {
        features.extend(lbp_histogram(channel, BorderMode::Skip));
    }
    Ok(features)
}

/// Two-class linear model with a normalized-exponential output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    /// [2, dim]; class 0 = bona fide, class 1 = attack.
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; 2],
}

impl SoftmaxClassifier {
    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<[f64; 2], BaselineError> {
        if features.len() != self.dim() {
            return Err(BaselineError::FeatureDim {
                expected: self.dim(),
                got: features.len(),
            });
        }
        let mut logits = [self.bias[0], self.bias[1]];
        for k in 0..2 {
            for (w, x) in self.weights[k].iter().zip(features) {
                logits[k] += w * x;
            }
        }
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        Ok([e0 / (e0 + e1), e1 / (e0 + e1)])
    }

    /// Attack probability.
    pub fn score(&self, features: &[f64]) -> Result<f64, BaselineError> {
        Ok(self.predict_proba(features)?[1])
    }
}

/// Full-batch gradient descent on weighted cross-entropy. Constant features
/// degrade gracefully to the (weighted) class prior, with a warning.
pub fn train_lbp_classifier(
    features: &Array2<f64>,
    labels: &[f64],
    sample_weights: &[f64],
    iterations: usize,
    learning_rate: f64,
) -> Result<SoftmaxClassifier, BaselineError> {
    let (n, d) = features.dim();
    if n == 0 {
        return Err(BaselineError::Empty("feature matrix"));
    }
    assert_eq!(labels.len(), n);
    assert_eq!(sample_weights.len(), n);
    let n_attack = labels.iter().filter(|&&y| y >= 0.5).count();
    if n_attack == 0 || n_attack == n {
        return Err(BaselineError::SingleClass);
    }

    let variance_floor = 1e-12;
    let degenerate = (0..d).all(|j| {
        let col = features.column(j);
        let mean = col.sum() / n as f64;
        col.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n as f64 <= variance_floor
    });
    if degenerate {
        log::warn!("constant features; classifier falls back to the class prior");
        let wa: f64 = labels
            .iter()
            .zip(sample_weights)
            .filter(|(y, _)| **y >= 0.5)
            .map(|(_, w)| w)
            .sum();
        let wb: f64 = labels
            .iter()
            .zip(sample_weights)
            .filter(|(y, _)| **y < 0.5)
            .map(|(_, w)| w)
            .sum();
        let total = wa + wb;
        return Ok(SoftmaxClassifier {
            weights: vec![vec![0.0; d]; 2],
            bias: [(wb / total).max(1e-12).ln(), (wa / total).max(1e-12).ln()],
        });
    }

    let mut w = Array2::<f64>::zeros((2, d));
    let mut b = Array1::<f64>::zeros(2);
    for _ in 0..iterations {
        let mut grad_w = Array2::<f64>::zeros((2, d));
        let mut grad_b = Array1::<f64>::zeros(2);
        for i in 0..n {
            let x = features.row(i);
            let mut logits = [b[0], b[1]];
            for k in 0..2 {
                logits[k] += w.row(k).dot(&x);
            }
            let m = logits[0].max(logits[1]);
            let e0 = (logits[0] - m).exp();
            let e1 = (logits[1] - m).exp();
            let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
            let target = [1.0 - labels[i], labels[i]];
            for k in 0..2 {
                let delta = sample_weights[i] * (p[k] - target[k]) / n as f64;
                grad_b[k] += delta;
                grad_w.row_mut(k).scaled_add(delta, &x);
            }
        }
        w.scaled_add(-learning_rate, &grad_w);
        b.scaled_add(-learning_rate, &grad_b);
    }
    Ok(SoftmaxClassifier {
        weights: (0..2).map(|k| w.row(k).to_vec()).collect(),
        bias: [b[0], b[1]],
    })
}

/// LBP features + softmax classifier behind the common detector contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LbpDetector {
    pub config: LbpConfig,
    pub classifier: SoftmaxClassifier,
}

impl Detector for LbpDetector {
    fn model_name(&self) -> String {
        "lbp".to_string()
    }

    fn score(&mut self, image: &RgbImage) -> Result<f64, ScoreError> {
        let features = lbp_features(&DynamicImage::ImageRgb8(image.clone()), &self.config)
            .map_err(ScoreError::from_err)?;
        self.classifier.score(&features).map_err(ScoreError::from_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use ndarray::Array2;

    #[test]
    fn constant_image_is_one_hot_on_zero_pattern() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(64, 64, Rgb([120, 80, 40])));
        let cfg = LbpConfig::default();
        let features = lbp_features(&img, &cfg).unwrap();
        assert_eq!(features.len(), 354);
        let zero_bin = uniform_bin_table()[0];
        for c in 0..6 {
            let block = &features[c * 59..(c + 1) * 59];
            assert!((block[zero_bin] - 1.0).abs() < 1e-12, "channel {c}");
            assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn every_block_sums_to_one() {
        let mut img = RgbImage::new(64, 64);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0 = [
                ((x * 7 + y * 13) % 256) as u8,
                ((x * 3 + y * 5) % 256) as u8,
                ((x * 11 + y * 2) % 256) as u8,
            ];
        }
        let features =
            lbp_features(&DynamicImage::ImageRgb8(img), &LbpConfig::default()).unwrap();
        for c in 0..6 {
            let s: f64 = features[c * 59..(c + 1) * 59].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grayscale_input_rejected() {
        let gray = DynamicImage::ImageLuma8(image::GrayImage::new(64, 64));
        assert!(matches!(
            lbp_features(&gray, &LbpConfig::default()),
            Err(BaselineError::NonRgbInput)
        ));
    }

    #[test]
    fn uniform_table_has_58_uniform_patterns() {
        let table = uniform_bin_table();
        let own_bins: std::collections::BTreeSet<usize> =
            table.iter().copied().filter(|&b| b < 58).collect();
        assert_eq!(own_bins.len(), 58);
        // 0 (flat darker) and 255 (flat brighter) are both uniform.
        assert!(table[0] < 58);
        assert!(table[255] < 58);
        // A checker pattern like 0b01010101 has 8 transitions: catch-all bin.
        assert_eq!(table[0b0101_0101], 58);
    }

    #[test]
    fn checkerboard_histogram_matches_enumeration() {
        // 2x2-checkerboard channel; enumerate codes per pixel independently.
        let n = 16usize;
        let channel = Array2::from_shape_fn((n, n), |(y, x)| {
            if ((x / 2) + (y / 2)) % 2 == 0 {
                200u8
            } else {
                40u8
            }
        });
        let hist = lbp_histogram(&channel, BorderMode::Skip);
        let table = uniform_bin_table();
        let mut expected = vec![0.0f64; 59];
        let mut count = 0usize;
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let mut code = 0u8;
                for (i, (dx, dy)) in NEIGHBOR_OFFSETS.iter().enumerate() {
                    let nx = (x as i64 + dx) as usize;
                    let ny = (y as i64 + dy) as usize;
                    if channel[[y, x]] > channel[[ny, nx]] {
                        code |= 1 << i;
                    }
                }
                expected[table[code as usize]] += 1.0;
                count += 1;
            }
        }
        for v in &mut expected {
            *v /= count as f64;
        }
        assert_eq!(hist, expected);
    }

    #[test]
    fn toroidal_histogram_exactly_shift_invariant() {
        let n = 32usize;
        let base = Array2::from_shape_fn((n, n), |(y, x)| {
            (((x * 31 + y * 17) ^ (x * y)) % 256) as u8
        });
        let (sx, sy) = (5usize, 11usize);
        let shifted =
            Array2::from_shape_fn((n, n), |(y, x)| base[[(y + sy) % n, (x + sx) % n]]);
        let h1 = lbp_histogram(&base, BorderMode::Wrap);
        let h2 = lbp_histogram(&shifted, BorderMode::Wrap);
        assert_eq!(h1, h2);
    }

    #[test]
    fn softmax_separable_toy_reaches_full_accuracy() {
        let n = 20;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let (offset, label) = if i % 2 == 0 { (2.0, 1.0) } else { (-2.0, 0.0) };
            rows.push(vec![offset + (i as f64) * 0.01, -offset]);
            labels.push(label);
        }
        let features =
            Array2::from_shape_vec((n, 2), rows.into_iter().flatten().collect()).unwrap();
        let clf =
            train_lbp_classifier(&features, &labels, &vec![1.0; n], 500, 0.5).unwrap();
        for i in 0..n {
            let p = clf.score(&features.row(i).to_vec()).unwrap();
            assert_eq!(p >= 0.5, labels[i] >= 0.5, "sample {i}: p={p}");
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let clf = SoftmaxClassifier {
            weights: vec![vec![0.3, -0.2], vec![-0.1, 0.4]],
            bias: [0.05, -0.05],
        };
        let p = clf.predict_proba(&[1.0, 2.0]).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_1d_boundary_at_centroid_midpoint() {
        let values = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let labels = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let features = Array2::from_shape_vec((6, 1), values.to_vec()).unwrap();
        let clf =
            train_lbp_classifier(&features, &labels, &[1.0; 6], 2000, 0.5).unwrap();
        // Centroids at -2 and 2; the midpoint scores exactly 1/2.
        let p = clf.score(&[0.0]).unwrap();
        assert!((p - 0.5).abs() < 1e-6, "p={p}");
        assert!(clf.score(&[1.5]).unwrap() > 0.5);
        assert!(clf.score(&[-1.5]).unwrap() < 0.5);
    }

    #[test]
    fn degenerate_features_fall_back_to_prior() {
        let features = Array2::from_elem((8, 3), 0.7);
        let labels = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let clf =
            train_lbp_classifier(&features, &labels, &[1.0; 8], 100, 0.5).unwrap();
        let p = clf.predict_proba(&[0.7, 0.7, 0.7]).unwrap();
        assert!((p[1] - 0.25).abs() < 1e-9, "prior attack prob, got {}", p[1]);
    }

    #[test]
    fn single_class_rejected() {
        let features = Array2::from_elem((4, 2), 0.5);
        assert!(matches!(
            train_lbp_classifier(&features, &[1.0; 4], &[1.0; 4], 10, 0.5),
            Err(BaselineError::SingleClass)
        ));
    }
}
