//! Simulated re-digitization: a seeded, ordered operator chain standing in
//! for a physical print-and-scan cycle. Output dimensions always equal input
//! dimensions, and the whole chain is deterministic given (image, profile).

use image::codecs::jpeg::JpegEncoder;
use image::{imageops, DynamicImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RedigitizationStep {
    /// Optical softness of the print/scan cycle.
    GaussianBlur { sigma: f64 },
    /// Global luminance/color response shift: per-channel gain around a
    /// contrast pivot of 128, then an additive brightness offset.
    ColorShift {
        brightness: f64,
        contrast: f64,
        gains: [f64; 3],
    },
    /// Additive Gaussian print-grain noise.
    Grain { stddev: f64 },
    /// Resample down by `factor` and back up, simulating a lower scan dpi.
    Resample { factor: f64 },
    /// Lossy re-encode at the given quality.
    JpegRecompress { quality: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedigitizationProfile {
    pub seed: u64,
    pub steps: Vec<RedigitizationStep>,
}

impl Default for RedigitizationProfile {
    fn default() -> Self {
        RedigitizationProfile {
            seed: 0,
            steps: vec![
                RedigitizationStep::GaussianBlur { sigma: 0.8 },
                RedigitizationStep::ColorShift {
                    brightness: 3.0,
                    contrast: 0.97,
                    gains: [1.02, 1.0, 0.98],
                },
                RedigitizationStep::Grain { stddev: 3.0 },
                RedigitizationStep::Resample { factor: 0.75 },
                RedigitizationStep::JpegRecompress { quality: 88 },
            ],
        }
    }
}

impl RedigitizationProfile {
    /// Empty chain: output equals input.
    pub fn identity() -> Self {
        RedigitizationProfile {
            seed: 0,
            steps: Vec::new(),
        }
    }

    /// Same chain, different seed. Dataset generation derives a per-image
    /// seed so grain patterns differ across images but stay reproducible.
    pub fn reseeded(&self, seed: u64) -> Self {
        RedigitizationProfile {
            seed,
            steps: self.steps.clone(),
        }
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self, super::MorphError> {
        let data = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&data)?)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<(), super::MorphError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn step_rng(profile_seed: u64, step_index: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(profile_seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(step_index as u64 + 1)))
}

pub fn simulate_redigitization(image: &RgbImage, profile: &RedigitizationProfile) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut current = image.clone();
    for (i, step) in profile.steps.iter().enumerate() {
        current = match step {
            RedigitizationStep::GaussianBlur { sigma } => {
                if *sigma > 0.0 {
                    imageops::blur(&current, *sigma as f32)
                } else {
                    current
                }
            }
            RedigitizationStep::ColorShift {
                brightness,
                contrast,
                gains,
            } => {
                let mut out = current;
                for px in out.pixels_mut() {
                    for c in 0..3 {
                        let v = px.0[c] as f64;
                        let shifted = (v - 128.0) * contrast * gains[c] + 128.0 + brightness;
                        px.0[c] = shifted.round().clamp(0.0, 255.0) as u8;
                    }
                }
                out
            }
            RedigitizationStep::Grain { stddev } => {
                let mut rng = step_rng(profile.seed, i);
                let normal = Normal::new(0.0, *stddev).expect("valid stddev");
                let mut out = current;
                for px in out.pixels_mut() {
                    for c in 0..3 {
                        let noisy = px.0[c] as f64 + normal.sample(&mut rng);
                        px.0[c] = noisy.round().clamp(0.0, 255.0) as u8;
                    }
                }
                out
            }
            RedigitizationStep::Resample { factor } => {
                let dw = ((w as f64 * factor).round() as u32).max(1);
                let dh = ((h as f64 * factor).round() as u32).max(1);
                let small = imageops::resize(&current, dw, dh, imageops::FilterType::CatmullRom);
                imageops::resize(&small, w, h, imageops::FilterType::CatmullRom)
            }
            RedigitizationStep::JpegRecompress { quality } => {
                let mut buf = Vec::new();
                let encoder = JpegEncoder::new_with_quality(&mut buf, (*quality).clamp(1, 100));
                DynamicImage::ImageRgb8(current.clone())
                    .write_with_encoder(encoder)
                    .expect("in-memory jpeg encode");
                image::load_from_memory(&buf)
                    .expect("in-memory jpeg decode")
                    .to_rgb8()
            }
        };
    }
    debug_assert_eq!(current.dimensions(), (w, h));
    current
}
