//! Synthetic face-like corpora for demos and desk-scale pipeline runs, plus
//! the planted-artifact toy set used for training sanity checks. Everything
//! is drawn procedurally from a seed: images, landmark records, and identity
//! metadata stay mutually consistent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{IdentityMetadata, Label};
use crate::morphgen::{save_landmark_cache, LandmarkSet, MorphError, Point};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_size: u32,
    pub seed: u64,
    /// Fraction of images rendered with a skewed nose so the frontality
    /// filter has something to reject.
    pub non_frontal_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            identities: 14,
            images_per_identity: 3,
            image_size: 256,
            seed: 1234,
            non_frontal_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub bonafide_dir: PathBuf,
    pub landmarks_file: PathBuf,
    pub metadata_file: PathBuf,
    pub image_ids: Vec<String>,
}

struct FaceParams {
    skin: [f64; 3],
    eye_color: [f64; 3],
    background: f64,
    face_rx: f64,
    face_ry: f64,
    eye_dx: f64,
    eye_dy: f64,
    eye_r: f64,
    nose_len: f64,
    mouth_w: f64,
    texture_freq: (f64, f64),
    texture_amp: f64,
}

fn identity_params(rng: &mut ChaCha12Rng) -> FaceParams {
    FaceParams {
        skin: [
            rng.gen_range(150.0..230.0),
            rng.gen_range(110.0..190.0),
            rng.gen_range(90.0..170.0),
        ],
        eye_color: [
            rng.gen_range(20.0..90.0),
            rng.gen_range(40.0..120.0),
            rng.gen_range(60.0..160.0),
        ],
        background: rng.gen_range(30.0..90.0),
        face_rx: rng.gen_range(0.30..0.38),
        face_ry: rng.gen_range(0.36..0.44),
        eye_dx: rng.gen_range(0.20..0.25),
        eye_dy: rng.gen_range(0.10..0.16),
        eye_r: rng.gen_range(0.035..0.055),
        nose_len: rng.gen_range(0.10..0.16),
        mouth_w: rng.gen_range(0.12..0.20),
        texture_freq: (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25)),
        texture_amp: rng.gen_range(4.0..14.0),
    }
}

/// Render one face; returns the image and its landmark set. `nose_skew`
/// shifts the nose horizontally (in face-width units) to break frontality.
fn render_face(
    params: &FaceParams,
    size: u32,
    jitter: (f64, f64),
    brightness: f64,
    nose_skew: f64,
) -> (RgbImage, LandmarkSet) {
    let s = size as f64;
    let cx = s * 0.5 + jitter.0;
    let cy = s * 0.5 + jitter.1;
    let rx = params.face_rx * s;
    let ry = params.face_ry * s;
    let eye_y = cy - params.eye_dy * s;
    let eye_lx = cx - params.eye_dx * s;
    let eye_rx = cx + params.eye_dx * s;
    let eye_r = params.eye_r * s;
    let nose_top = Point::new(cx + nose_skew * s, eye_y + 0.06 * s);
    let nose_bottom_y = nose_top.y + params.nose_len * s;
    let mouth_y = nose_bottom_y + 0.08 * s;
    let mouth_w = params.mouth_w * s;

    let mut img = RgbImage::new(size, size);
    for (px, py, pixel) in img.enumerate_pixels_mut() {
        let x = px as f64 + 0.5;
        let y = py as f64 + 0.5;
        let in_face = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0;
        let mut rgb = if in_face {
            let texture = params.texture_amp
                * (params.texture_freq.0 * x).sin()
                * (params.texture_freq.1 * y).cos();
            [
                params.skin[0] + texture,
                params.skin[1] + texture,
                params.skin[2] + texture,
            ]
        } else {
            let g = params.background + 10.0 * ((x + y) / s);
            [g, g, g]
        };
        for (ex, ey) in [(eye_lx, eye_y), (eye_rx, eye_y)] {
            if (x - ex).powi(2) + (y - ey).powi(2) <= eye_r * eye_r {
                rgb = params.eye_color;
            }
        }
        // Nose: a darkened wedge from nose_top down.
        if y >= nose_top.y && y <= nose_bottom_y {
            let t = (y - nose_top.y) / (nose_bottom_y - nose_top.y);
            let half_w = 1.5 + t * 0.035 * s;
            if (x - nose_top.x).abs() <= half_w {
                for c in &mut rgb {
                    *c *= 0.82;
                }
            }
        }
        // Mouth: a flat dark ellipse.
        if ((x - cx) / mouth_w).powi(2) + ((y - mouth_y) / (0.02 * s)).powi(2) <= 1.0 {
            rgb = [140.0, 60.0, 70.0];
        }
        pixel.0 = [
            (rgb[0] + brightness).round().clamp(0.0, 255.0) as u8,
            (rgb[1] + brightness).round().clamp(0.0, 255.0) as u8,
            (rgb[2] + brightness).round().clamp(0.0, 255.0) as u8,
        ];
    }

    // Outline landmarks: 8 points on the face ellipse, eyes, nose tip, mouth
    // corners. Point count is constant across the corpus.
    let mut points = Vec::new();
    for k in 0..8 {
        let angle = std::f64::consts::TAU * k as f64 / 8.0;
        points.push(Point::new(cx + rx * angle.cos(), cy + ry * angle.sin()));
    }
    points.push(Point::new(eye_lx, eye_y));
    points.push(Point::new(eye_rx, eye_y));
    points.push(Point::new(nose_top.x, nose_bottom_y));
    points.push(Point::new(cx - mouth_w, mouth_y));
    points.push(Point::new(cx + mouth_w, mouth_y));
    let landmarks = LandmarkSet {
        points,
        eye_left: Point::new(eye_lx, eye_y),
        eye_right: Point::new(eye_rx, eye_y),
        nose_top,
    };
    (img, landmarks)
}

/// Generate a corpus under `dir`: bona fide PNGs, a landmark cache, and
/// identity metadata (with an alternating gender attribute).
pub fn generate_corpus(dir: &Path, params: &SynthParams) -> Result<SynthCorpus, MorphError> {
    let bonafide_dir = dir.join("bonafide");
    std::fs::create_dir_all(&bonafide_dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    let mut landmarks = BTreeMap::new();
    let mut metadata = IdentityMetadata::default();
    let mut image_ids = Vec::new();
    let total = params.identities * params.images_per_identity;
    let n_skewed = (total as f64 * params.non_frontal_fraction).round() as usize;
    let mut rendered = 0usize;
    for i in 0..params.identities {
        let identity = format!("subj{i:03}");
        let face = identity_params(&mut rng);
        for j in 0..params.images_per_identity {
            let image_id = format!("bf_{i:03}_{j}");
            let jitter = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let brightness = rng.gen_range(-10.0..10.0);
            // Skew the tail of the corpus so rejection cases exist.
            let skew = if rendered >= total - n_skewed {
                0.06
            } else {
                rng.gen_range(-0.004..0.004)
            };
            let (img, lms) = render_face(&face, params.image_size, jitter, brightness, skew);
            img.save(bonafide_dir.join(format!("{image_id}.png")))?;
            landmarks.insert(image_id.clone(), lms);
            metadata.images.insert(image_id.clone(), vec![identity.clone()]);
            metadata
                .attributes
                .insert(image_id.clone(), if i % 2 == 0 { "m".into() } else { "f".into() });
            image_ids.push(image_id);
            rendered += 1;
        }
    }
    let landmarks_file = dir.join("landmarks.jsonl");
    save_landmark_cache(&landmarks_file, &landmarks)?;
    let metadata_file = dir.join("metadata.json");
    metadata
        .save(&metadata_file)
        .map_err(|e| MorphError::DegenerateLandmarks(e.to_string()))?;
    Ok(SynthCorpus {
        bonafide_dir,
        landmarks_file,
        metadata_file,
        image_ids,
    })
}

/// Toy set for overfit sanity checks: smooth low-frequency "clean" images
/// versus the same content with a planted high-frequency checker artifact.
pub fn toy_artifact_images(
    n_per_class: usize,
    size: u32,
    seed: u64,
) -> Vec<(RgbImage, Label)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = if i % 2 == 0 { Label::Attack } else { Label::Bonafide };
        let fx = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / size as f64;
        let fy = rng.gen_range(0.5..2.0) * std::f64::consts::TAU / size as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let base = rng.gen_range(90.0..150.0);
        let amp = rng.gen_range(30.0..60.0);
        let img = RgbImage::from_fn(size, size, |x, y| {
            let smooth = base + amp * ((fx * x as f64 + phase).sin() * (fy * y as f64).cos());
            let artifact = if label == Label::Attack {
                // 2px checker grid, the planted high-frequency cue.
                if ((x / 2) + (y / 2)) % 2 == 0 {
                    22.0
                } else {
                    -22.0
                }
            } else {
                0.0
            };
            let v = (smooth + artifact).round().clamp(0.0, 255.0) as u8;
            Rgb([v, v, v])
        });
        out.push((img, label));
    }
    out
}

/// Preprocess labeled images into detector training samples.
pub fn to_pwmad_samples(
    images: &[(RgbImage, Label)],
    split: crate::datakit::Split,
    config: &crate::pwmad::PwMadConfig,
) -> Vec<crate::pwmad::PwMadSample> {
    let map = config.map_size().expect("valid config");
    images
        .iter()
        .enumerate()
        .map(|(i, (img, label))| crate::pwmad::PwMadSample {
            image_id: format!("{split}-{i}"),
            image: crate::pwmad::preprocess(img, config.input_size, &config.normalization),
            pixel_target: crate::datakit::make_pixel_labels(*label, map).grid,
            binary_target: label.binary_target(),
            split,
        })
        .collect()
}
