//! Dataset-side geometry and imaging pipeline: frontal-pose filtering from
//! eye/nose landmarks, embedding-similarity pair selection, landmark-based
//! morph generation over a Delaunay mesh, and simulated re-digitization.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod redigitize;
pub mod triangulation;
pub mod warp;

pub use redigitize::{simulate_redigitization, RedigitizationProfile, RedigitizationStep};
pub use triangulation::{border_anchors, delaunay, triangulate, Triangulation};
pub use warp::warp_blend;

#[derive(Debug, Error)]
pub enum MorphError {
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("landmark point counts differ: {a} vs {b}")]
    PointCountMismatch { a: usize, b: usize },
    #[error("landmark {index} at ({x}, {y}) outside image bounds {w}x{h}")]
    LandmarkOutOfBounds {
        index: String,
        x: f64,
        y: f64,
        w: u32,
        h: u32,
    },
    #[error("eye_left.x must be smaller than eye_right.x (got {left} vs {right})")]
    EyeOrder { left: f64, right: f64 },
    #[error("blend factor {0} outside [0,1]")]
    InvalidAlpha(f64),
    #[error("no embedding for image {0}")]
    MissingEmbedding(String),
    #[error("embedding for {id} has {got} dims, expected {expected}")]
    EmbeddingDim {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error(
        "pool exhausted for key {key}: needed {needed} accomplices, only {available} eligible"
    )]
    InsufficientPool {
        key: String,
        needed: usize,
        available: usize,
    },
    #[error("key and accomplice share identity {0}")]
    SharedIdentity(String),
    #[error("all input points are colinear; cannot triangulate")]
    ColinearPoints,
    #[error("need at least 3 distinct points, got {0}")]
    TooFewPoints(usize),
    #[error("image sizes differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    ImageSizeMismatch {
        a_w: u32,
        a_h: u32,
        b_w: u32,
        b_h: u32,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point {
            x: (1.0 - t) * self.x + t * other.x,
            y: (1.0 - t) * self.y + t * other.y,
        }
    }
}

/// 2D facial landmarks in pixel coordinates plus the eye/nose anchor points
/// used by the frontality filter.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<Point>,
    pub eye_left: Point,
    pub eye_right: Point,
    pub nose_top: Point,
}

impl LandmarkSet {
    /// Anchor ordering is fixed: the subject's left eye is on the smaller x.
    pub fn validate(&self, image_w: u32, image_h: u32) -> Result<(), MorphError> {
        if self.eye_left.x >= self.eye_right.x {
            return Err(MorphError::EyeOrder {
                left: self.eye_left.x,
                right: self.eye_right.x,
            });
        }
        let within = |p: &Point| {
            p.x >= 0.0 && p.y >= 0.0 && p.x <= image_w as f64 && p.y <= image_h as f64
        };
        for (i, p) in self.points.iter().enumerate() {
            if !within(p) {
                return Err(MorphError::LandmarkOutOfBounds {
                    index: format!("points[{i}]"),
                    x: p.x,
                    y: p.y,
                    w: image_w,
                    h: image_h,
                });
            }
        }
        for (name, p) in [
            ("eye_left", &self.eye_left),
            ("eye_right", &self.eye_right),
            ("nose_top", &self.nose_top),
        ] {
            if !within(p) {
                return Err(MorphError::LandmarkOutOfBounds {
                    index: name.to_string(),
                    x: p.x,
                    y: p.y,
                    w: image_w,
                    h: image_h,
                });
            }
        }
        Ok(())
    }
}

/// JSON cache record, one per image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub image_id: String,
    pub points: Vec<[f64; 2]>,
    pub eye_left: [f64; 2],
    pub eye_right: [f64; 2],
    pub nose_top: [f64; 2],
}

impl From<&LandmarkRecord> for LandmarkSet {
    fn from(rec: &LandmarkRecord) -> Self {
        LandmarkSet {
            points: rec.points.iter().map(|p| Point::new(p[0], p[1])).collect(),
            eye_left: Point::new(rec.eye_left[0], rec.eye_left[1]),
            eye_right: Point::new(rec.eye_right[0], rec.eye_right[1]),
            nose_top: Point::new(rec.nose_top[0], rec.nose_top[1]),
        }
    }
}

impl LandmarkRecord {
    pub fn from_set(image_id: &str, set: &LandmarkSet) -> Self {
        LandmarkRecord {
            image_id: image_id.to_string(),
            points: set.points.iter().map(|p| [p.x, p.y]).collect(),
            eye_left: [set.eye_left.x, set.eye_left.y],
            eye_right: [set.eye_right.x, set.eye_right.y],
            nose_top: [set.nose_top.x, set.nose_top.y],
        }
    }
}

/// Landmark cache: one JSON record per line, keyed by image id.
pub fn load_landmark_cache(path: &Path) -> Result<BTreeMap<String, LandmarkSet>, MorphError> {
    let file = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LandmarkRecord = serde_json::from_str(&line)?;
        out.insert(rec.image_id.clone(), LandmarkSet::from(&rec));
    }
    Ok(out)
}

pub fn save_landmark_cache(
    path: &Path,
    records: &BTreeMap<String, LandmarkSet>,
) -> Result<(), MorphError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, set) in records {
        let rec = LandmarkRecord::from_set(id, set);
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub const MAX_ASYMMETRY_RATIO: f64 = 0.05;
pub const MIN_EYE_DISTANCE: f64 = 90.0;

/// The wording "ratio of the difference to any of them" admits either
/// denominator; min is the stricter filter and the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AsymmetryDenominator {
    #[default]
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontalityReport {
    pub d_left: f64,
    pub d_right: f64,
    pub asymmetry_ratio: f64,
    pub eye_distance: f64,
    pub pass: bool,
}

pub fn frontality_from_distances(
    d_left: f64,
    d_right: f64,
    eye_distance: f64,
    denominator: AsymmetryDenominator,
) -> Result<FrontalityReport, MorphError> {
    let denom = match denominator {
        AsymmetryDenominator::Min => d_left.min(d_right),
        AsymmetryDenominator::Max => d_left.max(d_right),
    };
    if denom <= 0.0 {
        return Err(MorphError::DegenerateLandmarks(format!(
            "eye-nose distance is zero (d_left={d_left}, d_right={d_right})"
        )));
    }
    let asymmetry_ratio = (d_left - d_right).abs() / denom;
    let pass = asymmetry_ratio <= MAX_ASYMMETRY_RATIO && eye_distance >= MIN_EYE_DISTANCE;
    Ok(FrontalityReport {
        d_left,
        d_right,
        asymmetry_ratio,
        eye_distance,
        pass,
    })
}

/// Frontal-pose check: both eye-to-nose distances must agree within 5% and
/// the eye distance must reach 90 pixels.
pub fn assess_frontality(landmarks: &LandmarkSet) -> Result<FrontalityReport, MorphError> {
    assess_frontality_with(landmarks, AsymmetryDenominator::Min)
}

pub fn assess_frontality_with(
    landmarks: &LandmarkSet,
    denominator: AsymmetryDenominator,
) -> Result<FrontalityReport, MorphError> {
    let d_left = landmarks.eye_left.distance(&landmarks.nose_top);
    let d_right = landmarks.eye_right.distance(&landmarks.nose_top);
    let eye_distance = landmarks.eye_left.distance(&landmarks.eye_right);
    frontality_from_distances(d_left, d_right, eye_distance, denominator)
}

/// Deterministic image embedding. The production face network is an external
/// asset; anything implementing this trait can drive pairing and the
/// vulnerability analysis.
pub trait EmbeddingProvider {
    fn dimensionality(&self) -> usize;
    fn embed(&self, image: &RgbImage) -> Vec<f64>;
}

/// Mean-pooled grayscale grid embedding: a dependency-free stand-in provider.
pub struct GridEmbedding {
    pub grid: usize,
}

impl Default for GridEmbedding {
    fn default() -> Self {
        GridEmbedding { grid: 16 }
    }
}

impl EmbeddingProvider for GridEmbedding {
    fn dimensionality(&self) -> usize {
        self.grid * self.grid
    }

    fn embed(&self, image: &RgbImage) -> Vec<f64> {
        let g = self.grid as u32;
        let (w, h) = image.dimensions();
        let mut sums = vec![0.0f64; (g * g) as usize];
        let mut counts = vec![0u32; (g * g) as usize];
        for (x, y, px) in image.enumerate_pixels() {
            let gx = (x * g / w.max(1)).min(g - 1);
            let gy = (y * g / h.max(1)).min(g - 1);
            let idx = (gy * g + gx) as usize;
            let gray =
                0.299 * px.0[0] as f64 + 0.587 * px.0[1] as f64 + 0.114 * px.0[2] as f64;
            sums[idx] += gray / 255.0;
            counts[idx] += 1;
        }
        sums.iter()
            .zip(counts.iter())
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect()
    }
}

/// An image plus its subject identity, as pairing needs to see it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub identity: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MorphPair {
    pub key: ImageRef,
    pub accomplice: ImageRef,
    pub distance: f64,
}

pub type EmbeddingTable = BTreeMap<String, Vec<f64>>;

pub fn embedding_table<'a>(
    provider: &dyn EmbeddingProvider,
    images: impl Iterator<Item = (&'a str, &'a RgbImage)>,
) -> EmbeddingTable {
    images
        .map(|(id, img)| (id.to_string(), provider.embed(img)))
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Greedy nearest-embedding pairing in ascending key-id order. Per key the
/// accomplices must carry distinct identities different from the key's, and a
/// pool image serves at most one key overall. Distance ties break on the
/// lexicographic image id.
pub fn select_pairs(
    keys: &[ImageRef],
    pool: &[ImageRef],
    embeddings: &EmbeddingTable,
    pairs_per_key: usize,
) -> Result<Vec<MorphPair>, MorphError> {
    if pairs_per_key == 0 {
        return Ok(Vec::new());
    }
    let lookup = |id: &str| -> Result<&Vec<f64>, MorphError> {
        embeddings
            .get(id)
            .ok_or_else(|| MorphError::MissingEmbedding(id.to_string()))
    };
    let mut keys_sorted: Vec<&ImageRef> = keys.iter().collect();
    keys_sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut used: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    let mut pairs = Vec::with_capacity(keys.len() * pairs_per_key);
    for key in keys_sorted {
        let key_emb = lookup(&key.image_id)?;
        let mut candidates: Vec<(f64, &ImageRef)> = Vec::new();
        for cand in pool {
            if cand.identity == key.identity || used.contains(cand.image_id.as_str()) {
                continue;
            }
            let d = euclidean(key_emb, lookup(&cand.image_id)?);
            candidates.push((d, cand));
        }
        candidates.sort_by(|(da, a), (db, b)| {
            da.partial_cmp(db)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.image_id.cmp(&b.image_id))
        });
        let mut chosen_identities: std::collections::BTreeSet<&str> =
            std::collections::BTreeSet::new();
        let mut chosen = 0usize;
        for (d, cand) in &candidates {
            if chosen == pairs_per_key {
                break;
            }
            if chosen_identities.contains(cand.identity.as_str()) {
                continue;
            }
            chosen_identities.insert(&cand.identity);
            used.insert(&cand.image_id);
            pairs.push(MorphPair {
                key: key.clone(),
                accomplice: (*cand).clone(),
                distance: *d,
            });
            chosen += 1;
        }
        if chosen < pairs_per_key {
            return Err(MorphError::InsufficientPool {
                key: key.image_id.clone(),
                needed: pairs_per_key,
                available: chosen,
            });
        }
    }
    Ok(pairs)
}

/// Per-point linear interpolation of two corresponding landmark sets.
pub fn average_landmarks(
    a: &LandmarkSet,
    b: &LandmarkSet,
    alpha: f64,
) -> Result<LandmarkSet, MorphError> {
    if a.points.len() != b.points.len() {
        return Err(MorphError::PointCountMismatch {
            a: a.points.len(),
            b: b.points.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MorphError::InvalidAlpha(alpha));
    }
    Ok(LandmarkSet {
        points: a
            .points
            .iter()
            .zip(b.points.iter())
            .map(|(pa, pb)| pa.lerp(pb, alpha))
            .collect(),
        eye_left: a.eye_left.lerp(&b.eye_left, alpha),
        eye_right: a.eye_right.lerp(&b.eye_right, alpha),
        nose_top: a.nose_top.lerp(&b.nose_top, alpha),
    })
}

/// A planned morph: the pair, the blend factor, and the triangulation over
/// the averaged landmarks plus the 8 border anchors.
#[derive(Debug, Clone)]
pub struct MorphJob {
    pub key_image_id: String,
    pub accomplice_image_id: String,
    pub alpha: f64,
    pub triangulation: Triangulation,
}

impl MorphJob {
    pub fn plan(
        key_image_id: &str,
        accomplice_image_id: &str,
        alpha: f64,
        lms_key: &LandmarkSet,
        lms_accomplice: &LandmarkSet,
        image_size: (u32, u32),
    ) -> Result<Self, MorphError> {
        let averaged = average_landmarks(lms_key, lms_accomplice, alpha)?;
        let triangulation = triangulate(&averaged, image_size)?;
        Ok(MorphJob {
            key_image_id: key_image_id.to_string(),
            accomplice_image_id: accomplice_image_id.to_string(),
            alpha,
            triangulation,
        })
    }
}

#[cfg(test)]
mod tests;
