//! The common scoring contract every detector satisfies: a probability in
//! (0,1), oriented higher-is-attack, from a single image.

use image::RgbImage;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ScoreError(pub String);

impl ScoreError {
    pub fn from_err(e: impl std::fmt::Display) -> Self {
        ScoreError(e.to_string())
    }
}

pub trait Detector {
    fn model_name(&self) -> String;
    /// Attack probability in (0,1); higher = more attack-like.
    fn score(&mut self, image: &RgbImage) -> Result<f64, ScoreError>;
}
