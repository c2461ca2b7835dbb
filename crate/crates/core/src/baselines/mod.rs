//! Baseline detectors behind the same score(image) -> probability contract
//! as the pixel-wise detector: multi-channel LBP histograms with a softmax
//! classifier, pretrained-backbone features with a linear SVM, a frozen
//! backbone with a fine-tuned classification head, and a from-scratch
//! trained CNN.

use thiserror::Error;

pub mod finetune;
pub mod lbp;
pub mod providers;
pub mod scratch;
pub mod svm;

pub use finetune::{
    extract_feature_samples, finetune_classifier_head, FeatureSample, FinetunedDetector,
    LinearHeadModel,
};
pub use lbp::{lbp_features, train_lbp_classifier, LbpConfig, LbpDetector, SoftmaxClassifier};
pub use providers::{default_asset_root, BackboneProvider, CheckpointBackbone, ProviderRegistry};
pub use scratch::{build_scratch, ImageSample, ScratchModel, ScratchSpec};
pub use svm::{train_feature_svm_on_features, FeatureSvmDetector, LinearSvm, SigmoidCalibration, Standardizer};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("non-RGB input; convert to RGB before feature extraction")]
    NonRgbInput,
    #[error("need at least two classes, got one")]
    SingleClass,
    #[error(
        "provider asset missing: {name} ({detail}); place the weight file under the asset root \
         and list it in providers.json (set MADKIT_ASSET_ROOT or pass --asset-root)"
    )]
    MissingAsset { name: String, detail: String },
    #[error("asset hash mismatch for {name}: expected {expected}, got {got}")]
    AssetHashMismatch {
        name: String,
        expected: String,
        got: String,
    },
    #[error("unknown architecture: {0}")]
    UnknownArchitecture(String),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("train error: {0}")]
    Train(#[from] crate::trainkit::TrainError),
    #[error("model error: {0}")]
    Model(#[from] crate::pwmad::PwMadError),
    #[error("nn error: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
