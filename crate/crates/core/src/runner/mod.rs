//! Pipeline orchestration behind the CLI: a config file drives each stage,
//! every stage writes deterministic artifacts into a run directory together
//! with a manifest of inputs, the config hash, and the seed, and stages fail
//! loudly when an upstream artifact is missing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datakit::{DataError, Medium, SampleRecord, Split};
use crate::metrics::{MetricError, ScoreEntry, ScoreTable};
use crate::morphgen::{MorphError, RedigitizationProfile};
use crate::pwmad::{PwMadConfig, PwMadError};
use crate::scoring::ScoreError;
use crate::trainkit::{TrainConfig, TrainError};

mod stages;

pub use stages::run_synth_demo;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: String },
    #[error(
        "run directory {0} is locked by another run (remove the .lock file if it is stale)"
    )]
    Locked(PathBuf),
    #[error(
        "run directory was created with a different config (hash {existing} vs {current}); use a \
         fresh --run-dir or the original config"
    )]
    ConfigHashMismatch { existing: String, current: String },
    #[error("morph error: {0}")]
    Morph(#[from] MorphError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("metric error: {0}")]
    Metric(#[from] MetricError),
    #[error("baseline error: {0}")]
    Baseline(#[from] crate::baselines::BaselineError),
    #[error("train error: {0}")]
    Train(#[from] TrainError),
    #[error("model error: {0}")]
    PwMad(#[from] PwMadError),
    #[error("scoring error: {0}")]
    Score(#[from] ScoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Pwmad,
    Lbp,
    FeatureSvm,
    Finetune,
    Scratch,
}

impl ModelName {
    pub fn parse(s: &str) -> Option<ModelName> {
        match s {
            "pwmad" => Some(ModelName::Pwmad),
            "lbp" => Some(ModelName::Lbp),
            "feature_svm" => Some(ModelName::FeatureSvm),
            "finetune" => Some(ModelName::Finetune),
            "scratch" => Some(ModelName::Scratch),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::Pwmad => "pwmad",
            ModelName::Lbp => "lbp",
            ModelName::FeatureSvm => "feature_svm",
            ModelName::Finetune => "finetune",
            ModelName::Scratch => "scratch",
        }
    }
}

impl std::fmt::Display for ModelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub bonafide_dir: PathBuf,
    pub landmarks_file: PathBuf,
    pub metadata_file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MorphConfig {
    pub alpha: f64,
    pub pairs_per_key: usize,
    /// Explicit key image ids; when empty, `num_keys` identities contribute
    /// their lexicographically first passing image.
    pub key_ids: Vec<String>,
    pub num_keys: usize,
    /// Name of a registered embedding provider; the built-in grid embedding
    /// is used when empty.
    pub embedding_provider: String,
    pub embedding_grid: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig {
            alpha: 0.5,
            pairs_per_key: 2,
            key_ids: Vec::new(),
            num_keys: 4,
            embedding_provider: String::new(),
            embedding_grid: 16,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.34, 0.33, 0.33],
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub name: ModelName,
    pub pwmad: PwMadConfig,
    pub scratch: crate::baselines::ScratchSpec,
    /// Provider name for the feature-SVM and fine-tune baselines.
    pub provider: String,
    pub svm_c: f64,
    pub lbp_iterations: usize,
    pub lbp_learning_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: ModelName::Pwmad,
            pwmad: PwMadConfig::default(),
            scratch: crate::baselines::ScratchSpec::default(),
            provider: String::new(),
            svm_c: 1.0,
            lbp_iterations: 500,
            lbp_learning_rate: 0.5,
        }
    }
}

impl Default for ModelName {
    fn default() -> Self {
        ModelName::Pwmad
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub train_medium: Medium,
    pub test_medium: Medium,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train_medium: Medium::D,
            test_medium: Medium::D,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub morph: MorphConfig,
    pub redigitize: RedigitizationProfile,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Overrides the MADKIT_ASSET_ROOT environment variable when set.
    pub asset_root: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let data = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&data).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn asset_root(&self) -> Option<PathBuf> {
        self.asset_root
            .clone()
            .or_else(crate::baselines::default_asset_root)
    }
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub train_medium: Option<Medium>,
    pub test_medium: Option<Medium>,
    pub model: Option<ModelName>,
    pub asset_root: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.split.seed = seed;
            config.train.seed = seed;
            config.redigitize.seed = seed;
        }
        if let Some(m) = self.train_medium {
            config.eval.train_medium = m;
        }
        if let Some(m) = self.test_medium {
            config.eval.test_medium = m;
        }
        if let Some(m) = self.model {
            config.model.name = m;
        }
        if let Some(root) = &self.asset_root {
            config.asset_root = Some(root.clone());
        }
    }
}

/// Exclusive-creation lock file, removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, RunError> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(RunError::Locked(run_dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunManifest {
    config_hash: String,
    seed: u64,
    stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StageRecord {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// Artifact layout of one run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn frontality_csv(&self) -> PathBuf {
        self.root.join("filter").join("frontality.csv")
    }

    pub fn passing_json(&self) -> PathBuf {
        self.root.join("filter").join("passing.json")
    }

    pub fn pairs_json(&self) -> PathBuf {
        self.root.join("pair").join("pairs.json")
    }

    pub fn morph_dir(&self) -> PathBuf {
        self.root.join("morph").join("images")
    }

    pub fn morph_metadata(&self) -> PathBuf {
        self.root.join("morph").join("morph_metadata.json")
    }

    pub fn morph_jobs_csv(&self) -> PathBuf {
        self.root.join("morph").join("jobs.csv")
    }

    pub fn redigitized_dir(&self) -> PathBuf {
        self.root.join("redigitize").join("images")
    }

    pub fn redigitize_profile(&self) -> PathBuf {
        self.root.join("redigitize").join("profile.json")
    }

    pub fn manifest_csv(&self) -> PathBuf {
        self.root.join("split").join("manifest.csv")
    }

    pub fn split_json(&self) -> PathBuf {
        self.root.join("split").join("split.json")
    }

    pub fn train_dir(&self, medium: Medium) -> PathBuf {
        self.root.join("train").join(medium.to_string())
    }

    pub fn detector_meta(&self, medium: Medium) -> PathBuf {
        self.train_dir(medium).join("meta.json")
    }

    pub fn eval_report(&self, model: ModelName, train: Medium, test: Medium) -> PathBuf {
        self.root
            .join("eval")
            .join(format!("{model}_train{train}_test{test}.json"))
    }

    pub fn eval_scores(&self, model: ModelName, train: Medium, test: Medium) -> PathBuf {
        self.root
            .join("eval")
            .join(format!("{model}_train{train}_test{test}.scores.csv"))
    }

    pub fn eval_roc_csv(&self, model: ModelName, train: Medium, test: Medium) -> PathBuf {
        self.root
            .join("eval")
            .join(format!("{model}_train{train}_test{test}.roc.csv"))
    }

    pub fn vuln_dir(&self) -> PathBuf {
        self.root.join("vuln")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report").join("report.txt")
    }

    pub fn generalization_json(&self) -> PathBuf {
        self.root.join("report").join("generalization.json")
    }

    pub fn plot_svg(&self) -> PathBuf {
        self.root.join("plot").join("roc.svg")
    }

    pub fn plot_csv(&self) -> PathBuf {
        self.root.join("plot").join("roc_points.csv")
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("run.json")
    }

    fn record_stage(
        &self,
        config: &ExperimentConfig,
        stage: &str,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<(), RunError> {
        let path = self.manifest_path();
        let mut manifest: RunManifest = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)?
        } else {
            RunManifest::default()
        };
        let hash = config.hash();
        if manifest.config_hash.is_empty() {
            manifest.config_hash = hash;
        } else if manifest.config_hash != hash {
            return Err(RunError::ConfigHashMismatch {
                existing: manifest.config_hash,
                current: hash,
            });
        }
        manifest.seed = config.split.seed;
        manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
                outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            },
        );
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    fn require(&self, path: &Path, producing_command: &str) -> Result<(), RunError> {
        if path.exists() {
            Ok(())
        } else {
            Err(RunError::MissingArtifact {
                path: path.to_path_buf(),
                hint: format!("madkit {producing_command}"),
            })
        }
    }
}

pub(crate) fn load_rgb(path: &Path) -> Result<RgbImage, RunError> {
    Ok(image::open(path)?.to_rgb8())
}

/// Stable per-image seed derivation (FNV-1a over the id, mixed with the base).
pub(crate) fn derive_seed(base: u64, image_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    base ^ h
}

/// Records selected for a (split, medium) slice of the manifest.
pub(crate) fn slice_records(
    records: &[SampleRecord],
    splits: &[Split],
    medium: Medium,
) -> Vec<SampleRecord> {
    records
        .iter()
        .filter(|r| splits.contains(&r.split) && r.medium == medium)
        .cloned()
        .collect()
}

pub(crate) fn score_table_for(
    records: &[SampleRecord],
    mut score: impl FnMut(&SampleRecord) -> Result<f64, RunError>,
) -> Result<ScoreTable, RunError> {
    let mut entries = Vec::with_capacity(records.len());
    for rec in records {
        entries.push(ScoreEntry {
            image_id: rec.image_id.clone(),
            score: score(rec)?,
            label: rec.label,
            medium: rec.medium,
        });
    }
    Ok(ScoreTable::new(entries)?)
}

pub use stages::{
    run_eval, run_filter, run_morph, run_pair, run_plot, run_redigitize, run_report, run_split,
    run_train, run_vuln,
};
