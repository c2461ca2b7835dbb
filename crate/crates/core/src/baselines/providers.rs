//! Pretrained-backbone assets. The weights themselves are external: a
//! registry file under the asset root maps provider names to local weight
//! checkpoints plus their hashes, and a missing or corrupt asset is a
//! first-class error.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scratch::ScratchModel;
use super::BaselineError;

pub const ASSET_ROOT_ENV: &str = "MADKIT_ASSET_ROOT";
pub const REGISTRY_FILE: &str = "providers.json";

/// Deterministic feature extraction from a frozen backbone.
pub trait BackboneProvider {
    fn name(&self) -> String;
    fn input_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>, BaselineError>;
}

pub fn default_asset_root() -> Option<PathBuf> {
    std::env::var_os(ASSET_ROOT_ENV).map(PathBuf::from)
}

pub fn sha256_hex(path: &Path) -> Result<String, std::io::Error> {
    let data = std::fs::read(path)?;
    let digest = Sha256::digest(&data);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderEntry {
    /// Weight file path, relative to the asset root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RegistryFile {
    providers: BTreeMap<String, ProviderEntry>,
}

#[derive(Debug, Clone)]
pub struct ProviderRegistry {
    root: PathBuf,
    providers: BTreeMap<String, ProviderEntry>,
}

impl ProviderRegistry {
    pub fn load(root: &Path) -> Result<Self, BaselineError> {
        let file = root.join(REGISTRY_FILE);
        if !file.exists() {
            return Err(BaselineError::MissingAsset {
                name: REGISTRY_FILE.to_string(),
                detail: format!("no registry at {}", file.display()),
            });
        }
        let data = std::fs::read_to_string(&file)?;
        let parsed: RegistryFile = serde_json::from_str(&data)?;
        Ok(ProviderRegistry {
            root: root.to_path_buf(),
            providers: parsed.providers,
        })
    }

    pub fn empty(root: &Path) -> Self {
        ProviderRegistry {
            root: root.to_path_buf(),
            providers: BTreeMap::new(),
        }
    }

    pub fn save(&self) -> Result<(), BaselineError> {
        let file = RegistryFile {
            providers: self.providers.clone(),
        };
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(
            self.root.join(REGISTRY_FILE),
            serde_json::to_string_pretty(&file)?,
        )?;
        Ok(())
    }

    /// Register an existing weight file (hash computed now).
    pub fn register(&mut self, name: &str, relative_path: &str) -> Result<(), BaselineError> {
        let full = self.root.join(relative_path);
        let sha256 = sha256_hex(&full)?;
        self.providers.insert(
            name.to_string(),
            ProviderEntry {
                path: relative_path.to_string(),
                sha256,
            },
        );
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.providers.keys().map(String::as_str).collect()
    }

    /// Open a provider, validating presence and hash.
    pub fn open(&self, name: &str) -> Result<CheckpointBackbone, BaselineError> {
        let entry = self
            .providers
            .get(name)
            .ok_or_else(|| BaselineError::MissingAsset {
                name: name.to_string(),
                detail: format!(
                    "not listed in {}",
                    self.root.join(REGISTRY_FILE).display()
                ),
            })?;
        let path = self.root.join(&entry.path);
        if !path.exists() {
            return Err(BaselineError::MissingAsset {
                name: name.to_string(),
                detail: format!("weight file {} not found", path.display()),
            });
        }
        let got = sha256_hex(&path)?;
        if got != entry.sha256 {
            return Err(BaselineError::AssetHashMismatch {
                name: name.to_string(),
                expected: entry.sha256.clone(),
                got,
            });
        }
        CheckpointBackbone::load(name, &path)
    }
}

/// A frozen CNN checkpoint serving intermediate (pooled penultimate-layer)
/// activations as features.
pub struct CheckpointBackbone {
    name: String,
    pub weight_path: PathBuf,
    model: RefCell<ScratchModel>,
    feature_dim: usize,
}

impl CheckpointBackbone {
    pub fn load(name: &str, path: &Path) -> Result<Self, BaselineError> {
        let model = ScratchModel::load_checkpoint(path)?;
        let feature_dim = model.final_channels();
        Ok(CheckpointBackbone {
            name: name.to_string(),
            weight_path: path.to_path_buf(),
            model: RefCell::new(model),
            feature_dim,
        })
    }
}

impl BackboneProvider for CheckpointBackbone {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn input_size(&self) -> usize {
        self.model.borrow().spec.input_size
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn extract(&self, image: &RgbImage) -> Result<Vec<f64>, BaselineError> {
        Ok(self.model.borrow_mut().extract_features(image))
    }
}

/// A backbone also works as an embedding provider for pairing and the
/// vulnerability analysis.
impl crate::morphgen::EmbeddingProvider for CheckpointBackbone {
    fn dimensionality(&self) -> usize {
        self.feature_dim
    }

    fn embed(&self, image: &RgbImage) -> Vec<f64> {
        self.model.borrow_mut().extract_features(image)
    }
}
