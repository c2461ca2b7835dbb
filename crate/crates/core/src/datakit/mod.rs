//! Dataset bookkeeping: sample records, CSV manifests, identity-disjoint
//! splits, and the constant per-class pixel label maps used for pixel-wise
//! supervision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod split;

pub use split::{split_identity_disjoint, verify_identity_disjoint, SplitManifest, SplitStat};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("files without identity metadata: {}", .0.join(", "))]
    MissingIdentities(Vec<String>),
    #[error("duplicate image id: {0}")]
    DuplicateImageId(String),
    #[error("attack {image_id} references unknown identity {identity}")]
    UnknownIdentity { image_id: String, identity: String },
    #[error("{image_id}: expected {expected} identities, got {got}")]
    BadIdentityCount {
        image_id: String,
        expected: usize,
        got: usize,
    },
    #[error("re-digitized file {0} has no digital source record")]
    OrphanRedigitized(String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error(
        "identity component of {size} records ({first_identity}, ...) exceeds the largest split \
         target of {max_target} records; split it manually or adjust ratios"
    )]
    ComponentTooLarge {
        first_identity: String,
        size: usize,
        max_target: usize,
    },
    #[error("unknown image id in split assignment: {0}")]
    UnknownImage(String),
    #[error("identity {identity} appears in both {a:?} and {b:?}")]
    DisjointnessViolation { identity: String, a: Split, b: Split },
    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Medium {
    D,
    PS,
}

impl Medium {
    pub fn parse(s: &str) -> Option<Medium> {
        match s {
            "D" => Some(Medium::D),
            "PS" => Some(Medium::PS),
            _ => None,
        }
    }
}

impl fmt::Display for Medium {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Medium::D => write!(f, "D"),
            Medium::PS => write!(f, "PS"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Bonafide => write!(f, "bonafide"),
            Label::Attack => write!(f, "attack"),
        }
    }
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "bonafide" => Some(Label::Bonafide),
            "attack" => Some(Label::Attack),
            _ => None,
        }
    }

    pub fn binary_target(self) -> f64 {
        match self {
            Label::Bonafide => 0.0,
            Label::Attack => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
            Split::Unassigned => write!(f, "unassigned"),
        }
    }
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

/// One image with its identity set, medium, class label, and split membership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub identity_ids: BTreeSet<String>,
    pub medium: Medium,
    pub label: Label,
    pub split: Split,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        let expected = match self.label {
            Label::Bonafide => 1,
            Label::Attack => 2,
        };
        if self.identity_ids.len() != expected {
            return Err(DataError::BadIdentityCount {
                image_id: self.image_id.clone(),
                expected,
                got: self.identity_ids.len(),
            });
        }
        Ok(())
    }
}

/// Suffix appended to a digital record's id for its re-digitized counterpart.
pub const PS_ID_SUFFIX: &str = "__PS";

/// Maps image ids (file stems) to their contributing identities.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IdentityMetadata {
    pub images: BTreeMap<String, Vec<String>>,
    /// Optional per-image attribute (e.g. gender) used to balance splits.
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl IdentityMetadata {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let data = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&data)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn merge(&mut self, other: &IdentityMetadata) {
        for (k, v) in &other.images {
            self.images.insert(k.clone(), v.clone());
        }
        for (k, v) in &other.attributes {
            self.attributes.insert(k.clone(), v.clone());
        }
    }
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Assemble and validate the full record list from class-separated directories.
/// Re-digitized directories mirror digital files by stem; their records get the
/// `__PS` id suffix and inherit identities and label from the digital source.
pub fn build_manifest(
    bonafide_dir: &Path,
    attack_dir: &Path,
    redigitized_dirs: &[PathBuf],
    metadata: &IdentityMetadata,
) -> Result<Vec<SampleRecord>, DataError> {
    let mut records: Vec<SampleRecord> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut missing: Vec<String> = Vec::new();

    let push = |rec: SampleRecord, seen: &mut BTreeSet<String>, records: &mut Vec<SampleRecord>| {
        if !seen.insert(rec.image_id.clone()) {
            return Err(DataError::DuplicateImageId(rec.image_id));
        }
        records.push(rec);
        Ok(())
    };

    for (dir, label) in [(bonafide_dir, Label::Bonafide), (attack_dir, Label::Attack)] {
        if !dir.exists() {
            continue;
        }
        for path in list_images(dir)? {
            let image_id = stem_of(&path);
            let Some(ids) = metadata.images.get(&image_id) else {
                missing.push(image_id);
                continue;
            };
            let rec = SampleRecord {
                image_id: image_id.clone(),
                path: path.clone(),
                identity_ids: ids.iter().cloned().collect(),
                medium: Medium::D,
                label,
                split: Split::Unassigned,
            };
            rec.validate()?;
            push(rec, &mut seen, &mut records)?;
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingIdentities(missing));
    }

    // Referential integrity: every attack identity must exist as a bona fide identity.
    let bona_ids: BTreeSet<&String> = records
        .iter()
        .filter(|r| r.label == Label::Bonafide)
        .flat_map(|r| r.identity_ids.iter())
        .collect();
    for rec in records.iter().filter(|r| r.label == Label::Attack) {
        for identity in &rec.identity_ids {
            if !bona_ids.contains(identity) {
                return Err(DataError::UnknownIdentity {
                    image_id: rec.image_id.clone(),
                    identity: identity.clone(),
                });
            }
        }
    }

    let digital: BTreeMap<String, SampleRecord> = records
        .iter()
        .map(|r| (r.image_id.clone(), r.clone()))
        .collect();
    for dir in redigitized_dirs {
        if !dir.exists() {
            continue;
        }
        for path in list_images(dir)? {
            let stem = stem_of(&path);
            let Some(source) = digital.get(&stem) else {
                return Err(DataError::OrphanRedigitized(stem));
            };
            let rec = SampleRecord {
                image_id: format!("{stem}{PS_ID_SUFFIX}"),
                path: path.clone(),
                identity_ids: source.identity_ids.clone(),
                medium: Medium::PS,
                label: source.label,
                split: Split::Unassigned,
            };
            push(rec, &mut seen, &mut records)?;
        }
    }

    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(records)
}

/// Manifest CSV header. Identities are `;`-joined in sorted order; rows are
/// sorted by image id so serialization is deterministic.
pub const MANIFEST_HEADER: [&str; 6] = ["image_id", "path", "identities", "medium", "label", "split"];

pub fn write_manifest_csv(records: &[SampleRecord], path: &Path) -> Result<(), DataError> {
    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in sorted {
        let ids = r.identity_ids.iter().cloned().collect::<Vec<_>>().join(";");
        w.write_record([
            r.image_id.as_str(),
            r.path.to_str().unwrap_or_default(),
            ids.as_str(),
            &r.medium.to_string(),
            &r.label.to_string(),
            &r.split.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest_csv(path: &Path) -> Result<Vec<SampleRecord>, DataError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |idx: usize| -> Result<&str, DataError> {
            row.get(idx).ok_or(DataError::ManifestParse {
                line,
                message: format!("missing column {idx}"),
            })
        };
        let parse_err = |message: String| DataError::ManifestParse { line, message };
        let rec = SampleRecord {
            image_id: field(0)?.to_string(),
            path: PathBuf::from(field(1)?),
            identity_ids: field(2)?
                .split(';')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
            medium: Medium::parse(field(3)?)
                .ok_or_else(|| parse_err(format!("bad medium {:?}", row.get(3))))?,
            label: Label::parse(field(4)?)
                .ok_or_else(|| parse_err(format!("bad label {:?}", row.get(4))))?,
            split: Split::parse(field(5)?)
                .ok_or_else(|| parse_err(format!("bad split {:?}", row.get(5))))?,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

/// Constant ground-truth map for pixel-wise supervision: all ones for attacks,
/// all zeros for bona fides.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLabelMap {
    pub grid: Array2<f64>,
    pub class: Label,
}

pub const DEFAULT_LABEL_GRID: (usize, usize) = (14, 14);

pub fn make_pixel_labels(label: Label, grid_size: (usize, usize)) -> PixelLabelMap {
    let value = label.binary_target();
    PixelLabelMap {
        grid: Array2::from_elem(grid_size, value),
        class: label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::write(path, b"").unwrap();
    }

    fn lma_shaped_setup(dir: &Path) -> (PathBuf, PathBuf, Vec<PathBuf>, IdentityMetadata) {
        // 364 bona fides over 364 identities and 276 attacks pairing them,
        // mirrored into a re-digitized copy of both: the dataset shape of a
        // print-scan morph corpus.
        let bona = dir.join("bona");
        let attack = dir.join("attack");
        let ps_bona = dir.join("ps_bona");
        let ps_attack = dir.join("ps_attack");
        for d in [&bona, &attack, &ps_bona, &ps_attack] {
            std::fs::create_dir_all(d).unwrap();
        }
        let mut meta = IdentityMetadata::default();
        for i in 0..364 {
            let id = format!("bf{i:03}");
            touch(&bona.join(format!("{id}.png")));
            touch(&ps_bona.join(format!("{id}.png")));
            meta.images.insert(id, vec![format!("subj{i:03}")]);
        }
        for i in 0..276 {
            let id = format!("m{i:03}");
            touch(&attack.join(format!("{id}.png")));
            touch(&ps_attack.join(format!("{id}.png")));
            let a = i % 364;
            let b = (i + 1) % 364;
            meta.images
                .insert(id, vec![format!("subj{a:03}"), format!("subj{b:03}")]);
        }
        (bona, attack, vec![ps_bona, ps_attack], meta)
    }

    #[test]
    fn empty_directories_give_empty_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let bona = tmp.path().join("bona");
        let attack = tmp.path().join("attack");
        std::fs::create_dir_all(&bona).unwrap();
        std::fs::create_dir_all(&attack).unwrap();
        let records =
            build_manifest(&bona, &attack, &[], &IdentityMetadata::default()).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn lma_shaped_totals_per_medium() {
        let tmp = tempfile::tempdir().unwrap();
        let (bona, attack, ps, meta) = lma_shaped_setup(tmp.path());
        let records = build_manifest(&bona, &attack, &ps, &meta).unwrap();
        for medium in [Medium::D, Medium::PS] {
            let attacks = records
                .iter()
                .filter(|r| r.medium == medium && r.label == Label::Attack)
                .count();
            let bonafides = records
                .iter()
                .filter(|r| r.medium == medium && r.label == Label::Bonafide)
                .count();
            assert_eq!(attacks, 276);
            assert_eq!(bonafides, 364);
        }
    }

    #[test]
    fn attack_with_unknown_identity_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let bona = tmp.path().join("bona");
        let attack = tmp.path().join("attack");
        std::fs::create_dir_all(&bona).unwrap();
        std::fs::create_dir_all(&attack).unwrap();
        touch(&bona.join("b0.png"));
        touch(&attack.join("m0.png"));
        let mut meta = IdentityMetadata::default();
        meta.images.insert("b0".into(), vec!["s0".into()]);
        meta.images
            .insert("m0".into(), vec!["s0".into(), "ghost".into()]);
        let err = build_manifest(&bona, &attack, &[], &meta).unwrap_err();
        assert!(matches!(err, DataError::UnknownIdentity { .. }));
    }

    #[test]
    fn missing_metadata_lists_offenders() {
        let tmp = tempfile::tempdir().unwrap();
        let bona = tmp.path().join("bona");
        let attack = tmp.path().join("attack");
        std::fs::create_dir_all(&bona).unwrap();
        std::fs::create_dir_all(&attack).unwrap();
        touch(&bona.join("known.png"));
        touch(&bona.join("unknown1.png"));
        touch(&bona.join("unknown2.png"));
        let mut meta = IdentityMetadata::default();
        meta.images.insert("known".into(), vec!["s0".into()]);
        match build_manifest(&bona, &attack, &[], &meta) {
            Err(DataError::MissingIdentities(ids)) => {
                assert_eq!(ids, vec!["unknown1".to_string(), "unknown2".to_string()]);
            }
            other => panic!("expected MissingIdentities, got {other:?}"),
        }
    }

    #[test]
    fn manifest_roundtrip_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let (bona, attack, ps, meta) = lma_shaped_setup(tmp.path());
        let records = build_manifest(&bona, &attack, &ps, &meta).unwrap();
        let path = tmp.path().join("manifest.csv");
        write_manifest_csv(&records, &path).unwrap();
        let back = read_manifest_csv(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn pixel_labels_constant_per_class() {
        let ones = make_pixel_labels(Label::Attack, DEFAULT_LABEL_GRID);
        assert!(ones.grid.iter().all(|&v| v == 1.0));
        assert_eq!(ones.grid.dim(), (14, 14));
        let zeros = make_pixel_labels(Label::Bonafide, DEFAULT_LABEL_GRID);
        assert!(zeros.grid.iter().all(|&v| v == 0.0));
        let degenerate = make_pixel_labels(Label::Attack, (1, 1));
        assert_eq!(degenerate.grid[[0, 0]], 1.0);
    }
}
