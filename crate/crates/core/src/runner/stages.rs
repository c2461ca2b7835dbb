//! The ten pipeline stages. Every stage acquires the run-dir lock, validates
//! its upstream artifacts, writes its outputs, and records itself in the run
//! manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;

use crate::baselines::{
    self, extract_feature_samples, finetune_classifier_head, train_feature_svm_on_features,
    train_lbp_classifier, BackboneProvider, FeatureSvmDetector, FinetunedDetector, ImageSample,
    LbpConfig, LbpDetector, ProviderRegistry, ScratchModel,
};
use crate::datakit::{
    build_manifest, make_pixel_labels, read_manifest_csv, split_identity_disjoint,
    verify_identity_disjoint, write_manifest_csv, IdentityMetadata, Label, Medium, SampleRecord,
    Split, PS_ID_SUFFIX,
};
use crate::metrics::{
    self, fmr_threshold, mmpmr, render_bpcer_table, EvalReport, VulnEntry, VulnTable,
};
use crate::morphgen::{
    assess_frontality, embedding_table, load_landmark_cache, select_pairs,
    simulate_redigitization, warp_blend, EmbeddingProvider, EmbeddingTable, GridEmbedding,
    ImageRef, MorphJob, MorphPair,
};
use crate::pwmad::{PwMadModel, PwMadSample};
use crate::scoring::Detector;
use crate::synth::{generate_corpus, SynthParams};
use crate::trainkit::{self, TrainableModel};

use super::{
    derive_seed, load_rgb, score_table_for, slice_records, ExperimentConfig, ModelName, RunDir,
    RunError, RunLock,
};

fn dir_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>, RunError> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() {
            if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
                if matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
                    let stem = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_string();
                    out.insert(stem, path);
                }
            }
        }
    }
    Ok(out)
}

fn read_passing(run: &RunDir) -> Result<Vec<String>, RunError> {
    run.require(&run.passing_json(), "filter")?;
    Ok(serde_json::from_str(&std::fs::read_to_string(
        run.passing_json(),
    )?)?)
}

fn embedding_provider(
    config: &ExperimentConfig,
) -> Result<Box<dyn EmbeddingProvider>, RunError> {
    if config.morph.embedding_provider.is_empty() {
        Ok(Box::new(GridEmbedding {
            grid: config.morph.embedding_grid,
        }))
    } else {
        let root = config.asset_root().ok_or_else(|| {
            RunError::Config("embedding_provider set but no asset root configured".into())
        })?;
        let registry = ProviderRegistry::load(&root)?;
        Ok(Box::new(registry.open(&config.morph.embedding_provider)?))
    }
}

/// Frontality filter over the landmark cache.
pub fn run_filter(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    let landmarks = load_landmark_cache(&config.data.landmarks_file)?;
    std::fs::create_dir_all(run_dir.join("filter"))?;
    let mut w = csv::Writer::from_path(run.frontality_csv())
        .map_err(crate::metrics::MetricError::from)?;
    w.write_record(["image_id", "d_left", "d_right", "asymmetry_ratio", "eye_distance", "pass"])
        .map_err(crate::metrics::MetricError::from)?;
    let mut passing = Vec::new();
    for (id, lms) in &landmarks {
        let report = assess_frontality(lms)?;
        w.write_record([
            id.as_str(),
            &format!("{:.6}", report.d_left),
            &format!("{:.6}", report.d_right),
            &format!("{:.6}", report.asymmetry_ratio),
            &format!("{:.6}", report.eye_distance),
            &report.pass.to_string(),
        ])
        .map_err(crate::metrics::MetricError::from)?;
        if report.pass {
            passing.push(id.clone());
        }
    }
    w.flush()?;
    std::fs::write(run.passing_json(), serde_json::to_string_pretty(&passing)?)?;
    log::info!("filter: {}/{} images pass", passing.len(), landmarks.len());
    run.record_stage(
        config,
        "filter",
        &[&config.data.landmarks_file],
        &[&run.frontality_csv(), &run.passing_json()],
    )
}

/// Key selection and embedding-similarity pairing over the passing images.
pub fn run_pair(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    let passing = read_passing(&run)?;
    let metadata = IdentityMetadata::load(&config.data.metadata_file)?;
    let files = dir_stems(&config.data.bonafide_dir)?;

    let mut refs = Vec::new();
    for id in &passing {
        let identity = metadata
            .images
            .get(id)
            .and_then(|ids| ids.first())
            .ok_or_else(|| RunError::Config(format!("no identity metadata for {id}")))?;
        refs.push(ImageRef {
            image_id: id.clone(),
            identity: identity.clone(),
        });
    }

    let keys: Vec<ImageRef> = if !config.morph.key_ids.is_empty() {
        let by_id: BTreeMap<&str, &ImageRef> =
            refs.iter().map(|r| (r.image_id.as_str(), r)).collect();
        config
            .morph
            .key_ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| RunError::Config(format!("key {id} did not pass the filter")))
            })
            .collect::<Result<_, _>>()?
    } else {
        // First passing image of each identity, first `num_keys` identities.
        let mut by_identity: BTreeMap<&str, &ImageRef> = BTreeMap::new();
        for r in &refs {
            by_identity.entry(r.identity.as_str()).or_insert(r);
        }
        by_identity
            .values()
            .take(config.morph.num_keys)
            .map(|r| (*r).clone())
            .collect()
    };
    if keys.is_empty() {
        return Err(RunError::Config(
            "no key images available; did the frontality filter reject everything?".into(),
        ));
    }
    let key_ids: BTreeSet<&str> = keys.iter().map(|k| k.image_id.as_str()).collect();
    let pool: Vec<ImageRef> = refs
        .iter()
        .filter(|r| !key_ids.contains(r.image_id.as_str()))
        .cloned()
        .collect();

    let provider = embedding_provider(config)?;
    let mut images = Vec::new();
    for r in keys.iter().chain(pool.iter()) {
        let path = files.get(&r.image_id).ok_or_else(|| RunError::MissingArtifact {
            path: config.data.bonafide_dir.join(format!("{}.png", r.image_id)),
            hint: "synth (or point data.bonafide_dir at the corpus)".into(),
        })?;
        images.push((r.image_id.clone(), load_rgb(path)?));
    }
    let table: EmbeddingTable =
        embedding_table(provider.as_ref(), images.iter().map(|(id, img)| (id.as_str(), img)));
    let pairs = select_pairs(&keys, &pool, &table, config.morph.pairs_per_key)?;
    std::fs::create_dir_all(run_dir.join("pair"))?;
    std::fs::write(run.pairs_json(), serde_json::to_string_pretty(&pairs)?)?;
    log::info!("pair: {} pairs for {} keys", pairs.len(), keys.len());
    run.record_stage(
        config,
        "pair",
        &[&run.passing_json(), &config.data.metadata_file],
        &[&run.pairs_json()],
    )
}

pub fn morph_id_for(pair: &MorphPair) -> String {
    format!("m_{}_{}", pair.key.image_id, pair.accomplice.image_id)
}

/// Landmark-warp morph generation for every selected pair.
pub fn run_morph(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    run.require(&run.pairs_json(), "pair")?;
    let pairs: Vec<MorphPair> = serde_json::from_str(&std::fs::read_to_string(run.pairs_json())?)?;
    let landmarks = load_landmark_cache(&config.data.landmarks_file)?;
    let files = dir_stems(&config.data.bonafide_dir)?;
    let morph_dir = run.morph_dir();
    std::fs::create_dir_all(&morph_dir)?;

    // Jobs are independent; results are byte-identical regardless of order.
    let results: Vec<Result<(String, MorphPair, usize), RunError>> = pairs
        .par_iter()
        .map(|pair| {
            let lookup = |id: &str| -> Result<(RgbImage, &crate::morphgen::LandmarkSet), RunError> {
                let path = files.get(id).ok_or_else(|| RunError::Config(format!(
                    "image {id} not found in bona fide dir"
                )))?;
                let lms = landmarks
                    .get(id)
                    .ok_or_else(|| RunError::Config(format!("no landmarks for {id}")))?;
                Ok((load_rgb(path)?, lms))
            };
            let (img_key, lms_key) = lookup(&pair.key.image_id)?;
            let (img_acc, lms_acc) = lookup(&pair.accomplice.image_id)?;
            let job = MorphJob::plan(
                &pair.key.image_id,
                &pair.accomplice.image_id,
                config.morph.alpha,
                lms_key,
                lms_acc,
                img_key.dimensions(),
            )?;
            let morph = warp_blend(&img_key, &img_acc, lms_key, lms_acc, config.morph.alpha)?;
            let id = morph_id_for(pair);
            morph.save(morph_dir.join(format!("{id}.png")))?;
            Ok((id, pair.clone(), job.triangulation.triangles.len()))
        })
        .collect();

    let mut metadata = IdentityMetadata::default();
    let mut jobs = csv::Writer::from_path(run.morph_jobs_csv())
        .map_err(crate::metrics::MetricError::from)?;
    jobs.write_record(["morph_id", "key", "accomplice", "alpha", "triangles"])
        .map_err(crate::metrics::MetricError::from)?;
    let mut count = 0;
    for result in results {
        let (id, pair, triangles) = result?;
        metadata.images.insert(
            id.clone(),
            vec![pair.key.identity.clone(), pair.accomplice.identity.clone()],
        );
        jobs.write_record([
            id.as_str(),
            pair.key.image_id.as_str(),
            pair.accomplice.image_id.as_str(),
            &format!("{}", config.morph.alpha),
            &triangles.to_string(),
        ])
        .map_err(crate::metrics::MetricError::from)?;
        count += 1;
    }
    jobs.flush()?;
    metadata.save(&run.morph_metadata())?;
    log::info!("morph: {count} attack images generated");
    run.record_stage(
        config,
        "morph",
        &[&run.pairs_json(), &config.data.landmarks_file],
        &[&run.morph_dir(), &run.morph_metadata(), &run.morph_jobs_csv()],
    )
}

/// Simulated re-digitization of every passing bona fide and every morph.
pub fn run_redigitize(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    let passing = read_passing(&run)?;
    run.require(&run.morph_dir(), "morph")?;
    let bona_files = dir_stems(&config.data.bonafide_dir)?;
    let morph_files = dir_stems(&run.morph_dir())?;
    let out_dir = run.redigitized_dir();
    std::fs::create_dir_all(&out_dir)?;

    let mut tasks: Vec<(String, PathBuf)> = Vec::new();
    for id in &passing {
        if let Some(path) = bona_files.get(id) {
            tasks.push((id.clone(), path.clone()));
        }
    }
    for (id, path) in &morph_files {
        tasks.push((id.clone(), path.clone()));
    }
    tasks
        .par_iter()
        .map(|(id, path)| -> Result<(), RunError> {
            let img = load_rgb(path)?;
            let profile = config.redigitize.reseeded(derive_seed(config.redigitize.seed, id));
            let out = simulate_redigitization(&img, &profile);
            out.save(out_dir.join(format!("{id}.png")))?;
            Ok(())
        })
        .collect::<Result<Vec<_>, _>>()?;
    config.redigitize.save_json(&run.redigitize_profile())?;
    log::info!("redigitize: {} images", tasks.len());
    run.record_stage(
        config,
        "redigitize",
        &[&run.passing_json(), &run.morph_dir()],
        &[&run.redigitized_dir(), &run.redigitize_profile()],
    )
}

/// Manifest assembly plus the identity-disjoint split.
pub fn run_split(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    let passing: BTreeSet<String> = read_passing(&run)?.into_iter().collect();
    run.require(&run.morph_metadata(), "morph")?;
    run.require(&run.redigitized_dir(), "redigitize")?;
    let mut metadata = IdentityMetadata::load(&config.data.metadata_file)?;
    let morph_meta = IdentityMetadata::load(&run.morph_metadata())?;
    metadata.merge(&morph_meta);

    let records = build_manifest(
        &config.data.bonafide_dir,
        &run.morph_dir(),
        &[run.redigitized_dir()],
        &metadata,
    )?;
    // Keep only quality-filtered bona fides (attacks derive from passing
    // sources by construction).
    let mut records: Vec<SampleRecord> = records
        .into_iter()
        .filter(|r| {
            if r.label == Label::Attack {
                return true;
            }
            let base = r.image_id.strip_suffix(PS_ID_SUFFIX).unwrap_or(&r.image_id);
            passing.contains(base)
        })
        .collect();

    let manifest = split_identity_disjoint(
        &records,
        config.split.ratios,
        config.split.seed,
        Some(&metadata.attributes),
    )?;
    manifest.apply(&mut records)?;
    verify_identity_disjoint(&records)?;
    std::fs::create_dir_all(run_dir.join("split"))?;
    write_manifest_csv(&records, &run.manifest_csv())?;
    manifest.save_json(&run.split_json())?;
    log::info!(
        "split: {} records over {} components",
        records.len(),
        manifest.stats.len()
    );
    run.record_stage(
        config,
        "split",
        &[&run.morph_metadata(), &run.redigitized_dir()],
        &[&run.manifest_csv(), &run.split_json()],
    )
}

fn pwmad_samples_for(
    records: &[SampleRecord],
    config: &crate::pwmad::PwMadConfig,
) -> Result<Vec<PwMadSample>, RunError> {
    let map = config.map_size()?;
    records
        .iter()
        .map(|rec| {
            let img = load_rgb(&rec.path)?;
            Ok(PwMadSample {
                image_id: rec.image_id.clone(),
                image: crate::pwmad::preprocess(&img, config.input_size, &config.normalization),
                pixel_target: make_pixel_labels(rec.label, map).grid,
                binary_target: rec.label.binary_target(),
                split: rec.split,
            })
        })
        .collect()
}

fn image_samples_for(
    records: &[SampleRecord],
    spec: &crate::baselines::ScratchSpec,
) -> Result<Vec<ImageSample>, RunError> {
    records
        .iter()
        .map(|rec| {
            let img = load_rgb(&rec.path)?;
            Ok(ImageSample {
                image_id: rec.image_id.clone(),
                image: crate::pwmad::preprocess(&img, spec.input_size, &spec.normalization),
                binary_target: rec.label.binary_target(),
                split: rec.split,
            })
        })
        .collect()
}

fn provider_for(config: &ExperimentConfig) -> Result<Box<dyn BackboneProvider>, RunError> {
    if config.model.provider.is_empty() {
        return Err(RunError::Config(
            "model.provider must name a registered backbone for this model".into(),
        ));
    }
    let root = config.asset_root().ok_or_else(|| {
        RunError::Config(format!(
            "no asset root configured; set {} or config.asset_root",
            baselines::providers::ASSET_ROOT_ENV
        ))
    })?;
    let registry = ProviderRegistry::load(&root)?;
    Ok(Box::new(registry.open(&config.model.provider)?))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DetectorMeta {
    model: ModelName,
    train_medium: Medium,
}

/// Train the configured detector on the train/dev slices of one medium.
/// Test-split records never reach the loader.
pub fn run_train(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    run.require(&run.manifest_csv(), "split")?;
    let medium = config.eval.train_medium;
    let records = read_manifest_csv(&run.manifest_csv())?;
    let train_records = slice_records(&records, &[Split::Train], medium);
    let dev_records = slice_records(&records, &[Split::Dev], medium);
    assert!(
        train_records.iter().chain(dev_records.iter()).all(|r| r.split != Split::Test),
        "test records must never be selected for training"
    );
    let dir = run.train_dir(medium);
    std::fs::create_dir_all(&dir)?;
    let model = config.model.name;

    match model {
        ModelName::Pwmad => {
            let train = pwmad_samples_for(&train_records, &config.model.pwmad)?;
            let dev = pwmad_samples_for(&dev_records, &config.model.pwmad)?;
            let mut net = PwMadModel::new(config.model.pwmad.clone(), config.train.seed)?;
            let outcome = trainkit::train(&mut net, &train, &dev, &config.train)?;
            net.import_state(&outcome.best_state)?;
            net.save_checkpoint(&dir.join("detector.ckpt"))?;
            outcome.log.write_jsonl(&dir.join("trainlog.jsonl"))?;
        }
        ModelName::Scratch => {
            let train = image_samples_for(&train_records, &config.model.scratch)?;
            let dev = image_samples_for(&dev_records, &config.model.scratch)?;
            let mut net = baselines::build_scratch(&config.model.scratch, config.train.seed)?;
            let outcome = trainkit::train(&mut net, &train, &dev, &config.train)?;
            net.import_state(&outcome.best_state)?;
            net.save_checkpoint(&dir.join("detector.ckpt"))?;
            outcome.log.write_jsonl(&dir.join("trainlog.jsonl"))?;
        }
        ModelName::Lbp => {
            let lbp_config = LbpConfig::default();
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for rec in &train_records {
                let img = image::open(&rec.path)?;
                rows.push(baselines::lbp_features(&img, &lbp_config)?);
                labels.push(rec.label.binary_target());
            }
            let n = rows.len();
            let d = lbp_config.feature_len();
            let features = ndarray::Array2::from_shape_vec(
                (n, d),
                rows.into_iter().flatten().collect(),
            )
            .expect("fixed-length features");
            let (wa, wb) = trainkit::compute_class_weights(&labels)?;
            let weights: Vec<f64> = labels
                .iter()
                .map(|&y| if y >= 0.5 { wa } else { wb })
                .collect();
            let classifier = train_lbp_classifier(
                &features,
                &labels,
                &weights,
                config.model.lbp_iterations,
                config.model.lbp_learning_rate,
            )?;
            let detector = LbpDetector {
                config: lbp_config,
                classifier,
            };
            std::fs::write(dir.join("detector.json"), serde_json::to_string_pretty(&detector)?)?;
        }
        ModelName::FeatureSvm => {
            let provider = provider_for(config)?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for rec in &train_records {
                let img = load_rgb(&rec.path)?;
                rows.push(provider.extract(&img)?);
                labels.push(rec.label.binary_target());
            }
            let n = rows.len();
            let d = provider.feature_dim();
            let features = ndarray::Array2::from_shape_vec(
                (n, d),
                rows.into_iter().flatten().collect(),
            )
            .expect("fixed-length features");
            let (wa, wb) = trainkit::compute_class_weights(&labels)?;
            let weights: Vec<f64> = labels
                .iter()
                .map(|&y| if y >= 0.5 { wa } else { wb })
                .collect();
            let params = train_feature_svm_on_features(
                &provider.name(),
                &features,
                &labels,
                &weights,
                config.model.svm_c,
            )?;
            std::fs::write(dir.join("detector.json"), serde_json::to_string_pretty(&params)?)?;
        }
        ModelName::Finetune => {
            let provider = provider_for(config)?;
            let mut items = Vec::new();
            for rec in train_records.iter().chain(dev_records.iter()) {
                items.push((
                    rec.image_id.clone(),
                    load_rgb(&rec.path)?,
                    rec.label.binary_target(),
                    rec.split,
                ));
            }
            let samples = extract_feature_samples(provider.as_ref(), &items)?;
            let (train, dev): (Vec<_>, Vec<_>) =
                samples.into_iter().partition(|s| s.split == Split::Train);
            let (mut head, log) =
                finetune_classifier_head(provider.as_ref(), &train, &dev, &config.train)?;
            let params = baselines::finetune::FinetunedParams {
                provider_name: provider.name(),
                head: head.export_weights(),
            };
            std::fs::write(dir.join("detector.json"), serde_json::to_string_pretty(&params)?)?;
            log.write_jsonl(&dir.join("trainlog.jsonl"))?;
        }
    }
    let meta = DetectorMeta {
        model,
        train_medium: medium,
    };
    std::fs::write(run.detector_meta(medium), serde_json::to_string_pretty(&meta)?)?;
    log::info!(
        "train: {model} on medium {medium} ({} train / {} dev records)",
        train_records.len(),
        dev_records.len()
    );
    run.record_stage(
        config,
        "train",
        &[&run.manifest_csv()],
        &[&dir],
    )
}

fn load_detector(
    config: &ExperimentConfig,
    run: &RunDir,
    train_medium: Medium,
) -> Result<Box<dyn Detector>, RunError> {
    let meta_path = run.detector_meta(train_medium);
    run.require(&meta_path, &format!("train --train-medium {train_medium}"))?;
    let meta: DetectorMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    let dir = run.train_dir(train_medium);
    Ok(match meta.model {
        ModelName::Pwmad => Box::new(PwMadModel::load_checkpoint(&dir.join("detector.ckpt"))?),
        ModelName::Scratch => Box::new(ScratchModel::load_checkpoint(&dir.join("detector.ckpt"))?),
        ModelName::Lbp => {
            let detector: LbpDetector =
                serde_json::from_str(&std::fs::read_to_string(dir.join("detector.json"))?)?;
            Box::new(detector)
        }
        ModelName::FeatureSvm => {
            let params: crate::baselines::svm::FeatureSvmParams =
                serde_json::from_str(&std::fs::read_to_string(dir.join("detector.json"))?)?;
            let provider = provider_for(config)?;
            Box::new(FeatureSvmDetector { params, provider })
        }
        ModelName::Finetune => {
            let params: baselines::finetune::FinetunedParams =
                serde_json::from_str(&std::fs::read_to_string(dir.join("detector.json"))?)?;
            let provider = provider_for(config)?;
            Box::new(FinetunedDetector::new(params, provider)?)
        }
    })
}

/// Score the test split of the chosen medium and emit the evaluation report.
pub fn run_eval(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    run.require(&run.manifest_csv(), "split")?;
    let train_medium = config.eval.train_medium;
    let test_medium = config.eval.test_medium;
    let mut detector = load_detector(config, &run, train_medium)?;
    let records = read_manifest_csv(&run.manifest_csv())?;
    let test_records = slice_records(&records, &[Split::Test], test_medium);
    let scores = score_table_for(&test_records, |rec| {
        let img = load_rgb(&rec.path)?;
        Ok(detector.score(&img)?)
    })?;
    let model = config.model.name;
    std::fs::create_dir_all(run.root.join("eval"))?;
    scores.write_csv(&run.eval_scores(model, train_medium, test_medium))?;
    let report = EvalReport::from_scores(
        model.as_str(),
        train_medium,
        test_medium,
        &scores,
    )?;
    report.save_json(&run.eval_report(model, train_medium, test_medium))?;
    report.write_roc_csv(&run.eval_roc_csv(model, train_medium, test_medium))?;
    log::info!(
        "eval: {model} Train-{train_medium} Test-{test_medium} on {} samples",
        test_records.len()
    );
    run.record_stage(
        config,
        &format!("eval_{model}_{train_medium}_{test_medium}"),
        &[&run.manifest_csv(), &run.detector_meta(train_medium)],
        &[&run.eval_report(model, train_medium, test_medium)],
    )
}

/// Face-recognition vulnerability: attack-to-contributor similarities plus
/// non-mated calibration scores, then MMPMR at the FMR 0.1% and 1% thresholds.
pub fn run_vuln(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    run.require(&run.pairs_json(), "pair")?;
    run.require(&run.morph_dir(), "morph")?;
    let pairs: Vec<MorphPair> = serde_json::from_str(&std::fs::read_to_string(run.pairs_json())?)?;
    let provider = embedding_provider(config)?;
    let bona_files = dir_stems(&config.data.bonafide_dir)?;
    let morph_files = dir_stems(&run.morph_dir())?;
    let ps_files = dir_stems(&run.redigitized_dir())?;
    let metadata = IdentityMetadata::load(&config.data.metadata_file)?;
    let passing = read_passing(&run)?;
    std::fs::create_dir_all(run.vuln_dir())?;

    let similarity = |a: &[f64], b: &[f64]| -> f64 {
        let dist: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        1.0 / (1.0 + dist)
    };

    let mut summary = BTreeMap::new();
    for medium in [Medium::D, Medium::PS] {
        let resolve = |id: &str| -> Option<PathBuf> {
            match medium {
                Medium::D => bona_files.get(id).or_else(|| morph_files.get(id)).cloned(),
                Medium::PS => ps_files.get(id).cloned(),
            }
        };
        if medium == Medium::PS && ps_files.is_empty() {
            log::warn!("vuln: no re-digitized images; skipping the PS analysis");
            continue;
        }
        let mut embeddings: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut embed = |id: &str| -> Result<Vec<f64>, RunError> {
            if let Some(e) = embeddings.get(id) {
                return Ok(e.clone());
            }
            let path = resolve(id).ok_or_else(|| RunError::MissingArtifact {
                path: run.redigitized_dir().join(format!("{id}.png")),
                hint: "redigitize".into(),
            })?;
            let e = provider.embed(&load_rgb(&path)?);
            embeddings.insert(id.to_string(), e.clone());
            Ok(e)
        };

        let mut entries = Vec::new();
        for pair in &pairs {
            let morph_id = morph_id_for(pair);
            let me = embed(&morph_id)?;
            let ke = embed(&pair.key.image_id)?;
            let ae = embed(&pair.accomplice.image_id)?;
            entries.push(VulnEntry {
                morph_id,
                sim_id1: similarity(&me, &ke),
                sim_id2: similarity(&me, &ae),
            });
        }
        let vuln = VulnTable::new(entries)?;

        // Non-mated scores: passing bona fide images of distinct identities.
        let mut nonmated = Vec::new();
        'outer: for (i, a) in passing.iter().enumerate() {
            for b in passing.iter().skip(i + 1) {
                let ia = metadata.images.get(a).and_then(|v| v.first());
                let ib = metadata.images.get(b).and_then(|v| v.first());
                if ia.is_none() || ib.is_none() || ia == ib {
                    continue;
                }
                if resolve(a).is_none() || resolve(b).is_none() {
                    continue;
                }
                nonmated.push(similarity(&embed(a)?, &embed(b)?));
                if nonmated.len() >= 2000 {
                    break 'outer;
                }
            }
        }

        vuln.write_csv(&run.vuln_dir().join(format!("vuln_{medium}.csv")))?;
        metrics::vuln::write_nonmated_csv(
            &nonmated,
            &run.vuln_dir().join(format!("nonmated_{medium}.csv")),
        )?;
        let mut at = BTreeMap::new();
        for (label, target) in [("fmr_0.1%", 0.001), ("fmr_1%", 0.01)] {
            let threshold = fmr_threshold(&nonmated, target)?;
            let rate = mmpmr(&vuln, threshold.tau)?;
            at.insert(
                label.to_string(),
                serde_json::json!({
                    "target_fmr": target,
                    "tau": threshold.tau,
                    "degenerate": threshold.degenerate,
                    "mmpmr": rate,
                }),
            );
        }
        summary.insert(medium.to_string(), at);
    }
    std::fs::write(
        run.vuln_dir().join("vuln.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    log::info!("vuln: analysis written for {} media", summary.len());
    run.record_stage(
        config,
        "vuln",
        &[&run.pairs_json(), &run.morph_dir()],
        &[&run.vuln_dir()],
    )
}

fn collect_eval_reports(run: &RunDir) -> Result<Vec<EvalReport>, RunError> {
    let eval_dir = run.root.join("eval");
    run.require(&eval_dir, "eval")?;
    let mut reports = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&eval_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    paths.sort();
    for path in paths {
        reports.push(EvalReport::load_json(&path)?);
    }
    if reports.is_empty() {
        return Err(RunError::MissingArtifact {
            path: eval_dir,
            hint: "eval".into(),
        });
    }
    Ok(reports)
}

/// Comparison tables over all evaluation reports in the run, including the
/// cross-medium generalization deltas in BPCER percentage points.
pub fn run_report(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    let mut reports = collect_eval_reports(&run)?;
    reports.sort_by(|a, b| {
        (a.model.clone(), a.train_medium, a.test_medium)
            .cmp(&(b.model.clone(), b.train_medium, b.test_medium))
    });
    std::fs::create_dir_all(run.root.join("report"))?;
    let mut text = String::new();
    text.push_str(&render_bpcer_table(&reports));
    text.push('\n');

    let find = |model: &str, train: Medium, test: Medium| {
        reports
            .iter()
            .find(|r| r.model == model && r.train_medium == train && r.test_medium == test)
            .cloned()
    };
    let models: BTreeSet<String> = reports.iter().map(|r| r.model.clone()).collect();
    let mut generalization_rows = Vec::new();
    let mut generalization_json = Vec::new();
    for model in &models {
        for (in_pair, cross_pair) in [
            ((Medium::D, Medium::D), (Medium::D, Medium::PS)),
            ((Medium::PS, Medium::PS), (Medium::PS, Medium::D)),
        ] {
            if let (Some(in_rep), Some(cross_rep)) = (
                find(model, in_pair.0, in_pair.1),
                find(model, cross_pair.0, cross_pair.1),
            ) {
                let delta = metrics::generalization_report(&in_rep, &cross_rep)?;
                generalization_json.push(serde_json::json!({
                    "model": model,
                    "in_domain": in_rep.setting_label(),
                    "cross_domain": cross_rep.setting_label(),
                    "bpcer_increase_pp_at_apcer10": delta,
                }));
                generalization_rows.push((
                    format!("{model} ({})", cross_rep.setting_label()),
                    in_rep,
                    cross_rep,
                ));
            }
        }
    }
    if !generalization_rows.is_empty() {
        text.push_str(&metrics::report::render_generalization_table(&generalization_rows)?);
    }
    std::fs::write(run.report_txt(), &text)?;
    std::fs::write(
        run.generalization_json(),
        serde_json::to_string_pretty(&generalization_json)?,
    )?;
    log::info!("report: {} evaluation settings", reports.len());
    run.record_stage(
        config,
        "report",
        &[&run.root.join("eval")],
        &[&run.report_txt(), &run.generalization_json()],
    )
}

const PLOT_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One ROC curve per evaluation report: APCER on x, 1-BPCER on y, plus a CSV
/// sidecar with the raw points.
pub fn run_plot(config: &ExperimentConfig, run_dir: &Path) -> Result<(), RunError> {
    let run = RunDir::new(run_dir);
    let _lock = RunLock::acquire(run_dir)?;
    let mut reports = collect_eval_reports(&run)?;
    reports.sort_by(|a, b| {
        (a.model.clone(), a.train_medium, a.test_medium)
            .cmp(&(b.model.clone(), b.train_medium, b.test_medium))
    });
    std::fs::create_dir_all(run.root.join("plot"))?;

    let (width, height) = (640.0, 480.0);
    let (left, right, top, bottom) = (70.0, 20.0, 20.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let x_of = |apcer: f64| left + apcer * plot_w;
    let y_of = |one_minus_bpcer: f64| top + (1.0 - one_minus_bpcer) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let x = x_of(f);
        let y = y_of(f);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            top,
            top + plot_h
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            left,
            left + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{f:.1}</text>\n",
            top + plot_h + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"12\" text-anchor=\"end\">{:.1}</text>\n",
            left - 6.0,
            1.0 - f
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\">APCER</text>\n",
        left + plot_w / 2.0,
        height - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">1-BPCER</text>\n",
        top + plot_h / 2.0,
        top + plot_h / 2.0
    ));

    let mut csv_rows = Vec::new();
    let mut plotted = 0usize;
    for (i, report) in reports.iter().enumerate() {
        if report.roc_points.is_empty() {
            log::warn!(
                "plot: skipping {} {} (empty ROC)",
                report.model,
                report.setting_label()
            );
            continue;
        }
        let color = PLOT_COLORS[i % PLOT_COLORS.len()];
        let label = format!("{} {}", report.model, report.setting_label());
        let points: Vec<String> = report
            .roc_points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_of(p.apcer), y_of(p.one_minus_bpcer)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        let ly = top + 16.0 + 16.0 * plotted as f64;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            left + 10.0,
            left + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{label}</text>\n",
            left + 40.0,
            ly + 4.0
        ));
        for p in &report.roc_points {
            csv_rows.push(format!("{label},{:.17},{:.17}", p.apcer, p.one_minus_bpcer));
        }
        plotted += 1;
    }
    svg.push_str("</svg>\n");
    std::fs::write(run.plot_svg(), svg)?;
    let mut csv_file = std::io::BufWriter::new(std::fs::File::create(run.plot_csv())?);
    writeln!(csv_file, "report,apcer,one_minus_bpcer")?;
    for row in &csv_rows {
        writeln!(csv_file, "{row}")?;
    }
    csv_file.flush()?;
    log::info!("plot: {plotted} curves");
    run.record_stage(
        config,
        "plot",
        &[&run.root.join("eval")],
        &[&run.plot_svg(), &run.plot_csv()],
    )
}

/// Generate a synthetic demo corpus plus a ready-to-run config file.
pub fn run_synth_demo(
    dir: &Path,
    params: &SynthParams,
    config_out: &Path,
) -> Result<ExperimentConfig, RunError> {
    let corpus = generate_corpus(dir, params)?;
    let mut config = ExperimentConfig::default();
    config.data.bonafide_dir = corpus.bonafide_dir.clone();
    config.data.landmarks_file = corpus.landmarks_file.clone();
    config.data.metadata_file = corpus.metadata_file.clone();
    config.morph.num_keys = (params.identities / 3).max(1);
    config.model.pwmad = crate::pwmad::PwMadConfig {
        input_size: 64,
        stem_channels: 12,
        growth_rate: 6,
        bn_size: 2,
        block_layers: vec![2, 2],
        ..crate::pwmad::PwMadConfig::default()
    };
    config.model.scratch.input_size = 64;
    config.train.batch_size = 8;
    config.train.max_epochs = 12;
    config.train.patience = 12;
    config.save(config_out)?;
    Ok(config)
}
