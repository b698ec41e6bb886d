//! Pipeline stages with content-hashed caching.
//!
//! Each stage derives a cache key from the relevant config subset plus the
//! hashes of its input files. A marker file under the cache directory
//! records the key and the stage outputs; when the key matches and every
//! output still exists, the stage is skipped. Keys chain: a stage's inputs
//! include its predecessors' outputs, so touching anything upstream reruns
//! everything downstream.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use deemd_core::efficacy;
use deemd_core::imaging::{self, ChannelStats, MultiChannelImage};
use deemd_core::manifest::{self, Manifest, Split};
use deemd_core::mil::{self, BagDataset};
use deemd_core::nuclei::{self, NucleusCountResult};
use deemd_core::scorer::{Architecture, LossConfig, ScorerModel};
use deemd_core::synthscreen;

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Preprocess,
    Train,
    Eval,
    Map,
    Score,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Map => "map",
            Stage::Score => "score",
        }
    }

    /// Distinct process exit code per failing stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Synth => 10,
            Stage::Preprocess => 20,
            Stage::Train => 30,
            Stage::Eval => 40,
            Stage::Map => 50,
            Stage::Score => 60,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage error carrying which stage failed, for exit-code mapping.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: anyhow::Error,
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {}

type StageResult<T> = std::result::Result<T, StageFailure>;

fn at_stage<T>(stage: Stage, result: Result<T>) -> StageResult<T> {
    result.map_err(|error| StageFailure { stage, error })
}

/// Whether the stage ran or was satisfied from cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Computed,
    Cached,
}

#[derive(Serialize, Deserialize)]
struct CacheMarker {
    key: String,
    outputs: Vec<PathBuf>,
}

fn hash_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    hasher.update(path.to_string_lossy().as_bytes());
    hasher.update(&bytes);
    Ok(())
}

/// Key over a serializable config subset plus input file contents.
fn stage_key<S: Serialize>(stage: Stage, config_subset: &S, inputs: &[PathBuf]) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(stage.name().as_bytes());
    hasher.update(serde_json::to_vec(config_subset)?);
    let mut sorted: Vec<&PathBuf> = inputs.iter().collect();
    sorted.sort();
    for path in sorted {
        hash_file(&mut hasher, path)?;
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs `work` unless the marker for `stage` matches `key` and the outputs
/// it promised still exist.
fn cached_stage(
    cache_dir: &Path,
    stage: Stage,
    key: &str,
    outputs: &[PathBuf],
    work: impl FnOnce() -> Result<()>,
) -> Result<StageStatus> {
    let marker_path = cache_dir.join(format!("{}.json", stage.name()));
    if let Ok(bytes) = std::fs::read(&marker_path) {
        if let Ok(marker) = serde_json::from_slice::<CacheMarker>(&bytes) {
            if marker.key == key && marker.outputs.iter().all(|p| p.exists()) {
                eprintln!("[{stage}] cache hit");
                return Ok(StageStatus::Cached);
            }
        }
    }
    eprintln!("[{stage}] running");
    work()?;
    std::fs::create_dir_all(cache_dir)?;
    let marker = CacheMarker { key: key.to_string(), outputs: outputs.to_vec() };
    std::fs::write(&marker_path, serde_json::to_vec_pretty(&marker)?)?;
    Ok(StageStatus::Computed)
}

pub struct Paths {
    pub manifest_in: PathBuf,
    pub manifest_filtered: PathBuf,
    pub counts_csv: PathBuf,
    pub stats_json: PathBuf,
    pub checkpoint: PathBuf,
    pub training_log: PathBuf,
    pub metrics_json: PathBuf,
    pub maps_dir: PathBuf,
    pub doses_csv: PathBuf,
    pub treatments_csv: PathBuf,
    pub report_json: PathBuf,
}

impl Paths {
    pub fn new(config: &RunConfig) -> Paths {
        let work = &config.paths.work_dir;
        Paths {
            manifest_in: config.paths.data_dir.join("manifest.csv"),
            manifest_filtered: work.join("preprocess/manifest_filtered.csv"),
            counts_csv: work.join("preprocess/counts.csv"),
            stats_json: work.join("preprocess/stats.json"),
            checkpoint: work.join("train/checkpoint.json"),
            training_log: work.join("train/training_log.csv"),
            metrics_json: work.join("eval/metrics.json"),
            maps_dir: work.join("maps"),
            doses_csv: work.join("score/doses.csv"),
            treatments_csv: work.join("score/treatments.csv"),
            report_json: work.join("report.json"),
        }
    }
}

fn manifest_image_paths(manifest: &Manifest) -> Vec<PathBuf> {
    manifest.records.iter().flat_map(|r| r.image_paths.iter().cloned()).collect()
}

fn load_manifest_at(path: &Path, config: &RunConfig) -> Result<Manifest> {
    manifest::load_manifest(path, config.labels.merge_controls)
        .with_context(|| format!("loading manifest {}", path.display()))
}

/// Generates the synthetic screen described by `[synth]` into `data_dir`.
pub fn run_synth(config: &RunConfig) -> StageResult<StageStatus> {
    let stage = Stage::Synth;
    let synth = at_stage(
        stage,
        config.synth.clone().ok_or_else(|| anyhow!("config has no [synth] section")),
    )?;
    let paths = Paths::new(config);
    let outputs = vec![
        paths.manifest_in.clone(),
        config.paths.data_dir.join("ground_truth.csv"),
        config.paths.data_dir.join("planted.csv"),
    ];
    let key = at_stage(stage, stage_key(stage, &synth, &[]))?;
    at_stage(
        stage,
        cached_stage(&config.cache_dir(), stage, &key, &outputs, || {
            std::fs::create_dir_all(&config.paths.data_dir)?;
            synthscreen::generate_screen(&synth, &config.paths.data_dir)?;
            Ok(())
        }),
    )
}

#[derive(Serialize)]
struct PreprocessConfigSubset<'a> {
    labels: &'a crate::config::LabelsSection,
    split: &'a crate::config::SplitSection,
    nuclei: &'a crate::config::NucleiSection,
    split_seed: u64,
}

/// Counts nuclei (stitching 2x2 site groups when present), drops empty
/// samples, assigns splits, and computes train-split channel stats.
pub fn run_preprocess(config: &RunConfig) -> StageResult<StageStatus> {
    let stage = Stage::Preprocess;
    let paths = Paths::new(config);
    let outputs =
        vec![paths.manifest_filtered.clone(), paths.counts_csv.clone(), paths.stats_json.clone()];
    let work = || -> Result<()> {
        let manifest = load_manifest_at(&paths.manifest_in, config)?;
        let counts = count_all(&manifest, config)?;
        let (filtered, removed) = nuclei::filter_empty_samples(&manifest, &counts)?;
        for id in &removed {
            eprintln!("[preprocess] excluded empty sample {id}");
        }
        let mut split =
            manifest::split_dataset(&filtered, config.split_seed(), config.split_weights())?;
        // Relative paths in a manifest resolve against its own directory, so
        // this derived copy (written under work_dir) must carry absolute
        // image paths or reloading it would look in the wrong place.
        for record in &mut split.records {
            for path in &mut record.image_paths {
                *path = std::path::absolute(&*path)?;
            }
        }

        std::fs::create_dir_all(paths.manifest_filtered.parent().unwrap())?;
        manifest::write_manifest(&split, &paths.manifest_filtered)?;
        nuclei::write_counts_csv(&paths.counts_csv, &counts)?;

        let train_images: Result<Vec<MultiChannelImage>> = split
            .records
            .iter()
            .filter(|r| r.split == Some(Split::Train))
            .map(|r| Ok(MultiChannelImage::load(&r.image_paths)?))
            .collect();
        let stats = imaging::compute_channel_stats(train_images?.iter())?;
        std::fs::write(&paths.stats_json, serde_json::to_vec_pretty(&stats)?)?;
        Ok(())
    };
    let compute_key = || -> Result<String> {
        let manifest = load_manifest_at(&paths.manifest_in, config)?;
        let mut inputs = manifest_image_paths(&manifest);
        inputs.push(paths.manifest_in.clone());
        let subset = PreprocessConfigSubset {
            labels: &config.labels,
            split: &config.split,
            nuclei: &config.nuclei,
            split_seed: config.split_seed(),
        };
        stage_key(stage, &subset, &inputs)
    };
    let key = at_stage(stage, compute_key())?;
    at_stage(stage, cached_stage(&config.cache_dir(), stage, &key, &outputs, work))
}

/// Per-record nucleus counts; wells with exactly four sites are stitched
/// and counted once so touching nuclei on site borders are not double
/// counted.
fn count_all(
    manifest: &Manifest,
    config: &RunConfig,
) -> Result<std::collections::HashMap<String, NucleusCountResult>> {
    use rayon::prelude::*;
    let dna = config.nuclei.dna_channel;
    if dna == 0 || dna > manifest.channel_count {
        bail!("dna_channel {dna} outside 1..={}", manifest.channel_count);
    }

    let mut wells: BTreeMap<(String, String), Vec<&manifest::SampleRecord>> = BTreeMap::new();
    for record in &manifest.records {
        wells
            .entry((record.plate.clone(), record.well.clone()))
            .or_default()
            .push(record);
    }
    let groups: Vec<Vec<&manifest::SampleRecord>> = wells.into_values().collect();
    let counted: Vec<Vec<(String, NucleusCountResult)>> = groups
        .par_iter()
        .map(|records| -> Result<Vec<(String, NucleusCountResult)>> {
            if records.len() == 4 {
                let mut sites = records.to_vec();
                sites.sort_by_key(|r| r.site);
                let images: Result<Vec<MultiChannelImage>> = sites
                    .iter()
                    .map(|r| Ok(MultiChannelImage::load(&r.image_paths)?))
                    .collect();
                let stitched = imaging::stitch_sites(&images?, imaging::SiteLayout::default())?;
                let result =
                    nuclei::count_nuclei(stitched.channel(dna - 1), config.nuclei.min_area);
                Ok(sites
                    .iter()
                    .map(|r| (r.sample_id.clone(), result.clone()))
                    .collect())
            } else {
                records
                    .iter()
                    .map(|r| {
                        let image = MultiChannelImage::load(&r.image_paths)?;
                        Ok((
                            r.sample_id.clone(),
                            nuclei::count_nuclei(image.channel(dna - 1), config.nuclei.min_area),
                        ))
                    })
                    .collect()
            }
        })
        .collect::<Result<_>>()?;
    Ok(counted.into_iter().flatten().collect())
}

#[derive(Serialize)]
struct TrainConfigSubset<'a> {
    grid: &'a crate::config::GridSection,
    train: &'a crate::config::TrainSection,
    eta: f64,
    train_seed: u64,
    init_seed: u64,
}

fn load_stats(paths: &Paths) -> Result<ChannelStats> {
    let bytes = std::fs::read(&paths.stats_json)
        .with_context(|| format!("reading {}", paths.stats_json.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn dataset(
    manifest: &Manifest,
    split: Split,
    stats: &ChannelStats,
    config: &RunConfig,
) -> Result<BagDataset> {
    Ok(BagDataset::load(manifest, split, stats, config.grid_config()?)?)
}

/// Trains the instance scorer on the train/validation splits.
pub fn run_train(config: &RunConfig) -> StageResult<StageStatus> {
    let stage = Stage::Train;
    let paths = Paths::new(config);
    let outputs = vec![paths.checkpoint.clone(), paths.training_log.clone()];
    let subset = TrainConfigSubset {
        grid: &config.grid,
        train: &config.train,
        eta: config.thresholds.eta,
        train_seed: config.train_seed(),
        init_seed: config.init_seed(),
    };
    let compute_key = || -> Result<String> {
        let manifest = load_manifest_at(&paths.manifest_filtered, config)?;
        let mut inputs = manifest_image_paths(&manifest);
        inputs.push(paths.manifest_filtered.clone());
        inputs.push(paths.stats_json.clone());
        stage_key(stage, &subset, &inputs)
    };
    let key = at_stage(stage, compute_key())?;
    let key_for_checkpoint = key.clone();
    let work = || -> Result<()> {
        let manifest = load_manifest_at(&paths.manifest_filtered, config)?;
        let stats = load_stats(&paths)?;
        let train_set = dataset(&manifest, Split::Train, &stats, config)?;
        let val_set = dataset(&manifest, Split::Validation, &stats, config)?;
        if train_set.samples.is_empty() {
            bail!("no training samples after preprocessing");
        }
        let positives = train_set.samples.iter().filter(|s| s.label).count();
        let negatives = train_set.samples.len() - positives;
        let loss_cfg = LossConfig::inverse_frequency(positives, negatives)?;
        let arch = Architecture::reference(manifest.channel_count, config.grid.patch_size);
        let model = ScorerModel::init(arch, config.init_seed());
        let outcome = mil::train(&train_set, &val_set, model, &config.train_config(), &loss_cfg)?;

        std::fs::create_dir_all(paths.checkpoint.parent().unwrap())?;
        outcome.model.save_checkpoint(&paths.checkpoint, &key_for_checkpoint)?;
        mil::write_training_log(&outcome.log, &paths.training_log)?;
        Ok(())
    };
    at_stage(stage, cached_stage(&config.cache_dir(), stage, &key, &outputs, work))
}

#[derive(Serialize, Deserialize)]
pub struct EvalMetrics {
    pub k: usize,
    pub eta: f64,
    pub validation_ap: f64,
    pub untreated_test_ap: f64,
    pub validation_samples: usize,
    pub untreated_test_samples: usize,
}

/// Evaluates the trained scorer on the validation and untreated test sets.
pub fn run_eval(config: &RunConfig) -> StageResult<StageStatus> {
    let stage = Stage::Eval;
    let paths = Paths::new(config);
    let outputs = vec![paths.metrics_json.clone()];
    let compute_key = || -> Result<String> {
        let subset = (config.train.k, config.thresholds.eta, &config.grid);
        stage_key(
            stage,
            &subset,
            &[
                paths.checkpoint.clone(),
                paths.manifest_filtered.clone(),
                paths.stats_json.clone(),
            ],
        )
    };
    let key = at_stage(stage, compute_key())?;
    let work = || -> Result<()> {
        let manifest = load_manifest_at(&paths.manifest_filtered, config)?;
        let stats = load_stats(&paths)?;
        let (model, _) = ScorerModel::load_checkpoint(&paths.checkpoint)?;
        let k = config.train.k;
        let ap_on = |split: Split| -> Result<(f64, usize)> {
            let set = dataset(&manifest, split, &stats, config)?;
            let (scores, labels) = mil::bag_scores(&model, &set, k)?;
            Ok((mil::evaluate_ap(&scores, &labels)?.average_precision, set.samples.len()))
        };
        let (validation_ap, validation_samples) = ap_on(Split::Validation)?;
        let (untreated_test_ap, untreated_test_samples) = ap_on(Split::UntreatedTest)?;
        let metrics = EvalMetrics {
            k,
            eta: config.thresholds.eta,
            validation_ap,
            untreated_test_ap,
            validation_samples,
            untreated_test_samples,
        };
        std::fs::create_dir_all(paths.metrics_json.parent().unwrap())?;
        std::fs::write(&paths.metrics_json, serde_json::to_vec_pretty(&metrics)?)?;
        Ok(())
    };
    at_stage(stage, cached_stage(&config.cache_dir(), stage, &key, &outputs, work))
}

/// Renders infection maps and per-channel red overlays for held-out
/// infected samples.
pub fn run_map(config: &RunConfig) -> StageResult<StageStatus> {
    let stage = Stage::Map;
    let paths = Paths::new(config);
    let outputs = vec![paths.maps_dir.clone()];
    let compute_key = || -> Result<String> {
        let subset = (
            config.train.k,
            config.thresholds.alpha,
            config.thresholds.sigma,
            config.maps.limit,
            &config.grid,
        );
        stage_key(
            stage,
            &subset,
            &[
                paths.checkpoint.clone(),
                paths.manifest_filtered.clone(),
                paths.stats_json.clone(),
            ],
        )
    };
    let key = at_stage(stage, compute_key())?;
    let work = || -> Result<()> {
        let manifest = load_manifest_at(&paths.manifest_filtered, config)?;
        let stats = load_stats(&paths)?;
        let (model, _) = ScorerModel::load_checkpoint(&paths.checkpoint)?;
        if model.arch().in_channels != manifest.channel_count {
            bail!(
                "checkpoint mismatch: model expects {} channels, manifest has {}",
                model.arch().in_channels,
                manifest.channel_count
            );
        }
        emit_map_overlays(&model, &manifest, &stats, config, &paths.maps_dir)?;
        Ok(())
    };
    at_stage(stage, cached_stage(&config.cache_dir(), stage, &key, &outputs, work))
}

/// One grayscale map plus one overlay per channel for each selected sample.
pub fn emit_map_overlays(
    model: &ScorerModel,
    manifest: &Manifest,
    stats: &ChannelStats,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<()> {
    use rayon::prelude::*;
    let grid = config.grid_config()?;
    let mut selected: Vec<&manifest::SampleRecord> = manifest
        .records
        .iter()
        .filter(|r| {
            r.split == Some(Split::UntreatedTest)
                && r.condition == manifest::Condition::Infected
        })
        .collect();
    selected.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    selected.truncate(config.maps.limit);
    std::fs::create_dir_all(out_dir)?;
    selected.par_iter().try_for_each(|record| -> Result<()> {
        let raw = MultiChannelImage::load(&record.image_paths)?;
        let normalized = imaging::normalize(&raw, stats)?;
        let scores =
            mil::score_sample(model, &record.sample_id, &normalized, &grid, config.train.k)?;
        let map = deemd_core::infmap::build_infection_map(
            &scores,
            &grid,
            raw.height(),
            raw.width(),
            config.thresholds.alpha,
            config.thresholds.sigma,
        )?;
        deemd_core::infmap::write_map_png(
            &map,
            &out_dir.join(format!("{}_map.png", record.sample_id)),
        )?;
        for ch in 0..raw.channels() {
            deemd_core::infmap::write_overlay_png(
                raw.channel(ch),
                &map,
                &out_dir.join(format!("{}_c{}_overlay.png", record.sample_id, ch + 1)),
            )?;
        }
        Ok(())
    })
}

/// Scores the treated test set and writes the dose and treatment tables.
pub fn run_score(config: &RunConfig) -> StageResult<StageStatus> {
    let stage = Stage::Score;
    let paths = Paths::new(config);
    let outputs = vec![paths.doses_csv.clone(), paths.treatments_csv.clone()];
    let compute_key = || -> Result<String> {
        let subset = (
            config.train.k,
            config.thresholds.zeta,
            config.thresholds.confidence,
            &config.grid,
        );
        stage_key(
            stage,
            &subset,
            &[
                paths.checkpoint.clone(),
                paths.manifest_filtered.clone(),
                paths.stats_json.clone(),
            ],
        )
    };
    let key = at_stage(stage, compute_key())?;
    let work = || -> Result<()> {
        let manifest = load_manifest_at(&paths.manifest_filtered, config)?;
        let stats = load_stats(&paths)?;
        let (model, _) = ScorerModel::load_checkpoint(&paths.checkpoint)?;
        let treated = dataset(&manifest, Split::TreatedTest, &stats, config)?;
        if treated.samples.is_empty() {
            bail!("no treated test samples to score");
        }
        let score_sets = mil::score_all_patches(&model, &treated, config.train.k)?;

        let record_of: BTreeMap<&str, &manifest::SampleRecord> =
            manifest.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        // Keyed by (treatment, concentration bits): positive floats order
        // like their bit patterns, keeping rows sorted by concentration.
        let mut by_dose: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
        for (set, sample) in score_sets.iter().zip(&treated.samples) {
            let record = record_of[sample.sample_id.as_str()];
            let key = (
                record.treatment.clone().expect("treated record"),
                record.concentration.expect("treated record").to_bits(),
            );
            by_dose.entry(key).or_default().push(mil::sample_infection_probability(set));
        }

        let mut groups = Vec::new();
        for ((treatment, bits), replicates) in &by_dose {
            groups.push(efficacy::dose_group(
                treatment,
                f64::from_bits(*bits),
                replicates.clone(),
                config.thresholds.confidence,
            )?);
        }
        let mut per_treatment: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for g in &groups {
            per_treatment
                .entry(g.treatment.clone())
                .or_default()
                .push((g.concentration, g.e));
        }
        let scores: std::result::Result<Vec<_>, _> = per_treatment
            .iter()
            .map(|(t, doses)| efficacy::treatment_efficacy(t, doses, config.thresholds.zeta))
            .collect();
        let (ranked, _effective) = efficacy::rank_treatments(scores?);

        std::fs::create_dir_all(paths.doses_csv.parent().unwrap())?;
        efficacy::write_doses_csv(&paths.doses_csv, &groups)?;
        efficacy::write_treatments_csv(&paths.treatments_csv, &ranked)?;
        Ok(())
    };
    at_stage(stage, cached_stage(&config.cache_dir(), stage, &key, &outputs, work))
}

#[derive(Serialize)]
pub struct Report {
    pub config: RunConfig,
    pub dataset_hash: String,
    pub validation_ap: f64,
    pub untreated_test_ap: f64,
    pub effective_treatments: Vec<String>,
    pub ranking: Vec<ReportRanking>,
}

#[derive(Serialize)]
pub struct ReportRanking {
    pub rank: usize,
    pub treatment: String,
    pub e_t: f64,
    pub effective: bool,
}

/// Summary of a full `screen` run.
pub struct ScreenSummary {
    pub statuses: Vec<(Stage, StageStatus)>,
    pub effective_treatments: Vec<String>,
    pub report_path: PathBuf,
}

/// The composite pipeline: synth (when configured), preprocess, train,
/// eval, map, score, then the run report.
pub fn run_screen(config: &RunConfig) -> StageResult<ScreenSummary> {
    let mut statuses = Vec::new();
    if config.synth.is_some() {
        statuses.push((Stage::Synth, run_synth(config)?));
    }
    statuses.push((Stage::Preprocess, run_preprocess(config)?));
    statuses.push((Stage::Train, run_train(config)?));
    statuses.push((Stage::Eval, run_eval(config)?));
    statuses.push((Stage::Map, run_map(config)?));
    statuses.push((Stage::Score, run_score(config)?));

    let paths = Paths::new(config);
    let report = at_stage(Stage::Score, || -> Result<Report> {
        let metrics: EvalMetrics =
            serde_json::from_slice(&std::fs::read(&paths.metrics_json)?)?;
        let manifest = load_manifest_at(&paths.manifest_in, config)?;
        let mut inputs = manifest_image_paths(&manifest);
        inputs.push(paths.manifest_in.clone());
        let dataset_hash = {
            let mut hasher = Sha256::new();
            let mut sorted = inputs.clone();
            sorted.sort();
            for path in &sorted {
                hash_file(&mut hasher, path)?;
            }
            let digest = hasher.finalize();
            digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
        };

        let mut ranking = Vec::new();
        let mut effective = Vec::new();
        let mut reader = csv::Reader::from_path(&paths.treatments_csv)?;
        for row in reader.records() {
            let row = row?;
            let treatment = row.get(0).unwrap_or("").to_string();
            let e_t: f64 = row.get(1).unwrap_or("0").parse()?;
            let is_effective = row.get(2) == Some("true");
            let rank: usize = row.get(3).unwrap_or("0").parse()?;
            if is_effective {
                effective.push(treatment.clone());
            }
            ranking.push(ReportRanking { rank, treatment, e_t, effective: is_effective });
        }
        effective.sort();
        Ok(Report {
            config: config.clone(),
            dataset_hash,
            validation_ap: metrics.validation_ap,
            untreated_test_ap: metrics.untreated_test_ap,
            effective_treatments: effective,
            ranking,
        })
    }())?;

    at_stage(Stage::Score, || -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        std::fs::write(&paths.report_json, bytes)?;
        Ok(())
    }())?;

    Ok(ScreenSummary {
        statuses,
        effective_treatments: report.effective_treatments,
        report_path: paths.report_json,
    })
}
