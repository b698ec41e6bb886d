//! Top-k multiple-instance training, bag inference, and evaluation.
//!
//! Training follows the relaxed multiple-instance assumption: a positive bag
//! contains at least `k` positive patches. Each epoch runs exhaustive
//! inference over every patch with the parameters frozen at epoch start,
//! selects the `k` highest-scoring patches per bag, assigns them the bag
//! label, and minimizes the class-weighted BCE over those instances with
//! Adam under a one-cycle cosine learning-rate schedule. Optimizer steps
//! inside an epoch do not re-rank patches.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{extract_patches, ChannelStats, GridConfig, ImagingError, MultiChannelImage};
use crate::infmap::{build_infection_map, infected_fraction, InfmapError};
use crate::manifest::{BinaryClass, Manifest, Split};
use crate::scorer::{LossConfig, ScorerError, ScorerModel};

#[derive(Debug, Error)]
pub enum MilError {
    #[error("rank {rank} out of range for {len} values")]
    RankOutOfRange { rank: usize, len: usize },
    #[error("need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("scores and labels differ in length")]
    LengthMismatch,
    #[error("patch score {0} outside (0, 1)")]
    BadScore(f64),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Infmap(#[from] InfmapError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// The `r`-th greatest element (1-based) of `values`.
pub fn kth_greatest(values: &[f64], r: usize) -> Result<f64, MilError> {
    if r == 0 || r > values.len() {
        return Err(MilError::RankOutOfRange { rank: r, len: values.len() });
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[r - 1])
}

/// Indices of the `k` largest scores, ties broken by ascending patch index.
/// The result is sorted ascending.
pub fn select_top_k(values: &[f64], k: usize) -> Result<Vec<usize>, MilError> {
    if k == 0 || k > values.len() {
        return Err(MilError::RankOutOfRange { rank: k, len: values.len() });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap().then_with(|| a.cmp(&b))
    });
    let mut top: Vec<usize> = order.into_iter().take(k).collect();
    top.sort_unstable();
    Ok(top)
}

/// Patch probabilities for one sample plus the top-k bookkeeping.
#[derive(Clone, Debug)]
pub struct PatchScoreSet {
    pub sample_id: String,
    pub scores: Vec<f64>,
    pub k: usize,
    pub top_k: Vec<usize>,
}

impl PatchScoreSet {
    /// Validates scores and selects the top `min(k, N)` indices.
    pub fn new(sample_id: String, scores: Vec<f64>, k: usize) -> Result<Self, MilError> {
        if k == 0 {
            return Err(MilError::RankOutOfRange { rank: 0, len: scores.len() });
        }
        for &mu in &scores {
            if !(mu > 0.0 && mu < 1.0) {
                return Err(MilError::BadScore(mu));
            }
        }
        let effective = k.min(scores.len());
        let top_k = select_top_k(&scores, effective)?;
        Ok(PatchScoreSet { sample_id, scores, k, top_k })
    }

    /// The bag-level score `m(M, k)`.
    pub fn bag_score(&self) -> Result<f64, MilError> {
        kth_greatest(&self.scores, self.k)
    }
}

/// Bag classification: positive iff the k-th greatest score reaches `eta`.
pub fn predict_bag(scores: &PatchScoreSet, eta: f64) -> Result<bool, MilError> {
    Ok(scores.bag_score()? >= eta)
}

/// Per-sample infection probability: the median score over the top-k set
/// (even cardinality takes the mean of the two central order statistics).
pub fn sample_infection_probability(scores: &PatchScoreSet) -> f64 {
    let mut top: Vec<f64> = scores.top_k.iter().map(|&j| scores.scores[j]).collect();
    median_in_place(&mut top)
}

fn median_in_place(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One point of the precision-recall curve.
#[derive(Clone, Copy, Debug)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Average precision plus the curve it integrates.
#[derive(Clone, Debug)]
pub struct ApEvaluation {
    pub average_precision: f64,
    pub curve: Vec<PrPoint>,
}

/// Average precision by the step-interpolation sum over recall increments,
/// grouping tied scores into one threshold.
pub fn evaluate_ap(scores: &[f64], labels: &[bool]) -> Result<ApEvaluation, MilError> {
    if scores.len() != labels.len() {
        return Err(MilError::LengthMismatch);
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() || labels.is_empty() {
        return Err(MilError::DegenerateLabels);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MilError::BadScore(f64::NAN));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut curve = Vec::new();
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole group of tied scores.
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        curve.push(PrPoint { threshold, precision, recall });
    }
    Ok(ApEvaluation { average_precision: ap, curve })
}

/// Training hyperparameters.
///
/// `eta` is the bag cutoff threshold; the learning rate is a separate knob
/// (`peak_lr`) to keep the two roles apart.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_frac: f64,
    pub patience: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            epochs: 150,
            batch_size: 128,
            peak_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            warmup_frac: 0.3,
            patience: 10,
            eta: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), MilError> {
        if self.k == 0 {
            return Err(MilError::BadConfig("k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(MilError::BadConfig("batch size must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(MilError::BadConfig(format!("eta {} outside (0, 1)", self.eta)));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(MilError::BadConfig("peak learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(MilError::BadConfig("warmup fraction must lie in [0, 1)".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(MilError::BadConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One-cycle cosine schedule: cosine ramp from `peak / 25` up to `peak`
/// over the warmup fraction of steps, then cosine decay back to the floor.
#[derive(Clone, Copy, Debug)]
pub struct OneCycleSchedule {
    peak: f64,
    floor: f64,
    warmup_steps: usize,
    total_steps: usize,
}

impl OneCycleSchedule {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_frac).round() as usize;
        OneCycleSchedule { peak: peak_lr, floor: peak_lr / 25.0, warmup_steps, total_steps }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        use std::f64::consts::PI;
        if self.total_steps == 0 {
            return self.peak;
        }
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            self.floor + (self.peak - self.floor) * 0.5 * (1.0 - (PI * t).cos())
        } else {
            let span = (self.total_steps - self.warmup_steps).max(1);
            let t = (step - self.warmup_steps) as f64 / span as f64;
            self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (PI * t).cos())
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1, beta2, eps: 1e-8 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One labeled bag: a normalized image scored patch-by-patch.
#[derive(Clone, Debug)]
pub struct BagSample {
    pub sample_id: String,
    pub label: bool,
    pub image: MultiChannelImage,
}

/// A set of bags sharing one patch grid.
#[derive(Clone, Debug)]
pub struct BagDataset {
    pub grid: GridConfig,
    pub samples: Vec<BagSample>,
}

impl BagDataset {
    /// Loads and normalizes every record of `split` that has a class under
    /// the manifest's label rule. Images load in parallel.
    pub fn load(
        manifest: &Manifest,
        split: Split,
        stats: &ChannelStats,
        grid: GridConfig,
    ) -> Result<Self, MilError> {
        let records: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.split == Some(split))
            .filter(|r| manifest.label_rule.class_of(r.condition).is_some())
            .collect();
        let samples = records
            .par_iter()
            .map(|record| {
                let image = MultiChannelImage::load(&record.image_paths)?;
                let image = crate::imaging::normalize(&image, stats)?;
                let label = manifest.label_rule.class_of(record.condition).unwrap()
                    == BinaryClass::Positive;
                Ok(BagSample { sample_id: record.sample_id.clone(), label, image })
            })
            .collect::<Result<Vec<_>, MilError>>()?;
        Ok(BagDataset { grid, samples })
    }

    fn instance_count(&self, k: usize) -> Result<usize, MilError> {
        let mut total = 0;
        for sample in &self.samples {
            let n = self.grid.patch_count(sample.image.height(), sample.image.width())?;
            if k > n {
                return Err(MilError::RankOutOfRange { rank: k, len: n });
            }
            total += k;
        }
        Ok(total)
    }
}

/// Scores every patch of one image under the grid.
pub fn score_sample(
    model: &ScorerModel,
    sample_id: &str,
    image: &MultiChannelImage,
    grid: &GridConfig,
    k: usize,
) -> Result<PatchScoreSet, MilError> {
    let patches = extract_patches(image, grid)?;
    let mut scores = Vec::with_capacity(patches.len());
    for patch in &patches {
        scores.push(model.score_patch(&patch.pixels)?);
    }
    PatchScoreSet::new(sample_id.to_string(), scores, k)
}

/// Exhaustive inference: patch scores for every bag, parallel over bags.
pub fn score_all_patches(
    model: &ScorerModel,
    dataset: &BagDataset,
    k: usize,
) -> Result<Vec<PatchScoreSet>, MilError> {
    dataset
        .samples
        .par_iter()
        .map(|s| score_sample(model, &s.sample_id, &s.image, &dataset.grid, k))
        .collect()
}

/// Bag-level scores `m(M_i, k)` and labels for a dataset, for AP evaluation.
pub fn bag_scores(
    model: &ScorerModel,
    dataset: &BagDataset,
    k: usize,
) -> Result<(Vec<f64>, Vec<bool>), MilError> {
    let score_sets = score_all_patches(model, dataset, k)?;
    let scores = score_sets.iter().map(|s| s.bag_score()).collect::<Result<Vec<_>, _>>()?;
    let labels = dataset.samples.iter().map(|s| s.label).collect();
    Ok((scores, labels))
}

/// Per-epoch training log entry.
#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ap: f64,
    pub lr: f64,
}

/// A trained model plus its per-epoch log.
pub struct TrainOutcome {
    pub model: ScorerModel,
    pub log: Vec<EpochLog>,
}

/// Trains the scorer with the top-k procedure.
///
/// Per epoch: (a) exhaustive inference with the epoch-start parameters;
/// (b) top-k selection per bag; (c) Adam steps on shuffled minibatches of
/// the selected instances labeled with their bag label. Validation AP is
/// monitored for early stopping with the configured patience and the best
/// checkpoint is restored. Deterministic given the seed.
pub fn train(
    train_set: &BagDataset,
    val_set: &BagDataset,
    model: ScorerModel,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome, MilError> {
    cfg.validate()?;
    if train_set.samples.is_empty() {
        return Err(MilError::EmptyDataset);
    }
    let instances_per_epoch = train_set.instance_count(cfg.k)?;
    let steps_per_epoch = instances_per_epoch.div_ceil(cfg.batch_size);
    let schedule = OneCycleSchedule::new(cfg.peak_lr, cfg.epochs * steps_per_epoch, cfg.warmup_frac);

    let mut model = model;
    let mut adam = Adam::new(model.params().len(), cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.epochs {
        // (a) + (b): freeze parameters, rank patches, pick instances.
        let score_sets = score_all_patches(&model, train_set, cfg.k)?;
        let mut instances: Vec<(usize, usize)> = Vec::with_capacity(instances_per_epoch);
        for (sample_idx, set) in score_sets.iter().enumerate() {
            for &patch_idx in &set.top_k {
                instances.push((sample_idx, patch_idx));
            }
        }
        instances.shuffle(&mut rng);

        // (c): optimizer steps; ranking stays fixed for the whole epoch.
        let mut loss_acc = 0.0;
        let mut epoch_lr = schedule.lr_at(global_step);
        for chunk in instances.chunks(cfg.batch_size) {
            let batch: Vec<(Array3<f64>, bool)> = chunk
                .par_iter()
                .map(|&(sample_idx, patch_idx)| {
                    let sample = &train_set.samples[sample_idx];
                    let patch =
                        crate::imaging::extract_patch(&sample.image, &train_set.grid, patch_idx)?;
                    Ok((patch.pixels, sample.label))
                })
                .collect::<Result<_, MilError>>()?;
            loss_acc += model.batch_loss(&batch, loss_cfg)? * batch.len() as f64;
            let grad = model.gradient(&batch, loss_cfg)?;
            epoch_lr = schedule.lr_at(global_step);
            adam.step(model.params_mut(), &grad, epoch_lr);
            global_step += 1;
        }
        let train_loss = loss_acc / instances.len() as f64;

        // Validation AP with the updated parameters.
        let val_ap = if val_set.samples.is_empty() {
            f64::NAN
        } else {
            let (scores, labels) = bag_scores(&model, val_set, cfg.k)?;
            evaluate_ap(&scores, &labels)?.average_precision
        };
        log.push(EpochLog { epoch, train_loss, val_ap, lr: epoch_lr });

        if val_ap.is_nan() {
            continue;
        }
        // Ties keep the most recent parameters: once AP saturates, later
        // epochs are better calibrated at the same ranking quality. Only a
        // strict improvement resets the patience counter.
        match &best {
            Some((best_ap, _)) if val_ap < *best_ap => {
                epochs_since_best += 1;
                if epochs_since_best >= cfg.patience {
                    break;
                }
            }
            Some((best_ap, _)) => {
                let improved = val_ap > *best_ap;
                best = Some((val_ap, model.params().to_vec()));
                if improved {
                    epochs_since_best = 0;
                } else {
                    epochs_since_best += 1;
                    if epochs_since_best >= cfg.patience {
                        break;
                    }
                }
            }
            None => {
                best = Some((val_ap, model.params().to_vec()));
                epochs_since_best = 0;
            }
        }
    }

    if let Some((_, params)) = best {
        model.params_mut().copy_from_slice(&params);
    }
    Ok(TrainOutcome { model, log })
}

/// Writes the per-epoch log as `epoch,train_loss,val_ap,lr`.
pub fn write_training_log(log: &[EpochLog], path: &Path) -> Result<(), MilError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "train_loss", "val_ap", "lr"])?;
    for entry in log {
        writer.write_record(&[
            entry.epoch.to_string(),
            entry.train_loss.to_string(),
            entry.val_ap.to_string(),
            entry.lr.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Per-k summary for hyperparameter selection.
#[derive(Clone, Copy, Debug)]
pub struct CandidateKEntry {
    pub k: usize,
    pub mean_infected_fraction: f64,
    pub average_precision: f64,
    pub flagged: bool,
}

/// Near-tie width on the fraction distance when flagging the preferred k.
const K_FLAG_TIE_WIDTH: f64 = 1e-3;

/// For each candidate k (with its trained model): the mean infected-pixel
/// fraction over the validation set and the validation AP. Flags the k whose
/// fraction is nearest the theoretical value `1 - exp(-moi)`; near-ties go
/// to the higher AP, then the smaller k.
pub fn candidate_k_report(
    models: &[(usize, ScorerModel)],
    validation: &BagDataset,
    moi: f64,
    eta: f64,
    alpha: f64,
    sigma: f64,
) -> Result<Vec<CandidateKEntry>, MilError> {
    if models.is_empty() || validation.samples.is_empty() {
        return Err(MilError::EmptyDataset);
    }
    let target = crate::synthscreen::poisson_infection_probability(moi)
        .map_err(|e| MilError::BadConfig(e.to_string()))?;

    let mut entries = Vec::with_capacity(models.len());
    for (k, model) in models {
        let score_sets = score_all_patches(model, validation, *k)?;
        let mut fraction_sum = 0.0;
        for (set, sample) in score_sets.iter().zip(&validation.samples) {
            let map = build_infection_map(
                set,
                &validation.grid,
                sample.image.height(),
                sample.image.width(),
                alpha,
                sigma,
            )?;
            fraction_sum += infected_fraction(&map, eta);
        }
        let scores: Vec<f64> =
            score_sets.iter().map(|s| s.bag_score()).collect::<Result<_, _>>()?;
        let labels: Vec<bool> = validation.samples.iter().map(|s| s.label).collect();
        let ap = evaluate_ap(&scores, &labels)?.average_precision;
        entries.push(CandidateKEntry {
            k: *k,
            mean_infected_fraction: fraction_sum / validation.samples.len() as f64,
            average_precision: ap,
            flagged: false,
        });
    }

    let flag_idx = preferred_candidate(&entries, target);
    entries[flag_idx].flagged = true;
    Ok(entries)
}

/// The k whose fraction lands nearest the target; fractions within the tie
/// width of the best distance compete on AP, then on smaller k.
fn preferred_candidate(entries: &[CandidateKEntry], target: f64) -> usize {
    let min_dist = entries
        .iter()
        .map(|e| (e.mean_infected_fraction - target).abs())
        .fold(f64::INFINITY, f64::min);
    entries
        .iter()
        .enumerate()
        .filter(|(_, e)| (e.mean_infected_fraction - target).abs() <= min_dist + K_FLAG_TIE_WIDTH)
        .min_by(|(_, a), (_, b)| {
            b.average_precision
                .partial_cmp(&a.average_precision)
                .unwrap()
                .then_with(|| a.k.cmp(&b.k))
        })
        .map(|(i, _)| i)
        .expect("non-empty entries")
}
