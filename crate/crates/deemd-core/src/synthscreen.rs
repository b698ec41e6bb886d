//! Deterministic synthetic phantom screens with known instance-level ground
//! truth.
//!
//! Each sample image renders a population of cells: Gaussian-profile nuclei
//! in the first channel plus correlated organelle textures in the remaining
//! channels. Infected cells add a bright rounded disc and fragmentation
//! speckle across the non-nucleus channels, and a configurable fraction of
//! them lose their countable nucleus (planted cell loss). Infection follows
//! a Poisson exposure model: an untreated infected cell catches the
//! infection with probability `1 - exp(-moi)`, and a treatment with
//! effectiveness `q` rescales that to `(1 - q) * (1 - exp(-moi))`.
//!
//! Every random decision derives from `(seed, sample ordinal, cell index,
//! purpose)`, so regeneration is byte-identical and the per-cell infection
//! coin is shared across effectiveness levels: raising a planted
//! effectiveness can only ever un-infect cells.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{GridConfig, MultiChannelImage};
use crate::manifest::{Condition, LabelRule, Manifest, SampleRecord, Split};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("moi must be non-negative, got {0}")]
    NegativeMoi(f64),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Manifest(#[from] crate::manifest::ManifestError),
}

/// Probability that a cell is infected under a Poisson virion-count model:
/// `1 - P[X = 0] = 1 - exp(-moi)`.
pub fn poisson_infection_probability(moi: f64) -> Result<f64, SynthError> {
    if moi.is_nan() || moi < 0.0 {
        return Err(SynthError::NegativeMoi(moi));
    }
    Ok(-(-moi).exp_m1())
}

/// One concentration of a treatment and its planted effectiveness.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DosePlan {
    /// Micromolar.
    pub concentration: f64,
    /// Fraction of the baseline infection probability suppressed, in [0, 1].
    pub effectiveness: f64,
}

/// A planted treatment with its dose ladder.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TreatmentPlan {
    pub name: String,
    pub doses: Vec<DosePlan>,
}

/// Planted treatments count as effective when they reach this effectiveness
/// at their top concentration.
pub const PLANTED_EFFECTIVE_CUTOFF: f64 = 0.9;

/// Full description of a synthetic screen.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    pub moi: f64,
    pub cells_min: usize,
    pub cells_max: usize,
    /// Untreated control samples, split evenly between the mock and
    /// UV-inactivated conditions.
    pub untreated_negative: usize,
    pub untreated_infected: usize,
    pub treatments: Vec<TreatmentPlan>,
    pub replicates: usize,
    pub grid: GridConfig,
    /// Gaussian sigma of the nucleus profile, pixels.
    pub nucleus_radius: f64,
    /// Peak added intensity of the bright rounded infection texture.
    pub cpe_intensity: f64,
    /// Radius of the infection disc, pixels.
    pub cpe_radius: f64,
    /// Probability that an infected cell loses its countable nucleus.
    pub death_prob: f64,
    /// Uniform background noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// The bundled screen: enough untreated bags for roughly 400 training
    /// bags at the default 0.6/0.2/0.2 split, plus an 8-treatment by 4-dose
    /// by 6-replicate panel (4 planted effective, 4 planted flat).
    pub fn bundled(seed: u64) -> Self {
        let doses = |ladder: [f64; 4]| -> Vec<DosePlan> {
            [0.3, 1.0, 3.0, 10.0]
                .iter()
                .zip(ladder.iter())
                .map(|(&c, &q)| DosePlan { concentration: c, effectiveness: q })
                .collect()
        };
        let treatments = vec![
            TreatmentPlan { name: "cmpd-01".into(), doses: doses([0.0, 0.5, 0.9, 1.0]) },
            TreatmentPlan { name: "cmpd-02".into(), doses: doses([0.1, 0.55, 0.92, 1.0]) },
            TreatmentPlan { name: "cmpd-03".into(), doses: doses([0.05, 0.45, 0.88, 1.0]) },
            TreatmentPlan { name: "cmpd-04".into(), doses: doses([0.2, 0.6, 0.95, 1.0]) },
            TreatmentPlan { name: "cmpd-05".into(), doses: doses([0.0, 0.0, 0.0, 0.0]) },
            TreatmentPlan { name: "cmpd-06".into(), doses: doses([0.0, 0.0, 0.0, 0.0]) },
            TreatmentPlan { name: "cmpd-07".into(), doses: doses([0.0, 0.0, 0.0, 0.0]) },
            TreatmentPlan { name: "cmpd-08".into(), doses: doses([0.0, 0.0, 0.0, 0.0]) },
        ];
        SynthConfig {
            image_size: 128,
            channels: 3,
            moi: 0.4,
            cells_min: 35,
            cells_max: 50,
            untreated_negative: 336,
            untreated_infected: 336,
            treatments,
            replicates: 6,
            grid: GridConfig::new(32, 16).expect("valid grid"),
            nucleus_radius: 2.4,
            cpe_intensity: 0.8,
            cpe_radius: 5.5,
            death_prob: 0.3,
            noise: 0.02,
            seed,
        }
    }

    /// A reduced screen for quick end-to-end runs.
    pub fn small(seed: u64) -> Self {
        let mut cfg = SynthConfig::bundled(seed);
        cfg.untreated_negative = 120;
        cfg.untreated_infected = 120;
        cfg.treatments = vec![
            TreatmentPlan {
                name: "cmpd-01".into(),
                doses: vec![
                    DosePlan { concentration: 1.0, effectiveness: 0.0 },
                    DosePlan { concentration: 10.0, effectiveness: 1.0 },
                ],
            },
            TreatmentPlan {
                name: "cmpd-02".into(),
                doses: vec![
                    DosePlan { concentration: 1.0, effectiveness: 0.0 },
                    DosePlan { concentration: 10.0, effectiveness: 0.0 },
                ],
            },
        ];
        cfg
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.image_size == 0 {
            return Err(SynthError::BadConfig("image size must be positive".into()));
        }
        if self.channels < 2 {
            return Err(SynthError::BadConfig(
                "need at least two channels (nucleus + one organelle stain)".into(),
            ));
        }
        if self.moi.is_nan() || self.moi < 0.0 {
            return Err(SynthError::NegativeMoi(self.moi));
        }
        if self.cells_min == 0 || self.cells_min > self.cells_max {
            return Err(SynthError::BadConfig("bad cells-per-image range".into()));
        }
        if !self.treatments.is_empty() && self.replicates == 0 {
            return Err(SynthError::BadConfig("replicates must be at least 1".into()));
        }
        for t in &self.treatments {
            for d in &t.doses {
                if !(0.0..=1.0).contains(&d.effectiveness) {
                    return Err(SynthError::BadConfig(format!(
                        "effectiveness {} outside [0, 1] for {}",
                        d.effectiveness, t.name
                    )));
                }
                if d.concentration.is_nan() || d.concentration <= 0.0 {
                    return Err(SynthError::BadConfig(format!(
                        "concentration must be positive for {}",
                        t.name
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.death_prob) {
            return Err(SynthError::BadConfig("death probability outside [0, 1]".into()));
        }
        self.grid.patch_count(self.image_size, self.image_size)?;
        Ok(())
    }

    /// Treatments planted as effective: effectiveness at the top
    /// concentration reaches [`PLANTED_EFFECTIVE_CUTOFF`].
    pub fn planted_effective(&self) -> BTreeSet<String> {
        self.treatments
            .iter()
            .filter(|t| {
                t.doses
                    .iter()
                    .max_by(|a, b| a.concentration.partial_cmp(&b.concentration).unwrap())
                    .map(|top| top.effectiveness >= PLANTED_EFFECTIVE_CUTOFF)
                    .unwrap_or(false)
            })
            .map(|t| t.name.clone())
            .collect()
    }
}

/// Per-sample and per-patch truth for the generated screen.
#[derive(Clone, Debug, Default)]
pub struct SynthGroundTruth {
    /// Bag label: true iff the sample has at least one positive patch.
    pub bag_labels: BTreeMap<String, bool>,
    /// Patch labels in row-major grid order.
    pub instance_labels: BTreeMap<String, Vec<bool>>,
    /// Infected cells / total cells per sample.
    pub infected_cell_fraction: BTreeMap<String, f64>,
    /// The planted effective-treatment set.
    pub planted_effective: BTreeSet<String>,
}

/// Output of [`generate_screen`].
pub struct GeneratedScreen {
    pub manifest: Manifest,
    pub ground_truth: SynthGroundTruth,
    pub manifest_path: PathBuf,
    pub ground_truth_path: PathBuf,
    pub planted_path: PathBuf,
}

struct SamplePlan {
    ordinal: u64,
    sample_id: String,
    condition: Condition,
    treatment: Option<(String, f64, f64)>, // name, concentration, effectiveness
}

fn build_plans(cfg: &SynthConfig) -> Vec<SamplePlan> {
    let mut plans = Vec::new();
    let mut ordinal = 0u64;
    let mut push = |plans: &mut Vec<SamplePlan>,
                    sample_id: String,
                    condition: Condition,
                    treatment: Option<(String, f64, f64)>| {
        plans.push(SamplePlan { ordinal, sample_id, condition, treatment });
        ordinal += 1;
    };
    let mocks = cfg.untreated_negative / 2 + cfg.untreated_negative % 2;
    for i in 0..mocks {
        push(&mut plans, format!("mock-{:04}", i + 1), Condition::Mock, None);
    }
    for i in 0..cfg.untreated_negative / 2 {
        push(&mut plans, format!("uvin-{:04}", i + 1), Condition::UvInactivated, None);
    }
    for i in 0..cfg.untreated_infected {
        push(&mut plans, format!("infu-{:04}", i + 1), Condition::Infected, None);
    }
    for treatment in &cfg.treatments {
        for (d, dose) in treatment.doses.iter().enumerate() {
            for rep in 0..cfg.replicates {
                push(
                    &mut plans,
                    format!("{}-d{}-r{:02}", treatment.name, d + 1, rep + 1),
                    Condition::Infected,
                    Some((treatment.name.clone(), dose.concentration, dose.effectiveness)),
                );
            }
        }
    }
    plans
}

// SplitMix64; chains the stream key parts into one generator seed.
fn mix(parts: &[u64]) -> u64 {
    let mut state = 0x243F6A8885A308D3u64;
    for &p in parts {
        state ^= p.wrapping_add(0x9E3779B97F4A7C15).wrapping_mul(0xBF58476D1CE4E5B9);
        let mut z = state.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        state = z ^ (z >> 31);
    }
    state
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut key = vec![seed];
    key.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(mix(&key))
}

/// Uniform in [0, 1) derived from the cell's own stream, independent of the
/// planted effectiveness.
fn infection_coin(seed: u64, ordinal: u64, cell: u64) -> f64 {
    (mix(&[seed, ordinal, cell, 2]) >> 11) as f64 / (1u64 << 53) as f64
}

struct RenderedSample {
    pixels: Array3<f32>,
    cell_centers: Vec<(f64, f64)>,
    infected: Vec<bool>,
}

fn splat_gaussian(
    plane: &mut ndarray::ArrayViewMut2<'_, f32>,
    center: (f64, f64),
    sigma: f64,
    peak: f64,
) {
    let (h, w) = plane.dim();
    let reach = (3.0 * sigma).ceil() as isize;
    let (cr, cc) = center;
    for dr in -reach..=reach {
        let r = cr.round() as isize + dr;
        if r < 0 || r >= h as isize {
            continue;
        }
        for dc in -reach..=reach {
            let c = cc.round() as isize + dc;
            if c < 0 || c >= w as isize {
                continue;
            }
            let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
            let value = peak * (-d2 / (2.0 * sigma * sigma)).exp();
            plane[[r as usize, c as usize]] += value as f32;
        }
    }
}

fn splat_disc(
    plane: &mut ndarray::ArrayViewMut2<'_, f32>,
    center: (f64, f64),
    radius: f64,
    peak: f64,
) {
    let (h, w) = plane.dim();
    let reach = (radius + 3.0).ceil() as isize;
    let (cr, cc) = center;
    for dr in -reach..=reach {
        let r = cr.round() as isize + dr;
        if r < 0 || r >= h as isize {
            continue;
        }
        for dc in -reach..=reach {
            let c = cc.round() as isize + dc;
            if c < 0 || c >= w as isize {
                continue;
            }
            let d = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
            // Flat disc with a soft shoulder: rounded, brightly stained.
            let value = if d <= radius {
                peak
            } else {
                peak * (-(d - radius).powi(2) / 1.5).exp()
            };
            plane[[r as usize, c as usize]] += value as f32;
        }
    }
}

fn render_sample(cfg: &SynthConfig, plan: &SamplePlan) -> RenderedSample {
    let size = cfg.image_size;
    let mut pixels = Array3::<f32>::zeros((cfg.channels, size, size));

    // Background noise, one stream per sample.
    let mut noise_rng = stream(cfg.seed, &[plan.ordinal, 1]);
    for v in pixels.iter_mut() {
        *v = noise_rng.random::<f32>() * cfg.noise as f32;
    }

    let mut layout_rng = stream(cfg.seed, &[plan.ordinal, 0]);
    let n_cells = layout_rng.random_range(cfg.cells_min..=cfg.cells_max);
    let margin = 2.0;
    let min_sep = 2.0 * cfg.nucleus_radius;
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let mut placed = (0.0, 0.0);
        for _attempt in 0..40 {
            let candidate = (
                layout_rng.random_range(margin..size as f64 - margin),
                layout_rng.random_range(margin..size as f64 - margin),
            );
            placed = candidate;
            let crowded = centers.iter().any(|&(r, c)| {
                (r - candidate.0).powi(2) + (c - candidate.1).powi(2) < min_sep * min_sep
            });
            if !crowded {
                break;
            }
        }
        centers.push(placed);
    }

    let base_p = -(-cfg.moi).exp_m1();
    let p_eff = match &plan.treatment {
        Some((_, _, q)) => (1.0 - q) * base_p,
        None if plan.condition == Condition::Infected => base_p,
        None => 0.0,
    };

    let mut infected = Vec::with_capacity(n_cells);
    for (cell_idx, &center) in centers.iter().enumerate() {
        let cell = cell_idx as u64;
        let is_infected = infection_coin(cfg.seed, plan.ordinal, cell) < p_eff;
        infected.push(is_infected);

        let mut cell_rng = stream(cfg.seed, &[plan.ordinal, cell, 3]);
        let sigma = cfg.nucleus_radius * cell_rng.random_range(0.85..1.15);
        let nucleus_peak = cell_rng.random_range(0.55..0.85);
        let dead = is_infected && cell_rng.random::<f64>() < cfg.death_prob;

        if dead {
            // Fragmented, dim remnant instead of a countable nucleus.
            let fragments = cell_rng.random_range(2..=4);
            for _ in 0..fragments {
                let offset = (
                    center.0 + cell_rng.random_range(-2.0..2.0),
                    center.1 + cell_rng.random_range(-2.0..2.0),
                );
                splat_gaussian(
                    &mut pixels.index_axis_mut(ndarray::Axis(0), 0),
                    offset,
                    0.8,
                    nucleus_peak * 0.3,
                );
            }
        } else {
            splat_gaussian(&mut pixels.index_axis_mut(ndarray::Axis(0), 0), center, sigma, nucleus_peak);
        }

        // Organelle textures correlated with the nucleus position; kept dim
        // so patch brightness is driven by infection, not cell density.
        for ch in 1..cfg.channels {
            let spread = sigma * (1.6 + 0.6 * ch as f64);
            let peak = cell_rng.random_range(0.06..0.16) / ch as f64;
            let offset = (
                center.0 + cell_rng.random_range(-1.0..1.0),
                center.1 + cell_rng.random_range(-1.0..1.0),
            );
            splat_gaussian(&mut pixels.index_axis_mut(ndarray::Axis(0), ch), offset, spread, peak);
        }

        if is_infected {
            // Bright rounded infection texture plus fragmentation speckle
            // in every non-nucleus channel.
            let radius = cfg.cpe_radius * cell_rng.random_range(0.8..1.2);
            let disc_center = (
                center.0 + cell_rng.random_range(-1.5..1.5),
                center.1 + cell_rng.random_range(-1.5..1.5),
            );
            let speckles: Vec<(f64, f64, f64)> = (0..cell_rng.random_range(3..=6))
                .map(|_| {
                    (
                        disc_center.0 + cell_rng.random_range(-1.5..1.5) * radius,
                        disc_center.1 + cell_rng.random_range(-1.5..1.5) * radius,
                        cell_rng.random_range(0.25..0.5),
                    )
                })
                .collect();
            for ch in 1..cfg.channels {
                let mut plane = pixels.index_axis_mut(ndarray::Axis(0), ch);
                splat_disc(&mut plane, disc_center, radius, cfg.cpe_intensity);
                for &(r, c, peak) in &speckles {
                    splat_gaussian(&mut plane, (r, c), 0.8, peak);
                }
            }
        }
    }

    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    RenderedSample { pixels, cell_centers: centers, infected }
}

fn instance_labels_for(
    cfg: &SynthConfig,
    rendered: &RenderedSample,
) -> Result<Vec<bool>, SynthError> {
    let origins = cfg.grid.origins(cfg.image_size, cfg.image_size)?;
    let p = cfg.grid.patch_size as f64;
    let labels = origins
        .iter()
        .map(|&(r0, c0)| {
            rendered
                .cell_centers
                .iter()
                .zip(&rendered.infected)
                .any(|(&(r, c), &inf)| {
                    inf && r >= r0 as f64 && r < r0 as f64 + p && c >= c0 as f64 && c < c0 as f64 + p
                })
        })
        .collect();
    Ok(labels)
}

fn well_name(ordinal: u64) -> String {
    let row = (ordinal / 24) % 16;
    let col = ordinal % 24 + 1;
    format!("{}{:02}", (b'A' + row as u8) as char, col)
}

/// Generates the screen: images on disk, a manifest, and ground truth.
///
/// Deterministic in `(cfg, cfg.seed)`: regenerating into a fresh directory
/// produces byte-identical files.
pub fn generate_screen(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedScreen, SynthError> {
    cfg.validate()?;
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let plans = build_plans(cfg);
    let results: Vec<(SampleRecord, Vec<bool>, f64)> = plans
        .par_iter()
        .map(|plan| {
            let rendered = render_sample(cfg, plan);
            let labels = instance_labels_for(cfg, &rendered)?;
            let infected_count = rendered.infected.iter().filter(|&&i| i).count();
            let fraction = infected_count as f64 / rendered.infected.len() as f64;

            // The manifest carries paths relative to its own directory so
            // regenerated screens are byte-identical wherever they land.
            let mut image_paths = Vec::with_capacity(cfg.channels);
            for ch in 0..cfg.channels {
                let relative = PathBuf::from("images").join(format!(
                    "{}_c{}.png",
                    plan.sample_id,
                    ch + 1
                ));
                crate::imaging::write_channel_png(
                    rendered.pixels.index_axis(ndarray::Axis(0), ch),
                    &out_dir.join(&relative),
                )?;
                image_paths.push(relative);
            }

            let record = SampleRecord {
                sample_id: plan.sample_id.clone(),
                plate: "SP01".into(),
                well: well_name(plan.ordinal),
                site: 1,
                condition: plan.condition,
                treatment: plan.treatment.as_ref().map(|(name, _, _)| name.clone()),
                concentration: plan.treatment.as_ref().map(|(_, c, _)| *c),
                image_paths,
                split: plan.treatment.is_some().then_some(Split::TreatedTest),
            };
            Ok((record, labels, fraction))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let mut ground_truth = SynthGroundTruth {
        planted_effective: cfg.planted_effective(),
        ..SynthGroundTruth::default()
    };
    let mut records = Vec::with_capacity(results.len());
    for (record, labels, fraction) in results {
        let bag = labels.iter().any(|&l| l);
        ground_truth.bag_labels.insert(record.sample_id.clone(), bag);
        ground_truth.instance_labels.insert(record.sample_id.clone(), labels);
        ground_truth.infected_cell_fraction.insert(record.sample_id.clone(), fraction);
        records.push(record);
    }

    let mut manifest = Manifest {
        records,
        channel_count: cfg.channels,
        label_rule: LabelRule { merge_controls: true },
    };
    let manifest_path = out_dir.join("manifest.csv");
    crate::manifest::write_manifest(&manifest, &manifest_path)?;
    // The returned manifest is ready to use in place: resolve the paths.
    for record in &mut manifest.records {
        for path in &mut record.image_paths {
            *path = out_dir.join(&*path);
        }
    }

    let ground_truth_path = out_dir.join("ground_truth.csv");
    let mut writer = csv::Writer::from_path(&ground_truth_path)?;
    writer.write_record(["sample_id", "patch_index", "instance_label"])?;
    for (sample_id, labels) in &ground_truth.instance_labels {
        for (idx, &label) in labels.iter().enumerate() {
            writer.write_record(&[
                sample_id.clone(),
                idx.to_string(),
                (label as u8).to_string(),
            ])?;
        }
    }
    writer.flush()?;

    let planted_path = out_dir.join("planted.csv");
    let mut writer = csv::Writer::from_path(&planted_path)?;
    writer.write_record(["treatment", "concentration", "effectiveness"])?;
    for treatment in &cfg.treatments {
        for dose in &treatment.doses {
            writer.write_record(&[
                treatment.name.clone(),
                dose.concentration.to_string(),
                dose.effectiveness.to_string(),
            ])?;
        }
    }
    writer.flush()?;

    Ok(GeneratedScreen {
        manifest,
        ground_truth,
        manifest_path,
        ground_truth_path,
        planted_path,
    })
}

/// Reads `planted.csv` back into dose plans grouped by treatment.
pub fn load_planted(path: &Path) -> Result<Vec<TreatmentPlan>, SynthError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut by_name: BTreeMap<String, Vec<DosePlan>> = BTreeMap::new();
    for row in reader.records() {
        let row = row?;
        let name = row.get(0).unwrap_or("").to_string();
        let concentration: f64 = row
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| SynthError::BadConfig("bad concentration in planted.csv".into()))?;
        let effectiveness: f64 = row
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| SynthError::BadConfig("bad effectiveness in planted.csv".into()))?;
        by_name.entry(name).or_default().push(DosePlan { concentration, effectiveness });
    }
    Ok(by_name
        .into_iter()
        .map(|(name, doses)| TreatmentPlan { name, doses })
        .collect())
}

/// The planted effective set for a list of treatment plans.
pub fn planted_effective_set(plans: &[TreatmentPlan]) -> BTreeSet<String> {
    plans
        .iter()
        .filter(|t| {
            t.doses
                .iter()
                .max_by(|a, b| a.concentration.partial_cmp(&b.concentration).unwrap())
                .map(|top| top.effectiveness >= PLANTED_EFFECTIVE_CUTOFF)
                .unwrap_or(false)
        })
        .map(|t| t.name.clone())
        .collect()
}

/// Convenience wrapper: images of every generated sample for in-memory use.
pub fn load_sample_image(record: &SampleRecord) -> Result<MultiChannelImage, SynthError> {
    Ok(MultiChannelImage::load(&record.image_paths)?)
}
