//! Run configuration: one TOML document, overridable by command-line flags.
//!
//! Defaults follow the production screen settings (patch 256 / stride 128,
//! k = 2, eta = zeta = 0.5, confidence 0.95, alpha 0.2, sigma 60, lr 1e-4,
//! betas 0.9/0.999, batch 128, up to 150 epochs). A `[synth]` section, when
//! present, describes a synthetic screen to generate into `data_dir`;
//! without it the pipeline ingests an existing metadata file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deemd_core::imaging::GridConfig;
use deemd_core::mil::TrainConfig;
use deemd_core::synthscreen::SynthConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; stage seeds derive from it at fixed offsets.
    pub seed: u64,
    pub paths: PathsSection,
    pub grid: GridSection,
    pub labels: LabelsSection,
    pub split: SplitSection,
    pub nuclei: NucleiSection,
    pub train: TrainSection,
    pub thresholds: ThresholdsSection,
    pub maps: MapsSection,
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { data_dir: "data".into(), work_dir: "work".into() }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { patch_size: 256, stride: 128 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelsSection {
    pub merge_controls: bool,
}

impl Default for LabelsSection {
    fn default() -> Self {
        LabelsSection { merge_controls: true }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub train: f64,
    pub validation: f64,
    pub untreated_test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train: 0.6, validation: 0.2, untreated_test: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NucleiSection {
    pub min_area: usize,
    /// 1-based channel carrying the DNA stain.
    pub dna_channel: usize,
}

impl Default for NucleiSection {
    fn default() -> Self {
        NucleiSection { min_area: deemd_core::nuclei::DEFAULT_MIN_AREA, dna_channel: 1 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_frac: f64,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            k: 2,
            epochs: 150,
            batch_size: 128,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            warmup_frac: 0.3,
            patience: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdsSection {
    /// Bag classification cutoff.
    pub eta: f64,
    /// Effective-treatment cutoff.
    pub zeta: f64,
    /// Sign-test confidence level.
    pub confidence: f64,
    /// Infection-map power-mean exponent.
    pub alpha: f64,
    /// Infection-map smoothing bandwidth, pixels.
    pub sigma: f64,
}

impl Default for ThresholdsSection {
    fn default() -> Self {
        ThresholdsSection { eta: 0.5, zeta: 0.5, confidence: 0.95, alpha: 0.2, sigma: 60.0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MapsSection {
    /// How many held-out infected samples get rendered maps.
    pub limit: usize,
}

impl Default for MapsSection {
    fn default() -> Self {
        MapsSection { limit: 8 }
    }
}

/// Command-line overrides; flags win over the config file.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub eta: Option<f64>,
    pub zeta: Option<f64>,
    pub alpha: Option<f64>,
    pub sigma: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: Overrides) -> Result<RunConfig> {
        let mut config: RunConfig = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(k) = overrides.k {
            config.train.k = k;
        }
        if let Some(eta) = overrides.eta {
            config.thresholds.eta = eta;
        }
        if let Some(zeta) = overrides.zeta {
            config.thresholds.zeta = zeta;
        }
        if let Some(alpha) = overrides.alpha {
            config.thresholds.alpha = alpha;
        }
        if let Some(sigma) = overrides.sigma {
            config.thresholds.sigma = sigma;
        }
        // The synthetic screen always follows the pipeline grid and seed.
        let (grid, synth_seed) = (config.grid_config()?, config.synth_seed());
        if let Some(synth) = &mut config.synth {
            synth.grid = grid;
            synth.seed = synth_seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.thresholds.eta),
            ("zeta", self.thresholds.zeta),
            ("confidence", self.thresholds.confidence),
            ("alpha", self.thresholds.alpha),
        ] {
            if !(v > 0.0 && v < 1.0) {
                bail!("threshold `{name}` = {v} must lie in (0, 1)");
            }
        }
        if self.thresholds.sigma.is_nan() || self.thresholds.sigma < 0.0 {
            bail!("sigma must be non-negative");
        }
        if self.train.k == 0 {
            bail!("k must be at least 1");
        }
        if self.train.epochs > 150 {
            bail!("epochs capped at 150");
        }
        self.grid_config()?;
        Ok(())
    }

    pub fn grid_config(&self) -> Result<GridConfig> {
        Ok(GridConfig::new(self.grid.patch_size, self.grid.stride)?)
    }

    pub fn split_weights(&self) -> deemd_core::manifest::SplitWeights {
        deemd_core::manifest::SplitWeights {
            train: self.split.train,
            validation: self.split.validation,
            untreated_test: self.split.untreated_test,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.train.k,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            peak_lr: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            warmup_frac: self.train.warmup_frac,
            patience: self.train.patience,
            eta: self.thresholds.eta,
            seed: self.train_seed(),
        }
    }

    // Stage seeds derive from the master seed at fixed offsets.
    pub fn synth_seed(&self) -> u64 {
        self.seed
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    /// Cache directory: `DEEMD_CACHE_DIR` wins over `work_dir/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        std::env::var_os("DEEMD_CACHE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.paths.work_dir.join("cache"))
    }
}
