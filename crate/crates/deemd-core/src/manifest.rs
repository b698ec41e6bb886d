//! Screen metadata: sample records, class labels, and dataset splits.
//!
//! The metadata file is a UTF-8 comma-delimited table with header
//! `sample_id,plate,well,site,condition,treatment,concentration,split,channel_1..channel_C`.
//! Empty strings mean "absent". Treated records always belong to the treated
//! test split and carry both a treatment name and a concentration; untreated
//! records carry neither.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Experimental condition of a well.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Mock non-infected control.
    Mock,
    /// Control exposed to UV-inactivated virus; shows no cytopathic effect.
    UvInactivated,
    /// Actively infected.
    Infected,
}

impl Condition {
    fn parse(s: &str) -> Option<Condition> {
        match s {
            "Mock" => Some(Condition::Mock),
            "UVInactivated" => Some(Condition::UvInactivated),
            "Infected" => Some(Condition::Infected),
            _ => None,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            Condition::Mock => "Mock",
            Condition::UvInactivated => "UVInactivated",
            Condition::Infected => "Infected",
        }
    }
}

/// Dataset split of a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    UntreatedTest,
    TreatedTest,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s {
            "Train" => Some(Split::Train),
            "Validation" => Some(Split::Validation),
            "UntreatedTest" => Some(Split::UntreatedTest),
            "TreatedTest" => Some(Split::TreatedTest),
            _ => None,
        }
    }

    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "Train",
            Split::Validation => "Validation",
            Split::UntreatedTest => "UntreatedTest",
            Split::TreatedTest => "TreatedTest",
        }
    }
}

/// Binary class label: positive = infected phenotype, negative = healthy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryClass {
    Negative,
    Positive,
}

/// One well/site image plus metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub plate: String,
    pub well: String,
    pub site: u32,
    pub condition: Condition,
    pub treatment: Option<String>,
    /// Concentration in micromolar; present exactly when `treatment` is.
    pub concentration: Option<f64>,
    /// One image path per channel.
    pub image_paths: Vec<PathBuf>,
    pub split: Option<Split>,
}

impl SampleRecord {
    /// Treated records form the treated test set; everyone else is untreated.
    pub fn is_treated(&self) -> bool {
        self.treatment.is_some()
    }
}

/// Maps a condition onto a binary class.
///
/// With `merge_controls` set, both control conditions collapse into the
/// negative class. With it unset the UV-inactivated control has no class and
/// is excluded from label-driven work (it forms its own stratum when
/// splitting).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LabelRule {
    pub merge_controls: bool,
}

impl LabelRule {
    pub fn class_of(&self, condition: Condition) -> Option<BinaryClass> {
        match condition {
            Condition::Mock => Some(BinaryClass::Negative),
            Condition::UvInactivated => {
                if self.merge_controls {
                    Some(BinaryClass::Negative)
                } else {
                    None
                }
            }
            Condition::Infected => Some(BinaryClass::Positive),
        }
    }
}

/// Parsed screen metadata.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub channel_count: usize,
    pub label_rule: LabelRule,
}

/// Relative weights for the three untreated splits; normalized internally.
#[derive(Clone, Copy, Debug)]
pub struct SplitWeights {
    pub train: f64,
    pub validation: f64,
    pub untreated_test: f64,
}

impl Default for SplitWeights {
    fn default() -> Self {
        SplitWeights { train: 0.6, validation: 0.2, untreated_test: 0.2 }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("metadata file is missing required column `{0}`")]
    MissingColumn(String),
    #[error("duplicate sample_id `{0}`")]
    DuplicateSampleId(String),
    #[error("malformed row {index}: {reason}")]
    MalformedRow { index: usize, reason: String },
    #[error("not enough untreated samples to populate the requested splits")]
    InsufficientSamples,
    #[error("split weights must be finite, non-negative, and not all zero")]
    InvalidWeights,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

const FIXED_COLUMNS: [&str; 8] = [
    "sample_id",
    "plate",
    "well",
    "site",
    "condition",
    "treatment",
    "concentration",
    "split",
];

/// Loads a metadata file.
///
/// Channel count is inferred from the `channel_1..channel_C` header columns.
/// Treated rows are forced into the treated test split; a treated row that
/// claims another split, or an untreated row claiming the treated test split,
/// is malformed.
pub fn load_manifest(path: &Path, merge_controls: bool) -> Result<Manifest, ManifestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let index_of = |name: &str| headers.iter().position(|h| h == name);

    let mut fixed = BTreeMap::new();
    for name in FIXED_COLUMNS {
        let idx = index_of(name).ok_or_else(|| ManifestError::MissingColumn(name.into()))?;
        fixed.insert(name, idx);
    }

    // Channel columns must be channel_1..channel_C with no gaps.
    let mut channel_indices = Vec::new();
    loop {
        let name = format!("channel_{}", channel_indices.len() + 1);
        match index_of(&name) {
            Some(idx) => channel_indices.push(idx),
            None => break,
        }
    }
    if channel_indices.is_empty() {
        return Err(ManifestError::MissingColumn("channel_1".into()));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (row_index, row) in reader.records().enumerate() {
        let row = row?;
        let field = |name: &str| row.get(fixed[name]).unwrap_or("").trim().to_string();
        let malformed = |reason: String| ManifestError::MalformedRow { index: row_index, reason };

        let sample_id = field("sample_id");
        if sample_id.is_empty() {
            return Err(malformed("empty sample_id".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(ManifestError::DuplicateSampleId(sample_id));
        }

        let site: u32 = field("site")
            .parse()
            .map_err(|_| malformed(format!("unparseable site `{}`", field("site"))))?;
        let condition = Condition::parse(&field("condition"))
            .ok_or_else(|| malformed(format!("unknown condition `{}`", field("condition"))))?;

        let treatment_field = field("treatment");
        let treatment = (!treatment_field.is_empty()).then_some(treatment_field);
        let concentration_field = field("concentration");
        let concentration = if concentration_field.is_empty() {
            None
        } else {
            let value: f64 = concentration_field
                .parse()
                .map_err(|_| malformed(format!("unparseable concentration `{concentration_field}`")))?;
            if !value.is_finite() || value <= 0.0 {
                return Err(malformed(format!("non-positive concentration `{value}`")));
            }
            Some(value)
        };
        if treatment.is_some() != concentration.is_some() {
            return Err(malformed("treatment and concentration must be present together".into()));
        }

        let split_field = field("split");
        let mut split = if split_field.is_empty() {
            None
        } else {
            Some(
                Split::parse(&split_field)
                    .ok_or_else(|| malformed(format!("unknown split `{split_field}`")))?,
            )
        };
        if treatment.is_some() {
            match split {
                None => split = Some(Split::TreatedTest),
                Some(Split::TreatedTest) => {}
                Some(other) => {
                    return Err(malformed(format!(
                        "treated record cannot be in split {}",
                        other.as_str()
                    )))
                }
            }
            if condition != Condition::Infected {
                return Err(malformed("treated records must have condition Infected".into()));
            }
        } else if split == Some(Split::TreatedTest) {
            return Err(malformed("untreated record cannot be in the treated test split".into()));
        }

        // Relative image paths resolve against the metadata file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        let image_paths = channel_indices
            .iter()
            .map(|&idx| {
                let p = PathBuf::from(row.get(idx).unwrap_or("").trim());
                if p.is_relative() {
                    base.join(p)
                } else {
                    p
                }
            })
            .collect();

        records.push(SampleRecord {
            sample_id,
            plate: field("plate"),
            well: field("well"),
            site,
            condition,
            treatment,
            concentration,
            image_paths,
            split,
        });
    }

    Ok(Manifest {
        records,
        channel_count: channel_indices.len(),
        label_rule: LabelRule { merge_controls },
    })
}

/// Writes a manifest back out in the metadata-file format.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), ManifestError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for c in 1..=manifest.channel_count {
        header.push(format!("channel_{c}"));
    }
    writer.write_record(&header)?;
    for record in &manifest.records {
        let mut row = vec![
            record.sample_id.clone(),
            record.plate.clone(),
            record.well.clone(),
            record.site.to_string(),
            record.condition.as_str().to_string(),
            record.treatment.clone().unwrap_or_default(),
            record.concentration.map(|c| c.to_string()).unwrap_or_default(),
            record.split.map(|s| s.as_str().to_string()).unwrap_or_default(),
        ];
        for path in &record.image_paths {
            row.push(path.to_string_lossy().into_owned());
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Strata for the seeded shuffle: class when the label rule assigns one,
/// otherwise the bare condition (keeps unlabeled controls spread evenly).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Stratum {
    Class(bool),
    Unlabeled(u8),
}

impl fmt::Debug for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stratum::Class(positive) => write!(f, "class {}", if *positive { "+" } else { "-" }),
            Stratum::Unlabeled(c) => write!(f, "unlabeled condition {c}"),
        }
    }
}

/// Assigns the three untreated splits by a seeded shuffle stratified by
/// class; treated records always land in the treated test split.
///
/// Within each stratum the per-split counts follow the normalized weights by
/// largest-remainder apportionment, so the assignment is exhaustive and
/// deterministic in `(manifest, seed)`. Record order in the result matches
/// the input.
pub fn split_dataset(
    manifest: &Manifest,
    seed: u64,
    weights: SplitWeights,
) -> Result<Manifest, ManifestError> {
    let ws = [weights.train, weights.validation, weights.untreated_test];
    if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ManifestError::InvalidWeights);
    }
    let total: f64 = ws.iter().sum();
    if total <= 0.0 {
        return Err(ManifestError::InvalidWeights);
    }

    let untreated: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_treated())
        .map(|(i, _)| i)
        .collect();
    if untreated.is_empty() {
        // Nothing to distribute: any positive weight asks for samples we
        // do not have.
        return Err(ManifestError::InsufficientSamples);
    }

    // Group untreated records into strata, sorted by sample_id so the
    // assignment depends on the record set, not on file order.
    let mut strata: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for &idx in &untreated {
        let record = &manifest.records[idx];
        let stratum = match manifest.label_rule.class_of(record.condition) {
            Some(class) => Stratum::Class(class == BinaryClass::Positive),
            None => Stratum::Unlabeled(record.condition as u8),
        };
        strata.entry(stratum).or_default().push(idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: Vec<Option<Split>> = vec![None; manifest.records.len()];
    let splits = [Split::Train, Split::Validation, Split::UntreatedTest];
    for pool in strata.values_mut() {
        pool.sort_by(|&a, &b| {
            manifest.records[a].sample_id.cmp(&manifest.records[b].sample_id)
        });
        pool.shuffle(&mut rng);
        for (split, chunk) in splits.iter().zip(apportion(pool.len(), &ws, total)) {
            for _ in 0..chunk {
                let idx = pool.pop().expect("apportionment sums to pool size");
                assignment[idx] = Some(*split);
            }
        }
    }

    let mut records = manifest.records.clone();
    for (idx, record) in records.iter_mut().enumerate() {
        if record.is_treated() {
            record.split = Some(Split::TreatedTest);
        } else {
            record.split = assignment[idx];
            debug_assert!(record.split.is_some());
        }
    }
    Ok(Manifest { records, ..manifest.clone() })
}

/// Largest-remainder apportionment of `n` items over weights; sums to `n`.
/// Remainder ties go to the earlier split.
fn apportion(n: usize, weights: &[f64; 3], total: f64) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut remainders = [(0.0f64, 0usize); 3];
    let mut assigned = 0;
    for (i, w) in weights.iter().enumerate() {
        let exact = n as f64 * w / total;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders[i] = (exact - exact.floor(), i);
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for r in remainders.iter().take(n - assigned) {
        counts[r.1] += 1;
    }
    counts
}

/// Per-split class counts, handy for balance checks and reporting.
pub fn split_class_counts(
    manifest: &Manifest,
) -> BTreeMap<(Option<Split>, Option<BinaryClass>), usize> {
    let mut counts = BTreeMap::new();
    for record in &manifest.records {
        let class = manifest.label_rule.class_of(record.condition);
        *counts.entry((record.split, class)).or_insert(0) += 1;
    }
    counts
}

impl Split {
    /// Ordering key used only for the BTreeMap above.
    fn order(&self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::UntreatedTest => 2,
            Split::TreatedTest => 3,
        }
    }
}

impl PartialOrd for Split {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Split {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order().cmp(&other.order())
    }
}

impl PartialOrd for BinaryClass {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BinaryClass {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}
