//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. The synthetic-screen criteria share one generated
//! screen and one trained model.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use deemd_core::efficacy;
use deemd_core::imaging::{extract_patches, GridConfig};
use deemd_core::manifest::{split_dataset, Manifest, Split, SplitWeights};
use deemd_core::mil::{
    self, evaluate_ap, BagDataset, PatchScoreSet, TrainConfig,
};
use deemd_core::nuclei;
use deemd_core::scorer::{Architecture, LossConfig, ScorerModel};
use deemd_core::synthscreen::{self, SynthConfig, SynthGroundTruth};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Everything the screen-based criteria need, built once.
struct ScreenFixture {
    _dir: tempfile::TempDir,
    manifest: Manifest,
    ground_truth: SynthGroundTruth,
    config: SynthConfig,
    grid: GridConfig,
    stats: deemd_core::imaging::ChannelStats,
    model: ScorerModel,
    train_bags: usize,
    val_ap: f64,
}

static FIXTURE: OnceLock<ScreenFixture> = OnceLock::new();

fn fixture() -> &'static ScreenFixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = SynthConfig::bundled(7);
        let screen = synthscreen::generate_screen(&config, dir.path()).expect("generate");
        let manifest =
            split_dataset(&screen.manifest, 11, SplitWeights::default()).expect("split");

        let grid = config.grid;
        let train_images: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.split == Some(Split::Train))
            .map(|r| deemd_core::imaging::MultiChannelImage::load(&r.image_paths).unwrap())
            .collect();
        let stats = deemd_core::imaging::compute_channel_stats(train_images.iter()).unwrap();

        let train_set = BagDataset::load(&manifest, Split::Train, &stats, grid).unwrap();
        let val_set = BagDataset::load(&manifest, Split::Validation, &stats, grid).unwrap();

        let arch = Architecture::reference(config.channels, grid.patch_size);
        let model = ScorerModel::init(arch, 3);
        let cfg = TrainConfig {
            k: 2,
            epochs: 40,
            batch_size: 128,
            peak_lr: 2e-3,
            patience: 12,
            seed: 3,
            ..TrainConfig::default()
        };
        let pos = train_set.samples.iter().filter(|s| s.label).count();
        let neg = train_set.samples.len() - pos;
        let loss_cfg = LossConfig::inverse_frequency(pos, neg).unwrap();
        let outcome = mil::train(&train_set, &val_set, model, &cfg, &loss_cfg).expect("train");
        let val_ap = outcome
            .log
            .iter()
            .map(|e| e.val_ap)
            .fold(f64::NAN, |best, ap| if best.is_nan() || ap > best { ap } else { best });

        // Keep the fixture light: the datasets used by individual criteria
        // are rebuilt from the manifest on demand.
        let train_bags = train_set.samples.len();
        ScreenFixture {
            _dir: dir,
            manifest,
            ground_truth: screen.ground_truth,
            config,
            grid,
            stats,
            model: outcome.model,
            train_bags,
            val_ap,
        }
    })
}

fn dataset_for_split(fx: &ScreenFixture, split: Split) -> BagDataset {
    BagDataset::load(&fx.manifest, split, &fx.stats, fx.grid).unwrap()
}

/// Rank-based AUC (Mann-Whitney), average ranks on ties.
fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let negatives = n as f64 - positives;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives)
}

/// Spearman rank correlation with average ranks on ties.
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(values: &[f64]) -> Vec<f64> {
        let n = values.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let mut out = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && values[order[j + 1]] == values[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                out[idx] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
fn criterion_01_poisson_infection_probability() {
    let p = synthscreen::poisson_infection_probability(0.4).unwrap();
    assert!((p - 0.32968).abs() <= 1e-4, "got {p}");
    println!("criterion 1 PASS: 1 - exp(-0.4) = {p:.6} (target 0.32968 +- 1e-4)");
}

#[test]
fn criterion_02_grid_yields_49_patches() {
    let grid = GridConfig::new(256, 128).unwrap();
    let n = grid.patch_count(1024, 1024).unwrap();
    assert_eq!(n, 49);
    println!("criterion 2 PASS: 1024x1024 / patch 256 / stride 128 = {n} patches");
}

#[test]
fn criterion_03_sign_test_matches_exhaustive_enumeration() {
    // Independent oracle: Pascal's triangle in exact integer arithmetic.
    let mut pascal = vec![vec![1u128]];
    for n in 1..=30usize {
        let prev = pascal.last().unwrap();
        let mut row = vec![1u128];
        for i in 1..n {
            row.push(prev[i - 1] + prev[i]);
        }
        row.push(1);
        pascal.push(row);
    }
    let mut checked = 0;
    for (n, row) in pascal.iter().enumerate().skip(1) {
        let values: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        for level in [0.90, 0.95, 0.99] {
            let ci = efficacy::sign_test_median_ci(&values, level).unwrap();
            // Oracle: largest d with 1 - 2 * sum_{i<d} C(n,i) / 2^n >= level.
            let coverage_of = |d: usize| {
                let tail: u128 = row.iter().take(d).sum();
                1.0 - 2.0 * (tail as f64 / 2f64.powi(n as i32))
            };
            let mut expect_d = None;
            let mut d = 1;
            while d <= n.div_ceil(2) && coverage_of(d) >= level {
                expect_d = Some(d);
                d += 1;
            }
            let (expect_d, expect_cov, expect_sufficient) = match expect_d {
                Some(d) => (d, coverage_of(d), true),
                None => (1, coverage_of(1), false),
            };
            assert_eq!(ci.d, expect_d, "n={n} level={level}");
            assert_eq!(ci.sufficient, expect_sufficient, "n={n} level={level}");
            assert!(
                (ci.coverage - expect_cov).abs() < 1e-12,
                "n={n} level={level}: {} vs {expect_cov}",
                ci.coverage
            );
            checked += 1;
        }
    }
    let six = efficacy::sign_test_median_ci(&[0.1, 0.2, 0.2, 0.3, 0.4, 0.9], 0.95).unwrap();
    assert!((six.coverage - 0.96875).abs() < 1e-12);
    println!(
        "criterion 3 PASS: {checked} (n, level) pairs match exact enumeration; n=6 @ 0.95 coverage {}",
        six.coverage
    );
}

#[test]
fn criterion_04_gradient_fidelity_on_reference_scorer() {
    let arch = Architecture::reference(3, 32);
    let model = ScorerModel::init(arch.clone(), 41);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let patch = ndarray::Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.5..1.5));
    let cfg = LossConfig::new(1.2, 0.9).unwrap();
    let report = model.check_gradients(&patch, true, &cfg, 1e-4, 120).unwrap();
    assert!(report.checked >= 100, "only {} params sampled", report.checked);
    assert!(report.pass, "max relative error {}", report.max_rel_err);
    println!(
        "criterion 4 PASS: {} parameters, max relative error {:.3e} <= 1e-4",
        report.checked, report.max_rel_err
    );
}

#[test]
fn criterion_05_power_weighted_average_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let n = rng.random_range(1..=9);
        let mus: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
        let alpha = rng.random_range(0.05..0.95);
        let num: f64 = mus.iter().map(|m| m.powf(1.0 + alpha)).sum();
        let den: f64 = mus.iter().map(|m| m.powf(alpha)).sum();
        let value = num / den;
        let lo = mus.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = mus.iter().sum::<f64>() / n as f64;
        assert!(value >= lo - 1e-12 && value <= hi + 1e-12, "bounds violated");
        assert!(value >= mean - 1e-12, "below arithmetic mean");
    }
    let pair = (0.8f64.powf(1.2) + 0.2f64.powf(1.2)) / (0.8f64.powf(0.2) + 0.2f64.powf(0.2));
    assert!((pair - 0.5413).abs() <= 1e-4, "got {pair}");
    println!(
        "criterion 5 PASS: 1000 random overlap sets inside [min, max] and >= mean; pair value {pair:.6}"
    );
}

#[test]
fn criterion_06_synthetic_screen_learning() {
    let fx = fixture();
    assert!(
        (380..=430).contains(&fx.train_bags),
        "bundled screen trains on {} bags",
        fx.train_bags
    );

    let test_set = dataset_for_split(fx, Split::UntreatedTest);
    let (scores, labels) = mil::bag_scores(&fx.model, &test_set, 2).unwrap();
    let bag_ap = evaluate_ap(&scores, &labels).unwrap().average_precision;
    assert!(bag_ap >= 0.95, "held-out bag AP {bag_ap}");

    // Instance-level localization against the planted patch labels.
    let mut patch_scores = Vec::new();
    let mut patch_labels = Vec::new();
    let score_sets = mil::score_all_patches(&fx.model, &test_set, 2).unwrap();
    for (set, sample) in score_sets.iter().zip(&test_set.samples) {
        let truth = &fx.ground_truth.instance_labels[&sample.sample_id];
        for (j, &mu) in set.scores.iter().enumerate() {
            patch_scores.push(mu);
            patch_labels.push(truth[j]);
        }
    }
    let auc = roc_auc(&patch_scores, &patch_labels);
    assert!(auc >= 0.90, "instance localization AUC {auc}");
    println!(
        "criterion 6 PASS: {} train bags, held-out bag AP {bag_ap:.4} >= 0.95, instance AUC {auc:.4} >= 0.90 (best val AP {:.4})",
        fx.train_bags, fx.val_ap
    );
}

#[test]
fn criterion_07_hit_recovery_and_dose_monotonicity() {
    let fx = fixture();
    let treated = dataset_for_split(fx, Split::TreatedTest);
    let score_sets = mil::score_all_patches(&fx.model, &treated, 2).unwrap();

    // Group replicate infection probabilities by (treatment, concentration).
    let mut by_dose: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let record_of: BTreeMap<&str, &deemd_core::manifest::SampleRecord> =
        fx.manifest.records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    for (set, sample) in score_sets.iter().zip(&treated.samples) {
        let record = record_of[sample.sample_id.as_str()];
        let key = (
            record.treatment.clone().unwrap(),
            format!("{}", record.concentration.unwrap()),
        );
        by_dose.entry(key).or_default().push(mil::sample_infection_probability(set));
    }
    assert_eq!(by_dose.len(), 8 * 4, "8 treatments x 4 doses");
    assert!(by_dose.values().all(|z| z.len() == 6), "6 replicates per dose");

    let mut dose_groups = Vec::new();
    for ((treatment, conc), replicates) in &by_dose {
        let conc: f64 = conc.parse().unwrap();
        dose_groups.push(
            efficacy::dose_group(treatment, conc, replicates.clone(), 0.95).unwrap(),
        );
    }
    let mut per_treatment: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for g in &dose_groups {
        per_treatment.entry(g.treatment.clone()).or_default().push((g.concentration, g.e));
    }
    let scores: Vec<_> = per_treatment
        .iter()
        .map(|(t, doses)| efficacy::treatment_efficacy(t, doses, 0.5).unwrap())
        .collect();
    let (_ranked, effective) = efficacy::rank_treatments(scores);

    let planted = &fx.ground_truth.planted_effective;
    let true_pos = effective.intersection(planted).count() as f64;
    let precision = if effective.is_empty() { 0.0 } else { true_pos / effective.len() as f64 };
    let recall = true_pos / planted.len() as f64;
    let table: Vec<String> = per_treatment
        .iter()
        .map(|(t, doses)| {
            let es: Vec<String> = doses.iter().map(|(_, e)| format!("{e:.3}")).collect();
            format!("{t}: [{}]", es.join(", "))
        })
        .collect();
    assert_eq!(
        &effective, planted,
        "recovered {effective:?} vs planted {planted:?}; dose table {table:?}"
    );
    assert_eq!((precision, recall), (1.0, 1.0));

    // Dose scores must track planted effectiveness within each treatment
    // that has a non-constant ladder.
    let mut checked = 0;
    let mut min_rho = f64::INFINITY;
    for plan in &fx.config.treatments {
        let planted_ladder: Vec<f64> = plan.doses.iter().map(|d| d.effectiveness).collect();
        let constant = planted_ladder.windows(2).all(|w| w[0] == w[1]);
        if constant {
            continue;
        }
        let measured: Vec<f64> = plan
            .doses
            .iter()
            .map(|d| {
                per_treatment[&plan.name]
                    .iter()
                    .find(|(c, _)| *c == d.concentration)
                    .map(|(_, e)| *e)
                    .unwrap()
            })
            .collect();
        let rho = spearman(&planted_ladder, &measured);
        min_rho = min_rho.min(rho);
        assert!(
            rho >= 0.9,
            "{}: planted {planted_ladder:?}, measured {measured:?}, rho {rho}",
            plan.name
        );
        checked += 1;
    }
    assert!(checked >= 4, "expected at least the four effective ladders");
    println!(
        "criterion 7 PASS: effective set recovered exactly (precision 1.0, recall 1.0); min Spearman rho {min_rho:.3} over {checked} graded treatments"
    );
}

#[test]
fn criterion_08_baseline_degenerations() {
    // k = N reproduces the all-patch loss on a fixed batch.
    let fx = fixture();
    let train_set = dataset_for_split(fx, Split::Train);
    let model = ScorerModel::init(Architecture::reference(3, 32), 99);
    let loss_cfg = LossConfig::new(1.1, 0.95).unwrap();

    let bags: Vec<_> = train_set.samples.iter().take(4).collect();
    let mut mil_loss = 0.0;
    let mut direct_items = Vec::new();
    for bag in &bags {
        let patches = extract_patches(&bag.image, &fx.grid).unwrap();
        let n = patches.len();
        let scores: Vec<f64> =
            patches.iter().map(|p| model.score_patch(&p.pixels).unwrap()).collect();
        let set = PatchScoreSet::new(bag.sample_id.clone(), scores, n).unwrap();
        assert_eq!(set.top_k.len(), n, "k = N selects every patch");
        let per_patch: f64 = set
            .top_k
            .iter()
            .map(|&j| {
                deemd_core::scorer::weighted_bce(set.scores[j], bag.label, &loss_cfg).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        mil_loss += per_patch;
        for p in patches {
            direct_items.push((p.pixels, bag.label));
        }
    }
    mil_loss /= bags.len() as f64;
    let direct_loss = model.batch_loss(&direct_items, &loss_cfg).unwrap();
    let diff = (mil_loss - direct_loss).abs();
    assert!(diff <= 1e-9, "k=N loss {mil_loss} vs direct {direct_loss}");

    // The single-patch grid (whole-image path) trains without error.
    let size = fx.config.image_size;
    let whole_grid = GridConfig::new(size, size).unwrap();
    let mut small = dataset_for_split(fx, Split::Validation);
    small.grid = whole_grid;
    let positives: Vec<_> = small.samples.iter().filter(|s| s.label).take(6).cloned().collect();
    let negatives: Vec<_> = small.samples.iter().filter(|s| !s.label).take(6).cloned().collect();
    small.samples = positives.into_iter().chain(negatives).collect();
    let arch = Architecture::reference(3, size);
    let cfg = TrainConfig { k: 1, epochs: 2, batch_size: 4, patience: 5, ..TrainConfig::default() };
    let outcome =
        mil::train(&small, &small, ScorerModel::init(arch, 5), &cfg, &LossConfig::default())
            .expect("whole-image training");
    assert_eq!(outcome.log.len(), 2);
    println!(
        "criterion 8 PASS: k=N loss matches direct all-patch BCE to {diff:.2e} (<= 1e-9); single-patch grid trained 2 epochs"
    );
}

#[test]
fn criterion_10_nucleus_counter_accuracy() {
    // Blob images with known counts 1..=50.
    let blank = Array2::<f32>::zeros((256, 256));
    let result = nuclei::count_nuclei(blank.view(), nuclei::DEFAULT_MIN_AREA);
    assert_eq!(result.count, 0);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut total_true = 0usize;
    let mut total_err = 0usize;
    for n in 1..=50usize {
        let mut centers: Vec<(f64, f64)> = Vec::new();
        while centers.len() < n {
            let cand = (rng.random_range(10.0..246.0), rng.random_range(10.0..246.0));
            if centers
                .iter()
                .all(|c| (c.0 - cand.0).powi(2) + (c.1 - cand.1).powi(2) >= 12.0f64.powi(2))
            {
                centers.push(cand);
            }
        }
        let mut img = Array2::<f32>::zeros((256, 256));
        for &(cr, cc) in &centers {
            let peak = rng.random_range(0.6..0.9);
            for dr in -8i64..=8 {
                for dc in -8i64..=8 {
                    let (r, c) = (cr as i64 + dr, cc as i64 + dc);
                    if r < 0 || c < 0 || r >= 256 || c >= 256 {
                        continue;
                    }
                    let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                    img[[r as usize, c as usize]] +=
                        (peak * (-d2 / (2.0 * 2.5f64.powi(2))).exp()) as f32;
                }
            }
        }
        let counted = nuclei::count_nuclei(img.view(), nuclei::DEFAULT_MIN_AREA).count;
        total_true += n;
        total_err += counted.abs_diff(n);
    }
    let rate = total_err as f64 / total_true as f64;
    assert!(rate <= 0.02, "aggregate count error {rate}");
    println!(
        "criterion 10 PASS: aggregate count error {rate:.4} <= 0.02 over counts 1..=50; blank image counts 0"
    );
}
