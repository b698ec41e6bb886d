//! Per-pixel infection maps from overlapping patch probabilities.
//!
//! Each pixel aggregates the probabilities of the patches covering it with a
//! power-weighted average, `sum(mu^(1+alpha)) / sum(mu^alpha)`: a convex
//! combination of the overlapping scores whose weights grow with the score
//! itself, so strong patches are not washed out by overlapping weak ones. An
//! optional Gaussian low-pass (reflect-padded, truncated at three sigma)
//! smooths the rendered map.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::GridConfig;
use crate::mil::PatchScoreSet;

/// Power-mean exponent used when none is configured.
pub const DEFAULT_ALPHA: f64 = 0.2;
/// Smoothing bandwidth (pixels) used when none is configured.
pub const DEFAULT_SIGMA: f64 = 60.0;

#[derive(Debug, Error)]
pub enum InfmapError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("sigma must be non-negative, got {0}")]
    BadSigma(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

/// Aggregated per-pixel infection probability field.
#[derive(Clone, Debug)]
pub struct InfectionMap {
    pub values: Array2<f64>,
    pub alpha: f64,
    pub sigma: f64,
    pub sample_id: String,
}

/// Builds the infection map for one sample.
///
/// `scores` must cover every patch of the grid over a `height x width`
/// image. `sigma = 0` skips smoothing and returns the raw ratio field.
pub fn build_infection_map(
    scores: &PatchScoreSet,
    grid: &GridConfig,
    height: usize,
    width: usize,
    alpha: f64,
    sigma: f64,
) -> Result<InfectionMap, InfmapError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InfmapError::BadAlpha(alpha));
    }
    if sigma.is_nan() || sigma < 0.0 {
        return Err(InfmapError::BadSigma(sigma));
    }
    let origins = grid
        .origins(height, width)
        .map_err(|e| InfmapError::GridMismatch(e.to_string()))?;
    if origins.len() != scores.scores.len() {
        return Err(InfmapError::GridMismatch(format!(
            "{} patch scores for a {}-patch grid",
            scores.scores.len(),
            origins.len()
        )));
    }

    let mut numerator = Array2::<f64>::zeros((height, width));
    let mut denominator = Array2::<f64>::zeros((height, width));
    let p = grid.patch_size;
    for (&(r0, c0), &mu) in origins.iter().zip(&scores.scores) {
        // 0^alpha == 0 by convention: a zero score contributes nothing.
        if mu <= 0.0 {
            continue;
        }
        let wa = mu.powf(alpha);
        let wn = mu.powf(1.0 + alpha);
        for r in r0..r0 + p {
            for c in c0..c0 + p {
                numerator[[r, c]] += wn;
                denominator[[r, c]] += wa;
            }
        }
    }

    let mut values = Array2::<f64>::zeros((height, width));
    ndarray::Zip::from(&mut values)
        .and(&numerator)
        .and(&denominator)
        .for_each(|v, &n, &d| {
            // All-zero overlap sets resolve to 0 rather than 0/0.
            *v = if d > 0.0 { n / d } else { 0.0 };
        });

    if sigma > 0.0 {
        values = gaussian_blur(&values, sigma);
    }

    Ok(InfectionMap { values, alpha, sigma, sample_id: scores.sample_id.clone() })
}

/// Fraction of pixels at or above the cutoff.
pub fn infected_fraction(map: &InfectionMap, eta: f64) -> f64 {
    let total = map.values.len();
    if total == 0 {
        return 0.0;
    }
    let hits = map.values.iter().filter(|&&v| v >= eta).count();
    hits as f64 / total as f64
}

/// Separable Gaussian blur with symmetric reflect padding. The kernel is
/// normalized after truncation at three sigma, so constant fields pass
/// through unchanged and no overshoot is possible.
pub fn gaussian_blur(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return field.clone();
    }
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = field.dim();
    // Horizontal pass.
    let mut pass1 = Array2::<f64>::zeros((h, w));
    pass1
        .outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            for c in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let offset = ki as isize - radius;
                    acc += k * field[[r, reflect(c as isize + offset, w)]];
                }
                row[c] = acc;
            }
        });
    // Vertical pass.
    let mut out = Array2::<f64>::zeros((h, w));
    out.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(r, mut row)| {
            for c in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let offset = ki as isize - radius;
                    acc += k * pass1[[reflect(r as isize + offset, h), c]];
                }
                row[c] = acc;
            }
        });
    out
}

/// Symmetric reflection: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
fn reflect(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= len {
            i = 2 * len - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Writes the map as an 8-bit grayscale PNG (value x 255, ties to even).
pub fn write_map_png(map: &InfectionMap, path: &Path) -> Result<(), InfmapError> {
    let (h, w) = map.values.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in map.values.indexed_iter() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8;
        buf.put_pixel(c as u32, r as u32, image::Luma([q]));
    }
    buf.save(path)?;
    Ok(())
}

/// Numeric export: one CSV row of pixel values per image row.
pub fn write_map_csv(map: &InfectionMap, path: &Path) -> Result<(), InfmapError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in map.values.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Red-overlay composite: inverted grayscale channel with red intensity
/// tracking the map value. `map = 0` reproduces the inverted channel,
/// `map = 1` is pure red.
pub fn write_overlay_png(
    channel: ndarray::ArrayView2<'_, f32>,
    map: &InfectionMap,
    path: &Path,
) -> Result<(), InfmapError> {
    let (h, w) = map.values.dim();
    if channel.dim() != (h, w) {
        return Err(InfmapError::GridMismatch(format!(
            "channel {:?} vs map {:?}",
            channel.dim(),
            map.values.dim()
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for ((r, c), &v) in map.values.indexed_iter() {
        let a = v.clamp(0.0, 1.0);
        let gray = 1.0 - f64::from(channel[[r, c]]).clamp(0.0, 1.0);
        let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8;
        let red = q((1.0 - a) * gray + a);
        let other = q((1.0 - a) * gray);
        buf.put_pixel(c as u32, r as u32, image::Rgb([red, other, other]));
    }
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn score_set(scores: Vec<f64>, k: usize) -> PatchScoreSet {
        PatchScoreSet::new("s".into(), scores, k).unwrap()
    }

    #[test]
    fn constant_scores_give_constant_map() {
        let grid = GridConfig::new(4, 2).unwrap();
        let n = grid.patch_count(8, 8).unwrap();
        let scores = score_set(vec![0.37; n], 1);
        let map = build_infection_map(&scores, &grid, 8, 8, 0.2, 0.0).unwrap();
        for &v in map.values.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        // Smoothing preserves constant fields.
        let smoothed = build_infection_map(&scores, &grid, 8, 8, 0.2, 2.0).unwrap();
        for &v in smoothed.values.iter() {
            assert!((v - 0.37).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_scores_use_zero_convention() {
        // A pixel overlapped by {1.0, 0.0} evaluates to 1.0 because 0^alpha
        // is defined as 0. PatchScoreSet clamps probabilities, so exercise
        // the ratio by hand through a two-patch grid built directly.
        let grid = GridConfig::new(4, 4).unwrap();
        let mut scores = score_set(vec![0.5, 0.5], 1);
        scores.scores = vec![1.0, 0.0];
        let map = build_infection_map(&scores, &grid, 4, 8, 0.2, 0.0).unwrap();
        assert_eq!(map.values[[0, 0]], 1.0);
        assert_eq!(map.values[[0, 7]], 0.0);
    }

    #[test]
    fn two_score_overlap_matches_closed_form() {
        // (0.8^1.2 + 0.2^1.2) / (0.8^0.2 + 0.2^0.2)
        let grid = GridConfig::new(4, 2).unwrap();
        let mut scores = score_set(vec![0.5; 3], 1);
        scores.scores = vec![0.8, 0.2, 0.8];
        let map = build_infection_map(&scores, &grid, 4, 8, 0.2, 0.0).unwrap();
        let expected = (0.8f64.powf(1.2) + 0.2f64.powf(1.2)) / (0.8f64.powf(0.2) + 0.2f64.powf(0.2));
        let overlapped = map.values[[0, 3]];
        assert!((overlapped - expected).abs() < 1e-12);
        assert!((overlapped - 0.5413).abs() < 1e-4);
    }

    #[test]
    fn infected_fraction_thresholds() {
        let grid = GridConfig::new(4, 4).unwrap();
        let mut scores = score_set(vec![0.5, 0.5], 1);
        scores.scores = vec![0.9, 0.1];
        let map = build_infection_map(&scores, &grid, 4, 8, 0.2, 0.0).unwrap();
        assert_eq!(infected_fraction(&map, 0.5), 0.5);
        assert_eq!(infected_fraction(&map, 0.05), 1.0);
        assert_eq!(infected_fraction(&map, 0.95), 0.0);
    }

    #[test]
    fn map_rejects_wrong_score_count() {
        let grid = GridConfig::new(4, 2).unwrap();
        let scores = score_set(vec![0.5; 4], 1);
        assert!(matches!(
            build_infection_map(&scores, &grid, 8, 8, 0.2, 0.0),
            Err(InfmapError::GridMismatch(_))
        ));
    }

    #[test]
    fn smoothing_keeps_value_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = Array2::from_shape_fn((32, 32), |_| rng.random_range(0.0..1.0));
        let blurred = gaussian_blur(&field, 3.5);
        let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in blurred.iter() {
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }

    #[test]
    fn power_mean_properties_on_random_overlaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let mus: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
            let alpha = rng.random_range(0.05..0.95);
            let num: f64 = mus.iter().map(|m| m.powf(1.0 + alpha)).sum();
            let den: f64 = mus.iter().map(|m| m.powf(alpha)).sum();
            let value = num / den;
            let lo = mus.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = mus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = mus.iter().sum::<f64>() / n as f64;
            assert!(value >= lo - 1e-12 && value <= hi + 1e-12);
            assert!(value >= mean - 1e-12);
        }
    }

    #[test]
    fn map_is_order_independent() {
        // Identical score vectors produce bit-identical maps regardless of
        // the order the caller assembled them in.
        let grid = GridConfig::new(4, 2).unwrap();
        let n = grid.patch_count(12, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut shuffled_build: Vec<(usize, f64)> = values.iter().cloned().enumerate().collect();
        shuffled_build.reverse();
        let mut reassembled = vec![0.0; n];
        for (i, v) in shuffled_build {
            reassembled[i] = v;
        }
        let a = build_infection_map(&score_set(values, 2), &grid, 12, 12, 0.2, 1.5).unwrap();
        let b = build_infection_map(&score_set(reassembled, 2), &grid, 12, 12, 0.2, 1.5).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn overlay_matches_inverted_channel_when_map_zero() {
        let dir = tempfile::tempdir().unwrap();
        let channel = Array2::from_shape_fn((8, 8), |(r, c)| ((r * 8 + c) as f32) / 64.0);
        let map = InfectionMap {
            values: Array2::zeros((8, 8)),
            alpha: 0.2,
            sigma: 0.0,
            sample_id: "s".into(),
        };
        let path = dir.path().join("overlay.png");
        write_overlay_png(channel.view(), &map, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        for (r, c) in [(0usize, 0usize), (3, 5), (7, 7)] {
            let px = img.get_pixel(c as u32, r as u32);
            let expected =
                ((1.0 - f64::from(channel[[r, c]])) * 255.0).round_ties_even() as u8;
            assert_eq!(px.0, [expected, expected, expected]);
        }
    }

    #[test]
    fn csv_export_round_trips_values() {
        let dir = tempfile::tempdir().unwrap();
        let map = InfectionMap {
            values: Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64 / 12.0),
            alpha: 0.2,
            sigma: 0.0,
            sample_id: "s".into(),
        };
        let path = dir.path().join("map.csv");
        write_map_csv(&map, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(parsed.len(), 3);
        for ((r, c), &v) in map.values.indexed_iter() {
            assert_eq!(parsed[r][c], v);
        }
    }

    #[test]
    fn overlay_is_red_when_map_one() {
        let dir = tempfile::tempdir().unwrap();
        let channel = Array2::from_elem((4, 4), 0.3f32);
        let map = InfectionMap {
            values: Array2::ones((4, 4)),
            alpha: 0.2,
            sigma: 0.0,
            sample_id: "s".into(),
        };
        let path = dir.path().join("overlay.png");
        write_overlay_png(channel.view(), &map, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
    }
}
