//! Nucleus counting on the DNA-stain channel and empty-sample exclusion.
//!
//! The segmentation pipeline: Otsu threshold on a 256-bin intensity
//! histogram, exact Euclidean distance transform of the foreground mask,
//! watershed flood from distance-transform maxima to split touching nuclei,
//! then an area filter. The count is invariant to rescaling intensities by a
//! positive constant since the histogram spans the observed range.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use ndarray::ArrayView2;
use thiserror::Error;

use crate::manifest::Manifest;

/// Histogram resolution for Otsu, independent of source bit depth.
const OTSU_BINS: usize = 256;
/// Suppression radius (pixels) between watershed seeds.
const SEED_SUPPRESSION_RADIUS: f64 = 3.0;
/// Default minimum component area in pixels.
pub const DEFAULT_MIN_AREA: usize = 20;

#[derive(Debug, Error)]
pub enum NucleiError {
    #[error("no nucleus count supplied for sample `{0}`")]
    MissingCount(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Result of counting nuclei in one image.
#[derive(Clone, Debug)]
pub struct NucleusCountResult {
    pub count: usize,
    /// Intensity-weighted component centers, `(row, col)`.
    pub centroids: Vec<(f64, f64)>,
    /// Foreground threshold in the channel's intensity units.
    pub threshold: f32,
}

/// Otsu's threshold over a 256-bin histogram: the split that maximizes the
/// between-class variance. Returns the bin index; foreground is `bin > t`.
/// Ties resolve to the lowest bin.
fn otsu_bin(hist: &[u64; OTSU_BINS]) -> usize {
    let total: u64 = hist.iter().sum();
    let total_weighted: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &n)| i as f64 * n as f64)
        .sum();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut count_bg = 0u64;
    let mut sum_bg = 0.0f64;
    for (t, &bin_count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        count_bg += bin_count;
        sum_bg += t as f64 * bin_count as f64;
        let count_fg = total - count_bg;
        if count_bg == 0 || count_fg == 0 {
            continue;
        }
        let w0 = count_bg as f64 / total as f64;
        let w1 = count_fg as f64 / total as f64;
        let mu0 = sum_bg / count_bg as f64;
        let mu1 = (total_weighted - sum_bg) / count_fg as f64;
        let variance = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if variance > best.1 {
            best = (t, variance);
        }
    }
    best.0
}

fn bin_of(v: f32, min: f32, range: f32) -> usize {
    (((f64::from(v) - f64::from(min)) / f64::from(range) * OTSU_BINS as f64) as usize)
        .min(OTSU_BINS - 1)
}

/// Counts nuclei in a single-channel image.
///
/// A blank image (constant intensity) has no detectable foreground and
/// yields count 0.
pub fn count_nuclei(dna_channel: ArrayView2<'_, f32>, min_area: usize) -> NucleusCountResult {
    let (h, w) = dna_channel.dim();
    let min_area = min_area.max(1);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in dna_channel.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return NucleusCountResult { count: 0, centroids: Vec::new(), threshold: lo.min(hi) };
    }
    let range = hi - lo;

    let mut hist = [0u64; OTSU_BINS];
    for &v in dna_channel.iter() {
        hist[bin_of(v, lo, range)] += 1;
    }
    let otsu = otsu_bin(&hist);
    let threshold = lo + (otsu as f32 + 1.0) * range / OTSU_BINS as f32;

    // The mask comes from bin indices, not the float threshold, so a
    // positive rescale of the image produces the identical mask.
    let mask: Vec<bool> = dna_channel.iter().map(|&v| bin_of(v, lo, range) > otsu).collect();
    if mask.iter().all(|&m| !m) {
        return NucleusCountResult { count: 0, centroids: Vec::new(), threshold };
    }

    let dist = squared_distance_transform(&mask, h, w);
    let seeds = watershed_seeds(&mask, &dist, h, w);
    let labels = watershed_flood(&mask, &dist, &seeds, h, w);

    // Accumulate per-label area and intensity-weighted centroid.
    let label_count = seeds.len();
    let mut area = vec![0usize; label_count + 1];
    let mut weight = vec![0.0f64; label_count + 1];
    let mut row_acc = vec![0.0f64; label_count + 1];
    let mut col_acc = vec![0.0f64; label_count + 1];
    for (idx, &label) in labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let (r, c) = (idx / w, idx % w);
        let intensity = f64::from(dna_channel[[r, c]]);
        area[label] += 1;
        weight[label] += intensity;
        row_acc[label] += intensity * r as f64;
        col_acc[label] += intensity * c as f64;
    }
    let mut centroids = Vec::new();
    for label in 1..=label_count {
        if area[label] >= min_area && weight[label] > 0.0 {
            centroids.push((row_acc[label] / weight[label], col_acc[label] / weight[label]));
        }
    }
    NucleusCountResult { count: centroids.len(), centroids, threshold }
}

/// Exact squared Euclidean distance to the nearest background pixel.
///
/// Column sweep gives the linear distance along each column; the row pass
/// runs the lower-envelope parabola transform on the squared column
/// distances.
fn squared_distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    const FAR: f64 = 1e12;
    let mut column = vec![FAR; h * w];
    for c in 0..w {
        let mut run = FAR;
        for r in 0..h {
            run = if mask[r * w + c] { run + 1.0 } else { 0.0 };
            column[r * w + c] = run.min(FAR);
        }
        run = FAR;
        for r in (0..h).rev() {
            run = if mask[r * w + c] { run + 1.0 } else { 0.0 };
            column[r * w + c] = column[r * w + c].min(run.min(FAR));
        }
    }

    let mut dist = vec![0.0f64; h * w];
    let mut f = vec![0.0f64; w];
    let mut v = vec![0usize; w];
    let mut z = vec![0.0f64; w + 1];
    for r in 0..h {
        for c in 0..w {
            let d = column[r * w + c];
            f[c] = (d * d).min(FAR);
        }
        // Lower-envelope parabola pass; z[0] = -inf keeps k from
        // underflowing since vertex intersections are always finite.
        let intersect = |f: &[f64], q: usize, p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64)
        };
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..w {
            let mut s = intersect(&f, q, v[k]);
            while s <= z[k] {
                k -= 1;
                s = intersect(&f, q, v[k]);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        let mut k = 0usize;
        for q in 0..w {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dq = q as f64 - p as f64;
            dist[r * w + q] = (dq * dq + f[p]).min(FAR);
        }
    }
    dist
}

/// Seeds: local maxima of the distance transform, greedily thinned with a
/// 3-pixel suppression radius. Every connected foreground component keeps at
/// least one seed.
fn watershed_seeds(mask: &[bool], dist: &[f64], h: usize, w: usize) -> Vec<usize> {
    let radius = SEED_SUPPRESSION_RADIUS.ceil() as isize;
    let mut candidates: Vec<usize> = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            let idx = (r * w as isize + c) as usize;
            if !mask[idx] {
                continue;
            }
            let d = dist[idx];
            let mut is_max = true;
            'window: for dr in -radius..=radius {
                for dc in -radius..=radius {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    if (dr * dr + dc * dc) as f64
                        > SEED_SUPPRESSION_RADIUS * SEED_SUPPRESSION_RADIUS
                    {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    if dist[(nr * w as isize + nc) as usize] > d {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if is_max {
                candidates.push(idx);
            }
        }
    }
    candidates.sort_by(|&a, &b| {
        dist[b].partial_cmp(&dist[a]).unwrap().then_with(|| a.cmp(&b))
    });

    let mut seeds: Vec<usize> = Vec::new();
    let r2 = SEED_SUPPRESSION_RADIUS * SEED_SUPPRESSION_RADIUS;
    for &cand in &candidates {
        let (cr, cc) = ((cand / w) as f64, (cand % w) as f64);
        let close = seeds.iter().any(|&s| {
            let (sr, sc) = ((s / w) as f64, (s % w) as f64);
            (sr - cr) * (sr - cr) + (sc - cc) * (sc - cc) <= r2
        });
        if !close {
            seeds.push(cand);
        }
    }

    // Guarantee a seed inside every 4-connected foreground component.
    let mut component = vec![usize::MAX; h * w];
    let mut comp_count = 0usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || component[start] != usize::MAX {
            continue;
        }
        component[start] = comp_count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for n in neighbors4(p, h, w) {
                if mask[n] && component[n] == usize::MAX {
                    component[n] = comp_count;
                    stack.push(n);
                }
            }
        }
        comp_count += 1;
    }
    let mut has_seed = vec![false; comp_count];
    for &s in &seeds {
        has_seed[component[s]] = true;
    }
    for (comp, seeded) in has_seed.iter().enumerate() {
        if *seeded {
            continue;
        }
        let best = (0..h * w)
            .filter(|&p| component[p] == comp)
            .max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then_with(|| b.cmp(&a)))
            .expect("non-empty component");
        seeds.push(best);
    }
    seeds
}

fn neighbors4(idx: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (idx / w, idx % w);
    [
        (r > 0).then(|| idx - w),
        (r + 1 < h).then(|| idx + w),
        (c > 0).then(|| idx - 1),
        (c + 1 < w).then(|| idx + 1),
    ]
    .into_iter()
    .flatten()
}

struct FloodItem {
    dist: f64,
    idx: usize,
}

impl PartialEq for FloodItem {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.idx == other.idx
    }
}
impl Eq for FloodItem {}
impl PartialOrd for FloodItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for FloodItem {
    // Max-heap: highest distance first, then lowest pixel index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .partial_cmp(&other.dist)
            .unwrap()
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Priority flood from the seeds downhill along the distance transform.
/// Deterministic: ties resolve by pixel index.
fn watershed_flood(mask: &[bool], dist: &[f64], seeds: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut labels = vec![0usize; h * w];
    let mut heap = BinaryHeap::new();
    for (label, &seed) in seeds.iter().enumerate() {
        labels[seed] = label + 1;
        heap.push(FloodItem { dist: dist[seed], idx: seed });
    }
    while let Some(FloodItem { idx, .. }) = heap.pop() {
        let label = labels[idx];
        for n in neighbors4(idx, h, w) {
            if mask[n] && labels[n] == 0 {
                labels[n] = label;
                heap.push(FloodItem { dist: dist[n], idx: n });
            }
        }
    }
    labels
}

/// Drops manifest records whose nucleus count is zero. Returns the filtered
/// manifest together with the removed sample ids (in manifest order).
pub fn filter_empty_samples(
    manifest: &Manifest,
    counts: &HashMap<String, NucleusCountResult>,
) -> Result<(Manifest, Vec<String>), NucleiError> {
    for record in &manifest.records {
        if !counts.contains_key(&record.sample_id) {
            return Err(NucleiError::MissingCount(record.sample_id.clone()));
        }
    }
    let mut removed = Vec::new();
    let records = manifest
        .records
        .iter()
        .filter(|r| {
            let keep = counts[&r.sample_id].count > 0;
            if !keep {
                removed.push(r.sample_id.clone());
            }
            keep
        })
        .cloned()
        .collect();
    Ok((Manifest { records, ..manifest.clone() }, removed))
}

/// Optional CSV export: `sample_id,count,threshold`, sorted by sample id.
pub fn write_counts_csv(
    path: &Path,
    counts: &HashMap<String, NucleusCountResult>,
) -> Result<(), NucleiError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["sample_id", "count", "threshold"])?;
    let mut ids: Vec<&String> = counts.keys().collect();
    ids.sort();
    for id in ids {
        let result = &counts[id];
        writer.write_record(&[id.clone(), result.count.to_string(), result.threshold.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Condition, LabelRule, SampleRecord};
    use ndarray::Array2;

    fn disc_image(h: usize, w: usize, centers: &[(f64, f64)], radius: f64) -> Array2<f32> {
        let mut img = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                for &(cr, cc) in centers {
                    let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                    if d2 <= radius * radius {
                        img[[r, c]] = 0.9;
                    }
                }
            }
        }
        img
    }

    #[test]
    fn blank_image_counts_zero() {
        let img = Array2::<f32>::zeros((64, 64));
        let result = count_nuclei(img.view(), DEFAULT_MIN_AREA);
        assert_eq!(result.count, 0);
        assert!(result.centroids.is_empty());
    }

    #[test]
    fn ten_disjoint_discs_count_ten() {
        let mut centers = Vec::new();
        for i in 0..5 {
            for j in 0..2 {
                centers.push((20.0 + 25.0 * i as f64, 20.0 + 30.0 * j as f64));
            }
        }
        let img = disc_image(160, 80, &centers, 5.0);
        let result = count_nuclei(img.view(), DEFAULT_MIN_AREA);
        assert_eq!(result.count, 10);
    }

    #[test]
    fn overlapping_discs_split_by_watershed() {
        // Two discs whose masks merge but whose distance-transform maxima
        // stay distinct.
        let img = disc_image(48, 64, &[(24.0, 24.0), (24.0, 38.0)], 8.0);
        let result = count_nuclei(img.view(), DEFAULT_MIN_AREA);
        assert_eq!(result.count, 2);
    }

    #[test]
    fn count_invariant_to_positive_rescale() {
        let img = disc_image(96, 96, &[(20.0, 20.0), (60.0, 60.0), (20.0, 70.0)], 6.0);
        let base = count_nuclei(img.view(), DEFAULT_MIN_AREA).count;
        for scale in [0.5f32, 2.0] {
            let scaled = img.mapv(|v| v * scale);
            assert_eq!(count_nuclei(scaled.view(), DEFAULT_MIN_AREA).count, base);
        }
    }

    #[test]
    fn min_area_filters_specks() {
        let mut img = disc_image(64, 64, &[(32.0, 32.0)], 7.0);
        img[[5, 5]] = 0.9; // single-pixel speck
        let result = count_nuclei(img.view(), 20);
        assert_eq!(result.count, 1);
        let loose = count_nuclei(img.view(), 1);
        assert_eq!(loose.count, 2);
    }

    #[test]
    fn centroid_lands_on_disc_center() {
        let img = disc_image(64, 64, &[(30.0, 34.0)], 6.0);
        let result = count_nuclei(img.view(), DEFAULT_MIN_AREA);
        assert_eq!(result.count, 1);
        let (r, c) = result.centroids[0];
        assert!((r - 30.0).abs() < 0.75 && (c - 34.0).abs() < 0.75);
    }

    #[test]
    fn otsu_matches_exhaustive_scan() {
        // Oracle: recompute the between-class variance for every candidate
        // bin directly from the histogram and take the argmax.
        let img = disc_image(96, 96, &[(30.0, 30.0), (60.0, 70.0)], 9.0);
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in img.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let mut hist = [0u64; OTSU_BINS];
        for &v in img.iter() {
            hist[bin_of(v, lo, hi - lo)] += 1;
        }
        let chosen = otsu_bin(&hist);

        let total: f64 = hist.iter().sum::<u64>() as f64;
        let mut best = (0usize, f64::NEG_INFINITY);
        for t in 0..OTSU_BINS - 1 {
            let bg: Vec<(usize, u64)> =
                hist.iter().cloned().enumerate().take(t + 1).collect();
            let fg: Vec<(usize, u64)> =
                hist.iter().cloned().enumerate().skip(t + 1).collect();
            let n0: f64 = bg.iter().map(|(_, n)| *n as f64).sum();
            let n1: f64 = fg.iter().map(|(_, n)| *n as f64).sum();
            if n0 == 0.0 || n1 == 0.0 {
                continue;
            }
            let mu0: f64 = bg.iter().map(|(i, n)| *i as f64 * *n as f64).sum::<f64>() / n0;
            let mu1: f64 = fg.iter().map(|(i, n)| *i as f64 * *n as f64).sum::<f64>() / n1;
            let variance = (n0 / total) * (n1 / total) * (mu0 - mu1) * (mu0 - mu1);
            if variance > best.1 {
                best = (t, variance);
            }
        }
        assert_eq!(chosen, best.0);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let img = disc_image(24, 32, &[(12.0, 10.0), (12.0, 22.0)], 5.0);
        let mask: Vec<bool> = img.iter().map(|&v| v > 0.0).collect();
        let dist = squared_distance_transform(&mask, 24, 32);
        for r in 0..24usize {
            for c in 0..32usize {
                let idx = r * 32 + c;
                if !mask[idx] {
                    assert_eq!(dist[idx], 0.0);
                    continue;
                }
                let mut best = f64::INFINITY;
                for rr in 0..24usize {
                    for cc in 0..32usize {
                        if !mask[rr * 32 + cc] {
                            let d2 = ((r as f64) - (rr as f64)).powi(2)
                                + ((c as f64) - (cc as f64)).powi(2);
                            best = best.min(d2);
                        }
                    }
                }
                assert_eq!(dist[idx], best, "pixel ({r},{c})");
            }
        }
    }

    fn record(id: &str) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            plate: "P1".into(),
            well: "A01".into(),
            site: 1,
            condition: Condition::Mock,
            treatment: None,
            concentration: None,
            image_paths: vec![],
            split: None,
        }
    }

    fn counts_of(pairs: &[(&str, usize)]) -> HashMap<String, NucleusCountResult> {
        pairs
            .iter()
            .map(|(id, count)| {
                (
                    id.to_string(),
                    NucleusCountResult { count: *count, centroids: vec![], threshold: 0.1 },
                )
            })
            .collect()
    }

    #[test]
    fn filter_removes_empty_samples() {
        let manifest = Manifest {
            records: vec![record("A"), record("B"), record("C")],
            channel_count: 1,
            label_rule: LabelRule { merge_controls: true },
        };
        let counts = counts_of(&[("A", 5), ("B", 0), ("C", 12)]);
        let (filtered, removed) = filter_empty_samples(&manifest, &counts).unwrap();
        assert_eq!(removed, vec!["B".to_string()]);
        let ids: Vec<_> = filtered.records.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["A", "C"]);
    }

    #[test]
    fn filter_keeps_all_when_counts_positive() {
        let manifest = Manifest {
            records: vec![record("A"), record("B")],
            channel_count: 1,
            label_rule: LabelRule { merge_controls: true },
        };
        let counts = counts_of(&[("A", 1), ("B", 2)]);
        let (filtered, removed) = filter_empty_samples(&manifest, &counts).unwrap();
        assert!(removed.is_empty());
        assert_eq!(filtered.records.len(), 2);
    }

    #[test]
    fn filter_requires_count_for_every_record() {
        let manifest = Manifest {
            records: vec![record("A"), record("C")],
            channel_count: 1,
            label_rule: LabelRule { merge_controls: true },
        };
        let counts = counts_of(&[("A", 1)]);
        match filter_empty_samples(&manifest, &counts) {
            Err(NucleiError::MissingCount(id)) => assert_eq!(id, "C"),
            other => panic!("expected MissingCount, got {other:?}"),
        }
    }
}
