//! Multi-channel image loading, site stitching, channel normalization, and
//! the uniform overlapping patch grid.
//!
//! Pixels live in `[0, 1]` at load time (8- and 16-bit sources are scaled by
//! their maximum code value). Normalized images are z-scored per channel and
//! may leave that range. Images whose dimensions do not tile exactly under a
//! grid are rejected rather than padded; [`center_crop`] exists for sources
//! that need trimming first.

use std::path::Path;

use ndarray::{s, Array3, ArrayView2};
use thiserror::Error;

/// Standard-deviation floor applied when computing channel stats, so blank
/// channels stay invertible under normalization.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image dimensions do not match: {0}")]
    DimensionMismatch(String),
    #[error("channel count mismatch: image has {image} channels, expected {expected}")]
    ChannelMismatch { image: usize, expected: usize },
    #[error("grid does not tile the image: {0}")]
    GridMismatch(String),
    #[error("no images supplied")]
    EmptyInput,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unsupported pixel format in {path}: expected 8- or 16-bit grayscale")]
    UnsupportedFormat { path: String },
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// A multi-channel image, pixels indexed `[channel, row, col]`.
#[derive(Clone, Debug)]
pub struct MultiChannelImage {
    pixels: Array3<f32>,
    channel_names: Vec<String>,
}

impl MultiChannelImage {
    /// Wraps a pixel tensor. Dimensions must be non-zero and values finite.
    pub fn new(pixels: Array3<f32>, channel_names: Vec<String>) -> Result<Self, ImagingError> {
        let (c, h, w) = pixels.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(ImagingError::DimensionMismatch(format!(
                "zero-sized tensor {c}x{h}x{w}"
            )));
        }
        if channel_names.len() != c {
            return Err(ImagingError::ChannelMismatch { image: c, expected: channel_names.len() });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::DimensionMismatch("non-finite pixel value".into()));
        }
        Ok(MultiChannelImage { pixels, channel_names })
    }

    /// Loads one grayscale file per channel; all channels must agree on size.
    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self, ImagingError> {
        if paths.is_empty() {
            return Err(ImagingError::EmptyInput);
        }
        let mut channels = Vec::with_capacity(paths.len());
        let mut names = Vec::with_capacity(paths.len());
        for path in paths {
            let path = path.as_ref();
            let display = path.display().to_string();
            let dynamic = image::open(path)
                .map_err(|source| ImagingError::Read { path: display.clone(), source })?;
            let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
            let mut plane = Vec::with_capacity(h * w);
            match dynamic {
                image::DynamicImage::ImageLuma8(buf) => {
                    plane.extend(buf.pixels().map(|p| f32::from(p.0[0]) / 255.0));
                }
                image::DynamicImage::ImageLuma16(buf) => {
                    plane.extend(buf.pixels().map(|p| f32::from(p.0[0]) / 65535.0));
                }
                _ => return Err(ImagingError::UnsupportedFormat { path: display }),
            }
            channels.push((h, w, plane));
            names.push(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        }
        let (h, w) = (channels[0].0, channels[0].1);
        if channels.iter().any(|(ch, cw, _)| *ch != h || *cw != w) {
            return Err(ImagingError::DimensionMismatch(
                "channel files differ in size".into(),
            ));
        }
        let mut pixels = Array3::zeros((channels.len(), h, w));
        for (c, (_, _, plane)) in channels.into_iter().enumerate() {
            pixels
                .slice_mut(s![c, .., ..])
                .assign(&ndarray::ArrayView::from_shape((h, w), &plane).unwrap());
        }
        MultiChannelImage::new(pixels, names)
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.pixels.slice(s![c, .., ..])
    }
}

/// Uniform overlapping patch grid. `stride <= patch_size`, both non-zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridConfig {
    pub patch_size: usize,
    pub stride: usize,
}

impl GridConfig {
    pub fn new(patch_size: usize, stride: usize) -> Result<Self, ImagingError> {
        if patch_size == 0 || stride == 0 {
            return Err(ImagingError::InvalidGrid("patch size and stride must be non-zero".into()));
        }
        if stride > patch_size {
            return Err(ImagingError::InvalidGrid(format!(
                "stride {stride} exceeds patch size {patch_size}"
            )));
        }
        Ok(GridConfig { patch_size, stride })
    }

    /// Patches per axis, or an error when the grid does not tile exactly.
    pub fn steps(&self, dim: usize) -> Result<usize, ImagingError> {
        if dim < self.patch_size {
            return Err(ImagingError::GridMismatch(format!(
                "dimension {dim} smaller than patch size {}",
                self.patch_size
            )));
        }
        let span = dim - self.patch_size;
        if !span.is_multiple_of(self.stride) {
            return Err(ImagingError::GridMismatch(format!(
                "({dim} - {}) is not divisible by stride {}",
                self.patch_size, self.stride
            )));
        }
        Ok(span / self.stride + 1)
    }

    /// Total patch count for an image of the given size.
    pub fn patch_count(&self, height: usize, width: usize) -> Result<usize, ImagingError> {
        Ok(self.steps(height)? * self.steps(width)?)
    }

    /// Row-major patch origins; index `j = row * cols + col`.
    pub fn origins(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>, ImagingError> {
        let rows = self.steps(height)?;
        let cols = self.steps(width)?;
        let mut origins = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                origins.push((r * self.stride, c * self.stride));
            }
        }
        Ok(origins)
    }
}

/// One extracted patch: its row-major index, pixel origin, and tensor.
#[derive(Clone, Debug)]
pub struct Patch {
    pub index: usize,
    pub origin: (usize, usize),
    /// `[channel, row, col]`, f64 for downstream scoring.
    pub pixels: Array3<f64>,
}

/// Extracts the full patch grid in row-major order.
pub fn extract_patches(
    image: &MultiChannelImage,
    grid: &GridConfig,
) -> Result<Vec<Patch>, ImagingError> {
    let origins = grid.origins(image.height(), image.width())?;
    let p = grid.patch_size;
    let patches = origins
        .into_iter()
        .enumerate()
        .map(|(index, (r, c))| {
            let view = image.pixels.slice(s![.., r..r + p, c..c + p]);
            Patch { index, origin: (r, c), pixels: view.mapv(f64::from) }
        })
        .collect();
    Ok(patches)
}

/// Extracts a single patch by its row-major index.
pub fn extract_patch(
    image: &MultiChannelImage,
    grid: &GridConfig,
    index: usize,
) -> Result<Patch, ImagingError> {
    let rows = grid.steps(image.height())?;
    let cols = grid.steps(image.width())?;
    if index >= rows * cols {
        return Err(ImagingError::GridMismatch(format!(
            "patch index {index} outside a {rows}x{cols} grid"
        )));
    }
    let origin = ((index / cols) * grid.stride, (index % cols) * grid.stride);
    let p = grid.patch_size;
    let view = image.pixels.slice(s![.., origin.0..origin.0 + p, origin.1..origin.1 + p]);
    Ok(Patch { index, origin, pixels: view.mapv(f64::from) })
}

/// 2x2 site order for stitching: quadrant (top-left, top-right, bottom-left,
/// bottom-right) -> index into the supplied slice.
#[derive(Clone, Copy, Debug)]
pub struct SiteLayout(pub [usize; 4]);

impl Default for SiteLayout {
    /// Sites in reading order: 1 2 / 3 4.
    fn default() -> Self {
        SiteLayout([0, 1, 2, 3])
    }
}

/// Stitches four site images into one image twice as large per axis.
pub fn stitch_sites(
    sites: &[MultiChannelImage],
    layout: SiteLayout,
) -> Result<MultiChannelImage, ImagingError> {
    if sites.len() != 4 {
        return Err(ImagingError::DimensionMismatch(format!(
            "stitching needs exactly 4 site images, got {}",
            sites.len()
        )));
    }
    let (c, h, w) = sites[0].pixels.dim();
    if sites.iter().any(|s| s.pixels.dim() != (c, h, w)) {
        return Err(ImagingError::DimensionMismatch(
            "site images differ in shape".into(),
        ));
    }
    if layout.0.iter().any(|&i| i >= 4) {
        return Err(ImagingError::DimensionMismatch("site layout index out of range".into()));
    }
    let mut pixels = Array3::zeros((c, 2 * h, 2 * w));
    for (quadrant, &site_idx) in layout.0.iter().enumerate() {
        let (r0, c0) = (h * (quadrant / 2), w * (quadrant % 2));
        pixels
            .slice_mut(s![.., r0..r0 + h, c0..c0 + w])
            .assign(&sites[site_idx].pixels);
    }
    MultiChannelImage::new(pixels, sites[0].channel_names.clone())
}

/// Per-channel mean and standard deviation (population convention), computed
/// on the training split only. Standard deviations are floored at
/// [`STD_FLOOR`].
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Accumulates mean/std over all pixels of all supplied images.
pub fn compute_channel_stats<'a, I>(images: I) -> Result<ChannelStats, ImagingError>
where
    I: IntoIterator<Item = &'a MultiChannelImage>,
{
    let mut sums: Vec<f64> = Vec::new();
    let mut sq_sums: Vec<f64> = Vec::new();
    let mut count = 0u64;
    for image in images {
        let c = image.channels();
        if sums.is_empty() {
            sums = vec![0.0; c];
            sq_sums = vec![0.0; c];
        } else if sums.len() != c {
            return Err(ImagingError::ChannelMismatch { image: c, expected: sums.len() });
        }
        for (ch, plane) in image.pixels.outer_iter().enumerate() {
            for &v in plane.iter() {
                let v = f64::from(v);
                sums[ch] += v;
                sq_sums[ch] += v * v;
            }
        }
        count += (image.height() * image.width()) as u64;
    }
    if count == 0 {
        return Err(ImagingError::EmptyInput);
    }
    let n = count as f64;
    let mean: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let std = sq_sums
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Z-scores each channel: `(x - mean) / std`.
pub fn normalize(
    image: &MultiChannelImage,
    stats: &ChannelStats,
) -> Result<MultiChannelImage, ImagingError> {
    if stats.mean.len() != image.channels() {
        return Err(ImagingError::ChannelMismatch {
            image: image.channels(),
            expected: stats.mean.len(),
        });
    }
    let mut pixels = image.pixels.clone();
    for (ch, mut plane) in pixels.outer_iter_mut().enumerate() {
        let (mean, std) = (stats.mean[ch], stats.std[ch]);
        plane.mapv_inplace(|v| ((f64::from(v) - mean) / std) as f32);
    }
    MultiChannelImage::new(pixels, image.channel_names.clone())
}

/// Trims an image to `height x width` around its center, for sources whose
/// dimensions do not tile under the grid.
pub fn center_crop(
    image: &MultiChannelImage,
    height: usize,
    width: usize,
) -> Result<MultiChannelImage, ImagingError> {
    if height == 0 || width == 0 || height > image.height() || width > image.width() {
        return Err(ImagingError::DimensionMismatch(format!(
            "cannot crop {}x{} to {height}x{width}",
            image.height(),
            image.width()
        )));
    }
    let r0 = (image.height() - height) / 2;
    let c0 = (image.width() - width) / 2;
    let pixels = image.pixels.slice(s![.., r0..r0 + height, c0..c0 + width]).to_owned();
    MultiChannelImage::new(pixels, image.channel_names.clone())
}

/// Writes one channel as a 16-bit grayscale PNG. Values are clipped to
/// `[0, 1]` before quantization.
pub fn write_channel_png(channel: ArrayView2<'_, f32>, path: &Path) -> Result<(), ImagingError> {
    let (h, w) = channel.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (r, row) in channel.outer_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let q = (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.put_pixel(c as u32, r as u32, image::Luma([q]));
        }
    }
    buf.save(path).map_err(|source| ImagingError::Read {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn constant_image(c: usize, h: usize, w: usize, value: f32) -> MultiChannelImage {
        let names = (0..c).map(|i| format!("ch{i}")).collect();
        MultiChannelImage::new(Array3::from_elem((c, h, w), value), names).unwrap()
    }

    fn ramp_image(c: usize, h: usize, w: usize) -> MultiChannelImage {
        let mut pixels = Array3::zeros((c, h, w));
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    pixels[[ch, r, col]] =
                        ((ch * h * w + r * w + col) as f32) / ((c * h * w) as f32);
                }
            }
        }
        let names = (0..c).map(|i| format!("ch{i}")).collect();
        MultiChannelImage::new(pixels, names).unwrap()
    }

    #[test]
    fn stitch_doubles_dimensions() {
        let sites: Vec<_> = (0..4).map(|_| constant_image(2, 8, 8, 0.5)).collect();
        let stitched = stitch_sites(&sites, SiteLayout::default()).unwrap();
        assert_eq!((stitched.channels(), stitched.height(), stitched.width()), (2, 16, 16));
    }

    #[test]
    fn stitch_places_quadrants() {
        let sites: Vec<_> = (0..4).map(|i| constant_image(1, 2, 2, i as f32 / 4.0)).collect();
        let stitched = stitch_sites(&sites, SiteLayout::default()).unwrap();
        let px = stitched.pixels();
        assert_eq!(px[[0, 0, 0]], 0.0);
        assert_eq!(px[[0, 0, 3]], 0.25);
        assert_eq!(px[[0, 3, 0]], 0.5);
        assert_eq!(px[[0, 3, 3]], 0.75);
    }

    #[test]
    fn stitch_rejects_wrong_arity() {
        let sites: Vec<_> = (0..3).map(|_| constant_image(1, 2, 2, 0.0)).collect();
        assert!(matches!(
            stitch_sites(&sites, SiteLayout::default()),
            Err(ImagingError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn stats_on_constant_channel_clamp_std() {
        let image = constant_image(1, 4, 4, 0.5);
        let stats = compute_channel_stats([&image]).unwrap();
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert_eq!(stats.std[0], STD_FLOOR);
    }

    #[test]
    fn stats_two_point_population_convention() {
        let a = constant_image(1, 1, 1, 0.0);
        let b = constant_image(1, 1, 1, 1.0);
        let stats = compute_channel_stats([&a, &b]).unwrap();
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.std[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stats_empty_iterator_errors() {
        assert!(matches!(compute_channel_stats([]), Err(ImagingError::EmptyInput)));
    }

    #[test]
    fn normalize_centers_constant_channel() {
        let image = constant_image(1, 3, 3, 0.25);
        let stats = ChannelStats { mean: vec![0.25], std: vec![1.0] };
        let normed = normalize(&image, &stats).unwrap();
        assert!(normed.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_two_point_symmetry() {
        let mut pixels = Array3::zeros((1, 1, 2));
        pixels[[0, 0, 1]] = 1.0;
        let image = MultiChannelImage::new(pixels, vec!["c".into()]).unwrap();
        let stats = ChannelStats { mean: vec![0.5], std: vec![0.5] };
        let normed = normalize(&image, &stats).unwrap();
        assert_eq!(normed.pixels()[[0, 0, 0]], -1.0);
        assert_eq!(normed.pixels()[[0, 0, 1]], 1.0);
    }

    #[test]
    fn normalize_channel_mismatch() {
        let image = constant_image(5, 2, 2, 0.1);
        let stats = ChannelStats { mean: vec![0.0; 3], std: vec![1.0; 3] };
        assert!(matches!(normalize(&image, &stats), Err(ImagingError::ChannelMismatch { .. })));
    }

    #[test]
    fn grid_patch_counts() {
        let grid = GridConfig::new(256, 128).unwrap();
        assert_eq!(grid.patch_count(1024, 1024).unwrap(), 49);
        assert_eq!(grid.patch_count(512, 512).unwrap(), 9);
        let degenerate = GridConfig::new(256, 256).unwrap();
        assert_eq!(degenerate.patch_count(256, 256).unwrap(), 1);
    }

    #[test]
    fn grid_rejects_non_tiling_dims() {
        let grid = GridConfig::new(256, 128).unwrap();
        assert!(matches!(grid.patch_count(1000, 1024), Err(ImagingError::GridMismatch(_))));
        assert!(matches!(grid.patch_count(128, 1024), Err(ImagingError::GridMismatch(_))));
    }

    #[test]
    fn grid_rejects_stride_above_patch() {
        assert!(matches!(GridConfig::new(64, 65), Err(ImagingError::InvalidGrid(_))));
    }

    #[test]
    fn extract_single_degenerate_patch() {
        let image = ramp_image(1, 16, 16);
        let grid = GridConfig::new(16, 16).unwrap();
        let patches = extract_patches(&image, &grid).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].origin, (0, 0));
    }

    #[test]
    fn patch_order_is_row_major() {
        let image = ramp_image(1, 8, 8);
        let grid = GridConfig::new(4, 2).unwrap();
        let patches = extract_patches(&image, &grid).unwrap();
        let cols = grid.steps(8).unwrap();
        for patch in &patches {
            let row = patch.index / cols;
            let col = patch.index % cols;
            assert_eq!(patch.origin, (row * 2, col * 2));
        }
    }

    #[test]
    fn patches_reassemble_to_source() {
        let image = ramp_image(2, 12, 12);
        let grid = GridConfig::new(4, 2).unwrap();
        let patches = extract_patches(&image, &grid).unwrap();
        let mut covered = Array3::from_elem((2, 12, 12), f64::NAN);
        for patch in &patches {
            let (r0, c0) = patch.origin;
            for ch in 0..2 {
                for r in 0..4 {
                    for c in 0..4 {
                        let value = patch.pixels[[ch, r, c]];
                        let slot = &mut covered[[ch, r0 + r, c0 + c]];
                        if slot.is_nan() {
                            *slot = value;
                        } else {
                            assert_eq!(*slot, value);
                        }
                    }
                }
            }
        }
        for (dst, src) in covered.iter().zip(image.pixels().iter()) {
            assert!(!dst.is_nan());
            assert_eq!(*dst, f64::from(*src));
        }
    }

    #[test]
    fn center_crop_trims_borders() {
        let image = ramp_image(1, 10, 10);
        let cropped = center_crop(&image, 6, 6).unwrap();
        assert_eq!((cropped.height(), cropped.width()), (6, 6));
        assert_eq!(cropped.pixels()[[0, 0, 0]], image.pixels()[[0, 2, 2]]);
    }

    #[test]
    fn color_sources_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        image::RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30])).save(&path).unwrap();
        assert!(matches!(
            MultiChannelImage::load(&[path]),
            Err(ImagingError::UnsupportedFormat { .. })
        ));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let image = ramp_image(2, 9, 7);
        let mut paths = Vec::new();
        for c in 0..2 {
            let path = dir.path().join(format!("ch{c}.png"));
            write_channel_png(image.channel(c), &path).unwrap();
            paths.push(path);
        }
        let loaded = MultiChannelImage::load(&paths).unwrap();
        assert_eq!(loaded.channels(), 2);
        for (a, b) in loaded.pixels().iter().zip(image.pixels().iter()) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }

    proptest::proptest! {
        // Round trip: normalize then invert recovers pixels within 1e-6.
        #[test]
        fn normalize_round_trip(mean in -0.5f64..1.5, std in 1e-6f64..2.0, seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut pixels = Array3::zeros((1, 4, 4));
            pixels.mapv_inplace(|_: f32| rng.random::<f32>());
            let image = MultiChannelImage::new(pixels, vec!["c".into()]).unwrap();
            let stats = ChannelStats { mean: vec![mean], std: vec![std.max(STD_FLOOR)] };
            let normed = normalize(&image, &stats).unwrap();
            for (orig, n) in image.pixels().iter().zip(normed.pixels().iter()) {
                let recovered = f64::from(*n) * stats.std[0] + stats.mean[0];
                proptest::prop_assert!((recovered - f64::from(*orig)).abs() < 1e-6);
            }
        }
    }
}
