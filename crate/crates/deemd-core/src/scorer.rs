//! The trainable instance classifier: a small convolutional network mapping
//! a normalized patch to an infection probability, with the class-weighted
//! binary cross-entropy loss and analytic gradients.
//!
//! The reference architecture is three 3x3 stride-2 conv blocks with ReLU,
//! global average pooling, and an affine head feeding a sigmoid. Heavier
//! backbones can be substituted behind the same interface; everything
//! downstream only sees probabilities.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are kept inside `[CLAMP, 1 - CLAMP]` so the loss stays
/// finite.
pub const PROB_CLAMP: f64 = 1e-7;

/// Relative-error floor used when comparing gradients: below this magnitude
/// the comparison is effectively absolute.
const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("patch shape {got:?} does not match architecture input {expected:?}")]
    ShapeMismatch { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("probability {0} outside (0, 1)")]
    DomainError(f64),
    #[error("loss weights must be positive and finite")]
    InvalidWeights,
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint version {0} not supported")]
    BadCheckpointVersion(u32),
    #[error("checkpoint parameter count {got} does not match architecture ({expected})")]
    BadCheckpointParams { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Network shape descriptor. Convolutions are square, stride 2, padding 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
}

impl Architecture {
    /// The reference scorer: conv channels 8 -> 16 -> 32, 3x3 kernels.
    pub fn reference(in_channels: usize, input_size: usize) -> Self {
        Architecture { in_channels, input_size, conv_channels: vec![8, 16, 32], kernel: 3 }
    }

    fn conv_out(size: usize) -> usize {
        // kernel 3, stride 2, padding 1
        (size - 1) / 2 + 1
    }

    fn layers(&self) -> Vec<LayerDims> {
        let mut layers = Vec::with_capacity(self.conv_channels.len());
        let mut in_c = self.in_channels;
        let mut size = self.input_size;
        let mut offset = 0usize;
        let k2 = self.kernel * self.kernel;
        for &out_c in &self.conv_channels {
            let out_size = Self::conv_out(size);
            layers.push(LayerDims {
                in_c,
                out_c,
                in_size: size,
                out_size,
                weight_offset: offset,
                bias_offset: offset + out_c * in_c * k2,
            });
            offset += out_c * in_c * k2 + out_c;
            in_c = out_c;
            size = out_size;
        }
        layers
    }

    /// Offset of the affine head weights in the flat parameter vector.
    fn head_offset(&self) -> usize {
        self.layers().last().map(|l| l.bias_offset + l.out_c).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        let last_c = *self.conv_channels.last().expect("at least one conv block");
        self.head_offset() + last_c + 1
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerDims {
    in_c: usize,
    out_c: usize,
    in_size: usize,
    out_size: usize,
    weight_offset: usize,
    bias_offset: usize,
}

/// Class weights for the binary cross-entropy loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_plus: f64,
    pub w_minus: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { w_plus: 1.0, w_minus: 1.0 }
    }
}

impl LossConfig {
    pub fn new(w_plus: f64, w_minus: f64) -> Result<Self, ScorerError> {
        if !(w_plus.is_finite() && w_minus.is_finite() && w_plus > 0.0 && w_minus > 0.0) {
            return Err(ScorerError::InvalidWeights);
        }
        Ok(LossConfig { w_plus, w_minus })
    }

    /// Inverse class-frequency weights, normalized to mean 1.
    pub fn inverse_frequency(positives: usize, negatives: usize) -> Result<Self, ScorerError> {
        if positives == 0 || negatives == 0 {
            return Err(ScorerError::InvalidWeights);
        }
        let raw_plus = 1.0 / positives as f64;
        let raw_minus = 1.0 / negatives as f64;
        let scale = 2.0 / (raw_plus + raw_minus);
        LossConfig::new(raw_plus * scale, raw_minus * scale)
    }
}

/// Class-weighted binary cross-entropy:
/// `-(w+ . y . ln mu + w- . (1-y) . ln(1-mu))`.
pub fn weighted_bce(mu: f64, y: bool, cfg: &LossConfig) -> Result<f64, ScorerError> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(ScorerError::DomainError(mu));
    }
    Ok(if y { -cfg.w_plus * mu.ln() } else { -cfg.w_minus * (1.0 - mu).ln() })
}

/// Outcome of a numeric gradient verification run.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Relative disagreement between two gradient components; absolute below
/// the floor so dead-unit noise does not dominate.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// The instance classifier: flat parameter vector plus its architecture.
#[derive(Clone, Debug)]
pub struct ScorerModel {
    arch: Architecture,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    arch: Architecture,
    params: Vec<f64>,
    config_hash: String,
}

impl ScorerModel {
    /// Fan-in scaled uniform initialization with zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.param_count()];
        let k2 = arch.kernel * arch.kernel;
        for layer in arch.layers() {
            let bound = 1.0 / ((layer.in_c * k2) as f64).sqrt();
            for w in &mut params[layer.weight_offset..layer.bias_offset] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let head = arch.head_offset();
        let last_c = *arch.conv_channels.last().unwrap();
        let bound = 1.0 / (last_c as f64).sqrt();
        for w in &mut params[head..head + last_c] {
            *w = rng.random_range(-bound..bound);
        }
        ScorerModel { arch, params }
    }

    /// All-zero parameters; scores every patch at exactly 0.5.
    pub fn zeroed(arch: Architecture) -> Self {
        let params = vec![0.0; arch.param_count()];
        ScorerModel { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, ScorerError> {
        if params.len() != arch.param_count() {
            return Err(ScorerError::BadCheckpointParams {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(ScorerModel { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn expect_shape(&self, patch: &Array3<f64>) -> Result<(), ScorerError> {
        let expected = (self.arch.in_channels, self.arch.input_size, self.arch.input_size);
        if patch.dim() != expected {
            return Err(ScorerError::ShapeMismatch { expected, got: patch.dim() });
        }
        Ok(())
    }

    /// Infection probability for one patch, strictly inside (0, 1).
    pub fn score_patch(&self, patch: &Array3<f64>) -> Result<f64, ScorerError> {
        self.expect_shape(patch)?;
        let cache = self.forward(patch);
        Ok(cache.mu)
    }

    fn logit_clamp() -> f64 {
        ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln()
    }

    fn forward(&self, patch: &Array3<f64>) -> ForwardCache {
        let layers = self.arch.layers();
        let k = self.arch.kernel;
        let standard = patch.as_standard_layout();
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
        activations.push(standard.as_slice().expect("standard layout").to_vec());
        let mut pre_acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());

        for layer in &layers {
            let input = activations.last().unwrap();
            let (pre, act) = self.conv_layer_forward(layer, input, k);
            pre_acts.push(pre);
            activations.push(act);
        }

        let last = layers.last().unwrap();
        let area = (last.out_size * last.out_size) as f64;
        let features = activations.last().unwrap();
        let mut gap = vec![0.0; last.out_c];
        for (c, slot) in gap.iter_mut().enumerate() {
            let plane =
                &features[c * last.out_size * last.out_size..(c + 1) * last.out_size * last.out_size];
            *slot = plane.iter().sum::<f64>() / area;
        }

        let head = self.arch.head_offset();
        let head_w = &self.params[head..head + last.out_c];
        let bias = self.params[head + last.out_c];
        let raw_logit: f64 = head_w.iter().zip(&gap).map(|(w, g)| w * g).sum::<f64>() + bias;
        let clamp = Self::logit_clamp();
        let logit = raw_logit.clamp(-clamp, clamp);
        let mu = 1.0 / (1.0 + (-logit).exp());
        ForwardCache { activations, pre_acts, gap, raw_logit, mu }
    }

    fn conv_layer_forward(&self, layer: &LayerDims, input: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
        let (ih, oh) = (layer.in_size, layer.out_size);
        let in_plane = ih * ih;
        let out_plane = oh * oh;
        let mut pre = vec![0.0; layer.out_c * out_plane];
        let mut act = vec![0.0; layer.out_c * out_plane];
        let k2 = k * k;
        for o in 0..layer.out_c {
            let bias = self.params[layer.bias_offset + o];
            let w_base = layer.weight_offset + o * layer.in_c * k2;
            for oy in 0..oh {
                let iy0 = (oy * 2) as isize - 1;
                for ox in 0..oh {
                    let ix0 = (ox * 2) as isize - 1;
                    let mut acc = bias;
                    for i in 0..layer.in_c {
                        let plane = &input[i * in_plane..(i + 1) * in_plane];
                        let w = &self.params[w_base + i * k2..w_base + (i + 1) * k2];
                        for ky in 0..k {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * ih..(iy as usize + 1) * ih];
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= ih as isize {
                                    continue;
                                }
                                acc += w[ky * k + kx] * row[ix as usize];
                            }
                        }
                    }
                    let idx = o * out_plane + oy * oh + ox;
                    pre[idx] = acc;
                    act[idx] = acc.max(0.0);
                }
            }
        }
        (pre, act)
    }

    /// Gradient of one sample's weighted BCE with respect to all parameters.
    fn sample_gradient(&self, patch: &Array3<f64>, y: bool, cfg: &LossConfig) -> Vec<f64> {
        let cache = self.forward(patch);
        let layers = self.arch.layers();
        let k = self.arch.kernel;
        let k2 = k * k;
        let mut grad = vec![0.0; self.params.len()];

        // d loss / d logit; zero when the pre-activation sits in the clamp.
        let clamp = Self::logit_clamp();
        let dlogit = if cache.raw_logit.abs() >= clamp {
            0.0
        } else if y {
            cfg.w_plus * (cache.mu - 1.0)
        } else {
            cfg.w_minus * cache.mu
        };

        let last = *layers.last().unwrap();
        let head = self.arch.head_offset();
        let head_w = &self.params[head..head + last.out_c];
        for (c, g) in cache.gap.iter().enumerate() {
            grad[head + c] = dlogit * g;
        }
        grad[head + last.out_c] = dlogit;

        // Backprop through global average pooling.
        let area = (last.out_size * last.out_size) as f64;
        let mut d_act = vec![0.0; last.out_c * last.out_size * last.out_size];
        for c in 0..last.out_c {
            let d = dlogit * head_w[c] / area;
            for slot in
                &mut d_act[c * last.out_size * last.out_size..(c + 1) * last.out_size * last.out_size]
            {
                *slot = d;
            }
        }

        for (l, layer) in layers.iter().enumerate().rev() {
            let input = &cache.activations[l];
            let pre = &cache.pre_acts[l];
            let (ih, oh) = (layer.in_size, layer.out_size);
            let in_plane = ih * ih;
            let out_plane = oh * oh;
            let mut d_input = vec![0.0; layer.in_c * in_plane];
            for o in 0..layer.out_c {
                let w_base = layer.weight_offset + o * layer.in_c * k2;
                for oy in 0..oh {
                    let iy0 = (oy * 2) as isize - 1;
                    for ox in 0..oh {
                        let idx = o * out_plane + oy * oh + ox;
                        if pre[idx] <= 0.0 {
                            continue; // ReLU gate closed
                        }
                        let dz = d_act[idx];
                        if dz == 0.0 {
                            continue;
                        }
                        grad[layer.bias_offset + o] += dz;
                        let ix0 = (ox * 2) as isize - 1;
                        for i in 0..layer.in_c {
                            let plane = &input[i * in_plane..(i + 1) * in_plane];
                            let d_plane = &mut d_input[i * in_plane..(i + 1) * in_plane];
                            let w = &self.params[w_base + i * k2..w_base + (i + 1) * k2];
                            let gw = &mut grad[w_base + i * k2..w_base + (i + 1) * k2];
                            for ky in 0..k {
                                let iy = iy0 + ky as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let row_base = iy as usize * ih;
                                for kx in 0..k {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= ih as isize {
                                        continue;
                                    }
                                    let pos = row_base + ix as usize;
                                    gw[ky * k + kx] += dz * plane[pos];
                                    d_plane[pos] += dz * w[ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
            d_act = d_input;
        }
        grad
    }

    /// Gradient of the mean weighted BCE over a batch. Deterministic: items
    /// are reduced in batch order.
    pub fn gradient(
        &self,
        batch: &[(Array3<f64>, bool)],
        cfg: &LossConfig,
    ) -> Result<Vec<f64>, ScorerError> {
        if batch.is_empty() {
            return Err(ScorerError::EmptyBatch);
        }
        for (patch, _) in batch {
            self.expect_shape(patch)?;
        }
        let per_item: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|(patch, y)| self.sample_gradient(patch, *y, cfg))
            .collect();
        let mut total = vec![0.0; self.params.len()];
        for item in &per_item {
            for (t, g) in total.iter_mut().zip(item) {
                *t += g;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        total.iter_mut().for_each(|g| *g *= scale);
        Ok(total)
    }

    /// Mean weighted BCE over a batch.
    pub fn batch_loss(
        &self,
        batch: &[(Array3<f64>, bool)],
        cfg: &LossConfig,
    ) -> Result<f64, ScorerError> {
        if batch.is_empty() {
            return Err(ScorerError::EmptyBatch);
        }
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|(patch, y)| {
                self.expect_shape(patch)?;
                weighted_bce(self.forward(patch).mu, *y, cfg)
            })
            .collect::<Result<_, _>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Central finite differences of the batch loss for the given parameter
    /// indices.
    pub fn finite_difference_gradient(
        &self,
        batch: &[(Array3<f64>, bool)],
        cfg: &LossConfig,
        indices: &[usize],
        step: f64,
    ) -> Result<Vec<f64>, ScorerError> {
        let mut numeric = Vec::with_capacity(indices.len());
        let mut probe = self.clone();
        for &i in indices {
            let original = probe.params[i];
            probe.params[i] = original + step;
            let plus = probe.batch_loss(batch, cfg)?;
            probe.params[i] = original - step;
            let minus = probe.batch_loss(batch, cfg)?;
            probe.params[i] = original;
            numeric.push((plus - minus) / (2.0 * step));
        }
        Ok(numeric)
    }

    /// Compares analytic gradients against central finite differences on a
    /// deterministic subsample of `min(max_params, n)` parameters.
    pub fn check_gradients(
        &self,
        patch: &Array3<f64>,
        y: bool,
        cfg: &LossConfig,
        tolerance: f64,
        max_params: usize,
    ) -> Result<GradCheckReport, ScorerError> {
        self.expect_shape(patch)?;
        let n = self.params.len();
        let take = max_params.max(1).min(n);
        // Evenly spaced indices touch every layer.
        let indices: Vec<usize> = (0..take).map(|i| i * n / take).collect();
        let batch = vec![(patch.clone(), y)];
        let analytic = self.gradient(&batch, cfg)?;
        let numeric = self.finite_difference_gradient(&batch, cfg, &indices, 1e-4)?;
        let max_rel_err = indices
            .iter()
            .zip(&numeric)
            .map(|(&i, &num)| relative_error(analytic[i], num))
            .fold(0.0f64, f64::max);
        Ok(GradCheckReport { max_rel_err, checked: indices.len(), pass: max_rel_err <= tolerance })
    }

    /// Writes a versioned JSON checkpoint.
    pub fn save_checkpoint(&self, path: &Path, config_hash: &str) -> Result<(), ScorerError> {
        let file = CheckpointFile {
            version: 1,
            arch: self.arch.clone(),
            params: self.params.clone(),
            config_hash: config_hash.to_string(),
        };
        let bytes = serde_json::to_vec(&file)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Loads a checkpoint, returning the model and its training config hash.
    pub fn load_checkpoint(path: &Path) -> Result<(ScorerModel, String), ScorerError> {
        let bytes = std::fs::read(path)?;
        let file: CheckpointFile = serde_json::from_slice(&bytes)?;
        if file.version != 1 {
            return Err(ScorerError::BadCheckpointVersion(file.version));
        }
        let model = ScorerModel::from_params(file.arch, file.params)?;
        Ok((model, file.config_hash))
    }
}

struct ForwardCache {
    activations: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
    gap: Vec<f64>,
    raw_logit: f64,
    mu: f64,
}
