//! Intensity preprocessing, modality stacking, patch sampling and
//! augmentation.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AxisSet, Grid3, ScalarGrid, Shape3};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume_io::{LabelMap, MultiModalVolume};

/// Sort-based quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Intensity values at quantiles `lo_q` and `hi_q` of the grid.
pub fn quantile_band(grid: &ScalarGrid, lo_q: f64, hi_q: f64) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("cannot clip an empty grid".into()));
    }
    if !(0.0..=1.0).contains(&lo_q) || !(0.0..=1.0).contains(&hi_q) || lo_q >= hi_q {
        return Err(Error::InvalidArgument(format!(
            "quantile band needs 0 <= lo < hi <= 1, got [{lo_q}, {hi_q}]"
        )));
    }
    let mut sorted = grid.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((quantile(&sorted, lo_q), quantile(&sorted, hi_q)))
}

pub fn clip_range(grid: &ScalarGrid, lo: f64, hi: f64) -> ScalarGrid {
    grid.map(|v| v.clamp(lo, hi))
}

/// Clamps intensities to the `[lo_q, hi_q]` quantile band of the grid.
pub fn clip_ct(grid: &ScalarGrid, lo_q: f64, hi_q: f64) -> Result<ScalarGrid> {
    let (lo, hi) = quantile_band(grid, lo_q, hi_q)?;
    Ok(clip_range(grid, lo, hi))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    pub grid: ScalarGrid,
    /// Input had zero variance; output is all zeros.
    pub degenerate: bool,
}

/// Zero-mean, unit population-std values. Zero variance yields zeros and
/// `true`.
pub fn znormalize_values(values: &[f64]) -> (Vec<f64>, bool) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - mean) / std).collect(), false)
}

pub fn znormalize(grid: &ScalarGrid) -> Result<Standardized> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("normalization needs at least 2 voxels".into()));
    }
    let (values, degenerate) = znormalize_values(grid.data());
    if degenerate {
        log::warn!("zero-variance grid of shape {:?}; normalized to zeros", grid.shape());
    }
    Ok(Standardized {
        grid: Grid3::new(grid.shape(), values)?,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub clip_ct: bool,
    pub clip_lo_q: f64,
    pub clip_hi_q: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_ct: true,
            clip_lo_q: 0.005,
            clip_hi_q: 0.995,
        }
    }
}

/// CT clipping followed by per-modality standardization of one case.
pub fn preprocess_case(volume: &MultiModalVolume, cfg: &PreprocessConfig) -> Result<MultiModalVolume> {
    let ct = if cfg.clip_ct {
        clip_ct(&volume.ct, cfg.clip_lo_q, cfg.clip_hi_q)?
    } else {
        volume.ct.clone()
    };
    let ct = znormalize(&ct)?.grid;
    let t1ce = znormalize(&volume.t1ce)?.grid;
    let flair = znormalize(&volume.flair)?.grid;
    MultiModalVolume::new(volume.case_id.clone(), ct, t1ce, flair, volume.spacing)
}

/// Channel-first (3, X, Y, Z) input in the order CT, T1ce, FLAIR.
pub fn stack_modalities(volume: &MultiModalVolume) -> Result<Tensor> {
    let shape = volume.shape();
    let mut data = Vec::with_capacity(3 * volume.ct.len());
    for m in volume.modalities() {
        if m.shape() != shape {
            return Err(Error::shape(shape, m.shape()));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::from_vec(&[3, shape[0], shape[1], shape[2]], data)
}

/// One cropped training example.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// (channels, px, py, pz)
    pub input: Tensor,
    pub target: Grid3<u8>,
    /// Window origin in volume coordinates; negative when edge padding was used.
    pub origin: [i64; 3],
}

#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// (B, channels, px, py, pz)
    pub inputs: Tensor,
    pub targets: Vec<Grid3<u8>>,
    pub origins: Vec<[i64; 3]>,
}

impl PatchBatch {
    pub fn from_samples(samples: Vec<PatchSample>) -> Result<Self> {
        let inputs = Tensor::stack(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let origins = samples.iter().map(|s| s.origin).collect();
        let targets = samples.into_iter().map(|s| s.target).collect();
        Ok(Self {
            inputs,
            targets,
            origins,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn spatial_shape(t: &Tensor) -> Result<Shape3> {
    match *t.shape() {
        [_, x, y, z] => Ok([x, y, z]),
        _ => Err(Error::shape("(C, X, Y, Z)", t.shape())),
    }
}

/// Crops a `patch`-sized window from a channel-first volume and its labels.
///
/// Axes shorter than the patch are edge-padded symmetrically. With
/// probability `fg_bias` the window is forced to contain a random
/// foreground voxel (when any exists).
pub fn sample_patch(
    input: &Tensor,
    labels: &LabelMap,
    patch: Shape3,
    rng: &mut Rng,
    fg_bias: f64,
) -> Result<PatchSample> {
    let shape = spatial_shape(input)?;
    if labels.shape() != shape {
        return Err(Error::shape(shape, labels.shape()));
    }
    if patch.contains(&0) {
        return Err(Error::InvalidArgument(format!("degenerate patch {patch:?}")));
    }
    let padded: Shape3 = std::array::from_fn(|a| shape[a].max(patch[a]));
    let before: [i64; 3] = std::array::from_fn(|a| ((padded[a] - shape[a]) / 2) as i64);

    let force_fg = rng.random::<f64>() < fg_bias;
    let fg: Vec<usize> = if force_fg {
        labels
            .grid()
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    let origin_padded: [usize; 3] = if !fg.is_empty() {
        let v = labels.grid().coords(fg[rng.random_range(0..fg.len())]);
        std::array::from_fn(|a| {
            let vp = v[a] + before[a] as usize;
            let lo = (vp + 1).saturating_sub(patch[a]);
            let hi = vp.min(padded[a] - patch[a]);
            rng.random_range(lo..=hi)
        })
    } else {
        std::array::from_fn(|a| rng.random_range(0..=padded[a] - patch[a]))
    };
    let origin: [i64; 3] = std::array::from_fn(|a| origin_padded[a] as i64 - before[a]);
    Ok(crop(input, labels.grid(), origin, patch))
}

/// Extracts a window at `origin` (volume coordinates) with edge clamping.
pub fn crop(input: &Tensor, labels: &Grid3<u8>, origin: [i64; 3], patch: Shape3) -> PatchSample {
    let shape = labels.shape();
    let channels = input.shape()[0];
    let vol = shape.iter().product::<usize>();
    let src = |a: usize, i: usize| (origin[a] + i as i64).clamp(0, shape[a] as i64 - 1) as usize;
    let mut data = Vec::with_capacity(channels * patch.iter().product::<usize>());
    for c in 0..channels {
        let chan = &input.data()[c * vol..(c + 1) * vol];
        for x in 0..patch[0] {
            for y in 0..patch[1] {
                for z in 0..patch[2] {
                    data.push(chan[labels.index(src(0, x), src(1, y), src(2, z))]);
                }
            }
        }
    }
    let target = Grid3::from_fn(patch, |x, y, z| labels.get(src(0, x), src(1, y), src(2, z)));
    PatchSample {
        input: Tensor::from_vec(&[channels, patch[0], patch[1], patch[2]], data)
            .expect("crop size is consistent"),
        target,
        origin,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Maximum absolute rotation per axis, degrees.
    pub rotation_deg: f64,
    pub rotation_prob: f64,
    pub scale: Range,
    pub scale_prob: f64,
    /// Filled from the run's flip-axes setting (shared with test-time flips).
    #[serde(skip, default = "all_axes")]
    pub mirror_axes: AxisSet,
    pub mirror_prob: f64,
    pub gamma: Range,
    pub gamma_prob: f64,
    /// Standard deviation of the additive offset, as a fraction of the channel std.
    pub brightness_sigma: f64,
    pub brightness_prob: f64,
}

fn all_axes() -> AxisSet {
    AxisSet::ALL
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            rotation_deg: 30.0,
            rotation_prob: 0.2,
            scale: Range::new(0.85, 1.25),
            scale_prob: 0.2,
            mirror_axes: AxisSet::ALL,
            mirror_prob: 0.5,
            gamma: Range::new(0.7, 1.5),
            gamma_prob: 0.3,
            brightness_sigma: 0.1,
            brightness_prob: 0.15,
        }
    }
}

impl AugmentationPolicy {
    /// Policy that never changes its input.
    pub fn disabled() -> Self {
        Self {
            rotation_prob: 0.0,
            scale_prob: 0.0,
            mirror_prob: 0.0,
            gamma_prob: 0.0,
            brightness_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.rotation_prob,
            self.scale_prob,
            self.mirror_prob,
            self.gamma_prob,
            self.brightness_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("augmentation probabilities must lie in [0,1]: {probs:?}")));
        }
        for (name, r) in [("scale", self.scale), ("gamma", self.gamma)] {
            if !(r.lo <= r.hi) || r.lo <= 0.0 {
                return Err(Error::Config(format!("{name} range [{}, {}] is not well ordered and positive", r.lo, r.hi)));
            }
        }
        if !(self.rotation_deg >= 0.0) || !(self.brightness_sigma >= 0.0) {
            return Err(Error::Config("rotation and brightness magnitudes must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Min-max rescales to [0, 1], raises to `gamma`, and maps back.
pub fn apply_gamma(values: &mut [f64], gamma: f64) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return;
    }
    for v in values.iter_mut() {
        *v = ((*v - lo) / span).powf(gamma) * span + lo;
    }
}

fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Resamples every channel trilinearly and the target by nearest neighbour
/// through `src = center + R^T (dst - center) / scale`.
fn resample(sample: &PatchSample, rot: [[f64; 3]; 3], scale: f64) -> PatchSample {
    let shape = sample.target.shape();
    let channels = sample.input.shape()[0];
    let vol: usize = shape.iter().product();
    let center: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; channels * vol];
    let mut target = Grid3::filled(shape, 0u8);
    let clampi = |v: f64, a: usize| v.clamp(0.0, shape[a] as f64 - 1.0);
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let d = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
                let s: [f64; 3] = std::array::from_fn(|a| {
                    let r = rot[0][a] * d[0] + rot[1][a] * d[1] + rot[2][a] * d[2];
                    clampi(center[a] + r / scale, a)
                });
                let dst = target.index(x, y, z);
                let n = s.map(|v| v.round() as usize);
                target.data_mut()[dst] = sample.target.get(n[0], n[1], n[2]);
                let f = s.map(|v| v.floor() as usize);
                let t: [f64; 3] = std::array::from_fn(|a| s[a] - f[a] as f64);
                let c1: [usize; 3] = std::array::from_fn(|a| (f[a] + 1).min(shape[a] - 1));
                for c in 0..channels {
                    let chan = &sample.input.data()[c * vol..(c + 1) * vol];
                    let at = |x, y, z| chan[target.index(x, y, z)];
                    let mut acc = 0.0;
                    for (ix, wx) in [(f[0], 1.0 - t[0]), (c1[0], t[0])] {
                        for (iy, wy) in [(f[1], 1.0 - t[1]), (c1[1], t[1])] {
                            for (iz, wz) in [(f[2], 1.0 - t[2]), (c1[2], t[2])] {
                                let w = wx * wy * wz;
                                if w != 0.0 {
                                    acc += w * at(ix, iy, iz);
                                }
                            }
                        }
                    }
                    out[c * vol + dst] = acc;
                }
            }
        }
    }
    PatchSample {
        input: Tensor::from_vec(sample.input.shape(), out).expect("same shape"),
        target,
        origin: sample.origin,
    }
}

/// Applies the stochastic augmentations of `policy`. Spatial transforms act
/// on inputs and targets alike; intensity transforms on inputs only.
pub fn augment(sample: &PatchSample, policy: &AugmentationPolicy, rng: &mut Rng) -> PatchSample {
    let mut out = sample.clone();

    let rotate = rng.random::<f64>() < policy.rotation_prob;
    let angles: [f64; 3] = if rotate {
        std::array::from_fn(|_| {
            let r = policy.rotation_deg.to_radians();
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        })
    } else {
        [0.0; 3]
    };
    let zoom = rng.random::<f64>() < policy.scale_prob;
    let scale = if zoom { policy.scale.sample(rng) } else { 1.0 };
    if rotate || zoom {
        out = resample(&out, rotation_matrix(angles), scale);
    }

    for axis in policy.mirror_axes.axes() {
        if rng.random::<f64>() < policy.mirror_prob {
            out.input = out.input.flip_spatial(&[axis]);
            out.target = out.target.flipped(axis);
        }
    }

    let channels = out.input.shape()[0];
    let vol = out.target.len();
    for c in 0..channels {
        if rng.random::<f64>() < policy.gamma_prob {
            let g = policy.gamma.sample(rng);
            apply_gamma(&mut out.input.data_mut()[c * vol..(c + 1) * vol], g);
        }
        if rng.random::<f64>() < policy.brightness_prob && policy.brightness_sigma > 0.0 {
            let chan = &mut out.input.data_mut()[c * vol..(c + 1) * vol];
            let mean = chan.iter().sum::<f64>() / vol as f64;
            let std = (chan.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vol as f64).sqrt();
            if std > 0.0 {
                let offset = Normal::new(0.0, policy.brightness_sigma * std)
                    .expect("positive sigma")
                    .sample(rng);
                chan.iter_mut().for_each(|v| *v += offset);
            }
        }
    }
    out
}
