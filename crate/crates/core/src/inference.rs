//! Sliding-window prediction, flip test-time augmentation, ensembling and
//! pseudo-label generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AxisSet, Grid3, Shape3, Spacing};
use crate::network::{Checkpoint, Network};
use crate::parallel::map_indexed;
use crate::preprocess::{preprocess_case, stack_modalities, PreprocessConfig};
use crate::tensor::Tensor;
use crate::volume_io::{
    load_case, save_labelmap, DatasetManifest, LabelMap, ManifestEntry, Split, VolumeFormat,
};

/// Class probabilities (C, X, Y, Z) for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub probs: Tensor,
    pub spacing: Spacing,
    pub case_id: String,
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

impl ProbabilityMap {
    pub fn new(probs: Tensor, spacing: Spacing, case_id: impl Into<String>) -> Result<Self> {
        if probs.shape().len() != 4 || probs.shape()[0] == 0 {
            return Err(Error::shape("(C, X, Y, Z)", probs.shape()));
        }
        let m = Self {
            probs,
            spacing,
            case_id: case_id.into(),
        };
        if let Some((v, s)) = m.simplex_violation() {
            return Err(Error::InvalidArgument(format!(
                "case {}: voxel {v} is not a probability vector (sum {s})",
                m.case_id
            )));
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    /// First voxel whose channel vector is negative or does not sum to 1.
    fn simplex_violation(&self) -> Option<(usize, f64)> {
        let c = self.num_classes();
        let n = self.probs.numel() / c;
        let d = self.probs.data();
        (0..n).find_map(|v| {
            let mut s = 0.0;
            for k in 0..c {
                let p = d[k * n + v];
                if !(p >= 0.0) {
                    return Some((v, f64::NAN));
                }
                s += p;
            }
            ((s - 1.0).abs() > SIMPLEX_TOLERANCE).then_some((v, s))
        })
    }
}

/// Window origins along one axis: first at 0, last flush with the far
/// edge, evenly spaced with step at most `patch·(1 − overlap)`.
pub fn window_origins(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if extent <= patch {
        return vec![0];
    }
    let span = (extent - patch) as f64;
    let step = patch as f64 * (1.0 - overlap);
    let n = (span / step).ceil() as usize + 1;
    (0..n)
        .map(|i| (i as f64 * span / (n - 1) as f64).round() as usize)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowWeighting {
    #[default]
    Uniform,
    /// Center-weighted, σ = patch/8 per axis.
    Gaussian,
}

fn window_weights(patch: Shape3, weighting: WindowWeighting) -> Vec<f64> {
    let n = patch.iter().product();
    match weighting {
        WindowWeighting::Uniform => vec![1.0; n],
        WindowWeighting::Gaussian => {
            let axis = |p: usize| -> Vec<f64> {
                let c = (p as f64 - 1.0) / 2.0;
                let s = p as f64 / 8.0;
                (0..p).map(|i| (-0.5 * ((i as f64 - c) / s).powi(2)).exp()).collect()
            };
            let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
            let mut w = Vec::with_capacity(n);
            for a in &wx {
                for b in &wy {
                    for c in &wz {
                        w.push(a * b * c);
                    }
                }
            }
            w
        }
    }
}

fn spatial(t: &Tensor) -> Result<Shape3> {
    match *t.shape() {
        [_, x, y, z] => Ok([x, y, z]),
        _ => Err(Error::shape("(C, X, Y, Z)", t.shape())),
    }
}

/// Copies a window (edge-clamped) out of a channel-first volume.
fn extract(volume: &Tensor, origin: [i64; 3], patch: Shape3) -> Tensor {
    let s = volume.shape();
    let (ch, shape) = (s[0], [s[1], s[2], s[3]]);
    let vol: usize = shape.iter().product();
    let src = |a: usize, i: usize| (origin[a] + i as i64).clamp(0, shape[a] as i64 - 1) as usize;
    let mut out = Vec::with_capacity(ch * patch.iter().product::<usize>());
    for c in 0..ch {
        let chan = &volume.data()[c * vol..(c + 1) * vol];
        for x in 0..patch[0] {
            for y in 0..patch[1] {
                let row = (src(0, x) * shape[1] + src(1, y)) * shape[2];
                for z in 0..patch[2] {
                    out.push(chan[row + src(2, z)]);
                }
            }
        }
    }
    Tensor::from_vec(&[ch, patch[0], patch[1], patch[2]], out).expect("window size")
}

/// Tiles the volume with overlapping windows and averages the per-window
/// probabilities. Axes shorter than the patch are edge-padded
/// symmetrically and cropped back afterwards.
pub fn sliding_window<F>(
    predict: F,
    volume: &Tensor,
    patch: Shape3,
    overlap: f64,
    weighting: WindowWeighting,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let shape = spatial(volume)?;
    if patch.contains(&0) {
        return Err(Error::InvalidArgument(format!("degenerate patch {patch:?}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} outside [0, 1)")));
    }
    let padded: Shape3 = std::array::from_fn(|a| shape[a].max(patch[a]));
    let before: [i64; 3] = std::array::from_fn(|a| ((padded[a] - shape[a]) / 2) as i64);
    let origins: [Vec<usize>; 3] = std::array::from_fn(|a| window_origins(padded[a], patch[a], overlap));
    let weights = window_weights(patch, weighting);
    let pvol: usize = patch.iter().product();
    let vol: usize = shape.iter().product();

    let mut acc: Option<Vec<f64>> = None;
    let mut wsum = vec![0.0; vol];
    let mut classes = 0;
    for &ox in &origins[0] {
        for &oy in &origins[1] {
            for &oz in &origins[2] {
                let o = [ox as i64 - before[0], oy as i64 - before[1], oz as i64 - before[2]];
                let p = predict(&extract(volume, o, patch))?;
                if spatial(&p)? != patch {
                    return Err(Error::shape(patch, p.shape()));
                }
                classes = p.shape()[0];
                let acc = acc.get_or_insert_with(|| vec![0.0; classes * vol]);
                if acc.len() != classes * vol {
                    return Err(Error::shape(classes * vol, acc.len()));
                }
                // only voxels inside the unpadded volume accumulate
                for x in 0..patch[0] {
                    let vx = o[0] + x as i64;
                    if vx < 0 || vx >= shape[0] as i64 {
                        continue;
                    }
                    for y in 0..patch[1] {
                        let vy = o[1] + y as i64;
                        if vy < 0 || vy >= shape[1] as i64 {
                            continue;
                        }
                        for z in 0..patch[2] {
                            let vz = o[2] + z as i64;
                            if vz < 0 || vz >= shape[2] as i64 {
                                continue;
                            }
                            let pi = (x * patch[1] + y) * patch[2] + z;
                            let vi = (vx as usize * shape[1] + vy as usize) * shape[2] + vz as usize;
                            let w = weights[pi];
                            wsum[vi] += w;
                            for c in 0..classes {
                                acc[c * vol + vi] += w * p.data()[c * pvol + pi];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut acc = acc.expect("at least one window");
    for c in 0..classes {
        for (a, w) in acc[c * vol..(c + 1) * vol].iter_mut().zip(&wsum) {
            *a /= w;
        }
    }
    Tensor::from_vec(&[classes, shape[0], shape[1], shape[2]], acc)
}

/// The flip transforms used at test time: every subset of the allowed axes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TTAPlan {
    pub allowed: AxisSet,
    pub transforms: Vec<AxisSet>,
}

impl TTAPlan {
    pub fn new(allowed: AxisSet) -> Self {
        let transforms = (0..8u8)
            .map(AxisSet::from_bits)
            .filter(|t| t.is_subset_of(allowed))
            .collect();
        Self { allowed, transforms }
    }

    /// Identity only.
    pub fn singleton() -> Self {
        Self::new(AxisSet::NONE)
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.transforms.iter().map(|t| t.to_string()).collect()
    }
}

/// Averages predictions over the plan's flips, each mapped back to the
/// original frame.
pub fn tta_predict<F>(predict: F, volume: &Tensor, plan: &TTAPlan) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut acc: Option<Tensor> = None;
    for t in &plan.transforms {
        let axes = t.axes();
        let p = if axes.is_empty() {
            predict(volume)?
        } else {
            predict(&volume.flip_spatial(&axes))?.flip_spatial(&axes)
        };
        match &mut acc {
            None => acc = Some(p),
            Some(a) => {
                if a.shape() != p.shape() {
                    return Err(Error::shape(a.shape(), p.shape()));
                }
                a.add_assign(&p);
            }
        }
    }
    let mut acc = acc.ok_or_else(|| Error::InvalidArgument("empty TTA plan".into()))?;
    if plan.len() > 1 {
        acc.scale(1.0 / plan.len() as f64);
    }
    Ok(acc)
}

/// Voxelwise mean of same-shape tensors. Values are sorted per element
/// before summation, so the result does not depend on input order, and
/// identical inputs return that input exactly.
pub fn mean_tensors(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape(first.shape(), t.shape()));
        }
    }
    let n = items.len() as f64;
    let mut vals = vec![0.0; items.len()];
    let data = (0..first.numel())
        .map(|i| {
            for (v, t) in vals.iter_mut().zip(items) {
                *v = t.data()[i];
            }
            vals.sort_by(f64::total_cmp);
            let base = vals[0];
            base + vals[1..].iter().map(|v| v - base).sum::<f64>() / n
        })
        .collect();
    Tensor::from_vec(first.shape(), data)
}

/// Arithmetic mean of the members' probabilities.
pub fn ensemble(preds: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = preds.first().ok_or_else(|| Error::InvalidArgument("ensemble of zero predictions".into()))?;
    for p in preds {
        if p.case_id != first.case_id {
            return Err(Error::InvalidArgument(format!(
                "ensemble mixes cases {} and {}",
                first.case_id, p.case_id
            )));
        }
    }
    let probs = mean_tensors(&preds.iter().map(|p| &p.probs).collect::<Vec<_>>())?;
    Ok(ProbabilityMap {
        probs,
        spacing: first.spacing,
        case_id: first.case_id.clone(),
    })
}

/// Voxelwise argmax; ties go to the lowest class index.
pub fn argmax_labels(prob: &ProbabilityMap) -> Result<LabelMap> {
    let c = prob.num_classes();
    let shape = prob.shape();
    let n: usize = shape.iter().product();
    let d = prob.probs.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + v] > d[best * n + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(Grid3::new(shape, labels)?, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    pub patch_size: Shape3,
    pub overlap: f64,
    pub weighting: WindowWeighting,
    pub flip_axes: AxisSet,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            patch_size: [128, 160, 112],
            overlap: 0.5,
            weighting: WindowWeighting::Uniform,
            flip_axes: AxisSet::ALL,
        }
    }
}

impl InferenceOptions {
    pub fn plan(&self) -> TTAPlan {
        TTAPlan::new(self.flip_axes)
    }
}

/// Ensemble of TTA sliding-window predictions of every model on one
/// stacked (3, X, Y, Z) volume.
pub fn predict_volume(models: &[Network], input: &Tensor, opts: &InferenceOptions) -> Result<Tensor> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models".into()));
    }
    let plan = opts.plan();
    let per_model = models
        .iter()
        .map(|m| {
            tta_predict(
                |v| sliding_window(|w| m.predict(w), v, opts.patch_size, opts.overlap, opts.weighting),
                input,
                &plan,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    if per_model.len() == 1 {
        return Ok(per_model.into_iter().next().expect("one model"));
    }
    mean_tensors(&per_model.iter().collect::<Vec<_>>())
}

pub fn load_models(paths: &[PathBuf]) -> Result<Vec<Network>> {
    let nets = paths
        .iter()
        .map(|p| Checkpoint::load(p).map(|c| c.network()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = nets.first() {
        if nets.iter().any(|n| n.spec.num_classes != first.spec.num_classes) {
            return Err(Error::Config("models disagree on the class count".into()));
        }
    }
    Ok(nets)
}

/// Loads one manifest case, preprocesses it unless already done, and
/// predicts its probability map.
pub fn predict_case(
    models: &[Network],
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    preprocess: &PreprocessConfig,
    opts: &InferenceOptions,
) -> Result<ProbabilityMap> {
    let mut vol = load_case(manifest, entry)?;
    if !manifest.preprocessed {
        vol = preprocess_case(&vol, preprocess)?;
    }
    let input = stack_modalities(&vol)?;
    let probs = predict_volume(models, &input, opts)?;
    ProbabilityMap::new(probs, vol.spacing, &entry.case_id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoProvenance {
    pub case_id: String,
    pub models: Vec<PathBuf>,
    pub tta: TTAPlan,
    pub patch_size: Shape3,
    pub overlap: f64,
    pub weighting: WindowWeighting,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
    pub created_unix: u64,
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

/// Predicts hard labels for `case_ids` with the ensemble of `model_paths`,
/// writes them under `out_dir/labels` with a provenance sidecar each, and
/// returns a manifest of those cases with the new labels attached. Label
/// paths are relative to `out_dir`, so the manifest can be saved there.
pub fn generate_pseudo_labels(
    model_paths: &[PathBuf],
    manifest: &DatasetManifest,
    case_ids: &[String],
    preprocess: &PreprocessConfig,
    opts: &InferenceOptions,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    let models = load_models(model_paths)?;
    if models[0].spec.num_classes != manifest.num_classes {
        return Err(Error::Config(format!(
            "models predict {} classes, manifest has {}",
            models[0].spec.num_classes, manifest.num_classes
        )));
    }
    let label_dir = out_dir.join("labels");
    fs::create_dir_all(&label_dir).map_err(|e| Error::io(&label_dir, e))?;
    let created = timestamp();
    let base = manifest.absolutized();
    let entries = map_indexed(case_ids.len(), workers, |i| -> Result<ManifestEntry> {
        let id = &case_ids[i];
        let entry = base.entry(id).ok_or_else(|| Error::MissingCase(id.clone()))?;
        let prob = predict_case(&models, &base, entry, preprocess, opts)?;
        let labels = argmax_labels(&prob)?;
        let format = VolumeFormat::from_path(&entry.ct).unwrap_or(VolumeFormat::Nifti1);
        let rel = PathBuf::from("labels").join(format!("{id}{}", format.extension()));
        save_labelmap(&labels, prob.spacing, &out_dir.join(&rel), format)?;
        let prov = PseudoProvenance {
            case_id: id.clone(),
            models: model_paths.to_vec(),
            tta: opts.plan(),
            patch_size: opts.patch_size,
            overlap: opts.overlap,
            weighting: opts.weighting,
            created_unix: created,
        };
        let ppath = label_dir.join(format!("{id}.provenance.json"));
        fs::write(&ppath, serde_json::to_string_pretty(&prov)? + "\n").map_err(|e| Error::io(&ppath, e))?;
        Ok(ManifestEntry {
            label: Some(rel),
            split: Split::Test,
            ..entry.clone()
        })
    });
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = DatasetManifest::new(manifest.num_classes, entries)?;
    out.class_names = manifest.class_names.clone();
    out.preprocessed = manifest.preprocessed;
    out.set_base_dir(out_dir);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_predictor(c: usize, v: f64) -> impl Fn(&Tensor) -> Result<Tensor> {
        move |w: &Tensor| {
            let s = w.shape();
            Ok(Tensor::full(&[c, s[1], s[2], s[3]], v))
        }
    }

    #[test]
    fn origins_for_reference_dims() {
        let n: Vec<usize> = [(164, 128), (194, 160), (142, 112)]
            .iter()
            .map(|&(e, p)| window_origins(e, p, 0.5).len())
            .collect();
        assert_eq!(n, vec![2, 2, 2]);
        assert_eq!(window_origins(164, 128, 0.5), vec![0, 36]);
        assert_eq!(window_origins(10, 10, 0.5), vec![0]);
        assert_eq!(window_origins(10, 4, 0.5), vec![0, 2, 4, 6]);
    }

    #[test]
    fn single_window_passes_through() {
        let vol = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let f = |w: &Tensor| -> Result<Tensor> {
            let mut p = Vec::from(w.data());
            p.extend(w.data().iter().map(|v| 1.0 - v));
            Tensor::from_vec(&[2, 2, 2, 2], p)
        };
        let direct = f(&vol).unwrap();
        let out = sliding_window(f, &vol, [2, 2, 2], 0.5, WindowWeighting::Uniform).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn constant_predictor_gives_constant_output() {
        let vol = Tensor::zeros(&[3, 9, 7, 5]);
        for w in [WindowWeighting::Uniform, WindowWeighting::Gaussian] {
            let out = sliding_window(constant_predictor(2, 0.5), &vol, [4, 4, 4], 0.5, w).unwrap();
            assert_eq!(out.shape(), &[2, 9, 7, 5]);
            assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn plan_sizes() {
        assert_eq!(TTAPlan::new(AxisSet::ALL).len(), 8);
        let yz = TTAPlan::new(AxisSet::YZ);
        assert_eq!(yz.names(), vec!["id", "y", "z", "yz"]);
        assert_eq!(TTAPlan::singleton().len(), 1);
    }

    #[test]
    fn two_member_mean() {
        let a = Tensor::from_vec(&[2, 1, 1, 1], vec![0.6, 0.4]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 1, 1], vec![0.2, 0.8]).unwrap();
        let m = mean_tensors(&[&a, &b]).unwrap();
        assert!((m.data()[0] - 0.4).abs() < 1e-15 && (m.data()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = ProbabilityMap::new(Tensor::full(&[4, 2, 2, 2], 0.25), Spacing::default(), "c").unwrap();
        assert!(argmax_labels(&p).unwrap().grid().data().iter().all(|&l| l == 0));
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(ProbabilityMap::new(Tensor::full(&[2, 1, 1, 1], 0.7), Spacing::default(), "c").is_err());
        assert!(ProbabilityMap::new(Tensor::full(&[2, 1, 1], 0.5), Spacing::default(), "c").is_err());
    }
}
