//! Deterministic multi-modal phantoms with exact label maps.
//!
//! The default layout is mirror-symmetric in x: a centered sphere and box,
//! plus a pair of identical-looking spheres on either side of the
//! x-midplane that carry different classes. Telling the pair apart needs
//! absolute position, which is what x-flip test-time augmentation scrambles.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, ScalarGrid, Shape3, Spacing};
use crate::rng::{seeded, stream, Rng};
use crate::volume_io::{
    save_labelmap, save_volume, DType, DatasetManifest, LabelMap, ManifestEntry, MultiModalVolume, Split,
    VolumeFormat,
};

pub const DEFAULT_NUM_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomShape {
    Sphere {
        center: [f64; 3],
        radius: f64,
        class_id: u8,
    },
    /// Half-open voxel box `min..max`.
    Box {
        min: [usize; 3],
        max: [usize; 3],
        class_id: u8,
    },
    /// `center` is the left sphere; its partner sits at the x-mirrored
    /// position `X - 1 - center[0]`.
    MirroredPair {
        center: [f64; 3],
        radius: f64,
        left_class: u8,
        right_class: u8,
    },
}

impl PhantomShape {
    fn classes(&self) -> Vec<u8> {
        match *self {
            PhantomShape::Sphere { class_id, .. } | PhantomShape::Box { class_id, .. } => vec![class_id],
            PhantomShape::MirroredPair {
                left_class, right_class, ..
            } => vec![left_class, right_class],
        }
    }

    /// Class at voxel (x, y, z), if this shape covers it.
    fn class_at(&self, p: [usize; 3], size: Shape3) -> Option<u8> {
        let inside = |c: [f64; 3], r: f64| {
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum();
            d2 <= r * r
        };
        match *self {
            PhantomShape::Sphere {
                center,
                radius,
                class_id,
            } => inside(center, radius).then_some(class_id),
            PhantomShape::Box { min, max, class_id } => {
                (0..3).all(|a| p[a] >= min[a] && p[a] < max[a]).then_some(class_id)
            }
            PhantomShape::MirroredPair {
                center,
                radius,
                left_class,
                right_class,
            } => {
                let mirrored = [size[0] as f64 - 1.0 - center[0], center[1], center[2]];
                if inside(center, radius) {
                    Some(left_class)
                } else if inside(mirrored, radius) {
                    Some(right_class)
                } else {
                    None
                }
            }
        }
    }

    fn fits(&self, size: Shape3) -> bool {
        let sphere_fits = |c: [f64; 3], r: f64| (0..3).all(|a| c[a] - r >= 0.0 && c[a] + r <= size[a] as f64 - 1.0);
        match *self {
            PhantomShape::Sphere { center, radius, .. } => radius > 0.0 && sphere_fits(center, radius),
            PhantomShape::Box { min, max, .. } => (0..3).all(|a| min[a] < max[a] && max[a] <= size[a]),
            PhantomShape::MirroredPair { center, radius, .. } => {
                radius > 0.0 && sphere_fits(center, radius) && center[0] + radius < (size[0] as f64 - 1.0) / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: Shape3,
    pub spacing: Spacing,
    pub num_classes: usize,
    pub seed: u64,
    pub shapes: Vec<PhantomShape>,
    /// Base tissue intensity per class (background first).
    pub tissue: Vec<f64>,
    /// Extra FLAIR intensity on structure boundaries.
    pub rim_boost: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::standard([64, 64, 64], 0)
    }
}

impl PhantomSpec {
    /// Centered sphere (1), centered box (2) and a mirrored pair (3 left,
    /// 4 right), all scaled to `size`.
    pub fn standard(size: Shape3, seed: u64) -> Self {
        let [x, y, z] = size.map(|v| v as f64);
        let m = x.min(y).min(z);
        let bx = (0.38 * x).round() as usize;
        Self {
            size,
            spacing: Spacing::default(),
            num_classes: DEFAULT_NUM_CLASSES,
            seed,
            shapes: vec![
                PhantomShape::Sphere {
                    center: [(x - 1.0) / 2.0, 0.32 * y, 0.5 * (z - 1.0)],
                    radius: 0.14 * m,
                    class_id: 1,
                },
                PhantomShape::Box {
                    min: [bx, (0.62 * y).round() as usize, (0.35 * z).round() as usize],
                    max: [size[0] - bx, (0.82 * y).round() as usize, (0.65 * z).round() as usize],
                    class_id: 2,
                },
                PhantomShape::MirroredPair {
                    center: [0.22 * x, 0.45 * y, 0.5 * (z - 1.0)],
                    radius: 0.1 * m,
                    left_class: 3,
                    right_class: 4,
                },
            ],
            tissue: vec![0.0, 1.0, 0.5, 0.75, 0.75],
            rim_boost: 0.5,
            noise_sigma: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.size.contains(&0) {
            return fail(format!("phantom size {:?} has a zero extent", self.size));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!("num_classes {} outside [2, 256]", self.num_classes));
        }
        if self.tissue.len() != self.num_classes {
            return fail(format!("need {} tissue intensities, got {}", self.num_classes, self.tissue.len()));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be nonnegative".into());
        }
        let mut seen = Vec::new();
        for (i, s) in self.shapes.iter().enumerate() {
            if !s.fits(self.size) {
                return fail(format!("shape {i} does not fit in {:?}: {s:?}", self.size));
            }
            for c in s.classes() {
                if c == 0 || c as usize >= self.num_classes || seen.contains(&c) {
                    return fail(format!("shape {i} class {c} is background, out of range or reused"));
                }
                seen.push(c);
            }
        }
        Ok(())
    }

    /// Per-case variation: radii within ±10%, y/z centers within ±2 voxels.
    /// x placement keeps its mirror symmetry.
    pub fn jittered(&self, rng: &mut Rng, seed: u64) -> Self {
        let mut out = self.clone();
        out.seed = seed;
        for s in &mut out.shapes {
            let shift = |rng: &mut Rng| rng.random_range(-2i64..=2);
            match s {
                PhantomShape::Sphere { center, radius, .. } | PhantomShape::MirroredPair { center, radius, .. } => {
                    *radius *= rng.random_range(0.9..=1.1);
                    center[1] += shift(rng) as f64;
                    center[2] += shift(rng) as f64;
                }
                PhantomShape::Box { min, max, .. } => {
                    for a in 1..3 {
                        let d = shift(rng);
                        let lo = min[a] as i64 + d;
                        let hi = max[a] as i64 + d;
                        if lo >= 0 && hi <= self.size[a] as i64 {
                            min[a] = lo as usize;
                            max[a] = hi as usize;
                        }
                    }
                }
            }
        }
        if out.validate().is_ok() {
            out
        } else {
            Self { seed, ..self.clone() }
        }
    }
}

/// Voxels where a later shape replaced an earlier one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRecord {
    pub earlier: usize,
    pub later: usize,
    pub voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomProvenance {
    pub spec: PhantomSpec,
    pub overlaps: Vec<OverlapRecord>,
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: MultiModalVolume,
    pub labels: LabelMap,
    pub provenance: PhantomProvenance,
}

/// Renders the label map and three modalities. Shapes are drawn in order;
/// later shapes win where they overlap.
///
/// CT is tissue intensity plus noise, T1ce the inverted contrast, FLAIR
/// half the tissue intensity with boundary voxels enhanced.
pub fn make_phantom(spec: &PhantomSpec, case_id: &str) -> Result<Phantom> {
    spec.validate()?;
    let size = spec.size;
    let mut owner: Grid3<i32> = Grid3::filled(size, -1);
    let mut labels: Grid3<u8> = Grid3::filled(size, 0);
    let mut overlaps: Vec<OverlapRecord> = Vec::new();
    for x in 0..size[0] {
        for y in 0..size[1] {
            for z in 0..size[2] {
                for (i, s) in spec.shapes.iter().enumerate() {
                    if let Some(c) = s.class_at([x, y, z], size) {
                        let prev = owner.get(x, y, z);
                        if prev >= 0 {
                            let (earlier, later) = (prev as usize, i);
                            match overlaps.iter_mut().find(|o| o.earlier == earlier && o.later == later) {
                                Some(o) => o.voxels += 1,
                                None => overlaps.push(OverlapRecord {
                                    earlier,
                                    later,
                                    voxels: 1,
                                }),
                            }
                        }
                        owner.set(x, y, z, i as i32);
                        labels.set(x, y, z, c);
                    }
                }
            }
        }
    }
    overlaps.sort_by_key(|o| (o.earlier, o.later));

    let tissue = labels.map(|c| spec.tissue[c as usize]);
    let rim = Grid3::from_fn(size, |x, y, z| {
        let c = labels.get(x, y, z);
        if c == 0 {
            return false;
        }
        let p = [x as i64, y as i64, z as i64];
        (0..3).any(|a| {
            [-1i64, 1].iter().any(|d| {
                let mut q = p;
                q[a] += d;
                q[a] < 0 || q[a] >= size[a] as i64 || labels.get(q[0] as usize, q[1] as usize, q[2] as usize) != c
            })
        })
    });

    let noise = |modality: u64| -> Vec<f64> {
        if spec.noise_sigma == 0.0 {
            return vec![0.0; tissue.len()];
        }
        let mut rng = stream(spec.seed, &[modality]);
        let n = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        (0..tissue.len()).map(|_| n.sample(&mut rng)).collect()
    };
    let with_noise = |base: Vec<f64>, modality: u64| -> ScalarGrid {
        let data = base.iter().zip(noise(modality)).map(|(b, e)| b + e).collect();
        Grid3::new(size, data).expect("same size")
    };
    let ct = with_noise(tissue.data().to_vec(), 0);
    let t1ce = with_noise(tissue.data().iter().map(|t| 1.0 - t).collect(), 1);
    let flair_base = tissue
        .data()
        .iter()
        .zip(rim.data())
        .map(|(t, &r)| 0.5 * t + if r { spec.rim_boost } else { 0.0 })
        .collect();
    let flair = with_noise(flair_base, 2);

    let labels = LabelMap::new(labels, spec.num_classes)?;
    let histogram = labels.histogram();
    Ok(Phantom {
        volume: MultiModalVolume::new(case_id, ct, t1ce, flair, spec.spacing)?,
        labels,
        provenance: PhantomProvenance {
            spec: spec.clone(),
            overlaps,
            histogram,
        },
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn case_id(i: usize) -> String {
    format!("phantom_{i:03}")
}

/// Writes `n` jittered phantoms (float32 images, uint8 labels, raw+JSON
/// format) and a manifest with every case in the training split.
pub fn make_dataset(n: usize, template: &PhantomSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    make_dataset_split(n, 0, template, seed, out_dir)
}

/// Like [`make_dataset`], with `n_test` further cases in the test split.
/// Their reference labels are written and listed too, for evaluation.
pub fn make_dataset_split(
    n_train: usize,
    n_test: usize,
    template: &PhantomSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let n = n_train + n_test;
    if n_train == 0 {
        return Err(Error::InvalidArgument("need at least one training case".into()));
    }
    template.validate()?;
    let fmt = VolumeFormat::RawJson;
    let ext = fmt.extension();
    let lab = out_dir.join("labels");
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = case_id(i);
        let mut rng = seeded(seed, i as u64);
        let spec = template.jittered(&mut rng, stream(seed, &[i as u64, 1]).random());
        let ph = make_phantom(&spec, &id)?;
        let rel = |dir: &str, name: String| PathBuf::from(dir).join(name);
        let files = [
            (rel("images", format!("{id}_ct{ext}")), &ph.volume.ct),
            (rel("images", format!("{id}_t1ce{ext}")), &ph.volume.t1ce),
            (rel("images", format!("{id}_flair{ext}")), &ph.volume.flair),
        ];
        for (p, g) in &files {
            save_volume(g, spec.spacing, &out_dir.join(p), fmt, DType::F32)?;
        }
        let label = rel("labels", format!("{id}{ext}"));
        save_labelmap(&ph.labels, spec.spacing, &out_dir.join(&label), fmt)?;
        let prov = lab.join(format!("{id}.phantom.json"));
        fs::write(&prov, serde_json::to_string_pretty(&ph.provenance)? + "\n").map_err(|e| Error::io(&prov, e))?;
        entries.push(ManifestEntry {
            case_id: id,
            ct: files[0].0.clone(),
            t1ce: files[1].0.clone(),
            flair: files[2].0.clone(),
            label: Some(label),
            split: if i < n_train { Split::Train } else { Split::Test },
        });
    }
    let mut manifest = DatasetManifest::new(template.num_classes, entries)?;
    manifest.class_names = default_class_names(template.num_classes);
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    manifest.set_base_dir(out_dir);
    Ok(manifest)
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    let base = ["background", "sphere", "box", "left", "right"];
    (0..num_classes)
        .map(|c| base.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string()))
        .collect()
}
