//! Hard Dice and surface Dice, per class and aggregated into reports.
//!
//! Surfaces are the boundary faces between foreground voxels and
//! background (or the grid edge). Face centers live on a lattice of half
//! the voxel pitch, which lets nearest-face distances come from an exact
//! Euclidean distance transform of that lattice.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3, Spacing};
use crate::parallel::map_indexed;
use crate::volume_io::{load_labelmap, LabelMap, VolumeFormat};

pub const DEFAULT_TAU_MM: f64 = 1.2;

/// Slack on the squared-distance threshold so faces at exactly τ count.
const THRESHOLD_SLACK: f64 = 1e-9;

/// What to report when a class is absent from both maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyMaskPolicy {
    /// Score 1.
    #[default]
    Perfect,
    /// Leave the cell out of the report and its means.
    Exclude,
}

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(gt.shape(), pred.shape()));
    }
    Ok(())
}

/// 2|A∩B| / (|A| + |B|) for `class_id`; 1 when both masks are empty.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, class_id: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    let c = class_id as u8;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.grid().data().iter().zip(gt.grid().data()) {
        let (ip, ig) = (p == c, g == c);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// One boundary face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceElement {
    /// Face center in millimetres (voxel centers at index × spacing).
    pub center: [f64; 3],
    pub area: f64,
    /// Position on the half-pitch lattice: voxel (i, j, k) has its center at
    /// (2i+1, 2j+1, 2k+1).
    pub lattice: [usize; 3],
}

/// Boundary faces of a binary mask, in a fixed order.
pub fn extract_surface(mask: &Grid3<bool>, spacing: Spacing) -> Vec<SurfaceElement> {
    let [nx, ny, nz] = mask.shape();
    let s = spacing.0;
    let area = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let mut faces = Vec::new();
    let inside = |x: i64, y: i64, z: i64| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && mask.get(x as usize, y as usize, z as usize)
    };
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                if !mask.get(x, y, z) {
                    continue;
                }
                let v = [x as i64, y as i64, z as i64];
                for axis in 0..3 {
                    for dir in [-1i64, 1] {
                        let mut n = v;
                        n[axis] += dir;
                        if inside(n[0], n[1], n[2]) {
                            continue;
                        }
                        let mut lattice = [2 * x + 1, 2 * y + 1, 2 * z + 1];
                        lattice[axis] = (lattice[axis] as i64 + dir) as usize;
                        let center = std::array::from_fn(|a| (lattice[a] as f64 - 1.0) * 0.5 * s[a]);
                        faces.push(SurfaceElement {
                            center,
                            area: area[axis],
                            lattice,
                        });
                    }
                }
            }
        }
    }
    faces
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample pitch `h`. Infinite entries are not sources.
fn edt_1d(f: &mut [f64], h: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (h * q as f64).powi(2);
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let fp = f[p] + (h * p as f64).powi(2);
            let s = (fq - fp) / (2.0 * h * h * (q - p) as f64);
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    out.resize(n, 0.0);
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = h * (q as f64 - v[k] as f64);
        out[q] = d * d + f[v[k]];
    }
    f.copy_from_slice(out);
}

/// Squared distance, per axis-separable passes, from every lattice point
/// of `dims` to the nearest source (`0.0` entries of `field`).
fn squared_edt(field: &mut [f64], dims: [usize; 3], pitch: [f64; 3]) {
    let [nx, ny, nz] = dims;
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    // z rows are contiguous
    for row in field.chunks_mut(nz) {
        edt_1d(row, pitch[2], &mut v, &mut z, &mut out);
    }
    let mut line = vec![0.0; ny.max(nx)];
    for x in 0..nx {
        for k in 0..nz {
            let l = &mut line[..ny];
            for y in 0..ny {
                l[y] = field[(x * ny + y) * nz + k];
            }
            edt_1d(l, pitch[1], &mut v, &mut z, &mut out);
            for y in 0..ny {
                field[(x * ny + y) * nz + k] = l[y];
            }
        }
    }
    for y in 0..ny {
        for k in 0..nz {
            let l = &mut line[..nx];
            for x in 0..nx {
                l[x] = field[(x * ny + y) * nz + k];
            }
            edt_1d(l, pitch[0], &mut v, &mut z, &mut out);
            for x in 0..nx {
                field[(x * ny + y) * nz + k] = l[x];
            }
        }
    }
}

/// Surface area of `from` lying within `tau` of the nearest face of `to`.
fn area_within(from: &[SurfaceElement], to: &[SurfaceElement], spacing: Spacing, tau: f64) -> f64 {
    if from.is_empty() || to.is_empty() {
        return 0.0;
    }
    // crop the lattice to the joint bounding box; every source lies inside it
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for f in from.iter().chain(to) {
        for a in 0..3 {
            lo[a] = lo[a].min(f.lattice[a]);
            hi[a] = hi[a].max(f.lattice[a]);
        }
    }
    let dims: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let idx = |l: [usize; 3]| ((l[0] - lo[0]) * dims[1] + (l[1] - lo[1])) * dims[2] + (l[2] - lo[2]);
    let mut field = vec![f64::INFINITY; dims.iter().product()];
    for t in to {
        field[idx(t.lattice)] = 0.0;
    }
    let pitch = spacing.0.map(|s| s / 2.0);
    squared_edt(&mut field, dims, pitch);
    let limit = tau * tau + THRESHOLD_SLACK;
    // fold from +0.0: an empty float sum is -0.0
    from.iter()
        .filter(|f| field[idx(f.lattice)] <= limit)
        .fold(0.0, |acc, f| acc + f.area)
}

/// Symmetric surface overlap at tolerance `tau` (mm) for `class_id`;
/// 1 when both masks are empty, 0 when exactly one is.
pub fn surface_dice(pred: &LabelMap, gt: &LabelMap, class_id: usize, tau: f64, spacing: Spacing) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tau} must be nonnegative")));
    }
    let sp = extract_surface(&pred.mask(class_id), spacing);
    let sg = extract_surface(&gt.mask(class_id), spacing);
    Ok(surface_dice_from_faces(&sp, &sg, spacing, tau))
}

/// Surface Dice from precomputed face sets.
pub fn surface_dice_from_faces(pred: &[SurfaceElement], gt: &[SurfaceElement], spacing: Spacing, tau: f64) -> f64 {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    // summed like the overlap terms so identical inputs give exactly 1
    let area = |faces: &[SurfaceElement]| faces.iter().fold(0.0, |acc, f| acc + f.area);
    let total = area(pred) + area(gt);
    let overlap = area_within(pred, gt, spacing, tau) + area_within(gt, pred, spacing, tau);
    overlap / total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub method: String,
    /// Classes to score; empty means every foreground class.
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    pub tau_mm: f64,
    pub empty_policy: EmptyMaskPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            method: "model".into(),
            classes: Vec::new(),
            class_names: Vec::new(),
            tau_mm: DEFAULT_TAU_MM,
            empty_policy: EmptyMaskPolicy::Perfect,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScores {
    pub case_id: String,
    /// One entry per evaluated class; `None` when excluded by policy.
    pub dsc: Vec<Option<f64>>,
    pub sdsc: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub tau_mm: f64,
    pub empty_policy: EmptyMaskPolicy,
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    pub cases: Vec<CaseScores>,
    pub class_mean_dsc: Vec<Option<f64>>,
    pub class_mean_sdsc: Vec<Option<f64>>,
    /// Mean over every reported (case, class) cell.
    pub mean_dsc: Option<f64>,
    pub mean_sdsc: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn resolve_classes(opts: &EvalOptions, num_classes: usize) -> Result<Vec<usize>> {
    let classes = if opts.classes.is_empty() { (1..num_classes).collect() } else { opts.classes.clone() };
    if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::InvalidArgument(format!("class {c} outside 0..{num_classes}")));
    }
    Ok(classes)
}

/// Scores one case for each class.
pub fn score_case(
    case_id: &str,
    pred: &LabelMap,
    gt: &LabelMap,
    spacing: Spacing,
    classes: &[usize],
    opts: &EvalOptions,
) -> Result<CaseScores> {
    check_shapes(pred, gt)?;
    let mut dsc = Vec::with_capacity(classes.len());
    let mut sdsc = Vec::with_capacity(classes.len());
    for &c in classes {
        let empty = !pred.grid().data().iter().chain(gt.grid().data()).any(|&v| v as usize == c);
        if empty && opts.empty_policy == EmptyMaskPolicy::Exclude {
            dsc.push(None);
            sdsc.push(None);
            continue;
        }
        dsc.push(Some(dice_score(pred, gt, c)?));
        sdsc.push(Some(surface_dice(pred, gt, c, opts.tau_mm, spacing)?));
    }
    Ok(CaseScores {
        case_id: case_id.to_string(),
        dsc,
        sdsc,
    })
}

/// Builds the report from already-scored cases.
pub fn summarize(cases: Vec<CaseScores>, classes: Vec<usize>, opts: &EvalOptions) -> EvaluationReport {
    let k = classes.len();
    let class_mean_dsc = (0..k).map(|j| mean(cases.iter().map(|c| c.dsc[j]))).collect();
    let class_mean_sdsc = (0..k).map(|j| mean(cases.iter().map(|c| c.sdsc[j]))).collect();
    let mean_dsc = mean(cases.iter().flat_map(|c| c.dsc.iter().copied()));
    let mean_sdsc = mean(cases.iter().flat_map(|c| c.sdsc.iter().copied()));
    let class_names = classes
        .iter()
        .map(|&c| opts.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")))
        .collect();
    EvaluationReport {
        method: opts.method.clone(),
        tau_mm: opts.tau_mm,
        empty_policy: opts.empty_policy,
        classes,
        class_names,
        cases,
        class_mean_dsc,
        class_mean_sdsc,
        mean_dsc,
        mean_sdsc,
    }
}

/// Scores in-memory label maps: (case id, prediction, reference, spacing).
pub fn evaluate_label_maps(
    cases: &[(String, LabelMap, LabelMap, Spacing)],
    opts: &EvalOptions,
    workers: usize,
) -> Result<EvaluationReport> {
    let first = cases.first().ok_or_else(|| Error::InvalidArgument("no cases to evaluate".into()))?;
    let classes = resolve_classes(opts, first.2.num_classes())?;
    let scored = map_indexed(cases.len(), workers, |i| {
        let (id, p, g, s) = &cases[i];
        score_case(id, p, g, *s, &classes, opts)
    });
    Ok(summarize(scored.into_iter().collect::<Result<_>>()?, classes, opts))
}

/// Label files in `dir`, keyed by case id (file name without extension).
/// Raw volumes are listed by their `.bin` half, so JSON sidecars of any
/// kind are never mistaken for cases.
pub fn list_label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let id = [".nii.gz", ".nii", ".bin"]
            .iter()
            .find_map(|ext| name.strip_suffix(ext))
            .filter(|id| !id.ends_with(".provenance") && !id.is_empty());
        if let Some(id) = id {
            out.insert(id.to_string(), path);
        }
    }
    Ok(out)
}

/// Scores every prediction against the reference case of the same id.
/// Reference spacing is used for surface distances.
pub fn evaluate_cases(
    preds: &BTreeMap<String, PathBuf>,
    gts: &BTreeMap<String, PathBuf>,
    num_classes: usize,
    opts: &EvalOptions,
    workers: usize,
) -> Result<EvaluationReport> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predicted cases".into()));
    }
    for id in preds.keys() {
        if !gts.contains_key(id) {
            return Err(Error::MissingCase(format!("no reference labels for {id}")));
        }
    }
    let classes = resolve_classes(opts, num_classes)?;
    let ids: Vec<&String> = preds.keys().collect();
    let scored = map_indexed(ids.len(), workers, |i| -> Result<CaseScores> {
        let id = ids[i];
        let gp = &gts[id];
        let pp = &preds[id];
        let (gt, spacing) = load_labelmap(gp, VolumeFormat::from_path(gp)?, num_classes)?;
        let (pred, _) = load_labelmap(pp, VolumeFormat::from_path(pp)?, num_classes)?;
        score_case(id, &pred, &gt, spacing, &classes, opts)
    });
    Ok(summarize(scored.into_iter().collect::<Result<_>>()?, classes, opts))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Aligned text: a Method/DSC/SDSC summary row per report, then per-class
/// and per-case breakdowns.
pub fn render_table(reports: &[EvaluationReport]) -> String {
    let mut s = String::new();
    let w = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let _ = writeln!(s, "{:<w$}  {:>7}  {:>7}", "Method", "DSC", "SDSC");
    for r in reports {
        let _ = writeln!(s, "{:<w$}  {:>7}  {:>7}", r.method, cell(r.mean_dsc), cell(r.mean_sdsc));
    }
    for r in reports {
        let _ = writeln!(s, "\n[{}] tau = {} mm", r.method, r.tau_mm);
        let cw = r.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<cw$}  {:>7}  {:>7}", "Class", "DSC", "SDSC");
        for (j, name) in r.class_names.iter().enumerate() {
            let _ = writeln!(s, "{:<cw$}  {:>7}  {:>7}", name, cell(r.class_mean_dsc[j]), cell(r.class_mean_sdsc[j]));
        }
        let idw = r.cases.iter().map(|c| c.case_id.len()).max().unwrap_or(4).max(4);
        let _ = write!(s, "\n{:<idw$}", "Case");
        for name in &r.class_names {
            let _ = write!(s, "  {:>w2$}", format!("{name}:DSC"), w2 = name.len().max(7) + 4);
            let _ = write!(s, "  {:>w2$}", format!("{name}:SDSC"), w2 = name.len().max(7) + 5);
        }
        s.push('\n');
        for c in &r.cases {
            let _ = write!(s, "{:<idw$}", c.case_id);
            for (j, name) in r.class_names.iter().enumerate() {
                let _ = write!(s, "  {:>w2$}", cell(c.dsc[j]), w2 = name.len().max(7) + 4);
                let _ = write!(s, "  {:>w2$}", cell(c.sdsc[j]), w2 = name.len().max(7) + 5);
            }
            s.push('\n');
        }
    }
    s
}

/// Writes `report.txt` and `report.json` into `dir`.
pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join("report.txt");
    let json = dir.join("report.json");
    fs::write(&txt, render_table(std::slice::from_ref(report))).map_err(|e| Error::io(&txt, e))?;
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&json, e))?;
    Ok((txt, json))
}
