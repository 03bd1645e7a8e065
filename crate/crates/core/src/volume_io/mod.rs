//! Volume, label and probability-map storage, the dataset manifest, and
//! cross-validation fold assignment.

mod folds;
mod manifest;
mod nifti;
pub mod raw;

use std::path::Path;

use byteorder::ByteOrder;

pub use folds::{make_folds, FoldAssignment};
pub use manifest::{DatasetManifest, ManifestEntry, Split};

use crate::error::{Error, Result};
use crate::grid::{Grid3, ScalarGrid, Spacing};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::U8 => "uint8",
            DType::I16 => "int16",
            DType::I32 => "int32",
            DType::F32 => "float32",
            DType::F64 => "float64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "uint8" => DType::U8,
            "int16" => DType::I16,
            "int32" => DType::I32,
            "float32" => DType::F32,
            "float64" => DType::F64,
            _ => return None,
        })
    }

    pub fn is_integer(self) -> bool {
        matches!(self, DType::U8 | DType::I16 | DType::I32)
    }

    fn decode<E: ByteOrder>(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            DType::U8 => bytes.iter().map(|&b| b as f64).collect(),
            DType::I16 => bytes.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
            DType::I32 => bytes.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
            DType::F32 => bytes.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
            DType::F64 => bytes.chunks_exact(8).map(E::read_f64).collect(),
        }
    }

    /// Little-endian encoding. Integer types reject non-integral or
    /// out-of-range values rather than silently wrapping.
    fn encode(self, data: &[f64]) -> Result<Vec<u8>> {
        use byteorder::LittleEndian as LE;
        let mut out = vec![0u8; data.len() * self.size()];
        let check = |v: f64, lo: f64, hi: f64| {
            if v.fract() != 0.0 || v < lo || v > hi {
                Err(Error::InvalidArgument(format!("value {v} not representable as {}", self.name())))
            } else {
                Ok(())
            }
        };
        match self {
            DType::U8 => {
                for (o, &v) in out.iter_mut().zip(data) {
                    check(v, 0.0, 255.0)?;
                    *o = v as u8;
                }
            }
            DType::I16 => {
                for (o, &v) in out.chunks_exact_mut(2).zip(data) {
                    check(v, i16::MIN as f64, i16::MAX as f64)?;
                    LE::write_i16(o, v as i16);
                }
            }
            DType::I32 => {
                for (o, &v) in out.chunks_exact_mut(4).zip(data) {
                    check(v, i32::MIN as f64, i32::MAX as f64)?;
                    LE::write_i32(o, v as i32);
                }
            }
            DType::F32 => {
                for (o, &v) in out.chunks_exact_mut(4).zip(data) {
                    LE::write_f32(o, v as f32);
                }
            }
            DType::F64 => {
                for (o, &v) in out.chunks_exact_mut(8).zip(data) {
                    LE::write_f64(o, v);
                }
            }
        }
        Ok(out)
    }
}

/// Decoded on-disk array; `data` is in file order (x fastest).
#[derive(Clone, Debug)]
pub struct RawArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub dtype: DType,
    pub spacing: Spacing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti1,
    RawJson,
}

impl VolumeFormat {
    /// `.nii` / `.nii.gz` map to NIfTI-1, `.bin` / `.json` to the raw pair.
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.to_string_lossy();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Ok(VolumeFormat::Nifti1)
        } else if name.ends_with(".bin") || name.ends_with(".json") {
            Ok(VolumeFormat::RawJson)
        } else {
            Err(Error::format(path, "extension", "expected .nii, .nii.gz, .bin or .json"))
        }
    }

    /// File suffix including the leading dot.
    pub fn extension(self) -> &'static str {
        match self {
            VolumeFormat::Nifti1 => ".nii.gz",
            VolumeFormat::RawJson => ".bin",
        }
    }
}

pub fn read_array(path: &Path, format: VolumeFormat) -> Result<RawArray> {
    match format {
        VolumeFormat::Nifti1 => {
            if !path.exists() {
                return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
            }
            nifti::read(path)
        }
        VolumeFormat::RawJson => raw::read(path),
    }
}

pub fn write_array(path: &Path, format: VolumeFormat, array: &RawArray) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    match format {
        VolumeFormat::Nifti1 => nifti::write(path, array),
        VolumeFormat::RawJson => raw::write(path, array),
    }
}

fn shape3(path: &Path, shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [x, y, z] => Ok([x, y, z]),
        [x, y] => Ok([x, y, 1]),
        _ => Err(Error::format(path, "shape", format!("{shape:?} is not a 3D grid"))),
    }
}

/// Loads a scalar grid and its spacing.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<(ScalarGrid, Spacing)> {
    let arr = read_array(path, format)?;
    let shape = shape3(path, &arr.shape)?;
    Ok((Grid3::from_x_fastest(shape, &arr.data)?, arr.spacing))
}

pub fn save_volume(
    grid: &ScalarGrid,
    spacing: Spacing,
    path: &Path,
    format: VolumeFormat,
    dtype: DType,
) -> Result<()> {
    let arr = RawArray {
        shape: grid.shape().to_vec(),
        data: grid.to_x_fastest(),
        dtype,
        spacing,
    };
    write_array(path, format, &arr)
}

/// Integer class grid; voxel values lie in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    labels: Grid3<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(labels: Grid3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::InvalidArgument(format!("num_classes {num_classes} outside [1, 256]")));
        }
        if let Some((i, &v)) = labels
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                index: i,
                value: v as i64,
                num_classes,
            });
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn zeros(shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            labels: Grid3::filled(shape, 0),
            num_classes: num_classes.max(1),
        }
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.labels
    }

    pub fn into_grid(self) -> Grid3<u8> {
        self.labels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.labels.shape()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in self.labels.data() {
            h[v as usize] += 1;
        }
        h
    }

    pub fn mask(&self, class_id: usize) -> Grid3<bool> {
        self.labels.map(|v| v as usize == class_id)
    }
}

pub fn load_labelmap(
    path: &Path,
    format: VolumeFormat,
    num_classes: usize,
) -> Result<(LabelMap, Spacing)> {
    let arr = read_array(path, format)?;
    if !arr.dtype.is_integer() {
        return Err(Error::UnsupportedDtype {
            path: path.to_path_buf(),
            dtype: format!("{} (label maps need an integer type)", arr.dtype.name()),
        });
    }
    let shape = shape3(path, &arr.shape)?;
    if let Some((i, &v)) = arr
        .data
        .iter()
        .enumerate()
        .find(|(_, &v)| v < 0.0 || v >= num_classes as f64)
    {
        return Err(Error::LabelOutOfRange {
            index: i,
            value: v as i64,
            num_classes,
        });
    }
    let bytes: Vec<u8> = arr.data.iter().map(|&v| v as u8).collect();
    let grid = Grid3::from_x_fastest(shape, &bytes)?;
    Ok((LabelMap::new(grid, num_classes)?, arr.spacing))
}

pub fn save_labelmap(
    labels: &LabelMap,
    spacing: Spacing,
    path: &Path,
    format: VolumeFormat,
) -> Result<()> {
    let arr = RawArray {
        shape: labels.shape().to_vec(),
        data: labels.grid().to_x_fastest().into_iter().map(f64::from).collect(),
        dtype: DType::U8,
        spacing,
    };
    write_array(path, format, &arr)
}

/// Saves a (C, X, Y, Z) probability tensor as a 4D array whose last file
/// axis is the class (x fastest, class slowest).
pub fn save_probabilities(
    probs: &Tensor,
    spacing: Spacing,
    path: &Path,
    format: VolumeFormat,
) -> Result<()> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(Error::shape("(C, X, Y, Z)", s));
    }
    let (c, shape) = (s[0], [s[1], s[2], s[3]]);
    let mut data = Vec::with_capacity(probs.numel());
    for k in 0..c {
        let g = Grid3::new(shape, probs.slice0(k).into_data())?;
        data.extend(g.to_x_fastest());
    }
    let arr = RawArray {
        shape: vec![shape[0], shape[1], shape[2], c],
        data,
        dtype: DType::F64,
        spacing,
    };
    write_array(path, format, &arr)
}

pub fn load_probabilities(path: &Path, format: VolumeFormat) -> Result<(Tensor, Spacing)> {
    let arr = read_array(path, format)?;
    let (shape, c) = match *arr.shape.as_slice() {
        [x, y, z, c] => ([x, y, z], c),
        [x, y, z] => ([x, y, z], 1),
        _ => return Err(Error::format(path, "shape", format!("{:?} is not (X,Y,Z,C)", arr.shape))),
    };
    let vol: usize = shape.iter().product();
    let mut data = Vec::with_capacity(arr.data.len());
    for k in 0..c {
        let g = Grid3::from_x_fastest(shape, &arr.data[k * vol..(k + 1) * vol])?;
        data.extend(g.into_data());
    }
    Ok((Tensor::from_vec(&[c, shape[0], shape[1], shape[2]], data)?, arr.spacing))
}

/// Three co-registered modality grids of one case.
#[derive(Clone, Debug)]
pub struct MultiModalVolume {
    pub case_id: String,
    pub ct: ScalarGrid,
    pub t1ce: ScalarGrid,
    pub flair: ScalarGrid,
    pub spacing: Spacing,
}

impl MultiModalVolume {
    pub fn new(
        case_id: impl Into<String>,
        ct: ScalarGrid,
        t1ce: ScalarGrid,
        flair: ScalarGrid,
        spacing: Spacing,
    ) -> Result<Self> {
        if ct.shape() != t1ce.shape() || ct.shape() != flair.shape() {
            return Err(Error::shape(
                ct.shape(),
                format!("t1ce {:?}, flair {:?}", t1ce.shape(), flair.shape()),
            ));
        }
        Ok(Self {
            case_id: case_id.into(),
            ct,
            t1ce,
            flair,
            spacing,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.ct.shape()
    }

    pub fn modalities(&self) -> [&ScalarGrid; 3] {
        [&self.ct, &self.t1ce, &self.flair]
    }
}

/// Loads every modality of a manifest entry.
pub fn load_case(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<MultiModalVolume> {
    let load = |p: &Path| {
        let path = manifest.resolve(p);
        load_volume(&path, VolumeFormat::from_path(&path)?)
    };
    let (ct, spacing) = load(&entry.ct)?;
    let (t1ce, _) = load(&entry.t1ce)?;
    let (flair, _) = load(&entry.flair)?;
    MultiModalVolume::new(entry.case_id.clone(), ct, t1ce, flair, spacing)
}

/// Loads the label map of a manifest entry, if it has one.
pub fn load_case_labels(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
) -> Result<Option<LabelMap>> {
    entry
        .label
        .as_ref()
        .map(|p| {
            let path = manifest.resolve(p);
            load_labelmap(&path, VolumeFormat::from_path(&path)?, manifest.num_classes).map(|(l, _)| l)
        })
        .transpose()
}
