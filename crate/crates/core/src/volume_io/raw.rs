//! Raw little-endian binary payload plus a JSON sidecar describing it.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::LittleEndian;
use serde::{Deserialize, Serialize};

use super::{DType, RawArray};
use crate::error::{Error, Result};
use crate::grid::Spacing;

pub const ORDER: &str = "xyz-fastest-first";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
    spacing: [f64; 3],
    order: String,
    #[serde(default = "little")]
    endianness: String,
}

fn little() -> String {
    "little".into()
}

/// `(payload, sidecar)` paths for either member of the pair.
pub fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("bin"), path.with_extension("json"))
}

pub(super) fn read(path: &Path) -> Result<RawArray> {
    let (bin, json) = pair_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(&json, "sidecar", e.to_string()))?;
    if meta.order != ORDER {
        return Err(Error::format(&json, "order", format!("`{}` (expected `{ORDER}`)", meta.order)));
    }
    if meta.endianness != "little" {
        return Err(Error::format(&json, "endianness", meta.endianness));
    }
    let dtype = DType::parse(&meta.dtype).ok_or_else(|| Error::UnsupportedDtype {
        path: json.clone(),
        dtype: meta.dtype.clone(),
    })?;
    let spacing = Spacing::new(meta.spacing)
        .map_err(|_| Error::format(&json, "spacing", format!("{:?}", meta.spacing)))?;
    if meta.shape.is_empty() || meta.shape.contains(&0) {
        return Err(Error::format(&json, "shape", format!("{:?}", meta.shape)));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * dtype.size() {
        return Err(Error::format(
            &bin,
            "shape",
            format!(
                "{:?} of {} needs {} bytes, file has {}",
                meta.shape,
                meta.dtype,
                n * dtype.size(),
                bytes.len()
            ),
        ));
    }
    Ok(RawArray {
        shape: meta.shape,
        data: dtype.decode::<LittleEndian>(&bytes),
        dtype,
        spacing,
    })
}

pub(super) fn write(path: &Path, array: &RawArray) -> Result<()> {
    let (bin, json) = pair_paths(path);
    let meta = Sidecar {
        shape: array.shape.clone(),
        dtype: array.dtype.name().into(),
        spacing: array.spacing.0,
        order: ORDER.into(),
        endianness: little(),
    };
    fs::write(&bin, array.dtype.encode(&array.data)?).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}
