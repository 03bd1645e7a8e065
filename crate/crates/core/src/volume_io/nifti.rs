//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{DType, RawArray};
use crate::error::{Error, Result};
use crate::grid::Spacing;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const MAGIC: usize = 344;
}

fn dtype_code(dtype: DType) -> (i16, i16) {
    match dtype {
        DType::U8 => (2, 8),
        DType::I16 => (4, 16),
        DType::I32 => (8, 32),
        DType::F32 => (16, 32),
        DType::F64 => (64, 64),
    }
}

fn dtype_from_code(code: i16) -> Option<DType> {
    Some(match code {
        2 => DType::U8,
        4 => DType::I16,
        8 => DType::I32,
        16 => DType::F32,
        64 => DType::F64,
        _ => return None,
    })
}

fn is_gz(path: &Path) -> bool {
    path.to_string_lossy().ends_with(".gz")
}

/// Converts an `f32` header field to the `f64` with the same shortest
/// decimal representation (1.2f32 becomes 1.2, not 1.2000000476837158).
fn widen(v: f32) -> f64 {
    format!("{v}").parse().unwrap_or(v as f64)
}

pub(super) fn read(path: &Path) -> Result<RawArray> {
    let mut bytes = Vec::new();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        bytes = out;
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "sizeof_hdr", "file shorter than header"));
    }
    if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        parse::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        parse::<BigEndian>(path, &bytes)
    } else {
        Err(Error::format(path, "sizeof_hdr", "expected 348"))
    }
}

fn parse<E: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<RawArray> {
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(Error::format(path, "magic", format!("{magic:?} is not single-file NIfTI-1")));
    }
    let ndim = E::read_i16(&bytes[offsets::DIM..]);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, "dim[0]", format!("{ndim} out of range")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let d = E::read_i16(&bytes[offsets::DIM + 2 * i..]);
        if d < 1 {
            return Err(Error::format(path, format!("dim[{i}]"), format!("{d} is not positive")));
        }
        shape.push(d as usize);
    }
    // trailing singleton dims beyond the third carry no information
    while shape.len() > 3 && *shape.last().unwrap() == 1 {
        shape.pop();
    }
    let code = E::read_i16(&bytes[offsets::DATATYPE..]);
    let dtype = dtype_from_code(code).ok_or_else(|| Error::UnsupportedDtype {
        path: path.to_path_buf(),
        dtype: format!("NIfTI code {code}"),
    })?;
    let bitpix = E::read_i16(&bytes[offsets::BITPIX..]);
    if bitpix as usize != dtype.size() * 8 {
        return Err(Error::format(path, "bitpix", format!("{bitpix} disagrees with datatype {code}")));
    }
    let mut spacing = [1.0; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = E::read_f32(&bytes[offsets::PIXDIM + 4 * (i + 1)..]);
        if i < shape.len() {
            *s = widen(v);
        }
    }
    let spacing = Spacing::new(spacing)
        .map_err(|_| Error::format(path, "pixdim", format!("{spacing:?} not strictly positive")))?;
    let vox_offset = E::read_f32(&bytes[offsets::VOX_OFFSET..]) as usize;
    let n: usize = shape.iter().product();
    let end = vox_offset + n * dtype.size();
    if vox_offset < HEADER_SIZE || bytes.len() < end {
        return Err(Error::format(
            path,
            "vox_offset",
            format!("data region {vox_offset}..{end} exceeds file size {}", bytes.len()),
        ));
    }
    let mut data = dtype.decode::<E>(&bytes[vox_offset..end]);
    let slope = E::read_f32(&bytes[offsets::SCL_SLOPE..]);
    let inter = E::read_f32(&bytes[offsets::SCL_INTER..]);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    Ok(RawArray {
        shape,
        data,
        dtype,
        spacing,
    })
}

pub(super) fn write(path: &Path, array: &RawArray) -> Result<()> {
    if array.shape.len() > 7 || array.shape.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!(
            "shape {:?} cannot be stored in a NIfTI-1 header",
            array.shape
        )));
    }
    let mut header = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut header[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    LittleEndian::write_i16(&mut header[offsets::DIM..], array.shape.len() as i16);
    for i in 0..7 {
        let d = array.shape.get(i).copied().unwrap_or(1) as i16;
        LittleEndian::write_i16(&mut header[offsets::DIM + 2 * (i + 1)..], d);
    }
    let (code, bitpix) = dtype_code(array.dtype);
    LittleEndian::write_i16(&mut header[offsets::DATATYPE..], code);
    LittleEndian::write_i16(&mut header[offsets::BITPIX..], bitpix);
    LittleEndian::write_f32(&mut header[offsets::PIXDIM..], 1.0);
    for i in 0..7 {
        let v = if i < 3 { array.spacing.0[i] as f32 } else { 1.0 };
        LittleEndian::write_f32(&mut header[offsets::PIXDIM + 4 * (i + 1)..], v);
    }
    LittleEndian::write_f32(&mut header[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut header[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut header[offsets::SCL_INTER..], 0.0);
    header[offsets::XYZT_UNITS] = 2; // millimetres
    let descrip = b"abseg";
    header[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    header[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");

    let mut bytes = header;
    bytes.extend(array.dtype.encode(&array.data)?);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
