//! PNG slices of a modality with label contours drawn on top.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::ScalarGrid;
use crate::volume_io::LabelMap;

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn class_color(class_id: u8) -> [u8; 3] {
    PALETTE[(class_id as usize + PALETTE.len() - 1) % PALETTE.len()]
}

/// An RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Rgb {
    /// Pixels that are not gray.
    pub fn colored_pixels(&self) -> usize {
        self.pixels.iter().filter(|p| !(p[0] == p[1] && p[1] == p[2])).count()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(f), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(to_err)?;
        let data: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_image_data(&data).map_err(to_err)?;
        w.finish().map_err(to_err)
    }
}

fn in_plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Renders slice `index` normal to `axis`: the modality in gray (scaled by
/// the volume's range) and each labelled region's boundary in its color.
pub fn render_slice(volume: &ScalarGrid, labels: &LabelMap, axis: usize, index: usize) -> Result<Rgb> {
    if volume.shape() != labels.shape() {
        return Err(Error::shape(volume.shape(), labels.shape()));
    }
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("axis {axis} outside 0..3")));
    }
    let shape = volume.shape();
    if index >= shape[axis] {
        return Err(Error::InvalidArgument(format!(
            "slice {index} outside 0..{} along axis {axis}",
            shape[axis]
        )));
    }
    let (u, v) = in_plane_axes(axis);
    let (width, height) = (shape[u], shape[v]);
    let at = |i: usize, j: usize| {
        let mut p = [0; 3];
        p[axis] = index;
        p[u] = i;
        p[v] = j;
        p
    };
    let (lo, hi) = volume
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let lab = |i: usize, j: usize| {
        let p = at(i, j);
        labels.grid().get(p[0], p[1], p[2])
    };
    let mut pixels = Vec::with_capacity(width * height);
    for j in 0..height {
        for i in 0..width {
            let p = at(i, j);
            let c = lab(i, j);
            let edge = c != 0
                && [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(di, dj)| {
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    ni < 0 || nj < 0 || ni >= width as i64 || nj >= height as i64 || lab(ni as usize, nj as usize) != c
                });
            if edge {
                pixels.push(class_color(c));
            } else {
                let g = ((volume.get(p[0], p[1], p[2]) - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8;
                pixels.push([g, g, g]);
            }
        }
    }
    Ok(Rgb { width, height, pixels })
}

/// Writes one PNG per axis through `center`, named `<prefix>_<axis>.png`.
pub fn plot_overlay(volume: &ScalarGrid, labels: &LabelMap, center: [usize; 3], prefix: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(3);
    for (axis, name) in ["x", "y", "z"].iter().enumerate() {
        let img = render_slice(volume, labels, axis, center[axis])?;
        let stem = prefix.file_name().and_then(|s| s.to_str()).unwrap_or("slice");
        let path = prefix.with_file_name(format!("{stem}_{name}.png"));
        img.write_png(&path)?;
        out.push(path);
    }
    Ok(out)
}
