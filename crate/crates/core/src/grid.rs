//! Dense 3D grids in (x, y, z) axis order.
//!
//! In memory the last axis varies fastest (`index = (x * Y + y) * Z + z`).
//! On-disk formats store x fastest; the IO layer permutes on read/write.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Shape3 = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: Shape3, data: Vec<T>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::shape(n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Shape3, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let z = index % self.shape[2];
        let y = (index / self.shape[2]) % self.shape[1];
        let x = index / (self.shape[1] * self.shape[2]);
        [x, y, z]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Reverses the voxel order along `axis`.
    pub fn flipped(&self, axis: usize) -> Self {
        let s = self.shape;
        Self::from_fn(s, |x, y, z| {
            let mut c = [x, y, z];
            c[axis] = s[axis] - 1 - c[axis];
            self.get(c[0], c[1], c[2])
        })
    }

    /// Reorders data so that x varies fastest (file order).
    pub fn to_x_fastest(&self) -> Vec<T> {
        let [nx, ny, nz] = self.shape;
        let mut out = Vec::with_capacity(self.data.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(self.get(x, y, z));
                }
            }
        }
        out
    }

    /// Inverse of [`Grid3::to_x_fastest`].
    pub fn from_x_fastest(shape: Shape3, file_order: &[T]) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if file_order.len() != n {
            return Err(Error::shape(n, file_order.len()));
        }
        let [nx, ny, _] = shape;
        Ok(Self::from_fn(shape, |x, y, z| {
            file_order[x + nx * (y + ny * z)]
        }))
    }
}

pub type ScalarGrid = Grid3<f64>;

/// Physical voxel size in millimetres along (x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn new(s: [f64; 3]) -> Result<Self> {
        if s.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self(s))
        } else {
            Err(Error::InvalidArgument(format!(
                "spacing components must be strictly positive, got {s:?}"
            )))
        }
    }

    pub fn isotropic(v: f64) -> Self {
        Self([v; 3])
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self([1.2, 1.2, 1.2])
    }
}

/// A subset of the three spatial axes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisSet {
    pub x: bool,
    pub y: bool,
    pub z: bool,
}

impl AxisSet {
    pub const ALL: AxisSet = AxisSet {
        x: true,
        y: true,
        z: true,
    };
    pub const NONE: AxisSet = AxisSet {
        x: false,
        y: false,
        z: false,
    };
    pub const YZ: AxisSet = AxisSet {
        x: false,
        y: true,
        z: true,
    };

    pub fn from_bits(bits: u8) -> Self {
        Self {
            x: bits & 1 != 0,
            y: bits & 2 != 0,
            z: bits & 4 != 0,
        }
    }

    pub fn bits(self) -> u8 {
        self.x as u8 | (self.y as u8) << 1 | (self.z as u8) << 2
    }

    pub fn contains(self, axis: usize) -> bool {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => false,
        }
    }

    pub fn axes(self) -> Vec<usize> {
        (0..3).filter(|&a| self.contains(a)).collect()
    }

    pub fn len(self) -> usize {
        self.axes().len()
    }

    pub fn is_empty(self) -> bool {
        self.bits() == 0
    }

    pub fn is_subset_of(self, other: AxisSet) -> bool {
        self.bits() & !other.bits() == 0
    }

    /// Parses strings such as `"xyz"`, `"yz"` or `""`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut set = AxisSet::NONE;
        for ch in s.chars() {
            match ch.to_ascii_lowercase() {
                'x' => set.x = true,
                'y' => set.y = true,
                'z' => set.z = true,
                ',' | ' ' => {}
                other => {
                    return Err(Error::InvalidArgument(format!("unknown axis `{other}`")));
                }
            }
        }
        Ok(set)
    }
}

impl std::fmt::Display for AxisSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            return write!(f, "id");
        }
        for (a, name) in ["x", "y", "z"].iter().enumerate() {
            if self.contains(a) {
                write!(f, "{name}")?;
            }
        }
        Ok(())
    }
}
