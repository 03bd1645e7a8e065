use crate::error::{Error, Result};

/// Row-major n-d array of `f64` (last axis fastest).
///
/// Network tensors use the layout (batch, channel, x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(shape, data.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(shape, &self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Product of the dimensions after `axis` (exclusive).
    pub fn inner_size(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Sub-tensor `index` along axis 0.
    pub fn slice0(&self, index: usize) -> Tensor {
        let inner = self.inner_size(0);
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(&first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Reverses the given trailing spatial axes of a (..., X, Y, Z) tensor.
    /// `axes` index the last three dimensions as 0 = x, 1 = y, 2 = z.
    pub fn flip_spatial(&self, axes: &[usize]) -> Tensor {
        let r = self.shape.len();
        assert!(r >= 3, "flip_spatial needs at least three dimensions");
        let [nx, ny, nz] = [self.shape[r - 3], self.shape[r - 2], self.shape[r - 1]];
        let vol = nx * ny * nz;
        let fx = axes.contains(&0);
        let fy = axes.contains(&1);
        let fz = axes.contains(&2);
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks(vol).zip(out.chunks_mut(vol)) {
            for x in 0..nx {
                let sx = if fx { nx - 1 - x } else { x };
                for y in 0..ny {
                    let sy = if fy { ny - 1 - y } else { y };
                    let drow = &mut dst[(x * ny + y) * nz..(x * ny + y + 1) * nz];
                    let srow = &src[(sx * ny + sy) * nz..(sx * ny + sy + 1) * nz];
                    if fz {
                        for (d, s) in drow.iter_mut().zip(srow.iter().rev()) {
                            *d = *s;
                        }
                    } else {
                        drow.copy_from_slice(srow);
                    }
                }
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }
}
