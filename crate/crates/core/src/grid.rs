//! Dense 3-D grids stored x-fastest, plus the handful of stencil operations
//! (separable Gaussian blur, clamped trilinear sampling) shared by the
//! phantom and deformation code.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Voxel counts along x, y, z.
pub type Dims = [usize; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Self { dims, data: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Format(format!(
                "grid {:?} needs {} values, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let r = i / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

impl Grid<f64> {
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Grid<f64>) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Separable Gaussian blur with a kernel truncated at `ceil(3 sigma)`
    /// voxels and normalised over its truncated support. Out-of-grid samples
    /// are treated as zero, so the result is exactly zero beyond the
    /// box-dilation of the input support by the kernel radius.
    pub fn gaussian_blur(&self, sigma: f64) -> Grid<f64> {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let mut out = self.clone();
        for axis in 0..3 {
            out = convolve_axis(&out, &kernel, axis);
        }
        out
    }

    /// Trilinear interpolation at a continuous voxel coordinate; coordinates
    /// are clamped to the grid extent.
    #[inline]
    pub fn sample_clamped(&self, p: [f64; 3]) -> f64 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let c = p[a].clamp(0.0, hi);
            let f = c.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(self.dims[a] - 1);
            t[a] = c - f;
        }
        let g = |x, y, z| self.data[x + self.dims[0] * (y + self.dims[1] * z)];
        let c00 = g(i0[0], i0[1], i0[2]) * (1.0 - t[0]) + g(i1[0], i0[1], i0[2]) * t[0];
        let c10 = g(i0[0], i1[1], i0[2]) * (1.0 - t[0]) + g(i1[0], i1[1], i0[2]) * t[0];
        let c01 = g(i0[0], i0[1], i1[2]) * (1.0 - t[0]) + g(i1[0], i0[1], i1[2]) * t[0];
        let c11 = g(i0[0], i1[1], i1[2]) * (1.0 - t[0]) + g(i1[0], i1[1], i1[2]) * t[0];
        let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
        let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
        c0 * (1.0 - t[2]) + c1 * t[2]
    }
}

impl Grid<f32> {
    /// SHA-256 of the little-endian voxel bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> =
        (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn convolve_axis(src: &Grid<f64>, kernel: &[f64], axis: usize) -> Grid<f64> {
    let dims = src.dims;
    let radius = (kernel.len() / 2) as i64;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let n = dims[axis] as i64;
    let mut out = Grid::filled(dims, 0.0);
    for (i, o) in out.data.iter_mut().enumerate() {
        let c = src.coords(i)[axis] as i64;
        let lo = (-radius).max(-c);
        let hi = radius.min(n - 1 - c);
        let mut acc = 0.0;
        for k in lo..=hi {
            let j = (i as i64 + k * stride as i64) as usize;
            acc += kernel[(k + radius) as usize] * src.data[j];
        }
        *o = acc;
    }
    out
}
