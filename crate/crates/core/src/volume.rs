//! Dense 3-D scalar grid and the resampling primitives the kernels share.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("shape {0:?} has a zero-length axis")]
    EmptyAxis([usize; 3]),
    #[error("shape {shape:?} needs {expected} voxels, got {actual}")]
    LengthMismatch {
        shape: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("voxel {0} is not finite")]
    NonFinite(usize),
}

/// Row-major `(depth, height, width)` grid; width varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume<T> {
    shape: [usize; 3],
    voxels: Vec<T>,
    spacing: Option<[f64; 3]>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(shape: [usize; 3], voxels: Vec<T>) -> Result<Self, VolumeError> {
        if shape.iter().any(|&n| n == 0) {
            return Err(VolumeError::EmptyAxis(shape));
        }
        let expected = shape.iter().product();
        if voxels.len() != expected {
            return Err(VolumeError::LengthMismatch {
                shape,
                expected,
                actual: voxels.len(),
            });
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self {
            shape,
            voxels,
            spacing: None,
        })
    }

    pub fn filled(shape: [usize; 3], value: T) -> Result<Self, VolumeError> {
        Self::new(shape, vec![value; shape.iter().product()])
    }

    pub fn from_fn(
        shape: [usize; 3],
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self, VolumeError> {
        let mut voxels = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    voxels.push(f(z, y, x));
                }
            }
        }
        Self::new(shape, voxels)
    }

    pub fn with_spacing(mut self, spacing: Option<[f64; 3]>) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn into_voxels(self) -> Vec<T> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.voxels[self.index(z, y, x)]
    }

    pub fn min_axis(&self) -> usize {
        self.shape.iter().copied().min().unwrap_or(0)
    }

    pub fn mean(&self) -> T {
        let sum: f64 = self.voxels.iter().map(|v| v.f64()).sum();
        T::of(sum / self.voxels.len() as f64)
    }

    pub fn min_max(&self) -> (T, T) {
        self.voxels.iter().fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.voxels.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.voxels
            .iter()
            .zip(&other.voxels)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape,
            voxels: self.voxels.iter().map(|&v| f(v)).collect(),
            spacing: self.spacing,
        }
    }

    /// Same shape and spacing, new voxel buffer.
    pub(crate) fn with_voxels(&self, voxels: Vec<T>) -> Self {
        debug_assert_eq!(voxels.len(), self.voxels.len());
        Self {
            shape: self.shape,
            voxels,
            spacing: self.spacing,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            voxels: self.voxels.iter().map(|v| U::of(v.f64())).collect(),
            spacing: self.spacing,
        }
    }

    /// Trilinear interpolation at fractional voxel coordinates, replicating
    /// edge voxels outside the grid. The result is a convex combination of
    /// at most eight voxels.
    pub fn sample_trilinear(&self, z: f64, y: f64, x: f64) -> T {
        let [d, h, w] = self.shape;
        let (z0, z1, fz) = bracket(z, d);
        let (y0, y1, fy) = bracket(y, h);
        let (x0, x1, fx) = bracket(x, w);
        let lerp = |a: T, b: T, t: f64| {
            if t == 0.0 {
                a
            } else {
                a + (b - a) * T::of(t)
            }
        };
        let c00 = lerp(self.get(z0, y0, x0), self.get(z0, y0, x1), fx);
        let c01 = lerp(self.get(z0, y1, x0), self.get(z0, y1, x1), fx);
        let c10 = lerp(self.get(z1, y0, x0), self.get(z1, y0, x1), fx);
        let c11 = lerp(self.get(z1, y1, x0), self.get(z1, y1, x1), fx);
        let c0 = lerp(c00, c01, fy);
        let c1 = lerp(c10, c11, fy);
        lerp(c0, c1, fz)
    }

    /// Builds a same-shape volume by pulling every output voxel from a
    /// fractional source coordinate.
    pub(crate) fn warp(&self, mut source: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let [d, h, w] = self.shape;
        let mut out = Vec::with_capacity(self.voxels.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let [sz, sy, sx] = source(z, y, x);
                    out.push(self.sample_trilinear(sz, sy, sx));
                }
            }
        }
        self.with_voxels(out)
    }
}

/// Clamps `c` into `[0, n-1]` and splits it into neighbouring indices and a weight.
#[inline]
fn bracket(c: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, max) };
    let lo = c.floor();
    let i0 = lo as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - lo)
}
