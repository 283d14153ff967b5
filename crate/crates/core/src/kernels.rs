//! Executable 3-D augmentation kernels, one per [`OpKind`].
//!
//! Kernel conventions (magnitude `m` is drawn uniformly from the variant's range):
//!
//! - contrast: mean-anchored rescale `mu + m * (x - mu)`
//! - gamma: min-max normalise, raise to `m`, denormalise
//! - brightness: multiply by `m`
//! - gaussian noise: additive `N(0, m)`; `m` is the variance
//! - gaussian blur: separable kernel with standard deviation `m` voxels
//! - low-res simulation: nearest downsample by factor `m`, trilinear upsample back
//! - scale: trilinear zoom by `m` about the volume centre
//! - optical distortion: radial warp with coefficient `m`
//! - elastic transform: smoothed random displacement field, peak amplitude `m` voxels
//! - grid distortion: 5x5x5 control lattice jittered by up to `m` of a cell
//! - mirror: each axis flipped independently with probability 0.5
//! - random crop: pad by fraction `m` of each axis, crop back at a random offset
//!
//! All resampling is trilinear with edge replication, so every warp output is
//! a convex combination of input voxels. Outputs always keep the input shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::search_space::{sample_magnitude, Level, OpKind, OpVariant};
use crate::volume::Volume;

/// Smallest axis length a spatial-level kernel accepts.
pub const MIN_SPATIAL_AXIS: usize = 4;
/// Control points per axis of the grid-distortion lattice.
pub const GRID_POINTS: usize = 5;
/// Standard deviation (voxels) of the smoothing applied to elastic displacement fields.
pub const ELASTIC_SMOOTHING: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("{kind} needs every axis >= {MIN_SPATIAL_AXIS} voxels, got shape {shape:?}")]
    DegenerateVolume { kind: OpKind, shape: [usize; 3] },
    #[error("path applies {0} more than once")]
    DuplicateOp(OpKind),
    #[error("root operation {0} cannot appear in a searched path")]
    RootInPath(OpKind),
}

/// Random parameters drawn alongside the magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Aux {
    None,
    Mirror { axes: [bool; 3] },
    Crop { pad: [usize; 3], offset: [usize; 3] },
    Seed { seed: u64 },
}

/// Provenance of one kernel application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub variant: OpVariant,
    pub magnitude: f64,
    pub aux: Aux,
}

/// Applies `variant` with a magnitude drawn from its range.
pub fn apply<T: Scalar, R: Rng + ?Sized>(
    volume: &Volume<T>,
    variant: &OpVariant,
    rng: &mut R,
) -> Result<(Volume<T>, AppliedOp), KernelError> {
    check_shape(volume, variant)?;
    let magnitude: f64 = sample_magnitude(variant, rng);
    apply_with_magnitude(volume, variant, magnitude, rng)
}

/// Applies `variant` at a fixed magnitude; `rng` still supplies the auxiliary draws.
pub fn apply_with_magnitude<T: Scalar, R: Rng + ?Sized>(
    volume: &Volume<T>,
    variant: &OpVariant,
    magnitude: f64,
    rng: &mut R,
) -> Result<(Volume<T>, AppliedOp), KernelError> {
    check_shape(volume, variant)?;
    let m = magnitude;
    let (out, aux) = match variant.kind {
        OpKind::Mirror => {
            let axes = [rng.random_bool(m), rng.random_bool(m), rng.random_bool(m)];
            (flip(volume, axes), Aux::Mirror { axes })
        }
        OpKind::RandomCrop => {
            let pad = volume.shape().map(|n| (m * n as f64).round() as usize);
            let offset = pad.map(|p| rng.random_range(0..=2 * p));
            (pad_crop(volume, pad, offset), Aux::Crop { pad, offset })
        }
        OpKind::ContrastAdjustment => (contrast(volume, m), Aux::None),
        OpKind::GammaTransform => (gamma(volume, m), Aux::None),
        OpKind::BrightnessTransform => {
            let f = T::of(m);
            (volume.map(|x| x * f), Aux::None)
        }
        OpKind::GaussianNoise => {
            let seed = rng.random();
            (gaussian_noise(volume, m, seed), Aux::Seed { seed })
        }
        OpKind::GaussianBlur => (gaussian_blur(volume, m), Aux::None),
        OpKind::SimulateLowRes => (simulate_low_res(volume, m), Aux::None),
        OpKind::Scale => (scale(volume, m), Aux::None),
        OpKind::OpticalDistortion => (optical_distortion(volume, m), Aux::None),
        OpKind::ElasticTransform => {
            let seed = rng.random();
            (elastic(volume, m, seed), Aux::Seed { seed })
        }
        OpKind::GridDistortion => {
            let seed = rng.random();
            (grid_distortion(volume, m, seed), Aux::Seed { seed })
        }
    };
    Ok((
        out,
        AppliedOp {
            variant: *variant,
            magnitude,
            aux,
        },
    ))
}

/// Applies the root operations, then every path operation in order.
pub fn apply_path<T: Scalar, R: Rng + ?Sized>(
    volume: &Volume<T>,
    roots: &[OpVariant],
    path: &[OpVariant],
    rng: &mut R,
) -> Result<(Volume<T>, Vec<AppliedOp>), KernelError> {
    for (i, v) in path.iter().enumerate() {
        if v.kind.is_root() {
            return Err(KernelError::RootInPath(v.kind));
        }
        if path[..i].iter().any(|p| p.kind == v.kind) {
            return Err(KernelError::DuplicateOp(v.kind));
        }
    }
    for v in roots.iter().chain(path) {
        check_shape(volume, v)?;
    }
    let mut current = volume.clone();
    let mut applied = Vec::with_capacity(roots.len() + path.len());
    for v in roots.iter().chain(path) {
        let (next, op) = apply(&current, v, rng)?;
        current = next;
        applied.push(op);
    }
    Ok((current, applied))
}

fn check_shape<T: Scalar>(volume: &Volume<T>, variant: &OpVariant) -> Result<(), KernelError> {
    if variant.level() == Level::SpatialLevel && volume.min_axis() < MIN_SPATIAL_AXIS {
        return Err(KernelError::DegenerateVolume {
            kind: variant.kind,
            shape: volume.shape(),
        });
    }
    Ok(())
}

/// Reverses the selected axes.
pub fn flip<T: Scalar>(volume: &Volume<T>, axes: [bool; 3]) -> Volume<T> {
    let [d, h, w] = volume.shape();
    let pick = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
    let mut out = Vec::with_capacity(volume.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.push(volume.get(pick(z, d, axes[0]), pick(y, h, axes[1]), pick(x, w, axes[2])));
            }
        }
    }
    volume.with_voxels(out)
}

/// Pads every axis by `pad` voxels per side with the volume minimum, then
/// crops the original extent starting at `offset` in padded coordinates.
pub fn pad_crop<T: Scalar>(volume: &Volume<T>, pad: [usize; 3], offset: [usize; 3]) -> Volume<T> {
    let [d, h, w] = volume.shape();
    let fill = volume.min_max().0;
    let src = |i: usize, a: usize, n: usize| -> Option<usize> {
        let p = i + offset[a];
        (p >= pad[a] && p - pad[a] < n).then(|| p - pad[a])
    };
    let mut out = Vec::with_capacity(volume.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                out.push(match (src(z, 0, d), src(y, 1, h), src(x, 2, w)) {
                    (Some(sz), Some(sy), Some(sx)) => volume.get(sz, sy, sx),
                    _ => fill,
                });
            }
        }
    }
    volume.with_voxels(out)
}

pub fn contrast<T: Scalar>(volume: &Volume<T>, factor: f64) -> Volume<T> {
    let mu = volume.mean();
    let f = T::of(factor);
    volume.map(|x| mu + f * (x - mu))
}

pub fn gamma<T: Scalar>(volume: &Volume<T>, exponent: f64) -> Volume<T> {
    let (lo, hi) = volume.min_max();
    let span = hi - lo;
    if exponent == 1.0 || span <= T::zero() {
        return volume.clone();
    }
    let g = T::of(exponent);
    volume.map(|x| lo + span * ((x - lo) / span).max(T::zero()).powf(g))
}

pub fn gaussian_noise<T: Scalar>(volume: &Volume<T>, variance: f64, seed: u64) -> Volume<T> {
    if variance <= 0.0 {
        return volume.clone();
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("positive standard deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    volume.map(|x| x + T::of(normal.sample(&mut rng)))
}

/// Normalised 1-D Gaussian taps for standard deviation `sigma`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Convolves a row-major buffer along one axis with edge replication.
fn convolve_axis(data: &[f64], shape: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as isize;
    let stride = match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    };
    let n = shape[axis] as isize;
    let mut out = vec![0.0; data.len()];
    for (idx, slot) in out.iter_mut().enumerate() {
        let pos = ((idx / stride) % shape[axis]) as isize;
        let base = idx as isize - pos * stride as isize;
        *slot = taps
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let p = (pos + k as isize - radius).clamp(0, n - 1);
                t * data[(base + p * stride as isize) as usize]
            })
            .sum();
    }
    out
}

fn smooth(data: Vec<f64>, shape: [usize; 3], sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    (0..3).fold(data, |acc, axis| convolve_axis(&acc, shape, axis, &taps))
}

pub fn gaussian_blur<T: Scalar>(volume: &Volume<T>, sigma: f64) -> Volume<T> {
    if sigma <= 0.0 {
        return volume.clone();
    }
    let data = volume.voxels().iter().map(|v| v.f64()).collect();
    let out = smooth(data, volume.shape(), sigma);
    volume.with_voxels(out.into_iter().map(T::of).collect())
}

pub fn simulate_low_res<T: Scalar>(volume: &Volume<T>, factor: f64) -> Volume<T> {
    let shape = volume.shape();
    let low_shape = shape.map(|n| ((n as f64 * factor).round() as usize).clamp(1, n));
    if low_shape == shape {
        return volume.clone();
    }
    let nearest = |j: usize, a: usize| {
        let c = ((j as f64 + 0.5) * shape[a] as f64 / low_shape[a] as f64).floor() as usize;
        c.min(shape[a] - 1)
    };
    let low = Volume::from_fn(low_shape, |z, y, x| {
        volume.get(nearest(z, 0), nearest(y, 1), nearest(x, 2))
    })
    .expect("downsampled shape is non-empty");
    let up = |i: usize, a: usize| (i as f64 + 0.5) * low_shape[a] as f64 / shape[a] as f64 - 0.5;
    Volume::from_fn(shape, |z, y, x| low.sample_trilinear(up(z, 0), up(y, 1), up(x, 2)))
        .expect("same shape as input")
        .with_spacing(volume.spacing())
}

fn centre(shape: [usize; 3]) -> [f64; 3] {
    shape.map(|n| (n as f64 - 1.0) / 2.0)
}

pub fn scale<T: Scalar>(volume: &Volume<T>, factor: f64) -> Volume<T> {
    if factor == 1.0 {
        return volume.clone();
    }
    let c = centre(volume.shape());
    volume.warp(|z, y, x| {
        [
            c[0] + (z as f64 - c[0]) / factor,
            c[1] + (y as f64 - c[1]) / factor,
            c[2] + (x as f64 - c[2]) / factor,
        ]
    })
}

pub fn optical_distortion<T: Scalar>(volume: &Volume<T>, k: f64) -> Volume<T> {
    if k == 0.0 {
        return volume.clone();
    }
    let c = centre(volume.shape());
    let norm = |p: usize, a: usize| if c[a] > 0.0 { (p as f64 - c[a]) / c[a] } else { 0.0 };
    volume.warp(|z, y, x| {
        let u = [norm(z, 0), norm(y, 1), norm(x, 2)];
        let r2: f64 = u.iter().map(|v| v * v).sum();
        let s = 1.0 + k * r2;
        [c[0] + u[0] * c[0] * s, c[1] + u[1] * c[1] * s, c[2] + u[2] * c[2] * s]
    })
}

pub fn elastic<T: Scalar>(volume: &Volume<T>, amplitude: f64, seed: u64) -> Volume<T> {
    if amplitude == 0.0 {
        return volume.clone();
    }
    let shape = volume.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let raw = (0..volume.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            smooth(raw, shape, ELASTIC_SMOOTHING)
        })
        .collect();
    let peak = fields
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { amplitude / peak } else { 0.0 };
    volume.warp(|z, y, x| {
        let i = volume.index(z, y, x);
        [
            z as f64 + gain * fields[0][i],
            y as f64 + gain * fields[1][i],
            x as f64 + gain * fields[2][i],
        ]
    })
}

pub fn grid_distortion<T: Scalar>(volume: &Volume<T>, step: f64, seed: u64) -> Volume<T> {
    if step == 0.0 {
        return volume.clone();
    }
    let shape = volume.shape();
    let cells = (GRID_POINTS - 1) as f64;
    let cell = shape.map(|n| (n as f64 - 1.0) / cells);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice_shape = [GRID_POINTS; 3];
    // One displacement lattice per axis, in voxels.
    let lattices: Vec<Volume<f64>> = (0..3)
        .map(|a| {
            let jitter = step * cell[a];
            Volume::from_fn(lattice_shape, |_, _, _| {
                if jitter > 0.0 {
                    rng.random_range(-jitter..=jitter)
                } else {
                    0.0
                }
            })
            .expect("lattice is non-empty")
        })
        .collect();
    let to_lattice = |p: usize, a: usize| if cell[a] > 0.0 { p as f64 / cell[a] } else { 0.0 };
    volume.warp(|z, y, x| {
        let (lz, ly, lx) = (to_lattice(z, 0), to_lattice(y, 1), to_lattice(x, 2));
        [
            z as f64 + lattices[0].sample_trilinear(lz, ly, lx),
            y as f64 + lattices[1].sample_trilinear(lz, ly, lx),
            x as f64 + lattices[2].sample_trilinear(lz, ly, lx),
        ]
    })
}
