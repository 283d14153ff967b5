//! Catalog of augmentation operations and their magnitude ranges.
//!
//! Every searchable operation is split into a left range (at or below its
//! identity magnitude) and a right range (at or above it) when both make
//! sense; otherwise it carries a single range. Mirror and random crop are
//! root operations: always applied first and never searched.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Mirror,
    RandomCrop,
    ContrastAdjustment,
    GammaTransform,
    BrightnessTransform,
    GaussianNoise,
    GaussianBlur,
    SimulateLowRes,
    Scale,
    OpticalDistortion,
    ElasticTransform,
    GridDistortion,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Mirror,
        OpKind::RandomCrop,
        OpKind::ContrastAdjustment,
        OpKind::GammaTransform,
        OpKind::BrightnessTransform,
        OpKind::GaussianNoise,
        OpKind::GaussianBlur,
        OpKind::SimulateLowRes,
        OpKind::Scale,
        OpKind::OpticalDistortion,
        OpKind::ElasticTransform,
        OpKind::GridDistortion,
    ];

    pub fn level(self) -> Level {
        match self {
            OpKind::Mirror | OpKind::RandomCrop => Level::Root,
            OpKind::ContrastAdjustment
            | OpKind::GammaTransform
            | OpKind::BrightnessTransform
            | OpKind::GaussianNoise
            | OpKind::GaussianBlur
            | OpKind::SimulateLowRes => Level::PixelLevel,
            OpKind::Scale
            | OpKind::OpticalDistortion
            | OpKind::ElasticTransform
            | OpKind::GridDistortion => Level::SpatialLevel,
        }
    }

    pub fn is_root(self) -> bool {
        self.level() == Level::Root
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Mirror => "mirror",
            OpKind::RandomCrop => "random_crop",
            OpKind::ContrastAdjustment => "contrast_adjustment",
            OpKind::GammaTransform => "gamma_transform",
            OpKind::BrightnessTransform => "brightness_transform",
            OpKind::GaussianNoise => "gaussian_noise",
            OpKind::GaussianBlur => "gaussian_blur",
            OpKind::SimulateLowRes => "simulate_low_res",
            OpKind::Scale => "scale",
            OpKind::OpticalDistortion => "optical_distortion",
            OpKind::ElasticTransform => "elastic_transform",
            OpKind::GridDistortion => "grid_distortion",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Single,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Single => "single",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Root,
    PixelLevel,
    SpatialLevel,
}

#[derive(Debug, Error, PartialEq)]
pub enum CatalogError {
    #[error("invalid range for {kind} ({side}): lo={lo} hi={hi}")]
    InvalidRange {
        kind: OpKind,
        side: Side,
        lo: f64,
        hi: f64,
    },
    #[error("root operation {0} cannot be searched")]
    RootInCatalog(OpKind),
    #[error("duplicate variant {0} ({1})")]
    Duplicate(OpKind, Side),
    #[error("{0} is not a root operation")]
    NotRoot(OpKind),
    #[error("catalog has no searchable variants")]
    Empty,
}

/// Closed magnitude interval `[lo, hi]`.
///
/// Table ranges are strict (`lo < hi`); a zero-width range is accepted for
/// configuration overrides that pin an operation to one magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRange {
    pub lo: f64,
    pub hi: f64,
    pub side: Side,
}

impl MagnitudeRange {
    pub const fn new(lo: f64, hi: f64, side: Side) -> Self {
        Self { lo, hi, side }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, m: f64) -> bool {
        m >= self.lo && m <= self.hi
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// One searchable (or root) augmentation: an operation pinned to one range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpVariant {
    pub kind: OpKind,
    pub range: MagnitudeRange,
}

impl OpVariant {
    pub const fn new(kind: OpKind, lo: f64, hi: f64, side: Side) -> Self {
        Self {
            kind,
            range: MagnitudeRange::new(lo, hi, side),
        }
    }

    pub fn level(&self) -> Level {
        self.kind.level()
    }

    pub fn side(&self) -> Side {
        self.range.side
    }

    pub fn key(&self) -> VariantKey {
        VariantKey {
            op: self.kind,
            side: self.range.side,
        }
    }
}

impl fmt::Display for OpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}[{}, {}]",
            self.kind, self.range.side, self.range.lo, self.range.hi
        )
    }
}

/// Identifies a variant by operation and side; unique within a catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariantKey {
    pub op: OpKind,
    pub side: Side,
}

impl fmt::Display for VariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.op, self.side)
    }
}

/// Ordered, immutable set of searchable variants plus the root operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCatalog", into = "RawCatalog")]
pub struct Catalog {
    variants: Vec<OpVariant>,
    roots: Vec<OpVariant>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCatalog {
    roots: Vec<OpVariant>,
    variants: Vec<OpVariant>,
}

impl TryFrom<RawCatalog> for Catalog {
    type Error = CatalogError;

    fn try_from(raw: RawCatalog) -> Result<Self, Self::Error> {
        Catalog::new(raw.variants, raw.roots)
    }
}

impl From<Catalog> for RawCatalog {
    fn from(c: Catalog) -> Self {
        RawCatalog {
            roots: c.roots,
            variants: c.variants,
        }
    }
}

impl Catalog {
    pub fn new(variants: Vec<OpVariant>, roots: Vec<OpVariant>) -> Result<Self, CatalogError> {
        if variants.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut seen = std::collections::HashSet::new();
        for v in &variants {
            if v.kind.is_root() {
                return Err(CatalogError::RootInCatalog(v.kind));
            }
            check_range(v)?;
            if !seen.insert(v.key()) {
                return Err(CatalogError::Duplicate(v.kind, v.side()));
            }
        }
        for r in &roots {
            if !r.kind.is_root() {
                return Err(CatalogError::NotRoot(r.kind));
            }
            check_range(r)?;
        }
        Ok(Self { variants, roots })
    }

    pub fn variants(&self) -> &[OpVariant] {
        &self.variants
    }

    pub fn roots(&self) -> &[OpVariant] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&OpVariant> {
        self.variants.get(index)
    }

    pub fn index_of(&self, key: VariantKey) -> Option<usize> {
        self.variants.iter().position(|v| v.key() == key)
    }
}

fn check_range(v: &OpVariant) -> Result<(), CatalogError> {
    if v.range.is_valid() {
        Ok(())
    } else {
        Err(CatalogError::InvalidRange {
            kind: v.kind,
            side: v.side(),
            lo: v.range.lo,
            hi: v.range.hi,
        })
    }
}

/// Per-axis flip probability carried by the mirror root operation.
pub const MIRROR_FLIP_PROBABILITY: f64 = 0.5;

/// Root operations: mirror, then random crop with pad fraction in (0, 0.33).
pub fn root_ops() -> Vec<OpVariant> {
    vec![
        OpVariant::new(
            OpKind::Mirror,
            MIRROR_FLIP_PROBABILITY,
            MIRROR_FLIP_PROBABILITY,
            Side::Single,
        ),
        OpVariant::new(OpKind::RandomCrop, 0.0, 0.33, Side::Single),
    ]
}

/// The full search space in table order, left range before right range.
pub fn default_catalog() -> Catalog {
    use OpKind::*;
    use Side::*;
    let variants = vec![
        OpVariant::new(ContrastAdjustment, 0.5, 1.0, Left),
        OpVariant::new(ContrastAdjustment, 1.0, 1.5, Right),
        OpVariant::new(GammaTransform, 0.5, 1.0, Left),
        OpVariant::new(GammaTransform, 1.0, 1.5, Right),
        OpVariant::new(BrightnessTransform, 0.5, 1.0, Left),
        OpVariant::new(BrightnessTransform, 1.0, 1.5, Right),
        OpVariant::new(GaussianNoise, 0.0, 0.1, Single),
        OpVariant::new(GaussianBlur, 0.5, 1.0, Left),
        OpVariant::new(GaussianBlur, 1.0, 1.5, Right),
        OpVariant::new(SimulateLowRes, 0.5, 1.0, Single),
        OpVariant::new(Scale, 0.5, 1.0, Left),
        OpVariant::new(Scale, 1.0, 1.5, Right),
        OpVariant::new(OpticalDistortion, 0.0, 0.05, Single),
        OpVariant::new(ElasticTransform, 0.0, 50.0, Single),
        OpVariant::new(GridDistortion, 0.0, 0.3, Single),
    ];
    Catalog::new(variants, root_ops()).expect("default catalog is valid")
}

/// Draws a magnitude uniformly from the closed range of `variant`.
pub fn sample_magnitude<T: Scalar, R: Rng + ?Sized>(variant: &OpVariant, rng: &mut R) -> T {
    let MagnitudeRange { lo, hi, .. } = variant.range;
    if hi <= lo {
        return T::of(lo);
    }
    // u in [0, 1); clamp guards the last ulp of lo + u * (hi - lo).
    let u: f64 = rng.random();
    T::of((lo + u * (hi - lo)).clamp(lo, hi))
}
