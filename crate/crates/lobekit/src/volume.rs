//! Volumetric containers: scalar volumes, lobe label masks, binary masks,
//! and crop regions, plus HU normalization and cropping.
//!
//! Axis order is `(z, y, x)` throughout, z being the slice axis; `data` is
//! stored z-major (x varies fastest). All containers are immutable in spirit:
//! operations return new values.

use crate::error::{Error, Result};

/// Voxel grid dimensions as `[z, y, x]`.
pub type Dims = [usize; 3];

/// HU truncation window lower bound.
pub const HU_LO: f32 = -1000.0;
/// HU truncation window upper bound.
pub const HU_HI: f32 = 600.0;

/// Lobe class ids in report column order.
pub const LOBE_CLASSES: [u8; 5] = [1, 2, 3, 4, 5];
/// Lobe display names matching class ids 1..=5.
pub const LOBE_NAMES: [&str; 5] = ["RU", "RM", "RL", "LU", "LL"];
/// Number of segmentation classes including background.
pub const NUM_CLASSES: usize = 6;

/// On-disk scalar element type of a [`Volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    /// 16-bit signed integer (raw HU).
    Short,
    /// 8-bit unsigned integer (labels / binary masks).
    Uchar,
    /// 32-bit float (normalized intensities).
    Float,
}

impl ElementType {
    pub fn size_bytes(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Uchar => 1,
            ElementType::Float => 4,
        }
    }

    pub fn metaimage_name(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Uchar => "MET_UCHAR",
            ElementType::Float => "MET_FLOAT",
        }
    }
}

/// A 3D scalar grid with spacing/origin metadata.
///
/// Intensities are raw HU straight off disk or unitless `[0, 1]` after
/// [`hu_normalize`]. `element_type` remembers the storage type so a
/// write-after-read round trip is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    /// Spacing in mm per axis, `[z, y, x]` order.
    pub spacing: [f64; 3],
    /// Physical origin in mm, `[z, y, x]` order.
    pub origin: [f64; 3],
    pub element_type: ElementType,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        origin: [f64; 3],
        element_type: ElementType,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!(
                "volume data length {} != product of dims {:?}",
                data.len(),
                dims
            )));
        }
        if spacing.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            element_type,
            data,
        })
    }

    /// Uniform-valued volume with unit spacing at the origin.
    pub fn filled(dims: Dims, value: f32) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            element_type: ElementType::Float,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }
}

/// A 3D grid of lobe class ids (0 = background, 1..=5 = RU, RM, RL, LU, LL).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, spacing: [f64; 3], origin: [f64; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!(
                "label data length {} != product of dims {:?}",
                data.len(),
                dims
            )));
        }
        validate_labels(&data)?;
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
        })
    }

    /// All-background mask with unit spacing.
    pub fn background(dims: Dims) -> Self {
        Self {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.index(z, y, x)]
    }
}

/// Check every value is a valid class id.
pub fn validate_labels(data: &[u8]) -> Result<()> {
    match data.iter().find(|v| **v as usize >= NUM_CLASSES) {
        Some(v) => Err(Error::InvalidLabel(*v)),
        None => Ok(()),
    }
}

/// A 3D boolean grid used by the morphology and hull stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} != product of dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// View of slice `z` as a flat `y*x` boolean slice.
    pub fn slice(&self, z: usize) -> &[bool] {
        let n = self.dims[1] * self.dims[2];
        &self.data[z * n..(z + 1) * n]
    }
}

/// Half-open voxel box: `lo` inclusive, `hi` exclusive, `[z, y, x]` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropRegion {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CropRegion {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn dims(&self) -> Dims {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn numel(&self) -> usize {
        let d = self.dims();
        d[0] * d[1] * d[2]
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] < self.hi[a])
    }

    fn check_within(&self, dims: Dims) -> Result<()> {
        let ok = (0..3).all(|a| self.lo[a] < self.hi[a] && self.hi[a] <= dims[a]);
        if ok {
            Ok(())
        } else {
            Err(Error::RegionOutOfBounds {
                lo: self.lo,
                hi: self.hi,
                dims,
            })
        }
    }

    /// Region equivalent to cropping by `self`, then by `inner` in the
    /// cropped frame.
    pub fn compose(&self, inner: &CropRegion) -> CropRegion {
        CropRegion {
            lo: [
                self.lo[0] + inner.lo[0],
                self.lo[1] + inner.lo[1],
                self.lo[2] + inner.lo[2],
            ],
            hi: [
                self.lo[0] + inner.hi[0],
                self.lo[1] + inner.hi[1],
                self.lo[2] + inner.hi[2],
            ],
        }
    }
}

/// Truncate HU to `[-1000, 600]` and map linearly onto `[0, 1]`.
///
/// Total on any input; dims, spacing and origin pass through unchanged.
pub fn hu_normalize(v: &Volume) -> Volume {
    let span = HU_HI - HU_LO;
    let data = v
        .data
        .iter()
        .map(|hu| (hu.clamp(HU_LO, HU_HI) - HU_LO) / span)
        .collect();
    Volume {
        dims: v.dims,
        spacing: v.spacing,
        origin: v.origin,
        element_type: ElementType::Float,
        data,
    }
}

fn crop_raw<T: Copy>(data: &[T], dims: Dims, r: &CropRegion) -> Vec<T> {
    let d = r.dims();
    let mut out = Vec::with_capacity(d[0] * d[1] * d[2]);
    for z in r.lo[0]..r.hi[0] {
        for y in r.lo[1]..r.hi[1] {
            let row = (z * dims[1] + y) * dims[2];
            out.extend_from_slice(&data[row + r.lo[2]..row + r.hi[2]]);
        }
    }
    out
}

fn shift_origin(origin: [f64; 3], spacing: [f64; 3], lo: [usize; 3]) -> [f64; 3] {
    [
        origin[0] + lo[0] as f64 * spacing[0],
        origin[1] + lo[1] as f64 * spacing[1],
        origin[2] + lo[2] as f64 * spacing[2],
    ]
}

/// Crop a volume to `r`; the origin shifts by `lo * spacing`.
pub fn crop_volume(v: &Volume, r: &CropRegion) -> Result<Volume> {
    r.check_within(v.dims)?;
    Ok(Volume {
        dims: r.dims(),
        spacing: v.spacing,
        origin: shift_origin(v.origin, v.spacing, r.lo),
        element_type: v.element_type,
        data: crop_raw(&v.data, v.dims, r),
    })
}

/// Crop a label mask to `r`; the origin shifts by `lo * spacing`.
pub fn crop_labels(m: &LabelMask, r: &CropRegion) -> Result<LabelMask> {
    r.check_within(m.dims)?;
    Ok(LabelMask {
        dims: r.dims(),
        spacing: m.spacing,
        origin: shift_origin(m.origin, m.spacing, r.lo),
        data: crop_raw(&m.data, m.dims, r),
    })
}
