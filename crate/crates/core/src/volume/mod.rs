//! Volume data model: scalar volumes, label volumes, orthogonal slices,
//! window/level normalization and voxel/world transforms.

mod nifti;
mod surface;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

pub use self::nifti::{load_volume, read_volume, save_label_volume, save_volume, write_label_volume};
pub use self::surface::{extract_surface, write_stl, TriangleMesh};

/// Row-major 4x4 voxel-index to world (RAS, mm) matrix.
pub type Affine = [[f64; 4]; 4];

/// Relative tolerance used when checking spacing against the affine column norms.
const SPACING_REL_TOL: f64 = 1e-4;

static NEXT_VOLUME_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("invalid dimensions {0:?}: every component must be >= 1")]
    InvalidDims([usize; 3]),
    #[error("voxel buffer holds {got} values, dimensions require {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error("affine is singular or not finite")]
    SingularAffine,
    #[error("spacing {spacing:?} disagrees with affine column norms {norms:?}")]
    SpacingMismatch { spacing: [f64; 3], norms: [f64; 3] },
    #[error("slice index {index} out of range for axis {axis} (len {len})")]
    SliceOutOfRange { axis: Axis, index: usize, len: usize },
    #[error("window must be finite and > 0, got {0}")]
    InvalidWindow(f64),
    #[error("label volume dims {label:?} do not match parent dims {parent:?}")]
    DimsMismatch { label: [usize; 3], parent: [usize; 3] },
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("expected a 3-dimensional image, found {0} dimensions")]
    DimensionCount(usize),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Opaque volume identifier, unique within a process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VolumeId(pub u64);

impl VolumeId {
    pub fn fresh() -> Self {
        VolumeId(NEXT_VOLUME_ID.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for VolumeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Slicing axis. The numeric value is the index held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Axis {
    /// Fixed x index.
    Sagittal = 0,
    /// Fixed y index.
    Coronal = 1,
    /// Fixed z index.
    Axial = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Sagittal, Axis::Coronal, Axis::Axial];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
            Axis::Axial => "axial",
        };
        f.write_str(name)
    }
}

impl TryFrom<u8> for Axis {
    type Error = u8;

    fn try_from(v: u8) -> Result<Self, u8> {
        Axis::from_index(v as usize).ok_or(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SliceRef {
    pub axis: Axis,
    pub index: usize,
}

impl SliceRef {
    pub fn new(axis: Axis, index: usize) -> Self {
        SliceRef { axis, index }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<(), VolumeError> {
        let len = dims[self.axis.index()];
        if self.index < len {
            Ok(())
        } else {
            Err(VolumeError::SliceOutOfRange { axis: self.axis, index: self.index, len })
        }
    }
}

/// `(rows, cols)` of a slice taken along `axis`.
pub fn slice_shape(dims: [usize; 3], axis: Axis) -> (usize, usize) {
    let [nx, ny, nz] = dims;
    match axis {
        Axis::Axial => (ny, nx),
        Axis::Coronal => (nz, nx),
        Axis::Sagittal => (nz, ny),
    }
}

/// Linear voxel index of slice pixel `(row, col)`.
#[inline]
pub fn slice_voxel_index(dims: [usize; 3], slice: SliceRef, row: usize, col: usize) -> usize {
    let [nx, ny, _] = dims;
    let (x, y, z) = match slice.axis {
        Axis::Axial => (col, row, slice.index),
        Axis::Coronal => (col, slice.index, row),
        Axis::Sagittal => (slice.index, col, row),
    };
    x + nx * (y + ny * z)
}

/// Linear voxel indices of a slice in row-major pixel order.
pub fn slice_indices(dims: [usize; 3], slice: SliceRef) -> impl Iterator<Item = usize> {
    let (rows, cols) = slice_shape(dims, slice.axis);
    (0..rows).flat_map(move |r| (0..cols).map(move |c| slice_voxel_index(dims, slice, r, c)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowLevel {
    window: f64,
    level: f64,
}

impl WindowLevel {
    pub fn new(window: f64, level: f64) -> Result<Self, VolumeError> {
        if !(window.is_finite() && window > 0.0) || !level.is_finite() {
            return Err(VolumeError::InvalidWindow(window));
        }
        Ok(WindowLevel { window, level })
    }

    /// Window spanning `[min, max]`. A degenerate range gets window 1.
    pub fn from_range(min: f64, max: f64) -> Self {
        let window = if max > min { max - min } else { 1.0 };
        WindowLevel { window, level: 0.5 * (min + max) }
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        let lower = self.level - self.window / 2.0;
        ((v as f64 - lower) / self.window).clamp(0.0, 1.0) as f32
    }
}

/// One orthogonal slice of a volume, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
    pub origin: SliceRef,
}

/// A window/level-mapped slice with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSlice {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
    pub origin: SliceRef,
}

impl Slice2D {
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.cols + col]
    }
}

pub fn apply_window_level(slice: &Slice2D, wl: WindowLevel) -> NormalizedSlice {
    NormalizedSlice {
        rows: slice.rows,
        cols: slice.cols,
        pixels: slice.pixels.iter().map(|&v| wl.apply(v)).collect(),
        origin: slice.origin,
    }
}

#[derive(Debug, Clone)]
pub struct Volume {
    id: VolumeId,
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Affine,
    voxels: Vec<f32>,
}

impl Volume {
    /// Builds a volume from an affine; spacing is taken from the affine's column norms.
    pub fn new(dims: [usize; 3], affine: Affine, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        check_dims(dims, voxels.len())?;
        check_affine(&affine)?;
        Ok(Volume { id: VolumeId::fresh(), dims, spacing: column_norms(&affine), affine, voxels })
    }

    /// Builds a volume with an axis-aligned affine of the given spacing.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self, VolumeError> {
        Volume::new(dims, diagonal_affine(spacing), voxels)
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let [nx, ny, nz] = dims;
        let mut voxels = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Volume::with_spacing(dims, spacing, voxels)
    }

    pub fn id(&self) -> VolumeId {
        self.id
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn index_of(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index_of(x, y, z)]
    }

    /// `(min, max)` over all voxels; NaNs are ignored.
    pub fn intensity_range(&self) -> (f32, f32) {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &v in &self.voxels {
            if v < min {
                min = v;
            }
            if v > max {
                max = v;
            }
        }
        if min > max {
            (0.0, 0.0)
        } else {
            (min, max)
        }
    }

    pub fn default_window_level(&self) -> WindowLevel {
        let (min, max) = self.intensity_range();
        WindowLevel::from_range(min as f64, max as f64)
    }

    pub fn slice_shape(&self, axis: Axis) -> (usize, usize) {
        slice_shape(self.dims, axis)
    }

    pub fn extract_slice(&self, slice: SliceRef) -> Result<Slice2D, VolumeError> {
        slice.validate(self.dims)?;
        let [nx, ny, _] = self.dims;
        let (rows, cols) = self.slice_shape(slice.axis);
        let pixels = match slice.axis {
            Axis::Axial => {
                let start = nx * ny * slice.index;
                self.voxels[start..start + nx * ny].to_vec()
            }
            Axis::Coronal => {
                let mut out = Vec::with_capacity(rows * cols);
                for z in 0..rows {
                    let start = nx * (slice.index + ny * z);
                    out.extend_from_slice(&self.voxels[start..start + nx]);
                }
                out
            }
            Axis::Sagittal => slice_indices(self.dims, slice).map(|i| self.voxels[i]).collect(),
        };
        Ok(Slice2D { rows, cols, pixels, origin: slice })
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let a = &self.affine;
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3];
        }
        out
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        // check_affine guarantees invertibility
        let inv = invert3(&self.affine).expect("affine validated at construction");
        let t = [w[0] - self.affine[0][3], w[1] - self.affine[1][3], w[2] - self.affine[2][3]];
        let mut out = [0.0; 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = inv[r][0] * t[0] + inv[r][1] * t[1] + inv[r][2] * t[2];
        }
        out
    }
}

/// Integer labels accumulated over one parent volume. 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    parent: VolumeId,
    dims: [usize; 3],
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new_for(parent: &Volume) -> Self {
        LabelVolume { parent: parent.id(), dims: parent.dims(), labels: vec![0; parent.voxel_count()] }
    }

    pub fn from_labels(parent: &Volume, dims: [usize; 3], labels: Vec<u16>) -> Result<Self, VolumeError> {
        check_dims(dims, labels.len())?;
        if dims != parent.dims() {
            return Err(VolumeError::DimsMismatch { label: dims, parent: parent.dims() });
        }
        Ok(LabelVolume { parent: parent.id(), dims, labels })
    }

    pub fn parent(&self) -> VolumeId {
        self.parent
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    /// Row-major copy of one slice of labels.
    pub fn slice_labels(&self, slice: SliceRef) -> Vec<u16> {
        slice_indices(self.dims, slice).map(|i| self.labels[i]).collect()
    }

    pub fn write_slice_labels(&mut self, slice: SliceRef, values: &[u16]) {
        for (i, &v) in slice_indices(self.dims, slice).zip(values) {
            self.labels[i] = v;
        }
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<(), VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::InvalidDims(dims));
    }
    let expected = dims[0] * dims[1] * dims[2];
    if expected != len {
        return Err(VolumeError::BufferLength { expected, got: len });
    }
    Ok(())
}

fn check_affine(a: &Affine) -> Result<(), VolumeError> {
    if a.iter().flatten().any(|v| !v.is_finite()) {
        return Err(VolumeError::SingularAffine);
    }
    invert3(a).map(|_| ()).ok_or(VolumeError::SingularAffine)
}

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    let mut a = [[0.0; 4]; 4];
    for (i, &s) in spacing.iter().enumerate() {
        a[i][i] = s;
    }
    a[3][3] = 1.0;
    a
}

pub(crate) fn column_norms(a: &Affine) -> [f64; 3] {
    let mut n = [0.0; 3];
    for (c, v) in n.iter_mut().enumerate() {
        *v = (a[0][c] * a[0][c] + a[1][c] * a[1][c] + a[2][c] * a[2][c]).sqrt();
    }
    n
}

/// Checks a declared spacing against the affine, within relative tolerance.
pub fn spacing_matches(affine: &Affine, spacing: [f64; 3]) -> bool {
    let norms = column_norms(affine);
    norms.iter().zip(spacing).all(|(&n, s)| (n - s).abs() <= SPACING_REL_TOL * n.abs().max(s.abs()))
}

/// Inverse of the upper-left 3x3 block, or `None` when singular.
fn invert3(a: &Affine) -> Option<[[f64; 3]; 3]> {
    let m = |r: usize, c: usize| a[r][c];
    let c00 = m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1);
    let c01 = m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2);
    let c02 = m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0);
    let det = m(0, 0) * c00 + m(0, 1) * c01 + m(0, 2) * c02;
    let scale = a.iter().take(3).flat_map(|r| r[..3].iter()).fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !det.is_finite() || det.abs() <= f64::EPSILON * scale.powi(3) || scale == 0.0 {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        [
            c00 * inv_det,
            (m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2)) * inv_det,
            (m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1)) * inv_det,
        ],
        [
            c01 * inv_det,
            (m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0)) * inv_det,
            (m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2)) * inv_det,
        ],
        [
            c02 * inv_det,
            (m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1)) * inv_det,
            (m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0)) * inv_det,
        ],
    ])
}
