//! Dense voxel volumes, raw + JSON sidecar I/O, and masked statistics.
//!
//! Values are always held as `f64` in x-fastest order, so one z-slice is a
//! contiguous run of `nx * ny` values.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::ClassMask;
use crate::stats;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt sidecar {path}: {reason}")]
    CorruptSidecar { path: PathBuf, reason: String },
    #[error("size mismatch: sidecar implies {expected} bytes, data file holds {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("value {value} at voxel {index} is not representable as {dtype}")]
    Unrepresentable {
        index: usize,
        value: f64,
        dtype: Dtype,
    },
    #[error("mask dimensions {mask:?} do not match grid dimensions {grid:?}")]
    MaskMismatch {
        grid: (usize, usize, usize),
        mask: (usize, usize, usize),
    },
    #[error("selection contains no voxels")]
    EmptySelection,
}

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Intensity,
    #[serde(rename = "permeability_md")]
    PermeabilityMilliDarcy,
    Labels,
    Pressure,
}

/// On-disk scalar type; always little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        };
        f.write_str(s)
    }
}

/// Axis along which flow is imposed. Decoding always integrates along z, so
/// other axes are handled by [`VoxelGrid::reorient`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowAxis {
    X,
    Y,
    #[default]
    Z,
}

impl std::str::FromStr for FlowAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "x" | "X" => Ok(FlowAxis::X),
            "y" | "Y" => Ok(FlowAxis::Y),
            "z" | "Z" => Ok(FlowAxis::Z),
            other => Err(format!("unknown flow axis '{other}' (expected x, y or z)")),
        }
    }
}

/// Cyclic permutation bringing `axis` onto z. Returns the new dims and values.
pub(crate) fn reorient_values<T: Copy>(
    dims: (usize, usize, usize),
    values: &[T],
    axis: FlowAxis,
) -> ((usize, usize, usize), Vec<T>) {
    let (nx, ny, nz) = dims;
    let src = |x: usize, y: usize, z: usize| values[x + nx * (y + ny * z)];
    match axis {
        FlowAxis::Z => (dims, values.to_vec()),
        // new (x', y', z') = old (y, z, x)
        FlowAxis::X => {
            let (mx, my, mz) = (ny, nz, nx);
            let mut out = Vec::with_capacity(values.len());
            for z in 0..mz {
                for y in 0..my {
                    for x in 0..mx {
                        out.push(src(z, x, y));
                    }
                }
            }
            ((mx, my, mz), out)
        }
        // new (x', y', z') = old (z, x, y)
        FlowAxis::Y => {
            let (mx, my, mz) = (nz, nx, ny);
            let mut out = Vec::with_capacity(values.len());
            for z in 0..mz {
                for y in 0..my {
                    for x in 0..mx {
                        out.push(src(y, z, x));
                    }
                }
            }
            ((mx, my, mz), out)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    nx: usize,
    ny: usize,
    nz: usize,
    voxel_size_um: f64,
    values: Vec<f64>,
    value_kind: ValueKind,
    acquisition_tag: Option<String>,
}

impl VoxelGrid {
    pub fn new(
        (nx, ny, nz): (usize, usize, usize),
        voxel_size_um: f64,
        values: Vec<f64>,
        value_kind: ValueKind,
    ) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(GridError::InvalidGrid(format!(
                "dimensions must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        if !(voxel_size_um.is_finite() && voxel_size_um > 0.0) {
            return Err(GridError::InvalidGrid(format!(
                "voxel size must be positive, got {voxel_size_um}"
            )));
        }
        if values.len() != nx * ny * nz {
            return Err(GridError::InvalidGrid(format!(
                "expected {} values for {nx}x{ny}x{nz}, got {}",
                nx * ny * nz,
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite { index });
        }
        Ok(Self {
            nx,
            ny,
            nz,
            voxel_size_um,
            values,
            value_kind,
            acquisition_tag: None,
        })
    }

    pub fn filled(
        dims: (usize, usize, usize),
        voxel_size_um: f64,
        value: f64,
        value_kind: ValueKind,
    ) -> Result<Self> {
        Self::new(
            dims,
            voxel_size_um,
            vec![value; dims.0 * dims.1 * dims.2],
            value_kind,
        )
    }

    /// Builds a grid by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn<F>(
        dims: (usize, usize, usize),
        voxel_size_um: f64,
        value_kind: ValueKind,
        mut f: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        let (nx, ny, nz) = dims;
        let mut values = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, voxel_size_um, values, value_kind)
    }

    pub fn with_acquisition_tag(mut self, tag: impl Into<String>) -> Self {
        self.acquisition_tag = Some(tag.into());
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voxel_size_um(&self) -> f64 {
        self.voxel_size_um
    }

    pub fn value_kind(&self) -> ValueKind {
        self.value_kind
    }

    pub fn acquisition_tag(&self) -> Option<&str> {
        self.acquisition_tag.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(x, y, z)]
    }

    /// Contiguous values of the x-y slice at `z`.
    pub fn slice_z(&self, z: usize) -> &[f64] {
        let n = self.nx * self.ny;
        &self.values[z * n..(z + 1) * n]
    }

    /// Same geometry, different values and kind.
    pub fn with_values(&self, values: Vec<f64>, value_kind: ValueKind) -> Result<Self> {
        let mut g = Self::new(self.dims(), self.voxel_size_um, values, value_kind)?;
        g.acquisition_tag = self.acquisition_tag.clone();
        Ok(g)
    }

    /// Rotates the volume so that `axis` becomes the z (flow) axis.
    pub fn reorient(&self, axis: FlowAxis) -> Self {
        let (dims, values) = reorient_values(self.dims(), &self.values, axis);
        Self {
            nx: dims.0,
            ny: dims.1,
            nz: dims.2,
            voxel_size_um: self.voxel_size_um,
            values,
            value_kind: self.value_kind,
            acquisition_tag: self.acquisition_tag.clone(),
        }
    }

    /// Values selected by an optional class mask, in voxel order.
    pub fn select(&self, mask: Option<ClassMask<'_>>) -> Result<Vec<f64>> {
        let Some(mask) = mask else {
            return Ok(self.values.clone());
        };
        if mask.labels.dims() != self.dims() {
            return Err(GridError::MaskMismatch {
                grid: self.dims(),
                mask: mask.labels.dims(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(mask.labels.labels())
            .filter(|(_, &l)| l == mask.class)
            .map(|(&v, _)| v)
            .collect())
    }
}

/// Direct arithmetic mean of the selected voxels.
pub fn masked_mean(grid: &VoxelGrid, mask: Option<ClassMask<'_>>) -> Result<f64> {
    let selected = grid.select(mask)?;
    stats::shifted_mean(&selected).ok_or(GridError::EmptySelection)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows followed by a `# mean=` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.bin_edges[i],
                self.bin_edges[i + 1],
                c
            ));
        }
        out.push_str(&format!("# mean={}\n", self.mean));
        out
    }
}

/// Histogram over the value range of the selected voxels.
///
/// The mean is the exact voxel mean, not a bin-centre estimate. A constant
/// selection gets a unit-wide range centred on the constant.
pub fn histogram(
    grid: &VoxelGrid,
    n_bins: usize,
    mask: Option<ClassMask<'_>>,
) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(GridError::InvalidGrid(
            "histogram needs at least one bin".into(),
        ));
    }
    let selected = grid.select(mask)?;
    let (lo, hi) = stats::min_max(&selected).ok_or(GridError::EmptySelection)?;
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / n_bins as f64;
    let mut bin_edges: Vec<f64> = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    bin_edges[n_bins] = hi;
    let mut counts = vec![0u64; n_bins];
    for &v in &selected {
        let b = (((v - lo) / (hi - lo)) * n_bins as f64).floor() as usize;
        counts[b.min(n_bins - 1)] += 1;
    }
    let mean = stats::shifted_mean(&selected).ok_or(GridError::EmptySelection)?;
    Ok(Histogram {
        bin_edges,
        counts,
        mean,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    nx: usize,
    ny: usize,
    nz: usize,
    voxel_size_um: f64,
    dtype: Dtype,
    value_kind: ValueKind,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    acquisition_tag: Option<String>,
}

const ORDER_X_FASTEST: &str = "x-fastest";

/// `<name>.meta.json` next to the data file `<name>.<ext>`.
pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("meta.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GridError + '_ {
    move |source| GridError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads the data file at `path` and its sidecar.
pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    let meta_path = sidecar_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| GridError::CorruptSidecar {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| GridError::CorruptSidecar {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.order != ORDER_X_FASTEST {
        return Err(GridError::CorruptSidecar {
            path: meta_path,
            reason: format!("unsupported voxel order '{}'", meta.order),
        });
    }
    let n = meta
        .nx
        .checked_mul(meta.ny)
        .and_then(|v| v.checked_mul(meta.nz))
        .ok_or_else(|| GridError::CorruptSidecar {
            path: meta_path.clone(),
            reason: "dimension product overflows".into(),
        })?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = (n as u64) * meta.dtype.size() as u64;
    if bytes.len() as u64 != expected {
        return Err(GridError::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = match meta.dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
        Dtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let mut grid = VoxelGrid::new(
        (meta.nx, meta.ny, meta.nz),
        meta.voxel_size_um,
        values,
        meta.value_kind,
    )?;
    grid.acquisition_tag = meta.acquisition_tag;
    Ok(grid)
}

/// Writes `grid` as little-endian f64 plus sidecar; bit-exact with [`load_grid`].
pub fn save_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    save_grid_as(grid, path, Dtype::F64)
}

/// Writes `grid` with an explicit on-disk dtype. Integer dtypes require
/// integral in-range values; f32 is lossy.
pub fn save_grid_as(grid: &VoxelGrid, path: &Path, dtype: Dtype) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.len() * dtype.size());
    for (index, &value) in grid.values.iter().enumerate() {
        let bad = || GridError::Unrepresentable {
            index,
            value,
            dtype,
        };
        match dtype {
            Dtype::U8 => {
                if value.fract() != 0.0 || !(0.0..=u8::MAX as f64).contains(&value) {
                    return Err(bad());
                }
                bytes.push(value as u8);
            }
            Dtype::U16 => {
                if value.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&value) {
                    return Err(bad());
                }
                bytes.extend_from_slice(&(value as u16).to_le_bytes());
            }
            Dtype::F32 => {
                let v = value as f32;
                if !v.is_finite() {
                    return Err(bad());
                }
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            Dtype::F64 => bytes.extend_from_slice(&value.to_le_bytes()),
        }
    }
    let meta = Sidecar {
        nx: grid.nx,
        ny: grid.ny,
        nz: grid.nz,
        voxel_size_um: grid.voxel_size_um,
        dtype,
        value_kind: grid.value_kind,
        order: ORDER_X_FASTEST.to_string(),
        acquisition_tag: grid.acquisition_tag.clone(),
    };
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    let meta_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;
    Ok(())
}
