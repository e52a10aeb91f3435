//! Supervised voxel classification into heterogeneity-zone classes.
//!
//! Each voxel is described by four local features (raw intensity, 3×3×3
//! mean, 3×3×3 standard deviation, central-difference gradient magnitude).
//! Features are z-scored with training statistics and voxels are labelled
//! by a k-nearest-neighbour vote over expert-placed seed voxels.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, Dtype, GridError, ValueKind, VoxelGrid};
use crate::stats;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("voxel ({x}, {y}, {z}) lies outside a {dims:?} grid")]
    OutOfRange {
        x: usize,
        y: usize,
        z: usize,
        dims: (usize, usize, usize),
    },
    #[error("no training seeds for class(es) {0:?}")]
    MissingClassSeeds(Vec<DhzClass>),
    #[error("k must be odd and between 1 and the seed count ({n_seeds}), got {k}")]
    InvalidK { k: usize, n_seeds: usize },
    #[error("every feature has zero variance over the training seeds")]
    NoUsableFeatures,
    #[error("label grid dims {labels:?} do not match {expected:?}")]
    DimMismatch {
        labels: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("invalid label id {0}")]
    InvalidLabel(u8),
    #[error("unknown class name '{0}'")]
    UnknownClass(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SegmentError>;

/// Heterogeneity-zone classes, ids 0..=3 in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DhzClass {
    Pyrite = 0,
    OpenVug = 1,
    Intergranular1 = 2,
    Intergranular2 = 3,
}

impl DhzClass {
    pub const ALL: [DhzClass; 4] = [
        DhzClass::Pyrite,
        DhzClass::OpenVug,
        DhzClass::Intergranular1,
        DhzClass::Intergranular2,
    ];
    pub const COUNT: usize = 4;

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DhzClass::Pyrite => "Pyrite",
            DhzClass::OpenVug => "OpenVug",
            DhzClass::Intergranular1 => "Intergranular1",
            DhzClass::Intergranular2 => "Intergranular2",
        }
    }
}

impl fmt::Display for DhzClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DhzClass {
    type Err = SegmentError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SegmentError::UnknownClass(s.to_string()))
    }
}

/// One label per voxel, same ordering as [`VoxelGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    nx: usize,
    ny: usize,
    nz: usize,
    labels: Vec<DhzClass>,
}

impl LabelGrid {
    pub fn new((nx, ny, nz): (usize, usize, usize), labels: Vec<DhzClass>) -> Result<Self> {
        if nx * ny * nz == 0 || labels.len() != nx * ny * nz {
            return Err(SegmentError::Grid(GridError::InvalidGrid(format!(
                "{} labels for a {nx}x{ny}x{nz} grid",
                labels.len()
            ))));
        }
        Ok(Self { nx, ny, nz, labels })
    }

    pub fn filled(dims: (usize, usize, usize), class: DhzClass) -> Self {
        Self::new(dims, vec![class; dims.0 * dims.1 * dims.2]).expect("non-empty dims")
    }

    pub fn from_fn<F>(dims: (usize, usize, usize), mut f: F) -> Self
    where
        F: FnMut(usize, usize, usize) -> DhzClass,
    {
        let (nx, ny, nz) = dims;
        let mut labels = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    labels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, labels).expect("non-empty dims")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn labels(&self) -> &[DhzClass] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> DhzClass {
        self.labels[x + self.nx * (y + self.ny * z)]
    }

    pub fn reorient(&self, axis: grid::FlowAxis) -> Self {
        let (dims, labels) = grid::reorient_values(self.dims(), &self.labels, axis);
        Self {
            nx: dims.0,
            ny: dims.1,
            nz: dims.2,
            labels,
        }
    }

    pub fn to_voxel_grid(&self, voxel_size_um: f64) -> Result<VoxelGrid> {
        let values = self.labels.iter().map(|c| c.id() as f64).collect();
        Ok(VoxelGrid::new(
            self.dims(),
            voxel_size_um,
            values,
            ValueKind::Labels,
        )?)
    }

    pub fn from_voxel_grid(g: &VoxelGrid) -> Result<Self> {
        let labels = g
            .values()
            .iter()
            .map(|&v| {
                let id = v as u8;
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(SegmentError::InvalidLabel(255));
                }
                DhzClass::from_id(id).ok_or(SegmentError::InvalidLabel(id))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(g.dims(), labels)
    }
}

/// Raw u8 data plus sidecar with `value_kind: "labels"`.
pub fn save_labels(labels: &LabelGrid, voxel_size_um: f64, path: &Path) -> Result<()> {
    grid::save_grid_as(&labels.to_voxel_grid(voxel_size_um)?, path, Dtype::U8)?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelGrid> {
    LabelGrid::from_voxel_grid(&grid::load_grid(path)?)
}

/// Restricts a computation to the voxels of one class.
#[derive(Debug, Clone, Copy)]
pub struct ClassMask<'a> {
    pub labels: &'a LabelGrid,
    pub class: DhzClass,
}

impl<'a> ClassMask<'a> {
    pub fn new(labels: &'a LabelGrid, class: DhzClass) -> Self {
        Self { labels, class }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    #[serde(rename = "class_name")]
    pub class: DhzClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainingSeeds(pub Vec<Seed>);

impl TrainingSeeds {
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        for s in &self.0 {
            if s.x >= dims.0 || s.y >= dims.1 || s.z >= dims.2 {
                return Err(SegmentError::OutOfRange {
                    x: s.x,
                    y: s.y,
                    z: s.z,
                    dims,
                });
            }
        }
        let missing: Vec<DhzClass> = DhzClass::ALL
            .into_iter()
            .filter(|c| !self.0.iter().any(|s| s.class == *c))
            .collect();
        if !missing.is_empty() {
            return Err(SegmentError::MissingClassSeeds(missing));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub const N_FEATURES: usize = 4;
pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["intensity", "mean_3x3x3", "std_3x3x3", "gradient_magnitude"];

pub type Features = [f64; N_FEATURES];

#[inline]
fn clamp_index(i: usize, d: isize, n: usize) -> usize {
    (i as isize + d).clamp(0, n as isize - 1) as usize
}

fn features_unchecked(g: &VoxelGrid, x: usize, y: usize, z: usize) -> Features {
    let (nx, ny, nz) = g.dims();
    let mut hood = [0.0; 27];
    let mut n = 0;
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                hood[n] = g.get(
                    clamp_index(x, dx, nx),
                    clamp_index(y, dy, ny),
                    clamp_index(z, dz, nz),
                );
                n += 1;
            }
        }
    }
    let mean = stats::shifted_mean(&hood).expect("non-empty");
    let sq: Vec<f64> = hood.iter().map(|v| (v - mean) * (v - mean)).collect();
    let std = (stats::pairwise_sum(&sq) / 27.0).sqrt();
    let diff = |a: f64, b: f64| 0.5 * (a - b);
    let gx = diff(
        g.get(clamp_index(x, 1, nx), y, z),
        g.get(clamp_index(x, -1, nx), y, z),
    );
    let gy = diff(
        g.get(x, clamp_index(y, 1, ny), z),
        g.get(x, clamp_index(y, -1, ny), z),
    );
    let gz = diff(
        g.get(x, y, clamp_index(z, 1, nz)),
        g.get(x, y, clamp_index(z, -1, nz)),
    );
    [
        g.get(x, y, z),
        mean,
        std,
        (gx * gx + gy * gy + gz * gz).sqrt(),
    ]
}

/// Feature vector at one voxel; neighbourhoods are edge-replicated.
pub fn extract_features(g: &VoxelGrid, x: usize, y: usize, z: usize) -> Result<Features> {
    if x >= g.nx() || y >= g.ny() || z >= g.nz() {
        return Err(SegmentError::OutOfRange {
            x,
            y,
            z,
            dims: g.dims(),
        });
    }
    Ok(features_unchecked(g, x, y, z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub feature_names: Vec<String>,
    pub feature_mean: Features,
    pub feature_std: Features,
    /// Features kept after dropping zero-variance ones.
    pub active: [bool; N_FEATURES],
    pub dropped_features: Vec<String>,
    /// Standardised training vectors over the active features only.
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<DhzClass>,
    pub k: usize,
}

impl ClassifierModel {
    fn standardize(&self, f: &Features) -> Vec<f64> {
        (0..N_FEATURES)
            .filter(|&i| self.active[i])
            .map(|i| (f[i] - self.feature_mean[i]) / self.feature_std[i])
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Majority vote of the k nearest training vectors; ties go to the
    /// smallest class id, equal distances to the earlier training vector.
    fn vote(&self, query: &[f64]) -> DhzClass {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for (i, v) in self.vectors.iter().enumerate() {
            let d: f64 = v.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() == self.k && d >= best[self.k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, i));
            best.truncate(self.k);
        }
        let mut counts = [0usize; DhzClass::COUNT];
        for &(_, i) in &best {
            counts[self.labels[i].id() as usize] += 1;
        }
        let mut winner = 0;
        for c in 1..DhzClass::COUNT {
            if counts[c] > counts[winner] {
                winner = c;
            }
        }
        DhzClass::ALL[winner]
    }
}

pub const DEFAULT_K: usize = 5;

pub fn train(g: &VoxelGrid, seeds: &TrainingSeeds, k: usize) -> Result<ClassifierModel> {
    seeds.validate(g.dims())?;
    let n = seeds.0.len();
    if k == 0 || k.is_multiple_of(2) || k > n {
        return Err(SegmentError::InvalidK { k, n_seeds: n });
    }
    let raw: Vec<Features> = seeds
        .0
        .iter()
        .map(|s| features_unchecked(g, s.x, s.y, s.z))
        .collect();
    let mut feature_mean = [0.0; N_FEATURES];
    let mut feature_std = [0.0; N_FEATURES];
    let mut active = [false; N_FEATURES];
    let mut dropped_features = Vec::new();
    for i in 0..N_FEATURES {
        let column: Vec<f64> = raw.iter().map(|f| f[i]).collect();
        let mean = stats::shifted_mean(&column).expect("seeds validated non-empty");
        let sq: Vec<f64> = column.iter().map(|v| (v - mean) * (v - mean)).collect();
        let std = (stats::pairwise_sum(&sq) / n as f64).sqrt();
        feature_mean[i] = mean;
        feature_std[i] = std;
        active[i] = std > 1e-12 * mean.abs().max(1.0);
        if !active[i] {
            dropped_features.push(FEATURE_NAMES[i].to_string());
        }
    }
    if !active.iter().any(|&a| a) {
        return Err(SegmentError::NoUsableFeatures);
    }
    let mut model = ClassifierModel {
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        feature_mean,
        feature_std,
        active,
        dropped_features,
        vectors: Vec::with_capacity(n),
        labels: seeds.0.iter().map(|s| s.class).collect(),
        k,
    };
    model.vectors = raw.iter().map(|f| model.standardize(f)).collect();
    Ok(model)
}

/// Labels every voxel. Work is split by z-slice; each voxel is independent
/// so the output does not depend on scheduling.
pub fn classify(g: &VoxelGrid, model: &ClassifierModel) -> LabelGrid {
    let (nx, ny, nz) = g.dims();
    let plane = nx * ny;
    let mut labels = vec![DhzClass::Pyrite; g.len()];
    labels
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(z, out)| {
            for y in 0..ny {
                for x in 0..nx {
                    let f = features_unchecked(g, x, y, z);
                    out[x + nx * y] = model.vote(&model.standardize(&f));
                }
            }
        });
    LabelGrid::new((nx, ny, nz), labels).expect("dims from a valid grid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassFractions(pub [f64; DhzClass::COUNT]);

impl ClassFractions {
    pub fn get(&self, class: DhzClass) -> f64 {
        self.0[class.id() as usize]
    }
}

pub fn class_counts(labels: &LabelGrid) -> [usize; DhzClass::COUNT] {
    let mut counts = [0usize; DhzClass::COUNT];
    for l in labels.labels() {
        counts[l.id() as usize] += 1;
    }
    counts
}

/// Volume fraction of each class; the largest class absorbs rounding so the
/// fractions sum to one.
pub fn class_fractions(labels: &LabelGrid) -> ClassFractions {
    let counts = class_counts(labels);
    let n = labels.len() as f64;
    let mut f = [0.0; DhzClass::COUNT];
    for c in 0..DhzClass::COUNT {
        f[c] = counts[c] as f64 / n;
    }
    let largest = (0..DhzClass::COUNT).max_by_key(|&c| counts[c]).unwrap_or(0);
    let others: f64 = (0..DhzClass::COUNT)
        .filter(|&c| c != largest)
        .map(|c| f[c])
        .sum();
    f[largest] = 1.0 - others;
    ClassFractions(f)
}
