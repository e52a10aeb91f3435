//! Property integration: per-class permeability tables, voxel permeability
//! maps, and the slice-parallel / stack-serial aggregation to a single 3D
//! permeability along +z.
//!
//! Inside an x-y slice voxels act as parallel conduits, so the slice value
//! is the area-weighted arithmetic mean. Slices act in series along z, so
//! the stack value is the thickness-weighted harmonic mean of the slice
//! values. A slice with zero permeability blocks the stack.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{grain_diameter_from_intensity, CalibrationModel};
use crate::geometry::{self, GrainRadius, PackingConfig};
use crate::grid::{GridError, ValueKind, VoxelGrid};
use crate::segmenter::{DhzClass, LabelGrid};
use crate::stats;

#[derive(Debug, Error)]
pub enum PimError {
    #[error("class table has no entry for {0:?}")]
    IncompleteTable(Vec<DhzClass>),
    #[error("permeability for {class} must be finite and non-negative, got {k}")]
    InvalidPermeability { class: DhzClass, k: f64 },
    #[error("permeability map: {0}")]
    InvalidMap(String),
    #[error("no mean intensity supplied for {0}")]
    MissingIntensity(DhzClass),
    #[error("class table file: {0}")]
    Parse(String),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, PimError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    DirectConstant,
    FromCalibration {
        mriii_mean: f64,
        grain_diameter_um: f64,
        extrapolated: bool,
        config: PackingConfig,
    },
    /// Micromodel stand-in: a mesh lateral read as a grain diameter.
    FromMeshLateral {
        lateral_um: f64,
        config: PackingConfig,
    },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::DirectConstant => f.write_str("direct"),
            Provenance::FromCalibration {
                mriii_mean,
                grain_diameter_um,
                extrapolated,
                config,
            } => write!(
                f,
                "calibration:mriii={mriii_mean};d_um={grain_diameter_um};extrapolated={extrapolated};config={config}"
            ),
            Provenance::FromMeshLateral { lateral_um, config } => {
                write!(f, "mesh:lateral_um={lateral_um};config={config}")
            }
        }
    }
}

impl FromStr for Provenance {
    type Err = PimError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "direct" {
            return Ok(Provenance::DirectConstant);
        }
        let (kind, body) = s
            .split_once(':')
            .ok_or_else(|| PimError::Parse(format!("unknown provenance '{s}'")))?;
        let mut fields = BTreeMap::new();
        for part in body.split(';') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| PimError::Parse(format!("malformed provenance field '{part}'")))?;
            fields.insert(key.trim(), value.trim());
        }
        let get = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| PimError::Parse(format!("provenance lacks '{key}'")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| PimError::Parse(format!("provenance field '{key}' is not a number")))
        };
        match kind {
            "calibration" => {}
            "mesh" => {
                return Ok(Provenance::FromMeshLateral {
                    lateral_um: num("lateral_um")?,
                    config: get("config")?.parse()?,
                })
            }
            other => {
                return Err(PimError::Parse(format!(
                    "unknown provenance kind '{other}'"
                )))
            }
        }
        Ok(Provenance::FromCalibration {
            mriii_mean: num("mriii")?,
            grain_diameter_um: num("d_um")?,
            extrapolated: get("extrapolated")?.parse().map_err(|_| {
                PimError::Parse("provenance field 'extrapolated' is not a bool".into())
            })?,
            config: get("config")?.parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub k_md: f64,
    pub provenance: Provenance,
}

/// Permeability per heterogeneity class, in mD.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassPermeabilityTable {
    pub entries: BTreeMap<DhzClass, ClassEntry>,
}

impl ClassPermeabilityTable {
    pub fn direct(values: &[(DhzClass, f64)]) -> Result<Self> {
        let mut t = Self::default();
        for &(class, k) in values {
            t.insert(class, k, Provenance::DirectConstant)?;
        }
        Ok(t)
    }

    pub fn insert(&mut self, class: DhzClass, k_md: f64, provenance: Provenance) -> Result<()> {
        if !(k_md.is_finite() && k_md >= 0.0) {
            return Err(PimError::InvalidPermeability { class, k: k_md });
        }
        self.entries.insert(class, ClassEntry { k_md, provenance });
        Ok(())
    }

    pub fn get(&self, class: DhzClass) -> Option<f64> {
        self.entries.get(&class).map(|e| e.k_md)
    }

    pub fn missing(&self) -> Vec<DhzClass> {
        DhzClass::ALL
            .into_iter()
            .filter(|c| !self.entries.contains_key(c))
            .collect()
    }

    pub fn ensure_complete(&self) -> Result<()> {
        let missing = self.missing();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(PimError::IncompleteTable(missing))
        }
    }

    /// Convention checks that do not invalidate the table.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(k) = self.get(DhzClass::Pyrite) {
            if k != 0.0 {
                out.push(format!(
                    "Pyrite is assigned {k} mD; it is normally treated as impermeable"
                ));
            }
        }
        let calibrated: Vec<(DhzClass, f64)> = self
            .entries
            .iter()
            .filter(|(_, e)| matches!(e.provenance, Provenance::FromCalibration { .. }))
            .map(|(&c, e)| (c, e.k_md))
            .collect();
        if let Some(&(_, vug)) = calibrated.iter().find(|(c, _)| *c == DhzClass::OpenVug) {
            if calibrated.iter().any(|&(_, k)| k > vug) {
                out.push("OpenVug is not the most permeable calibrated class".to_string());
            }
        }
        for e in self.entries.values() {
            if let Provenance::FromCalibration {
                extrapolated: true,
                mriii_mean,
                ..
            } = e.provenance
            {
                out.push(format!(
                    "intensity {mriii_mean} lies outside the calibrated range"
                ));
            }
        }
        out
    }

    /// CSV `class_name,k_mD,provenance`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_name,k_mD,provenance\n");
        for (class, e) in &self.entries {
            out.push_str(&format!("{},{},{}\n", class, e.k_md, e.provenance));
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut table = Self::default();
        for record in reader.records() {
            let r = record.map_err(|e| PimError::Parse(e.to_string()))?;
            if r.len() < 2 {
                return Err(PimError::Parse(format!("short row {r:?}")));
            }
            let class: DhzClass = r[0]
                .parse()
                .map_err(|_| PimError::Parse(format!("unknown class '{}'", &r[0])))?;
            let k: f64 = r[1]
                .parse()
                .map_err(|_| PimError::Parse(format!("bad permeability '{}'", &r[1])))?;
            let provenance = match r.get(2) {
                Some(p) if !p.is_empty() => p.parse()?,
                _ => Provenance::DirectConstant,
            };
            table.insert(class, k, provenance)?;
        }
        Ok(table)
    }
}

/// Voxel permeabilities in mD; every value finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityMap(VoxelGrid);

impl PermeabilityMap {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if let Some(i) = grid.values().iter().position(|&v| v < 0.0) {
            return Err(PimError::InvalidMap(format!(
                "negative permeability at voxel {i}"
            )));
        }
        let grid = if grid.value_kind() == ValueKind::PermeabilityMilliDarcy {
            grid
        } else {
            grid.with_values(grid.values().to_vec(), ValueKind::PermeabilityMilliDarcy)?
        };
        Ok(Self(grid))
    }

    pub fn from_fn<F>(dims: (usize, usize, usize), voxel_size_um: f64, f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        Self::new(VoxelGrid::from_fn(
            dims,
            voxel_size_um,
            ValueKind::PermeabilityMilliDarcy,
            f,
        )?)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dims()
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        let values = self.0.values().iter().map(|v| v * alpha).collect();
        Self::new(
            self.0
                .with_values(values, ValueKind::PermeabilityMilliDarcy)?,
        )
    }
}

pub fn assign_permeability(
    labels: &LabelGrid,
    table: &ClassPermeabilityTable,
    voxel_size_um: f64,
) -> Result<PermeabilityMap> {
    table.ensure_complete()?;
    let mut lookup = [0.0; DhzClass::COUNT];
    for c in DhzClass::ALL {
        lookup[c.id() as usize] = table.get(c).expect("complete table");
    }
    let values = labels
        .labels()
        .iter()
        .map(|c| lookup[c.id() as usize])
        .collect();
    PermeabilityMap::new(VoxelGrid::new(
        labels.dims(),
        voxel_size_um,
        values,
        ValueKind::PermeabilityMilliDarcy,
    )?)
}

/// Derives each class's permeability from its mean intensity through the
/// calibration and the packing geometry; `overrides` win and are recorded
/// as direct constants.
pub fn table_from_calibration(
    per_class_mriii: &BTreeMap<DhzClass, f64>,
    model: &CalibrationModel,
    config: PackingConfig,
    overrides: &BTreeMap<DhzClass, f64>,
) -> Result<ClassPermeabilityTable> {
    let mut table = ClassPermeabilityTable::default();
    for class in DhzClass::ALL {
        if let Some(&k) = overrides.get(&class) {
            table.insert(class, k, Provenance::DirectConstant)?;
            continue;
        }
        let &mriii = per_class_mriii
            .get(&class)
            .ok_or(PimError::MissingIntensity(class))?;
        let lookup = grain_diameter_from_intensity(model, mriii);
        let r = GrainRadius::from_diameter(lookup.grain_diameter_um)?;
        let k = geometry::permeability_from_grain_radius(config, r);
        table.insert(
            class,
            k,
            Provenance::FromCalibration {
                mriii_mean: mriii,
                grain_diameter_um: lookup.grain_diameter_um,
                extrapolated: lookup.extrapolated,
                config,
            },
        )?;
    }
    Ok(table)
}

/// Parallel (arithmetic, area-weighted) permeability of slice `z`.
pub fn parallel_aggregate_slice(kmap: &PermeabilityMap, z: usize) -> f64 {
    stats::shifted_mean(kmap.grid().slice_z(z)).expect("slices are non-empty")
}

/// Two-or-more-term parallel formula with explicit section heights.
pub fn parallel_aggregate(k: &[f64], heights: &[f64]) -> Option<f64> {
    stats::weighted_mean(k, heights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerialResult {
    pub k_md: f64,
    pub blocked: bool,
}

/// Serial (harmonic, length-weighted) permeability of a stack of layers.
pub fn serial_aggregate(k: &[f64], lengths: &[f64]) -> Option<SerialResult> {
    let blocked = k.contains(&0.0);
    let k_md = stats::weighted_harmonic_mean(k, lengths)?;
    Some(SerialResult { k_md, blocked })
}

pub fn serial_aggregate_stack(slice_k: &[f64], slice_thickness: f64) -> Option<SerialResult> {
    serial_aggregate(slice_k, &vec![slice_thickness; slice_k.len()])
}

/// Global harmonic and arithmetic voxel means.
pub fn wiener_bounds(kmap: &PermeabilityMap) -> (f64, f64) {
    let v = kmap.grid().values();
    let ones = vec![1.0; v.len()];
    let harmonic = stats::weighted_harmonic_mean(v, &ones).expect("non-empty map");
    let arithmetic = stats::shifted_mean(v).expect("non-empty map");
    (harmonic, arithmetic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    /// Parallel-aggregated permeability of each x-y slice, mD.
    pub slice_k: Vec<f64>,
    pub k_3d: f64,
    pub lower_bound_harmonic: f64,
    pub upper_bound_arithmetic: f64,
    pub blocked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_table: Option<ClassPermeabilityTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_tag: Option<String>,
    pub unit_convention: String,
}

impl DecodeReport {
    /// `z,k_mD` rows.
    pub fn slice_csv(&self) -> String {
        let mut out = String::from("z,k_mD\n");
        for (z, k) in self.slice_k.iter().enumerate() {
            out.push_str(&format!("{z},{k}\n"));
        }
        out
    }
}

/// Slice-parallel then stack-serial aggregation along +z.
pub fn decode(kmap: &PermeabilityMap) -> DecodeReport {
    let nz = kmap.grid().nz();
    let slice_k: Vec<f64> = (0..nz)
        .into_par_iter()
        .map(|z| parallel_aggregate_slice(kmap, z))
        .collect();
    let serial =
        serial_aggregate_stack(&slice_k, kmap.grid().voxel_size_um()).expect("non-empty stack");
    let (lower, upper) = wiener_bounds(kmap);
    DecodeReport {
        slice_k,
        k_3d: serial.k_md,
        lower_bound_harmonic: lower,
        upper_bound_arithmetic: upper,
        blocked: serial.blocked,
        class_table: None,
        calib_tag: None,
        unit_convention: geometry::PERMEABILITY_UNIT_CONVENTION.to_string(),
    }
}

/// Diagnostic reverse order: serial along each z-column, then parallel over
/// the columns.
pub fn decode_columns_first(kmap: &PermeabilityMap) -> f64 {
    let g = kmap.grid();
    let (nx, ny, nz) = g.dims();
    let thickness = vec![g.voxel_size_um(); nz];
    let columns: Vec<f64> = (0..nx * ny)
        .into_par_iter()
        .map(|c| {
            let column: Vec<f64> = (0..nz).map(|z| g.values()[c + nx * ny * z]).collect();
            stats::weighted_harmonic_mean(&column, &thickness).expect("non-empty column")
        })
        .collect();
    stats::shifted_mean(&columns).expect("non-empty slice")
}

/// Per-class share of the voxel permeability sum in each slice.
pub fn class_contributions(labels: &LabelGrid, kmap: &PermeabilityMap) -> BTreeMap<DhzClass, f64> {
    let total = stats::pairwise_sum(kmap.grid().values());
    let mut out = BTreeMap::new();
    for class in DhzClass::ALL {
        let part: Vec<f64> = labels
            .labels()
            .iter()
            .zip(kmap.grid().values())
            .filter(|(l, _)| **l == class)
            .map(|(_, &k)| k)
            .collect();
        let share = if total > 0.0 {
            stats::pairwise_sum(&part) / total
        } else {
            0.0
        };
        out.insert(class, share);
    }
    out
}
