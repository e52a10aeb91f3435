//! Closed-form sphere-packing geometry: pore and pore-throat areas, the
//! effective 3D pore-throat size of each packing, and permeability from
//! grain radius.
//!
//! Permeability in mD is taken numerically equal to the effective throat
//! area in μm². That is an empirical convention, not a unit conversion, and
//! is labelled as such wherever it reaches a report.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("grain radius must be positive and finite, got {0}")]
    NonPositiveRadius(f64),
    #[error("permeability must be positive and finite, got {0}")]
    NonPositivePermeability(f64),
    #[error("no nominal porosity is defined for the {0} packing")]
    PorosityNotSpecified(PackingConfig),
    #[error("unknown packing configuration '{0}'")]
    UnknownConfig(String),
}

/// Unit label attached to permeabilities derived from throat areas.
pub const PERMEABILITY_UNIT_CONVENTION: &str =
    "k[mD] = effective throat area [um^2] (empirical identity)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingConfig {
    Cubic,
    Triclinic,
    Rhombohedral,
}

impl PackingConfig {
    pub const ALL: [PackingConfig; 3] = [
        PackingConfig::Cubic,
        PackingConfig::Triclinic,
        PackingConfig::Rhombohedral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PackingConfig::Cubic => "cubic",
            PackingConfig::Triclinic => "triclinic",
            PackingConfig::Rhombohedral => "rhombohedral",
        }
    }
}

impl fmt::Display for PackingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PackingConfig {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cubic" => Ok(PackingConfig::Cubic),
            "triclinic" => Ok(PackingConfig::Triclinic),
            "rhombohedral" => Ok(PackingConfig::Rhombohedral),
            _ => Err(GeometryError::UnknownConfig(s.to_string())),
        }
    }
}

/// Grain radius in μm.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GrainRadius(f64);

impl GrainRadius {
    pub fn new(r_um: f64) -> Result<Self, GeometryError> {
        if r_um.is_finite() && r_um > 0.0 {
            Ok(Self(r_um))
        } else {
            Err(GeometryError::NonPositiveRadius(r_um))
        }
    }

    pub fn from_diameter(d_um: f64) -> Result<Self, GeometryError> {
        Self::new(d_um / 2.0)
    }

    pub fn um(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThroatShape {
    /// Gap between four touching circles on a square lattice.
    ConcaveDiamond,
    /// Gap between three touching circles on a triangular lattice.
    ConcaveTriangle,
}

impl ThroatShape {
    /// Area per r², analytic.
    pub fn coefficient(self) -> f64 {
        match self {
            ThroatShape::ConcaveDiamond => 4.0 - PI,
            ThroatShape::ConcaveTriangle => 3f64.sqrt() - PI / 2.0,
        }
    }
}

/// Relative mismatch above which the face-inventory recomputation is flagged.
pub const AREA_DISCREPANCY_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingGeometry {
    pub config: PackingConfig,
    pub n_diamond_faces: u32,
    pub n_triangle_faces: u32,
    /// Total 3D throat area as a multiple of r², as published.
    pub total_throat_area_coeff: f64,
    pub n_pore_throats: u32,
    pub n_cv_inlets: u32,
    /// Effective 3D throat size as a multiple of r².
    pub effective_throat_coeff: f64,
    pub nominal_porosity: Option<f64>,
    /// Face inventory re-evaluated with the analytic face areas.
    pub recomputed_area_coeff: f64,
    pub area_discrepancy: bool,
}

/// Published constants for one packing: faces, total area, throats, inlets,
/// effective coefficient.
fn table_row(config: PackingConfig) -> (u32, u32, f64, u32, u32, f64) {
    match config {
        PackingConfig::Cubic => (6, 0, 5.148, 6, 2, 0.429),
        PackingConfig::Triclinic => (4, 4, 4.08, 8, 2, 0.255),
        PackingConfig::Rhombohedral => (2, 8, 1.716, 10, 2, 0.0858),
    }
}

pub fn packing_geometry(config: PackingConfig) -> PackingGeometry {
    let (n_diamond, n_triangle, total, n_port, n_inlets, effective) = table_row(config);
    let recomputed = n_diamond as f64 * ThroatShape::ConcaveDiamond.coefficient()
        + n_triangle as f64 * ThroatShape::ConcaveTriangle.coefficient();
    PackingGeometry {
        config,
        n_diamond_faces: n_diamond,
        n_triangle_faces: n_triangle,
        total_throat_area_coeff: total,
        n_pore_throats: n_port,
        n_cv_inlets: n_inlets,
        effective_throat_coeff: effective,
        nominal_porosity: nominal_porosity(config).ok(),
        recomputed_area_coeff: recomputed,
        area_discrepancy: ((recomputed - total) / total).abs() > AREA_DISCREPANCY_TOLERANCE,
    }
}

/// Largest square section of the pore between four grains: 4r².
pub fn pore_area_2d(r: GrainRadius) -> f64 {
    4.0 * r.0 * r.0
}

pub fn throat_area_2d(shape: ThroatShape, r: GrainRadius) -> f64 {
    shape.coefficient() * r.0 * r.0
}

/// Throat-to-pore area ratio in the square section, 1 − π/4.
pub fn throat_to_pore_ratio_2d() -> f64 {
    1.0 - PI / 4.0
}

pub fn effective_pore_throat_size_3d(config: PackingConfig, r: GrainRadius) -> f64 {
    table_row(config).5 * r.0 * r.0
}

/// Permeability in mD from grain radius in μm (see module docs for units).
pub fn permeability_from_grain_radius(config: PackingConfig, r: GrainRadius) -> f64 {
    effective_pore_throat_size_3d(config, r)
}

pub fn grain_radius_from_permeability(
    config: PackingConfig,
    k_md: f64,
) -> Result<GrainRadius, GeometryError> {
    if !(k_md.is_finite() && k_md > 0.0) {
        return Err(GeometryError::NonPositivePermeability(k_md));
    }
    GrainRadius::new((k_md / table_row(config).5).sqrt())
}

/// Porosity of the packing; independent of grain size by construction.
pub fn nominal_porosity(config: PackingConfig) -> Result<f64, GeometryError> {
    match config {
        PackingConfig::Cubic => Ok(1.0 - PI / 6.0),
        PackingConfig::Rhombohedral => Ok(0.25),
        PackingConfig::Triclinic => Err(GeometryError::PorosityNotSpecified(config)),
    }
}

/// The full constant table as CSV, one row per packing.
pub fn geometry_table_csv() -> String {
    let mut out = String::from(
        "config,n_diamond_faces,n_triangle_faces,total_throat_area_coeff,n_pore_throats,\
         n_cv_inlets,effective_throat_coeff,nominal_porosity,recomputed_area_coeff,area_discrepancy\n",
    );
    for config in PackingConfig::ALL {
        let g = packing_geometry(config);
        let porosity = g
            .nominal_porosity
            .map(|p| p.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            g.config,
            g.n_diamond_faces,
            g.n_triangle_faces,
            g.total_throat_area_coeff,
            g.n_pore_throats,
            g.n_cv_inlets,
            g.effective_throat_coeff,
            porosity,
            g.recomputed_area_coeff,
            g.area_discrepancy
        ));
    }
    out.push_str(&format!(
        "# pore_area_coeff=4\n# diamond_throat_coeff={}\n",
        ThroatShape::ConcaveDiamond.coefficient()
    ));
    out.push_str(&format!(
        "# triangle_throat_coeff={}\n",
        ThroatShape::ConcaveTriangle.coefficient()
    ));
    out.push_str(&format!(
        "# throat_to_pore_ratio_2d={}\n",
        throat_to_pore_ratio_2d()
    ));
    out.push_str(&format!("# units: {PERMEABILITY_UNIT_CONVENTION}\n"));
    out
}
