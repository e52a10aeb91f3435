//! Intensity→grain-diameter calibration built from bead standards.
//!
//! The curve is piecewise linear in (intensity, ln diameter) through the
//! calibration knots and is extended linearly beyond the end knots. Lookups
//! outside the calibrated range are returned but flagged.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{self, GridError, VoxelGrid};
use crate::segmenter::ClassMask;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("calibration needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("duplicate calibration intensity {0}")]
    DuplicateIntensity(f64),
    #[error("grain diameters are not strictly monotone in intensity")]
    NonMonotone,
    #[error("invalid calibration point ({mriii}, {grain_diameter_um})")]
    InvalidPoint { mriii: f64, grain_diameter_um: f64 },
    #[error("calibration tag is empty")]
    MissingTag,
    #[error("calibration file: {0}")]
    Parse(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, CalibError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub mriii: f64,
    pub grain_diameter_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    points: Vec<CalibrationPoint>,
    tag: String,
}

/// Result of a single intensity lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainLookup {
    pub mriii_mean: f64,
    pub grain_diameter_um: f64,
    pub extrapolated: bool,
    pub tag: String,
}

pub fn fit_mgcm(points: &[CalibrationPoint], tag: &str) -> Result<CalibrationModel> {
    if points.len() < 2 {
        return Err(CalibError::TooFewPoints(points.len()));
    }
    if tag.trim().is_empty() {
        return Err(CalibError::MissingTag);
    }
    for p in points {
        if !p.mriii.is_finite() || !(p.grain_diameter_um.is_finite() && p.grain_diameter_um > 0.0) {
            return Err(CalibError::InvalidPoint {
                mriii: p.mriii,
                grain_diameter_um: p.grain_diameter_um,
            });
        }
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.mriii.total_cmp(&b.mriii));
    if let Some(w) = sorted.windows(2).find(|w| w[0].mriii == w[1].mriii) {
        return Err(CalibError::DuplicateIntensity(w[0].mriii));
    }
    let increasing = sorted
        .windows(2)
        .all(|w| w[1].grain_diameter_um > w[0].grain_diameter_um);
    let decreasing = sorted
        .windows(2)
        .all(|w| w[1].grain_diameter_um < w[0].grain_diameter_um);
    if !(increasing || decreasing) {
        return Err(CalibError::NonMonotone);
    }
    Ok(CalibrationModel {
        points: sorted,
        tag: tag.to_string(),
    })
}

impl CalibrationModel {
    pub fn points(&self) -> &[CalibrationPoint] {
        &self.points
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn range(&self) -> (f64, f64) {
        (
            self.points[0].mriii,
            self.points[self.points.len() - 1].mriii,
        )
    }

    /// Diameter in μm at `mriii`, plus whether the value was extrapolated.
    pub fn diameter_at(&self, mriii: f64) -> (f64, bool) {
        let pts = &self.points;
        if let Some(p) = pts.iter().find(|p| p.mriii == mriii) {
            return (p.grain_diameter_um, false);
        }
        let (lo, hi) = self.range();
        let extrapolated = !(lo..=hi).contains(&mriii);
        // segment index: first knot strictly above mriii, clamped to end segments
        let upper = pts
            .partition_point(|p| p.mriii < mriii)
            .clamp(1, pts.len() - 1);
        let (a, b) = (pts[upper - 1], pts[upper]);
        let t = (mriii - a.mriii) / (b.mriii - a.mriii);
        let (la, lb) = (a.grain_diameter_um.ln(), b.grain_diameter_um.ln());
        ((la + t * (lb - la)).exp(), extrapolated)
    }

    /// Calibration CSV: `# tag=<text>`, a `mriii,grain_diameter_um` header,
    /// then one row per knot.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let tag = text
            .lines()
            .filter_map(|l| l.trim().strip_prefix('#'))
            .find_map(|l| l.trim().strip_prefix("tag=").map(|t| t.trim().to_string()))
            .ok_or(CalibError::MissingTag)?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| CalibError::Parse(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["mriii", "grain_diameter_um"] {
            return Err(CalibError::Parse(format!(
                "expected header 'mriii,grain_diameter_um', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for record in reader.deserialize() {
            let p: CalibrationPoint = record.map_err(|e| CalibError::Parse(e.to_string()))?;
            points.push(p);
        }
        fit_mgcm(&points, &tag)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# tag={}\nmriii,grain_diameter_um\n", self.tag);
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.mriii, p.grain_diameter_um));
        }
        out
    }
}

pub fn grain_diameter_from_intensity(model: &CalibrationModel, mriii: f64) -> GrainLookup {
    let (d, extrapolated) = model.diameter_at(mriii);
    GrainLookup {
        mriii_mean: mriii,
        grain_diameter_um: d,
        extrapolated,
        tag: model.tag.clone(),
    }
}

/// Mean intensity of the (masked) volume mapped through the calibration.
pub fn decode_grain_diameter(
    g: &VoxelGrid,
    model: &CalibrationModel,
    mask: Option<ClassMask<'_>>,
) -> Result<GrainLookup> {
    let mean = grid::masked_mean(g, mask)?;
    Ok(grain_diameter_from_intensity(model, mean))
}
