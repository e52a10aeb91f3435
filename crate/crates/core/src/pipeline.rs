//! End-to-end runs: segmentation → calibration → permeability map →
//! aggregation, and the micromodel validation suite.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::CalibrationModel;
use crate::geometry::{self, PackingConfig};
use crate::grid::{self, FlowAxis, GridError, VoxelGrid};
use crate::micromodel::{self, MeshPermeability, MicromodelError, MicromodelSpec};
use crate::pim::{self, ClassPermeabilityTable, DecodeReport, PermeabilityMap};
use crate::segmenter::{self, ClassMask, DhzClass, LabelGrid, TrainingSeeds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Segment,
    Calibrate,
    Integrate,
    Oracle,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Segment => "segment",
            Stage::Calibrate => "calibrate",
            Stage::Integrate => "integrate",
            Stage::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    fn at<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> Self {
        move |e| Self {
            stage,
            source: Box::new(e),
        }
    }

    pub fn is_non_convergence(&self) -> bool {
        matches!(
            self.source.downcast_ref::<MicromodelError>(),
            Some(MicromodelError::NonConvergence { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// How voxels get their class.
#[derive(Debug, Clone)]
pub enum Segmentation {
    /// Train a k-NN classifier on expert seeds and classify every voxel.
    Seeds { seeds: TrainingSeeds, k: usize },
    /// Use an existing label grid.
    Labels(LabelGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k_neighbors: usize,
    pub packing: PackingConfig,
    /// Forces Pyrite to 0 mD regardless of its intensity.
    pub pyrite_impermeable: bool,
    #[serde(default)]
    pub overrides: BTreeMap<DhzClass, f64>,
    pub flow_axis: FlowAxis,
    pub bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_neighbors: segmenter::DEFAULT_K,
            packing: PackingConfig::Rhombohedral,
            pyrite_impermeable: true,
            overrides: BTreeMap::new(),
            flow_axis: FlowAxis::Z,
            bins: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensitySource {
    Voxels,
    Seeds,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: DhzClass,
    pub voxels: usize,
    pub fraction: f64,
    pub mriii_mean: Option<f64>,
    pub intensity_source: IntensitySource,
    pub histogram: Option<grid::Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub tag: String,
    pub mriii_range: (f64, f64),
    pub knots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub dims: (usize, usize, usize),
    pub voxel_size_um: f64,
    pub segmentation: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_features: Vec<String>,
    pub classes: Vec<ClassSummary>,
    pub calibration: CalibrationSummary,
    pub class_contributions: BTreeMap<DhzClass, f64>,
    pub decode: DecodeReport,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub labels: LabelGrid,
    pub kmap: PermeabilityMap,
}

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn run_decode_pipeline(
    intensity: &VoxelGrid,
    segmentation: Segmentation,
    calibration: &CalibrationModel,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    let mut warnings = Vec::new();
    let (labels, seeds, dropped_features, segmentation_label) = match segmentation {
        Segmentation::Seeds { seeds, k } => {
            let model = segmenter::train(intensity, &seeds, k)
                .map_err(PipelineError::at(Stage::Segment))?;
            let labels = segmenter::classify(intensity, &model);
            let label = format!("knn(k={k}, seeds={})", seeds.0.len());
            (labels, Some(seeds), model.dropped_features, label)
        }
        Segmentation::Labels(labels) => {
            if labels.dims() != intensity.dims() {
                return Err(PipelineError::at(Stage::Segment)(
                    segmenter::SegmentError::DimMismatch {
                        labels: labels.dims(),
                        expected: intensity.dims(),
                    },
                ));
            }
            (labels, None, Vec::new(), "provided labels".to_string())
        }
    };

    if let Some(tag) = intensity.acquisition_tag() {
        if tag != calibration.tag() {
            warnings.push(format!(
                "volume acquisition tag '{tag}' differs from calibration tag '{}'",
                calibration.tag()
            ));
        }
    }

    let fractions = segmenter::class_fractions(&labels);
    let counts = segmenter::class_counts(&labels);
    let mut classes = Vec::new();
    let mut per_class_mriii = BTreeMap::new();
    for class in DhzClass::ALL {
        let mask = ClassMask::new(&labels, class);
        let (mean, source, hist) = match grid::histogram(intensity, config.bins, Some(mask)) {
            Ok(h) => (Some(h.mean), IntensitySource::Voxels, Some(h)),
            Err(GridError::EmptySelection) => {
                let from_seeds = seeds.as_ref().and_then(|s| {
                    let values: Vec<f64> =
                        s.0.iter()
                            .filter(|p| p.class == class)
                            .map(|p| intensity.get(p.x, p.y, p.z))
                            .collect();
                    crate::stats::shifted_mean(&values)
                });
                match from_seeds {
                    Some(m) => (Some(m), IntensitySource::Seeds, None),
                    None => (None, IntensitySource::Absent, None),
                }
            }
            Err(e) => return Err(PipelineError::at(Stage::Calibrate)(e)),
        };
        if let Some(m) = mean {
            per_class_mriii.insert(class, m);
        }
        classes.push(ClassSummary {
            class,
            voxels: counts[class.id() as usize],
            fraction: fractions.get(class),
            mriii_mean: mean,
            intensity_source: source,
            histogram: hist,
        });
    }

    let mut overrides = config.overrides.clone();
    if config.pyrite_impermeable {
        overrides.entry(DhzClass::Pyrite).or_insert(0.0);
    }
    for class in DhzClass::ALL {
        if !per_class_mriii.contains_key(&class) && !overrides.contains_key(&class) {
            warnings.push(format!("{class} has no voxels and no seeds; assigned 0 mD"));
            overrides.insert(class, 0.0);
        }
    }
    let table =
        pim::table_from_calibration(&per_class_mriii, calibration, config.packing, &overrides)
            .map_err(PipelineError::at(Stage::Calibrate))?;
    warnings.extend(table.warnings());

    let kmap = pim::assign_permeability(&labels, &table, intensity.voxel_size_um())
        .map_err(PipelineError::at(Stage::Integrate))?;
    let contributions = pim::class_contributions(&labels, &kmap);
    let oriented = if config.flow_axis == FlowAxis::Z {
        kmap.clone()
    } else {
        PermeabilityMap::new(kmap.grid().reorient(config.flow_axis))
            .map_err(PipelineError::at(Stage::Integrate))?
    };
    let mut decode = pim::decode(&oriented);
    decode.class_table = Some(table);
    decode.calib_tag = Some(calibration.tag().to_string());

    let report = PipelineReport {
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        dims: intensity.dims(),
        voxel_size_um: intensity.voxel_size_um(),
        segmentation: segmentation_label,
        dropped_features,
        classes,
        calibration: CalibrationSummary {
            tag: calibration.tag().to_string(),
            mriii_range: calibration.range(),
            knots: calibration.points().len(),
        },
        class_contributions: contributions,
        decode,
        warnings,
    };
    Ok(PipelineOutput {
        report,
        labels,
        kmap,
    })
}

/// File-based inputs for [`run_decode_files`].
#[derive(Debug, Clone)]
pub struct DecodeInputs {
    pub intensity: PathBuf,
    pub seeds: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub calibration: PathBuf,
}

/// Loads every input, attributing failures to the stage that needs them.
pub fn run_decode_files(inputs: &DecodeInputs, config: &PipelineConfig) -> Result<PipelineOutput> {
    let intensity = grid::load_grid(&inputs.intensity).map_err(PipelineError::at(Stage::Load))?;
    let segmentation = match (&inputs.labels, &inputs.seeds) {
        (Some(path), _) => Segmentation::Labels(
            segmenter::load_labels(path).map_err(PipelineError::at(Stage::Segment))?,
        ),
        (None, Some(path)) => Segmentation::Seeds {
            seeds: TrainingSeeds::load(path).map_err(PipelineError::at(Stage::Segment))?,
            k: config.k_neighbors,
        },
        (None, None) => {
            return Err(PipelineError::at(Stage::Segment)(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "either seeds or labels are required",
            )))
        }
    };
    let calibration = load_calibration(&inputs.calibration)?;
    run_decode_pipeline(&intensity, segmentation, &calibration, config)
}

pub fn load_calibration(path: &Path) -> Result<CalibrationModel> {
    CalibrationModel::load(path).map_err(PipelineError::at(Stage::Calibrate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub tol: f64,
    pub max_iter: Option<usize>,
    /// Relative oracle agreement required on separable layouts.
    pub match_tolerance: f64,
    pub mapping: Option<MeshPermeability>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            tol: micromodel::DEFAULT_TOL,
            max_iter: None,
            match_tolerance: 1e-4,
            mapping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub sample: String,
    pub sample_number: u8,
    pub voxel_size_um: f64,
    pub dims: Option<(usize, usize, usize)>,
    pub k_3dpim: Option<f64>,
    pub k_oracle: Option<f64>,
    pub relative_error: Option<f64>,
    pub lower_bound_harmonic: Option<f64>,
    pub upper_bound_arithmetic: Option<f64>,
    pub within_bounds: Option<bool>,
    pub oracle_iterations: Option<usize>,
    pub oracle_residual: Option<f64>,
    /// `match` on separable layouts, `bounds` otherwise.
    pub criterion: String,
    pub passed: bool,
    pub error: Option<String>,
    #[serde(skip)]
    pub non_convergence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationTable {
    pub tool_version: String,
    pub config: ValidationConfig,
    pub rows: Vec<ValidationRow>,
}

impl ValidationTable {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(
            "sample,voxel_size_um,k_3dpim_mD,k_oracle_mD,relative_error,lower_bound_mD,upper_bound_mD,within_bounds,criterion,passed,error\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.sample,
                r.voxel_size_um,
                opt(r.k_3dpim),
                opt(r.k_oracle),
                opt(r.relative_error),
                opt(r.lower_bound_harmonic),
                opt(r.upper_bound_arithmetic),
                r.within_bounds.map(|b| b.to_string()).unwrap_or_default(),
                r.criterion,
                r.passed,
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }
}

fn validate_one(spec: &MicromodelSpec, config: &ValidationConfig) -> ValidationRow {
    let criterion = if spec.sample.is_separable() {
        "match"
    } else {
        "bounds"
    };
    let mut row = ValidationRow {
        sample: spec.sample.to_string(),
        sample_number: spec.sample.sample_number(),
        voxel_size_um: spec.voxel_size_um,
        dims: None,
        k_3dpim: None,
        k_oracle: None,
        relative_error: None,
        lower_bound_harmonic: None,
        upper_bound_arithmetic: None,
        within_bounds: None,
        oracle_iterations: None,
        oracle_residual: None,
        criterion: criterion.to_string(),
        passed: false,
        error: None,
        non_convergence: false,
    };
    let model = match micromodel::generate_micromodel(spec, config.mapping) {
        Ok(m) => m,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.dims = Some(model.kmap.dims());
    let predicted = pim::decode(&model.kmap);
    let oracle = match micromodel::resistor_oracle(&model.kmap, config.tol, config.max_iter) {
        Ok(o) => o,
        Err(e) => {
            row.non_convergence = matches!(e, MicromodelError::NonConvergence { .. });
            row.error = Some(e.to_string());
            return row;
        }
    };
    let cmp = micromodel::compare(&predicted, &oracle);
    row.k_3dpim = Some(cmp.k_3dpim);
    row.k_oracle = Some(cmp.k_oracle);
    row.relative_error = Some(cmp.relative_error);
    row.lower_bound_harmonic = Some(cmp.lower_bound_harmonic);
    row.upper_bound_arithmetic = Some(cmp.upper_bound_arithmetic);
    row.within_bounds = Some(cmp.within_bounds);
    row.oracle_iterations = Some(oracle.iterations);
    row.oracle_residual = Some(oracle.residual);
    row.passed = cmp.within_bounds
        && (!spec.sample.is_separable() || cmp.relative_error <= config.match_tolerance);
    row
}

/// Generate → decode → oracle → compare for each spec. A failing sample is
/// recorded in its row and does not stop the others.
pub fn run_validation_suite(
    specs: &[MicromodelSpec],
    config: &ValidationConfig,
) -> ValidationTable {
    let rows = specs.par_iter().map(|s| validate_one(s, config)).collect();
    ValidationTable {
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        rows,
    }
}

/// Class table CSV plus the unit convention as a trailing comment.
pub fn class_table_csv(table: &ClassPermeabilityTable) -> String {
    format!(
        "{}# units: {}\n",
        table.to_csv(),
        geometry::PERMEABILITY_UNIT_CONVENTION
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{fit_mgcm, CalibrationPoint};
    use crate::grid::ValueKind;
    use crate::micromodel::SampleLayout;
    use crate::segmenter::Seed;

    fn model() -> CalibrationModel {
        fit_mgcm(
            &[
                CalibrationPoint {
                    mriii: 10.0,
                    grain_diameter_um: 400.0,
                },
                CalibrationPoint {
                    mriii: 67.633,
                    grain_diameter_um: 68.82,
                },
                CalibrationPoint {
                    mriii: 220.0,
                    grain_diameter_um: 20.0,
                },
            ],
            "unit",
        )
        .unwrap()
    }

    #[test]
    fn homogeneous_volume_decodes_to_class_permeability() {
        let g = VoxelGrid::filled((4, 4, 4), 28.0, 67.633, ValueKind::Intensity).unwrap();
        let labels = LabelGrid::filled((4, 4, 4), DhzClass::Intergranular1);
        let out = run_decode_pipeline(
            &g,
            Segmentation::Labels(labels),
            &model(),
            &PipelineConfig::default(),
        )
        .unwrap();
        let r = geometry::GrainRadius::from_diameter(68.82).unwrap();
        let expected = geometry::permeability_from_grain_radius(PackingConfig::Rhombohedral, r);
        assert_eq!(out.report.decode.k_3d, expected);
        // absent classes get a warning and 0 mD
        assert!(out
            .report
            .warnings
            .iter()
            .any(|w| w.contains("OpenVug has no voxels")));
    }

    #[test]
    fn constant_volume_with_seeds_fails_in_segment_stage() {
        let g = VoxelGrid::filled((4, 4, 4), 28.0, 50.0, ValueKind::Intensity).unwrap();
        let seeds = TrainingSeeds(
            DhzClass::ALL
                .iter()
                .enumerate()
                .map(|(i, &class)| Seed {
                    x: i,
                    y: 0,
                    z: 0,
                    class,
                })
                .collect(),
        );
        let err = run_decode_pipeline(
            &g,
            Segmentation::Seeds { seeds, k: 1 },
            &model(),
            &PipelineConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err.stage, Stage::Segment);
        assert!(err.to_string().starts_with("segment stage failed"));
    }

    #[test]
    fn missing_calibration_is_a_calibrate_error() {
        let err = load_calibration(Path::new("/no/such/calibration.csv")).unwrap_err();
        assert_eq!(err.stage, Stage::Calibrate);
    }

    #[test]
    fn tag_mismatch_warns() {
        let g = VoxelGrid::filled((2, 2, 2), 28.0, 67.633, ValueKind::Intensity)
            .unwrap()
            .with_acquisition_tag("other");
        let labels = LabelGrid::filled((2, 2, 2), DhzClass::Intergranular2);
        let out = run_decode_pipeline(
            &g,
            Segmentation::Labels(labels),
            &model(),
            &PipelineConfig::default(),
        )
        .unwrap();
        assert!(out
            .report
            .warnings
            .iter()
            .any(|w| w.contains("acquisition tag")));
    }

    #[test]
    fn flow_axis_rotates_before_decoding() {
        // layered along x: series only when flowing along x
        let g = VoxelGrid::from_fn((4, 2, 2), 28.0, ValueKind::Intensity, |x, _, _| {
            if x < 2 {
                10.0
            } else {
                67.633
            }
        })
        .unwrap();
        let labels = LabelGrid::from_fn((4, 2, 2), |x, _, _| {
            if x < 2 {
                DhzClass::OpenVug
            } else {
                DhzClass::Intergranular1
            }
        });
        let along_z = run_decode_pipeline(
            &g,
            Segmentation::Labels(labels.clone()),
            &model(),
            &PipelineConfig::default(),
        )
        .unwrap();
        let cfg = PipelineConfig {
            flow_axis: FlowAxis::X,
            ..Default::default()
        };
        let along_x =
            run_decode_pipeline(&g, Segmentation::Labels(labels), &model(), &cfg).unwrap();
        assert!(along_x.report.decode.k_3d < along_z.report.decode.k_3d);
        assert_eq!(along_x.report.decode.slice_k.len(), 4);
    }

    #[test]
    fn empty_suite_is_empty() {
        let t = run_validation_suite(&[], &ValidationConfig::default());
        assert!(t.rows.is_empty());
        assert!(t.all_passed());
    }

    #[test]
    fn bad_voxel_size_is_isolated() {
        let specs = [
            MicromodelSpec::new(SampleLayout::Homogeneous2000, 2000.0),
            MicromodelSpec::new(SampleLayout::Homogeneous2000, 3000.0),
        ];
        let t = run_validation_suite(&specs, &ValidationConfig::default());
        assert!(t.rows[0].passed, "{:?}", t.rows[0]);
        assert!(!t.rows[1].passed);
        assert!(t.rows[1]
            .error
            .as_deref()
            .unwrap()
            .contains("does not divide"));
        assert!(t.to_csv().lines().count() == 3);
    }
}
