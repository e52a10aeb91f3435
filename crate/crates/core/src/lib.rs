//! Simulation-free permeability decoding for 3D intensity volumes.
//!
//! The pipeline segments a μCT/MRI-like volume into heterogeneity zones,
//! assigns a permeability to each zone from sphere-packing geometry and an
//! intensity→grain-size calibration, and then integrates the resulting
//! permeability map to one value: arithmetic (parallel) averaging inside
//! every x-y slice followed by harmonic (serial) averaging along z.
//!
//! A resistor-network flow solver on the same voxel map serves as an
//! independent check on synthetic micromodels.

pub mod calib;
pub mod geometry;
pub mod grid;
pub mod micromodel;
pub mod phantom;
pub mod pim;
pub mod pipeline;
pub mod segmenter;
pub mod stats;

pub use calib::{CalibrationModel, CalibrationPoint, GrainLookup};
pub use geometry::{GrainRadius, PackingConfig, PackingGeometry, ThroatShape};
pub use grid::{Dtype, FlowAxis, Histogram, ValueKind, VoxelGrid};
pub use micromodel::{MicromodelSpec, OracleSolution, SampleLayout};
pub use pim::{ClassPermeabilityTable, DecodeReport, PermeabilityMap, Provenance};
pub use segmenter::{ClassMask, ClassifierModel, DhzClass, LabelGrid, TrainingSeeds};
