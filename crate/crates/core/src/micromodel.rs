//! Synthetic printed-mesh micromodels and a resistor-network flow oracle.
//!
//! The oracle solves steady single-phase Darcy flow on the voxel map: unit
//! pressure drop between the z faces, no-flow lateral walls, and
//! harmonic-mean conductances between face neighbours. The linear system is
//! assembled in compressed sparse rows and solved with Jacobi-preconditioned
//! conjugate gradients.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, GrainRadius, PackingConfig};
use crate::grid::{ValueKind, VoxelGrid};
use crate::pim::{ClassPermeabilityTable, DecodeReport, PermeabilityMap, PimError, Provenance};
use crate::segmenter::{DhzClass, LabelGrid};
use crate::stats;

#[derive(Debug, Error)]
pub enum MicromodelError {
    #[error("voxel size {voxel_size_um} um does not divide mesh lateral {lateral_um} um")]
    IncompatibleVoxelSize { voxel_size_um: f64, lateral_um: f64 },
    #[error("invalid micromodel spec: {0}")]
    InvalidSpec(String),
    #[error("conjugate gradients did not converge: relative residual {residual:e} after {iterations} iterations")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error(transparent)]
    Pim(#[from] PimError),
}

pub type Result<T> = std::result::Result<T, MicromodelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum SampleLayout {
    /// Sample 1: fine mesh throughout.
    Homogeneous2000,
    /// Sample 2: coarse mesh throughout.
    Homogeneous4000,
    /// Sample 3: fine then coarse along the flow axis.
    SerialTwoZone,
    /// Sample 4: fine and coarse halves side by side.
    ParallelTwoZone,
    /// Sample 5: mesh cells assigned at random from `seed`.
    ArbitraryHeterogeneous { seed: u64 },
}

impl SampleLayout {
    pub fn standard_suite(seed: u64) -> [SampleLayout; 5] {
        [
            SampleLayout::Homogeneous2000,
            SampleLayout::Homogeneous4000,
            SampleLayout::SerialTwoZone,
            SampleLayout::ParallelTwoZone,
            SampleLayout::ArbitraryHeterogeneous { seed },
        ]
    }

    pub fn sample_number(self) -> u8 {
        match self {
            SampleLayout::Homogeneous2000 => 1,
            SampleLayout::Homogeneous4000 => 2,
            SampleLayout::SerialTwoZone => 3,
            SampleLayout::ParallelTwoZone => 4,
            SampleLayout::ArbitraryHeterogeneous { .. } => 5,
        }
    }

    /// True for layouts where slice/stack aggregation is exact.
    pub fn is_separable(self) -> bool {
        !matches!(self, SampleLayout::ArbitraryHeterogeneous { .. })
    }

    pub fn parse(name: &str, seed: u64) -> Option<Self> {
        match name {
            "homogeneous2000" | "sample1" | "1" => Some(SampleLayout::Homogeneous2000),
            "homogeneous4000" | "sample2" | "2" => Some(SampleLayout::Homogeneous4000),
            "serial" | "sample3" | "3" => Some(SampleLayout::SerialTwoZone),
            "parallel" | "sample4" | "4" => Some(SampleLayout::ParallelTwoZone),
            "arbitrary" | "sample5" | "5" => Some(SampleLayout::ArbitraryHeterogeneous { seed }),
            _ => None,
        }
    }
}

impl fmt::Display for SampleLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleLayout::Homogeneous2000 => write!(f, "sample1_homogeneous2000"),
            SampleLayout::Homogeneous4000 => write!(f, "sample2_homogeneous4000"),
            SampleLayout::SerialTwoZone => write!(f, "sample3_serial"),
            SampleLayout::ParallelTwoZone => write!(f, "sample4_parallel"),
            SampleLayout::ArbitraryHeterogeneous { seed } => {
                write!(f, "sample5_arbitrary_seed{seed}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicromodelSpec {
    pub sample: SampleLayout,
    pub mesh_fine_um: f64,
    pub mesh_coarse_um: f64,
    pub length_cm: f64,
    pub diameter_cm: f64,
    pub voxel_size_um: f64,
}

impl MicromodelSpec {
    /// The printed-cylinder dimensions: 7.8 cm long, 3.8 cm across, meshes of
    /// 2000 and 4000 μm inner lateral.
    pub fn new(sample: SampleLayout, voxel_size_um: f64) -> Self {
        Self {
            sample,
            mesh_fine_um: 2000.0,
            mesh_coarse_um: 4000.0,
            length_cm: 7.8,
            diameter_cm: 3.8,
            voxel_size_um,
        }
    }

    fn cells(&self, extent_um: f64) -> usize {
        (extent_um / self.voxel_size_um).round().max(1.0) as usize
    }

    /// Grid dims (x, y, z); z runs along the cylinder axis.
    pub fn dims(&self) -> (usize, usize, usize) {
        let across = self.cells(self.diameter_cm * 1e4);
        (across, across, self.cells(self.length_cm * 1e4))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mesh_fine_um,
            self.mesh_coarse_um,
            self.length_cm,
            self.diameter_cm,
            self.voxel_size_um,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(MicromodelError::InvalidSpec(
                "all dimensions must be positive".into(),
            ));
        }
        for lateral in [self.mesh_fine_um, self.mesh_coarse_um] {
            let ratio = lateral / self.voxel_size_um;
            if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
                return Err(MicromodelError::IncompatibleVoxelSize {
                    voxel_size_um: self.voxel_size_um,
                    lateral_um: lateral,
                });
            }
        }
        Ok(())
    }
}

/// Permeability given to the fine and coarse mesh material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshPermeability {
    pub fine_md: f64,
    pub coarse_md: f64,
}

impl MeshPermeability {
    /// Stand-in mapping: the mesh lateral is read as a grain diameter and
    /// pushed through the rhombohedral throat relation.
    pub fn from_laterals(spec: &MicromodelSpec) -> Result<Self> {
        let k = |lateral: f64| -> Result<f64> {
            let r = GrainRadius::from_diameter(lateral)
                .map_err(|e| MicromodelError::InvalidSpec(e.to_string()))?;
            Ok(geometry::permeability_from_grain_radius(
                PackingConfig::Rhombohedral,
                r,
            ))
        };
        Ok(Self {
            fine_md: k(spec.mesh_fine_um)?,
            coarse_md: k(spec.mesh_coarse_um)?,
        })
    }
}

pub const FINE_CLASS: DhzClass = DhzClass::Intergranular1;
pub const COARSE_CLASS: DhzClass = DhzClass::Intergranular2;
/// Voxels outside the cylinder: impermeable, labelled like pyrite.
pub const WALL_CLASS: DhzClass = DhzClass::Pyrite;

#[derive(Debug, Clone)]
pub struct Micromodel {
    pub spec: MicromodelSpec,
    pub kmap: PermeabilityMap,
    pub labels: LabelGrid,
    pub table: ClassPermeabilityTable,
}

pub fn generate_micromodel(
    spec: &MicromodelSpec,
    mapping: Option<MeshPermeability>,
) -> Result<Micromodel> {
    spec.validate()?;
    let default_mapping = mapping.is_none();
    let mapping = match mapping {
        Some(m) => m,
        None => MeshPermeability::from_laterals(spec)?,
    };
    let (nx, ny, nz) = spec.dims();
    let vs = spec.voxel_size_um;
    let radius = spec.diameter_cm * 1e4 / 2.0;
    let block = (spec.mesh_coarse_um / vs).round() as usize;
    let (bx, by) = (nx.div_ceil(block), ny.div_ceil(block));
    let block_classes: Vec<DhzClass> = match spec.sample {
        SampleLayout::ArbitraryHeterogeneous { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..bx * by * nz.div_ceil(block))
                .map(|_| {
                    if rng.random_bool(0.5) {
                        FINE_CLASS
                    } else {
                        COARSE_CLASS
                    }
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let labels = LabelGrid::from_fn((nx, ny, nz), |x, y, z| {
        let cx = (x as f64 + 0.5) * vs - radius;
        let cy = (y as f64 + 0.5) * vs - radius;
        if cx * cx + cy * cy > radius * radius {
            return WALL_CLASS;
        }
        match spec.sample {
            SampleLayout::Homogeneous2000 => FINE_CLASS,
            SampleLayout::Homogeneous4000 => COARSE_CLASS,
            SampleLayout::SerialTwoZone => {
                if z < nz / 2 {
                    FINE_CLASS
                } else {
                    COARSE_CLASS
                }
            }
            SampleLayout::ParallelTwoZone => {
                if x < nx / 2 {
                    FINE_CLASS
                } else {
                    COARSE_CLASS
                }
            }
            SampleLayout::ArbitraryHeterogeneous { .. } => {
                block_classes[x / block + bx * (y / block + by * (z / block))]
            }
        }
    });
    let mesh_provenance = |lateral_um: f64| -> Provenance {
        if default_mapping {
            Provenance::FromMeshLateral {
                lateral_um,
                config: PackingConfig::Rhombohedral,
            }
        } else {
            Provenance::DirectConstant
        }
    };
    let mut table = ClassPermeabilityTable::default();
    table.insert(WALL_CLASS, 0.0, Provenance::DirectConstant)?;
    // not present in any layout; kept so the table is complete
    table.insert(DhzClass::OpenVug, 0.0, Provenance::DirectConstant)?;
    table.insert(
        FINE_CLASS,
        mapping.fine_md,
        mesh_provenance(spec.mesh_fine_um),
    )?;
    table.insert(
        COARSE_CLASS,
        mapping.coarse_md,
        mesh_provenance(spec.mesh_coarse_um),
    )?;
    let kmap = crate::pim::assign_permeability(&labels, &table, vs)?;
    Ok(Micromodel {
        spec: spec.clone(),
        kmap,
        labels,
        table,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSolution {
    pub k_eff: f64,
    pub iterations: usize,
    /// Final true relative residual ‖b − Ax‖ / ‖b‖.
    pub residual: f64,
    pub tolerance: f64,
    pub percolating: bool,
    pub inlet_flux: f64,
    pub outlet_flux: f64,
    #[serde(skip)]
    pub pressure: Option<VoxelGrid>,
}

pub const DEFAULT_TOL: f64 = 1e-8;

pub fn default_max_iter(n_voxels: usize) -> usize {
    (20.0 * (n_voxels as f64).cbrt() * 100.0).ceil() as usize
}

const NEIGHBOURS: [(isize, isize, isize); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

fn neighbour(
    dims: (usize, usize, usize),
    x: usize,
    y: usize,
    z: usize,
    d: (isize, isize, isize),
) -> Option<usize> {
    let (nx, ny, nz) = dims;
    let (qx, qy, qz) = (x as isize + d.0, y as isize + d.1, z as isize + d.2);
    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize || qz >= nz as isize {
        return None;
    }
    Some(qx as usize + nx * (qy as usize + ny * qz as usize))
}

/// Voxels with k > 0 that a 6-connected path of k > 0 links to `start_z`.
fn reachable_from_face(k: &[f64], dims: (usize, usize, usize), start_z: usize) -> Vec<bool> {
    let (nx, ny, _) = dims;
    let mut seen = vec![false; k.len()];
    let mut queue = VecDeque::new();
    for i in start_z * nx * ny..(start_z + 1) * nx * ny {
        if k[i] > 0.0 {
            seen[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        for d in NEIGHBOURS {
            if let Some(j) = neighbour(dims, x, y, z, d) {
                if !seen[j] && k[j] > 0.0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    seen
}

/// Symmetric positive definite system in compressed-row form. Diagonal kept
/// apart; off-diagonals are stored as positive conductances (subtracted).
struct Network {
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    conductance: Vec<f64>,
}

impl Network {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut()
            .enumerate()
            .with_min_len(1024)
            .for_each(|(i, yi)| {
                let mut acc = self.diag[i] * x[i];
                for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc -= self.conductance[e] * x[self.cols[e]];
                }
                *yi = acc;
            });
    }
}

fn residual_norm(net: &Network, x: &[f64], b: &[f64], scratch: &mut [f64]) -> f64 {
    net.apply(x, scratch);
    stats::chunked_sum(b.len(), |i| (b[i] - scratch[i]).powi(2)).sqrt()
}

/// Jacobi-preconditioned CG from x = 0; stops on the true relative residual.
fn conjugate_gradient(
    net: &Network,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = b.len();
    let b_norm = stats::dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let inv_diag: Vec<f64> = net.diag.iter().map(|d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = stats::dot(&r, &z);
    let mut iterations = 0;
    loop {
        let rel = stats::dot(&r, &r).sqrt() / b_norm;
        if rel <= tol {
            // guard against drift of the recurrence residual
            let true_rel = residual_norm(net, &x, b, &mut ap) / b_norm;
            if true_rel <= tol {
                return Ok((x, iterations, true_rel));
            }
            net.apply(&x, &mut ap);
            r.par_iter_mut()
                .zip(b.par_iter())
                .zip(ap.par_iter())
                .for_each(|((ri, bi), ai)| *ri = bi - ai);
            z = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
            p.copy_from_slice(&z);
            rz = stats::dot(&r, &z);
        }
        if iterations >= max_iter {
            return Err(MicromodelError::NonConvergence {
                iterations,
                residual: rel,
            });
        }
        net.apply(&p, &mut ap);
        let alpha = rz / stats::dot(&p, &ap);
        x.par_iter_mut()
            .zip(p.par_iter())
            .for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut()
            .zip(ap.par_iter())
            .for_each(|(ri, ai)| *ri -= alpha * ai);
        z.par_iter_mut()
            .zip(r.par_iter())
            .zip(inv_diag.par_iter())
            .for_each(|((zi, ri), mi)| *zi = ri * mi);
        let rz_next = stats::dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.par_iter_mut()
            .zip(z.par_iter())
            .for_each(|(pi, zi)| *pi = zi + beta * *pi);
        iterations += 1;
    }
}

/// Effective permeability of `kmap` along +z by a steady flow solve.
pub fn resistor_oracle(
    kmap: &PermeabilityMap,
    tol: f64,
    max_iter: Option<usize>,
) -> Result<OracleSolution> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(MicromodelError::InvalidSpec(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let g = kmap.grid();
    let dims = g.dims();
    let (nx, ny, nz) = dims;
    let k = g.values();
    let max_iter = max_iter.unwrap_or_else(|| default_max_iter(k.len()));

    let from_inlet = reachable_from_face(k, dims, 0);
    let from_outlet = reachable_from_face(k, dims, nz - 1);
    let percolating = (0..nx * ny).any(|i| from_inlet[(nz - 1) * nx * ny + i]);
    let zero_pressure = || g.with_values(vec![0.0; k.len()], ValueKind::Pressure).ok();
    if !percolating {
        return Ok(OracleSolution {
            k_eff: 0.0,
            iterations: 0,
            residual: 0.0,
            tolerance: tol,
            percolating: false,
            inlet_flux: 0.0,
            outlet_flux: 0.0,
            pressure: zero_pressure(),
        });
    }

    // Unknowns: voxels tied to either face; floating clusters carry no flow.
    let mut index = vec![usize::MAX; k.len()];
    let mut voxels = Vec::new();
    for i in 0..k.len() {
        if from_inlet[i] || from_outlet[i] {
            index[i] = voxels.len();
            voxels.push(i);
        }
    }
    // Conductances in units of k·voxel_size; the voxel size cancels in k_eff.
    let n = voxels.len();
    let mut diag = vec![0.0; n];
    let mut b = vec![0.0; n];
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::with_capacity(6 * n);
    let mut conductance = Vec::with_capacity(6 * n);
    row_ptr.push(0);
    for (row, &i) in voxels.iter().enumerate() {
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        for d in NEIGHBOURS {
            if let Some(j) = neighbour(dims, x, y, z, d) {
                if index[j] != usize::MAX {
                    let c = 2.0 * k[i] * k[j] / (k[i] + k[j]);
                    diag[row] += c;
                    cols.push(index[j]);
                    conductance.push(c);
                }
            }
        }
        // half-cell link to the pressure faces
        if z == 0 {
            diag[row] += 2.0 * k[i];
            b[row] += 2.0 * k[i];
        }
        if z == nz - 1 {
            diag[row] += 2.0 * k[i];
        }
        row_ptr.push(cols.len());
    }
    let net = Network {
        diag,
        row_ptr,
        cols,
        conductance,
    };
    let (p, iterations, residual) = conjugate_gradient(&net, &b, tol, max_iter)?;

    let mut inlet = Vec::new();
    let mut outlet = Vec::new();
    for (row, &i) in voxels.iter().enumerate() {
        let z = i / (nx * ny);
        if z == 0 {
            inlet.push(2.0 * k[i] * (1.0 - p[row]));
        }
        if z == nz - 1 {
            outlet.push(2.0 * k[i] * p[row]);
        }
    }
    let inlet_flux = stats::pairwise_sum(&inlet);
    let outlet_flux = stats::pairwise_sum(&outlet);
    let flux = 0.5 * (inlet_flux + outlet_flux);
    let k_eff = flux * nz as f64 / (nx * ny) as f64;

    let mut pressure = vec![0.0; k.len()];
    for (row, &i) in voxels.iter().enumerate() {
        pressure[i] = p[row];
    }
    Ok(OracleSolution {
        k_eff,
        iterations,
        residual,
        tolerance: tol,
        percolating: true,
        inlet_flux,
        outlet_flux,
        pressure: g.with_values(pressure, ValueKind::Pressure).ok(),
    })
}

/// Relative slack allowed when testing a value against the Wiener bounds.
pub fn bound_slack(tol: f64) -> f64 {
    (100.0 * tol).max(1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k_3dpim: f64,
    pub k_oracle: f64,
    pub relative_error: f64,
    pub lower_bound_harmonic: f64,
    pub upper_bound_arithmetic: f64,
    pub pim_within_bounds: bool,
    pub oracle_within_bounds: bool,
    pub within_bounds: bool,
}

fn within(value: f64, lo: f64, hi: f64, slack: f64) -> bool {
    value >= lo * (1.0 - slack) && value <= hi * (1.0 + slack)
}

pub fn compare(predicted: &DecodeReport, oracle: &OracleSolution) -> Comparison {
    let (lo, hi) = (
        predicted.lower_bound_harmonic,
        predicted.upper_bound_arithmetic,
    );
    let relative_error = if oracle.k_eff == 0.0 {
        if predicted.k_3d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        ((predicted.k_3d - oracle.k_eff) / oracle.k_eff).abs()
    };
    let pim_within_bounds = within(predicted.k_3d, lo, hi, 1e-12);
    let oracle_within_bounds = within(oracle.k_eff, lo, hi, bound_slack(oracle.tolerance));
    Comparison {
        k_3dpim: predicted.k_3d,
        k_oracle: oracle.k_eff,
        relative_error,
        lower_bound_harmonic: lo,
        upper_bound_arithmetic: hi,
        pim_within_bounds,
        oracle_within_bounds,
        within_bounds: pim_within_bounds && oracle_within_bounds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pim::{decode, wiener_bounds};

    fn map(
        dims: (usize, usize, usize),
        f: impl FnMut(usize, usize, usize) -> f64,
    ) -> PermeabilityMap {
        PermeabilityMap::from_fn(dims, 10.0, f).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn uniform_field_is_exact() {
        let s = resistor_oracle(&map((5, 4, 6), |_, _, _| 37.0), 1e-10, None).unwrap();
        assert!(rel(s.k_eff, 37.0) < 1e-9, "{}", s.k_eff);
        assert!(s.residual <= 1e-10);
        assert!(s.percolating);
    }

    #[test]
    fn layers_give_harmonic_mean() {
        let s = resistor_oracle(
            &map((3, 3, 8), |_, _, z| if z < 4 { 100.0 } else { 300.0 }),
            1e-10,
            None,
        )
        .unwrap();
        assert!(rel(s.k_eff, 150.0) < 1e-8, "{}", s.k_eff);
    }

    #[test]
    fn columns_give_arithmetic_mean() {
        let s = resistor_oracle(
            &map((4, 2, 6), |x, _, _| if x < 2 { 100.0 } else { 300.0 }),
            1e-10,
            None,
        )
        .unwrap();
        assert!(rel(s.k_eff, 200.0) < 1e-8, "{}", s.k_eff);
    }

    #[test]
    fn single_slice_column() {
        let s = resistor_oracle(&map((1, 1, 1), |_, _, _| 5.0), 1e-10, None).unwrap();
        assert!(rel(s.k_eff, 5.0) < 1e-12);
    }

    #[test]
    fn blocking_slice_skips_solve() {
        let s = resistor_oracle(
            &map((3, 3, 5), |_, _, z| if z == 2 { 0.0 } else { 50.0 }),
            1e-8,
            None,
        )
        .unwrap();
        assert_eq!(s.k_eff, 0.0);
        assert!(!s.percolating);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn dead_ends_and_floating_clusters_carry_no_flow() {
        // one open column at x = 0, a side pocket off it at (1, 3), and an
        // isolated pocket at (2, 2)
        let m = map((3, 1, 5), |x, _, z| match (x, z) {
            (0, _) => 10.0,
            (2, 2) => 99.0,
            (1, 3) => 10.0,
            _ => 0.0,
        });
        let s = resistor_oracle(&m, 1e-12, None).unwrap();
        assert!(rel(s.k_eff, 10.0 / 3.0) < 1e-10, "{}", s.k_eff);
        let p = s.pressure.unwrap();
        assert_eq!(p.get(2, 0, 2), 0.0);
        // the side pocket sits at the pressure of the voxel it hangs off
        assert!((p.get(1, 0, 3) - p.get(0, 0, 3)).abs() < 1e-10);
    }

    #[test]
    fn non_convergence_is_reported() {
        let m = map((6, 6, 12), |x, y, z| {
            1.0 + ((x * 7 + y * 3 + z * 5) % 11) as f64
        });
        assert!(matches!(
            resistor_oracle(&m, 1e-12, Some(2)),
            Err(MicromodelError::NonConvergence { .. })
        ));
        assert!(resistor_oracle(&m, 0.0, None).is_err());
    }

    #[test]
    fn oracle_is_monotone_in_voxel_permeability() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = (5, 5, 6);
        for _ in 0..10 {
            let values: Vec<f64> = (0..150).map(|_| rng.random_range(1.0..100.0)).collect();
            let base = map(dims, |x, y, z| values[x + 5 * (y + 5 * z)]);
            let bump = rng.random_range(0..150);
            let raised = map(dims, |x, y, z| {
                let i = x + 5 * (y + 5 * z);
                if i == bump {
                    values[i] * 3.0
                } else {
                    values[i]
                }
            });
            let a = resistor_oracle(&base, 1e-12, None).unwrap().k_eff;
            let b = resistor_oracle(&raised, 1e-12, None).unwrap().k_eff;
            assert!(b >= a * (1.0 - 1e-10), "{a} -> {b}");
        }
    }

    #[test]
    fn oracle_within_wiener_bounds_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let values: Vec<f64> = (0..4 * 4 * 5)
                .map(|_| rng.random_range(0.5..500.0))
                .collect();
            let m = map((4, 4, 5), |x, y, z| values[x + 4 * (y + 4 * z)]);
            let s = resistor_oracle(&m, 1e-10, None).unwrap();
            let (h, a) = wiener_bounds(&m);
            assert!(s.k_eff >= h * (1.0 - 1e-8) && s.k_eff <= a * (1.0 + 1e-8));
            let c = compare(&decode(&m), &s);
            assert!(c.within_bounds);
        }
    }

    #[test]
    fn pressure_decreases_along_flow_in_layers() {
        let s =
            resistor_oracle(&map((2, 2, 6), |_, _, z| [5.0, 50.0][z % 2]), 1e-12, None).unwrap();
        let p = s.pressure.unwrap();
        for z in 1..6 {
            assert!(p.get(0, 0, z) < p.get(0, 0, z - 1));
        }
        assert!((s.inlet_flux - s.outlet_flux).abs() < 1e-8 * s.inlet_flux);
    }

    #[test]
    fn spec_validation() {
        assert!(MicromodelSpec::new(SampleLayout::Homogeneous2000, 1000.0)
            .validate()
            .is_ok());
        assert!(MicromodelSpec::new(SampleLayout::Homogeneous2000, 500.0)
            .validate()
            .is_ok());
        assert!(matches!(
            MicromodelSpec::new(SampleLayout::Homogeneous2000, 3000.0).validate(),
            Err(MicromodelError::IncompatibleVoxelSize { .. })
        ));
        assert!(MicromodelSpec::new(SampleLayout::Homogeneous2000, -1.0)
            .validate()
            .is_err());
        assert_eq!(
            MicromodelSpec::new(SampleLayout::Homogeneous2000, 1000.0).dims(),
            (38, 38, 78)
        );
    }

    #[test]
    fn default_mesh_mapping() {
        let m = MeshPermeability::from_laterals(&MicromodelSpec::new(
            SampleLayout::Homogeneous2000,
            1000.0,
        ))
        .unwrap();
        assert!(rel(m.fine_md, 85_800.0) < 1e-12);
        assert!(rel(m.coarse_md, 343_200.0) < 1e-12);
    }

    #[test]
    fn layouts() {
        let vs = 2000.0;
        let h = generate_micromodel(
            &MicromodelSpec::new(SampleLayout::Homogeneous2000, vs),
            None,
        )
        .unwrap();
        let inside: Vec<f64> = h
            .kmap
            .grid()
            .values()
            .iter()
            .copied()
            .filter(|&k| k > 0.0)
            .collect();
        assert!(!inside.is_empty());
        assert!(inside.iter().all(|&k| k == inside[0]));
        assert_eq!(h.labels.get(0, 0, 0), WALL_CLASS);
        assert_eq!(h.kmap.grid().get(0, 0, 0), 0.0);
        assert_eq!(h.labels.get(9, 9, 0), FINE_CLASS);

        let s = generate_micromodel(&MicromodelSpec::new(SampleLayout::SerialTwoZone, vs), None)
            .unwrap();
        let (_, _, nz) = s.kmap.dims();
        let mut bands: Vec<(usize, f64)> =
            (0..nz).map(|z| (z, s.kmap.grid().get(9, 9, z))).collect();
        bands.dedup_by(|a, b| a.1 == b.1);
        assert_eq!(bands.len(), 2);
        assert_eq!(bands[1].0, nz / 2);

        let p = generate_micromodel(
            &MicromodelSpec::new(SampleLayout::ParallelTwoZone, vs),
            None,
        )
        .unwrap();
        assert_ne!(p.kmap.grid().get(5, 9, 3), p.kmap.grid().get(14, 9, 3));
        assert_eq!(p.kmap.grid().get(5, 9, 3), p.kmap.grid().get(5, 9, 30));
    }

    #[test]
    fn arbitrary_layout_is_reproducible() {
        let spec = MicromodelSpec::new(SampleLayout::ArbitraryHeterogeneous { seed: 42 }, 2000.0);
        let a = generate_micromodel(&spec, None).unwrap();
        let b = generate_micromodel(&spec, None).unwrap();
        assert_eq!(a.kmap, b.kmap);
        assert_eq!(a.labels, b.labels);
        let other = generate_micromodel(
            &MicromodelSpec::new(SampleLayout::ArbitraryHeterogeneous { seed: 43 }, 2000.0),
            None,
        )
        .unwrap();
        assert_ne!(a.labels, other.labels);
        let counts = crate::segmenter::class_counts(&a.labels);
        assert!(counts[FINE_CLASS.id() as usize] > 0 && counts[COARSE_CLASS.id() as usize] > 0);
    }

    #[test]
    fn custom_mapping_is_direct() {
        let spec = MicromodelSpec::new(SampleLayout::Homogeneous4000, 2000.0);
        let m = generate_micromodel(
            &spec,
            Some(MeshPermeability {
                fine_md: 1.0,
                coarse_md: 2.0,
            }),
        )
        .unwrap();
        assert_eq!(m.table.get(COARSE_CLASS), Some(2.0));
        assert_eq!(
            m.table.entries[&COARSE_CLASS].provenance,
            Provenance::DirectConstant
        );
        let d = generate_micromodel(&spec, None).unwrap();
        assert!(matches!(
            d.table.entries[&COARSE_CLASS].provenance,
            Provenance::FromMeshLateral { .. }
        ));
    }
}
