//! Synthetic intensity phantoms with known labels, for scoring segmentation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::{ValueKind, VoxelGrid};
use crate::segmenter::{DhzClass, LabelGrid, Seed, TrainingSeeds};

/// Band intensities indexed by class id, on a 0–255 scale.
pub const DEFAULT_BAND_INTENSITIES: [f64; DhzClass::COUNT] = [220.0, 10.0, 80.0, 150.0];

#[derive(Debug, Clone)]
pub struct Phantom {
    pub grid: VoxelGrid,
    pub truth: LabelGrid,
}

fn add_noise(values: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in values.iter_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 255.0);
    }
}

/// Four equal slabs along x, one per class in id order, each at a constant
/// intensity plus optional Gaussian noise (clamped to 0–255).
pub fn four_band(
    dims: (usize, usize, usize),
    intensities: [f64; DhzClass::COUNT],
    noise_sigma: f64,
    seed: u64,
) -> Phantom {
    let nx = dims.0;
    let truth = LabelGrid::from_fn(dims, |x, _, _| {
        DhzClass::ALL[(x * DhzClass::COUNT / nx).min(3)]
    });
    let mut values: Vec<f64> = truth
        .labels()
        .iter()
        .map(|c| intensities[c.id() as usize])
        .collect();
    add_noise(
        &mut values,
        noise_sigma,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    let grid = VoxelGrid::new(dims, 28.0, values, ValueKind::Intensity).expect("valid phantom");
    Phantom { grid, truth }
}

/// Four slabs where the two intergranular classes share a mean intensity and
/// differ only in their voxel-to-voxel variability.
pub fn textured_bands(dims: (usize, usize, usize), seed: u64) -> Phantom {
    let nx = dims.0;
    let truth = LabelGrid::from_fn(dims, |x, _, _| {
        DhzClass::ALL[(x * DhzClass::COUNT / nx).min(3)]
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rough = Normal::<f64>::new(0.0, 30.0).expect("valid");
    let values = truth
        .labels()
        .iter()
        .map(|c| match c {
            DhzClass::Pyrite => 230.0,
            DhzClass::OpenVug => 15.0,
            DhzClass::Intergranular1 => 120.0,
            DhzClass::Intergranular2 => (120.0 + rough.sample(&mut rng)).clamp(0.0, 255.0),
        })
        .collect();
    let grid = VoxelGrid::new(dims, 28.0, values, ValueKind::Intensity).expect("valid phantom");
    Phantom { grid, truth }
}

/// True for voxels whose edge-clamped 3×3×3 neighbourhood holds another label.
pub fn boundary_shell(truth: &LabelGrid) -> Vec<bool> {
    let (nx, ny, nz) = truth.dims();
    let mut shell = Vec::with_capacity(truth.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let c = truth.get(x, y, z);
                let mut mixed = false;
                for dz in -1isize..=1 {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let q = |i: usize, d: isize, n: usize| {
                                (i as isize + d).clamp(0, n as isize - 1) as usize
                            };
                            if truth.get(q(x, dx, nx), q(y, dy, ny), q(z, dz, nz)) != c {
                                mixed = true;
                            }
                        }
                    }
                }
                shell.push(mixed);
            }
        }
    }
    shell
}

/// Where [`sample_seeds`] may place seeds within a class region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPlacement {
    /// Only voxels off the boundary shell.
    Interior,
    /// Any voxel of the class, boundary included.
    Anywhere,
}

/// `per_class` seeds per class drawn at random from the allowed voxels.
pub fn sample_seeds(
    truth: &LabelGrid,
    per_class: usize,
    placement: SeedPlacement,
    seed: u64,
) -> TrainingSeeds {
    let (nx, ny, _) = truth.dims();
    let shell = match placement {
        SeedPlacement::Interior => boundary_shell(truth),
        SeedPlacement::Anywhere => vec![false; truth.len()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = Vec::new();
    for class in DhzClass::ALL {
        let mut pool: Vec<usize> = (0..truth.len())
            .filter(|&i| truth.labels()[i] == class && !shell[i])
            .collect();
        pool.shuffle(&mut rng);
        for &i in pool.iter().take(per_class) {
            seeds.push(Seed {
                x: i % nx,
                y: (i / nx) % ny,
                z: i / (nx * ny),
                class,
            });
        }
    }
    TrainingSeeds(seeds)
}

/// Fraction of voxels labelled correctly, optionally ignoring the shell.
pub fn accuracy(predicted: &LabelGrid, truth: &LabelGrid, exclude_shell: bool) -> f64 {
    assert_eq!(predicted.dims(), truth.dims());
    let shell = if exclude_shell {
        boundary_shell(truth)
    } else {
        vec![false; truth.len()]
    };
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, t), &skip) in predicted.labels().iter().zip(truth.labels()).zip(&shell) {
        if !skip {
            total += 1;
            hit += usize::from(p == t);
        }
    }
    hit as f64 / total.max(1) as f64
}
