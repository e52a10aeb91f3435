use std::path::Path;

use anyhow::Context;
use permdecode::micromodel::DEFAULT_TOL;
use permdecode::segmenter::DEFAULT_K;
use permdecode::{FlowAxis, PackingConfig};
use serde::{Deserialize, Serialize};

/// Parameters shared by every subcommand. Resolved as defaults, then the
/// config file, then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    pub flow_axis: FlowAxis,
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub k_neighbors: usize,
    pub bins: usize,
    pub seed: u64,
    pub packing: PackingConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            flow_axis: FlowAxis::Z,
            tol: DEFAULT_TOL,
            max_iter: None,
            k_neighbors: DEFAULT_K,
            bins: 64,
            seed: 0,
            packing: PackingConfig::Rhombohedral,
        }
    }
}

/// Flag values; `None` leaves the lower layer in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub flow_axis: Option<FlowAxis>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub k_neighbors: Option<usize>,
    pub bins: Option<usize>,
    pub seed: Option<u64>,
    pub packing: Option<PackingConfig>,
}

impl Settings {
    pub fn resolve(config: Option<&Path>, flags: &Overrides) -> anyhow::Result<Self> {
        let mut s = match config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config file {}", path.display()))?
            }
            None => Settings::default(),
        };
        if let Some(v) = flags.flow_axis {
            s.flow_axis = v;
        }
        if let Some(v) = flags.tol {
            s.tol = v;
        }
        if flags.max_iter.is_some() {
            s.max_iter = flags.max_iter;
        }
        if let Some(v) = flags.k_neighbors {
            s.k_neighbors = v;
        }
        if let Some(v) = flags.bins {
            s.bins = v;
        }
        if let Some(v) = flags.seed {
            s.seed = v;
        }
        if let Some(v) = flags.packing {
            s.packing = v;
        }
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(
            self.tol.is_finite() && self.tol > 0.0,
            "tol must be positive, got {}",
            self.tol
        );
        anyhow::ensure!(self.bins > 0, "bins must be at least 1");
        anyhow::ensure!(
            !self.k_neighbors.is_multiple_of(2),
            "k-neighbors must be odd, got {}",
            self.k_neighbors
        );
        Ok(())
    }
}
