//! `permdecode`: permeability decoding of segmented 3D voxel volumes.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 solver
//! non-convergence, 4 some validation samples failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use permdecode::micromodel::MicromodelError;
use permdecode::pipeline::PipelineError;
use permdecode::{DhzClass, FlowAxis, PackingConfig};

mod commands;
mod settings;

use settings::{Overrides, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "permdecode",
    version,
    about = "Simulation-free permeability decoding of 3D voxel volumes"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON file with any of the flags below (kebab-case keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Flow direction; the volume is rotated so this axis becomes z.
    #[arg(long, global = true)]
    flow_axis: Option<FlowAxis>,
    /// Relative residual tolerance for the resistor-network solver.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Neighbour count for the k-NN segmenter (odd).
    #[arg(long, global = true)]
    k_neighbors: Option<usize>,
    /// Histogram bins for per-class intensity summaries.
    #[arg(long, global = true)]
    bins: Option<usize>,
    /// Seed for synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Packing used to turn grain size into permeability.
    #[arg(long, global = true)]
    packing: Option<PackingConfig>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TableFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Placement {
    Interior,
    Anywhere,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the sphere-packing constants.
    GeometryTable {
        #[arg(long, value_enum, default_value = "csv")]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic volumes with known answers.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Train on seeds and label every voxel.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Ground-truth labels to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Map an intensity (or a volume's mean intensity) to grain diameter.
    Calibrate {
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long, conflicts_with = "mriii", required_unless_present = "mriii")]
        input: Option<PathBuf>,
        #[arg(long, requires = "class")]
        labels: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        class: Option<DhzClass>,
        #[arg(long)]
        mriii: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline to k_3d, or aggregation of an existing permeability map.
    Decode {
        #[arg(long, required_unless_present = "kmap", requires = "calibration")]
        input: Option<PathBuf>,
        #[arg(long, conflicts_with = "labels")]
        seeds: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Permeability map (mD) to aggregate directly.
        #[arg(long, conflicts_with_all = ["input", "seeds", "labels", "calibration"])]
        kmap: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Solve the resistor network on a permeability map and compare.
    Oracle {
        #[arg(long)]
        kmap: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write the pressure field.
        #[arg(long)]
        pressure: bool,
    },
    /// Run the micromodel samples through decode and the oracle.
    Validate {
        /// Sample numbers or names; pass the flag with no values for none.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        samples: Option<Vec<String>>,
        #[arg(long, default_value_t = 1000.0)]
        voxel_size: f64,
        /// Relative agreement required on separable samples.
        #[arg(long, default_value_t = 1e-4)]
        match_tolerance: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarise a JSON report written by another subcommand.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Four-class intensity phantom with ground truth and seeds.
    Phantom {
        /// NXxNYxNZ, e.g. 64x64x64.
        #[arg(long, default_value = "64x64x64")]
        dims: String,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Intergranular classes share a mean and differ in texture.
        #[arg(long)]
        textured: bool,
        #[arg(long, default_value_t = 5)]
        seeds_per_class: usize,
        #[arg(long, value_enum, default_value = "interior")]
        placement: Placement,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Printed-cylinder micromodel permeability map.
    Micromodel {
        /// Sample number 1-5 or layout name.
        #[arg(long)]
        sample: String,
        #[arg(long, default_value_t = 1000.0)]
        voxel_size: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(MicromodelError::NonConvergence { .. }) =
            cause.downcast_ref::<MicromodelError>()
        {
            return 3;
        }
        if cause
            .downcast_ref::<PipelineError>()
            .is_some_and(PipelineError::is_non_convergence)
        {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let g = cli.global;
    let flags = Overrides {
        flow_axis: g.flow_axis,
        tol: g.tol,
        max_iter: g.max_iter,
        k_neighbors: g.k_neighbors,
        bins: g.bins,
        seed: g.seed,
        packing: g.packing,
    };
    let settings = Settings::resolve(g.config.as_deref(), &flags)?;
    match cli.command {
        Command::GeometryTable { format, out } => commands::geometry_table(format, out.as_deref()),
        Command::Synth { kind } => commands::synth(&settings, kind),
        Command::Segment {
            input,
            seeds,
            out_dir,
            truth,
        } => commands::segment(&settings, &input, &seeds, &out_dir, truth.as_deref()),
        Command::Calibrate {
            calibration,
            input,
            labels,
            class,
            mriii,
            out,
        } => commands::calibrate(
            &settings,
            &calibration,
            input.as_deref(),
            labels.as_deref().zip(class),
            mriii,
            out.as_deref(),
        ),
        Command::Decode {
            input,
            seeds,
            labels,
            calibration,
            kmap,
            out_dir,
        } => match (kmap, input, calibration) {
            (Some(kmap), _, _) => commands::decode_kmap(&settings, &kmap, &out_dir),
            (None, Some(input), Some(calibration)) => {
                commands::decode(&settings, input, seeds, labels, calibration, &out_dir)
            }
            _ => anyhow::bail!("decode needs --kmap, or --input with --calibration"),
        },
        Command::Oracle {
            kmap,
            out_dir,
            pressure,
        } => commands::oracle(&settings, &kmap, &out_dir, pressure),
        Command::Validate {
            samples,
            voxel_size,
            match_tolerance,
            out_dir,
        } => commands::validate(&settings, samples, voxel_size, match_tolerance, &out_dir),
        Command::Report { input } => commands::report(&input),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
