use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use permdecode::calib;
use permdecode::geometry::{self, GrainRadius, ThroatShape};
use permdecode::grid;
use permdecode::micromodel::{self, MicromodelSpec, SampleLayout};
use permdecode::phantom::{self, SeedPlacement};
use permdecode::pim::{self, PermeabilityMap};
use permdecode::pipeline::{self, DecodeInputs, PipelineConfig, ValidationConfig};
use permdecode::segmenter::{self, ClassMask, TrainingSeeds};
use permdecode::{DhzClass, FlowAxis, PackingConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::settings::Settings;
use crate::{Placement, SynthKind, TableFormat};

/// Wrapper written around every JSON result. Everything except
/// `run_metadata` is a pure function of settings and inputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub command: String,
    pub tool_version: String,
    pub settings: Settings,
    pub inputs: BTreeMap<String, String>,
    pub result: T,
    pub run_metadata: RunMetadata,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub unix_time_s: u64,
    pub threads: usize,
}

impl RunMetadata {
    fn now() -> Self {
        Self {
            unix_time_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            threads: rayon::current_num_threads(),
        }
    }
}

fn inputs(pairs: &[(&str, Option<&Path>)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .filter_map(|(k, v)| v.map(|p| (k.to_string(), p.display().to_string())))
        .collect()
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_envelope<T: Serialize>(
    path: &Path,
    command: &str,
    settings: &Settings,
    inputs: BTreeMap<String, String>,
    result: T,
) -> anyhow::Result<()> {
    let envelope = Envelope {
        command: command.to_string(),
        tool_version: pipeline::TOOL_VERSION.to_string(),
        settings: settings.clone(),
        inputs,
        result,
        run_metadata: RunMetadata::now(),
    };
    write_text(path, &(serde_json::to_string_pretty(&envelope)? + "\n"))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn pipeline_config(settings: &Settings) -> PipelineConfig {
    PipelineConfig {
        k_neighbors: settings.k_neighbors,
        packing: settings.packing,
        flow_axis: settings.flow_axis,
        bins: settings.bins,
        ..PipelineConfig::default()
    }
}

fn load_kmap(path: &Path, axis: FlowAxis) -> anyhow::Result<PermeabilityMap> {
    let g = grid::load_grid(path)?;
    let g = if axis == FlowAxis::Z {
        g
    } else {
        g.reorient(axis)
    };
    Ok(PermeabilityMap::new(g)?)
}

pub fn geometry_table(format: TableFormat, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let text = match format {
        TableFormat::Csv => geometry::geometry_table_csv(),
        TableFormat::Json => {
            let rows: Vec<_> = PackingConfig::ALL
                .into_iter()
                .map(geometry::packing_geometry)
                .collect();
            let value = json!({
                "packings": rows,
                "pore_area_coeff": 4.0,
                "diamond_throat_coeff": ThroatShape::ConcaveDiamond.coefficient(),
                "triangle_throat_coeff": ThroatShape::ConcaveTriangle.coefficient(),
                "throat_to_pore_ratio_2d": geometry::throat_to_pore_ratio_2d(),
                "unit_convention": geometry::PERMEABILITY_UNIT_CONVENTION,
            });
            serde_json::to_string_pretty(&value)? + "\n"
        }
    };
    match out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_dims(text: &str) -> anyhow::Result<(usize, usize, usize)> {
    let parts: Vec<usize> = text
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("invalid dims '{text}'"))?;
    match parts[..] {
        [nx, ny, nz] if nx > 0 && ny > 0 && nz > 0 => Ok((nx, ny, nz)),
        _ => bail!("dims must be three positive integers like 64x64x64, got '{text}'"),
    }
}

pub fn synth(settings: &Settings, kind: SynthKind) -> anyhow::Result<ExitCode> {
    match kind {
        SynthKind::Phantom {
            dims,
            noise,
            textured,
            seeds_per_class,
            placement,
            out_dir,
        } => {
            let dims = parse_dims(&dims)?;
            if textured && noise != 0.0 {
                bail!("--noise applies to the four-band phantom only");
            }
            anyhow::ensure!(
                noise >= 0.0 && noise.is_finite(),
                "noise must be non-negative"
            );
            let p = if textured {
                phantom::textured_bands(dims, settings.seed)
            } else {
                phantom::four_band(
                    dims,
                    phantom::DEFAULT_BAND_INTENSITIES,
                    noise,
                    settings.seed,
                )
            };
            let placement = match placement {
                Placement::Interior => SeedPlacement::Interior,
                Placement::Anywhere => SeedPlacement::Anywhere,
            };
            let seeds = phantom::sample_seeds(
                &p.truth,
                seeds_per_class,
                placement,
                settings.seed.wrapping_add(1),
            );
            create_dir(&out_dir)?;
            grid::save_grid(&p.grid, &out_dir.join("intensity.raw"))?;
            segmenter::save_labels(&p.truth, p.grid.voxel_size_um(), &out_dir.join("truth.raw"))?;
            seeds.save(&out_dir.join("seeds.json"))?;
            let result = json!({
                "kind": if textured { "textured_bands" } else { "four_band" },
                "dims": dims,
                "noise_sigma": noise,
                "seeds": seeds.0.len(),
                "class_fractions": fractions_map(&p.truth),
            });
            write_envelope(
                &out_dir.join("synth.json"),
                "synth",
                settings,
                BTreeMap::new(),
                result,
            )?;
            println!(
                "wrote phantom {}x{}x{} to {}",
                dims.0,
                dims.1,
                dims.2,
                out_dir.display()
            );
        }
        SynthKind::Micromodel {
            sample,
            voxel_size,
            out_dir,
        } => {
            let layout = SampleLayout::parse(&sample.to_lowercase(), settings.seed)
                .with_context(|| format!("unknown sample '{sample}'"))?;
            let spec = MicromodelSpec::new(layout, voxel_size);
            let model = micromodel::generate_micromodel(&spec, None)?;
            create_dir(&out_dir)?;
            grid::save_grid(model.kmap.grid(), &out_dir.join("kmap.raw"))?;
            segmenter::save_labels(&model.labels, voxel_size, &out_dir.join("labels.raw"))?;
            write_text(
                &out_dir.join("class_table.csv"),
                &pipeline::class_table_csv(&model.table),
            )?;
            let result =
                json!({ "spec": spec, "dims": model.kmap.dims(), "class_table": model.table });
            write_envelope(
                &out_dir.join("synth.json"),
                "synth",
                settings,
                BTreeMap::new(),
                result,
            )?;
            println!(
                "wrote {layout} {:?} to {}",
                model.kmap.dims(),
                out_dir.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn fractions_map(labels: &segmenter::LabelGrid) -> BTreeMap<DhzClass, f64> {
    let f = segmenter::class_fractions(labels);
    DhzClass::ALL.into_iter().map(|c| (c, f.get(c))).collect()
}

pub fn segment(
    settings: &Settings,
    input: &Path,
    seeds_path: &Path,
    out_dir: &Path,
    truth: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let g = grid::load_grid(input)?;
    let seeds = TrainingSeeds::load(seeds_path)?;
    let model = segmenter::train(&g, &seeds, settings.k_neighbors)?;
    let labels = segmenter::classify(&g, &model);
    let accuracy = match truth {
        Some(path) => {
            let t = segmenter::load_labels(path)?;
            anyhow::ensure!(
                t.dims() == labels.dims(),
                "truth dims {:?} differ from volume {:?}",
                t.dims(),
                labels.dims()
            );
            Some(json!({
                "all_voxels": phantom::accuracy(&labels, &t, false),
                "excluding_boundary_shell": phantom::accuracy(&labels, &t, true),
            }))
        }
        None => None,
    };
    create_dir(out_dir)?;
    segmenter::save_labels(&labels, g.voxel_size_um(), &out_dir.join("labels.raw"))?;
    model.save(&out_dir.join("model.json"))?;
    let result = json!({
        "dims": labels.dims(),
        "k": model.k,
        "dropped_features": model.dropped_features,
        "class_counts": segmenter::class_counts(&labels),
        "class_fractions": fractions_map(&labels),
        "accuracy": accuracy,
    });
    let files = inputs(&[
        ("input", Some(input)),
        ("seeds", Some(seeds_path)),
        ("truth", truth),
    ]);
    write_envelope(
        &out_dir.join("segment.json"),
        "segment",
        settings,
        files,
        &result,
    )?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(ExitCode::SUCCESS)
}

pub fn calibrate(
    settings: &Settings,
    calibration: &Path,
    input: Option<&Path>,
    mask: Option<(&Path, DhzClass)>,
    mriii: Option<f64>,
    out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let model = pipeline::load_calibration(calibration)?;
    let lookup = match (mriii, input) {
        (Some(v), _) => calib::grain_diameter_from_intensity(&model, v),
        (None, Some(path)) => {
            let g = grid::load_grid(path)?;
            match mask {
                Some((labels_path, class)) => {
                    let labels = segmenter::load_labels(labels_path)?;
                    calib::decode_grain_diameter(&g, &model, Some(ClassMask::new(&labels, class)))?
                }
                None => calib::decode_grain_diameter(&g, &model, None)?,
            }
        }
        (None, None) => bail!("calibrate needs --mriii or --input"),
    };
    let r = GrainRadius::from_diameter(lookup.grain_diameter_um)?;
    let result = json!({
        "lookup": lookup,
        "grain_radius_um": r.um(),
        "packing": settings.packing,
        "k_md": geometry::permeability_from_grain_radius(settings.packing, r),
    });
    if lookup.extrapolated {
        eprintln!(
            "warning: intensity {} is outside the calibrated range",
            lookup.mriii_mean
        );
    }
    match out {
        Some(path) => {
            let files = inputs(&[
                ("calibration", Some(calibration)),
                ("input", input),
                ("labels", mask.map(|m| m.0)),
            ]);
            write_envelope(path, "calibrate", settings, files, &result)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn decode(
    settings: &Settings,
    input: PathBuf,
    seeds: Option<PathBuf>,
    labels: Option<PathBuf>,
    calibration: PathBuf,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let files = inputs(&[
        ("input", Some(&input)),
        ("seeds", seeds.as_deref()),
        ("labels", labels.as_deref()),
        ("calibration", Some(&calibration)),
    ]);
    let request = DecodeInputs {
        intensity: input,
        seeds,
        labels,
        calibration,
    };
    let out = pipeline::run_decode_files(&request, &pipeline_config(settings))?;
    create_dir(out_dir)?;
    let vs = out.report.voxel_size_um;
    segmenter::save_labels(&out.labels, vs, &out_dir.join("labels.raw"))?;
    grid::save_grid(out.kmap.grid(), &out_dir.join("kmap.raw"))?;
    write_text(&out_dir.join("slice_k.csv"), &out.report.decode.slice_csv())?;
    if let Some(table) = &out.report.decode.class_table {
        write_text(
            &out_dir.join("class_table.csv"),
            &pipeline::class_table_csv(table),
        )?;
    }
    for summary in &out.report.classes {
        if let Some(h) = &summary.histogram {
            write_text(
                &out_dir.join(format!("histogram_{}.csv", summary.class.name())),
                &h.to_csv(),
            )?;
        }
    }
    for w in &out.report.warnings {
        eprintln!("warning: {w}");
    }
    let d = &out.report.decode;
    println!(
        "k_3d = {} mD (harmonic {} .. arithmetic {}){}",
        d.k_3d,
        d.lower_bound_harmonic,
        d.upper_bound_arithmetic,
        if d.blocked { ", blocked" } else { "" }
    );
    write_envelope(
        &out_dir.join("report.json"),
        "decode",
        settings,
        files,
        out.report,
    )?;
    Ok(ExitCode::SUCCESS)
}

pub fn decode_kmap(
    settings: &Settings,
    kmap_path: &Path,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let kmap = load_kmap(kmap_path, settings.flow_axis)?;
    let report = pim::decode(&kmap);
    create_dir(out_dir)?;
    write_text(&out_dir.join("slice_k.csv"), &report.slice_csv())?;
    println!(
        "k_3d = {} mD (harmonic {} .. arithmetic {})",
        report.k_3d, report.lower_bound_harmonic, report.upper_bound_arithmetic
    );
    let files = inputs(&[("kmap", Some(kmap_path))]);
    write_envelope(
        &out_dir.join("report.json"),
        "decode",
        settings,
        files,
        report,
    )?;
    Ok(ExitCode::SUCCESS)
}

pub fn oracle(
    settings: &Settings,
    kmap_path: &Path,
    out_dir: &Path,
    pressure: bool,
) -> anyhow::Result<ExitCode> {
    let kmap = load_kmap(kmap_path, settings.flow_axis)?;
    let predicted = pim::decode(&kmap);
    let solution = micromodel::resistor_oracle(&kmap, settings.tol, settings.max_iter)?;
    let comparison = micromodel::compare(&predicted, &solution);
    create_dir(out_dir)?;
    if pressure {
        if let Some(p) = &solution.pressure {
            grid::save_grid(p, &out_dir.join("pressure.raw"))?;
        }
    }
    println!(
        "k_oracle = {} mD, k_3d = {} mD, relative error {:.3e}, {} iterations",
        comparison.k_oracle, comparison.k_3dpim, comparison.relative_error, solution.iterations
    );
    let files = inputs(&[("kmap", Some(kmap_path))]);
    let result = json!({ "oracle": solution, "comparison": comparison });
    write_envelope(
        &out_dir.join("oracle.json"),
        "oracle",
        settings,
        files,
        result,
    )?;
    Ok(ExitCode::SUCCESS)
}

pub fn validate(
    settings: &Settings,
    samples: Option<Vec<String>>,
    voxel_size: f64,
    match_tolerance: f64,
    out_dir: &Path,
) -> anyhow::Result<ExitCode> {
    let names = samples.unwrap_or_else(|| (1..=5).map(|n| n.to_string()).collect());
    let specs = names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .map(|n| {
            SampleLayout::parse(&n.trim().to_lowercase(), settings.seed)
                .map(|layout| MicromodelSpec::new(layout, voxel_size))
                .with_context(|| format!("unknown sample '{n}'"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let config = ValidationConfig {
        tol: settings.tol,
        max_iter: settings.max_iter,
        match_tolerance,
        mapping: None,
    };
    let table = pipeline::run_validation_suite(&specs, &config);
    create_dir(out_dir)?;
    let csv = table.to_csv();
    write_text(&out_dir.join("validation.csv"), &csv)?;
    print!("{csv}");
    let passed = table.all_passed();
    write_envelope(
        &out_dir.join("validation.json"),
        "validate",
        settings,
        BTreeMap::new(),
        table,
    )?;
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    })
}

pub fn report(path: &Path) -> anyhow::Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let env: Envelope<Value> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    println!("{} report (permdecode {})", env.command, env.tool_version);
    for (k, v) in &env.inputs {
        println!("  {k}: {v}");
    }
    let r = &env.result;
    match env.command.as_str() {
        "decode" => {
            let d = r.get("decode").unwrap_or(r);
            println!("k_3d: {} mD", d["k_3d"]);
            println!(
                "bounds: harmonic {} .. arithmetic {}",
                d["lower_bound_harmonic"], d["upper_bound_arithmetic"]
            );
            println!("slices: {}", d["slice_k"].as_array().map_or(0, Vec::len));
            if let Some(classes) = r["classes"].as_array() {
                for c in classes {
                    println!(
                        "  {:<15} fraction {:.4}  mriii {}",
                        c["class"].as_str().unwrap_or("?"),
                        c["fraction"].as_f64().unwrap_or(0.0),
                        c["mriii_mean"]
                    );
                }
            }
            if let Some(entries) = d["class_table"]["entries"].as_object() {
                for (class, e) in entries {
                    println!(
                        "  {:<15} k {} mD  [{}]",
                        class,
                        e["k_md"],
                        e["provenance"]["kind"].as_str().unwrap_or("")
                    );
                }
            }
            if let Some(w) = r["warnings"].as_array() {
                for w in w {
                    println!("warning: {}", w.as_str().unwrap_or(""));
                }
            }
        }
        "validate" => {
            for row in r["rows"].as_array().into_iter().flatten() {
                println!(
                    "  {:<32} 3dpim {:<22} oracle {:<22} err {:<24} {}",
                    row["sample"].as_str().unwrap_or("?"),
                    row["k_3dpim"],
                    row["k_oracle"],
                    row["relative_error"],
                    if row["passed"].as_bool() == Some(true) {
                        "pass"
                    } else {
                        "FAIL"
                    }
                );
            }
        }
        "oracle" => {
            let c = &r["comparison"];
            println!("k_oracle: {} mD", c["k_oracle"]);
            println!("k_3d: {} mD", c["k_3dpim"]);
            println!("relative error: {}", c["relative_error"]);
            println!("within bounds: {}", c["within_bounds"]);
        }
        _ => println!("{}", serde_json::to_string_pretty(r)?),
    }
    Ok(ExitCode::SUCCESS)
}
