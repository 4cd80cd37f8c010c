//! Runs the requested engines and writes their outputs.

use crate::config::{self, Experiment};
use anyhow::{Context, Result};
use multipass_core::dmft::{self, one_pass_effective, DmftModel, DmftTrace};
use multipass_core::hardness::{self, ClassifyOptions, Direction, DirectionVerdict};
use multipass_core::presets::Engine;
use multipass_core::{directions, targets, Projection, TargetFunction};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;
use std::time::Instant;

/// Shared header of every curve CSV.
pub const CSV_HEADER: [&str; 9] = [
    "engine",
    "t",
    "schedule",
    "direction_name",
    "overlap_mean",
    "overlap_std",
    "loss_mean",
    "overlap_abs_mean",
    "overlap_abs_std",
];

#[derive(Debug, Serialize)]
struct Row<'a> {
    engine: &'a str,
    t: usize,
    schedule: &'a str,
    direction_name: &'a str,
    overlap_mean: f64,
    overlap_std: f64,
    loss_mean: f64,
    overlap_abs_mean: f64,
    overlap_abs_std: f64,
}

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub train: u64,
    pub dmft: u64,
    pub hardness: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub config: Experiment,
    pub seeds: Seeds,
    pub files: Vec<String>,
    /// Seconds per engine.
    pub wall_time: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
struct HardnessEntry {
    name: String,
    #[serde(flatten)]
    verdict: DirectionVerdict,
}

#[derive(Debug, Serialize)]
struct HardnessReport<'a> {
    target: &'a str,
    k: usize,
    k_max: usize,
    directions: Vec<HardnessEntry>,
}

pub const VERSION: &str = env!("MULTIPASS_VERSION");

/// Run every engine in `e`, writing into `e.out`. Returns the manifest.
pub fn run(e: &Experiment) -> Result<Manifest> {
    let target = targets::resolve(&e.target)?;
    let projections = directions::resolve_all(&e.directions, &target)?;
    std::fs::create_dir_all(&e.out).with_context(|| format!("creating {}", e.out.display()))?;
    let mut manifest = Manifest {
        version: VERSION,
        config: e.clone(),
        seeds: Seeds { train: e.train.seed, dmft: e.dmft.seed, hardness: e.train.seed },
        files: Vec::new(),
        wall_time: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for &engine in &e.engines {
        let start = Instant::now();
        match engine {
            Engine::Sim => sim(e, &target, &projections, &mut manifest)?,
            Engine::Dmft | Engine::OnePassTheory => theory(e, engine, &target, &projections, &mut manifest)?,
            Engine::Hardness => {
                let report = hardness_report(e, &target, &projections)?;
                for d in &report.directions {
                    manifest.warnings.extend(d.verdict.warnings.iter().map(|w| format!("hardness {}: {w}", d.name)));
                }
                write_json(&e.out, "hardness.json", &report, &mut manifest)?;
            }
        }
        manifest.wall_time.insert(engine.name().into(), start.elapsed().as_secs_f64());
    }
    let path = e.out.join("manifest.json");
    manifest.files.push("manifest.json".into());
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

fn csv_writer(out: &Path, name: &str, manifest: &mut Manifest) -> Result<csv::Writer<File>> {
    let path = out.join(name);
    manifest.files.push(name.into());
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(CSV_HEADER)?;
    Ok(w)
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T, manifest: &mut Manifest) -> Result<()> {
    let path = out.join(name);
    manifest.files.push(name.into());
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn sim(e: &Experiment, target: &TargetFunction, projections: &[Projection], manifest: &mut Manifest) -> Result<()> {
    let mut w = csv_writer(&e.out, "sim.csv", manifest)?;
    for schedule in &e.train.schedules {
        let cfg = config::train_config(e, schedule)?;
        let trace = multipass_core::gdsim::train(&cfg, target, projections)?;
        let label = cfg.schedule.to_string();
        for series in &trace.projections {
            for (i, &t) in trace.t.iter().enumerate() {
                w.serialize(Row {
                    engine: "sim",
                    t,
                    schedule: &label,
                    direction_name: &series.name,
                    overlap_mean: series.mean[i],
                    overlap_std: series.stderr[i],
                    loss_mean: trace.loss_mean[i],
                    overlap_abs_mean: series.abs_mean[i],
                    overlap_abs_std: series.abs_stderr[i],
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn theory(
    e: &Experiment,
    engine: Engine,
    target: &TargetFunction,
    projections: &[Projection],
    manifest: &mut Manifest,
) -> Result<()> {
    let schedule = e.train.schedules.first().map(String::as_str).unwrap_or("full_batch");
    let model = DmftModel::from_train(&config::train_config(e, schedule)?)?;
    let cfg = config::dmft_config(e);
    let (trace, label): (DmftTrace, &str) = match engine {
        Engine::Dmft => (dmft::integrate(&cfg, target, &model)?, "full_batch"),
        _ => (one_pass_effective(&cfg, target, &model)?, "fresh"),
    };
    manifest.warnings.extend(trace.warnings.iter().map(|w| format!("{}: {w}", engine.name())));
    let mut w = csv_writer(&e.out, &format!("{}.csv", engine.name()), manifest)?;
    for p in projections {
        for (i, (v, se)) in trace.projection(p).into_iter().enumerate() {
            w.serialize(Row {
                engine: engine.name(),
                t: trace.t[i],
                schedule: label,
                direction_name: &p.name,
                overlap_mean: v,
                overlap_std: se,
                loss_mean: trace.loss[i],
                overlap_abs_mean: v,
                overlap_abs_std: se,
            })?;
        }
    }
    w.flush()?;
    if engine == Engine::Dmft {
        write_json(&e.out, "dmft_kernels.json", &trace, manifest)?;
    }
    Ok(())
}

/// Directions classified: the single-vector projections, then the axes, then custom ones.
fn hardness_report<'a>(
    e: &'a Experiment,
    target: &TargetFunction,
    projections: &[Projection],
) -> Result<HardnessReport<'a>> {
    let k = target.k();
    let mut dirs: Vec<(String, Direction)> = Vec::new();
    for p in projections.iter().filter(|p| p.basis.len() == 1) {
        dirs.push((p.name.clone(), Direction::new(&p.basis[0])?));
    }
    for i in 0..k {
        let name = format!("e{}", i + 1);
        if !dirs.iter().any(|(n, _)| *n == name) {
            dirs.push((name, Direction::axis(k, i)?));
        }
    }
    for (i, c) in e.hardness.custom.iter().enumerate() {
        dirs.push((format!("custom{}", i + 1), Direction::new(c)?));
    }
    let opts = ClassifyOptions {
        k_max: e.hardness.k_max,
        n_mc: e.hardness.n_mc,
        seed: e.train.seed,
        ..Default::default()
    };
    let directions = dirs
        .into_iter()
        .map(|(name, d)| Ok(HardnessEntry { name, verdict: hardness::classify_direction(target, &d, &opts)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(HardnessReport { target: &e.target, k, k_max: e.hardness.k_max, directions })
}

/// Standalone hardness report for the `hardness` subcommand.
pub fn hardness_only(e: &Experiment) -> Result<serde_json::Value> {
    let target = targets::resolve(&e.target)?;
    let report = hardness_report(e, &target, &[])?;
    Ok(serde_json::to_value(report)?)
}
