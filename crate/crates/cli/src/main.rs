//! `multipass`: run simulations, DMFT integration and hardness analysis from
//! presets or config files.

mod config;
mod engines;

use clap::{Args, Parser, Subcommand};
use config::{ConfigError, Overrides};
use multipass_core::presets::{self, Engine, Horizon};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "multipass", version = engines::VERSION, about = "Multi-pass gradient descent on multi-index targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: preset, then config file, then flags.
    Run(RunArgs),
    /// List the built-in presets.
    Presets,
    /// Classify directions of a target by their first nonzero moment.
    Hardness(HardnessArgs),
}

fn list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse().map_err(|e: T::Err| ConfigError(format!("--{flag} {x:?}: {e}"))))
        .collect()
}

// `custom:a,b` contains commas, so directions are separated by ';'
fn names(s: &str) -> Vec<String> {
    s.split(';').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    preset: Option<String>,
    /// TOML or JSON config; a previous manifest.json also works.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    p: Option<usize>,
    /// Number of steps.
    #[arg(long = "T", alias = "steps")]
    steps: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// DMFT replica count.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: sim, dmft, one_pass_theory, hardness.
    #[arg(long)]
    engines: Option<String>,
    /// Comma-separated batch schedules.
    #[arg(long)]
    schedule: Option<String>,
    /// Semicolon-separated direction names.
    #[arg(long)]
    directions: Option<String>,
    #[arg(long)]
    kernel_mode: Option<String>,
    #[arg(long)]
    formulation: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use reference dimensions, run counts and sample sizes.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct HardnessArgs {
    /// Registry name or target spec.
    target: String,
    #[arg(long, default_value_t = multipass_core::hardness::DEFAULT_K_MAX)]
    k_max: usize,
    /// Extra direction, comma-separated; repeatable.
    #[arg(long)]
    custom: Vec<String>,
    #[arg(long, default_value_t = 100_000)]
    n_mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let file = a.config.as_deref().map(config::load).transpose()?;
    let flags = Overrides {
        preset: a.preset,
        target: a.target,
        d: a.d,
        alpha: a.alpha,
        eta: a.eta,
        lambda: a.lambda,
        p: a.p,
        steps: a.steps,
        runs: a.runs,
        samples: a.samples,
        seed: a.seed,
        engines: a.engines.as_deref().map(|s| list::<Engine>("engines", s)).transpose()?,
        out: a.out,
        schedules: a.schedule.as_deref().map(|s| list::<String>("schedule", s)).transpose()?,
        directions: a.directions.as_deref().map(names),
        paper_scale: a.paper_scale,
    };
    let mut e = config::resolve(file, &flags)?;
    if let Some(k) = a.kernel_mode {
        e.dmft.kernel_mode = k.parse()?;
    }
    if let Some(f) = a.formulation {
        e.dmft.formulation = f.parse()?;
    }
    let m = engines::run(&e)?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} files to {}", m.files.len(), e.out.display());
    Ok(())
}

fn cmd_presets() {
    println!("{:<18} {:<14} {:<12} {:>2} {:>5} {:>5} {:>8}  {:<28} summary", "name", "family", "target", "p", "alpha", "eta", "T", "schedules");
    for p in presets::presets() {
        let horizon = match p.horizon {
            Horizon::Steps(t) => t.to_string(),
            Horizon::Epochs(e) => format!("{e} ep"),
        };
        println!(
            "{:<18} {:<14} {:<12} {:>2} {:>5} {:>5} {:>8}  {:<28} {}",
            p.name,
            p.family,
            p.target,
            p.p,
            p.alpha,
            p.eta,
            horizon,
            p.schedules.join(","),
            p.summary
        );
    }
}

fn cmd_hardness(a: HardnessArgs) -> anyhow::Result<()> {
    let custom = a.custom.iter().map(|s| list::<f64>("custom", s)).collect::<Result<Vec<_>, _>>()?;
    let patch: config::Patch = serde_json::from_value(serde_json::json!({
        "target": a.target,
        "engines": ["hardness"],
        "directions": [],
        "train": { "seed": a.seed },
        "hardness": { "k_max": a.k_max, "custom": custom, "n_mc": a.n_mc },
    }))?;
    let e = config::resolve(Some(patch), &Overrides::default())?;
    let report = serde_json::to_string_pretty(&engines::hardness_only(&e)?)?;
    match a.out {
        Some(path) => std::fs::write(&path, report + "\n")?,
        None => println!("{report}"),
    }
    Ok(())
}

/// 2 for bad input, 3 for numerical failure, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<multipass_core::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Presets => {
            cmd_presets();
            Ok(())
        }
        Command::Hardness(a) => cmd_hardness(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
