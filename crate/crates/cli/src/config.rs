//! Experiment configuration: preset defaults, then a TOML or JSON file, then
//! command-line flags. The fully resolved [`Experiment`] is echoed into the
//! manifest, and a manifest is itself a valid config file.

use multipass_core::dmft::{Formulation, KernelMode};
use multipass_core::gdsim::{GradNormalization, SecondLayer};
use multipass_core::presets::{self, Engine, Horizon};
use multipass_core::{directions, targets, ScalarFn};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Invalid user input; reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub d: usize,
    pub alpha: f64,
    pub p: usize,
    pub eta: f64,
    pub lambda: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub schedules: Vec<String>,
    pub activation: ScalarFn,
    pub second_layer: SecondLayer,
    pub grad_normalization: GradNormalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmftSection {
    pub n_samples: usize,
    pub seed: u64,
    pub kernel_mode: KernelMode,
    pub formulation: Formulation,
    pub memory_limit_mib: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardnessSection {
    pub k_max: usize,
    /// Extra directions in the teacher basis, each of length k.
    pub custom: Vec<Vec<f64>>,
    pub n_mc: usize,
}

/// A fully specified experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub preset: Option<String>,
    pub target: String,
    pub engines: Vec<Engine>,
    pub directions: Vec<String>,
    pub out: PathBuf,
    pub paper_scale: bool,
    pub train: TrainSection,
    pub dmft: DmftSection,
    pub hardness: HardnessSection,
}

// Partial mirrors: every field optional, unknown fields rejected.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPatch {
    pub d: Option<usize>,
    pub alpha: Option<f64>,
    pub p: Option<usize>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    #[serde(rename = "T")]
    pub steps: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub schedules: Option<Vec<String>>,
    pub activation: Option<ScalarFn>,
    pub second_layer: Option<SecondLayer>,
    pub grad_normalization: Option<GradNormalization>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmftPatch {
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub kernel_mode: Option<KernelMode>,
    pub formulation: Option<Formulation>,
    pub memory_limit_mib: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardnessPatch {
    pub k_max: Option<usize>,
    pub custom: Option<Vec<Vec<f64>>>,
    pub n_mc: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub preset: Option<String>,
    pub target: Option<String>,
    pub engines: Option<Vec<Engine>>,
    pub directions: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub paper_scale: Option<bool>,
    #[serde(default)]
    pub train: TrainPatch,
    #[serde(default)]
    pub dmft: DmftPatch,
    #[serde(default)]
    pub hardness: HardnessPatch,
}

/// Read a TOML or JSON config. A manifest (JSON with a `config` object) is
/// accepted and its resolved config used as is.
pub fn load(path: &Path) -> Result<Patch, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if is_json {
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| bad(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column())))?;
        let value = match value.get("config") {
            Some(inner) if value.get("files").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).map_err(|e| bad(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }
}

/// Command-line overrides, applied last.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<String>,
    pub target: Option<String>,
    pub d: Option<usize>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub p: Option<usize>,
    pub steps: Option<usize>,
    pub runs: Option<usize>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub engines: Option<Vec<Engine>>,
    pub out: Option<PathBuf>,
    pub schedules: Option<Vec<String>>,
    pub directions: Option<Vec<String>>,
    pub paper_scale: bool,
}

const DEFAULT_MEMORY_MIB: usize = 2048;

fn base(preset: Option<&str>, paper_scale: bool) -> Result<Experiment, ConfigError> {
    let p = match preset {
        Some(name) => presets::lookup(name).map_err(|e| bad(e.to_string()))?,
        None => presets::lookup("fig1_center").expect("built-in preset"),
    };
    let scale = p.scale(paper_scale);
    let n = (p.alpha * scale.d as f64).round() as usize;
    let steps = presets::resolve_steps(p.horizon, n, p.schedules[0]).map_err(|e| bad(e.to_string()))?;
    Ok(Experiment {
        preset: preset.map(str::to_string),
        target: p.target.to_string(),
        engines: p.engines.to_vec(),
        directions: p.directions.iter().map(|s| s.to_string()).collect(),
        out: PathBuf::from("out").join(preset.unwrap_or("experiment")),
        paper_scale,
        train: TrainSection {
            d: scale.d,
            alpha: p.alpha,
            p: p.p,
            eta: p.eta(paper_scale),
            lambda: p.lambda,
            steps,
            runs: scale.runs,
            seed: 0,
            schedules: p.schedules.iter().map(|s| s.to_string()).collect(),
            activation: p.activation,
            second_layer: SecondLayer::PlusMinus,
            grad_normalization: GradNormalization::Sum,
        },
        dmft: DmftSection {
            n_samples: scale.n_samples,
            seed: 0,
            kernel_mode: KernelMode::Pathwise,
            formulation: Formulation::TwoProcess,
            memory_limit_mib: DEFAULT_MEMORY_MIB,
        },
        hardness: HardnessSection { k_max: multipass_core::hardness::DEFAULT_K_MAX, custom: Vec::new(), n_mc: 100_000 },
    })
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

/// Merge preset, file and flags into a validated experiment.
pub fn resolve(file: Option<Patch>, flags: &Overrides) -> Result<Experiment, ConfigError> {
    let file = file.unwrap_or_default();
    let preset = flags.preset.clone().or(file.preset.clone());
    let paper_scale = flags.paper_scale || file.paper_scale.unwrap_or(false);
    let mut e = base(preset.as_deref(), paper_scale)?;
    // Without a preset there is no sensible target default.
    if preset.is_none() && file.target.is_none() && flags.target.is_none() {
        return Err(bad("either a preset or a target must be given (field `target` or --preset)"));
    }
    let steps_from_horizon = preset
        .as_deref()
        .and_then(|n| presets::lookup(n).ok())
        .is_some_and(|p| matches!(p.horizon, Horizon::Epochs(_)));

    set!(e.target, file.target);
    set!(e.engines, file.engines);
    set!(e.directions, file.directions);
    set!(e.out, file.out);
    let t = file.train;
    set!(e.train.d, t.d);
    set!(e.train.alpha, t.alpha);
    set!(e.train.p, t.p);
    set!(e.train.eta, t.eta);
    set!(e.train.lambda, t.lambda);
    let file_steps = t.steps.is_some();
    set!(e.train.steps, t.steps);
    set!(e.train.runs, t.runs);
    set!(e.train.seed, t.seed);
    set!(e.train.schedules, t.schedules);
    set!(e.train.activation, t.activation);
    set!(e.train.second_layer, t.second_layer);
    set!(e.train.grad_normalization, t.grad_normalization);
    let dm = file.dmft;
    let dmft_seed_set = dm.seed.is_some();
    set!(e.dmft.n_samples, dm.n_samples);
    set!(e.dmft.seed, dm.seed);
    set!(e.dmft.kernel_mode, dm.kernel_mode);
    set!(e.dmft.formulation, dm.formulation);
    set!(e.dmft.memory_limit_mib, dm.memory_limit_mib);
    let h = file.hardness;
    set!(e.hardness.k_max, h.k_max);
    set!(e.hardness.custom, h.custom);
    set!(e.hardness.n_mc, h.n_mc);

    set!(e.target, flags.target.clone());
    set!(e.train.d, flags.d);
    set!(e.train.alpha, flags.alpha);
    set!(e.train.eta, flags.eta);
    set!(e.train.lambda, flags.lambda);
    set!(e.train.p, flags.p);
    set!(e.train.steps, flags.steps);
    set!(e.train.runs, flags.runs);
    set!(e.dmft.n_samples, flags.samples);
    set!(e.train.seed, flags.seed);
    set!(e.engines, flags.engines.clone());
    set!(e.out, flags.out.clone());
    set!(e.train.schedules, flags.schedules.clone());
    set!(e.directions, flags.directions.clone());
    e.paper_scale = paper_scale;
    if !dmft_seed_set {
        e.dmft.seed = e.train.seed;
    }
    // Epoch-based horizons follow the dimension unless T was given.
    if steps_from_horizon && !file_steps && flags.steps.is_none() {
        let p = presets::lookup(preset.as_deref().unwrap_or_default()).map_err(|e| bad(e.to_string()))?;
        let n = (e.train.alpha * e.train.d as f64).round() as usize;
        e.train.steps =
            presets::resolve_steps(p.horizon, n, &e.train.schedules[0]).map_err(|err| bad(format!("train.T: {err}")))?;
    }
    validate(&e)?;
    Ok(e)
}

/// Field-level checks beyond what parsing enforces.
pub fn validate(e: &Experiment) -> Result<(), ConfigError> {
    let target = targets::resolve(&e.target).map_err(|err| bad(format!("target: {err}")))?;
    if e.engines.is_empty() {
        return Err(bad("engines: at least one engine is required"));
    }
    if e.train.schedules.is_empty() && e.engines.contains(&Engine::Sim) {
        return Err(bad("train.schedules: the sim engine needs at least one schedule"));
    }
    directions::resolve_all(&e.directions, &target).map_err(|err| bad(format!("directions: {err}")))?;
    for s in &e.train.schedules {
        let cfg = train_config(e, s).map_err(|err| bad(format!("train: {err}")))?;
        cfg.validate().map_err(|err| bad(format!("train: {err}")))?;
    }
    if e.engines.iter().any(|x| matches!(x, Engine::Dmft | Engine::OnePassTheory)) {
        if e.train.second_layer != SecondLayer::PlusMinus {
            return Err(bad("train.second_layer: the theory engines need plus_minus"));
        }
        if e.train.grad_normalization != GradNormalization::Sum {
            return Err(bad("train.grad_normalization: the theory engines assume summed gradients"));
        }
        dmft_config(e).validate().map_err(|err| bad(format!("dmft: {err}")))?;
    }
    if e.hardness.k_max == 0 {
        return Err(bad("hardness.k_max must be at least 1"));
    }
    for (i, c) in e.hardness.custom.iter().enumerate() {
        if c.len() != target.k() {
            return Err(bad(format!("hardness.custom[{i}] has {} entries but the target has k = {}", c.len(), target.k())));
        }
    }
    Ok(())
}

pub fn train_config(e: &Experiment, schedule: &str) -> multipass_core::Result<multipass_core::TrainConfig> {
    let n = (e.train.alpha * e.train.d as f64).round() as usize;
    Ok(multipass_core::TrainConfig {
        d: e.train.d,
        alpha: e.train.alpha,
        p: e.train.p,
        eta: e.train.eta,
        lambda: e.train.lambda,
        steps: e.train.steps,
        schedule: multipass_core::BatchSchedule::parse(schedule, n)?,
        seed: e.train.seed,
        runs: e.train.runs,
        activation: e.train.activation,
        second_layer: e.train.second_layer,
        grad_normalization: e.train.grad_normalization,
        teacher: multipass_core::TeacherKind::Random,
    })
}

pub fn dmft_config(e: &Experiment) -> multipass_core::dmft::DmftConfig {
    let mut c = multipass_core::dmft::DmftConfig::new(e.train.alpha, e.train.eta, e.train.lambda, e.train.steps);
    c.n_samples = e.dmft.n_samples;
    c.seed = e.dmft.seed;
    c.kernel_mode = e.dmft.kernel_mode;
    c.formulation = e.dmft.formulation;
    c.memory_limit = e.dmft.memory_limit_mib << 20;
    c
}
