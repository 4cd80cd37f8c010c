//! Named experiment presets for each reported experiment at desk scale, with the
//! reference-scale values kept alongside.

use crate::activation::ScalarFn;
use crate::error::{Error, Result};
use crate::gdsim::{BatchSchedule, GradNormalization, SecondLayer, TeacherKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The computations an experiment can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Sim,
    Dmft,
    OnePassTheory,
    Hardness,
}

impl Engine {
    pub const ALL: [Engine; 4] = [Engine::Sim, Engine::Dmft, Engine::OnePassTheory, Engine::Hardness];

    pub fn name(self) -> &'static str {
        match self {
            Engine::Sim => "sim",
            Engine::Dmft => "dmft",
            Engine::OnePassTheory => "one_pass_theory",
            Engine::Hardness => "hardness",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Engine::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown engine {s:?}; expected sim, dmft, one_pass_theory or hardness")))
    }
}

/// Size knobs that differ between desk and reference scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub d: usize,
    pub runs: usize,
    pub n_samples: usize,
}

/// Number of steps, fixed or in passes over the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Steps(usize),
    /// Epochs of the first listed schedule's minibatch size.
    Epochs(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub family: &'static str,
    pub summary: &'static str,
    /// Registry name or spec string.
    pub target: &'static str,
    pub activation: ScalarFn,
    pub p: usize,
    pub alpha: f64,
    /// Desk-scale step size; may be calibrated away from the reference value.
    pub eta: f64,
    /// Reference step size, restored by the --paper-scale switch.
    pub reference_eta: f64,
    pub lambda: f64,
    pub horizon: Horizon,
    pub schedules: &'static [&'static str],
    pub directions: &'static [&'static str],
    pub engines: &'static [Engine],
    pub desk: Scale,
    pub reference: Scale,
}

const DESK: Scale = Scale { d: 2000, runs: 16, n_samples: 100_000 };
const REFERENCE_5K: Scale = Scale { d: 5000, runs: 32, n_samples: 1_000_000 };
const REFERENCE_10K: Scale = Scale { d: 10_000, runs: 32, n_samples: 1_000_000 };
const BOTH: &[&str] = &["full_batch", "fresh"];
const ALL_THEORY: &[Engine] = &[Engine::Sim, Engine::Dmft, Engine::OnePassTheory];
const COORDS4: &[&str] = &["e1", "e2", "e3", "e4"];

fn single_index(name: &'static str, family: &'static str, summary: &'static str, target: &'static str) -> Preset {
    Preset {
        name,
        family,
        summary,
        target,
        activation: ScalarFn::Relu,
        p: 1,
        alpha: 3.0,
        eta: 0.1,
        reference_eta: 0.1,
        lambda: 0.0,
        horizon: Horizon::Steps(6),
        schedules: BOTH,
        directions: &["teacher"],
        engines: ALL_THEORY,
        desk: DESK,
        reference: REFERENCE_5K,
    }
}

fn two_index(name: &'static str, family: &'static str, summary: &'static str, target: &'static str) -> Preset {
    Preset {
        p: 8,
        // no reference step size; 0.3 makes the orthogonal overlap resolvable at d = 2000
        eta: 0.3,
        reference_eta: 0.3,
        directions: &["C1", "C1_perp"],
        ..single_index(name, family, summary, target)
    }
}

fn reuse_demo(name: &'static str, family: &'static str, summary: &'static str, schedules: &'static [&'static str]) -> Preset {
    Preset {
        p: 4,
        alpha: 5.0,
        eta: 0.2,
        reference_eta: 0.2,
        horizon: Horizon::Steps(12),
        schedules,
        directions: COORDS4,
        engines: &[Engine::Sim],
        reference: REFERENCE_10K,
        ..single_index(name, family, summary, "z1z2z3_he3")
    }
}

/// Every preset, in family order.
pub fn presets() -> Vec<Preset> {
    vec![
        single_index("fig1_left", "single-index", "tanh target (IE 1): both protocols learn", "tanh"),
        single_index("fig1_center", "single-index", "He3 target: learned in two reused steps only", "he3"),
        single_index("fig1_right", "single-index", "He4 target (even): learned by neither", "he4"),
        two_index("fig2_left", "two-index", "z1 + z1 z2 (reconstruction): staircase learned by both", "easy_multi"),
        two_index("fig2_center", "two-index", "z1 + He3(z2) (reconstruction): orthogonal direction needs reuse", "leap3_multi"),
        two_index("fig2_right", "two-index", "committee of two tanh units: (e2-e1)/sqrt2 stays hard", "committee"),
        Preset {
            horizon: Horizon::Steps(6),
            engines: ALL_THEORY,
            ..reuse_demo("fig3", "reuse", "z1 z2 z3 + He3(z4): only z4 is learned, even with reuse", BOTH)
        },
        reuse_demo("fig4_sequential", "minibatch", "minibatches of n/5 visited in order", &["sequential:n/5"]),
        reuse_demo("fig4_replacement", "minibatch", "minibatches of n/5 drawn with replacement", &["replacement:n/5"]),
        Preset {
            horizon: Horizon::Epochs(2.5),
            ..reuse_demo("fig5_minibatch1", "minibatch", "minibatches of a single sample, visited in order", &["sequential:1"])
        },
        Preset {
            p: 4,
            eta: 0.2,
            reference_eta: 0.2,
            horizon: Horizon::Steps(4),
            directions: &["e1", "e2", "e3"],
            ..single_index("staircase", "staircase", "z1 + z1 z2 + z1 z2 z3: sequential learning", "staircase3")
        },
        Preset {
            horizon: Horizon::Steps(2),
            ..single_index("linear_anchor", "anchor", "g*(x) = x: M(1) = eta alpha a / 2", "single:id")
        },
    ]
}

pub fn lookup(name: &str) -> Result<Preset> {
    presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = presets().iter().map(|p| p.name).collect();
        Error::config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
    })
}

impl Preset {
    pub fn scale(&self, paper_scale: bool) -> Scale {
        if paper_scale {
            self.reference
        } else {
            self.desk
        }
    }

    pub fn eta(&self, paper_scale: bool) -> f64 {
        if paper_scale {
            self.reference_eta
        } else {
            self.eta
        }
    }
}

/// Number of steps for a horizon, given n and the first schedule.
pub fn resolve_steps(horizon: Horizon, n: usize, schedule: &str) -> Result<usize> {
    match horizon {
        Horizon::Steps(t) => Ok(t),
        Horizon::Epochs(e) => {
            let batch = match BatchSchedule::parse(schedule, n)? {
                BatchSchedule::Sequential(b) | BatchSchedule::WithReplacement(b) => b,
                BatchSchedule::CycleEpochs(ne) => n / ne,
                _ => n,
            };
            Ok(((e * n as f64) / batch as f64).ceil().max(1.0) as usize)
        }
    }
}

/// Simulation config for one schedule of a preset.
pub fn train_config(
    p: &Preset,
    d: usize,
    eta: f64,
    steps: usize,
    schedule: &str,
    runs: usize,
    seed: u64,
) -> Result<TrainConfig> {
    let n = (p.alpha * d as f64).round() as usize;
    let cfg = TrainConfig {
        d,
        alpha: p.alpha,
        p: p.p,
        eta,
        lambda: p.lambda,
        steps,
        schedule: BatchSchedule::parse(schedule, n)?,
        seed,
        runs,
        activation: p.activation,
        second_layer: SecondLayer::PlusMinus,
        grad_normalization: GradNormalization::Sum,
        teacher: TeacherKind::Random,
    };
    cfg.validate()?;
    Ok(cfg)
}
