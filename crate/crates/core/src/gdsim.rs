//! Direct simulation of full-batch, one-pass and minibatch gradient descent
//! on the first layer of a two-layer network with a fixed second layer.

use crate::activation::ScalarFn;
use crate::directions::Projection;
use crate::error::{Error, Result};
use crate::network::{Readout, MAX_NEURONS};
use crate::rng::{self, tag, Rng};
use crate::stats::Moments;
use crate::targets::{dot, TargetFunction, Teacher};
use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which samples each step sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSchedule {
    /// Every step uses the full step-0 dataset.
    FullBatchReuse,
    /// A brand-new dataset of n samples every step.
    FreshOnePass,
    /// The dataset split into `n_e` contiguous blocks, visited cyclically.
    CycleEpochs(usize),
    /// `n_b` indices drawn uniformly with replacement each step.
    WithReplacement(usize),
    /// Consecutive minibatches of `n_b` samples, wrapping around.
    Sequential(usize),
}

impl BatchSchedule {
    /// Parse "full_batch", "fresh", "cycle:5", "sequential:n/5",
    /// "replacement:400"; sizes may be absolute or "n/<m>".
    pub fn parse(spec: &str, n: usize) -> Result<Self> {
        let s = spec.trim();
        let size = |arg: &str| -> Result<usize> {
            let arg = arg.trim();
            let v = if let Some(div) = arg.strip_prefix("n/") {
                let m: usize = div.parse().map_err(|_| Error::config(format!("bad size in {spec:?}")))?;
                if m == 0 || n % m != 0 {
                    return Err(Error::config(format!("{spec:?}: n = {n} is not divisible by {m}")));
                }
                n / m
            } else {
                arg.parse().map_err(|_| Error::config(format!("bad size in {spec:?}")))?
            };
            if v == 0 {
                return Err(Error::config(format!("{spec:?}: size must be positive")));
            }
            Ok(v)
        };
        let sched = match s.split_once(':') {
            None => match s {
                "full_batch" | "full" | "reuse" => BatchSchedule::FullBatchReuse,
                "fresh" | "one_pass" => BatchSchedule::FreshOnePass,
                _ => return Err(Error::config(format!("unknown schedule {spec:?}"))),
            },
            Some((kind, arg)) => match kind {
                "cycle" => BatchSchedule::CycleEpochs(size(arg)?),
                "replacement" => BatchSchedule::WithReplacement(size(arg)?),
                "sequential" => BatchSchedule::Sequential(size(arg)?),
                _ => return Err(Error::config(format!("unknown schedule {spec:?}"))),
            },
        };
        sched.validate(n)?;
        Ok(sched)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            BatchSchedule::CycleEpochs(ne) if ne == 0 || n % ne != 0 => {
                Err(Error::config(format!("cycle:{ne} does not divide n = {n}")))
            }
            BatchSchedule::Sequential(nb) if nb == 0 || n % nb != 0 => {
                Err(Error::config(format!("sequential:{nb} does not divide n = {n}")))
            }
            BatchSchedule::WithReplacement(0) => Err(Error::config("replacement:0 is empty")),
            _ => Ok(()),
        }
    }

    /// True when the multi-pass effective theory applies to the schedule.
    pub fn is_full_batch(&self) -> bool {
        matches!(self, BatchSchedule::FullBatchReuse)
    }
}

impl fmt::Display for BatchSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSchedule::FullBatchReuse => write!(f, "full_batch"),
            BatchSchedule::FreshOnePass => write!(f, "fresh"),
            BatchSchedule::CycleEpochs(n) => write!(f, "cycle:{n}"),
            BatchSchedule::WithReplacement(n) => write!(f, "replacement:{n}"),
            BatchSchedule::Sequential(n) => write!(f, "sequential:{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondLayer {
    /// a_i = +-1/sqrt(p).
    PlusMinus,
    /// a_i ~ N(0, 1/p), paired with opposite signs.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNormalization {
    /// Sum of per-sample gradients.
    Sum,
    /// Average of per-sample gradients.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Random orthogonal rows (seeded per run).
    Random,
    /// Rows sqrt(d) e_1..e_k.
    Canonical,
}

/// Hyperparameters of one simulated protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d: usize,
    pub alpha: f64,
    pub p: usize,
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub schedule: BatchSchedule,
    pub seed: u64,
    pub runs: usize,
    pub activation: ScalarFn,
    pub second_layer: SecondLayer,
    pub grad_normalization: GradNormalization,
    pub teacher: TeacherKind,
}

impl TrainConfig {
    pub fn n(&self) -> usize {
        (self.alpha * self.d as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("d must be at least 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha must be positive"));
        }
        if self.p == 0 || (self.p != 1 && self.p % 2 == 1) || self.p > MAX_NEURONS {
            return Err(Error::config("p must be 1 or an even number up to 64"));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config("eta must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("T must be at least 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.n() == 0 {
            return Err(Error::config("alpha * d rounds to zero samples"));
        }
        self.schedule.validate(self.n())
    }
}

/// Inputs, teacher pre-activations and labels, all row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub z: Vec<f64>,
    pub hstar: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.d..(i + 1) * self.d]
    }

    /// Draw fresh inputs in place.
    pub fn resample(&mut self, teacher: &Teacher, target: &TargetFunction, rng: &mut Rng) {
        rng::fill_normal(rng, &mut self.z);
        for i in 0..self.n {
            let (z, hs) = (&self.z[i * self.d..(i + 1) * self.d], &mut self.hstar[i * self.k..(i + 1) * self.k]);
            teacher.project(z, hs);
            self.y[i] = target.eval(hs);
        }
    }
}

/// n i.i.d. N(0, I_d) inputs labelled by the teacher.
pub fn generate_dataset(n: usize, teacher: &Teacher, target: &TargetFunction, rng: &mut Rng) -> Dataset {
    let (d, k) = (teacher.d(), teacher.k());
    let mut ds = Dataset { d, k, n, z: vec![0.0; n * d], hstar: vec![0.0; n * k], y: vec![0.0; n] };
    ds.resample(teacher, target, rng);
    ds
}

/// First-layer weights plus the fixed readout.
#[derive(Debug, Clone)]
pub struct StudentState {
    pub d: usize,
    /// p x d, row-major.
    pub w: Vec<f64>,
    pub readout: Readout,
    /// Initial weights of neuron 0 when the frozen twin is active.
    pub twin: Option<Vec<f64>>,
}

impl StudentState {
    pub fn p(&self) -> usize {
        self.readout.p()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.w[j * self.d..(j + 1) * self.d]
    }

    /// M = W W*^T / d.
    pub fn overlap(&self, teacher: &Teacher) -> DMatrix<f64> {
        let (p, k) = (self.p(), teacher.k());
        DMatrix::from_fn(p, k, |j, l| dot(self.row(j), teacher.row(l)) / self.d as f64)
    }

    /// Network output at one input.
    pub fn forward(&self, z: &[f64]) -> f64 {
        let mut h = [0.0; MAX_NEURONS];
        let href = self.preactivations(z, &mut h);
        self.readout.output(&h[..self.p()], href)
    }

    fn preactivations(&self, z: &[f64], h: &mut [f64]) -> f64 {
        let s = 1.0 / (self.d as f64).sqrt();
        for (j, hj) in h.iter_mut().enumerate().take(self.p()) {
            *hj = dot(z, self.row(j)) * s;
        }
        self.twin.as_ref().map_or(0.0, |w0| dot(z, w0) * s)
    }
}

/// Symmetric initialization: paired rows and opposite second-layer signs
/// (p even), or a single neuron with a frozen twin (p = 1).
pub fn init_student(cfg: &TrainConfig, rng: &mut Rng, second_layer: SecondLayer) -> StudentState {
    let (p, d) = (cfg.p, cfg.d);
    let mut w = vec![0.0; p * d];
    let half = (p / 2).max(1);
    rng::fill_normal(rng, &mut w[..half * d]);
    let draw_a = |rng: &mut Rng| match second_layer {
        SecondLayer::PlusMinus => 1.0 / (p as f64).sqrt(),
        SecondLayer::Gaussian => rng::normal(rng) / (p as f64).sqrt(),
    };
    let mut a = vec![0.0; p];
    if p == 1 {
        a[0] = draw_a(rng);
        let twin = Some(w.clone());
        return StudentState { d, w, readout: Readout::new(a, cfg.activation, true), twin };
    }
    for i in 0..half {
        let mirror = p - 1 - i;
        let (head, tail) = w.split_at_mut(mirror * d);
        tail[..d].copy_from_slice(&head[i * d..(i + 1) * d]);
        a[i] = draw_a(rng);
        a[mirror] = -a[i];
    }
    StudentState { d, w, readout: Readout::new(a, cfg.activation, false), twin: None }
}

/// Reusable buffers for gradient steps.
#[derive(Debug, Default)]
pub struct StepWorkspace {
    grad: Vec<f64>,
}

/// One gradient step on the rows `rows` of `data`:
/// w_j <- (1 - eta lambda) w_j - eta sum_nu dL_nu/dw_j.
/// Returns the mean per-sample loss before the step.
pub fn gd_step(
    student: &mut StudentState,
    data: &Dataset,
    rows: &[usize],
    eta: f64,
    lambda: f64,
    norm: GradNormalization,
    ws: &mut StepWorkspace,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::config("gradient step on an empty batch"));
    }
    let (p, d) = (student.p(), student.d);
    ws.grad.clear();
    ws.grad.resize(p * d, 0.0);
    let mut h = [0.0; MAX_NEURONS];
    let mut fg = [0.0; MAX_NEURONS];
    let mut loss = 0.0;
    for &nu in rows {
        let z = data.row(nu);
        let href = student.preactivations(z, &mut h);
        let r = student.readout.grad(&h[..p], href, data.y[nu], &mut fg[..p]);
        loss += 0.5 * r * r;
        for j in 0..p {
            let c = fg[j];
            if c != 0.0 {
                ws.grad[j * d..(j + 1) * d].iter_mut().zip(z).for_each(|(g, &x)| *g += c * x);
            }
        }
    }
    let mut scale = eta / (d as f64).sqrt();
    if norm == GradNormalization::Mean {
        scale /= rows.len() as f64;
    }
    let decay = 1.0 - eta * lambda;
    let mut finite = true;
    for (w, &g) in student.w.iter_mut().zip(&ws.grad) {
        *w = decay * *w - scale * g;
        finite &= w.is_finite();
    }
    if !finite || !loss.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite weights after a gradient step (eta = {eta:e}); the step size is too large"
        )));
    }
    Ok(loss / rows.len() as f64)
}

/// Mean per-sample loss of the current student on `rows`.
pub fn evaluate_loss(student: &StudentState, data: &Dataset, rows: &[usize]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|&nu| {
            let r = data.y[nu] - student.forward(data.row(nu));
            0.5 * r * r
        })
        .sum();
    total / rows.len().max(1) as f64
}

/// Overlaps and losses of a single run, t = 0..=T.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub m: Vec<DMatrix<f64>>,
    pub loss: Vec<f64>,
}

pub fn run_teacher(cfg: &TrainConfig, k: usize, run: usize) -> Result<Teacher> {
    match cfg.teacher {
        TeacherKind::Random => Teacher::random(cfg.d, k, rng::derive(cfg.seed, &[run as u64])),
        TeacherKind::Canonical => Teacher::canonical(cfg.d, k),
    }
}

pub fn run_student(cfg: &TrainConfig, run: usize) -> StudentState {
    let mut rng = rng::stream(cfg.seed, &[tag::INIT, run as u64]);
    init_student(cfg, &mut rng, cfg.second_layer)
}

/// One independent run of the protocol.
pub fn train_run(cfg: &TrainConfig, target: &TargetFunction, run: usize) -> Result<RunTrace> {
    cfg.validate()?;
    let teacher = run_teacher(cfg, target.k(), run)?;
    let mut student = run_student(cfg, run);
    let n = cfg.n();
    let r = run as u64;
    let mut data = generate_dataset(n, &teacher, target, &mut rng::stream(cfg.seed, &[tag::DATA, r, 0]));
    let mut sched_rng = rng::stream(cfg.seed, &[tag::SCHEDULE, r]);
    let all: Vec<usize> = (0..n).collect();
    let mut rows: Vec<usize> = Vec::new();
    let mut ws = StepWorkspace::default();
    let mut trace = RunTrace { m: vec![student.overlap(&teacher)], loss: Vec::with_capacity(cfg.steps + 1) };
    for t in 0..cfg.steps {
        match cfg.schedule {
            BatchSchedule::FullBatchReuse => rows.clone_from(&all),
            BatchSchedule::FreshOnePass => {
                if t > 0 {
                    data.resample(&teacher, target, &mut rng::stream(cfg.seed, &[tag::DATA, r, t as u64]));
                }
                rows.clone_from(&all);
            }
            BatchSchedule::CycleEpochs(ne) => {
                let b = n / ne;
                let start = (t % ne) * b;
                rows = (start..start + b).collect();
            }
            BatchSchedule::Sequential(nb) => {
                let start = (t * nb) % n;
                rows = (start..start + nb).collect();
            }
            BatchSchedule::WithReplacement(nb) => {
                rows = (0..nb).map(|_| sched_rng.random_range(0..n)).collect();
            }
        }
        let loss = gd_step(&mut student, &data, &rows, cfg.eta, cfg.lambda, cfg.grad_normalization, &mut ws)?;
        trace.loss.push(loss);
        trace.m.push(student.overlap(&teacher));
    }
    trace.loss.push(evaluate_loss(&student, &data, &rows));
    Ok(trace)
}

/// A projection tracked over time.
#[derive(Debug, Clone, Serialize)]
pub struct ProjectionSeries {
    pub name: String,
    /// Projection of the run-averaged overlap matrix.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Run average of per-run projections (biased upward by finite-d noise).
    pub abs_mean: Vec<f64>,
    pub abs_stderr: Vec<f64>,
}

/// Run-averaged overlap trajectory with standard errors.
#[derive(Debug, Clone)]
pub struct OverlapTrace {
    pub label: String,
    pub runs: usize,
    pub t: Vec<usize>,
    pub m_mean: Vec<DMatrix<f64>>,
    pub m_stderr: Vec<DMatrix<f64>>,
    pub loss_mean: Vec<f64>,
    pub loss_stderr: Vec<f64>,
    pub projections: Vec<ProjectionSeries>,
    pub per_run: Vec<RunTrace>,
}

impl OverlapTrace {
    pub fn from_runs(label: String, t: Vec<usize>, per_run: Vec<RunTrace>, projections: &[Projection]) -> Self {
        let len = t.len();
        let (p, k) = per_run[0].m[0].shape();
        let mut m_mean = Vec::with_capacity(len);
        let mut m_stderr = Vec::with_capacity(len);
        let mut loss_mean = Vec::with_capacity(len);
        let mut loss_stderr = Vec::with_capacity(len);
        for s in 0..len {
            let mut mean = DMatrix::zeros(p, k);
            let mut se = DMatrix::zeros(p, k);
            for j in 0..p {
                for l in 0..k {
                    let mut mo = Moments::default();
                    per_run.iter().for_each(|r| mo.push(r.m[s][(j, l)]));
                    mean[(j, l)] = mo.mean();
                    se[(j, l)] = mo.stderr();
                }
            }
            m_mean.push(mean);
            m_stderr.push(se);
            let mut lo = Moments::default();
            per_run.iter().for_each(|r| lo.push(r.loss[s]));
            loss_mean.push(lo.mean());
            loss_stderr.push(lo.stderr());
        }
        let projections = projections
            .iter()
            .map(|pr| {
                let mut series = ProjectionSeries {
                    name: pr.name.clone(),
                    mean: Vec::with_capacity(len),
                    stderr: Vec::with_capacity(len),
                    abs_mean: Vec::with_capacity(len),
                    abs_stderr: Vec::with_capacity(len),
                };
                for s in 0..len {
                    series.mean.push(pr.apply(&m_mean[s]));
                    series.stderr.push(pr.apply_stderr(&m_mean[s], &m_stderr[s]));
                    let mut mo = Moments::default();
                    per_run.iter().for_each(|r| mo.push(pr.apply(&r.m[s])));
                    series.abs_mean.push(mo.mean());
                    series.abs_stderr.push(mo.stderr());
                }
                series
            })
            .collect();
        Self { label, runs: per_run.len(), t, m_mean, m_stderr, loss_mean, loss_stderr, projections, per_run }
    }

    pub fn projection(&self, name: &str) -> Option<&ProjectionSeries> {
        self.projections.iter().find(|p| p.name == name)
    }
}

/// Runs in parallel, each deterministic; aggregation is in run order.
pub fn train(cfg: &TrainConfig, target: &TargetFunction, projections: &[Projection]) -> Result<OverlapTrace> {
    cfg.validate()?;
    let per_run: Vec<RunTrace> =
        (0..cfg.runs).into_par_iter().map(|r| train_run(cfg, target, r)).collect::<Result<_>>()?;
    let t = (0..=cfg.steps).collect();
    Ok(OverlapTrace::from_runs(cfg.schedule.to_string(), t, per_run, projections))
}

/// Options of the online continuation phase.
#[derive(Debug, Clone, Copy)]
pub struct OnlineOptions {
    /// Renormalize every row to norm sqrt(d) after each step.
    pub spherical: bool,
    /// Record the overlap every this many steps.
    pub record_every: usize,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self { spherical: true, record_every: 1 }
    }
}

/// Online SGD with one fresh sample per step, continuing from `student`.
pub fn online_sgd_continue(
    mut student: StudentState,
    teacher: &Teacher,
    target: &TargetFunction,
    eta2: f64,
    steps: usize,
    seed: u64,
    opts: OnlineOptions,
) -> (StudentState, OverlapTrace) {
    let (p, d, k) = (student.p(), student.d, teacher.k());
    let mut rng = rng::stream(seed, &[tag::ONLINE]);
    let mut z = vec![0.0; d];
    let mut hs = vec![0.0; k];
    let mut h = [0.0; MAX_NEURONS];
    let mut fg = [0.0; MAX_NEURONS];
    let every = opts.record_every.max(1);
    let mut m = vec![student.overlap(teacher)];
    let mut loss = vec![f64::NAN];
    let mut t = vec![0usize];
    let scale = eta2 / (d as f64).sqrt();
    let radius = (d as f64).sqrt();
    for step in 1..=steps {
        rng::fill_normal(&mut rng, &mut z);
        teacher.project(&z, &mut hs);
        let y = target.eval(&hs);
        let href = student.preactivations(&z, &mut h);
        let r = student.readout.grad(&h[..p], href, y, &mut fg[..p]);
        for j in 0..p {
            let c = scale * fg[j];
            let row = &mut student.w[j * d..(j + 1) * d];
            row.iter_mut().zip(&z).for_each(|(w, &x)| *w -= c * x);
            if opts.spherical {
                let nr = dot(row, row).sqrt();
                row.iter_mut().for_each(|w| *w *= radius / nr);
            }
        }
        if step % every == 0 || step == steps {
            m.push(student.overlap(teacher));
            loss.push(0.5 * r * r);
            t.push(step);
        }
    }
    let run = RunTrace { m, loss };
    let trace = OverlapTrace::from_runs("online".into(), t, vec![run], &[]);
    (student, trace)
}

impl FromStr for SecondLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "plus_minus" | "pm" => Ok(SecondLayer::PlusMinus),
            "gaussian" => Ok(SecondLayer::Gaussian),
            _ => Err(Error::config(format!("unknown second layer law {s:?}"))),
        }
    }
}

impl FromStr for GradNormalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sum" => Ok(GradNormalization::Sum),
            "mean" => Ok(GradNormalization::Mean),
            _ => Err(Error::config(format!("unknown gradient normalization {s:?}"))),
        }
    }
}
