//! Discrete-time dynamical mean-field theory for full-batch gradient descent.
//!
//! In the proportional limit the training pre-activations of one sample,
//! h^t = W^t z / sqrt(d), follow a low-dimensional effective process:
//!
//! ```text
//! h^t = omega^t - eta * sum_{s<t} Q(t, s+1) F^s,      F^s = dL/dh (h^s, h*)
//! ```
//!
//! where (h*, omega^0, omega^1, ...) is jointly Gaussian with
//! Cov(omega^t, omega^s) = C(t, s) (the limit of W^t W^s^T / d) and
//! Cov(omega^t, h*) = M^t. The kernels close on ensemble averages:
//!
//! ```text
//! Gamma(t, s) = alpha E[dF^t / d omega^s]            (Lambda^t = Gamma(t, t))
//! Q(t+1, s)   = (1 - eta lambda) Q(t, s) - eta sum_{r=s..t} Gamma(t, r) Q(r, s),  Q(s, s) = I
//! g^t         = alpha E[F^t h*^T],   M^{t+1} = (1 - eta lambda) M^t - eta g^t
//! C(t+1, s)   = (1 - eta lambda) C(t, s) - eta alpha E[F^t h^s^T]                 (s <= t)
//! ```
//!
//! The equal-time block C(t+1, t+1) follows from Gaussian integration by
//! parts. `Q` is the weight-space response R_theta; `Gamma(t, s)` for s < t is
//! the loss memory kernel R_L.

mod gp;
mod one_pass;
mod single_process;
mod two_process;

pub use gp::{min_eigenvalue, IncrementalCholesky};
pub use one_pass::one_pass_effective;
pub use single_process::single_process_integrate;
pub use two_process::dmft_integrate;

use crate::activation::ScalarFn;
use crate::directions::Projection;
use crate::error::{Error, Result};
use crate::gdsim::{SecondLayer, TrainConfig};
use crate::network::{Readout, MAX_NEURONS};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How the response kernels Gamma(t, s) are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Chain rule through the stored per-replica Jacobians. For relu the
    /// delta in sigma'' is replaced by a narrow Gaussian.
    Pathwise,
    /// Central differences after re-simulating each replica with a
    /// perturbed noise coordinate.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Noise omega with covariance C plus explicit self-response.
    TwoProcess,
    /// One process for h driven by loss noise zeta with covariance C_L.
    SingleProcess,
}

impl FromStr for KernelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pathwise" => Ok(Self::Pathwise),
            "finite_difference" | "fd" => Ok(Self::FiniteDifference),
            other => Err(Error::config(format!("unknown kernel mode {other:?}"))),
        }
    }
}

impl FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "two_process" => Ok(Self::TwoProcess),
            "single_process" => Ok(Self::SingleProcess),
            other => Err(Error::config(format!("unknown formulation {other:?}"))),
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoProcess => "two_process",
            Self::SingleProcess => "single_process",
        })
    }
}

/// Integration hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmftConfig {
    pub alpha: f64,
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub kernel_mode: KernelMode,
    pub formulation: Formulation,
    /// Finite-difference step; defaults to 1e-4, or the kink bandwidth for relu.
    pub fd_epsilon: Option<f64>,
    /// Ceiling on per-replica Jacobian storage, in bytes.
    pub memory_limit: usize,
}

pub const DEFAULT_SAMPLES: usize = 100_000;
pub const MIN_SAMPLES: usize = 1_000;
const DEFAULT_MEMORY_LIMIT: usize = 2 << 30;
/// Relative pivot size below which a coordinate counts as degenerate.
const PIVOT_TOL: f64 = 1e-10;
/// Relative negative pivot tolerated (and clipped) before aborting.
const NEGATIVE_PIVOT_TOL: f64 = 1e-6;
/// Chunk of replicas handled by one task; fixed so sums are thread-count independent.
const CHUNK: usize = 512;

impl DmftConfig {
    pub fn new(alpha: f64, eta: f64, lambda: f64, steps: usize) -> Self {
        Self {
            alpha,
            eta,
            lambda,
            steps,
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
            kernel_mode: KernelMode::Pathwise,
            formulation: Formulation::TwoProcess,
            fd_epsilon: None,
            memory_limit: DEFAULT_MEMORY_LIMIT,
        }
    }

    pub fn from_train(cfg: &TrainConfig, n_samples: usize) -> Self {
        Self { n_samples, seed: cfg.seed, ..Self::new(cfg.alpha, cfg.eta, cfg.lambda, cfg.steps) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("T must be at least 1"));
        }
        if self.n_samples < MIN_SAMPLES {
            return Err(Error::config(format!("n_samples must be at least {MIN_SAMPLES}")));
        }
        if let Some(e) = self.fd_epsilon {
            if !(e > 0.0) {
                return Err(Error::config("fd_epsilon must be positive"));
            }
        }
        Ok(())
    }

    fn decay(&self) -> f64 {
        1.0 - self.eta * self.lambda
    }
}

/// Student readout plus the initial weight covariance C(0, 0).
#[derive(Debug, Clone)]
pub struct DmftModel {
    pub readout: Readout,
    pub c00: DMatrix<f64>,
}

impl DmftModel {
    /// The symmetric initialization used by the simulator with a +-1/sqrt(p)
    /// second layer: rows i and p-1-i start equal, or a single neuron with a
    /// frozen twin when p = 1.
    pub fn symmetric(p: usize, sigma: ScalarFn) -> Result<Self> {
        if p == 0 || (p != 1 && p % 2 == 1) || p > MAX_NEURONS {
            return Err(Error::config("p must be 1 or an even number up to 64"));
        }
        if p == 1 {
            return Self::with_second_layer(vec![1.0], sigma);
        }
        let s = 1.0 / (p as f64).sqrt();
        Self::with_second_layer((0..p).map(|i| if i < p / 2 { s } else { -s }).collect(), sigma)
    }

    /// Arbitrary second layer. p = 1 uses the frozen twin; otherwise the
    /// weights must come in pairs a_i = -a_{p-1-i}, whose rows start equal.
    pub fn with_second_layer(a: Vec<f64>, sigma: ScalarFn) -> Result<Self> {
        let p = a.len();
        if p == 0 || (p != 1 && p % 2 == 1) || p > MAX_NEURONS {
            return Err(Error::config("p must be 1 or an even number up to 64"));
        }
        if p == 1 {
            return Ok(Self { readout: Readout::new(a, sigma, true), c00: DMatrix::identity(1, 1) });
        }
        if (0..p / 2).any(|i| (a[i] + a[p - 1 - i]).abs() > 1e-12 * a[i].abs().max(1.0)) {
            return Err(Error::config("second layer must satisfy a_i = -a_(p-1-i) for the symmetric start"));
        }
        let mut c00 = DMatrix::identity(p, p);
        for i in 0..p {
            c00[(i, p - 1 - i)] = 1.0;
        }
        Ok(Self { readout: Readout::new(a, sigma, false), c00 })
    }

    pub fn from_train(cfg: &TrainConfig) -> Result<Self> {
        if cfg.second_layer != SecondLayer::PlusMinus {
            return Err(Error::config("the effective processes need a deterministic +-1/sqrt(p) second layer"));
        }
        Self::symmetric(cfg.p, cfg.activation)
    }

    pub fn p(&self) -> usize {
        self.readout.p()
    }

    pub fn with_kink_bandwidth(mut self, b: f64) -> Self {
        self.readout.kink_bandwidth = b;
        self
    }
}

/// Theory trace. Per-time kernels are indexed `[t][s]` with s <= t.
#[derive(Debug, Clone, Serialize)]
pub struct DmftTrace {
    pub engine: String,
    pub n_samples: usize,
    pub t: Vec<usize>,
    pub m: Vec<DMatrix<f64>>,
    pub m_stderr: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    /// Lambda^t = alpha E[dF^t / dh^t] along the path.
    pub lambda: Vec<DMatrix<f64>>,
    /// R_L(t, s): zero on the diagonal.
    pub memory: Vec<Vec<DMatrix<f64>>>,
    /// R_theta(t, s), identity on the diagonal.
    pub response: Vec<Vec<DMatrix<f64>>>,
    /// Teacher response R~_L(t, s): zero on the diagonal.
    pub teacher_memory: Vec<Vec<DMatrix<f64>>>,
    /// alpha E[dF^t/dy grad g*(h*)^T], the same-time teacher term.
    pub teacher_direct: Vec<DMatrix<f64>>,
    pub c_theta: Vec<Vec<DMatrix<f64>>>,
    pub c_loss: Vec<Vec<DMatrix<f64>>>,
    pub loss: Vec<f64>,
    pub loss_stderr: Vec<f64>,
    pub min_eig_omega: Vec<f64>,
    pub min_eig_loss: Vec<f64>,
    /// Largest gap between alpha E[F^t h^s^T] measured directly and its
    /// integration-by-parts form, per step; a consistency diagnostic.
    pub stein_gap: Vec<f64>,
    pub warnings: Vec<String>,
}

impl DmftTrace {
    fn empty(engine: &str, n_samples: usize) -> Self {
        Self {
            engine: engine.into(),
            n_samples,
            t: Vec::new(),
            m: Vec::new(),
            m_stderr: Vec::new(),
            g: Vec::new(),
            lambda: Vec::new(),
            memory: Vec::new(),
            response: Vec::new(),
            teacher_memory: Vec::new(),
            teacher_direct: Vec::new(),
            c_theta: Vec::new(),
            c_loss: Vec::new(),
            loss: Vec::new(),
            loss_stderr: Vec::new(),
            min_eig_omega: Vec::new(),
            min_eig_loss: Vec::new(),
            stein_gap: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Projection value and propagated standard error at every t.
    pub fn projection(&self, proj: &Projection) -> Vec<(f64, f64)> {
        self.m.iter().zip(&self.m_stderr).map(|(m, se)| (proj.apply(m), proj.apply_stderr(m, se))).collect()
    }
}

/// Dispatch on the configured formulation.
pub fn integrate(
    cfg: &DmftConfig,
    target: &crate::targets::TargetFunction,
    model: &DmftModel,
) -> Result<DmftTrace> {
    match cfg.formulation {
        Formulation::TwoProcess => dmft_integrate(cfg, target, model),
        Formulation::SingleProcess => single_process_integrate(cfg, target, model),
    }
}

// ---------------------------------------------------------------------------
// Small dense helpers on row-major slices.

/// out (m x n) += c * a (m x l) * b (l x n)
#[inline]
pub(crate) fn gemm_acc(out: &mut [f64], c: f64, a: &[f64], b: &[f64], m: usize, l: usize, n: usize) {
    for i in 0..m {
        for r in 0..l {
            let air = c * a[i * l + r];
            if air == 0.0 {
                continue;
            }
            let brow = &b[r * n..(r + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += air * bv;
            }
        }
    }
}

pub(crate) fn to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub(crate) fn from_flat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

/// Index of block (t, s), s <= t, in lower-triangular storage.
#[inline]
pub(crate) fn tri(t: usize, s: usize) -> usize {
    t * (t + 1) / 2 + s
}

pub(crate) fn check_memory(cfg: &DmftConfig, per_replica_floats: usize) -> Result<()> {
    let bytes = per_replica_floats.saturating_mul(8).saturating_mul(cfg.n_samples);
    if bytes > cfg.memory_limit {
        return Err(Error::config(format!(
            "replica storage would need {:.2} GB (limit {:.2} GB); lower n_samples, T or p",
            bytes as f64 / 1e9,
            cfg.memory_limit as f64 / 1e9
        )));
    }
    Ok(())
}

pub(crate) fn fd_epsilon(cfg: &DmftConfig, readout: &Readout) -> f64 {
    cfg.fd_epsilon.unwrap_or(if readout.sigma.has_kink() { readout.kink_bandwidth } else { 1e-4 })
}

pub(crate) fn kink_note(readout: &Readout, mode: KernelMode, warnings: &mut Vec<String>) {
    if readout.sigma.has_kink() && mode == KernelMode::Pathwise {
        warnings.push(format!(
            "relu second derivative replaced by a Gaussian of bandwidth {} in kernel estimates",
            readout.kink_bandwidth
        ));
    }
}

/// Running sums over replicas, merged in chunk order.
#[derive(Debug, Clone, Default)]
pub(crate) struct Sums {
    pub v: Vec<f64>,
}

impl Sums {
    pub fn zeros(n: usize) -> Self {
        Self { v: vec![0.0; n] }
    }
    pub fn add(&mut self, o: &Sums) {
        for (a, b) in self.v.iter_mut().zip(&o.v) {
            *a += b;
        }
    }
}
