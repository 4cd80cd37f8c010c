//! Which teacher directions become learnable after finitely many reuses of
//! one batch. A direction u* in the teacher basis is learnable in two steps
//! as soon as E[F(g*(h*)) <h*, u*>] is nonzero for some polynomial F; on the
//! monomial basis this is the moment E[g*(h*)^k <h*, u*>]. Symmetry checks
//! (plain and orthogonal reflections) certify hardness independently.

use crate::activation::ScalarFn;
use crate::directions::norm;
use crate::dmft::{dmft_integrate, DmftConfig, DmftModel};
use crate::error::{Error, Result};
use crate::hermite::MAX_TENSOR_DIM;
use crate::rng::{self, tag};
use crate::stats::Moments;
use crate::targets::TargetFunction;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_K_MAX: usize = 8;
/// Absolute floor below which a moment is treated as zero.
pub const ZERO_FLOOR: f64 = 1e-8;
/// Roundoff allowance relative to E[|g*|^k |<h*, u*>|].
pub const RELATIVE_FLOOR: f64 = 1e-10;
pub const MIN_MC_SAMPLES: usize = 10_000;
const SHARD: usize = 4096;

/// Unit vector in the teacher basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    u: Vec<f64>,
}

impl Direction {
    /// Normalizes `u`; zero vectors are rejected.
    pub fn new(u: &[f64]) -> Result<Self> {
        let n = norm(u);
        if u.is_empty() || !n.is_finite() || n < 1e-12 {
            return Err(Error::config("direction must be a nonzero finite vector"));
        }
        Ok(Self { u: u.iter().map(|x| x / n).collect() })
    }

    /// e_i, 0-based.
    pub fn axis(k: usize, i: usize) -> Result<Self> {
        if i >= k {
            return Err(Error::config(format!("axis {i} out of range for k = {k}")));
        }
        let mut u = vec![0.0; k];
        u[i] = 1.0;
        Ok(Self { u })
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn k(&self) -> usize {
        self.u.len()
    }

    pub fn negated(&self) -> Self {
        Self { u: self.u.iter().map(|x| -x).collect() }
    }

    fn dot(&self, h: &[f64]) -> f64 {
        self.u.iter().zip(h).map(|(a, b)| a * b).sum()
    }

    /// R_u h = h - 2 <h, u> u.
    fn reflect(&self, h: &[f64], out: &mut [f64]) {
        let s = 2.0 * self.dot(h);
        for ((o, &x), &u) in out.iter_mut().zip(h).zip(&self.u) {
            *o = x - s * u;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Quadrature,
    MonteCarlo,
}

/// One entry of the moment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub k: usize,
    pub value: f64,
    pub stderr: f64,
    /// Level above which |value| counts as nonzero.
    pub threshold: f64,
    /// E[|g*^k <h*, u*>|], the size of the integrand.
    pub scale: f64,
    pub method: Method,
}

impl MomentEstimate {
    pub fn is_nonzero(&self) -> bool {
        self.value.abs() > self.threshold
    }

    /// Error bars straddle the threshold: neither clearly zero nor clearly not.
    pub fn is_ambiguous(&self) -> bool {
        self.method == Method::MonteCarlo && (self.value.abs() - self.threshold).abs() < 2.0 * self.stderr
    }

    /// Monte-Carlo error above 1% of the integrand size.
    pub fn high_variance(&self) -> bool {
        self.method == Method::MonteCarlo && self.stderr > 0.01 * self.scale
    }
}

fn check_dims(t: &TargetFunction, dir: &Direction) -> Result<()> {
    if dir.k() != t.k() {
        return Err(Error::config(format!("direction has {} coefficients but the target has k = {}", dir.k(), t.k())));
    }
    Ok(())
}

/// E[g*(h*)^k <h*, u*>] by tensor quadrature when k (the index count) is at
/// most 5, else by Monte Carlo with `n_mc` samples.
pub fn moment_functional(t: &TargetFunction, dir: &Direction, power: usize, n_mc: usize, seed: u64) -> Result<MomentEstimate> {
    check_dims(t, dir)?;
    if power == 0 {
        return Err(Error::config("moment power must be at least 1"));
    }
    if t.k() <= MAX_TENSOR_DIM {
        moment_quadrature(t, dir, power)
    } else {
        moment_mc(t, dir, power, n_mc, seed)
    }
}

pub fn moment_quadrature(t: &TargetFunction, dir: &Direction, power: usize) -> Result<MomentEstimate> {
    check_dims(t, dir)?;
    let rule = t.quadrature_rule(power)?;
    let pw = power as i32;
    let value = rule.expectation(|h| t.eval(h).powi(pw) * dir.dot(h));
    let scale = rule.expectation(|h| (t.eval(h).powi(pw) * dir.dot(h)).abs());
    Ok(MomentEstimate {
        k: power,
        value,
        stderr: 0.0,
        threshold: ZERO_FLOOR.max(RELATIVE_FLOOR * scale),
        scale,
        method: Method::Quadrature,
    })
}

/// Mean and standard error of `f` over standard normal vectors of length
/// `dim`, sharded over deterministic streams.
pub(crate) fn mc_mean(n: usize, dim: usize, seed: u64, path: &[u64], f: impl Fn(&[f64]) -> f64 + Sync) -> (f64, f64) {
    let shards = n.div_ceil(SHARD);
    let parts: Vec<Moments> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut p = path.to_vec();
            p.push(s as u64);
            let mut r = rng::stream(seed, &p);
            let mut m = Moments::default();
            let mut x = vec![0.0; dim];
            for _ in 0..SHARD.min(n - s * SHARD) {
                rng::fill_normal(&mut r, &mut x);
                m.push(f(&x));
            }
            m
        })
        .collect();
    let mut total = Moments::default();
    for p in &parts {
        total.merge(p);
    }
    (total.mean(), total.stderr())
}

pub fn moment_mc(t: &TargetFunction, dir: &Direction, power: usize, n_mc: usize, seed: u64) -> Result<MomentEstimate> {
    check_dims(t, dir)?;
    if n_mc < MIN_MC_SAMPLES {
        return Err(Error::config(format!("Monte-Carlo moments need at least {MIN_MC_SAMPLES} samples")));
    }
    let pw = power as i32;
    let path = [tag::HARDNESS, power as u64];
    let (value, stderr) = mc_mean(n_mc, t.k(), seed, &path, |h| t.eval(h).powi(pw) * dir.dot(h));
    let (scale, _) = mc_mean(n_mc, t.k(), seed, &path, |h| (t.eval(h).powi(pw) * dir.dot(h)).abs());
    Ok(MomentEstimate {
        k: power,
        value,
        stderr,
        threshold: ZERO_FLOOR.max(5.0 * stderr),
        scale,
        method: Method::MonteCarlo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Some moment up to K is nonzero; the witness is the smallest such power.
    FiniteTLearnable,
    /// Every moment up to K vanishes.
    HardUpToK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Symmetry {
    pub even: bool,
    /// None when the search was not run.
    pub ortho_even: Option<bool>,
    pub witness: Option<String>,
}

/// Verdict for one direction, in the shape written to hardness reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionVerdict {
    pub direction: Vec<f64>,
    pub status: Status,
    pub witness_k: Option<usize>,
    pub k_max: usize,
    /// (k, value, stderr) in increasing k.
    pub moments: Vec<(usize, f64, f64)>,
    pub symmetry: Symmetry,
    /// Monte-Carlo error bars straddle the threshold for some k.
    pub inconclusive: bool,
    pub warnings: Vec<String>,
}

/// Options for [`classify_direction`].
#[derive(Debug, Clone)]
pub struct ClassifyOptions {
    pub k_max: usize,
    pub n_mc: usize,
    pub seed: u64,
    pub symmetry_trials: usize,
    pub symmetry_tol: f64,
    pub ortho_search: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self { k_max: DEFAULT_K_MAX, n_mc: 100_000, seed: 0, symmetry_trials: 200, symmetry_tol: 1e-9, ortho_search: true }
    }
}

/// Smallest k <= K_max with a nonzero moment, plus the symmetry flags.
pub fn classify_direction(t: &TargetFunction, dir: &Direction, opts: &ClassifyOptions) -> Result<DirectionVerdict> {
    if opts.k_max == 0 {
        return Err(Error::config("K_max must be at least 1"));
    }
    let mut moments = Vec::with_capacity(opts.k_max);
    let mut witness = None;
    let mut inconclusive = false;
    let mut warnings = Vec::new();
    for power in 1..=opts.k_max {
        let m = moment_functional(t, dir, power, opts.n_mc, opts.seed)?;
        inconclusive |= m.is_ambiguous();
        if m.high_variance() {
            warnings.push(format!("moment k = {power}: standard error {:.2e} is large against the threshold", m.stderr));
        }
        if witness.is_none() && m.is_nonzero() {
            witness = Some(power);
        }
        moments.push((m.k, m.value, m.stderr));
    }
    let even = is_even_symmetric(t, dir, opts.symmetry_trials, opts.symmetry_tol, opts.seed)?;
    let (ortho_even, wit) = if opts.ortho_search {
        match is_ortho_even_symmetric(t, dir, None, opts.symmetry_trials, opts.symmetry_tol, opts.seed)? {
            Some(w) => (Some(true), Some(w.description)),
            None => (Some(false), None),
        }
    } else {
        (None, None)
    };
    if (even || ortho_even == Some(true)) && witness.is_some() {
        warnings.push("direction is symmetric but a moment exceeded the threshold; check quadrature accuracy".into());
    }
    Ok(DirectionVerdict {
        direction: dir.u().to_vec(),
        status: if witness.is_some() { Status::FiniteTLearnable } else { Status::HardUpToK },
        witness_k: witness,
        k_max: opts.k_max,
        moments,
        symmetry: Symmetry { even, ortho_even, witness: wit },
        inconclusive,
        warnings,
    })
}

fn agrees(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn test_points(k: usize, trials: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[tag::HARDNESS, u64::MAX]);
    (0..trials)
        .map(|_| {
            let mut h = vec![0.0; k];
            rng::fill_normal(&mut r, &mut h);
            h
        })
        .collect()
}

/// g*(R_u h) = g*(h) at `trials` random points, to relative tolerance `tol`.
pub fn is_even_symmetric(t: &TargetFunction, dir: &Direction, trials: usize, tol: f64, seed: u64) -> Result<bool> {
    check_dims(t, dir)?;
    if trials == 0 {
        return Err(Error::config("symmetry test needs at least one trial"));
    }
    let mut rh = vec![0.0; t.k()];
    Ok(test_points(t.k(), trials, seed).iter().all(|h| {
        dir.reflect(h, &mut rh);
        agrees(t.eval(&rh), t.eval(h), tol)
    }))
}

/// Linear map T = O_perp R_u acting on the teacher basis, with a readable
/// description of O_perp.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub matrix: DMatrix<f64>,
    pub description: String,
}

impl Transform {
    /// O_perp = T R_u, the part acting on the complement of u.
    pub fn complement_part(&self, dir: &Direction) -> DMatrix<f64> {
        let k = dir.k();
        let u = nalgebra::DVector::from_column_slice(dir.u());
        let r = DMatrix::identity(k, k) - &u * u.transpose() * 2.0;
        &self.matrix * r
    }
}

/// Signed permutation matrix sending e_j to sign_j e_{perm_j}.
fn signed_permutation(perm: &[usize], signs: u32) -> DMatrix<f64> {
    let k = perm.len();
    let mut m = DMatrix::zeros(k, k);
    for (j, &i) in perm.iter().enumerate() {
        m[(i, j)] = if signs >> j & 1 == 1 { -1.0 } else { 1.0 };
    }
    m
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    fn rec(i: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for j in i..cur.len() {
            cur.swap(i, j);
            rec(i + 1, cur, out);
            cur.swap(i, j);
        }
    }
    rec(0, &mut cur, &mut out);
    out.sort();
    out
}

/// Describe an orthogonal map on the teacher basis: "identity", signed
/// coordinate moves such as "z2 -> -z2", or a generic label.
fn describe(m: &DMatrix<f64>) -> String {
    let k = m.nrows();
    let mut parts = Vec::new();
    for j in 0..k {
        let col = m.column(j);
        let hits: Vec<usize> = (0..k).filter(|&i| col[i].abs() > 1e-12).collect();
        if hits.len() != 1 || (col[hits[0]].abs() - 1.0).abs() > 1e-9 {
            return "non-coordinate orthogonal map".into();
        }
        let i = hits[0];
        let neg = col[i] < 0.0;
        if i != j || neg {
            parts.push(format!("z{} -> {}z{}", j + 1, if neg { "-" } else { "" }, i + 1));
        }
    }
    if parts.is_empty() {
        "identity".into()
    } else {
        parts.join(", ")
    }
}

/// Candidate maps T with T u = -u built from signed permutations P: T = P
/// when P u = -u, T = P R_u when P u = u. The identity comes first, so even
/// symmetry is found as the identity witness.
pub fn default_candidates(dir: &Direction) -> Vec<Transform> {
    let k = dir.k();
    let u = nalgebra::DVector::from_column_slice(dir.u());
    let r = DMatrix::identity(k, k) - &u * u.transpose() * 2.0;
    let mut out = Vec::new();
    for perm in permutations(k) {
        for signs in 0..(1u32 << k) {
            let p = signed_permutation(&perm, signs);
            let pu = &p * &u;
            let t = if (&pu + &u).amax() < 1e-12 {
                p
            } else if (&pu - &u).amax() < 1e-12 {
                &p * &r
            } else {
                continue;
            };
            let o = &t * &r;
            let description = describe(&o);
            if !out.iter().any(|c: &Transform| (&c.matrix - &t).amax() < 1e-12) {
                out.push(Transform { matrix: t, description });
            }
        }
    }
    out
}

/// First candidate T with g*(T h) = g*(h) at all test points. With the
/// default hyperoctahedral set, a direction with no direct witness is still
/// accepted when it lies in the span of witnessed coordinate axes, since the
/// orthogonally-even directions form a subspace.
pub fn is_ortho_even_symmetric(
    t: &TargetFunction,
    dir: &Direction,
    candidates: Option<&[Transform]>,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<Option<Transform>> {
    check_dims(t, dir)?;
    let k = t.k();
    if k > 6 {
        return Err(Error::config("signed-permutation search is limited to k <= 6"));
    }
    let points = test_points(k, trials.max(1), seed);
    let invariant = |m: &DMatrix<f64>| {
        let mut th = vec![0.0; k];
        points.iter().all(|h| {
            for (i, o) in th.iter_mut().enumerate() {
                *o = (0..k).map(|j| m[(i, j)] * h[j]).sum();
            }
            agrees(t.eval(&th), t.eval(h), tol)
        })
    };
    let owned;
    let list = match candidates {
        Some(c) => c,
        None => {
            owned = default_candidates(dir);
            &owned[..]
        }
    };
    if let Some(c) = list.iter().find(|c| invariant(&c.matrix)) {
        return Ok(Some(c.clone()));
    }
    if candidates.is_some() {
        return Ok(None);
    }
    let support: Vec<usize> = (0..k).filter(|&i| dir.u()[i].abs() > 1e-12).collect();
    if support.len() < 2 {
        return Ok(None);
    }
    let mut pieces = Vec::new();
    for &i in &support {
        let axis = Direction::axis(k, i)?;
        match default_candidates(&axis).into_iter().find(|c| invariant(&c.matrix)) {
            Some(w) => pieces.push(format!("e{} ({})", i + 1, w.description)),
            None => return Ok(None),
        }
    }
    Ok(Some(Transform { matrix: DMatrix::zeros(k, k), description: format!("span of {}", pieces.join("; ")) }))
}

/// phi(a) = E[g*(h*) sigma'(eta a g*(h*) sigma'(h0) + a xi) <h*, u*>] with h0,
/// xi independent standard normals. Returns (value, stderr).
#[allow(clippy::too_many_arguments)]
pub fn phi_curve(
    t: &TargetFunction,
    sigma: ScalarFn,
    a: f64,
    eta: f64,
    dir: &Direction,
    n_mc: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_dims(t, dir)?;
    if n_mc < MIN_MC_SAMPLES {
        return Err(Error::config(format!("phi needs at least {MIN_MC_SAMPLES} samples")));
    }
    let k = t.k();
    Ok(mc_mean(n_mc, k + 2, seed, &[tag::HARDNESS, 0xF1], |x| {
        let (h, rest) = x.split_at(k);
        let g = t.eval(h);
        g * sigma.d1(eta * a * g * sigma.d1(rest[0]) + a * rest[1]) * dir.dot(h)
    }))
}

/// Per-neuron overlap along `dir` after two full-batch steps, from the
/// effective process run for T = 2. Returns (value, stderr) per neuron.
#[allow(clippy::too_many_arguments)]
pub fn predict_two_step_overlap(
    t: &TargetFunction,
    sigma: ScalarFn,
    a: &[f64],
    eta: f64,
    lambda: f64,
    alpha: f64,
    dir: &Direction,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    check_dims(t, dir)?;
    let model = DmftModel::with_second_layer(a.to_vec(), sigma)?;
    let mut cfg = DmftConfig::new(alpha, eta, lambda, 2);
    cfg.n_samples = n_samples;
    cfg.seed = seed;
    let tr = dmft_integrate(&cfg, t, &model)?;
    let (m, se) = (&tr.m[2], &tr.m_stderr[2]);
    Ok((0..a.len())
        .map(|i| {
            let v: f64 = (0..t.k()).map(|l| m[(i, l)] * dir.u()[l]).sum();
            let s: f64 = (0..t.k()).map(|l| (se[(i, l)] * dir.u()[l]).powi(2)).sum::<f64>().sqrt();
            (v, s)
        })
        .collect())
}
