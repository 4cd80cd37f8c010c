//! Multi-index teachers f*(z) = g*(W* z / sqrt(d)): the link functions g*,
//! the teacher matrix W*, a small spec grammar and the named registry.

use crate::activation::ScalarFn;
use crate::error::{Error, Result};
use crate::hermite::{hermite_coefficients, QuadratureRule, DEFAULT_NODES, MAX_TENSOR_DIM};
use crate::rng::{self, tag};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Link function g* acting on the k teacher pre-activations h*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TargetFunction {
    kind: Kind,
    k: usize,
    /// Leap complexity as declared by the user; never computed.
    pub declared_leap: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Kind {
    SingleIndex(ScalarFn),
    /// Product of the listed coordinates (0-based).
    Product(Vec<usize>),
    /// z1 + z1 z2 + ... + z1...zm.
    Staircase(usize),
    /// sum_r sigma(z_r) over r < k.
    Committee(ScalarFn),
    /// Blocks placed at disjoint coordinate offsets.
    Sum(Vec<(usize, TargetFunction)>),
}

/// One product term of the expanded form: coefficient times prod f(h_i).
#[derive(Debug, Clone)]
struct Term {
    factors: Vec<(usize, ScalarFn)>,
}

impl TargetFunction {
    pub fn single(g: ScalarFn) -> Self {
        Self { kind: Kind::SingleIndex(g), k: 1, declared_leap: None }
    }

    pub fn product(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("product target needs at least one index"));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != indices.len() {
            return Err(Error::config("product target indices must be distinct"));
        }
        let k = sorted.last().unwrap() + 1;
        Ok(Self { kind: Kind::Product(indices), k, declared_leap: None })
    }

    pub fn staircase(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("staircase needs at least one step"));
        }
        Ok(Self { kind: Kind::Staircase(m), k: m, declared_leap: None })
    }

    pub fn committee(sigma: ScalarFn, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("committee needs k >= 1"));
        }
        Ok(Self { kind: Kind::Committee(sigma), k, declared_leap: None })
    }

    /// Sum of blocks at the given 0-based offsets; blocks must not overlap.
    pub fn sum(blocks: Vec<(usize, TargetFunction)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::config("sum target needs at least one block"));
        }
        let mut spans: Vec<(usize, usize)> = blocks.iter().map(|(o, t)| (*o, o + t.k)).collect();
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::config("sum target blocks overlap"));
        }
        let k = spans.iter().map(|s| s.1).max().unwrap();
        Ok(Self { kind: Kind::Sum(blocks), k, declared_leap: None })
    }

    pub fn with_leap(mut self, leap: u32) -> Self {
        self.declared_leap = Some(leap);
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> &Kind {
        &self.kind
    }

    /// The link function of a single-index target.
    pub fn link(&self) -> Option<ScalarFn> {
        match self.kind {
            Kind::SingleIndex(g) => Some(g),
            _ => None,
        }
    }

    /// g*(h*) by the kind-specific closed form.
    pub fn eval(&self, h: &[f64]) -> f64 {
        debug_assert!(h.len() >= self.k);
        match &self.kind {
            Kind::SingleIndex(g) => g.value(h[0]),
            Kind::Product(idx) => idx.iter().fold(1.0, |acc, &i| acc * h[i]),
            Kind::Staircase(m) => {
                let (mut prod, mut sum) = (1.0, 0.0);
                for &x in &h[..*m] {
                    prod *= x;
                    sum += prod;
                }
                sum
            }
            Kind::Committee(s) => h[..self.k].iter().map(|&x| s.value(x)).sum(),
            Kind::Sum(blocks) => blocks.iter().map(|(o, t)| t.eval(&h[*o..])).sum(),
        }
    }

    /// g*(h*) through the generic expansion into product terms.
    pub fn eval_generic(&self, h: &[f64]) -> f64 {
        self.terms()
            .iter()
            .map(|t| t.factors.iter().fold(1.0, |acc, &(i, f)| acc * f.value(h[i])))
            .sum()
    }

    fn terms(&self) -> Vec<Term> {
        match &self.kind {
            Kind::SingleIndex(g) => vec![Term { factors: vec![(0, *g)] }],
            Kind::Product(idx) => {
                vec![Term { factors: idx.iter().map(|&i| (i, ScalarFn::Identity)).collect() }]
            }
            Kind::Staircase(m) => (1..=*m)
                .map(|len| Term { factors: (0..len).map(|i| (i, ScalarFn::Identity)).collect() })
                .collect(),
            Kind::Committee(s) => (0..self.k).map(|r| Term { factors: vec![(r, *s)] }).collect(),
            Kind::Sum(blocks) => blocks
                .iter()
                .flat_map(|(o, t)| {
                    t.terms().into_iter().map(move |term| Term {
                        factors: term.factors.iter().map(|&(i, f)| (i + o, f)).collect(),
                    })
                })
                .collect(),
        }
    }

    /// Gradient of g* with respect to h*, written into `out` (length k).
    pub fn grad(&self, h: &[f64], out: &mut [f64]) {
        out[..self.k].iter_mut().for_each(|v| *v = 0.0);
        self.grad_add(h, out);
    }

    fn grad_add(&self, h: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::SingleIndex(g) => out[0] += g.d1(h[0]),
            Kind::Product(idx) => {
                for (a, &i) in idx.iter().enumerate() {
                    out[i] += idx
                        .iter()
                        .enumerate()
                        .filter(|&(b, _)| b != a)
                        .fold(1.0, |acc, (_, &j)| acc * h[j]);
                }
            }
            Kind::Staircase(m) => {
                // d/dh_i of sum_len prod_{j<len} h_j
                for i in 0..*m {
                    let mut prefix = 1.0;
                    for &x in &h[..i] {
                        prefix *= x;
                    }
                    let mut acc = 0.0;
                    let mut tail = 1.0;
                    for j in i..*m {
                        if j > i {
                            tail *= h[j];
                        }
                        acc += tail;
                    }
                    out[i] += prefix * acc;
                }
            }
            Kind::Committee(s) => {
                for r in 0..self.k {
                    out[r] += s.d1(h[r]);
                }
            }
            Kind::Sum(blocks) => {
                for (o, t) in blocks {
                    t.grad_add(&h[*o..], &mut out[*o..]);
                }
            }
        }
    }

    /// Total polynomial degree, if g* is a polynomial.
    pub fn polynomial_degree(&self) -> Option<usize> {
        match &self.kind {
            Kind::SingleIndex(g) | Kind::Committee(g) => g.polynomial_degree(),
            Kind::Product(idx) => Some(idx.len()),
            Kind::Staircase(m) => Some(*m),
            Kind::Sum(blocks) => blocks
                .iter()
                .map(|(_, t)| t.polynomial_degree())
                .try_fold(0, |acc, d| d.map(|d| acc.max(d))),
        }
    }

    /// Highest degree of g* in any single coordinate, if polynomial.
    pub fn coordinate_degree(&self) -> Option<usize> {
        match &self.kind {
            Kind::SingleIndex(g) | Kind::Committee(g) => g.polynomial_degree(),
            Kind::Product(_) | Kind::Staircase(_) => Some(1),
            Kind::Sum(blocks) => blocks
                .iter()
                .map(|(_, t)| t.coordinate_degree())
                .try_fold(0, |acc, d| d.map(|d| acc.max(d))),
        }
    }

    /// Tensor rule integrating `(g*)^power` times a linear factor exactly when
    /// g* is polynomial; a generic rule otherwise.
    pub fn quadrature_rule(&self, power: usize) -> Result<QuadratureRule> {
        let nodes = match self.coordinate_degree() {
            Some(deg) => (deg * power + 1) / 2 + 2,
            None => match self.k {
                1 => DEFAULT_NODES,
                2 => 32,
                3 => 20,
                4 => 12,
                _ => 8,
            },
        };
        QuadratureRule::tensor(nodes.clamp(2, DEFAULT_NODES), self.k)
    }

    /// E[g*(h*) h*], the first Hermite vector C1[f*]; quadrature for k <= 5.
    pub fn first_hermite_vector(&self) -> Result<Vec<f64>> {
        if self.k > MAX_TENSOR_DIM {
            return Err(Error::DimensionTooLarge(self.k));
        }
        let rule = self.quadrature_rule(1)?;
        Ok((0..self.k).map(|i| rule.expectation(|h| self.eval(h) * h[i])).collect())
    }

    /// E[g*(h*)] by quadrature.
    pub fn mean(&self) -> Result<f64> {
        let rule = self.quadrature_rule(1)?;
        Ok(rule.expectation(|h| self.eval(h)))
    }
}

/// Index of the first Hermite coefficient of a single-index link above `tol`.
pub fn information_exponent(t: &TargetFunction, max_j: usize, tol: f64) -> Result<usize> {
    let g = t
        .link()
        .ok_or_else(|| Error::config("information exponent is defined for single-index targets"))?;
    if max_j < 1 {
        return Err(Error::config("max_j must be at least 1"));
    }
    let rule = QuadratureRule::gauss_hermite(DEFAULT_NODES);
    let nu = hermite_coefficients(|x| g.value(x), max_j, &rule)?;
    (1..=max_j)
        .find(|&j| nu[j].abs() > tol)
        .ok_or(Error::NotFound { max_j, tol })
}

// ---------------------------------------------------------------------------
// Spec grammar

impl FromStr for TargetFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Parser { src: s, pos: 0 };
        let t = p.target()?;
        p.skip_ws();
        if p.pos != s.len() {
            return Err(p.err("trailing input"));
        }
        Ok(t)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse { spec: self.src.to_string(), pos: self.pos, msg: msg.to_string() }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, lit: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(&format!("expected {lit:?}")))
        }
    }

    fn int(&mut self) -> Result<usize> {
        self.skip_ws();
        let digits: String = self.rest().chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() {
            return Err(self.err("expected an integer"));
        }
        self.pos += digits.len();
        digits.parse().map_err(|_| self.err("integer out of range"))
    }

    fn word(&mut self) -> Result<&'a str> {
        self.skip_ws();
        let len = self.rest().chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').count();
        if len == 0 {
            return Err(self.err("expected a name"));
        }
        let w = &self.rest()[..len];
        self.pos += len;
        Ok(w)
    }

    fn scalar(&mut self) -> Result<ScalarFn> {
        let at = self.pos;
        let w = self.word()?;
        w.parse().map_err(|_| Error::Parse {
            spec: self.src.to_string(),
            pos: at,
            msg: format!("unknown scalar function {w:?}"),
        })
    }

    fn target(&mut self) -> Result<TargetFunction> {
        self.skip_ws();
        let at = self.pos;
        let head = self.word()?;
        let wrap = |e: Error, pos: usize, src: &str| match e {
            Error::Config(msg) => Error::Parse { spec: src.to_string(), pos, msg },
            other => other,
        };
        match head {
            "sum" => {
                self.expect("(")?;
                let mut blocks = Vec::new();
                let mut next_free = 0usize;
                loop {
                    let item = self.target()?;
                    let offset = if self.eat("@") {
                        let one_based = self.int()?;
                        if one_based == 0 {
                            return Err(self.err("block positions are 1-based"));
                        }
                        one_based - 1
                    } else {
                        next_free
                    };
                    next_free = next_free.max(offset + item.k);
                    blocks.push((offset, item));
                    if self.eat(";") {
                        continue;
                    }
                    self.expect(")")?;
                    break;
                }
                TargetFunction::sum(blocks).map_err(|e| wrap(e, at, self.src))
            }
            _ => {
                self.expect(":")?;
                match head {
                    "single" => Ok(TargetFunction::single(self.scalar()?)),
                    "product" => {
                        let mut idx = vec![self.int()?];
                        while self.eat(",") {
                            idx.push(self.int()?);
                        }
                        if idx.contains(&0) {
                            return Err(self.err("product indices are 1-based"));
                        }
                        TargetFunction::product(idx.into_iter().map(|i| i - 1).collect())
                            .map_err(|e| wrap(e, at, self.src))
                    }
                    "staircase" => {
                        let m = self.int()?;
                        TargetFunction::staircase(m).map_err(|e| wrap(e, at, self.src))
                    }
                    "committee" => {
                        let s = self.scalar()?;
                        self.expect(",")?;
                        self.expect("k")?;
                        self.expect("=")?;
                        let k = self.int()?;
                        TargetFunction::committee(s, k).map_err(|e| wrap(e, at, self.src))
                    }
                    _ => Err(Error::Parse {
                        spec: self.src.to_string(),
                        pos: at,
                        msg: format!("unknown target kind {head:?}"),
                    }),
                }
            }
        }
    }
}

impl fmt::Display for TargetFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::SingleIndex(g) => write!(f, "single:{g}"),
            Kind::Product(idx) => {
                let list: Vec<String> = idx.iter().map(|i| (i + 1).to_string()).collect();
                write!(f, "product:{}", list.join(","))
            }
            Kind::Staircase(m) => write!(f, "staircase:{m}"),
            Kind::Committee(s) => write!(f, "committee:{s},k={}", self.k),
            Kind::Sum(blocks) => {
                let items: Vec<String> = blocks.iter().map(|(o, t)| format!("{t}@{}", o + 1)).collect();
                write!(f, "sum({})", items.join("; "))
            }
        }
    }
}

impl TryFrom<String> for TargetFunction {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TargetFunction> for String {
    fn from(t: TargetFunction) -> String {
        t.to_string()
    }
}

/// Named targets used by the presets.
pub fn registry() -> Vec<(&'static str, TargetFunction)> {
    let parse = |s: &str| s.parse::<TargetFunction>().expect("registry specs parse");
    vec![
        ("tanh", parse("single:tanh").with_leap(1)),
        ("he3", parse("single:he3").with_leap(3)),
        ("he4", parse("single:he4").with_leap(4)),
        // reconstruction: z1 + z1 z2, learned by both protocols
        ("easy_multi", parse("staircase:2").with_leap(1)),
        // reconstruction: z1 + He3(z2), orthogonal direction needs reuse
        ("leap3_multi", parse("sum(single:id; single:he3)").with_leap(3)),
        ("committee", parse("committee:tanh,k=2").with_leap(2)),
        ("z1z2z3_he3", parse("sum(product:1,2,3; single:he3@4)")),
        ("staircase3", parse("staircase:3").with_leap(1)),
    ]
}

pub fn lookup(name: &str) -> Option<TargetFunction> {
    registry().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
}

/// Parse either a registry name or a spec string.
pub fn resolve(spec: &str) -> Result<TargetFunction> {
    match lookup(spec.trim()) {
        Some(t) => Ok(t),
        None => spec.parse(),
    }
}

// ---------------------------------------------------------------------------
// Teacher matrix

/// k x d teacher with orthogonal rows of norm sqrt(d), stored row-major.
#[derive(Debug, Clone)]
pub struct Teacher {
    d: usize,
    k: usize,
    w: Vec<f64>,
    canonical: bool,
}

impl Teacher {
    pub fn random(d: usize, k: usize, seed: u64) -> Result<Self> {
        check_dims(d, k)?;
        let mut rng = rng::stream(seed, &[tag::TEACHER]);
        let mut w = vec![0.0; k * d];
        rng::fill_normal(&mut rng, &mut w);
        // modified Gram-Schmidt, applied twice for orthogonality to rounding
        for _ in 0..2 {
            for l in 0..k {
                for m in 0..l {
                    let (head, tail) = w.split_at_mut(l * d);
                    let prev = &head[m * d..(m + 1) * d];
                    let row = &mut tail[..d];
                    let c = dot(row, prev) / dot(prev, prev);
                    row.iter_mut().zip(prev).for_each(|(x, &y)| *x -= c * y);
                }
                let row = &mut w[l * d..(l + 1) * d];
                let scale = (d as f64).sqrt() / dot(row, row).sqrt();
                row.iter_mut().for_each(|x| *x *= scale);
            }
        }
        Ok(Self { d, k, w, canonical: false })
    }

    /// Rows sqrt(d) e_1, ..., sqrt(d) e_k.
    pub fn canonical(d: usize, k: usize) -> Result<Self> {
        check_dims(d, k)?;
        let mut w = vec![0.0; k * d];
        let s = (d as f64).sqrt();
        for l in 0..k {
            w[l * d + l] = s;
        }
        Ok(Self { d, k, w, canonical: true })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.w[l * self.d..(l + 1) * self.d]
    }

    /// h* = W* z / sqrt(d).
    pub fn project(&self, z: &[f64], out: &mut [f64]) {
        if self.canonical {
            out[..self.k].copy_from_slice(&z[..self.k]);
            return;
        }
        let s = 1.0 / (self.d as f64).sqrt();
        for (l, o) in out.iter_mut().enumerate().take(self.k) {
            *o = dot(z, self.row(l)) * s;
        }
    }

    /// Gram matrix W* W*^T / d, row-major k x k.
    pub fn gram(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.k * self.k];
        for a in 0..self.k {
            for b in 0..self.k {
                g[a * self.k + b] = dot(self.row(a), self.row(b)) / self.d as f64;
            }
        }
        g
    }
}

/// make_teacher with the random orthogonal construction.
pub fn make_teacher(d: usize, k: usize, seed: u64) -> Result<Teacher> {
    Teacher::random(d, k, seed)
}

fn check_dims(d: usize, k: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::config(format!("teacher needs 1 <= k <= d, got k={k}, d={d}")));
    }
    Ok(())
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
