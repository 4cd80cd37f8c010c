//! Probabilists' Hermite polynomials He_n, Gaussian moments and
//! Gauss–Hermite quadrature for expectations under N(0, I_m).

use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};

/// Highest degree kept as an exact integer coefficient table.
pub const MAX_EXACT_DEGREE: usize = 20;
/// Largest tensor-product dimension; beyond it callers switch to Monte Carlo.
pub const MAX_TENSOR_DIM: usize = 5;
/// Default number of nodes of the one-dimensional rule.
pub const DEFAULT_NODES: usize = 40;

/// Exact monomial coefficients of He_0..He_max.
#[derive(Debug, Clone)]
pub struct HermiteBasis {
    coeffs: Vec<Vec<i64>>,
}

impl HermiteBasis {
    pub fn new(max_degree: usize) -> Result<Self> {
        if max_degree > MAX_EXACT_DEGREE {
            return Err(Error::config(format!(
                "exact Hermite tables stop at degree {MAX_EXACT_DEGREE}, asked for {max_degree}"
            )));
        }
        let mut coeffs: Vec<Vec<i64>> = vec![vec![1]];
        if max_degree >= 1 {
            coeffs.push(vec![0, 1]);
        }
        for n in 1..max_degree {
            // He_{n+1} = x He_n - n He_{n-1}
            let mut next = vec![0i64; n + 2];
            for (m, &c) in coeffs[n].iter().enumerate() {
                next[m + 1] += c;
            }
            for (m, &c) in coeffs[n - 1].iter().enumerate() {
                next[m] -= n as i64 * c;
            }
            coeffs.push(next);
        }
        Ok(Self { coeffs })
    }

    pub fn max_degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Coefficients of x^0, x^1, ... in He_n.
    pub fn coefficients(&self, n: usize) -> &[i64] {
        &self.coeffs[n]
    }

    /// Horner evaluation from the exact table.
    pub fn eval(&self, n: usize, x: f64) -> f64 {
        self.coeffs[n].iter().rev().fold(0.0, |acc, &c| acc * x + c as f64)
    }
}

/// He_j(x) by the three-term recurrence.
pub fn hermite_eval(j: usize, x: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for n in 1..j {
                let next = x * cur - n as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Derivative He_j'(x) = j He_{j-1}(x).
pub fn hermite_derivative(j: usize, x: f64) -> f64 {
    if j == 0 {
        0.0
    } else {
        j as f64 * hermite_eval(j - 1, x)
    }
}

/// E[xi^k] for xi ~ N(0,1): (k-1)!! for even k, 0 for odd k.
pub fn gaussian_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|m| m as f64).product()
}

/// Tensor-product Gauss–Hermite rule normalized to the standard Gaussian.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    dimension: usize,
}

impl QuadratureRule {
    /// One-dimensional rule with `n_nodes` nodes, exact to degree 2n-1.
    pub fn gauss_hermite(n_nodes: usize) -> Self {
        assert!(n_nodes >= 1, "quadrature needs at least one node");
        let (nodes, weights) = golub_welsch(n_nodes);
        Self { nodes, weights, dimension: 1 }
    }

    /// Tensor product of the 1D rule over `dimension` coordinates.
    pub fn tensor(n_nodes: usize, dimension: usize) -> Result<Self> {
        if dimension > MAX_TENSOR_DIM {
            return Err(Error::DimensionTooLarge(dimension));
        }
        if dimension == 0 {
            return Err(Error::config("quadrature dimension must be at least 1"));
        }
        let mut rule = Self::gauss_hermite(n_nodes);
        rule.dimension = dimension;
        Ok(rule)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn n_points(&self) -> usize {
        self.nodes.len().pow(self.dimension as u32)
    }

    /// Weighted sum over the grid. Infallible because construction enforced the ceiling.
    pub fn expectation(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let n = self.nodes.len();
        let m = self.dimension;
        let mut idx = vec![0usize; m];
        let mut point: Vec<f64> = vec![self.nodes[0]; m];
        let mut total = 0.0;
        loop {
            let w: f64 = idx.iter().map(|&i| self.weights[i]).product();
            total += w * f(&point);
            // odometer increment
            let mut axis = 0;
            loop {
                if axis == m {
                    return total;
                }
                idx[axis] += 1;
                if idx[axis] < n {
                    point[axis] = self.nodes[idx[axis]];
                    break;
                }
                idx[axis] = 0;
                point[axis] = self.nodes[0];
                axis += 1;
            }
        }
    }
}

/// E_{z~N(0,I_m)}[f(z)] under `rule`; m is the rule's dimension.
pub fn gauss_expectation(f: impl FnMut(&[f64]) -> f64, rule: &QuadratureRule) -> Result<f64> {
    if rule.dimension > MAX_TENSOR_DIM {
        return Err(Error::DimensionTooLarge(rule.dimension));
    }
    Ok(rule.expectation(f))
}

/// nu_j = E[g(xi) He_j(xi)] for j = 0..=max_j.
pub fn hermite_coefficients(
    g: impl Fn(f64) -> f64,
    max_j: usize,
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    if rule.dimension != 1 {
        return Err(Error::config("Hermite coefficients need a one-dimensional rule"));
    }
    let mut nu = vec![0.0; max_j + 1];
    for (&x, &w) in rule.nodes.iter().zip(&rule.weights) {
        let gx = w * g(x);
        let (mut prev, mut cur) = (1.0, x);
        nu[0] += gx;
        if max_j >= 1 {
            nu[1] += gx * x;
        }
        for (n, slot) in nu.iter_mut().enumerate().skip(2) {
            let next = x * cur - (n - 1) as f64 * prev;
            prev = cur;
            cur = next;
            *slot += gx * cur;
        }
    }
    Ok(nu)
}

/// Nodes from the Jacobi matrix, polished by Newton on the normalized
/// recurrence; weights from 1/(n psi_{n-1}(x)^2). The result is made exactly
/// symmetric so odd integrands cancel to rounding.
fn golub_welsch(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // psi_k = He_k / sqrt(k!), returns (psi_n, psi_{n-1})
    let psi = |x: f64| {
        let (mut prev, mut cur) = (0.0, 1.0);
        for k in 0..n {
            let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
            prev = cur;
            cur = next;
        }
        (cur, prev)
    };
    let mut weights = vec![0.0; n];
    for (x, w) in nodes.iter_mut().zip(weights.iter_mut()) {
        for _ in 0..4 {
            let (pn, pm) = psi(*x);
            *x -= pn / ((n as f64).sqrt() * pm);
        }
        let (_, pm) = psi(*x);
        *w = 1.0 / (n as f64 * pm * pm);
    }
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (nodes, weights)
}
