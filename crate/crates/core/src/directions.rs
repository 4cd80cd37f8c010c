//! Named directions (or subspaces) inside the teacher space R^k onto which
//! overlap matrices are projected.

use crate::error::{Error, Result};
use crate::targets::TargetFunction;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Orthonormal rows spanning a subspace of R^k, with a display name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub name: String,
    pub basis: Vec<Vec<f64>>,
}

impl Projection {
    pub fn vector(name: impl Into<String>, u: &[f64]) -> Result<Self> {
        let n = norm(u);
        if !(n > 1e-12) {
            return Err(Error::config("direction has zero norm"));
        }
        Ok(Self { name: name.into(), basis: vec![u.iter().map(|x| x / n).collect()] })
    }

    /// Frobenius norm of M B^T for an overlap matrix M (p x k).
    pub fn apply(&self, m: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for b in &self.basis {
            for j in 0..m.nrows() {
                let v: f64 = (0..m.ncols()).map(|l| m[(j, l)] * b[l]).sum();
                total += v * v;
            }
        }
        total.sqrt()
    }

    /// Delta-method standard error of `apply` given entrywise standard errors.
    pub fn apply_stderr(&self, m: &DMatrix<f64>, se: &DMatrix<f64>) -> f64 {
        let value = self.apply(m);
        let mut acc = 0.0;
        let mut plain = 0.0;
        let mut count = 0usize;
        for b in &self.basis {
            for j in 0..m.nrows() {
                let v: f64 = (0..m.ncols()).map(|l| m[(j, l)] * b[l]).sum();
                let s2: f64 = (0..m.ncols()).map(|l| (se[(j, l)] * b[l]).powi(2)).sum();
                acc += v * v * s2;
                plain += s2;
                count += 1;
            }
        }
        if value > 1e-12 {
            acc.sqrt() / value
        } else {
            (plain / count.max(1) as f64).sqrt()
        }
    }
}

/// Resolve "teacher", "C1", "C1_perp", "e<i>" (1-based) or "custom:<c1,c2,...>".
pub fn resolve(name: &str, target: &TargetFunction) -> Result<Projection> {
    let k = target.k();
    let name = name.trim();
    let identity = || (0..k).map(|i| unit(k, i)).collect::<Vec<_>>();
    match name {
        "teacher" => Ok(Projection { name: name.into(), basis: identity() }),
        "C1" | "C1_perp" => {
            let c = target.first_hermite_vector()?;
            let nc = norm(&c);
            if name == "C1" {
                if nc < 1e-10 {
                    return Err(Error::config(format!(
                        "direction C1 is undefined: E[g*(h*) h*] vanishes for {target}"
                    )));
                }
                return Projection::vector(name, &c);
            }
            if nc < 1e-10 {
                return Ok(Projection { name: name.into(), basis: identity() });
            }
            let c: Vec<f64> = c.iter().map(|x| x / nc).collect();
            Ok(Projection { name: name.into(), basis: complement(&c) })
        }
        _ => {
            if let Some(rest) = name.strip_prefix("custom:") {
                let coeffs: std::result::Result<Vec<f64>, _> =
                    rest.split(',').map(|s| s.trim().parse::<f64>()).collect();
                let coeffs = coeffs.map_err(|_| Error::config(format!("bad coefficients in {name:?}")))?;
                if coeffs.len() != k {
                    return Err(Error::config(format!(
                        "{name:?} has {} coefficients but the target has k = {k}",
                        coeffs.len()
                    )));
                }
                return Projection::vector(name, &coeffs);
            }
            if let Some(i) = name.strip_prefix('e').and_then(|s| s.parse::<usize>().ok()) {
                if i == 0 || i > k {
                    return Err(Error::config(format!("{name:?} is out of range for k = {k}")));
                }
                return Ok(Projection { name: name.into(), basis: vec![unit(k, i - 1)] });
            }
            Err(Error::config(format!("unknown direction {name:?}")))
        }
    }
}

pub fn resolve_all(names: &[String], target: &TargetFunction) -> Result<Vec<Projection>> {
    names.iter().map(|n| resolve(n, target)).collect()
}

fn unit(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Orthonormal basis of the complement of unit vector `u` in R^k.
pub fn complement(u: &[f64]) -> Vec<Vec<f64>> {
    let k = u.len();
    let mut basis: Vec<Vec<f64>> = vec![u.to_vec()];
    for i in 0..k {
        let mut v = unit(k, i);
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
        if basis.len() == k {
            break;
        }
    }
    basis.remove(0);
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c1_of_leap3_target_is_e1() {
        let t: TargetFunction = "sum(single:id; single:he3)".parse().unwrap();
        let c1 = resolve("C1", &t).unwrap();
        assert!((c1.basis[0][0] - 1.0).abs() < 1e-10);
        let perp = resolve("C1_perp", &t).unwrap();
        assert_eq!(perp.basis.len(), 1);
        assert!((perp.basis[0][1].abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn committee_directions() {
        let t: TargetFunction = "committee:tanh,k=2".parse().unwrap();
        let c1 = resolve("C1", &t).unwrap();
        let s = 0.5f64.sqrt();
        assert!((c1.basis[0][0] - s).abs() < 1e-10 && (c1.basis[0][1] - s).abs() < 1e-10);
        let perp = resolve("C1_perp", &t).unwrap();
        assert!((perp.basis[0][0].abs() - s).abs() < 1e-10);
        assert!((perp.basis[0][0] + perp.basis[0][1]).abs() < 1e-10);
    }

    #[test]
    fn projection_of_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 4.0]);
        let t: TargetFunction = "committee:tanh,k=2".parse().unwrap();
        assert!((resolve("teacher", &t).unwrap().apply(&m) - 5.0).abs() < 1e-12);
        assert!((resolve("e2", &t).unwrap().apply(&m) - 4.0).abs() < 1e-12);
        assert!(resolve("e3", &t).is_err());
        assert!(resolve("custom:1,1,1", &t).is_err());
        let c = resolve("custom:1,-1", &t).unwrap();
        assert!((c.apply(&m) - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn c1_undefined_for_even_target() {
        let t: TargetFunction = "single:he4".parse().unwrap();
        assert!(resolve("C1", &t).is_err());
        assert_eq!(resolve("C1_perp", &t).unwrap().basis.len(), 1);
    }
}
