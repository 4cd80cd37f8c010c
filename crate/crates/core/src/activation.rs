//! Scalar functions used both as student activations and as link functions
//! of single-index teachers.

use crate::error::{Error, Result};
use crate::hermite::{hermite_derivative, hermite_eval};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScalarFn {
    Identity,
    Relu,
    Tanh,
    Softplus,
    /// Probabilists' Hermite polynomial of the given degree.
    Hermite(u32),
}

impl ScalarFn {
    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            ScalarFn::Identity => x,
            ScalarFn::Relu => x.max(0.0),
            ScalarFn::Tanh => x.tanh(),
            ScalarFn::Softplus => softplus(x),
            ScalarFn::Hermite(j) => hermite_fast(j, x),
        }
    }

    /// First derivative; relu'(0) is taken to be 0.
    #[inline]
    pub fn d1(self, x: f64) -> f64 {
        match self {
            ScalarFn::Identity => 1.0,
            ScalarFn::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarFn::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ScalarFn::Softplus => logistic(x),
            ScalarFn::Hermite(j) => hermite_derivative(j as usize, x),
        }
    }

    /// Second derivative in the classical sense (0 for relu away from the kink).
    #[inline]
    pub fn d2(self, x: f64) -> f64 {
        match self {
            ScalarFn::Identity | ScalarFn::Relu => 0.0,
            ScalarFn::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            ScalarFn::Softplus => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            ScalarFn::Hermite(j) => {
                if j < 2 {
                    0.0
                } else {
                    (j * (j - 1)) as f64 * hermite_eval(j as usize - 2, x)
                }
            }
        }
    }

    /// Whether the classical second derivative misses a singular part.
    pub fn has_kink(self) -> bool {
        matches!(self, ScalarFn::Relu)
    }

    /// Polynomial degree, if the function is a polynomial.
    pub fn polynomial_degree(self) -> Option<usize> {
        match self {
            ScalarFn::Identity => Some(1),
            ScalarFn::Hermite(j) => Some(j as usize),
            _ => None,
        }
    }

    pub fn name(self) -> String {
        match self {
            ScalarFn::Identity => "id".into(),
            ScalarFn::Relu => "relu".into(),
            ScalarFn::Tanh => "tanh".into(),
            ScalarFn::Softplus => "softplus".into(),
            ScalarFn::Hermite(j) => format!("he{j}"),
        }
    }
}

#[inline]
fn hermite_fast(j: u32, x: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => x,
        2 => x * x - 1.0,
        3 => x * (x * x - 3.0),
        4 => {
            let x2 = x * x;
            x2 * (x2 - 6.0) + 3.0
        }
        _ => hermite_eval(j as usize, x),
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl fmt::Display for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ScalarFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Ok(match t.as_str() {
            "id" | "identity" | "linear" => ScalarFn::Identity,
            "relu" => ScalarFn::Relu,
            "tanh" => ScalarFn::Tanh,
            "softplus" => ScalarFn::Softplus,
            _ => match t.strip_prefix("he").map(str::parse::<u32>) {
                Some(Ok(j)) if j <= 20 => ScalarFn::Hermite(j),
                _ => return Err(Error::config(format!("unknown scalar function {s:?}"))),
            },
        })
    }
}

impl TryFrom<String> for ScalarFn {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScalarFn> for String {
    fn from(f: ScalarFn) -> String {
        f.name()
    }
}
