//! The student's readout in pre-activation space. Both the direct simulation
//! and the effective processes see the network only through the per-sample
//! loss L = (y - f)^2 / 2 and its derivatives in h.

use crate::activation::ScalarFn;
use serde::{Deserialize, Serialize};

/// Second-layer weights, activation and the p = 1 frozen-twin convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Readout {
    pub a: Vec<f64>,
    pub sigma: ScalarFn,
    /// When set, the output subtracts a_0 sigma(h_ref) where h_ref is the
    /// initial pre-activation of neuron 0, so the network starts at f = 0.
    pub frozen_twin: bool,
    /// Gaussian bandwidth standing in for the delta in relu'' inside
    /// derivative estimates. Ignored for smooth activations.
    pub kink_bandwidth: f64,
}

pub const DEFAULT_KINK_BANDWIDTH: f64 = 0.05;
/// Hidden-layer width ceiling; per-sample scratch lives on the stack.
pub const MAX_NEURONS: usize = 64;

impl Readout {
    pub fn new(a: Vec<f64>, sigma: ScalarFn, frozen_twin: bool) -> Self {
        assert!(!a.is_empty() && a.len() <= MAX_NEURONS, "readout width must be in 1..=64");
        Self { a, sigma, frozen_twin, kink_bandwidth: DEFAULT_KINK_BANDWIDTH }
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    /// Network output; `h_ref` only matters with the frozen twin.
    #[inline]
    pub fn output(&self, h: &[f64], h_ref: f64) -> f64 {
        let p = self.a.len();
        let mut f = if p <= 2 {
            let mut s = 0.0;
            for j in 0..p {
                s += self.a[j] * self.sigma.value(h[j]);
            }
            s
        } else {
            // Order-independent sum so that permuting neurons is exact. Sorting
            // by magnitude also cancels paired +-a sigma(h) terms exactly.
            let mut terms = [0.0f64; MAX_NEURONS];
            for j in 0..p {
                terms[j] = self.a[j] * self.sigma.value(h[j]);
            }
            let t = &mut terms[..p];
            t.sort_by(|x, y| x.abs().total_cmp(&y.abs()).then(x.total_cmp(y)));
            t.iter().sum()
        };
        if self.frozen_twin {
            f -= self.a[0] * self.sigma.value(h_ref);
        }
        f
    }

    /// F = dL/dh = -(y - f) a sigma'(h); returns the residual y - f.
    #[inline]
    pub fn grad(&self, h: &[f64], h_ref: f64, y: f64, out: &mut [f64]) -> f64 {
        let r = y - self.output(h, h_ref);
        for j in 0..self.a.len() {
            out[j] = -r * self.a[j] * self.sigma.d1(h[j]);
        }
        r
    }

    /// sigma'' used in derivative estimates: classical for smooth
    /// activations, a Gaussian-smoothed delta for relu.
    #[inline]
    pub fn sigma_second(&self, x: f64) -> f64 {
        if self.sigma.has_kink() {
            let b = self.kink_bandwidth;
            (-0.5 * (x / b) * (x / b)).exp() / (b * (2.0 * std::f64::consts::PI).sqrt())
        } else {
            self.sigma.d2(x)
        }
    }

    /// Full set of derivatives at one sample.
    ///
    /// `hess` (p x p row-major) gets dF/dh, `twin` gets dF/dh_ref and
    /// `dy` gets dF/dy. Returns the residual.
    pub fn derivatives(
        &self,
        h: &[f64],
        h_ref: f64,
        y: f64,
        grad: &mut [f64],
        hess: &mut [f64],
        twin: &mut [f64],
        dy: &mut [f64],
    ) -> f64 {
        let p = self.a.len();
        let r = y - self.output(h, h_ref);
        let mut s1 = [0.0f64; MAX_NEURONS];
        for j in 0..p {
            s1[j] = self.a[j] * self.sigma.d1(h[j]);
            grad[j] = -r * s1[j];
            dy[j] = -s1[j];
        }
        for j in 0..p {
            for l in 0..p {
                hess[j * p + l] = s1[j] * s1[l];
            }
            hess[j * p + j] -= r * self.a[j] * self.sigma_second(h[j]);
        }
        let ref_slope = if self.frozen_twin { -self.a[0] * self.sigma.d1(h_ref) } else { 0.0 };
        for j in 0..p {
            twin[j] = ref_slope * s1[j];
        }
        r
    }
}
