//! Running moments for means and standard errors across runs or samples.

/// Sum and sum of squares; merging is associative so shard reductions are
/// deterministic when done in shard order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub n: usize,
    pub sum: f64,
    pub sumsq: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sumsq += other.sumsq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.sumsq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let mut m = Moments::default();
    xs.iter().for_each(|&x| m.push(x));
    (m.mean(), m.stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        let mut a = Moments::default();
        a.push(1.0);
        let mut b = Moments::default();
        b.push(3.0);
        a.merge(&b);
        assert_eq!(a.mean(), 2.0);
    }
}
