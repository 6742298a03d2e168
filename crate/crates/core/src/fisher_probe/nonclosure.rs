//! A matrix `G = I + B/√n` is diagonal up to `O(1/√n)` off-diagonal
//! entries, but `G²` is not: products of many small entries accumulate.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonclosureReport {
    pub n: usize,
    pub offdiag_rms_g: f64,
    pub offdiag_rms_g2: f64,
    /// `offdiag_rms_g2 / offdiag_rms_g`; NaN when `G` is diagonal.
    pub ratio: f64,
}

fn offdiag_rms(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let total: f64 = m.iter().map(|v| v * v).sum();
    let diag: f64 = m.diag().iter().map(|v| v * v).sum();
    ((total - diag) / (n * (n - 1)) as f64).sqrt()
}

/// Builds `G = I + B/√n` from a given `B` and compares `G` with `G²`.
pub fn nonclosure_from(b: &Array2<f64>) -> Result<NonclosureReport> {
    let n = b.nrows();
    if n < 2 || b.ncols() != n {
        return Err(Error::Dimension { what: "square perturbation", expected: n.max(2), got: b.ncols() });
    }
    let g = Array2::<f64>::eye(n) + &(b / (n as f64).sqrt());
    let g2 = g.dot(&g);
    let (a, c) = (offdiag_rms(&g), offdiag_rms(&g2));
    Ok(NonclosureReport { n, offdiag_rms_g: a, offdiag_rms_g2: c, ratio: if a == 0.0 { f64::NAN } else { c / a } })
}

/// Symmetric standard-normal `B`, as a Fisher perturbation would be.
pub fn nonclosure_demo(n: usize, seed: u64) -> Result<NonclosureReport> {
    if n < 10 {
        return Err(Error::Config(format!("non-closure demo needs n >= 10, got {n}")));
    }
    let mut b = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = rng::normal_vec(seed, Domain::Probe, i as u64, 0, n - i);
        for (off, v) in row.into_iter().enumerate() {
            b[[i, i + off]] = v;
            b[[i + off, i]] = v;
        }
    }
    nonclosure_from(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_perturbation() {
        let r = nonclosure_from(&Array2::zeros((20, 20))).unwrap();
        assert_eq!((r.offdiag_rms_g, r.offdiag_rms_g2), (0.0, 0.0));
        assert!(r.ratio.is_nan());
    }

    #[test]
    fn square_exceeds_single() {
        let r = nonclosure_demo(100, 1).unwrap();
        assert!((r.offdiag_rms_g - 0.1).abs() < 0.01);
        assert!(r.ratio > 1.5);
        assert!(nonclosure_demo(5, 1).is_err());
    }
}
