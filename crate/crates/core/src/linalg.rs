//! Small dense linear algebra used by oracles and diagnostics.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// LU factorisation with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension { what: "LU of non-square matrix", expected: n, got: a.ncols() });
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[[i, k]].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= 1e-300 * scale {
                return Err(Error::NonFinite(format!("singular matrix at column {k}")));
            }
            if p != k {
                for j in 0..n {
                    lu.swap([k, j], [p, j]);
                }
                perm.swap(k, p);
            }
            let d = lu[[k, k]];
            for i in (k + 1)..n {
                let f = lu[[i, k]] / d;
                lu[[i, k]] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        lu[[i, j]] -= f * lu[[k, j]];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.lu.nrows();
        let mut x: Array1<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s / self.lu[[i, i]];
        }
        x
    }

    pub fn inverse(&self) -> Array2<f64> {
        let n = self.lu.nrows();
        let mut inv = Array2::zeros((n, n));
        for j in 0..n {
            let mut e = Array1::zeros(n);
            e[j] = 1.0;
            inv.column_mut(j).assign(&self.solve(&e));
        }
        inv
    }
}

pub fn inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(Lu::new(a)?.inverse())
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn max_abs_from_identity(a: &Array2<f64>) -> f64 {
    a.indexed_iter().fold(0.0, |m, ((i, j), v)| {
        let target = if i == j { 1.0 } else { 0.0 };
        m.max((v - target).abs())
    })
}

/// Largest `|a_ij - a_ji|` relative to the largest entry.
pub fn asymmetry(a: &Array2<f64>) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst / scale
}

/// True when every eigenvalue of the symmetric matrix `a` exceeds `-floor`.
/// Decided by a Cholesky factorisation of `a + floor I`.
pub fn is_psd_with_floor(a: &Array2<f64>, floor: f64) -> bool {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]] + floor;
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    true
}
