//! Fisher block of a single unit `φ(w·x + w0)` under `x ~ N(0, I)`.
//!
//! With `ŵ = w/‖w‖` and the bias as the last coordinate `e0`, the block is
//!
//! ```text
//! G = A00 I + (Ann - A00) ŵŵᵀ + A0n (e0ŵᵀ + ŵe0ᵀ)
//! ```
//!
//! where `A00 = E[φ′²]`, `A0n = E[v φ′²]`, `Ann = E[v² φ′²]` are taken over the
//! projected input `v = ŵ·x`. Its inverse has the same shape:
//!
//! ```text
//! G⁻¹ = Ā00 I + X ŵŵᵀ + Y (e0ŵᵀ + ŵe0ᵀ) + Z e0e0ᵀ
//! ```
//!
//! with `Ā00 = 1/A00`, `D = A00 Ann - A0n²`, `X = A00/D - Ā00`,
//! `Y = -A0n/D`, `Z = Ann/D - Ā00`.

use ndarray::{Array1, Array2, ArrayView1};
use serde::Serialize;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::quadrature::{self, normal_cdf, normal_pdf, GaussianIntegrator};

/// Relative floor on `D / (A00 Ann)` below which the block counts as singular.
pub const EPS_D: f64 = 1e-12;
/// Absolute floor on `A00`.
pub const EPS_A: f64 = 1e-12;

/// Incoming weights and bias of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitWeights {
    w: Array1<f64>,
    w0: f64,
    w_norm: f64,
}

impl UnitWeights {
    pub fn new(w: Array1<f64>, w0: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Dimension { what: "unit fan-in", expected: 1, got: 0 });
        }
        if !w0.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unit weights".into()));
        }
        let w_norm = w.dot(&w).sqrt();
        Ok(Self { w, w0, w_norm })
    }

    pub fn from_view(w: ArrayView1<f64>, w0: f64) -> Result<Self> {
        Self::new(w.to_owned(), w0)
    }

    pub fn w(&self) -> &Array1<f64> {
        &self.w
    }

    pub fn w0(&self) -> f64 {
        self.w0
    }

    pub fn w_norm(&self) -> f64 {
        self.w_norm
    }

    /// Fan-in `n`; the augmented dimension is `n + 1`.
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// The three Gaussian integrals and the derived inverse coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnitFisherCoeffs {
    pub a00: f64,
    pub a0n: f64,
    pub ann: f64,
    pub abar00: f64,
    pub d: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitFisherCoeffs {
    /// Derives `Ā00, D, X, Y, Z`. Non-finite derived values are left as they
    /// come out; [`check_invertible`](Self::check_invertible) guards their use.
    pub fn from_integrals(a00: f64, a0n: f64, ann: f64) -> Self {
        let abar00 = 1.0 / a00;
        let d = a00 * ann - a0n * a0n;
        Self {
            a00,
            a0n,
            ann,
            abar00,
            d,
            x: a00 / d - abar00,
            y: -a0n / d,
            z: ann / d - abar00,
        }
    }

    /// Adds `λ` to `A00` and `Ann`.
    pub fn damped(&self, lambda: f64) -> Self {
        if lambda == 0.0 {
            return *self;
        }
        Self::from_integrals(self.a00 + lambda, self.a0n, self.ann + lambda)
    }

    pub fn is_invertible(&self) -> bool {
        self.a00 > EPS_A && self.d > EPS_D * self.a00 * self.ann && self.d.is_finite()
    }

    pub fn check_invertible(&self) -> Result<()> {
        if self.is_invertible() {
            Ok(())
        } else {
            Err(Error::SingularFisher { a00: self.a00, d: self.d })
        }
    }
}

fn check_norm(w_norm: f64) -> Result<()> {
    if w_norm > 0.0 && w_norm.is_finite() {
        Ok(())
    } else {
        Err(Error::SingularDirection)
    }
}

/// Closed forms for ReLU with `c = w0/‖w‖`:
/// `A00 = Φ(c)`, `A0n = pdf(c)`, `Ann = Φ(c) - c pdf(c)`.
pub fn coeffs_relu(w_norm: f64, w0: f64) -> Result<UnitFisherCoeffs> {
    check_norm(w_norm)?;
    let c = w0 / w_norm;
    let (cdf, pdf) = (normal_cdf(c), normal_pdf(c));
    // c·pdf(c) underflows to 0·0 rather than NaN for huge |c|.
    let c_pdf = if pdf == 0.0 { 0.0 } else { c * pdf };
    Ok(UnitFisherCoeffs::from_integrals(cdf, pdf, cdf - c_pdf))
}

/// The three integrals by quadrature, for any activation.
pub fn coeffs_quadrature(w_norm: f64, w0: f64, act: ActivationKind) -> Result<UnitFisherCoeffs> {
    coeffs_quadrature_with(quadrature::shared(), w_norm, w0, act)
}

pub fn coeffs_quadrature_with(
    integrator: &GaussianIntegrator,
    w_norm: f64,
    w0: f64,
    act: ActivationKind,
) -> Result<UnitFisherCoeffs> {
    check_norm(w_norm)?;
    let f = |v: f64| act.derivative(w_norm * v + w0).powi(2);
    let [a00, a0n, ann] = if act.is_smooth() {
        [
            integrator.expect(f, w_norm),
            integrator.expect(|v| v * f(v), w_norm),
            integrator.expect(|v| v * v * f(v), w_norm),
        ]
    } else {
        let kink = -w0 / w_norm;
        [
            integrator.expect_with_kink(f, kink, 1.0),
            integrator.expect_with_kink(|v| v * f(v), kink, 1.0),
            integrator.expect_with_kink(|v| v * v * f(v), kink, 1.0),
        ]
    };
    Ok(UnitFisherCoeffs::from_integrals(a00, a0n, ann))
}

/// Coefficients for a zero weight vector: `u ≡ w0`, so `G = φ′(w0)² I`.
pub fn coeffs_at_zero_weights(w0: f64, act: ActivationKind) -> UnitFisherCoeffs {
    let g = act.derivative(w0).powi(2);
    UnitFisherCoeffs::from_integrals(g, 0.0, g)
}

/// Closed form where one exists (ReLU, linear), quadrature otherwise, the
/// zero-weight convention at `‖w‖ = 0`, then damping `λ`.
pub fn coeffs_for(act: ActivationKind, w_norm: f64, w0: f64, lambda: f64) -> Result<UnitFisherCoeffs> {
    let c = if w_norm == 0.0 {
        coeffs_at_zero_weights(w0, act)
    } else {
        match act {
            ActivationKind::Relu => coeffs_relu(w_norm, w0)?,
            ActivationKind::Linear => {
                check_norm(w_norm)?;
                UnitFisherCoeffs::from_integrals(1.0, 0.0, 1.0)
            }
            _ => coeffs_quadrature(w_norm, w0, act)?,
        }
    };
    Ok(c.damped(lambda))
}

fn unit_direction(weights: &UnitWeights) -> Option<Array1<f64>> {
    (weights.w_norm > 0.0).then(|| &weights.w / weights.w_norm)
}

/// Dense `(n+1)×(n+1)` block in the original coordinates, bias last.
pub fn assemble_g(coeffs: &UnitFisherCoeffs, weights: &UnitWeights) -> Array2<f64> {
    let n = weights.len();
    let mut g = Array2::<f64>::eye(n + 1) * coeffs.a00;
    if let Some(u) = unit_direction(weights) {
        let s = coeffs.ann - coeffs.a00;
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] += s * u[i] * u[j];
            }
            g[[i, n]] += coeffs.a0n * u[i];
            g[[n, i]] += coeffs.a0n * u[i];
        }
    }
    g
}

/// Dense explicit inverse, for checks and diagnostics.
pub fn ginv_matrix(coeffs: &UnitFisherCoeffs, weights: &UnitWeights) -> Result<Array2<f64>> {
    let n = weights.len();
    let Some(u) = unit_direction(weights) else {
        if coeffs.a00 > EPS_A {
            return Ok(Array2::<f64>::eye(n + 1) * coeffs.abar00);
        }
        return Err(Error::SingularFisher { a00: coeffs.a00, d: coeffs.d });
    };
    coeffs.check_invertible()?;
    let mut m = Array2::<f64>::eye(n + 1) * coeffs.abar00;
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] += coeffs.x * u[i] * u[j];
        }
        m[[i, n]] += coeffs.y * u[i];
        m[[n, i]] += coeffs.y * u[i];
    }
    m[[n, n]] += coeffs.z;
    Ok(m)
}

/// `G⁻¹ x*` in `O(n)` for an augmented vector `x* = (x, x0)`.
pub fn apply_ginv(coeffs: &UnitFisherCoeffs, weights: &UnitWeights, xstar: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = weights.len();
    if xstar.len() != n + 1 {
        return Err(Error::Dimension { what: "augmented input x*", expected: n + 1, got: xstar.len() });
    }
    if weights.w_norm == 0.0 {
        if coeffs.a00 > EPS_A {
            return Ok(xstar.mapv(|v| v * coeffs.abar00));
        }
        return Err(Error::SingularFisher { a00: coeffs.a00, d: coeffs.d });
    }
    coeffs.check_invertible()?;
    let wn = weights.w_norm;
    let x0 = xstar[n];
    let wx = weights.w.dot(&xstar.slice(ndarray::s![..n]));
    let mut out = xstar.mapv(|v| v * coeffs.abar00);
    let along = coeffs.x * wx / (wn * wn) + coeffs.y * x0 / wn;
    out.slice_mut(ndarray::s![..n]).scaled_add(along, &weights.w);
    out[n] += coeffs.y * wx / wn + coeffs.z * x0;
    Ok(out)
}

/// Squared Frobenius masses of the three structural parts of `G⁻¹`: the
/// diagonal, the off-diagonal rank-one `X ŵŵᵀ` part of the weight block, and
/// the off-diagonal bias row and column. They are disjoint in support, so
/// they sum to `‖G⁻¹‖²_F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GinvStructure {
    pub diagonal: f64,
    pub rank_one: f64,
    pub bias: f64,
    pub total: f64,
}

impl GinvStructure {
    pub fn fractions(&self) -> [f64; 3] {
        [self.diagonal / self.total, self.rank_one / self.total, self.bias / self.total]
    }
}

pub fn ginv_structure(coeffs: &UnitFisherCoeffs, weights: &UnitWeights) -> Result<GinvStructure> {
    let Some(u) = unit_direction(weights) else {
        if coeffs.a00 <= EPS_A {
            return Err(Error::SingularFisher { a00: coeffs.a00, d: coeffs.d });
        }
        let diagonal = (weights.len() + 1) as f64 * coeffs.abar00.powi(2);
        return Ok(GinvStructure { diagonal, rank_one: 0.0, bias: 0.0, total: diagonal });
    };
    coeffs.check_invertible()?;
    let (a, x) = (coeffs.abar00, coeffs.x);
    let diag_w: f64 = u.iter().map(|&ui| (a + x * ui * ui).powi(2)).sum();
    let diagonal = diag_w + (a + coeffs.z).powi(2);
    let sum_u4: f64 = u.iter().map(|&ui| ui.powi(4)).sum();
    let sum_u2: f64 = u.dot(&u);
    let rank_one = x * x * (sum_u2 * sum_u2 - sum_u4).max(0.0);
    let bias = 2.0 * coeffs.y * coeffs.y * sum_u2;
    Ok(GinvStructure { diagonal, rank_one, bias, total: diagonal + rank_one + bias })
}
