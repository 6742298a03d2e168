//! Gaussian expectations `E[f(v)]`, `v ~ N(0, 1)`.
//!
//! Smooth, very slowly varying integrands use Gauss-Hermite. Everything
//! else (pre-activation scales above a quarter, or a kink) goes through
//! composite Gauss-Legendre on the truncated line `[-12, 12]`, split at the
//! kink when there is one.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Default node count for every rule.
pub const DEFAULT_NODES: usize = 64;

/// Gaussian mass beyond this many standard deviations is below 1e-32.
const TRUNCATION: f64 = 12.0;

/// Above this integrand scale the complex singularities of tanh-like
/// integrands come close enough that 64-node Gauss-Hermite loses accuracy.
const HERMITE_MAX_SCALE: f64 = 0.25;

/// Standard normal CDF Φ.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Gauss-Hermite rule normalised to the standard normal measure.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite needs at least one node");
        let (x, w) = hermite_physicists(n);
        let nodes = x.iter().map(|&z| z * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().map(|&wi| wi / PI.sqrt()).collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&v, &w)| w * f(v))
            .sum()
    }
}

// Newton iteration on orthonormal Hermite polynomials (weight e^{-x^2}).
fn hermite_physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Gauss-Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let jf = j as f64;
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                pp = nf * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-16 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, a: f64, b: f64, f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(mid + half * t))
            .sum::<f64>()
    }
}

/// Process-wide integrator with [`DEFAULT_NODES`] nodes.
pub fn shared() -> &'static GaussianIntegrator {
    static INTEGRATOR: std::sync::OnceLock<GaussianIntegrator> = std::sync::OnceLock::new();
    INTEGRATOR.get_or_init(GaussianIntegrator::default)
}

/// Computes `E[f(v)]` for standard normal `v`.
#[derive(Debug, Clone)]
pub struct GaussianIntegrator {
    hermite: GaussHermite,
    legendre: GaussLegendre,
}

impl Default for GaussianIntegrator {
    fn default() -> Self {
        Self::new(DEFAULT_NODES)
    }
}

impl GaussianIntegrator {
    /// `nodes` is the Gauss-Hermite order and the per-panel Gauss-Legendre order.
    pub fn new(nodes: usize) -> Self {
        Self {
            hermite: GaussHermite::new(nodes),
            legendre: GaussLegendre::new(nodes),
        }
    }

    pub fn nodes(&self) -> usize {
        self.hermite.len()
    }

    /// `E[f(v)]` for an integrand that is smooth and varies on a length of
    /// roughly `1 / scale` in `v`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F, scale: f64) -> f64 {
        if scale <= HERMITE_MAX_SCALE {
            self.hermite.expect(f)
        } else {
            self.truncated(&f, -TRUNCATION, TRUNCATION, scale)
        }
    }

    /// `E[f(v)]` for an integrand that is smooth on each side of `kink`.
    pub fn expect_with_kink<F: Fn(f64) -> f64>(&self, f: F, kink: f64, scale: f64) -> f64 {
        let k = kink.clamp(-TRUNCATION, TRUNCATION);
        self.truncated(&f, -TRUNCATION, k, scale) + self.truncated(&f, k, TRUNCATION, scale)
    }

    fn truncated<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64, scale: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let width = 1.0 / scale.max(1.0);
        let panels = ((b - a) / width).ceil().max(1.0) as usize;
        let h = (b - a) / panels as f64;
        let mut parts: Vec<f64> = (0..panels)
            .map(|p| {
                let lo = a + p as f64 * h;
                let hi = if p + 1 == panels { b } else { lo + h };
                self.legendre.integrate(lo, hi, |v| f(v) * normal_pdf(v))
            })
            .collect();
        crate::stats::pairwise_sum(&mut parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_integrates_moments() {
        let gh = GaussHermite::new(64);
        assert_abs_diff_eq!(gh.expect(|_| 1.0), 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(gh.expect(|v| v), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(gh.expect(|v| v * v), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gh.expect(|v| v.powi(4)), 3.0, epsilon = 1e-11);
        assert_abs_diff_eq!(gh.expect(|v| v.powi(6)), 15.0, epsilon = 1e-10);
    }

    #[test]
    fn hermite_small_orders() {
        let gh = GaussHermite::new(1);
        assert_eq!(gh.nodes(), &[0.0]);
        assert_abs_diff_eq!(gh.weights()[0], 1.0, epsilon = 1e-14);
        let gh3 = GaussHermite::new(3);
        assert_abs_diff_eq!(gh3.nodes()[0].abs(), 3f64.sqrt(), epsilon = 1e-13);
        assert_abs_diff_eq!(gh3.expect(|v| v.powi(4)), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn legendre_polynomials_exact() {
        let gl = GaussLegendre::new(8);
        assert_abs_diff_eq!(gl.integrate(0.0, 2.0, |x| x.powi(15)), 2f64.powi(16) / 16.0, epsilon = 1e-8);
        assert_abs_diff_eq!(gl.integrate(-1.0, 1.0, |_| 1.0), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn cdf_values() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(normal_cdf(1.959963984540054), 0.975, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_cdf(-10.0), 7.619853024160527e-24, epsilon = 1e-36);
    }

    #[test]
    fn half_line_moments_match_closed_forms() {
        let gi = GaussianIntegrator::default();
        for &c in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            // E[1{v > c}] = 1 - Φ(c); E[v 1{v > c}] = pdf(c); E[v² 1{v > c}] = 1 - Φ(c) + c pdf(c).
            let step = |v: f64| if v > c { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(gi.expect_with_kink(step, c, 1.0), 1.0 - normal_cdf(c), epsilon = 1e-13);
            assert_abs_diff_eq!(gi.expect_with_kink(|v| v * step(v), c, 1.0), normal_pdf(c), epsilon = 1e-13);
            assert_abs_diff_eq!(
                gi.expect_with_kink(|v| v * v * step(v), c, 1.0),
                1.0 - normal_cdf(c) + c * normal_pdf(c),
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn wide_scale_path_agrees_with_hermite_on_smooth_integrand() {
        let gi = GaussianIntegrator::default();
        let f = |v: f64| (0.2 * v).tanh().powi(2);
        let a = gi.expect(f, 0.2);
        let b = gi.expect(f, 5.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}
