//! Mean-field recursions for activity and the enlargement factor, and
//! Monte-Carlo estimates of the same quantities on sampled nets.

use log::warn;
use ndarray::Array1;
use rayon::prelude::*;
use serde::Serialize;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::nets::{self, Model, NetConfig, ResNet, ResNetConfig};
use crate::quadrature::GaussianIntegrator;
use crate::rng::{self, Domain};
use crate::stats;

/// Stopping rule for fixed-point iteration.
pub const FIXED_POINT_TOL: f64 = 1e-9;
pub const FIXED_POINT_MAX_ITERS: usize = 10_000;

/// `|χ - 1|` below this is reported as critical.
const CRITICAL_BAND: f64 = 1e-9;

/// Gaussian integrals of an activation. ReLU and linear use closed forms.
#[derive(Debug, Clone, Copy)]
pub struct MeanField<'a> {
    integrator: &'a GaussianIntegrator,
}

impl Default for MeanField<'static> {
    fn default() -> Self {
        Self { integrator: crate::quadrature::shared() }
    }
}

impl<'a> MeanField<'a> {
    pub fn with_integrator(integrator: &'a GaussianIntegrator) -> Self {
        Self { integrator }
    }

    /// `∫ φ(τ v)² Dv`.
    pub fn square_mean(&self, act: ActivationKind, tau: f64) -> f64 {
        match act {
            ActivationKind::Relu => 0.5 * tau * tau,
            ActivationKind::Linear => tau * tau,
            _ => self.integrator.expect(|v| act.apply(tau * v).powi(2), tau),
        }
    }

    /// `∫ φ′(τ v)² Dv`.
    pub fn derivative_square_mean(&self, act: ActivationKind, tau: f64) -> f64 {
        match act {
            // u ≡ 0 when τ = 0, and φ′(0) = 0.
            ActivationKind::Relu => {
                if tau > 0.0 {
                    0.5
                } else {
                    0.0
                }
            }
            ActivationKind::Linear => 1.0,
            _ => self.integrator.expect(|v| act.derivative(tau * v).powi(2), tau),
        }
    }

    pub fn activity_step(&self, a_prev: f64, sigma_w2: f64, sigma_b2: f64, act: ActivationKind) -> Result<ActivityStep> {
        let tau2 = pre_activation_variance(a_prev, sigma_w2, sigma_b2)?;
        Ok(ActivityStep { activity: self.square_mean(act, tau2.sqrt()), tau2 })
    }

    pub fn chi_step(&self, a_prev: f64, sigma_w2: f64, sigma_b2: f64, act: ActivationKind) -> Result<f64> {
        let tau2 = pre_activation_variance(a_prev, sigma_w2, sigma_b2)?;
        Ok(sigma_w2 * self.derivative_square_mean(act, tau2.sqrt()))
    }

    pub fn resnet_activity_step(
        &self,
        a_prev: f64,
        sigma_w2: f64,
        sigma_b2: f64,
        sigma_v2: f64,
        alpha: f64,
        act: ActivationKind,
    ) -> Result<f64> {
        if sigma_v2 < 0.0 || alpha < 0.0 {
            return Err(Error::NegativeVariance(format!("sigma_v2 = {sigma_v2}, alpha = {alpha}")));
        }
        let inner = self.activity_step(a_prev, sigma_w2, sigma_b2, act)?.activity;
        Ok(sigma_v2 * inner + alpha * alpha * a_prev)
    }

    pub fn propagate(&self, config: &NetConfig, a0: f64) -> Result<MeanFieldTrace> {
        config.validate()?;
        check_activity(a0)?;
        let mut layers = Vec::with_capacity(config.num_layers());
        let mut a = a0;
        for k in 0..config.num_layers() {
            let step = self.activity_step(a, config.sigma_w2[k], config.sigma_b2[k], config.activation)?;
            let chi = self.chi_step(a, config.sigma_w2[k], config.sigma_b2[k], config.activation)?;
            layers.push(MeanFieldLayer { layer: k + 1, activity: step.activity, tau2: step.tau2, chi, chi_prod: 1.0, regime: Regime::of(chi) });
            a = step.activity;
        }
        fill_products(&mut layers);
        Ok(MeanFieldTrace { input_activity: a0, layers, diverging: false })
    }

    /// Residual recursion `A^l = σ_v² Ā^l + α² A^{l-1}`, with the
    /// enlargement factor replaced by `σ_v² χ + α`.
    pub fn propagate_resnet(&self, config: &ResNetConfig, a0: f64) -> Result<MeanFieldTrace> {
        config.validate()?;
        check_activity(a0)?;
        let base = &config.base;
        let mut layers = Vec::with_capacity(base.num_layers());
        let mut a = a0;
        let mut increasing = base.num_layers() > 0;
        for k in 0..base.num_layers() {
            let tau2 = pre_activation_variance(a, base.sigma_w2[k], base.sigma_b2[k])?;
            let next = self.resnet_activity_step(a, base.sigma_w2[k], base.sigma_b2[k], config.sigma_v2, config.alpha, base.activation)?;
            let chi = resnet_chi(self.chi_step(a, base.sigma_w2[k], base.sigma_b2[k], base.activation)?, config.sigma_v2, config.alpha);
            increasing &= next > a;
            layers.push(MeanFieldLayer { layer: k + 1, activity: next, tau2, chi, chi_prod: 1.0, regime: Regime::of(chi) });
            a = next;
        }
        fill_products(&mut layers);
        let diverging = increasing && (config.alpha >= 1.0 || layers.last().is_some_and(|l| !l.activity.is_finite()));
        if diverging {
            warn!("residual activity grows monotonically over {} layers (alpha = {})", layers.len(), config.alpha);
        }
        Ok(MeanFieldTrace { input_activity: a0, layers, diverging })
    }

    /// Iterates the plain activity map to its fixed point.
    pub fn fixed_point(&self, sigma_w2: f64, sigma_b2: f64, act: ActivationKind, a0: f64) -> Result<FixedPoint> {
        check_activity(a0)?;
        iterate(a0, |a| Ok(self.activity_step(a, sigma_w2, sigma_b2, act)?.activity))
    }

    /// Iterates the residual activity map; with `σ_v² χ + α > 1` this
    /// typically reports divergence.
    pub fn resnet_fixed_point(&self, config: &ResNetConfig, a0: f64) -> Result<FixedPoint> {
        check_activity(a0)?;
        let b = &config.base;
        let fp = iterate(a0, |a| self.resnet_activity_step(a, b.sigma_w2[0], b.sigma_b2[0], config.sigma_v2, config.alpha, b.activation))?;
        if fp.diverged {
            warn!("residual activity did not settle after {} iterations (last value {:e})", fp.iterations, fp.activity);
        }
        Ok(fp)
    }
}

fn check_activity(a: f64) -> Result<()> {
    if !(a >= 0.0) {
        return Err(Error::NegativeVariance(format!("activity {a}")));
    }
    Ok(())
}

fn fill_products(layers: &mut [MeanFieldLayer]) {
    let mut prod = 1.0;
    for l in layers.iter_mut().rev() {
        prod *= l.chi;
        l.chi_prod = prod;
    }
}

fn iterate(a0: f64, mut step: impl FnMut(f64) -> Result<f64>) -> Result<FixedPoint> {
    let mut a = a0;
    for it in 1..=FIXED_POINT_MAX_ITERS {
        let next = step(a)?;
        if !next.is_finite() {
            return Ok(FixedPoint { activity: a, iterations: it, converged: false, diverged: true });
        }
        let delta = (next - a).abs();
        a = next;
        if delta < FIXED_POINT_TOL {
            return Ok(FixedPoint { activity: a, iterations: it, converged: true, diverged: false });
        }
    }
    Ok(FixedPoint { activity: a, iterations: FIXED_POINT_MAX_ITERS, converged: false, diverged: true })
}

/// `τ² = σ² A + σ_b²`.
pub fn pre_activation_variance(a_prev: f64, sigma_w2: f64, sigma_b2: f64) -> Result<f64> {
    if !(a_prev >= 0.0 && sigma_w2 >= 0.0 && sigma_b2 >= 0.0) {
        return Err(Error::NegativeVariance(format!("A = {a_prev}, sigma_w2 = {sigma_w2}, sigma_b2 = {sigma_b2}")));
    }
    Ok(sigma_w2 * a_prev + sigma_b2)
}

/// `χ̄ = σ_v² χ + α`.
pub fn resnet_chi(chi_base: f64, sigma_v2: f64, alpha: f64) -> f64 {
    sigma_v2 * chi_base + alpha
}

pub fn activity_step(a_prev: f64, sigma_w2: f64, sigma_b2: f64, act: ActivationKind) -> Result<ActivityStep> {
    MeanField::default().activity_step(a_prev, sigma_w2, sigma_b2, act)
}

pub fn chi_step(a_prev: f64, sigma_w2: f64, sigma_b2: f64, act: ActivationKind) -> Result<f64> {
    MeanField::default().chi_step(a_prev, sigma_w2, sigma_b2, act)
}

pub fn resnet_activity_step(a_prev: f64, sigma_w2: f64, sigma_b2: f64, sigma_v2: f64, alpha: f64, act: ActivationKind) -> Result<f64> {
    MeanField::default().resnet_activity_step(a_prev, sigma_w2, sigma_b2, sigma_v2, alpha, act)
}

pub fn propagate(config: &NetConfig, a0: f64) -> Result<MeanFieldTrace> {
    MeanField::default().propagate(config, a0)
}

pub fn propagate_resnet(config: &ResNetConfig, a0: f64) -> Result<MeanFieldTrace> {
    MeanField::default().propagate_resnet(config, a0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivityStep {
    pub activity: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub activity: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Ordered,
    Critical,
    Chaotic,
}

impl Regime {
    pub fn of(chi: f64) -> Self {
        if (chi - 1.0).abs() <= CRITICAL_BAND {
            Regime::Critical
        } else if chi > 1.0 {
            Regime::Chaotic
        } else {
            Regime::Ordered
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Ordered => "ordered",
            Regime::Critical => "critical",
            Regime::Chaotic => "chaotic",
        }
    }
}

/// Theory for one layer `l` (1-based: the layer producing `x^l`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanFieldLayer {
    pub layer: usize,
    /// `A^l`.
    pub activity: f64,
    /// `τ²_l = σ²_l A^{l-1} + σ²_bl`.
    pub tau2: f64,
    /// `χ^l`.
    pub chi: f64,
    /// `χ^L_l = χ^L ⋯ χ^l`.
    pub chi_prod: f64,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldTrace {
    pub input_activity: f64,
    pub layers: Vec<MeanFieldLayer>,
    /// Residual traces only: activity increases monotonically without settling.
    pub diverging: bool,
}

impl MeanFieldTrace {
    pub fn activities(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.activity).collect()
    }

    pub fn chis(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.chi).collect()
    }

    /// `χ^L_l` for a 1-based layer `l`; `l = L + 1` gives the empty product 1.
    pub fn chi_product_from(&self, l: usize) -> f64 {
        self.layers.iter().filter(|x| x.layer >= l).map(|x| x.chi).product()
    }
}

/// Monte-Carlo estimates per layer over independently seeded nets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloLayer {
    pub layer: usize,
    pub activity: f64,
    pub activity_se: f64,
    /// Measured `‖dx^l‖² / ‖dx^{l-1}‖²`.
    pub chi: f64,
    pub chi_se: f64,
}

/// Norm of the input perturbation used to measure length dynamics.
pub const PERTURBATION_NORM: f64 = 1e-4;

/// Per-seed measurement: activities `A^1..A^L` and stretch ratios.
fn measure(model: &Model, a0: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n0 = model.input_width();
    let x0: Array1<f64> = rng::normal_vec(seed, Domain::Inputs, 0, 0, n0).into_iter().map(|z| z * a0.sqrt()).collect();
    let dir = Array1::from(rng::normal_vec(seed, Domain::Perturbation, 0, 0, n0));
    let dx = &dir * (PERTURBATION_NORM / dir.dot(&dir).sqrt());
    let base = model.forward(&x0)?;
    let moved = model.forward(&(&x0 + &dx))?;
    let activities = base.activities()[1..].to_vec();
    let mut prev = dx.dot(&dx);
    let mut ratios = Vec::with_capacity(base.num_layers());
    for (a, b) in base.outputs.iter().zip(&moved.outputs) {
        let d = b - a;
        let sq = d.dot(&d);
        ratios.push(sq / prev);
        prev = sq;
    }
    Ok((activities, ratios))
}

/// Samples `seeds` nets with `build(seed)` and measures activity and the
/// enlargement factor layer by layer on a Gaussian input of activity `a0`.
pub fn monte_carlo<F>(build: F, a0: f64, seeds: usize, master_seed: u64) -> Result<Vec<MonteCarloLayer>>
where
    F: Fn(u64) -> Result<Model> + Sync,
{
    check_activity(a0)?;
    if seeds == 0 {
        return Err(Error::Config("need at least one Monte-Carlo seed".into()));
    }
    let runs: Vec<(Vec<f64>, Vec<f64>)> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let seed = rng::derive_seed(master_seed, s as u64);
            measure(&build(seed)?, a0, seed)
        })
        .collect::<Result<_>>()?;
    let layers = runs[0].0.len();
    Ok((0..layers)
        .map(|k| {
            let acts: Vec<f64> = runs.iter().map(|r| r.0[k]).collect();
            let chis: Vec<f64> = runs.iter().map(|r| r.1[k]).collect();
            let (activity, activity_se) = stats::batch_mean_se(&acts);
            let (chi, chi_se) = stats::batch_mean_se(&chis);
            MonteCarloLayer { layer: k + 1, activity, activity_se, chi, chi_se }
        })
        .collect())
}

/// Monte-Carlo counterpart of [`propagate`] for plain nets drawn from `config`.
pub fn monte_carlo_plain(config: &NetConfig, a0: f64, seeds: usize) -> Result<Vec<MonteCarloLayer>> {
    monte_carlo(
        |seed| {
            let mut c = config.clone();
            c.seed = seed;
            Ok(Model::Plain(nets::init_random(&c)?))
        },
        a0,
        seeds,
        config.seed,
    )
}

/// Monte-Carlo counterpart of [`propagate_resnet`].
pub fn monte_carlo_resnet(config: &ResNetConfig, a0: f64, seeds: usize) -> Result<Vec<MonteCarloLayer>> {
    monte_carlo(
        |seed| {
            let mut c = config.clone();
            c.base.seed = seed;
            Ok(Model::Residual(ResNet::init_random(&c)?))
        },
        a0,
        seeds,
        config.base.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn linear_identity_map() {
        let s = activity_step(1.0, 1.0, 0.0, ActivationKind::Linear).unwrap();
        assert_eq!(s.activity, 1.0);
        assert_eq!(s.tau2, 1.0);
        assert_eq!(chi_step(0.3, 0.81, 0.0, ActivationKind::Linear).unwrap(), 0.81);
    }

    #[test]
    fn relu_edge_of_chaos() {
        for a in [0.1, 1.0, 7.5] {
            let s = activity_step(a, 2.0, 0.0, ActivationKind::Relu).unwrap();
            assert_abs_diff_eq!(s.activity, a, epsilon = 1e-15);
            assert_eq!(chi_step(a, 2.0, 0.0, ActivationKind::Relu).unwrap(), 1.0);
        }
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(activity_step(-1.0, 1.0, 0.0, ActivationKind::Tanh).is_err());
        assert!(chi_step(1.0, -1.0, 0.0, ActivationKind::Tanh).is_err());
        assert!(chi_step(1.0, 1.0, -0.1, ActivationKind::Tanh).is_err());
    }

    #[test]
    fn linear_chi_products() {
        let cfg = NetConfig::new(vec![10; 6], 0.81, 0.0, ActivationKind::Linear, 0).unwrap();
        let t = propagate(&cfg, 1.0).unwrap();
        assert_abs_diff_eq!(t.layers[0].chi_prod, 0.81f64.powi(5), epsilon = 1e-15);
        assert_abs_diff_eq!(t.layers[0].chi_prod, 0.348_678_440_1, epsilon = 1e-10);
        for w in t.layers.windows(2) {
            assert_abs_diff_eq!(w[0].chi_prod, w[1].chi_prod * w[0].chi, epsilon = 1e-15);
        }
        assert!(t.layers.iter().all(|l| l.regime == Regime::Ordered));
    }

    #[test]
    fn unit_chi_gives_unit_products() {
        let cfg = NetConfig::new(vec![10; 5], 2.0, 0.0, ActivationKind::Relu, 0).unwrap();
        let t = propagate(&cfg, 1.0).unwrap();
        assert!(t.layers.iter().all(|l| l.chi_prod == 1.0 && l.regime == Regime::Critical));
    }

    #[test]
    fn tau2_identity_holds() {
        let cfg = NetConfig::with_layer_variances(vec![5; 4], vec![1.5, 2.0, 0.7], vec![0.1, 0.0, 0.3], ActivationKind::Tanh, 0).unwrap();
        let t = propagate(&cfg, 1.3).unwrap();
        let mut prev = 1.3;
        for (k, l) in t.layers.iter().enumerate() {
            assert_eq!(l.tau2, cfg.sigma_w2[k] * prev + cfg.sigma_b2[k]);
            prev = l.activity;
        }
    }

    #[test]
    fn resnet_steps() {
        let same = resnet_activity_step(2.5, 1.0, 0.0, 0.0, 1.0, ActivationKind::Tanh).unwrap();
        assert_eq!(same, 2.5);
        let grow = resnet_activity_step(2.0, 1.0, 0.0, 1.0, 0.5, ActivationKind::Linear).unwrap();
        assert_abs_diff_eq!(grow, 2.5, epsilon = 1e-15);
        assert_eq!(resnet_chi(1.0, 1.0, 0.0), 1.0);
        assert_eq!(resnet_chi(1.0, 0.5, 0.5), 1.0);
        assert_eq!(resnet_chi(0.0, 3.0, 0.9), 0.9);
    }

    #[test]
    fn resnet_divergence_flag() {
        let base = NetConfig::new(vec![8; 6], 1.0, 0.0, ActivationKind::Linear, 0).unwrap();
        let t = propagate_resnet(&ResNetConfig::new(base.clone(), 1.0, 1.0).unwrap(), 1.0).unwrap();
        assert!(t.diverging);
        assert!(t.activities().windows(2).all(|w| w[1] > w[0]));
        let settled = propagate_resnet(&ResNetConfig::new(base.clone(), 0.2, 0.5).unwrap(), 1.0).unwrap();
        assert!(!settled.diverging);
        let fp = MeanField::default().resnet_fixed_point(&ResNetConfig::new(base, 1.0, 1.0).unwrap(), 1.0).unwrap();
        assert!(fp.diverged && !fp.converged);
    }

    #[test]
    fn relu_fixed_point_is_immediate() {
        let fp = MeanField::default().fixed_point(2.0, 0.0, ActivationKind::Relu, 0.7).unwrap();
        assert!(fp.converged);
        assert_abs_diff_eq!(fp.activity, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_is_converged_at_64_nodes() {
        let q64 = GaussianIntegrator::new(64);
        let q128 = GaussianIntegrator::new(128);
        let (m64, m128) = (MeanField::with_integrator(&q64), MeanField::with_integrator(&q128));
        for act in ActivationKind::ALL {
            for tau2 in [1e-4, 0.01, 0.5, 1.0, 2.0, 4.0, 10.0, 30.0, 60.0, 100.0] {
                let tau = f64::sqrt(tau2);
                let da = (m64.square_mean(act, tau) - m128.square_mean(act, tau)).abs();
                let dc = (m64.derivative_square_mean(act, tau) - m128.derivative_square_mean(act, tau)).abs();
                assert!(da < 1e-10 && dc < 1e-10, "{act} τ²={tau2}: ΔA={da:e} Δχ={dc:e}");
            }
        }
    }
}
