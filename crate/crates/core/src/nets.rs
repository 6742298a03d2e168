//! Random deep nets and residual nets: initialisation, forward pass, layer
//! Jacobians and the reverse pass.
//!
//! Layers are indexed from 0. Layer `k` owns `weights[k]` (shape
//! `n_{k+1} × n_k`) and `biases[k]`, reads `x^k` and produces `x^{k+1}`.

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Topology and generation hyperparameters of a plain deep net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// `n_0, n_1, ..., n_L`.
    pub layer_widths: Vec<usize>,
    /// Per-layer weight scale σ²_l; weights have variance σ²_l / n_{l-1}.
    pub sigma_w2: Vec<f64>,
    /// Per-layer bias variance σ²_bl.
    pub sigma_b2: Vec<f64>,
    pub activation: ActivationKind,
    pub seed: u64,
}

impl NetConfig {
    /// Same variances in every layer.
    pub fn new(
        layer_widths: Vec<usize>,
        sigma_w2: f64,
        sigma_b2: f64,
        activation: ActivationKind,
        seed: u64,
    ) -> Result<Self> {
        let layers = layer_widths.len().saturating_sub(1);
        Self::with_layer_variances(layer_widths, vec![sigma_w2; layers], vec![sigma_b2; layers], activation, seed)
    }

    pub fn with_layer_variances(
        layer_widths: Vec<usize>,
        sigma_w2: Vec<f64>,
        sigma_b2: Vec<f64>,
        activation: ActivationKind,
        seed: u64,
    ) -> Result<Self> {
        let cfg = Self { layer_widths, sigma_w2, sigma_b2, activation, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config("need an input width and at least one layer".into()));
        }
        if let Some(pos) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("width n_{pos} is zero")));
        }
        let layers = self.num_layers();
        if self.sigma_w2.len() != layers || self.sigma_b2.len() != layers {
            return Err(Error::Config(format!(
                "expected {layers} per-layer variances, got sigma_w2: {}, sigma_b2: {}",
                self.sigma_w2.len(),
                self.sigma_b2.len()
            )));
        }
        for (name, v) in self.sigma_w2.iter().map(|v| ("sigma_w2", v)).chain(self.sigma_b2.iter().map(|v| ("sigma_b2", v))) {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated config")
    }

    /// Total number of trainable scalars (weights and biases).
    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Weights and biases of a plain net.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub config: NetConfig,
}

impl NetworkParams {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Checks shapes against the config and that all values are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let widths = &self.config.layer_widths;
        if self.weights.len() != self.config.num_layers() || self.biases.len() != self.config.num_layers() {
            return Err(Error::Dimension {
                what: "number of layers",
                expected: self.config.num_layers(),
                got: self.weights.len(),
            });
        }
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.dim() != (widths[k + 1], widths[k]) {
                return Err(Error::Dimension { what: "weight rows", expected: widths[k + 1], got: w.nrows() });
            }
            if b.len() != widths[k + 1] {
                return Err(Error::Dimension { what: "bias length", expected: widths[k + 1], got: b.len() });
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// All parameters flattened layer by layer, unit by unit: the unit's
    /// input weights followed by its bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for (row, bias) in w.outer_iter().zip(b.iter()) {
                out.extend(row.iter());
                out.push(*bias);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.config.num_params() {
            return Err(Error::Dimension { what: "flat parameter vector", expected: self.config.num_params(), got: flat.len() });
        }
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let cols = w.ncols();
            for (mut row, bias) in w.outer_iter_mut().zip(b.iter_mut()) {
                row.assign(&ndarray::ArrayView1::from(&flat[pos..pos + cols]));
                pos += cols;
                *bias = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(seed: u64, layer: usize, rows: usize, cols: usize, variance: f64) -> Array2<f64> {
    if variance == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let sd = variance.sqrt();
    let data: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            rng::normal_vec(seed, Domain::Weights, layer as u64, i as u64, cols)
                .into_iter()
                .map(move |z| z * sd)
        })
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches")
}

/// Draws `W^l ~ N(0, σ²_l / n_{l-1})` and `b^l ~ N(0, σ²_bl)` entrywise.
pub fn init_random(config: &NetConfig) -> Result<NetworkParams> {
    config.validate()?;
    let widths = &config.layer_widths;
    let mut weights = Vec::with_capacity(config.num_layers());
    let mut biases = Vec::with_capacity(config.num_layers());
    for k in 0..config.num_layers() {
        let (rows, cols) = (widths[k + 1], widths[k]);
        weights.push(gaussian_matrix(config.seed, k, rows, cols, config.sigma_w2[k] / cols as f64));
        let bias = if config.sigma_b2[k] == 0.0 {
            Array1::zeros(rows)
        } else {
            let sd = config.sigma_b2[k].sqrt();
            rng::normal_vec(config.seed, Domain::Biases, k as u64, 0, rows).into_iter().map(|z| z * sd).collect()
        };
        biases.push(bias);
    }
    Ok(NetworkParams { weights, biases, config: config.clone() })
}

/// Everything computed on one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array1<f64>,
    /// `u^{k+1}` for each layer `k`.
    pub pre_activations: Vec<Array1<f64>>,
    /// `φ(u^{k+1})`. Equal to `outputs` for plain nets.
    pub activated: Vec<Array1<f64>>,
    /// `φ′(u^{k+1})`.
    pub derivatives: Vec<Array1<f64>>,
    /// `x^{k+1}`.
    pub outputs: Vec<Array1<f64>>,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.outputs.len()
    }

    /// The vector fed into layer `k`, i.e. `x^k`.
    pub fn layer_input(&self, k: usize) -> &Array1<f64> {
        if k == 0 {
            &self.input
        } else {
            &self.outputs[k - 1]
        }
    }

    pub fn output(&self) -> &Array1<f64> {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Mean square activation `A^k` of `x^k`, `k = 0..=L`.
    pub fn activities(&self) -> Vec<f64> {
        std::iter::once(&self.input)
            .chain(&self.outputs)
            .map(|x| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
            .collect()
    }
}

fn check_input(expected: usize, x0: &Array1<f64>) -> Result<()> {
    if x0.len() != expected {
        return Err(Error::Dimension { what: "input vector", expected, got: x0.len() });
    }
    Ok(())
}

/// Plain forward pass `x^{k+1} = φ(W^k x^k + b^k)`.
pub fn forward(params: &NetworkParams, x0: &Array1<f64>) -> Result<ForwardTrace> {
    check_input(params.config.input_width(), x0)?;
    let act = params.config.activation;
    let layers = params.num_layers();
    let mut trace = ForwardTrace {
        input: x0.clone(),
        pre_activations: Vec::with_capacity(layers),
        activated: Vec::with_capacity(layers),
        derivatives: Vec::with_capacity(layers),
        outputs: Vec::with_capacity(layers),
    };
    for k in 0..layers {
        let u = params.weights[k].dot(trace.layer_input(k)) + &params.biases[k];
        let x = u.mapv(|v| act.apply(v));
        trace.derivatives.push(u.mapv(|v| act.derivative(v)));
        trace.pre_activations.push(u);
        trace.activated.push(x.clone());
        trace.outputs.push(x);
    }
    Ok(trace)
}

fn check_layer(k: usize, layers: usize) -> Result<()> {
    if k >= layers {
        return Err(Error::LayerIndex { index: k, layers });
    }
    Ok(())
}

/// `B = ∂x^{k+1}/∂x^k = diag(φ′(u^{k+1})) W^k`.
pub fn layer_jacobian(trace: &ForwardTrace, params: &NetworkParams, k: usize) -> Result<Array2<f64>> {
    check_layer(k, params.num_layers())?;
    let d = &trace.derivatives[k];
    Ok(&params.weights[k] * &d.view().insert_axis(Axis(1)))
}

/// Residual net settings on top of a plain config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub base: NetConfig,
    /// Mixer entries have variance σ²_v / n.
    pub sigma_v2: f64,
    /// Skip-path decay α.
    pub alpha: f64,
}

impl ResNetConfig {
    pub fn new(base: NetConfig, sigma_v2: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { base, sigma_v2, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Also logs a warning for `alpha >= 1`, where activity grows without bound.
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let n = self.base.layer_widths[0];
        if self.base.layer_widths.iter().any(|&w| w != n) {
            return Err(Error::Config("residual blocks need equal widths in every layer".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !self.sigma_v2.is_finite() || self.sigma_v2 < 0.0 {
            return Err(Error::Config(format!("sigma_v2 must be non-negative, got {}", self.sigma_v2)));
        }
        if self.alpha >= 1.0 {
            warn!("alpha = {} >= 1: layer activity diverges with depth", self.alpha);
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.base.layer_widths[0]
    }
}

/// A residual net `x^{k+1} = V^k φ(W^k x^k + b^k) + α x^k` with fixed mixers `V^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResNet {
    pub params: NetworkParams,
    pub mixers: Vec<Array2<f64>>,
    pub config: ResNetConfig,
}

impl ResNet {
    pub fn new(params: NetworkParams, mixers: Vec<Array2<f64>>, config: ResNetConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let n = config.width();
        if mixers.len() != params.num_layers() {
            return Err(Error::Dimension { what: "number of mixers", expected: params.num_layers(), got: mixers.len() });
        }
        if let Some(bad) = mixers.iter().find(|v| v.dim() != (n, n)) {
            return Err(Error::Dimension { what: "mixer size", expected: n, got: bad.nrows().max(bad.ncols()) });
        }
        Ok(Self { params, mixers, config })
    }

    pub fn init_random(config: &ResNetConfig) -> Result<Self> {
        config.validate()?;
        let params = init_random(&config.base)?;
        let n = config.width();
        let mixers = (0..config.base.num_layers())
            .map(|k| {
                let sd = (config.sigma_v2 / n as f64).sqrt();
                if sd == 0.0 {
                    return Array2::zeros((n, n));
                }
                let data: Vec<f64> = (0..n)
                    .into_par_iter()
                    .flat_map_iter(|i| rng::normal_vec(config.base.seed, Domain::Mixers, k as u64, i as u64, n).into_iter().map(move |z| z * sd))
                    .collect();
                Array2::from_shape_vec((n, n), data).expect("shape matches")
            })
            .collect();
        Ok(Self { params, mixers, config: config.clone() })
    }

    pub fn num_layers(&self) -> usize {
        self.params.num_layers()
    }
}

/// Residual forward pass.
pub fn forward_resnet(net: &ResNet, x0: &Array1<f64>) -> Result<ForwardTrace> {
    check_input(net.config.width(), x0)?;
    let act = net.params.config.activation;
    let alpha = net.config.alpha;
    let layers = net.num_layers();
    let mut trace = ForwardTrace {
        input: x0.clone(),
        pre_activations: Vec::with_capacity(layers),
        activated: Vec::with_capacity(layers),
        derivatives: Vec::with_capacity(layers),
        outputs: Vec::with_capacity(layers),
    };
    for k in 0..layers {
        let prev = trace.layer_input(k);
        let u = net.params.weights[k].dot(prev) + &net.params.biases[k];
        let h = u.mapv(|v| act.apply(v));
        let x = net.mixers[k].dot(&h) + &(prev * alpha);
        trace.derivatives.push(u.mapv(|v| act.derivative(v)));
        trace.pre_activations.push(u);
        trace.activated.push(h);
        trace.outputs.push(x);
    }
    Ok(trace)
}

/// `B_ik = Σ_j v_ij φ′(u_j) w_jk + α δ_ik`.
pub fn resnet_layer_jacobian(trace: &ForwardTrace, net: &ResNet, k: usize) -> Result<Array2<f64>> {
    check_layer(k, net.num_layers())?;
    let scaled = &net.params.weights[k] * &trace.derivatives[k].view().insert_axis(Axis(1));
    let mut b = net.mixers[k].dot(&scaled);
    b.diag_mut().mapv_inplace(|v| v + net.config.alpha);
    Ok(b)
}

/// Output of the reverse pass for a given output cotangent `c = ∂f/∂x^L`.
#[derive(Debug, Clone)]
pub struct Backward {
    /// `∂f/∂u^{k+1}` for each layer `k`; the gradient of `f` with respect to
    /// unit `j`'s augmented weights is `deltas[k][j] · (x^k, 1)`.
    pub deltas: Vec<Array1<f64>>,
    /// `∂f/∂x^{k+1}` for each layer `k`.
    pub output_errors: Vec<Array1<f64>>,
    /// `∂f/∂x^0`.
    pub input_error: Array1<f64>,
}

/// Either kind of network; the trainer and the Fisher probe work on both.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Plain(NetworkParams),
    Residual(ResNet),
}

impl Model {
    pub fn params(&self) -> &NetworkParams {
        match self {
            Model::Plain(p) => p,
            Model::Residual(r) => &r.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        match self {
            Model::Plain(p) => p,
            Model::Residual(r) => &mut r.params,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.params().num_layers()
    }

    pub fn activation(&self) -> ActivationKind {
        self.params().config.activation
    }

    pub fn input_width(&self) -> usize {
        self.params().config.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.params().config.output_width()
    }

    pub fn forward(&self, x0: &Array1<f64>) -> Result<ForwardTrace> {
        match self {
            Model::Plain(p) => forward(p, x0),
            Model::Residual(r) => forward_resnet(r, x0),
        }
    }

    pub fn layer_jacobian(&self, trace: &ForwardTrace, k: usize) -> Result<Array2<f64>> {
        match self {
            Model::Plain(p) => layer_jacobian(trace, p, k),
            Model::Residual(r) => resnet_layer_jacobian(trace, r, k),
        }
    }

    /// Reverse accumulation of `cotangent · x^L` through the net.
    pub fn backward(&self, trace: &ForwardTrace, cotangent: &Array1<f64>) -> Result<Backward> {
        if cotangent.len() != self.output_width() {
            return Err(Error::Dimension { what: "output cotangent", expected: self.output_width(), got: cotangent.len() });
        }
        let params = self.params();
        let layers = params.num_layers();
        let mut deltas = vec![Array1::zeros(0); layers];
        let mut output_errors = vec![Array1::zeros(0); layers];
        let mut e = cotangent.clone();
        for k in (0..layers).rev() {
            let d = &trace.derivatives[k];
            let (delta, prev) = match self {
                Model::Plain(_) => {
                    let delta = &e * d;
                    let prev = params.weights[k].t().dot(&delta);
                    (delta, prev)
                }
                Model::Residual(r) => {
                    let delta = r.mixers[k].t().dot(&e) * d;
                    let prev = params.weights[k].t().dot(&delta) + &(&e * r.config.alpha);
                    (delta, prev)
                }
            };
            deltas[k] = delta;
            output_errors[k] = std::mem::replace(&mut e, prev);
        }
        Ok(Backward { deltas, output_errors, input_error: e })
    }
}

impl From<NetworkParams> for Model {
    fn from(p: NetworkParams) -> Self {
        Model::Plain(p)
    }
}

impl From<ResNet> for Model {
    fn from(r: ResNet) -> Self {
        Model::Residual(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_cfg(act: ActivationKind) -> NetConfig {
        NetConfig::new(vec![4, 5, 3], 1.5, 0.1, act, 9).unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(NetConfig::new(vec![3], 1.0, 0.0, ActivationKind::Tanh, 0).is_err());
        assert!(NetConfig::new(vec![3, 0, 2], 1.0, 0.0, ActivationKind::Tanh, 0).is_err());
        assert!(NetConfig::new(vec![3, 2], -1.0, 0.0, ActivationKind::Tanh, 0).is_err());
        let base = NetConfig::new(vec![3, 4], 1.0, 0.0, ActivationKind::Relu, 0).unwrap();
        assert!(ResNetConfig::new(base.clone(), 1.0, 0.5).is_err());
        let square = NetConfig::new(vec![3, 3], 1.0, 0.0, ActivationKind::Relu, 0).unwrap();
        assert!(ResNetConfig::new(square.clone(), 1.0, 1.2).is_err());
        assert!(ResNetConfig::new(square, 1.0, 1.0).is_ok());
    }

    #[test]
    fn zero_bias_variance_gives_exact_zeros() {
        let cfg = NetConfig::new(vec![6, 7, 2], 1.0, 0.0, ActivationKind::Relu, 1).unwrap();
        let p = init_random(&cfg).unwrap();
        for b in &p.biases {
            assert!(b.iter().all(|v| v.to_bits() == 0));
        }
    }

    #[test]
    fn init_is_deterministic_and_thread_independent() {
        let cfg = NetConfig::new(vec![30, 40, 5], 2.0, 0.3, ActivationKind::Tanh, 77).unwrap();
        let a = init_random(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| init_random(&cfg).unwrap());
        assert_eq!(a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn weight_variance_matches_scale() {
        // 10⁶ entries: the sample variance has relative sd √(2/10⁶) ≈ 1.4e-3,
        // so [0.0009, 0.0011] is a 70σ window.
        let cfg = NetConfig::new(vec![1000, 1000], 1.0, 0.0, ActivationKind::Linear, 5).unwrap();
        let p = init_random(&cfg).unwrap();
        let w = &p.weights[0];
        let n = w.len() as f64;
        let m = w.sum() / n;
        let var = w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.0009..=0.0011).contains(&var), "variance {var}");
    }

    #[test]
    fn zero_net_outputs_zero() {
        let cfg = NetConfig::new(vec![3, 4, 2], 0.0, 0.0, ActivationKind::Relu, 0).unwrap();
        let p = init_random(&cfg).unwrap();
        let t = forward(&p, &array![1.0, -2.0, 3.0]).unwrap();
        for x in &t.outputs {
            assert!(x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_linear_net_passes_input_through() {
        let cfg = NetConfig::new(vec![3, 3, 3], 1.0, 0.0, ActivationKind::Linear, 0).unwrap();
        let mut p = init_random(&cfg).unwrap();
        for w in &mut p.weights {
            *w = Array2::eye(3);
        }
        let x0 = array![0.3, -1.0, 2.5];
        let t = forward(&p, &x0).unwrap();
        assert_eq!(t.output(), &x0);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = init_random(&small_cfg(ActivationKind::Tanh)).unwrap();
        assert!(matches!(forward(&p, &array![1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn trace_outputs_are_activations_of_preactivations() {
        let p = init_random(&small_cfg(ActivationKind::Sigmoid)).unwrap();
        let t = forward(&p, &array![0.1, 0.2, -0.3, 0.4]).unwrap();
        for (u, x) in t.pre_activations.iter().zip(&t.outputs) {
            for (a, b) in u.iter().zip(x) {
                assert_eq!(ActivationKind::Sigmoid.apply(*a), *b);
            }
        }
    }

    #[test]
    fn linear_jacobian_is_weight_matrix() {
        let p = init_random(&small_cfg(ActivationKind::Linear)).unwrap();
        let t = forward(&p, &array![0.1, 0.2, -0.3, 0.4]).unwrap();
        for k in 0..2 {
            assert_eq!(layer_jacobian(&t, &p, k).unwrap(), p.weights[k]);
        }
        assert!(matches!(layer_jacobian(&t, &p, 2), Err(Error::LayerIndex { .. })));
    }

    #[test]
    fn relu_jacobian_vanishes_when_all_inactive() {
        let mut p = init_random(&small_cfg(ActivationKind::Relu)).unwrap();
        p.biases[1].fill(-100.0);
        let t = forward(&p, &array![0.1, 0.2, -0.3, 0.4]).unwrap();
        assert!(layer_jacobian(&t, &p, 1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for act in [ActivationKind::Tanh, ActivationKind::Sigmoid, ActivationKind::Linear] {
            let p = init_random(&small_cfg(act)).unwrap();
            let x0 = array![0.5, -0.2, 0.9, -1.1];
            let t = forward(&p, &x0).unwrap();
            let h = 1e-6;
            for k in 0..2 {
                let b = layer_jacobian(&t, &p, k).unwrap();
                let xin = t.layer_input(k).clone();
                for j in 0..xin.len() {
                    let mut plus = xin.clone();
                    let mut minus = xin.clone();
                    plus[j] += h;
                    minus[j] -= h;
                    let f = |x: &Array1<f64>| (p.weights[k].dot(x) + &p.biases[k]).mapv(|v| act.apply(v));
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    for i in 0..fd.len() {
                        assert_abs_diff_eq!(fd[i], b[[i, j]], epsilon = 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn resnet_pure_skip_and_no_skip() {
        let base = NetConfig::new(vec![5, 5, 5, 5], 1.0, 0.1, ActivationKind::Relu, 4).unwrap();
        let skip = ResNet::init_random(&ResNetConfig::new(base.clone(), 0.0, 1.0).unwrap()).unwrap();
        let x0 = array![1.0, -0.5, 0.2, 0.0, 3.0];
        let t = forward_resnet(&skip, &x0).unwrap();
        for x in &t.outputs {
            assert_eq!(x, &x0);
        }
        let mix = ResNet::init_random(&ResNetConfig::new(base, 1.0, 0.0).unwrap()).unwrap();
        let t = forward_resnet(&mix, &x0).unwrap();
        let plain = forward(&mix.params, &x0).unwrap();
        let u0 = &plain.pre_activations[0];
        let expected = mix.mixers[0].dot(&u0.mapv(|v| v.max(0.0)));
        assert_eq!(t.outputs[0], expected);
    }

    #[test]
    fn resnet_jacobian_matches_finite_differences() {
        let base = NetConfig::new(vec![6, 6, 6], 1.2, 0.05, ActivationKind::Tanh, 8).unwrap();
        let net = ResNet::init_random(&ResNetConfig::new(base, 1.0, 0.7).unwrap()).unwrap();
        let x0 = array![0.3, -0.1, 0.8, 0.2, -0.6, 0.4];
        let t = forward_resnet(&net, &x0).unwrap();
        let b = resnet_layer_jacobian(&t, &net, 1).unwrap();
        let xin = t.layer_input(1).clone();
        let f = |x: &Array1<f64>| {
            let u = net.params.weights[1].dot(x) + &net.params.biases[1];
            net.mixers[1].dot(&u.mapv(f64::tanh)) + &(x * 0.7)
        };
        let h = 1e-6;
        for j in 0..6 {
            let mut plus = xin.clone();
            let mut minus = xin.clone();
            plus[j] += h;
            minus[j] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            for i in 0..6 {
                assert_abs_diff_eq!(fd[i], b[[i, j]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_jacobian_product() {
        let p = init_random(&small_cfg(ActivationKind::Tanh)).unwrap();
        let model = Model::Plain(p.clone());
        let t = model.forward(&array![0.5, -0.2, 0.9, -1.1]).unwrap();
        let c = array![1.0, -2.0, 0.5];
        let back = model.backward(&t, &c).unwrap();
        let jac = layer_jacobian(&t, &p, 1).unwrap().dot(&layer_jacobian(&t, &p, 0).unwrap());
        let expected = jac.t().dot(&c);
        for (a, b) in back.input_error.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut p = init_random(&small_cfg(ActivationKind::Relu)).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.config.num_params());
        let doubled: Vec<f64> = flat.iter().map(|v| 2.0 * v).collect();
        p.set_flat(&doubled).unwrap();
        assert_eq!(p.to_flat(), doubled);
    }
}
