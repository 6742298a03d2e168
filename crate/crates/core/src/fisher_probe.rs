//! Monte-Carlo Fisher information of random nets under Gaussian input, and
//! experiments on its block structure.
//!
//! Parameters are flattened layer by layer and unit by unit; each unit owns
//! a contiguous block of `fan_in + 1` entries, its input weights followed by
//! its bias (the same order as [`NetworkParams::to_flat`]).
//!
//! [`NetworkParams::to_flat`]: crate::nets::NetworkParams::to_flat

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::nets::{ForwardTrace, Model, NetConfig};
use crate::rng::{self, Domain};
use crate::stats::{PairwiseAccumulator, MC_GROUPS};

pub mod decay;
pub mod domino;
pub mod nonclosure;
pub mod selfavg;

pub use decay::{block_decay_scan, block_rms_of, exact_block_rms, sampled_block_rms, BlockDecayReport, BlockRms, DecayOptions, DecayRow, DecayTemplate};
pub use domino::{domino_check, DominoReport};
pub use nonclosure::{nonclosure_demo, nonclosure_from, NonclosureReport};
pub use selfavg::{self_averaging_check, SelfAveragingOptions, SelfAveragingReport};

/// Default refusal threshold for materialising a dense Fisher matrix.
pub const DEFAULT_PARAM_CAP: usize = 20_000;

/// Samples per work item; fixed so results do not depend on thread count.
const CHUNK: usize = 128;

/// Position of one parameter: layer (0-based), unit within the layer, and
/// input slot, where slot `fan_in` is the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamIndex {
    pub layer: usize,
    pub unit: usize,
    pub input_slot: usize,
}

/// Bijection between [`ParamIndex`] and flat positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    fan_in: Vec<usize>,
    units: Vec<usize>,
    offsets: Vec<usize>,
}

impl ParamLayout {
    pub fn from_widths(widths: &[usize]) -> Self {
        let fan_in: Vec<usize> = widths[..widths.len().saturating_sub(1)].to_vec();
        let units: Vec<usize> = widths.iter().skip(1).copied().collect();
        let mut offsets = Vec::with_capacity(units.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for (f, u) in fan_in.iter().zip(&units) {
            total += (f + 1) * u;
            offsets.push(total);
        }
        Self { fan_in, units, offsets }
    }

    pub fn from_config(config: &NetConfig) -> Self {
        Self::from_widths(&config.layer_widths)
    }

    pub fn num_params(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn num_layers(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self, layer: usize) -> usize {
        self.units[layer]
    }

    pub fn fan_in(&self, layer: usize) -> usize {
        self.fan_in[layer]
    }

    /// Slots per unit, `fan_in + 1`.
    pub fn slots(&self, layer: usize) -> usize {
        self.fan_in[layer] + 1
    }

    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        self.offsets[layer]..self.offsets[layer + 1]
    }

    pub fn block_range(&self, layer: usize, unit: usize) -> Range<usize> {
        let start = self.offsets[layer] + unit * self.slots(layer);
        start..start + self.slots(layer)
    }

    pub fn flat(&self, idx: ParamIndex) -> Result<usize> {
        if idx.layer >= self.num_layers() {
            return Err(Error::LayerIndex { index: idx.layer, layers: self.num_layers() });
        }
        if idx.unit >= self.units[idx.layer] {
            return Err(Error::Dimension { what: "unit index", expected: self.units[idx.layer], got: idx.unit });
        }
        if idx.input_slot > self.fan_in[idx.layer] {
            return Err(Error::Dimension { what: "input slot", expected: self.fan_in[idx.layer] + 1, got: idx.input_slot });
        }
        Ok(self.block_range(idx.layer, idx.unit).start + idx.input_slot)
    }

    pub fn index(&self, flat: usize) -> Result<ParamIndex> {
        if flat >= self.num_params() {
            return Err(Error::Dimension { what: "flat parameter index", expected: self.num_params(), got: flat });
        }
        let layer = self.offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - self.offsets[layer];
        let slots = self.slots(layer);
        Ok(ParamIndex { layer, unit: local / slots, input_slot: local % slots })
    }

    pub fn is_bias(&self, idx: ParamIndex) -> bool {
        idx.input_slot == self.fan_in[idx.layer]
    }
}

/// `S^k = ∂x^L/∂u^{k+1}` for every layer `k`, each of shape `n_L × n_{k+1}`.
pub fn output_sensitivities(model: &Model, trace: &ForwardTrace) -> Vec<Array2<f64>> {
    let params = model.params();
    let layers = params.num_layers();
    let mut out = vec![Array2::zeros((0, 0)); layers];
    let mut e = Array2::<f64>::eye(model.output_width());
    for k in (0..layers).rev() {
        let d = trace.derivatives[k].view().insert_axis(Axis(0));
        let sens = match model {
            Model::Plain(_) => &e * &d,
            Model::Residual(r) => e.dot(&r.mixers[k]) * &d,
        };
        e = match model {
            Model::Plain(_) => sens.dot(&params.weights[k]),
            Model::Residual(r) => sens.dot(&params.weights[k]) + &(&e * r.config.alpha),
        };
        out[k] = sens;
    }
    out
}

/// `∂x^L_i / ∂θ` for every output unit `i` (rows) and parameter `θ` (columns),
/// by reverse accumulation through the layer Jacobians.
pub fn grad_output_wrt_params(model: &Model, trace: &ForwardTrace) -> Result<Array2<f64>> {
    let layout = ParamLayout::from_config(&model.params().config);
    if trace.num_layers() != layout.num_layers() {
        return Err(Error::Dimension { what: "trace layers", expected: layout.num_layers(), got: trace.num_layers() });
    }
    let sens = output_sensitivities(model, trace);
    let mut out = Array2::zeros((model.output_width(), layout.num_params()));
    fill_gradients(&layout, trace, &sens, out.view_mut());
    Ok(out)
}

fn fill_gradients(layout: &ParamLayout, trace: &ForwardTrace, sens: &[Array2<f64>], mut out: ndarray::ArrayViewMut2<f64>) {
    for (k, s) in sens.iter().enumerate() {
        let x = trace.layer_input(k);
        let f = layout.fan_in(k);
        for j in 0..layout.units(k) {
            let r = layout.block_range(k, j);
            for (i, mut row) in out.outer_iter_mut().enumerate() {
                let sij = s[[i, j]];
                let mut block = row.slice_mut(s![r.clone()]);
                block.slice_mut(s![..f]).assign(&(x * sij));
                block[f] = sij;
            }
        }
    }
}

/// Knobs for [`estimate_fisher_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherOptions {
    /// Refuse to materialise a matrix with more parameters than this.
    pub param_cap: usize,
    /// Inputs are `N(0, input_scale² I)`.
    pub input_scale: f64,
}

impl Default for FisherOptions {
    fn default() -> Self {
        Self { param_cap: DEFAULT_PARAM_CAP, input_scale: 1.0 }
    }
}

/// Dense Monte-Carlo Fisher matrix with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct EmpiricalFisher {
    pub matrix: Array2<f64>,
    /// Batch-means standard error of each entry (10 groups); `None` when
    /// there are fewer than two samples.
    pub standard_errors: Option<Array2<f64>>,
    pub layout: ParamLayout,
    pub n_samples: usize,
    pub input_scale: f64,
    pub input_dim: usize,
}

impl EmpiricalFisher {
    pub fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    /// `(layer, unit) → index range` for every unit.
    pub fn block_map(&self) -> Vec<((usize, usize), Range<usize>)> {
        (0..self.layout.num_layers())
            .flat_map(|k| (0..self.layout.units(k)).map(move |j| (k, j)))
            .map(|(k, j)| ((k, j), self.layout.block_range(k, j)))
            .collect()
    }

    pub fn block(&self, layer: usize, unit: usize) -> ArrayView2<'_, f64> {
        let r = self.layout.block_range(layer, unit);
        self.matrix.slice(s![r.clone(), r])
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diag().sum()
    }

    /// Largest `|G_ij - G_ji|` relative to the largest entry.
    pub fn relative_asymmetry(&self) -> f64 {
        let scale = self.matrix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            0.0
        } else {
            linalg::asymmetry(&self.matrix) / scale
        }
    }

    /// No eigenvalue below `-1e-8 · trace`.
    pub fn is_psd(&self) -> bool {
        linalg::is_psd_with_floor(&self.matrix, 1e-8 * self.trace().max(f64::MIN_POSITIVE))
    }
}

/// Standard-normal input for sample `index`.
pub(crate) fn sample_input(seed: u64, index: usize, dim: usize, scale: f64) -> Array1<f64> {
    let mut x = Array1::from(rng::normal_vec(seed, Domain::Inputs, index as u64, 0, dim));
    if scale != 1.0 {
        x.mapv_inplace(|v| v * scale);
    }
    x
}

/// Sample ranges of the Monte-Carlo groups used for standard errors.
pub(crate) fn group_ranges(n_samples: usize) -> Vec<Range<usize>> {
    let groups = MC_GROUPS.min(n_samples).max(1);
    (0..groups).map(|g| g * n_samples / groups..(g + 1) * n_samples / groups).collect()
}

pub fn estimate_fisher(model: &Model, n_samples: usize, seed: u64) -> Result<EmpiricalFisher> {
    estimate_fisher_with(model, n_samples, seed, FisherOptions::default())
}

/// `Ĝ = (1/N) Σ_x Σ_i g_i g_iᵀ` with `g_i = ∂x^L_i/∂θ` and `x ~ N(0, s² I)`.
pub fn estimate_fisher_with(model: &Model, n_samples: usize, seed: u64, opts: FisherOptions) -> Result<EmpiricalFisher> {
    if n_samples == 0 {
        return Err(Error::Config("the Fisher estimate needs at least one sample".into()));
    }
    let layout = ParamLayout::from_config(&model.params().config);
    let p = layout.num_params();
    if p > opts.param_cap {
        return Err(Error::TooManyParameters { count: p, cap: opts.param_cap });
    }
    let n0 = model.input_width();
    let n_out = model.output_width();
    let add = |a: &mut Array2<f64>, b: &Array2<f64>| *a += b;

    let mut group_sums = Vec::new();
    for range in group_ranges(n_samples) {
        let mut acc = PairwiseAccumulator::new(add);
        let mut start = range.start;
        while start < range.end {
            let end = (start + CHUNK).min(range.end);
            let rows: Vec<Array2<f64>> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let trace = model.forward(&sample_input(seed, i, n0, opts.input_scale))?;
                    let sens = output_sensitivities(model, &trace);
                    let mut g = Array2::zeros((n_out, p));
                    fill_gradients(&layout, &trace, &sens, g.view_mut());
                    Ok(g)
                })
                .collect::<Result<_>>()?;
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            let jac = ndarray::concatenate(Axis(0), &views).expect("equal widths");
            acc.push(gram(&jac));
            start = end;
        }
        group_sums.push((range.len(), acc.finish().expect("non-empty group")));
    }

    let mut total = Array2::<f64>::zeros((p, p));
    for (_, g) in &group_sums {
        total += g;
    }
    total /= n_samples as f64;
    symmetrize(&mut total);

    let standard_errors = (group_sums.len() >= 2).then(|| {
        let k = group_sums.len() as f64;
        let mut var = Array2::<f64>::zeros((p, p));
        for (len, g) in &group_sums {
            Zip::from(&mut var).and(g).and(&total).for_each(|v, &s, &m| {
                let d = s / *len as f64 - m;
                *v += d * d;
            });
        }
        var.mapv(|v| (v / (k * (k - 1.0))).sqrt())
    });

    Ok(EmpiricalFisher { matrix: total, standard_errors, layout, n_samples, input_scale: opts.input_scale, input_dim: n0 })
}

/// `JᵀJ`, split over fixed column bands so each band is computed independently.
fn gram(jac: &Array2<f64>) -> Array2<f64> {
    const BAND: usize = 64;
    let p = jac.ncols();
    let bands: Vec<Array2<f64>> = (0..p.div_ceil(BAND))
        .into_par_iter()
        .map(|b| {
            let cols = s![.., b * BAND..((b + 1) * BAND).min(p)];
            jac.slice(cols).t().dot(jac)
        })
        .collect();
    let views: Vec<_> = bands.iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::nets::{self, NetworkParams};
    use ndarray::array;

    #[test]
    fn layout_round_trip() {
        let layout = ParamLayout::from_widths(&[3, 4, 2]);
        assert_eq!(layout.num_params(), 4 * 4 + 2 * 5);
        for flat in 0..layout.num_params() {
            let idx = layout.index(flat).unwrap();
            assert_eq!(layout.flat(idx).unwrap(), flat);
        }
        let b = ParamIndex { layer: 1, unit: 1, input_slot: 4 };
        assert!(layout.is_bias(b));
        assert_eq!(layout.flat(b).unwrap(), layout.num_params() - 1);
        assert!(layout.flat(ParamIndex { layer: 0, unit: 0, input_slot: 3 }).is_ok());
        assert!(layout.flat(ParamIndex { layer: 0, unit: 0, input_slot: 4 }).is_err());
        assert!(layout.index(layout.num_params()).is_err());
    }

    #[test]
    fn gradient_of_identity_layer() {
        let cfg = NetConfig::new(vec![3, 3], 1.0, 0.0, ActivationKind::Linear, 0).unwrap();
        let p = NetworkParams { weights: vec![Array2::eye(3)], biases: vec![Array1::zeros(3)], config: cfg };
        let model = Model::Plain(p);
        let x = array![0.5, -1.0, 2.0];
        let g = grad_output_wrt_params(&model, &model.forward(&x).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g[[i, i * 4 + j]], x[j]);
            }
            assert_eq!(g[[i, i * 4 + 3]], 1.0);
            assert_eq!(g.row(i).iter().filter(|v| **v != 0.0).count(), 4);
        }
    }

    #[test]
    fn gradients_match_backward_pass() {
        let cfg = NetConfig::new(vec![4, 6, 5, 3], 1.7, 0.2, ActivationKind::Tanh, 4).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        let x = sample_input(1, 0, 4, 1.0);
        let trace = model.forward(&x).unwrap();
        let g = grad_output_wrt_params(&model, &trace).unwrap();
        let layout = ParamLayout::from_config(&cfg);
        for i in 0..3 {
            let mut cot = Array1::zeros(3);
            cot[i] = 1.0;
            let bw = model.backward(&trace, &cot).unwrap();
            for k in 0..3 {
                for j in 0..layout.units(k) {
                    let r = layout.block_range(k, j);
                    assert!((g[[i, r.end - 1]] - bw.deltas[k][j]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_linear_unit_without_bias_signal() {
        let cfg = NetConfig::new(vec![2, 1], 1.0, 0.0, ActivationKind::Linear, 0).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        let n = 20_000;
        let f = estimate_fisher(&model, n, 3).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        // Weight block is E[x xᵀ] = I; the bias couples through E[x] = 0.
        let expect = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(linalg::max_abs_diff(&f.matrix, &expect) < tol);
        assert_eq!(f.matrix[[2, 2]], 1.0);
    }

    #[test]
    fn zero_relu_net_has_zero_fisher() {
        let cfg = NetConfig::new(vec![3, 4, 2], 0.0, 0.0, ActivationKind::Relu, 0).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        let f = estimate_fisher(&model, 50, 0).unwrap();
        assert!(f.matrix.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn symmetric_psd_and_thread_independent() {
        let cfg = NetConfig::new(vec![5, 6, 3], 1.5, 0.1, ActivationKind::Tanh, 2).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        let f = estimate_fisher(&model, 300, 9).unwrap();
        assert_eq!(f.relative_asymmetry(), 0.0);
        assert!(f.is_psd());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let g = pool.install(|| estimate_fisher(&model, 300, 9).unwrap());
        assert_eq!(f.matrix, g.matrix);
        assert_eq!(f.block_map().len(), 9);
        assert_eq!(f.block(1, 2).dim(), (7, 7));
    }

    #[test]
    fn cap_is_enforced() {
        let cfg = NetConfig::new(vec![10, 10, 1], 1.0, 0.0, ActivationKind::Tanh, 0).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        let opts = FisherOptions { param_cap: 50, ..Default::default() };
        assert!(matches!(estimate_fisher_with(&model, 10, 0, opts), Err(Error::TooManyParameters { .. })));
    }
}
