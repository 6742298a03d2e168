//! Backward propagation of Kronecker deltas: `Σ_i B_{i j} B_{i j'}` over the
//! output units, with `B = ∂x^L/∂x^m`, is close to `χ^L_{m+1} δ_{jj'}`.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use super::sample_input;
use crate::error::{Error, Result};
use crate::meanfield;
use crate::nets::Model;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DominoReport {
    /// `m`: the layer whose activity `x^m` the products start from (0 = input).
    pub layer: usize,
    pub width: usize,
    pub n_samples: usize,
    /// Mean diagonal of `BᵀB`, averaged over inputs.
    pub diag_mean: f64,
    /// Standard error of `diag_mean` across inputs; NaN for one sample.
    pub diag_se: f64,
    /// Root-mean-square off-diagonal element of `BᵀB`.
    pub offdiag_rms: f64,
    /// `χ^L_{m+1}` from the mean-field recursion with unit input activity.
    pub chi_theory: f64,
}

/// `∂x^L/∂x^m` for one forward pass.
pub fn jacobian_product(model: &Model, trace: &crate::nets::ForwardTrace, m: usize) -> Result<Array2<f64>> {
    let layers = model.num_layers();
    let mut prod = model.layer_jacobian(trace, layers - 1)?;
    for k in (m..layers - 1).rev() {
        prod = prod.dot(&model.layer_jacobian(trace, k)?);
    }
    Ok(prod)
}

pub fn domino_check(model: &Model, m: usize, n_samples: usize, seed: u64) -> Result<DominoReport> {
    let layers = model.num_layers();
    if m >= layers {
        return Err(Error::LayerIndex { index: m, layers });
    }
    if n_samples == 0 {
        return Err(Error::Config("domino check needs at least one sample".into()));
    }
    let width = model.params().config.layer_widths[m];
    let n0 = model.input_width();
    let per_sample: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let trace = model.forward(&sample_input(seed, s, n0, 1.0))?;
            let b = jacobian_product(model, &trace, m)?;
            let gram = b.t().dot(&b);
            let diag: f64 = gram.diag().sum() / width as f64;
            let total_sq: f64 = gram.iter().map(|v| v * v).sum();
            let diag_sq: f64 = gram.diag().iter().map(|v| v * v).sum();
            let off_pairs = (width * width.saturating_sub(1)) as f64;
            let off_ms = if off_pairs > 0.0 { (total_sq - diag_sq) / off_pairs } else { 0.0 };
            Ok((diag, off_ms))
        })
        .collect::<Result<_>>()?;
    let diags: Vec<f64> = per_sample.iter().map(|p| p.0).collect();
    let offs: Vec<f64> = per_sample.iter().map(|p| p.1).collect();
    let (diag_mean, diag_se) = stats::batch_mean_se(&diags);
    let trace = match model {
        Model::Plain(p) => meanfield::propagate(&p.config, 1.0)?,
        Model::Residual(r) => meanfield::propagate_resnet(&r.config, 1.0)?,
    };
    Ok(DominoReport {
        layer: m,
        width,
        n_samples,
        diag_mean,
        diag_se,
        offdiag_rms: stats::mean(&offs).sqrt(),
        chi_theory: trace.chi_product_from(m + 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationKind;
    use crate::nets::{self, NetConfig};

    #[test]
    fn single_linear_layer() {
        let n = 400;
        let cfg = NetConfig::new(vec![n, n], 0.8, 0.0, ActivationKind::Linear, 3).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        let r = domino_check(&model, 0, 1, 0).unwrap();
        assert!((r.diag_mean - 0.8).abs() < 0.05, "{r:?}");
        assert!((r.offdiag_rms / (0.8 / (n as f64).sqrt()) - 1.0).abs() < 0.1, "{r:?}");
        assert_eq!(r.chi_theory, 0.8);
    }

    #[test]
    fn bad_layer_rejected() {
        let cfg = NetConfig::new(vec![4, 4], 1.0, 0.0, ActivationKind::Tanh, 0).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        assert!(domino_check(&model, 1, 1, 0).is_err());
    }
}
