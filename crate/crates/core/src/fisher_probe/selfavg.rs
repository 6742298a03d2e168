//! Decoupling of `E[f(u) w_i w_j]` into `E[f(u)] E[w_i w_j]` for a wide
//! random unit `u = w·x`, with `f = φ′²`, `x` fixed and `w ~ N(0, σ²/n · I)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::activation::ActivationKind;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::stats::{self, PairwiseAccumulator};

use super::group_ranges;

const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfAveragingOptions {
    pub samples: usize,
    pub sigma_w2: f64,
    pub seed: u64,
}

impl Default for SelfAveragingOptions {
    fn default() -> Self {
        Self { samples: 100_000, sigma_w2: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfAveragingReport {
    pub n: usize,
    pub activation: ActivationKind,
    pub samples: usize,
    pub mean_f: f64,
    /// Gap `E[f w_i w_j] - E[f] E[w_i w_j]` for disjoint pairs `(2t, 2t+1)`.
    pub offdiag_gaps: Vec<f64>,
    pub offdiag_se: Vec<f64>,
    /// Gap for `i = j`, every unit.
    pub diag_gaps: Vec<f64>,
    pub diag_se: Vec<f64>,
    /// Fraction of off-diagonal gaps within 3 standard errors of zero.
    pub offdiag_within_3se: f64,
    /// Rms of the raw `i = j` gaps.
    pub diag_gap_scale: f64,
    /// Rms of `i = j` gaps in units of `E[f] σ²/n`.
    pub diag_relative_rms: f64,
    /// Rms Monte-Carlo noise of the same, in the same units.
    pub diag_relative_noise: f64,
    /// `sqrt(max(relative² - noise², 0))`: the part not explained by noise.
    pub diag_relative_excess: f64,
    /// `5 / n`.
    pub bound: f64,
    pub within_bound: bool,
}

/// Sufficient statistics per Monte-Carlo group:
/// `[count, Σf, (Σ f w_i², Σ w_i²) per unit, (Σ f w_i w_j, Σ w_i w_j) per pair]`.
fn stats_len(n: usize) -> usize {
    2 + 2 * n + 2 * (n / 2)
}

fn accumulate(out: &mut [f64], w: &[f64], f: f64) {
    let n = w.len();
    out[0] += 1.0;
    out[1] += f;
    for (i, &wi) in w.iter().enumerate() {
        let sq = wi * wi;
        out[2 + 2 * i] += f * sq;
        out[3 + 2 * i] += sq;
    }
    let base = 2 + 2 * n;
    for t in 0..n / 2 {
        let p = w[2 * t] * w[2 * t + 1];
        out[base + 2 * t] += f * p;
        out[base + 2 * t + 1] += p;
    }
}

pub fn self_averaging_check(n: usize, act: ActivationKind, opts: &SelfAveragingOptions) -> Result<SelfAveragingReport> {
    if n < 100 {
        return Err(Error::Config(format!("self-averaging check needs n >= 100, got {n}")));
    }
    if opts.samples < 2 || !(opts.sigma_w2 > 0.0) {
        return Err(Error::Config("self-averaging check needs >= 2 samples and sigma_w2 > 0".into()));
    }
    let x = rng::normal_vec(opts.seed, Domain::Inputs, 0, 0, n);
    let sd = (opts.sigma_w2 / n as f64).sqrt();
    let len = stats_len(n);
    let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(p, q)| *p += q);

    let mut groups = Vec::new();
    for range in group_ranges(opts.samples) {
        let mut acc = PairwiseAccumulator::new(add);
        let starts: Vec<usize> = range.clone().step_by(CHUNK).collect();
        let chunks: Vec<Vec<f64>> = starts
            .into_par_iter()
            .map(|start| {
                let mut out = vec![0.0; len];
                let mut w = vec![0.0; n];
                for s in start..(start + CHUNK).min(range.end) {
                    rng::fill_normal(opts.seed, Domain::Probe, s as u64, 0, &mut w);
                    w.iter_mut().for_each(|v| *v *= sd);
                    let u: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                    accumulate(&mut out, &w, act.derivative(u).powi(2));
                }
                out
            })
            .collect();
        chunks.into_iter().for_each(|c| acc.push(c));
        groups.push(acc.finish().expect("non-empty group"));
    }

    let gap = |s: &[f64]| s[2] / s[0] - (s[1] / s[0]) * (s[3] / s[0]);
    let entry = |i_fw: usize| -> (f64, f64) {
        let per_group: Vec<Vec<f64>> = groups.iter().map(|g| vec![g[0], g[1], g[i_fw], g[i_fw + 1]]).collect();
        stats::jackknife(&per_group, gap)
    };
    let (diag_gaps, diag_se): (Vec<f64>, Vec<f64>) = (0..n).map(|i| entry(2 + 2 * i)).unzip();
    let (offdiag_gaps, offdiag_se): (Vec<f64>, Vec<f64>) = (0..n / 2).map(|t| entry(2 + 2 * n + 2 * t)).unzip();

    let total_count: f64 = groups.iter().map(|g| g[0]).sum();
    let mean_f = groups.iter().map(|g| g[1]).sum::<f64>() / total_count;
    let within = offdiag_gaps.iter().zip(&offdiag_se).filter(|(g, s)| g.abs() <= 3.0 * **s).count();
    let unit = mean_f * opts.sigma_w2 / n as f64;
    let diag_relative_rms = stats::rms(&diag_gaps) / unit;
    let diag_relative_noise = stats::rms(&diag_se) / unit;
    let diag_relative_excess = (diag_relative_rms.powi(2) - diag_relative_noise.powi(2)).max(0.0).sqrt();
    let bound = 5.0 / n as f64;
    Ok(SelfAveragingReport {
        n,
        activation: act,
        samples: opts.samples,
        mean_f,
        offdiag_within_3se: within as f64 / offdiag_gaps.len() as f64,
        diag_gap_scale: stats::rms(&diag_gaps),
        diag_relative_rms,
        diag_relative_noise,
        diag_relative_excess,
        bound,
        within_bound: diag_relative_excess < bound,
        offdiag_gaps,
        offdiag_se,
        diag_gaps,
        diag_se,
    })
}
