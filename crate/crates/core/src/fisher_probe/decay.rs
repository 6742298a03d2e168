//! Decay of off-unit-block Fisher entries with width.
//!
//! Diagonal entries differ in scale between layers by factors of the
//! width, so every entry `G_ab` is measured relative to the rms diagonal of
//! the two layers it touches, `G_ab / sqrt(d_la d_lb)`. Off-block rms values
//! below are in these units; a block-diagonal Fisher gives 0.
//!
//! Wide nets have far too many entries to materialise, so
//! [`sampled_block_rms`] draws entries uniformly from four strata (diagonal;
//! same layer and slot, different unit; same layer, different unit and slot;
//! different layers), estimates each one by Monte Carlo and subtracts the
//! Monte-Carlo variance from its square before averaging.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{group_ranges, output_sensitivities, sample_input, EmpiricalFisher, ParamLayout, CHUNK};
use crate::activation::ActivationKind;
use crate::config::ResidualSettings;
use crate::error::{Error, Result};
use crate::nets::{self, Model, NetConfig, ResNet, ResNetConfig};
use crate::rng::{self, Domain};
use crate::stats::{self, PairwiseAccumulator};

/// Per-element rms statistics of one Fisher matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockRms {
    /// Raw rms of the diagonal entries.
    pub rms_diag: f64,
    /// Normalised rms over pairs in the same layer but different units.
    pub rms_offblock_same_layer: f64,
    /// Normalised rms over pairs in different layers; NaN for one-layer nets.
    pub rms_offblock_cross_layer: f64,
    /// Normalised rms over all off-unit-block pairs.
    pub rms_offblock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayOptions {
    pub samples: usize,
    pub entries_per_stratum: usize,
    pub seed: u64,
    pub input_scale: f64,
}

impl Default for DecayOptions {
    fn default() -> Self {
        Self { samples: 20_000, entries_per_stratum: 2_000, seed: 0, input_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stratum {
    Diagonal,
    SameSlot,
    OtherSlot,
    CrossLayer,
}

const STRATA: [Stratum; 4] = [Stratum::Diagonal, Stratum::SameSlot, Stratum::OtherSlot, Stratum::CrossLayer];

#[derive(Debug, Clone, Copy)]
struct Coord {
    layer: usize,
    unit: usize,
    slot: usize,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    a: Coord,
    b: Coord,
    stratum: Stratum,
}

fn pairs(m: usize) -> f64 {
    (m * m.saturating_sub(1)) as f64 / 2.0
}

/// Number of unordered entries in each off-block stratum.
fn stratum_weights(layout: &ParamLayout, stratum: Stratum) -> Vec<(Vec<usize>, f64)> {
    let l = layout.num_layers();
    match stratum {
        Stratum::Diagonal => (0..l).map(|k| (vec![k], 1.0)).collect(),
        Stratum::SameSlot => (0..l).map(|k| (vec![k], pairs(layout.units(k)) * layout.slots(k) as f64)).collect(),
        Stratum::OtherSlot => (0..l).map(|k| (vec![k], pairs(layout.units(k)) * (layout.slots(k) * layout.fan_in(k)) as f64)).collect(),
        Stratum::CrossLayer => (0..l)
            .flat_map(|k| (k + 1..l).map(move |k2| (k, k2)))
            .map(|(k, k2)| (vec![k, k2], layout.layer_range(k).len() as f64 * layout.layer_range(k2).len() as f64))
            .collect(),
    }
}

fn distinct_pair<R: Rng>(rng: &mut R, n: usize) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn random_coord<R: Rng>(rng: &mut R, layout: &ParamLayout, layer: usize) -> Coord {
    Coord { layer, unit: rng.random_range(0..layout.units(layer)), slot: rng.random_range(0..layout.slots(layer)) }
}

fn draw_entries(layout: &ParamLayout, per_stratum: usize, seed: u64) -> (Vec<Entry>, [f64; 4]) {
    let mut entries = Vec::new();
    let mut counts = [0.0; 4];
    for (s_idx, &stratum) in STRATA.iter().enumerate() {
        let choices = stratum_weights(layout, stratum);
        let total: f64 = choices.iter().map(|c| c.1).sum();
        counts[s_idx] = total;
        if total <= 0.0 {
            continue;
        }
        let mut rng = rng::stream(seed, Domain::Probe, s_idx as u64, 0);
        if stratum == Stratum::Diagonal {
            for k in 0..layout.num_layers() {
                for _ in 0..per_stratum {
                    let a = random_coord(&mut rng, layout, k);
                    entries.push(Entry { a, b: a, stratum });
                }
            }
            continue;
        }
        let pick = WeightedIndex::new(choices.iter().map(|c| c.1)).expect("positive total");
        for _ in 0..per_stratum {
            let layers = &choices[pick.sample(&mut rng)].0;
            let entry = match stratum {
                Stratum::SameSlot => {
                    let k = layers[0];
                    let (u1, u2) = distinct_pair(&mut rng, layout.units(k));
                    let slot = rng.random_range(0..layout.slots(k));
                    Entry { a: Coord { layer: k, unit: u1, slot }, b: Coord { layer: k, unit: u2, slot }, stratum }
                }
                Stratum::OtherSlot => {
                    let k = layers[0];
                    let (u1, u2) = distinct_pair(&mut rng, layout.units(k));
                    let (s1, s2) = distinct_pair(&mut rng, layout.slots(k));
                    Entry { a: Coord { layer: k, unit: u1, slot: s1 }, b: Coord { layer: k, unit: u2, slot: s2 }, stratum }
                }
                _ => Entry { a: random_coord(&mut rng, layout, layers[0]), b: random_coord(&mut rng, layout, layers[1]), stratum },
            };
            entries.push(entry);
        }
    }
    (entries, counts)
}

/// Estimates [`BlockRms`] from sampled entries without forming the matrix.
pub fn sampled_block_rms(model: &Model, opts: &DecayOptions) -> Result<BlockRms> {
    if opts.samples < 2 || opts.entries_per_stratum == 0 {
        return Err(Error::Config("block rms needs at least two samples and one entry per stratum".into()));
    }
    let layout = ParamLayout::from_config(&model.params().config);
    let (entries, counts) = draw_entries(&layout, opts.entries_per_stratum, opts.seed);
    let n0 = model.input_width();
    let e = entries.len();
    let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);

    let mut group_means: Vec<Vec<f64>> = Vec::new();
    for range in group_ranges(opts.samples) {
        let mut acc = PairwiseAccumulator::new(add);
        let mut start = range.start;
        while start < range.end {
            let end = (start + CHUNK).min(range.end);
            let per_sample: Vec<Vec<f64>> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let trace = model.forward(&sample_input(opts.seed, i, n0, opts.input_scale))?;
                    let sens = output_sensitivities(model, &trace);
                    let value = |c: &Coord| -> (ndarray::ArrayView1<f64>, f64) {
                        let x = if c.slot == layout.fan_in(c.layer) { 1.0 } else { trace.layer_input(c.layer)[c.slot] };
                        (sens[c.layer].column(c.unit), x)
                    };
                    Ok(entries
                        .iter()
                        .map(|en| {
                            let (sa, xa) = value(&en.a);
                            let (sb, xb) = value(&en.b);
                            sa.dot(&sb) * xa * xb
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            acc.push(stats::pairwise_reduce(per_sample, add).expect("non-empty chunk"));
            start = end;
        }
        let sum = acc.finish().expect("non-empty group");
        group_means.push(sum.into_iter().map(|v| v / range.len() as f64).collect());
    }

    // Bias-corrected squares: E[Ĝ²] = G² + SE².
    let g = group_means.len() as f64;
    let squares: Vec<f64> = (0..e)
        .map(|j| {
            let col: Vec<f64> = group_means.iter().map(|m| m[j]).collect();
            let m = stats::mean(&col);
            let var_mean = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (g * (g - 1.0));
            m * m - var_mean
        })
        .collect();

    let layers = layout.num_layers();
    let mut diag_sq = vec![Vec::new(); layers];
    for (en, q) in entries.iter().zip(&squares) {
        if en.stratum == Stratum::Diagonal {
            diag_sq[en.a.layer].push(*q);
        }
    }
    let diag_ms: Vec<f64> = diag_sq.iter().map(|v| stats::mean(v).max(f64::MIN_POSITIVE)).collect();
    let weights: Vec<f64> = (0..layers).map(|k| layout.layer_range(k).len() as f64).collect();
    let rms_diag = (diag_ms.iter().zip(&weights).map(|(d, w)| d * w).sum::<f64>() / weights.iter().sum::<f64>()).sqrt();

    let mut stratum_mean = [f64::NAN; 4];
    for (s_idx, &stratum) in STRATA.iter().enumerate().skip(1) {
        let vals: Vec<f64> = entries
            .iter()
            .zip(&squares)
            .filter(|(en, _)| en.stratum == stratum)
            .map(|(en, q)| q / (diag_ms[en.a.layer] * diag_ms[en.b.layer]).sqrt())
            .collect();
        if !vals.is_empty() {
            stratum_mean[s_idx] = stats::mean(&vals);
        }
    }
    let combine = |ids: &[usize]| -> f64 {
        let total: f64 = ids.iter().map(|&i| counts[i]).sum();
        if total == 0.0 {
            return f64::NAN;
        }
        let ms: f64 = ids.iter().filter(|&&i| counts[i] > 0.0).map(|&i| counts[i] * stratum_mean[i]).sum::<f64>() / total;
        ms.max(0.0).sqrt()
    };
    Ok(BlockRms {
        rms_diag,
        rms_offblock_same_layer: combine(&[1, 2]),
        rms_offblock_cross_layer: combine(&[3]),
        rms_offblock: combine(&[1, 2, 3]),
    })
}

/// The same statistics computed over every entry of a dense estimate.
pub fn exact_block_rms(fisher: &EmpiricalFisher) -> BlockRms {
    block_rms_of(&fisher.matrix, &fisher.layout)
}

/// [`BlockRms`] over every entry of a dense matrix laid out as `layout`.
pub fn block_rms_of(m: &Array2<f64>, layout: &ParamLayout) -> BlockRms {
    let p = layout.num_params();
    let layer_of: Vec<usize> = (0..layout.num_layers()).flat_map(|k| std::iter::repeat_n(k, layout.layer_range(k).len())).collect();
    let unit_of: Vec<usize> = (0..p).map(|i| layout.index(i).expect("in range").unit).collect();
    let diag_ms: Vec<f64> = (0..layout.num_layers())
        .map(|k| {
            let r = layout.layer_range(k);
            r.clone().map(|i| m[[i, i]].powi(2)).sum::<f64>() / r.len() as f64
        })
        .collect();
    let rms_diag = ((0..p).map(|i| m[[i, i]].powi(2)).sum::<f64>() / p as f64).sqrt();
    let (mut same, mut same_n, mut cross, mut cross_n) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..p {
        for j in i + 1..p {
            let (li, lj) = (layer_of[i], layer_of[j]);
            let v = m[[i, j]].powi(2) / (diag_ms[li] * diag_ms[lj]).sqrt();
            if li != lj {
                cross += v;
                cross_n += 1.0;
            } else if unit_of[i] != unit_of[j] {
                same += v;
                same_n += 1.0;
            }
        }
    }
    let rms = |s: f64, n: f64| if n == 0.0 { f64::NAN } else { (s / n).sqrt() };
    BlockRms {
        rms_diag,
        rms_offblock_same_layer: rms(same, same_n),
        rms_offblock_cross_layer: rms(cross, cross_n),
        rms_offblock: rms(same + cross, same_n + cross_n),
    }
}

/// Recipe for the family of nets scanned over width `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayTemplate {
    /// Number of weight layers.
    pub layers: usize,
    /// Output width of plain nets; residual nets keep width `n` throughout.
    pub output_width: usize,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub activation: ActivationKind,
    pub seed: u64,
    pub residual: Option<ResidualSettings>,
}

impl DecayTemplate {
    pub fn plain(layers: usize, output_width: usize, sigma_w2: f64, sigma_b2: f64, activation: ActivationKind, seed: u64) -> Self {
        Self { layers, output_width, sigma_w2, sigma_b2, activation, seed, residual: None }
    }

    pub fn build(&self, n: usize) -> Result<Model> {
        if self.layers == 0 {
            return Err(Error::Config("template needs at least one weight layer".into()));
        }
        match self.residual {
            None => {
                let mut widths = vec![n; self.layers];
                widths.push(self.output_width);
                let cfg = NetConfig::new(widths, self.sigma_w2, self.sigma_b2, self.activation, self.seed)?;
                Ok(Model::Plain(nets::init_random(&cfg)?))
            }
            Some(r) => {
                let cfg = NetConfig::new(vec![n; self.layers + 1], self.sigma_w2, self.sigma_b2, self.activation, self.seed)?;
                Ok(Model::Residual(ResNet::init_random(&ResNetConfig::new(cfg, r.sigma_v2, r.alpha)?)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRow {
    pub width: usize,
    #[serde(flatten)]
    pub rms: BlockRms,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDecayReport {
    pub rows: Vec<DecayRow>,
    /// Least-squares slope of `log rms_offblock` against `log n`.
    pub slope: f64,
    pub slope_same_layer: f64,
    /// NaN when the template has a single layer.
    pub slope_cross_layer: f64,
}

/// Measures [`BlockRms`] at each width and fits the log-log slope.
pub fn block_decay_scan(widths: &[usize], template: &DecayTemplate, opts: &DecayOptions) -> Result<BlockDecayReport> {
    if widths.len() < 3 {
        return Err(Error::Config(format!("a decay scan needs at least 3 widths, got {}", widths.len())));
    }
    let rows = widths
        .iter()
        .map(|&n| Ok(DecayRow { width: n, rms: sampled_block_rms(&template.build(n)?, opts)? }))
        .collect::<Result<Vec<_>>>()?;
    let logn: Vec<f64> = rows.iter().map(|r| (r.width as f64).ln()).collect();
    let fit = |f: fn(&BlockRms) -> f64| -> f64 {
        let ys: Vec<f64> = rows.iter().map(|r| f(&r.rms).ln()).collect();
        if ys.iter().all(|y| y.is_finite()) {
            stats::linear_fit(&logn, &ys).0
        } else {
            f64::NAN
        }
    };
    Ok(BlockDecayReport {
        slope: fit(|r| r.rms_offblock),
        slope_same_layer: fit(|r| r.rms_offblock_same_layer),
        slope_cross_layer: fit(|r| r.rms_offblock_cross_layer),
        rows,
    })
}
