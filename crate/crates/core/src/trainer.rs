//! SGD and unit-wise natural-gradient training on teacher-student
//! regression tasks, for plain and residual nets.
//!
//! The loss of one sample is `½‖y - x^L‖²`. Reverse accumulation of the
//! error `e = y - x^L` gives each unit `j` of layer `k` a scalar
//! `δ_j = ∂(-l)/∂u_j`, and the descent direction for its augmented weights
//! `w* = (w, b)` is `δ_j x*` with `x* = (x^k, 1)`. SGD moves along the batch
//! mean of that direction; the unit-wise natural gradient first applies the
//! unit's closed-form `G⁻¹`.

use std::collections::VecDeque;
use std::time::Instant;

use log::warn;
use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::nets::{self, Backward, ForwardTrace, Model, NetConfig, NetworkParams, ResNet, ResNetConfig};
use crate::rng::{self, Domain};
use crate::stats;
use crate::unit_fisher::{self, UnitFisherCoeffs, UnitWeights};

/// Relative tolerance of the periodic closed-form vs dense-solve check.
pub const SPOT_CHECK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[serde(rename = "ungd")]
    UnitNgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::UnitNgd => "ungd",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "ungd" | "unit-ngd" | "ngd" => Ok(OptimizerKind::UnitNgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (expected sgd or ungd)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub batch_size: usize,
    /// Tikhonov term added to `A00` and `Ann`.
    pub damping: f64,
    /// Average the last this many iterates at the end of training.
    pub polyak_window: Option<usize>,
    /// Multiply the bias update by the current bias, as printed in the
    /// original update formula.
    pub compat_eq68_w0: bool,
    /// Compare closed-form and dense solves on every unit every this many steps; 0 disables.
    pub check_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::UnitNgd,
            eta: 0.01,
            batch_size: 32,
            damping: 0.0,
            polyak_window: None,
            compat_eq68_w0: false,
            check_every: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, eta: f64, batch_size: usize) -> Self {
        Self { kind, eta, batch_size, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive and finite, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::Config(format!("damping must be non-negative, got {}", self.damping)));
        }
        if self.polyak_window == Some(0) {
            return Err(Error::Config("Polyak window must be at least 1".into()));
        }
        Ok(())
    }
}

/// One regression sample and its current loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSample {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub loss: f64,
}

impl LossSample {
    pub fn evaluate(model: &Model, x: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        let loss = loss(model, &x, &y)?;
        Ok(Self { x, y, loss })
    }
}

/// Inputs and targets, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Dimension { what: "batch targets", expected: inputs.nrows(), got: targets.nrows() });
        }
        if inputs.nrows() == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Targets produced by a frozen random teacher on standard-normal inputs.
#[derive(Debug, Clone)]
pub struct TeacherStudent {
    pub teacher: Model,
    pub seed: u64,
}

/// Stream key reserved for the evaluation set.
const EVAL_KEY: u64 = u64::MAX;

impl TeacherStudent {
    pub fn new(teacher: Model, seed: u64) -> Self {
        Self { teacher, seed }
    }

    /// Teacher, student and data stream all derive from `seed`; the student
    /// shares the teacher's architecture but has independent weights.
    pub fn plain(config: &NetConfig, seed: u64) -> Result<(Model, Self)> {
        let mut teacher_cfg = config.clone();
        teacher_cfg.seed = rng::derive_seed(seed, 1);
        let mut student_cfg = config.clone();
        student_cfg.seed = rng::derive_seed(seed, 2);
        let teacher = Model::Plain(nets::init_random(&teacher_cfg)?);
        let student = Model::Plain(nets::init_random(&student_cfg)?);
        Ok((student, Self::new(teacher, rng::derive_seed(seed, 3))))
    }

    pub fn residual(config: &ResNetConfig, seed: u64) -> Result<(Model, Self)> {
        let mut teacher_cfg = config.clone();
        teacher_cfg.base.seed = rng::derive_seed(seed, 1);
        let mut student_cfg = config.clone();
        student_cfg.base.seed = rng::derive_seed(seed, 2);
        let teacher = Model::Residual(ResNet::init_random(&teacher_cfg)?);
        let student = Model::Residual(ResNet::init_random(&student_cfg)?);
        Ok((student, Self::new(teacher, rng::derive_seed(seed, 3))))
    }

    fn draw(&self, key: u64, size: usize) -> Result<Batch> {
        let n0 = self.teacher.input_width();
        let n_out = self.teacher.output_width();
        let mut inputs = Array2::zeros((size, n0));
        let mut targets = Array2::zeros((size, n_out));
        for i in 0..size {
            let x = Array1::from(rng::normal_vec(self.seed, Domain::Dataset, key, i as u64, n0));
            targets.row_mut(i).assign(self.teacher.forward(&x)?.output());
            inputs.row_mut(i).assign(&x);
        }
        Batch::new(inputs, targets)
    }

    /// Minibatch for training step `step`.
    pub fn batch(&self, step: usize, size: usize) -> Result<Batch> {
        self.draw(step as u64, size)
    }

    /// A fixed held-out set, disjoint from every training batch.
    pub fn eval_set(&self, size: usize) -> Result<Batch> {
        self.draw(EVAL_KEY, size)
    }
}

/// `½‖y - x^L‖²`.
pub fn loss(model: &Model, x: &Array1<f64>, y: &Array1<f64>) -> Result<f64> {
    let out = model.forward(x)?;
    check_target(model, y)?;
    Ok(0.5 * (y - out.output()).mapv(|v| v * v).sum())
}

pub fn mean_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let losses: Vec<f64> = batch
        .inputs
        .outer_iter()
        .zip(batch.targets.outer_iter())
        .map(|(x, y)| loss(model, &x.to_owned(), &y.to_owned()))
        .collect::<Result<_>>()?;
    Ok(stats::mean(&losses))
}

fn check_target(model: &Model, y: &Array1<f64>) -> Result<()> {
    if y.len() != model.output_width() {
        return Err(Error::Dimension { what: "target vector", expected: model.output_width(), got: y.len() });
    }
    Ok(())
}

/// Errors `e = y - x^L` propagated back through the net. `deltas[k][j]` is
/// unit `j`'s error times `φ′(u_j)`; `output_errors[k][j]` is the error itself.
pub fn backprop_errors(model: &Model, trace: &ForwardTrace, y: &Array1<f64>) -> Result<Backward> {
    check_target(model, y)?;
    model.backward(trace, &(y - trace.output()))
}

/// Batch-mean descent directions `δ_j x*ᵀ`, one `units × (fan_in + 1)`
/// matrix per layer, together with the batch-mean loss.
pub fn descent_directions(model: &Model, batch: &Batch) -> Result<(Vec<Array2<f64>>, f64)> {
    let params = model.params();
    let per_sample: Vec<(Vec<Array2<f64>>, f64)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let x = batch.inputs.row(i).to_owned();
            let y = batch.targets.row(i).to_owned();
            let trace = model.forward(&x)?;
            let l = 0.5 * (&y - trace.output()).mapv(|v| v * v).sum();
            let bw = backprop_errors(model, &trace, &y)?;
            let dirs = (0..params.num_layers())
                .map(|k| {
                    let delta = bw.deltas[k].view().insert_axis(Axis(1));
                    let xin = trace.layer_input(k);
                    let mut d = Array2::zeros((delta.nrows(), xin.len() + 1));
                    d.slice_mut(s![.., ..xin.len()]).assign(&delta.dot(&xin.view().insert_axis(Axis(0))));
                    d.slice_mut(s![.., xin.len()]).assign(&bw.deltas[k]);
                    d
                })
                .collect();
            Ok((dirs, l))
        })
        .collect::<Result<_>>()?;
    let (sum, loss_sum) = stats::pairwise_reduce(per_sample, |a, b| {
        a.0.iter_mut().zip(&b.0).for_each(|(x, y)| *x += y);
        a.1 += b.1;
    })
    .expect("batch is non-empty");
    let n = batch.len() as f64;
    Ok((sum.into_iter().map(|d| d / n).collect(), loss_sum / n))
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Batch-mean loss before the update.
    pub loss: f64,
    /// `‖Δθ‖₂`.
    pub step_norm: f64,
    pub singular_fallbacks: usize,
    pub units: usize,
    /// More than half the units fell back to the Euclidean step.
    pub flagged: bool,
    /// Largest relative difference between closed-form and dense solves, on
    /// checked steps.
    pub spot_check: Option<f64>,
    pub wall_time_s: f64,
}

/// All steps of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainRecord {
    pub rows: Vec<StepRecord>,
}

impl TrainRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn total_fallbacks(&self) -> usize {
        self.rows.iter().map(|r| r.singular_fallbacks).sum()
    }

    pub fn flagged(&self) -> bool {
        self.rows.iter().any(|r| r.flagged)
    }
}

fn apply_updates(model: &mut Model, updates: &[Array2<f64>]) -> Result<f64> {
    if updates.iter().any(|u| u.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("parameter update".into()));
    }
    let params = model.params_mut();
    let mut sq = 0.0;
    for (k, u) in updates.iter().enumerate() {
        let f = params.weights[k].ncols();
        params.weights[k] += &u.slice(s![.., ..f]);
        params.biases[k] += &u.slice(s![.., f]);
        sq += u.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(sq.sqrt())
}

/// `θ ← θ - η · mean ∂l/∂θ`.
pub fn sgd_step(model: &mut Model, batch: &Batch, eta: f64) -> Result<StepRecord> {
    let start = Instant::now();
    let (dirs, loss) = descent_directions(model, batch)?;
    let updates: Vec<Array2<f64>> = dirs.iter().map(|d| d * eta).collect();
    let step_norm = apply_updates(model, &updates)?;
    let units = model.params().biases.iter().map(|b| b.len()).sum();
    Ok(StepRecord { step: 0, loss, step_norm, singular_fallbacks: 0, units, flagged: false, spot_check: None, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Natural-gradient step of one unit: `η G⁻¹ d` for descent direction `d`.
/// With `compat_w0` the bias component is multiplied by the current bias.
pub fn unit_step(coeffs: &UnitFisherCoeffs, weights: &UnitWeights, direction: ndarray::ArrayView1<f64>, eta: f64, compat_w0: bool) -> Result<Array1<f64>> {
    let mut step = unit_fisher::apply_ginv(coeffs, weights, direction)? * eta;
    if compat_w0 {
        let n = weights.len();
        step[n] *= weights.w0();
    }
    Ok(step)
}

/// Relative difference between [`unit_fisher::apply_ginv`] and a dense LU
/// solve of the assembled block.
pub fn dense_check(coeffs: &UnitFisherCoeffs, weights: &UnitWeights, direction: ndarray::ArrayView1<f64>) -> Result<f64> {
    let fast = unit_fisher::apply_ginv(coeffs, weights, direction)?;
    let dense = Lu::new(&unit_fisher::assemble_g(coeffs, weights))?.solve(&direction.to_owned());
    let scale = dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = (&fast - &dense).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// Unit-wise natural-gradient step. Units whose Fisher block is singular
/// take the Euclidean step instead and are counted.
pub fn unit_ngd_step(model: &mut Model, batch: &Batch, cfg: &OptimizerConfig, check: bool) -> Result<StepRecord> {
    let start = Instant::now();
    let (dirs, loss) = descent_directions(model, batch)?;
    let act = model.activation();
    let params = model.params();
    let mut fallbacks = 0;
    let mut units = 0;
    let mut worst: Option<f64> = None;
    let mut updates = Vec::with_capacity(dirs.len());
    for (k, dir) in dirs.iter().enumerate() {
        let per_unit: Vec<(Array1<f64>, bool, Option<f64>)> = (0..dir.nrows())
            .into_par_iter()
            .map(|j| {
                let weights = UnitWeights::from_view(params.weights[k].row(j), params.biases[k][j])?;
                let d = dir.row(j);
                let coeffs = unit_fisher::coeffs_for(act, weights.w_norm(), weights.w0(), cfg.damping);
                match coeffs.and_then(|c| Ok((unit_step(&c, &weights, d, cfg.eta, cfg.compat_eq68_w0)?, c))) {
                    Ok((step, c)) => {
                        let err = if check { Some(dense_check(&c, &weights, d)?) } else { None };
                        Ok((step, false, err))
                    }
                    Err(Error::SingularFisher { .. } | Error::SingularDirection) => Ok((d.to_owned() * cfg.eta, true, None)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        let f = dir.ncols();
        let mut update = Array2::zeros((per_unit.len(), f));
        for (j, (step, fell_back, err)) in per_unit.into_iter().enumerate() {
            update.row_mut(j).assign(&step);
            fallbacks += fell_back as usize;
            if let Some(e) = err {
                worst = Some(worst.map_or(e, |w: f64| w.max(e)));
            }
        }
        units += update.nrows();
        updates.push(update);
    }
    let step_norm = apply_updates(model, &updates)?;
    let flagged = 2 * fallbacks > units;
    if flagged {
        warn!("{fallbacks} of {units} units fell back to the Euclidean step");
    }
    if let Some(e) = worst.filter(|e| *e > SPOT_CHECK_TOL) {
        warn!("closed-form inverse disagrees with the dense solve (relative {e:e})");
    }
    Ok(StepRecord { step: 0, loss, step_norm, singular_fallbacks: fallbacks, units, flagged, spot_check: worst, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Mean of the last `window` iterates (all of them when fewer are given).
pub fn polyak_average(history: &[NetworkParams], window: usize) -> Result<NetworkParams> {
    if window == 0 {
        return Err(Error::Config("Polyak window must be at least 1".into()));
    }
    let Some(last) = history.last() else {
        return Err(Error::Config("Polyak averaging needs at least one iterate".into()));
    };
    let tail = &history[history.len().saturating_sub(window)..];
    let flats: Vec<Vec<f64>> = tail.iter().map(|p| p.to_flat()).collect();
    let k = flats.len() as f64;
    let mean: Vec<f64> = (0..flats[0].len())
        .map(|i| {
            let mut col: Vec<f64> = flats.iter().map(|f| f[i]).collect();
            stats::pairwise_sum(&mut col) / k
        })
        .collect();
    let mut out = last.clone();
    out.set_flat(&mean)?;
    Ok(out)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub record: TrainRecord,
    /// Polyak-averaged parameters when a window was configured.
    pub averaged: Option<NetworkParams>,
}

/// Runs `steps` optimizer steps on minibatches from `data`.
pub fn train(mut model: Model, data: &TeacherStudent, cfg: &OptimizerConfig, steps: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut record = TrainRecord::default();
    let mut history: VecDeque<NetworkParams> = VecDeque::new();
    for step in 0..steps {
        let batch = data.batch(step, cfg.batch_size)?;
        let mut row = match cfg.kind {
            OptimizerKind::Sgd => sgd_step(&mut model, &batch, cfg.eta),
            OptimizerKind::UnitNgd => {
                let check = cfg.check_every > 0 && step % cfg.check_every == 0;
                unit_ngd_step(&mut model, &batch, cfg, check)
            }
        }
        .map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
            other => other,
        })?;
        row.step = step;
        record.rows.push(row);
        if let Some(w) = cfg.polyak_window {
            history.push_back(model.params().clone());
            if history.len() > w {
                history.pop_front();
            }
        }
    }
    let averaged = match cfg.polyak_window {
        Some(w) if !history.is_empty() => Some(polyak_average(history.make_contiguous(), w)?),
        _ => None,
    };
    Ok(TrainOutcome { model, record, averaged })
}

/// Trains `(W, b)` of a residual net with its mixers held fixed.
pub fn train_resnet(net: ResNet, data: &TeacherStudent, cfg: &OptimizerConfig, steps: usize) -> Result<TrainOutcome> {
    if net.config.alpha >= 1.0 {
        warn!("alpha = {} >= 1: residual activity is not damped", net.config.alpha);
    }
    train(Model::Residual(net), data, cfg, steps)
}
