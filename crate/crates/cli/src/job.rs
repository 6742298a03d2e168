//! Fully resolved, serialisable descriptions of a run and their execution.
//!
//! A [`Job`] carries everything an execution reads, including the contents
//! of any input files, so the copy stored in a manifest replays without
//! touching the original inputs.

use std::time::Instant;

use fisher_ngd::config::{ExperimentConfig, ResidualSettings};
use fisher_ngd::fisher_probe::{self, DecayOptions, DecayTemplate, FisherOptions, SelfAveragingOptions};
use fisher_ngd::nets::{self, Model, NetConfig, ResNet};
use fisher_ngd::trainer::{self, OptimizerConfig, OptimizerKind, TeacherStudent};
use fisher_ngd::unit_fisher::{self, UnitWeights};
use fisher_ngd::{io, meanfield, ActivationKind};
use serde::{Deserialize, Serialize};

use crate::args::{MeanfieldArgs, NetArgs, ProbeArgs, ProbeMode, TrainArgs, UnitCoeffsArgs};
use crate::output::{fmt_f64, Artifacts, Table};
use crate::CliError;

const DEFAULT_RESIDUAL: ResidualSettings = ResidualSettings { sigma_v2: 1.0, alpha: 0.5 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Job {
    Meanfield(MeanfieldJob),
    FisherProbe(ProbeJob),
    Train(TrainJob),
    UnitCoeffs(UnitCoeffsJob),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanfieldJob {
    pub config: ExperimentConfig,
    pub a0: f64,
    pub mc_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeJob {
    pub mode: ProbeMode,
    /// Net widths (`full`, `domino`) or scanned widths (other modes).
    pub widths: Vec<usize>,
    pub activation: ActivationKind,
    pub sigma_w2: Vec<f64>,
    pub sigma_b2: Vec<f64>,
    pub residual: Option<ResidualSettings>,
    pub seed: u64,
    pub samples: usize,
    pub layer: usize,
    pub layers: usize,
    pub output_width: usize,
    pub entries: usize,
    pub dump_matrix: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub config: ExperimentConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCoeffsJob {
    pub activation: ActivationKind,
    pub w: f64,
    pub w0: f64,
    pub damping: f64,
    /// Text-format parameters to dump unit by unit.
    pub params_text: Option<String>,
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Meanfield(_) => "meanfield",
            Job::FisherProbe(_) => "fisher-probe",
            Job::Train(_) => "train",
            Job::UnitCoeffs(_) => "unit-coeffs",
        }
    }

    pub fn master_seed(&self) -> u64 {
        match self {
            Job::Meanfield(j) => j.config.net.seed,
            Job::FisherProbe(j) => j.seed,
            Job::Train(j) => j.config.net.seed,
            Job::UnitCoeffs(_) => 0,
        }
    }

    pub fn execute(&self) -> Result<Artifacts, CliError> {
        match self {
            Job::Meanfield(j) => run_meanfield(j),
            Job::FisherProbe(j) => run_probe(j),
            Job::Train(j) => run_train(j),
            Job::UnitCoeffs(j) => run_unit_coeffs(j),
        }
    }
}

// ---------------------------------------------------------------- resolution

/// Raw network fields after merging a config file with flags.
struct NetFields {
    widths: Vec<usize>,
    activation: ActivationKind,
    sigma_w2: Vec<f64>,
    sigma_b2: Vec<f64>,
    residual: Option<ResidualSettings>,
    seed: u64,
}

fn net_fields(args: &NetArgs, force_residual: bool) -> Result<NetFields, CliError> {
    let file = args.net.as_ref().map(ExperimentConfig::load).transpose()?;
    let widths = match (&args.widths, &file) {
        (Some(w), _) => w.clone(),
        (None, Some(f)) => f.net.layer_widths.clone(),
        (None, None) => return Err(CliError::Usage("give --widths or --net".into())),
    };
    let layers = widths.len().saturating_sub(1).max(1);
    let per_layer = |flag: Option<f64>, from_file: Option<&Vec<f64>>, default: f64| match (flag, from_file) {
        (Some(v), _) => vec![v; layers],
        (None, Some(v)) => v.clone(),
        (None, None) => vec![default; layers],
    };
    let file_residual = file.as_ref().and_then(|f| f.residual);
    let residual = if args.sigma_v2.is_some() || args.alpha.is_some() || force_residual || file_residual.is_some() {
        let base = file_residual.unwrap_or(DEFAULT_RESIDUAL);
        Some(ResidualSettings { sigma_v2: args.sigma_v2.unwrap_or(base.sigma_v2), alpha: args.alpha.unwrap_or(base.alpha) })
    } else {
        None
    };
    Ok(NetFields {
        sigma_w2: per_layer(args.sigma_w2, file.as_ref().map(|f| &f.net.sigma_w2), 1.0),
        sigma_b2: per_layer(args.sigma_b2, file.as_ref().map(|f| &f.net.sigma_b2), 0.0),
        activation: args.activation.or(file.as_ref().map(|f| f.net.activation)).unwrap_or(ActivationKind::Tanh),
        seed: args.seed.or(file.as_ref().map(|f| f.net.seed)).unwrap_or(0),
        widths,
        residual,
    })
}

fn experiment(f: NetFields) -> Result<ExperimentConfig, CliError> {
    let net = NetConfig::with_layer_variances(f.widths, f.sigma_w2, f.sigma_b2, f.activation, f.seed)?;
    let cfg = ExperimentConfig { net, residual: f.residual };
    if let Some(r) = cfg.resnet_config() {
        r?;
    }
    Ok(cfg)
}

impl MeanfieldJob {
    pub fn resolve(args: &MeanfieldArgs) -> Result<Self, CliError> {
        Ok(Self { config: experiment(net_fields(&args.net, false)?)?, a0: args.a0, mc_seeds: args.mc_seeds })
    }
}

impl ProbeJob {
    pub fn resolve(args: &ProbeArgs) -> Result<Self, CliError> {
        let f = net_fields(&args.net, false)?;
        let samples = args.samples.unwrap_or(match args.mode {
            ProbeMode::Full => 10_000,
            ProbeMode::Domino => 20,
            ProbeMode::Decay => 20_000,
            ProbeMode::Nonclosure => 1,
            ProbeMode::Selfavg => 100_000,
        });
        let job = Self {
            mode: args.mode,
            widths: f.widths,
            activation: f.activation,
            sigma_w2: f.sigma_w2,
            sigma_b2: f.sigma_b2,
            residual: f.residual,
            seed: f.seed,
            samples,
            layer: args.layer,
            layers: args.layers,
            output_width: args.output_width,
            entries: args.entries,
            dump_matrix: args.dump_matrix,
        };
        if matches!(job.mode, ProbeMode::Full | ProbeMode::Domino) {
            job.model()?;
        }
        Ok(job)
    }

    fn model(&self) -> Result<Model, CliError> {
        let cfg = experiment(NetFields {
            widths: self.widths.clone(),
            activation: self.activation,
            sigma_w2: self.sigma_w2.clone(),
            sigma_b2: self.sigma_b2.clone(),
            residual: self.residual,
            seed: self.seed,
        })?;
        Ok(match cfg.resnet_config() {
            Some(r) => Model::Residual(ResNet::init_random(&r?)?),
            None => Model::Plain(nets::init_random(&cfg.net)?),
        })
    }
}

impl TrainJob {
    pub fn resolve(args: &TrainArgs) -> Result<Self, CliError> {
        let config = experiment(net_fields(&args.net, args.resnet)?)?;
        let optimizer = OptimizerConfig {
            kind: args.optimizer,
            eta: args.eta,
            batch_size: args.batch,
            damping: args.damping,
            polyak_window: args.polyak_window,
            compat_eq68_w0: args.compat_eq68_w0,
            ..Default::default()
        };
        optimizer.validate()?;
        if args.eval_samples == 0 {
            return Err(CliError::Usage("--eval-samples must be at least 1".into()));
        }
        Ok(Self { config, optimizer, steps: args.steps, eval_samples: args.eval_samples })
    }
}

impl UnitCoeffsJob {
    pub fn resolve(args: &UnitCoeffsArgs) -> Result<Self, CliError> {
        let params_text = args.params.as_ref().map(|p| io::load(p).map(|m| io::to_text(&m))).transpose()?;
        Ok(Self { activation: args.activation, w: args.w, w0: args.w0, damping: args.damping, params_text })
    }
}

// ----------------------------------------------------------------- execution

fn run_meanfield(job: &MeanfieldJob) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let start = Instant::now();
    let (theory, mc) = match job.config.resnet_config() {
        Some(r) => {
            let r = r?;
            let mc = if job.mc_seeds > 0 { Some(meanfield::monte_carlo_resnet(&r, job.a0, job.mc_seeds)?) } else { None };
            (meanfield::propagate_resnet(&r, job.a0)?, mc)
        }
        None => {
            let c = &job.config.net;
            let mc = if job.mc_seeds > 0 { Some(meanfield::monte_carlo_plain(c, job.a0, job.mc_seeds)?) } else { None };
            (meanfield::propagate(c, job.a0)?, mc)
        }
    };
    let mut t = Table::new(&["layer", "A_theory", "A_mc", "tau2", "chi", "chi_prod", "regime"]);
    for (i, l) in theory.layers.iter().enumerate() {
        let a_mc = mc.as_ref().map(|m| fmt_f64(m[i].activity)).unwrap_or_default();
        t.row(vec![l.layer.to_string(), fmt_f64(l.activity), a_mc, fmt_f64(l.tau2), fmt_f64(l.chi), fmt_f64(l.chi_prod), l.regime.name().into()]);
    }
    art.add_table("meanfield.csv", t)?;
    art.time("total", start);
    Ok(art)
}

fn run_probe(job: &ProbeJob) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let start = Instant::now();
    match job.mode {
        ProbeMode::Full => {
            let model = job.model()?;
            let f = fisher_probe::estimate_fisher_with(&model, job.samples, job.seed, FisherOptions::default())?;
            let rms = fisher_probe::exact_block_rms(&f);
            let mut t = Table::new(&[
                "params", "samples", "trace", "relative_asymmetry", "psd", "rms_diag", "rms_offblock_same_layer", "rms_offblock_cross_layer", "rms_offblock",
            ]);
            t.row(vec![
                f.num_params().to_string(),
                f.n_samples.to_string(),
                fmt_f64(f.trace()),
                fmt_f64(f.relative_asymmetry()),
                f.is_psd().to_string(),
                fmt_f64(rms.rms_diag),
                fmt_f64(rms.rms_offblock_same_layer),
                fmt_f64(rms.rms_offblock_cross_layer),
                fmt_f64(rms.rms_offblock),
            ]);
            art.add_table("fisher_summary.csv", t)?;
            if job.dump_matrix {
                let mut t = Table::new(&["row", "col", "value", "se"]);
                let p = f.num_params();
                for i in 0..p {
                    for j in i..p {
                        let se = f.standard_errors.as_ref().map(|s| fmt_f64(s[[i, j]])).unwrap_or_default();
                        t.row(vec![i.to_string(), j.to_string(), fmt_f64(f.matrix[[i, j]]), se]);
                    }
                }
                art.add_table("fisher_matrix.csv", t)?;
            }
        }
        ProbeMode::Domino => {
            let r = fisher_probe::domino_check(&job.model()?, job.layer, job.samples, job.seed)?;
            let mut t = Table::new(&["layer", "width", "samples", "diag_mean", "diag_se", "offdiag_rms", "chi_theory"]);
            t.row(vec![r.layer.to_string(), r.width.to_string(), r.n_samples.to_string(), fmt_f64(r.diag_mean), fmt_f64(r.diag_se), fmt_f64(r.offdiag_rms), fmt_f64(r.chi_theory)]);
            art.add_table("domino.csv", t)?;
        }
        ProbeMode::Decay => {
            let template = DecayTemplate {
                layers: job.layers,
                output_width: job.output_width,
                sigma_w2: job.sigma_w2[0],
                sigma_b2: job.sigma_b2[0],
                activation: job.activation,
                seed: job.seed,
                residual: job.residual,
            };
            let opts = DecayOptions { samples: job.samples, entries_per_stratum: job.entries, seed: job.seed, input_scale: 1.0 };
            let report = fisher_probe::block_decay_scan(&job.widths, &template, &opts)?;
            let mut t = Table::new(&["width", "rms_diag", "rms_offblock_same_layer", "rms_offblock_cross_layer", "rms_offblock"]);
            for r in &report.rows {
                t.row(vec![
                    r.width.to_string(),
                    fmt_f64(r.rms.rms_diag),
                    fmt_f64(r.rms.rms_offblock_same_layer),
                    fmt_f64(r.rms.rms_offblock_cross_layer),
                    fmt_f64(r.rms.rms_offblock),
                ]);
            }
            art.add_table("decay.csv", t)?;
            let mut fit = Table::new(&["slope", "slope_same_layer", "slope_cross_layer"]);
            fit.row(vec![fmt_f64(report.slope), fmt_f64(report.slope_same_layer), fmt_f64(report.slope_cross_layer)]);
            art.add_table("decay_fit.csv", fit)?;
        }
        ProbeMode::Nonclosure => {
            let mut t = Table::new(&["n", "offdiag_rms_g", "offdiag_rms_g2", "ratio"]);
            for &n in &job.widths {
                let r = fisher_probe::nonclosure_demo(n, job.seed)?;
                t.row(vec![n.to_string(), fmt_f64(r.offdiag_rms_g), fmt_f64(r.offdiag_rms_g2), fmt_f64(r.ratio)]);
            }
            art.add_table("nonclosure.csv", t)?;
        }
        ProbeMode::Selfavg => {
            let opts = SelfAveragingOptions { samples: job.samples, sigma_w2: job.sigma_w2[0], seed: job.seed };
            let mut t = Table::new(&[
                "n",
                "activation",
                "samples",
                "mean_f",
                "offdiag_within_3se",
                "diag_gap_scale",
                "diag_relative_rms",
                "diag_relative_noise",
                "diag_relative_excess",
                "bound",
                "within_bound",
            ]);
            for &n in &job.widths {
                let r = fisher_probe::self_averaging_check(n, job.activation, &opts)?;
                t.row(vec![
                    n.to_string(),
                    r.activation.name().into(),
                    r.samples.to_string(),
                    fmt_f64(r.mean_f),
                    fmt_f64(r.offdiag_within_3se),
                    fmt_f64(r.diag_gap_scale),
                    fmt_f64(r.diag_relative_rms),
                    fmt_f64(r.diag_relative_noise),
                    fmt_f64(r.diag_relative_excess),
                    fmt_f64(r.bound),
                    r.within_bound.to_string(),
                ]);
            }
            art.add_table("selfavg.csv", t)?;
        }
    }
    art.time("total", start);
    Ok(art)
}

fn run_train(job: &TrainJob) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let start = Instant::now();
    let seed = job.config.net.seed;
    let (student, data) = match job.config.resnet_config() {
        Some(r) => TeacherStudent::residual(&r?, seed)?,
        None => TeacherStudent::plain(&job.config.net, seed)?,
    };
    let eval = data.eval_set(job.eval_samples)?;
    let initial = trainer::mean_loss(&student, &eval)?;
    let out = match student {
        Model::Residual(net) => trainer::train_resnet(net, &data, &job.optimizer, job.steps)?,
        plain => trainer::train(plain, &data, &job.optimizer, job.steps)?,
    };

    let mut t = Table::new(&["step", "loss", "step_norm", "singular_fallbacks", "units", "flagged", "spot_check"]);
    for r in &out.record.rows {
        t.row(vec![
            r.step.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.step_norm),
            r.singular_fallbacks.to_string(),
            r.units.to_string(),
            r.flagged.to_string(),
            r.spot_check.map(fmt_f64).unwrap_or_default(),
        ]);
    }
    art.add_table("train.csv", t)?;
    art.add_file("params.txt", io::to_text(&out.model).into_bytes());

    let polyak_loss = match &out.averaged {
        Some(avg) => {
            let mut m = out.model.clone();
            *m.params_mut() = avg.clone();
            art.add_file("params_polyak.txt", io::to_text(&m).into_bytes());
            fmt_f64(trainer::mean_loss(&m, &eval)?)
        }
        None => String::new(),
    };
    let mut s = Table::new(&["optimizer", "steps", "initial_eval_loss", "final_eval_loss", "polyak_eval_loss", "singular_fallbacks", "flagged"]);
    s.row(vec![
        job.optimizer.kind.name().into(),
        job.steps.to_string(),
        fmt_f64(initial),
        fmt_f64(trainer::mean_loss(&out.model, &eval)?),
        polyak_loss,
        out.record.total_fallbacks().to_string(),
        out.record.flagged().to_string(),
    ]);
    art.add_table("train_summary.csv", s)?;
    art.step_times = out.record.rows.iter().map(|r| r.wall_time_s).collect();
    art.time("total", start);
    if job.optimizer.kind == OptimizerKind::UnitNgd && out.record.flagged() {
        log::warn!("some steps had more than half of the units fall back to the Euclidean step");
    }
    Ok(art)
}

const COEFF_HEADER: [&str; 9] = ["A00", "A0n", "Ann", "Abar00", "X", "Y", "Z", "D", "invertible"];

fn coeff_cells(act: ActivationKind, w_norm: f64, w0: f64, damping: f64) -> Result<Vec<String>, CliError> {
    match unit_fisher::coeffs_for(act, w_norm, w0, damping) {
        Ok(c) => Ok(vec![
            fmt_f64(c.a00),
            fmt_f64(c.a0n),
            fmt_f64(c.ann),
            fmt_f64(c.abar00),
            fmt_f64(c.x),
            fmt_f64(c.y),
            fmt_f64(c.z),
            fmt_f64(c.d),
            c.is_invertible().to_string(),
        ]),
        Err(fisher_ngd::Error::SingularFisher { .. } | fisher_ngd::Error::SingularDirection) => {
            let mut cells = vec![String::new(); COEFF_HEADER.len() - 1];
            cells.push("false".into());
            Ok(cells)
        }
        Err(e) => Err(e.into()),
    }
}

fn run_unit_coeffs(job: &UnitCoeffsJob) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let start = Instant::now();
    match &job.params_text {
        None => {
            let mut t = Table::new(&[&["activation", "w", "w0"][..], &COEFF_HEADER[..]].concat());
            let mut row = vec![job.activation.name().to_string(), fmt_f64(job.w), fmt_f64(job.w0)];
            row.extend(coeff_cells(job.activation, job.w, job.w0, job.damping)?);
            t.row(row);
            art.add_table("unit_coeffs.csv", t)?;
        }
        Some(text) => {
            let model = io::from_text(text)?;
            let act = model.activation();
            let params = model.params();
            let mut t = Table::new(&[&["layer", "unit", "w_norm", "w0"][..], &COEFF_HEADER[..]].concat());
            for k in 0..params.num_layers() {
                for j in 0..params.biases[k].len() {
                    let weights = UnitWeights::from_view(params.weights[k].row(j), params.biases[k][j])?;
                    let mut row = vec![(k + 1).to_string(), j.to_string(), fmt_f64(weights.w_norm()), fmt_f64(weights.w0())];
                    row.extend(coeff_cells(act, weights.w_norm(), weights.w0(), job.damping)?);
                    t.row(row);
                }
            }
            art.add_table("unit_coeffs.csv", t)?;
        }
    }
    art.time("total", start);
    Ok(art)
}
