//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::time::Instant;

use fisher_ngd::fisher_probe::{self, DecayOptions, DecayTemplate, SelfAveragingOptions};
use fisher_ngd::meanfield;
use fisher_ngd::nets::{self, Model, NetConfig, ResNet, ResNetConfig};
use fisher_ngd::stats;
use fisher_ngd::trainer::{self, OptimizerConfig, OptimizerKind, TeacherStudent};
use fisher_ngd::unit_fisher::{self, UnitFisherCoeffs, UnitWeights};
use fisher_ngd::ActivationKind;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normals(rng: &mut ChaCha20Rng, n: usize) -> Array1<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn coeff_fields(c: &UnitFisherCoeffs) -> [f64; 8] {
    [c.a00, c.a0n, c.ann, c.abar00, c.d, c.x, c.y, c.z]
}

fn relu_closed_form() -> Outcome {
    let mut worst = 0.0f64;
    for &w in &[0.5, 1.0, 2.0] {
        for &w0 in &[-1.0, 0.0, 1.0] {
            let q = unit_fisher::coeffs_quadrature(w, w0, ActivationKind::Relu).unwrap();
            let c = unit_fisher::coeffs_relu(w, w0).unwrap();
            for (a, b) in coeff_fields(&q).iter().zip(coeff_fields(&c)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-10, format!("max |quadrature - closed form| = {worst:.2e} (tol 1e-10)"))
}

fn explicit_inverse() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut skipped = 0;
    for act in ActivationKind::ALL {
        for &n in &[1usize, 2, 8, 64] {
            for _ in 0..50 {
                let w = normals(&mut rng, n) / (n as f64).sqrt();
                let w0: f64 = rng.sample(StandardNormal);
                let weights = UnitWeights::new(w, w0).unwrap();
                let c = unit_fisher::coeffs_for(act, weights.w_norm(), w0, 0.0);
                let c = match c {
                    Ok(c) if c.d > 1e-8 => c,
                    _ => {
                        skipped += 1;
                        continue;
                    }
                };
                let g = unit_fisher::assemble_g(&c, &weights);
                let ginv = unit_fisher::ginv_matrix(&c, &weights).unwrap();
                let err = fisher_ngd::linalg::max_abs_from_identity(&g.dot(&ginv));
                worst = worst.max(err);
                cases += 1;
            }
        }
    }
    outcome(worst <= 1e-10, format!("max ‖G G⁻¹ - I‖ = {worst:.2e} over {cases} cases, {skipped} with D ≤ 1e-8 (tol 1e-10)"))
}

fn unit_fisher_vs_monte_carlo() -> Outcome {
    let n = 50;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let w = normals(&mut rng, n) / (n as f64).sqrt();
    let w0 = 0.3;
    let weights = UnitWeights::new(w.clone(), w0).unwrap();
    let c = unit_fisher::coeffs_relu(weights.w_norm(), w0).unwrap();
    let g = unit_fisher::assemble_g(&c, &weights);

    let (groups, per_group, chunk) = (10, 100_000, 10_000);
    let mut group_means = Vec::with_capacity(groups);
    for _ in 0..groups {
        let mut sum = Array2::<f64>::zeros((n + 1, n + 1));
        for _ in 0..per_group / chunk {
            let mut xs = Array2::<f64>::zeros((chunk, n + 1));
            for mut row in xs.outer_iter_mut() {
                for v in row.iter_mut().take(n) {
                    *v = rng.sample(StandardNormal);
                }
                let u = row.slice(ndarray::s![..n]).dot(&w) + w0;
                if u > 0.0 {
                    row[n] = 1.0;
                } else {
                    row.fill(0.0);
                }
            }
            sum += &xs.t().dot(&xs);
        }
        group_means.push(sum / per_group as f64);
    }
    let k = groups as f64;
    let mean: Array2<f64> = group_means.iter().fold(Array2::zeros((n + 1, n + 1)), |a, b| a + b) / k;
    let var = group_means.iter().fold(Array2::<f64>::zeros((n + 1, n + 1)), |a, b| a + (b - &mean).mapv(|d| d * d)) / (k - 1.0);
    let se = var.mapv(|v| (v / k).sqrt());
    let total = (n + 1) * (n + 1);
    let within = g.iter().zip(mean.iter()).zip(se.iter()).filter(|((gv, mv), s)| (*gv - *mv).abs() <= 3.0 * **s).count();
    let frac = within as f64 / total as f64;
    outcome(frac >= 0.95, format!("{within}/{total} entries within 3 SE ({:.1}%, need ≥ 95%)", 100.0 * frac))
}

fn domino() -> Outcome {
    let report = |n: usize| {
        let cfg = NetConfig::new(vec![n; 4], 1.0, 0.05, ActivationKind::Tanh, 4).unwrap();
        let model = Model::Plain(nets::init_random(&cfg).unwrap());
        fisher_probe::domino_check(&model, 0, 8, 40).unwrap()
    };
    let (a, b) = (report(200), report(800));
    let ratio = b.offdiag_rms / a.offdiag_rms;
    let diag_err = [&a, &b].iter().map(|r| (r.diag_mean / r.chi_theory - 1.0).abs()).fold(0.0f64, f64::max);
    outcome(
        (0.35..=0.65).contains(&ratio) && diag_err <= 0.10,
        format!("off-diagonal rms ratio 800/200 = {ratio:.3} (need [0.35, 0.65]); diag vs χ max rel err {diag_err:.3} (tol 0.10)"),
    )
}

fn decay() -> Outcome {
    let template = DecayTemplate::plain(2, 1, 1.0, 0.05, ActivationKind::Tanh, 5);
    let opts = DecayOptions { samples: 100_000, ..Default::default() };
    let rms = |n: usize| fisher_probe::sampled_block_rms(&template.build(n).unwrap(), &opts).unwrap();
    let (a, b) = (rms(100), rms(400));
    let factor = a.rms_offblock / b.rms_offblock;
    outcome(
        (1.5..=3.0).contains(&factor),
        format!("normalised off-block rms {:.4e} -> {:.4e}, factor {factor:.3} (need [1.5, 3.0])", a.rms_offblock, b.rms_offblock),
    )
}

fn mean_field_agreement() -> Outcome {
    let cfg = NetConfig::new(vec![1000; 6], 2.0, 0.05, ActivationKind::Tanh, 6).unwrap();
    let theory = meanfield::propagate(&cfg, 1.0).unwrap();
    let mc = meanfield::monte_carlo_plain(&cfg, 1.0, 20).unwrap();
    let mut a_err = 0.0f64;
    let mut chi_err = 0.0f64;
    for (t, m) in theory.layers.iter().zip(&mc) {
        a_err = a_err.max((m.activity - t.activity).abs() / t.activity);
        chi_err = chi_err.max((m.chi - t.chi).abs() / t.chi);
    }
    outcome(a_err < 0.05 && chi_err <= 0.10, format!("max rel err: activity {a_err:.4} (tol 0.05), χ {chi_err:.4} (tol 0.10)"))
}

fn resnet_recursion() -> Outcome {
    let base = NetConfig::new(vec![500; 6], 1.0, 0.0, ActivationKind::Linear, 7).unwrap();
    let cfg = ResNetConfig::new(base, 1.0, 0.5).unwrap();
    let mc = meanfield::monte_carlo_resnet(&cfg, 1.0, 10).unwrap();
    let mut prev = 1.0;
    let ratios: Vec<f64> = mc
        .iter()
        .map(|l| {
            let r = l.activity / prev;
            prev = l.activity;
            r
        })
        .collect();
    let ratio = stats::mean(&ratios);

    let base = NetConfig::new(vec![1000; 5], 2.0, 0.0, ActivationKind::Relu, 8).unwrap();
    let net = ResNet::init_random(&ResNetConfig::new(base, 1.0, 0.5).unwrap()).unwrap();
    let mut values = Vec::new();
    for s in 0..10u64 {
        let x0 = Array1::from(fisher_ngd::rng::normal_vec(8, fisher_ngd::rng::Domain::Inputs, s, 0, 1000));
        let trace = nets::forward_resnet(&net, &x0).unwrap();
        for k in 1..trace.num_layers() {
            values.extend(trace.layer_input(k).iter().copied());
        }
    }
    let kurt = stats::excess_kurtosis(&values);
    outcome(
        (ratio - 1.25).abs() <= 0.1 && (-0.3..=0.3).contains(&kurt),
        format!("linear activity ratio {ratio:.4} (need 1.25 ± 0.1); ReLU excess kurtosis {kurt:.4} (need [-0.3, 0.3])"),
    )
}

fn ngd_degeneracy() -> Outcome {
    let cfg = NetConfig::new(vec![6, 8, 3], 1.0, 0.1, ActivationKind::Linear, 9).unwrap();
    let (student, data) = TeacherStudent::plain(&cfg, 9).unwrap();
    let run = |kind| {
        let opt = OptimizerConfig { kind, ..Default::default() };
        trainer::train(student.clone(), &data, &opt, 100).unwrap().model
    };
    let (sgd, ngd) = (run(OptimizerKind::Sgd), run(OptimizerKind::UnitNgd));
    let diff = sgd.params().to_flat().iter().zip(ngd.params().to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    outcome(diff <= 1e-10, format!("max parameter difference after 100 steps {diff:.2e} (tol 1e-10)"))
}

fn eval_decrease(model: Model, data: &TeacherStudent, kind: OptimizerKind, steps: usize) -> (f64, f64) {
    let eval = data.eval_set(1000).unwrap();
    let before = trainer::mean_loss(&model, &eval).unwrap();
    let opt = OptimizerConfig { kind, ..Default::default() };
    let out = trainer::train(model, data, &opt, steps).unwrap();
    (before, trainer::mean_loss(&out.model, &eval).unwrap())
}

fn ngd_effectiveness() -> Outcome {
    let mut sgd_dec = Vec::new();
    let mut ngd_dec = Vec::new();
    for seed in 0..10 {
        let cfg = NetConfig::new(vec![10, 20, 1], 2.0, 0.1, ActivationKind::Relu, 0).unwrap();
        let (student, data) = TeacherStudent::plain(&cfg, 100 + seed).unwrap();
        let (b, a) = eval_decrease(student.clone(), &data, OptimizerKind::Sgd, 50);
        sgd_dec.push(b - a);
        let (b, a) = eval_decrease(student, &data, OptimizerKind::UnitNgd, 50);
        ngd_dec.push(b - a);
    }
    let (ms, mn) = (stats::median(&sgd_dec), stats::median(&ngd_dec));

    let mut sgd_final = Vec::new();
    let mut ngd_final = Vec::new();
    for seed in 0..10 {
        let base = NetConfig::new(vec![20; 4], 2.0, 0.1, ActivationKind::Relu, 0).unwrap();
        let cfg = ResNetConfig::new(base, 1.0, 0.7).unwrap();
        let (student, data) = TeacherStudent::residual(&cfg, 200 + seed).unwrap();
        sgd_final.push(eval_decrease(student.clone(), &data, OptimizerKind::Sgd, 500).1);
        ngd_final.push(eval_decrease(student, &data, OptimizerKind::UnitNgd, 500).1);
    }
    let (fs, fnd) = (stats::median(&sgd_final), stats::median(&ngd_final));
    outcome(
        mn >= ms && fnd <= fs,
        format!("median 50-step decrease NGD {mn:.4e} vs SGD {ms:.4e}; resnet median final loss NGD {fnd:.4e} vs SGD {fs:.4e}"),
    )
}

fn gradient_oracle() -> Outcome {
    let cfg = NetConfig::new(vec![4, 5, 3], 1.5, 0.1, ActivationKind::Tanh, 10).unwrap();
    let model = Model::Plain(nets::init_random(&cfg).unwrap());
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = normals(&mut rng, 4);
        let y = normals(&mut rng, 3);
        let batch = trainer::Batch::new(x.clone().insert_axis(Axis(0)), y.clone().insert_axis(Axis(0))).unwrap();
        let (dirs, _) = trainer::descent_directions(&model, &batch).unwrap();
        // Descent rows are unit-major (weights, bias), matching the flat layout.
        let analytic: Vec<f64> = dirs.iter().flat_map(|d| d.iter().map(|v| -v).collect::<Vec<_>>()).collect();
        let theta = model.params().to_flat();
        let numeric: Vec<f64> = (0..theta.len())
            .map(|i| {
                let at = |delta: f64| {
                    let mut m = model.clone();
                    let mut t = theta.clone();
                    t[i] += delta;
                    m.params_mut().set_flat(&t).unwrap();
                    trainer::loss(&m, &x, &y).unwrap()
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect();
        let num: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(num / den);
    }
    outcome(worst <= 1e-5, format!("max relative gradient error {worst:.2e} over 20 points (tol 1e-5)"))
}

fn self_averaging() -> Outcome {
    let opts = SelfAveragingOptions::default();
    let a = fisher_probe::self_averaging_check(1000, ActivationKind::Relu, &opts).unwrap();
    let b = fisher_probe::self_averaging_check(2000, ActivationKind::Relu, &opts).unwrap();
    let ratio = b.diag_gap_scale / a.diag_gap_scale;
    outcome(
        a.offdiag_within_3se >= 0.95 && (0.3..=0.7).contains(&ratio),
        format!("i≠j gaps within 3 SE: {:.1}% (need ≥ 95%); i=j gap ratio n=2000/1000 = {ratio:.3} (need [0.3, 0.7])", 100.0 * a.offdiag_within_3se),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("relu closed forms vs quadrature", relu_closed_form),
        ("explicit inverse", explicit_inverse),
        ("unit Fisher vs Monte Carlo", unit_fisher_vs_monte_carlo),
        ("Jacobian product scaling", domino),
        ("off-block Fisher decay", decay),
        ("mean-field agreement", mean_field_agreement),
        ("resnet recursion and Gaussianization", resnet_recursion),
        ("NGD equals SGD for linear units", ngd_degeneracy),
        ("NGD effectiveness", ngd_effectiveness),
        ("gradient vs finite differences", gradient_oracle),
        ("self-averaging", self_averaging),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let r = run();
        let verdict = if r.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!r.pass);
        println!("{verdict} [{id:>2}] {name}: {} ({:.1} s)", r.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
