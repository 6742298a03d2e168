use fisher_ngd::nets::{self, Model, NetConfig, ResNet, ResNetConfig};
use fisher_ngd::rng::{self, Domain};
use fisher_ngd::stats;
use fisher_ngd::trainer::{self, OptimizerConfig, OptimizerKind, TeacherStudent};
use fisher_ngd::{ActivationKind, Error};
use ndarray::Array1;

fn linear_task() -> (Model, TeacherStudent) {
    let cfg = NetConfig::new(vec![5, 3], 1.0, 0.1, ActivationKind::Linear, 0).unwrap();
    TeacherStudent::plain(&cfg, 41).unwrap()
}

#[test]
fn sgd_reduces_loss_on_linear_task() {
    let (student, data) = linear_task();
    let eval = data.eval_set(500).unwrap();
    let before = trainer::mean_loss(&student, &eval).unwrap();
    let out = trainer::train(student, &data, &OptimizerConfig::new(OptimizerKind::Sgd, 0.01, 32), 100).unwrap();
    assert_eq!(out.record.rows.len(), 100);
    assert!(out.record.rows.iter().enumerate().all(|(i, r)| r.step == i));
    assert!(trainer::mean_loss(&out.model, &eval).unwrap() < before);
}

#[test]
fn polyak_iterate_is_no_worse_than_the_window() {
    let (student, data) = linear_task();
    let eval = data.eval_set(500).unwrap();
    let window = 10;
    let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, eta: 0.05, polyak_window: Some(window), ..Default::default() };
    let out = trainer::train(student.clone(), &data, &cfg, 60).unwrap();
    let avg = out.averaged.unwrap();

    // Replay the run to recover the last `window` iterates.
    let mut worst = 0.0f64;
    for steps in 60 - window + 1..=60 {
        let m = trainer::train(student.clone(), &data, &OptimizerConfig { polyak_window: None, ..cfg }, steps).unwrap().model;
        worst = worst.max(trainer::mean_loss(&m, &eval).unwrap());
    }
    let mut averaged = student;
    *averaged.params_mut() = avg;
    assert!(trainer::mean_loss(&averaged, &eval).unwrap() <= worst);
}

#[test]
fn runs_are_reproducible() {
    let cfg = NetConfig::new(vec![4, 6, 2], 2.0, 0.1, ActivationKind::Tanh, 0).unwrap();
    let (student, data) = TeacherStudent::plain(&cfg, 42).unwrap();
    let opt = OptimizerConfig { check_every: 5, ..Default::default() };
    let a = trainer::train(student.clone(), &data, &opt, 20).unwrap();
    let b = trainer::train(student, &data, &opt, 20).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.record.losses(), b.record.losses());
    let checked: Vec<f64> = a.record.rows.iter().filter_map(|r| r.spot_check).collect();
    assert_eq!(checked.len(), 4);
    assert!(checked.iter().all(|&e| e <= trainer::SPOT_CHECK_TOL));
}

#[test]
fn compat_switch_only_changes_biases() {
    let cfg = NetConfig::new(vec![4, 3], 2.0, 0.3, ActivationKind::Tanh, 0).unwrap();
    let (student, data) = TeacherStudent::plain(&cfg, 43).unwrap();
    let run = |compat| {
        let opt = OptimizerConfig { compat_eq68_w0: compat, ..Default::default() };
        trainer::train(student.clone(), &data, &opt, 1).unwrap().model
    };
    let (plain, compat) = (run(false), run(true));
    assert_eq!(plain.params().weights, compat.params().weights);
    let b0 = &student.params().biases[0];
    let (dp, dc) = (&plain.params().biases[0] - b0, &compat.params().biases[0] - b0);
    for j in 0..b0.len() {
        assert!((dc[j] - dp[j] * b0[j]).abs() <= 1e-14 * (1.0 + b0[j].abs()), "bias {j}: {} vs {}", dc[j], dp[j] * b0[j]);
    }
}

#[test]
fn divergent_learning_rate_aborts_with_non_finite() {
    let cfg = NetConfig::new(vec![4, 3], 1.0, 0.1, ActivationKind::Linear, 0).unwrap();
    let (student, data) = TeacherStudent::plain(&cfg, 44).unwrap();
    let err = trainer::train(student, &data, &OptimizerConfig::new(OptimizerKind::Sgd, 1e200, 8), 50).unwrap_err();
    assert!(matches!(err, Error::NonFinite(ref m) if m.contains("step")), "{err}");
}

#[test]
fn resnet_without_mixers_does_not_learn() {
    let base = NetConfig::new(vec![6; 4], 1.0, 0.1, ActivationKind::Tanh, 0).unwrap();
    let cfg = ResNetConfig::new(base, 0.0, 1.0).unwrap();
    let (student, data) = TeacherStudent::residual(&cfg, 45).unwrap();
    let Model::Residual(net) = student else { unreachable!() };
    let out = trainer::train_resnet(net.clone(), &data, &OptimizerConfig::default(), 10).unwrap();
    assert!(out.record.rows.iter().all(|r| r.step_norm == 0.0));
    assert_eq!(out.model.params(), &net.params);
    let losses = out.record.losses();
    let eval = data.eval_set(50).unwrap();
    assert_eq!(trainer::mean_loss(&out.model, &eval).unwrap(), trainer::mean_loss(&Model::Residual(net), &eval).unwrap());
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn resnet_training_keeps_mixers_fixed() {
    let base = NetConfig::new(vec![8; 3], 1.0, 0.1, ActivationKind::Relu, 0).unwrap();
    let cfg = ResNetConfig::new(base, 1.0, 0.7).unwrap();
    let (student, data) = TeacherStudent::residual(&cfg, 46).unwrap();
    let Model::Residual(net) = student else { unreachable!() };
    let out = trainer::train_resnet(net.clone(), &data, &OptimizerConfig { polyak_window: Some(5), ..Default::default() }, 30).unwrap();
    let Model::Residual(trained) = &out.model else { unreachable!() };
    assert_eq!(trained.mixers, net.mixers);
    assert_ne!(trained.params, net.params);
    assert!(out.averaged.is_some());
    assert!(!out.record.flagged());
}

/// Wide residual layers turn their inputs into near-Gaussian, centred values.
#[test]
fn resnet_layer_inputs_are_gaussian() {
    let n = 1000;
    let mut kurt = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for seed in 0..20u64 {
        let base = NetConfig::new(vec![n; 4], 2.0, 0.0, ActivationKind::Relu, seed).unwrap();
        let net = ResNet::init_random(&ResNetConfig::new(base, 1.0, 0.5).unwrap()).unwrap();
        let x0 = Array1::from(rng::normal_vec(seed, Domain::Inputs, 0, 0, n));
        let trace = nets::forward_resnet(&net, &x0).unwrap();
        for l in 2..=trace.num_layers() {
            let x: Vec<f64> = trace.outputs[l - 1].to_vec();
            kurt.push(stats::excess_kurtosis(&x));
            means.push(stats::mean(&x));
            scales.push(stats::mean(&x.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt());
        }
    }
    let k = stats::mean(&kurt);
    assert!((-0.3..=0.3).contains(&k), "excess kurtosis {k}");
    let bound = 0.05 * stats::mean(&scales);
    let m = stats::mean(&means);
    assert!(m.abs() <= bound, "mean {m} vs bound {bound}");
}
