mod common;

use std::sync::Arc;

use align_cruse::autodiff::{Graph, Tensor};
use align_cruse::data::{scenario_set, Nonlinearity, ScenarioConfig};
use align_cruse::dsp::{AudioClip, StftConfig, StftPlan};
use align_cruse::model::{ModelConfig, ParamStore};
use align_cruse::train::{
    adam_step, loss_ccmse, spectral_loss, train_loop, Adam, Example, LossConfig, OptimConfig,
    TrainConfig,
};
use common::{noise, rng};

fn loss_of(est: &Tensor, target: &Tensor, cfg: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let e = g.constant(est.clone());
    let l = spectral_loss(&mut g, e, target, cfg).unwrap();
    g.value(l).item()
}

fn planes(re: f64, im: f64, t: usize, f: usize) -> Tensor {
    let mut d = vec![re; t * f];
    d.extend(vec![im; t * f]);
    Tensor::from_vec(vec![2, t, f], d).unwrap()
}

#[test]
fn loss_of_identical_spectra_is_zero() {
    let mut r = rng(1);
    let s = common::rand_tensor(&mut r, &[2, 7, 161]);
    assert_eq!(loss_of(&s, &s, &LossConfig::default()), 0.0);
}

#[test]
fn unit_estimate_against_silence_costs_one_for_any_beta() {
    for beta in [0.0, 0.3, 0.7, 1.0] {
        let cfg = LossConfig {
            beta,
            ..LossConfig::default()
        };
        for (re, im) in [(1.0, 0.0), (0.6, 0.8), (0.0, -1.0)] {
            let l = loss_of(&planes(re, im, 3, 5), &planes(0.0, 0.0, 3, 5), &cfg);
            assert!((l - 1.0).abs() < 1e-12, "beta {beta}: {l}");
        }
    }
}

#[test]
fn loss_is_nonnegative_and_cell_order_free() {
    let mut r = rng(2);
    let a = common::rand_tensor(&mut r, &[2, 4, 6]);
    let b = common::rand_tensor(&mut r, &[2, 4, 6]);
    let cfg = LossConfig::default();
    let l = loss_of(&a, &b, &cfg);
    assert!(l > 0.0);
    let perm: Vec<usize> = (0..24).map(|i| (i * 7) % 24).collect();
    let shuffle = |x: &Tensor| {
        let d = x.data();
        let mut out = Vec::with_capacity(48);
        for plane in 0..2 {
            out.extend(perm.iter().map(|&i| d[plane * 24 + i]));
        }
        Tensor::from_vec(vec![2, 4, 6], out).unwrap()
    };
    assert!((loss_of(&shuffle(&a), &shuffle(&b), &cfg) - l).abs() < 1e-12);
}

#[test]
fn time_domain_loss_vanishes_on_the_target() {
    let plan = Arc::new(StftPlan::new(&StftConfig::default()).unwrap());
    let x = noise(&mut rng(3), 1600, 0.5);
    let mut g = Graph::new();
    let v = g.constant(Tensor::from_vec(vec![x.len()], x.clone()).unwrap());
    let l = loss_ccmse(&mut g, v, &AudioClip::new(x), &LossConfig::default(), &plan).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn bad_loss_settings_are_rejected() {
    for cfg in [
        LossConfig {
            compression: 0.0,
            ..LossConfig::default()
        },
        LossConfig {
            compression: 1.5,
            ..LossConfig::default()
        },
        LossConfig {
            beta: -0.1,
            ..LossConfig::default()
        },
    ] {
        assert!(cfg.validate().is_err());
    }
}

#[test]
fn first_adam_step_matches_closed_form() {
    let cfg = OptimConfig::paper();
    let mut adam = Adam::new([1]);
    let mut theta = Tensor::scalar(1.0);
    adam.update(&mut [&mut theta], &[Tensor::scalar(1.0)], &cfg)
        .unwrap();
    let expect = 1.0 - cfg.lr * cfg.weight_decay - cfg.lr / (1.0 + cfg.eps);
    assert!((theta.item() - expect).abs() < 1e-15);
    assert!((theta.item() - (1.0 - 1.5e-4)).abs() < 1e-8);
}

#[test]
fn zero_gradient_without_decay_is_identity() {
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::paper()
    };
    let mut store = ParamStore::init(&ModelConfig::tiny(), 1).unwrap();
    let before = store.clone();
    let grads: Vec<Tensor> = store
        .trainable()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut adam = Adam::for_store(&store);
    for _ in 0..3 {
        assert!(
            adam_step(&mut store, &grads, &mut adam, &cfg)
                .unwrap()
                .applied
        );
    }
    for (name, t) in before.trainable() {
        assert_eq!(store.get(name).unwrap(), t);
    }
}

#[test]
fn non_finite_gradient_skips_the_step() {
    let cfg = OptimConfig::paper();
    let mut adam = Adam::new([2]);
    let mut theta = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
    let state = adam.clone();
    let g = Tensor::from_vec(vec![2], vec![f64::NAN, 1.0]).unwrap();
    let out = adam.update(&mut [&mut theta], &[g], &cfg).unwrap();
    assert!(!out.applied);
    assert_eq!(theta.data(), &[1.0, 2.0]);
    assert_eq!(adam, state);
}

#[test]
fn gradient_norm_is_clipped() {
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::paper()
    };
    let mut adam = Adam::new([2]);
    let mut theta = Tensor::zeros(&[2]);
    let out = adam
        .update(
            &mut [&mut theta],
            &[Tensor::from_vec(vec![2], vec![6.0, 8.0]).unwrap()],
            &cfg,
        )
        .unwrap();
    assert!(out.clipped);
    assert_eq!(out.grad_norm, 10.0);
    let out = adam
        .update(
            &mut [&mut theta],
            &[Tensor::from_vec(vec![2], vec![0.3, 0.4]).unwrap()],
            &cfg,
        )
        .unwrap();
    assert!(!out.clipped);
}

#[test]
fn lr_scales_linearly_with_batch() {
    let cfg = OptimConfig::linear_scaled(16);
    assert!((cfg.lr - 1.5e-4 * 16.0 / 400.0).abs() < 1e-18);
    assert_eq!(cfg.batch, 16);
    assert!(OptimConfig {
        batch: 0,
        ..OptimConfig::paper()
    }
    .validate()
    .is_err());
}

fn examples(cfg: &ScenarioConfig, n: usize) -> Vec<Example> {
    let plan = StftPlan::new(&StftConfig::default()).unwrap();
    scenario_set(cfg, n)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, s)| Example::from_scenario(format!("c{i}"), s, &plan).unwrap())
        .collect()
}

fn small_set(n: usize, seed: u64) -> Vec<Example> {
    examples(&mix([0.0, 0.3], 1.0, seed), n)
}

fn mix(delay_range: [f64; 2], clip_len: f64, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        delay_range,
        ser_range: Some([-5.0, 10.0]),
        snr_range: Some([20.0, 40.0]),
        rir_decay: Some([0.1, 0.3]),
        nonlinearity: Nonlinearity::None,
        near_prob: 0.5,
        level_range: Some([-15.0, -3.0]),
        clip_len,
        surrogate: true,
        seed,
    }
}

fn tiny_run(epochs: usize, lr: f64) -> TrainConfig {
    let optim = OptimConfig {
        lr,
        epochs,
        batch: 2,
        ..OptimConfig::toy()
    };
    TrainConfig::new(ModelConfig::tiny(), optim, 5)
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let train = small_set(4, 1);
    let mut cfg = tiny_run(3, 0.0);
    cfg.optim.batch = 1;
    let out = train_loop(&cfg, &train, &train[..2], None).unwrap();
    let init = ParamStore::init(&cfg.model, cfg.seed).unwrap();
    for (name, t) in init.trainable() {
        assert_eq!(out.store.get(name).unwrap(), t, "{name}");
    }
    let l: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    assert!(l.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{l:?}");
}

#[test]
fn identical_runs_and_resumed_runs_match_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let train = small_set(4, 2);
    let val = &train[..2];
    let mut cfg = tiny_run(2, 1e-3);
    cfg.checkpoint = Some(dir.path().join("a.acrs"));
    let a = train_loop(&cfg, &train, val, None).unwrap();
    cfg.checkpoint = Some(dir.path().join("b.acrs"));
    let b = train_loop(&cfg, &train, val, None).unwrap();
    assert!(
        std::fs::read(dir.path().join("a.acrs")).unwrap()
            == std::fs::read(dir.path().join("b.acrs")).unwrap()
    );

    let mut half = tiny_run(1, 1e-3);
    half.checkpoint = Some(dir.path().join("c.acrs"));
    train_loop(&half, &train, val, None).unwrap();
    let resumed = train_loop(&cfg, &train, val, Some(&dir.path().join("c.acrs"))).unwrap();
    assert_eq!(resumed.state.epoch, 2);
    assert_eq!(resumed.metrics.len(), 1);
    for name in a.store.names() {
        assert_eq!(
            a.store.get(name).unwrap(),
            resumed.store.get(name).unwrap(),
            "{name}"
        );
        assert_eq!(b.store.get(name).unwrap(), resumed.store.get(name).unwrap());
    }
    assert_eq!(a.adam, resumed.adam);
    assert_eq!(a.metrics[1].loss, resumed.metrics[0].loss);
    assert_eq!(a.metrics[1].val_loss, resumed.metrics[0].val_loss);

    let other_seed = TrainConfig {
        seed: 6,
        ..cfg.clone()
    };
    assert!(train_loop(&other_seed, &train, val, Some(&dir.path().join("c.acrs"))).is_err());
}

#[test]
fn metrics_log_gets_one_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let train = small_set(2, 3);
    let mut cfg = tiny_run(2, 1e-3);
    cfg.metrics = Some(dir.path().join("m.jsonl"));
    train_loop(&cfg, &train, &train, None).unwrap();
    let text = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i + 1);
        for key in ["loss", "val_erle_db", "align_top1", "wall_s"] {
            assert!(l[key].is_number(), "{key}");
        }
    }
    assert!(train_loop(&cfg, &[], &train, None).is_err());
}

#[test]
fn validation_loss_falls_over_first_epochs_at_fixed_delay() {
    let train = examples(&mix([0.3, 0.3], 2.0, 4), 200);
    let far_end_only = ScenarioConfig {
        near_prob: 0.0,
        ser_range: None,
        ..mix([0.3, 0.3], 2.0, 40)
    };
    let val = examples(&far_end_only, 20);
    let cfg = tiny_run(5, 1e-3);
    let cfg = TrainConfig {
        optim: OptimConfig {
            batch: 4,
            ..cfg.optim
        },
        ..cfg
    };
    let out = train_loop(&cfg, &train, &val, None).unwrap();
    let v: Vec<f64> = out.metrics.iter().map(|m| m.val_loss.unwrap()).collect();
    assert!(v.windows(2).all(|w| w[1] < w[0]), "{v:?}");
}
