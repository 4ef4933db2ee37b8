#![allow(dead_code)]

use std::sync::Arc;

use align_cruse::autodiff::{grad_check_at, Tensor};
use align_cruse::dsp::{log_power, AudioClip, StftConfig, StftPlan};
use align_cruse::model::{forward, ForwardOptions, ModelConfig, ParamStore, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn noise(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), noise(rng, n, 1.0)).unwrap()
}

/// Parameters with randomized running statistics, ready for inference.
pub fn frozen_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let t = store.get(&name).unwrap().clone();
        let data: Vec<f64> = if name.ends_with(".bn.mean") {
            t.data().iter().map(|_| r.random_range(-1.0..1.0)).collect()
        } else if name.ends_with(".bn.var") {
            t.data().iter().map(|_| r.random_range(0.5..2.0)).collect()
        } else {
            continue;
        };
        store
            .set(&name, Tensor::from_vec(t.shape().to_vec(), data).unwrap())
            .unwrap();
    }
    store.freeze_bn();
    store
}

pub fn features(samples: &[f64]) -> Tensor {
    let plan = StftPlan::new(&StftConfig::default()).unwrap();
    log_power(&plan.stft(samples).unwrap())
}

pub fn clip(samples: Vec<f64>) -> AudioClip {
    AudioClip::new(samples)
}

/// Tiny network, training-mode forward, full consistency loss.
pub fn end_to_end_check(variant: Variant, seed: u64) -> f64 {
    let cfg = ModelConfig::tiny().with_variant(variant);
    let store = ParamStore::init(&cfg, seed).unwrap();
    let t = 6;
    let n = StftConfig::default().signal_len(t);
    let mut r = rng(seed);
    let mic = noise(&mut r, n, 0.5);
    let far = noise(&mut r, n, 0.5);
    let plan = Arc::new(StftPlan::new(&StftConfig::default()).unwrap());
    let mic_spec = plan.stft(&mic).unwrap().to_planes();
    let target = plan.stft(&noise(&mut r, n, 0.2)).unwrap().to_planes();
    let mut inputs = vec![features(&mic), features(&far)];
    inputs.extend(store.trainable().map(|(_, t)| t.clone()));
    let mut probes: Vec<(usize, usize)> = (0..2)
        .flat_map(|i| (0..t * 161).step_by(7).map(move |j| (i, j)))
        .collect();
    for _ in 0..300 {
        let i = r.random_range(2..inputs.len());
        probes.push((i, r.random_range(0..inputs[i].len())));
    }
    let res = grad_check_at(&inputs, &probes, 1e-5, |g, v| {
        let p = store.bind_with(g, &v[2..])?;
        let out = forward(g, &store, &p, v[0], v[1], ForwardOptions::train())?;
        let est = g.apply_mask(out.mask, &mic_spec)?;
        let y = g.istft(est, &plan)?;
        let s = g.stft(y, &plan)?;
        g.ccmse(s, &target, 0.3, 0.7)
    })
    .unwrap();
    res.max_rel_error
}
