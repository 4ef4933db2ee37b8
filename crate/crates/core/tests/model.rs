mod common;

use align_cruse::autodiff::{kernels, Graph, Tensor};
use align_cruse::dsp::{stft, StftConfig};
use align_cruse::error::Error;
use align_cruse::model::{
    align_block, apply_mask, cruse_forward, enhance, infer, skip_block, AlignMode, EnhanceOptions,
    Enhancer, ModelConfig, ParamStore, StreamState, Variant,
};
use common::*;
use rand::Rng;

fn random_feats(seed: u64, t: usize) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let n = StftConfig::default().signal_len(t);
    (
        features(&noise(&mut r, n, 0.3)),
        features(&noise(&mut r, n, 0.3)),
    )
}

#[test]
fn mask_shape_and_bounds() {
    for variant in [Variant::AlignCruse, Variant::Cruse] {
        let cfg = ModelConfig::tiny().with_variant(variant);
        let store = frozen_store(&cfg, 1);
        for t in [1, 5] {
            let (m, f) = random_feats(t as u64, t);
            let (mask, delay) = infer(&store, &m, &f, AlignMode::Utterance).unwrap();
            assert_eq!(mask.shape(), &[1, t, 161]);
            let g = store.gain();
            assert!(mask.data().iter().all(|&v| (0.0..=g).contains(&v)));
            assert_eq!(delay.is_some(), variant == Variant::AlignCruse);
            if let Some(d) = delay {
                assert!(d.is_normalized(1e-6));
                assert!(d.argmax() < cfg.d_max);
            }
        }
    }
}

#[test]
fn bias_only_pathway_gives_constant_mask() {
    let cfg = ModelConfig::tiny();
    let mut store = frozen_store(&cfg, 2);
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names
        .iter()
        .filter(|n| n.ends_with(".w") || n.ends_with(".w_ih") || n.ends_with(".w_hh"))
    {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, Tensor::zeros(&shape)).unwrap();
    }
    store.set("mask.b", Tensor::full(&[1], 0.3)).unwrap();
    store.set("mask.gain", Tensor::full(&[1], 1.7)).unwrap();
    let z = Tensor::zeros(&[1, 12, 161]);
    let (mask, _) = infer(&store, &z, &z, AlignMode::Causal).unwrap();
    let expect = 1.7 * kernels::sigmoid(0.3);
    assert!(mask.data().iter().all(|&v| (v - expect).abs() < 1e-15));
}

#[test]
fn inference_needs_frozen_statistics() {
    let store = ParamStore::init(&ModelConfig::tiny(), 0).unwrap();
    let (m, f) = random_feats(0, 3);
    assert!(matches!(
        infer(&store, &m, &f, AlignMode::Causal),
        Err(Error::Contract(_))
    ));
    assert!(Enhancer::new(&store, false).is_err());
}

#[test]
fn branch_shape_mismatch_is_rejected() {
    let store = frozen_store(&ModelConfig::tiny(), 0);
    let (m, _) = random_feats(0, 4);
    let (f, _) = random_feats(0, 5);
    assert!(matches!(
        infer(&store, &m, &f, AlignMode::Causal),
        Err(Error::Shape(_))
    ));
}

fn stream_matches_one_shot(variant: Variant) {
    let cfg = ModelConfig::tiny().with_variant(variant);
    let store = frozen_store(&cfg, 3);
    let t = 70;
    let (m, f) = random_feats(30, t);
    let (mask, delay) = infer(&store, &m, &f, AlignMode::Causal).unwrap();
    let mut st = StreamState::new(&cfg).unwrap();
    let mut worst = 0.0f64;
    for tt in 0..t {
        let row = |x: &Tensor| x.data()[tt * 161..(tt + 1) * 161].to_vec();
        let (mrow, drow) = st.step(&store, &row(&m), &row(&f)).unwrap();
        for (a, b) in mrow.iter().zip(&mask.data()[tt * 161..(tt + 1) * 161]) {
            worst = worst.max((a - b).abs());
        }
        if let (Some(dr), Some(d)) = (drow, &delay) {
            for (a, b) in dr.iter().zip(d.row(tt)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    assert!(worst < 1e-6, "{variant:?}: {worst}");
}

#[test]
fn streaming_engine_matches_graph() {
    stream_matches_one_shot(Variant::AlignCruse);
    stream_matches_one_shot(Variant::Cruse);
}

#[test]
fn chunked_enhance_matches_one_shot() {
    let cfg = ModelConfig::tiny();
    let store = frozen_store(&cfg, 4);
    let mut r = rng(40);
    let n = 16000 + 77;
    let mic = noise(&mut r, n, 0.5);
    let far = noise(&mut r, n, 0.5);
    let (one, _) = enhance(
        &store,
        &clip(mic.clone()),
        &clip(far.clone()),
        EnhanceOptions::default(),
    )
    .unwrap();
    assert_eq!(one.len(), n);
    for sizes in [vec![160], vec![1, 33, 500, 7]] {
        let mut e = Enhancer::new(&store, false).unwrap();
        let mut out = Vec::new();
        let (mut pos, mut k) = (0, 0);
        while pos < n {
            let len = sizes[k % sizes.len()].min(n - pos);
            out.extend(e.push(&mic[pos..pos + len], &far[pos..pos + len]).unwrap());
            pos += len;
            k += 1;
        }
        assert!(e.delay().is_some());
        out.extend(e.finish());
        assert_eq!(out.len(), n);
        let worst = out
            .iter()
            .zip(&one.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }
}

#[test]
fn unit_mask_reconstructs_microphone() {
    let store = ParamStore::init(&ModelConfig::tiny(), 0).unwrap();
    let mut r = rng(5);
    let mic = noise(&mut r, 8000, 0.8);
    let opts = EnhanceOptions {
        unit_mask: true,
        ..Default::default()
    };
    let (out, d) = enhance(&store, &clip(mic.clone()), &clip(vec![0.0; 8000]), opts).unwrap();
    assert!(d.is_none());
    for i in 320..8000 - 320 {
        assert!((out.samples[i] - mic[i]).abs() < 1e-6);
    }
    let mut e = Enhancer::new(&store, true).unwrap();
    let mut s = e.push(&mic, &[0.0; 8000]).unwrap();
    s.extend(e.finish());
    assert_eq!(s, out.samples);
}

#[test]
fn silent_far_end_keeps_delay_well_formed() {
    let store = frozen_store(&ModelConfig::tiny(), 6);
    let mut r = rng(6);
    let mic = noise(&mut r, 6400, 0.5);
    for mode in [AlignMode::Utterance, AlignMode::Causal] {
        let opts = EnhanceOptions {
            align: mode,
            unit_mask: false,
        };
        let (out, d) = enhance(&store, &clip(mic.clone()), &clip(vec![0.0; 6400]), opts).unwrap();
        assert!(out.samples.iter().all(|v| v.is_finite()));
        assert!(d.unwrap().is_normalized(1e-6));
    }
}

#[test]
fn enhance_is_causal() {
    let store = frozen_store(&ModelConfig::tiny(), 7);
    let mut r = rng(7);
    let n = 12000;
    let mic = noise(&mut r, n, 0.5);
    let far = noise(&mut r, n, 0.5);
    let (base, _) = enhance(
        &store,
        &clip(mic.clone()),
        &clip(far.clone()),
        EnhanceOptions::default(),
    )
    .unwrap();
    for k in [0usize, 10, 40] {
        let cut = k * 160 + 320;
        let (mut m2, mut f2) = (mic.clone(), far.clone());
        for i in cut..n {
            m2[i] += r.random_range(-0.3..0.3);
            f2[i] -= r.random_range(-0.3..0.3);
        }
        let (out, _) = enhance(&store, &clip(m2), &clip(f2), EnhanceOptions::default()).unwrap();
        assert_eq!(&out.samples[..=k * 160], &base.samples[..=k * 160]);
        assert_ne!(out.samples[n - 400], base.samples[n - 400]);
    }
}

#[test]
fn skip_block_cases() {
    let mut r = rng(8);
    let enc = rand_tensor(&mut r, &[3, 4, 5]);
    let dec = rand_tensor(&mut r, &[2, 4, 5]);
    let run = |w: &Tensor, b: &Tensor, enc: &Tensor, dec: &Tensor| {
        let mut g = Graph::new();
        let (e, d, wv, bv) = (
            g.constant(enc.clone()),
            g.constant(dec.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = skip_block(&mut g, e, d, wv, bv).unwrap();
        g.value(y).clone()
    };
    assert_eq!(
        run(
            &Tensor::zeros(&[2, 3, 1, 1]),
            &Tensor::zeros(&[2]),
            &enc,
            &dec
        ),
        dec
    );
    let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    assert_eq!(
        run(&eye, &Tensor::zeros(&[3]), &enc, &Tensor::zeros(&[3, 4, 5])),
        enc
    );
    let w = rand_tensor(&mut r, &[2, 3, 1, 1]);
    let b = rand_tensor(&mut r, &[2]);
    let y = run(&w, &b, &enc, &dec);
    for o in 0..2 {
        for i in 0..20 {
            let mut s = b.data()[o] + dec.data()[o * 20 + i];
            for c in 0..3 {
                s += w.data()[o * 3 + c] * enc.data()[c * 20 + i];
            }
            assert!((y.data()[o * 20 + i] - s).abs() < 1e-12);
        }
    }
    let mut g = Graph::new();
    let (e, d) = (g.constant(enc), g.constant(Tensor::zeros(&[2, 4, 6])));
    let (wv, bv) = (g.constant(w), g.constant(b));
    assert!(skip_block(&mut g, e, d, wv, bv).is_err());
}

#[test]
fn apply_mask_cases() {
    let mut r = rng(9);
    let spec = stft(&clip(noise(&mut r, 3200, 1.0)), &StftConfig::default()).unwrap();
    let shape = [1, spec.frames, spec.bins];
    assert_eq!(apply_mask(&Tensor::full(&shape, 1.0), &spec).unwrap(), spec);
    let z = apply_mask(&Tensor::zeros(&shape), &spec).unwrap();
    assert!(z.data.iter().all(|c| c.norm() == 0.0));
    let m = rand_tensor(&mut r, &shape).map(f64::abs);
    let out = apply_mask(&m, &spec).unwrap();
    for ((o, s), mv) in out.data.iter().zip(&spec.data).zip(m.data()) {
        assert!((o.norm() - mv * s.norm()).abs() < 1e-12);
        if s.norm() > 0.0 && *mv > 0.0 {
            assert!((o.arg() - s.arg()).abs() < 1e-12);
        }
    }
    let mut neg = m.clone();
    neg.data_mut()[3] = -0.1;
    assert!(matches!(apply_mask(&neg, &spec), Err(Error::Contract(_))));
}

/// Store whose projections are identities on a shared channel count `c`.
fn identity_align_store(c: usize) -> ParamStore {
    let mut cfg = ModelConfig::tiny();
    cfg.mic_channels[1] = c;
    cfg.far_channels[1] = c;
    cfg.align_proj = 10 * c;
    let mut store = ParamStore::init(&cfg, 0).unwrap();
    let n = 10 * c;
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = 1.0;
    }
    store.set("align.q.w", eye.clone()).unwrap();
    store.set("align.k.w", eye).unwrap();
    store
}

#[test]
fn align_recovers_known_delay_with_identity_projections() {
    let c = 3;
    let store = identity_align_store(c);
    let t = 100;
    let mut r = rng(10);
    for d0 in [0usize, 3, 17, 30, 45] {
        // constant 4-bin windows keep pooled features zero mean
        let mut far = Tensor::zeros(&[c, t, 41]);
        for ch in 0..c {
            for tt in 0..t {
                for j in 0..10 {
                    let v: f64 = r.random_range(-1.0..1.0);
                    for b in 0..4 {
                        far.data_mut()[(ch * t + tt) * 41 + 4 * j + b] = v;
                    }
                }
            }
        }
        let mut mic = Tensor::zeros(&[c, t, 41]);
        for ch in 0..c {
            for tt in d0..t {
                let src = (ch * t + tt - d0) * 41;
                let dst = (ch * t + tt) * 41;
                let row = far.data()[src..src + 41].to_vec();
                mic.data_mut()[dst..dst + 41].copy_from_slice(&row);
            }
        }
        for mode in [AlignMode::Utterance, AlignMode::Causal] {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let (xm, xf) = (g.constant(mic.clone()), g.constant(far.clone()));
            let (aligned, probs) = align_block(&mut g, store.config(), &p, xm, xf, mode).unwrap();
            let pr = g.value(probs).data();
            let last = &pr[pr.len() - store.config().d_max..];
            assert_eq!(align_cruse::model::argmax(last), d0, "{mode:?}");
            if mode == AlignMode::Utterance {
                // near one-hot, so the aligned far end reproduces the microphone
                assert!(g.value(aligned).max_abs_diff(&mic) < 1e-6);
            }
        }
    }
}

#[test]
fn parameter_counts_are_ordered() {
    for cfg in [ModelConfig::paper(), ModelConfig::tiny()] {
        let a = ParamStore::init(&cfg, 0).unwrap();
        let b = ParamStore::init(&cfg.clone().with_variant(Variant::Cruse), 0).unwrap();
        let n = 10 * (cfg.mic_channels[1] + cfg.far_channels[1]);
        assert_eq!(
            a.param_count() - b.param_count(),
            n * cfg.align_proj + 2 * cfg.align_proj
        );
    }
}

#[test]
fn cruse_forward_contract() {
    let cfg = ModelConfig::tiny().with_variant(Variant::Cruse);
    let store = frozen_store(&cfg, 11);
    let (m, f) = random_feats(11, 6);
    let mut stacked = m.data().to_vec();
    stacked.extend_from_slice(f.data());
    let stacked = Tensor::from_vec(vec![2, 6, 161], stacked).unwrap();
    let mask = cruse_forward(&store, &stacked).unwrap();
    assert_eq!(mask.shape(), &[1, 6, 161]);
    assert_eq!(mask, infer(&store, &m, &f, AlignMode::Causal).unwrap().0);
    assert!(cruse_forward(&frozen_store(&ModelConfig::tiny(), 0), &stacked).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let store = frozen_store(&ModelConfig::tiny(), 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.acrs");
    store.save(&path).unwrap();
    let back = ParamStore::load(&path).unwrap();
    assert_eq!(back, store);
    let (m, f) = random_feats(12, 8);
    assert_eq!(
        infer(&store, &m, &f, AlignMode::Causal).unwrap().0,
        infer(&back, &m, &f, AlignMode::Causal).unwrap().0
    );
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"ACRS");
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(ParamStore::load(&path), Err(Error::Format(_))));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for v in [Variant::AlignCruse, Variant::Cruse] {
        let e = end_to_end_check(v, 13);
        assert!(e < 1e-3, "{v:?}: {e}");
    }
}
