mod common;

use align_cruse::alignment::{
    apply_delay, cross_correlation, global_delay, normalized_correlation, online_track,
    OnlineAligner, OnlineConfig,
};
use align_cruse::data::speech_surrogate;
use align_cruse::dsp::AudioClip;
use align_cruse::Error;
use common::{clip, noise, rng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn white(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

#[test]
fn fft_correlation_matches_direct_sum() {
    let mut r = rng(1);
    let (a, b) = (noise(&mut r, 700, 1.0), noise(&mut r, 500, 1.0));
    let fast = cross_correlation(&a, &b, 300);
    for (d, f) in fast.iter().enumerate() {
        let direct: f64 = (d..a.len())
            .filter(|n| n - d < b.len())
            .map(|n| a[n] * b[n - d])
            .sum();
        assert!((f - direct).abs() < 1e-9, "lag {d}: {f} vs {direct}");
    }
}

#[test]
fn identical_signals_give_zero_delay_full_confidence() {
    let x = clip(white(2, 16000));
    let est = global_delay(&x, &x, 4000).unwrap();
    assert_eq!(est.delay, 0);
    assert!((est.confidence - 1.0).abs() < 1e-9);
}

#[test]
fn injected_delay_recovered_exactly() {
    let far = clip(white(3, 32000));
    let mic = apply_delay(&far, 4800);
    let est = global_delay(&mic, &far, 16000).unwrap();
    assert_eq!(est.delay, 4800);
}

#[test]
fn noiseless_delays_across_the_range_are_exact() {
    let far = clip(white(4, 40000));
    let mut r = rng(5);
    for i in 0..40 {
        let d = if i == 0 {
            0
        } else if i == 1 {
            16000
        } else {
            r.random_range(0..=16000)
        };
        let mic = apply_delay(&far, d);
        assert_eq!(global_delay(&mic, &far, 16000).unwrap().delay, d);
    }
}

#[test]
fn recovery_at_20db_snr() {
    let mut ok = 0;
    for seed in 0..100 {
        let far = white(100 + seed, 24000);
        let echo = apply_delay(&clip(far.clone()), 8000)
            .samples
            .iter()
            .map(|v| 0.5 * v)
            .collect::<Vec<_>>();
        let p_echo = echo[8000..].iter().map(|v| v * v).sum::<f64>() / (echo.len() - 8000) as f64;
        let sigma = (p_echo / 100.0).sqrt();
        let n = white(1000 + seed, echo.len());
        let mic: Vec<f64> = echo.iter().zip(&n).map(|(e, w)| e + sigma * w).collect();
        let est = global_delay(&clip(mic), &clip(far), 16000).unwrap();
        if est.delay == 8000 && est.confidence > 0.4 {
            ok += 1;
        }
    }
    assert!(ok >= 99, "{ok}/100");
}

#[test]
fn confidence_stays_in_unit_interval() {
    let mut r = rng(6);
    for _ in 0..10 {
        let a = noise(&mut r, 3000, 1.0);
        let b = noise(&mut r, 2500, 3.0);
        for v in normalized_correlation(&a, &b, 2000) {
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        }
    }
}

#[test]
fn silent_far_end_is_an_error() {
    let mic = clip(white(7, 16000));
    let far = AudioClip::zeros(16000);
    assert!(matches!(
        global_delay(&mic, &far, 100),
        Err(Error::NoSignal(_))
    ));
}

#[test]
fn apply_delay_examples() {
    let x = clip(white(8, 1000));
    assert_eq!(apply_delay(&x, 0), x);
    let mut imp = vec![0.0; 400];
    imp[0] = 1.0;
    let y = apply_delay(&clip(imp), 160);
    assert_eq!(y.samples[160], 1.0);
    assert_eq!(y.samples.iter().filter(|v| **v != 0.0).count(), 1);
    assert_eq!(y.len(), 400);
    let z = apply_delay(&x, 5000);
    assert!(z.samples.iter().all(|v| *v == 0.0));
}

fn speech(seed: u64, n: usize) -> Vec<f64> {
    speech_surrogate(&mut rng(seed), n)
}

#[test]
fn online_converges_and_holds_on_constant_delay() {
    let far = speech(9, 16000 * 8);
    let mic = apply_delay(&clip(far.clone()), 8000);
    let est = online_track(&mic, &clip(far), &OnlineConfig::default()).unwrap();
    let trace = est.per_frame.unwrap();
    let first = trace
        .iter()
        .position(|&d| d.abs_diff(8000) <= 160)
        .expect("never converged");
    assert!(
        first * 160 <= 3 * 16000,
        "converged after {} s",
        first as f64 / 100.0
    );
    assert!(trace[first..].iter().all(|&d| d.abs_diff(8000) <= 160));
    assert_eq!(est.delay, 8000);
}

#[test]
fn online_follows_a_delay_step() {
    let n = 16000 * 12;
    let far = speech(10, n);
    let half = n / 2;
    let mut mic = apply_delay(&clip(far.clone()), 4800).samples;
    let late = apply_delay(&clip(far.clone()), 9600).samples;
    mic[half..].copy_from_slice(&late[half..]);
    let est = online_track(&clip(mic), &clip(far), &OnlineConfig::default()).unwrap();
    let trace = est.per_frame.unwrap();
    let hit = trace[half / 160..]
        .iter()
        .position(|&d| d.abs_diff(9600) <= 160)
        .expect("step not followed");
    assert!(
        hit * 160 <= 4 * 16000,
        "followed after {} s",
        hit as f64 / 100.0
    );
}

#[test]
fn online_warms_up_then_holds_through_silence() {
    let cfg = OnlineConfig::default();
    let far = speech(11, 16000 * 4);
    let mic = apply_delay(&clip(far.clone()), 3200);
    let mut al = OnlineAligner::new(cfg.clone()).unwrap();
    let hops = far.len() / cfg.hop;
    let mut last = None;
    for k in 0..hops {
        let r = k * cfg.hop..(k + 1) * cfg.hop;
        let e = al.push(&mic.samples[r.clone()], &far[r]).unwrap();
        if (k + 1) * cfg.hop < cfg.warmup {
            assert_eq!(e.confidence, 0.0);
        }
        last = Some(e);
    }
    let before = last.unwrap();
    assert!(before.confidence > 0.0);
    let silent = vec![0.0; cfg.hop];
    let mut conf = before.confidence;
    for _ in 0..20 {
        let e = al.push(&silent, &silent).unwrap();
        assert_eq!(e.delay, before.delay);
        assert!(e.confidence < conf);
        conf = e.confidence;
    }
}

#[test]
fn online_estimate_ignores_future_samples() {
    let cfg = OnlineConfig::default();
    let far = speech(12, 16000 * 5);
    let mic = apply_delay(&clip(far.clone()), 4000).samples;
    let base = online_track(&clip(mic.clone()), &clip(far.clone()), &cfg)
        .unwrap()
        .per_frame
        .unwrap();
    let cut = 16000 * 3;
    let mut m2 = mic.clone();
    let mut f2 = far.clone();
    let mut r = rng(13);
    for i in cut..m2.len() {
        m2[i] = r.random_range(-1.0..1.0);
        f2[i] = r.random_range(-1.0..1.0);
    }
    let pert = online_track(&clip(m2), &clip(f2), &cfg)
        .unwrap()
        .per_frame
        .unwrap();
    let k = cut / cfg.hop;
    assert_eq!(base[..k], pert[..k]);
}

#[test]
fn online_rejects_bad_frames() {
    let mut al = OnlineAligner::new(OnlineConfig::default()).unwrap();
    assert!(matches!(
        al.push(&[0.0; 10], &[0.0; 10]),
        Err(Error::Shape(_))
    ));
    let bad = OnlineConfig {
        hop: 0,
        ..OnlineConfig::default()
    };
    assert!(OnlineAligner::new(bad).is_err());
}
