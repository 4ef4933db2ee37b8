mod common;

use std::f64::consts::PI;

use align_cruse::dsp::{
    istft, log_power, make_sqrt_hann, read_wav, stft, write_wav, AudioClip, SpectralFrames,
    StftConfig, StftPlan, WavChunkReader, WavStreamWriter,
};
use align_cruse::Error;
use common::{noise, rng};
use num_complex::Complex64;

/// Direct O(n^2) DFT of one windowed frame, bins 0..=n/2.
fn dft_oracle(frame: &[f64], window: &[f64]) -> Vec<Complex64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            (0..n)
                .map(|i| {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    Complex64::from_polar(frame[i] * window[i], ang)
                })
                .sum()
        })
        .collect()
}

#[test]
fn sqrt_hann_hand_values() {
    let w = make_sqrt_hann(4).unwrap();
    let expect = [0.0, 0.5f64.sqrt(), 1.0, 0.5f64.sqrt()];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let w = make_sqrt_hann(320).unwrap();
    assert_eq!(w[0], 0.0);
    let peak = w
        .iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    assert_eq!(peak.0, 160);
    assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
    for (i, v) in w.iter().enumerate() {
        assert!((v - (0.5 - 0.5 * (2.0 * PI * i as f64 / 320.0).cos()).sqrt()).abs() < 1e-15);
    }
}

#[test]
fn sqrt_hann_is_cola_at_half_overlap() {
    for n in [4, 16, 320] {
        let w = make_sqrt_hann(n).unwrap();
        for i in 0..n / 2 {
            let s = w[i] * w[i] + w[i + n / 2] * w[i + n / 2];
            assert!((s - 1.0).abs() < 1e-12, "n={n} i={i}");
        }
    }
}

#[test]
fn sqrt_hann_rejects_bad_lengths() {
    for n in [0, 1, 3, 321] {
        assert!(matches!(make_sqrt_hann(n), Err(Error::Config(_))), "n={n}");
    }
}

#[test]
fn config_defaults() {
    let cfg = StftConfig::default();
    assert_eq!(
        (
            cfg.sample_rate,
            cfg.win_len,
            cfg.hop,
            cfg.fft_len,
            cfg.bins()
        ),
        (16000, 320, 160, 320, 161)
    );
    assert_eq!(cfg.frame_count(480), 2);
    assert_eq!(cfg.frame_count(319), 0);
    assert_eq!(cfg.frame_count(320), 1);
}

#[test]
fn bin5_cosine_matches_direct_dft() {
    let cfg = StftConfig::default();
    let x: Vec<f64> = (0..1600)
        .map(|n| (2.0 * PI * 250.0 * n as f64 / 16000.0).cos())
        .collect();
    let spec = stft(&AudioClip::new(x.clone()), &cfg).unwrap();
    let w = make_sqrt_hann(320).unwrap();
    for t in 0..spec.frames {
        let oracle = dft_oracle(&x[t * 160..t * 160 + 320], &w);
        let mut worst: f64 = 0.0;
        for (a, b) in spec.frame(t).iter().zip(&oracle) {
            worst = worst.max((a - b).norm());
        }
        assert!(worst < 1e-9, "frame {t}: {worst}");
        let mags: Vec<f64> = spec.frame(t).iter().map(|c| c.norm()).collect();
        let arg = mags
            .iter()
            .cloned()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        assert_eq!(arg, 5);
    }
}

#[test]
fn random_frames_match_direct_dft() {
    let mut r = rng(1);
    let x = noise(&mut r, 960, 1.0);
    let spec = stft(&AudioClip::new(x.clone()), &StftConfig::default()).unwrap();
    let w = make_sqrt_hann(320).unwrap();
    for t in 0..spec.frames {
        let oracle = dft_oracle(&x[t * 160..t * 160 + 320], &w);
        for (a, b) in spec.frame(t).iter().zip(&oracle) {
            assert!((a - b).norm() < 1e-9);
        }
    }
}

#[test]
fn round_trip_on_100_random_clips() {
    let cfg = StftConfig::default();
    let plan = StftPlan::new(&cfg).unwrap();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let len = 1600 + 37 * i;
        let x = noise(&mut r, len, 1.0);
        let y = plan.istft(&plan.stft(&x).unwrap()).unwrap();
        for n in 320..len - 320 {
            worst = worst.max((x[n] - y[n]).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn zero_in_zero_out() {
    let cfg = StftConfig::default();
    let spec = stft(&AudioClip::zeros(800), &cfg).unwrap();
    assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    let y = istft(&SpectralFrames::zeros(4, &cfg), &cfg).unwrap();
    assert!(y.samples.iter().all(|v| *v == 0.0));
}

#[test]
fn dc_bin_inverts_to_window() {
    let cfg = StftConfig::default();
    let mut spec = SpectralFrames::zeros(1, &cfg);
    spec.frame_mut(0)[0] = Complex64::new(1.0, 0.0);
    let y = istft(&spec, &cfg).unwrap();
    let w = make_sqrt_hann(320).unwrap();
    for i in 0..320 {
        assert!((y.samples[i] - w[i] / 320.0).abs() < 1e-15, "i={i}");
    }
}

#[test]
fn stft_is_linear() {
    let plan = StftPlan::new(&StftConfig::default()).unwrap();
    let mut r = rng(3);
    let (x, y) = (noise(&mut r, 1200, 1.0), noise(&mut r, 1200, 1.0));
    let (a, b) = (0.7, -1.3);
    let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
    let (sx, sy, sz) = (
        plan.stft(&x).unwrap(),
        plan.stft(&y).unwrap(),
        plan.stft(&z).unwrap(),
    );
    for ((cx, cy), cz) in sx.data.iter().zip(&sy.data).zip(&sz.data) {
        assert!((cx * a + cy * b - cz).norm() < 1e-9);
    }
}

#[test]
fn stft_is_causal() {
    let plan = StftPlan::new(&StftConfig::default()).unwrap();
    let mut r = rng(4);
    let x = noise(&mut r, 3200, 1.0);
    let base = plan.stft(&x).unwrap();
    for k in [0usize, 3, 10] {
        let cut = k * 160 + 320;
        let mut y = x.clone();
        for v in &mut y[cut..] {
            *v += 5.0;
        }
        let pert = plan.stft(&y).unwrap();
        for t in 0..=k {
            assert_eq!(
                base.frame(t),
                pert.frame(t),
                "frame {t} after perturbing from {cut}"
            );
        }
        assert_ne!(base.frame(k + 1), pert.frame(k + 1));
    }
}

#[test]
fn parseval_per_frame() {
    let cfg = StftConfig::default();
    let mut r = rng(5);
    let x = noise(&mut r, 320, 1.0);
    let w = make_sqrt_hann(320).unwrap();
    let spec = stft(&AudioClip::new(x.clone()), &cfg).unwrap();
    let time: f64 = x.iter().zip(&w).map(|(a, b)| (a * b).powi(2)).sum();
    let f = spec.frame(0);
    // full spectrum: bins 1..159 appear twice through conjugate symmetry
    let full: f64 = f[0].norm_sqr()
        + f[160].norm_sqr()
        + 2.0 * f[1..160].iter().map(|c| c.norm_sqr()).sum::<f64>();
    assert!((time - full / 320.0).abs() / time < 1e-9);
}

#[test]
fn log_power_examples() {
    let cfg = StftConfig::default();
    let mut spec = SpectralFrames::zeros(2, &cfg);
    for c in spec.frame_mut(0) {
        *c = Complex64::new(0.6, 0.8);
    }
    for c in spec.frame_mut(1).iter_mut().take(3) {
        *c = Complex64::new(std::f64::consts::E, 0.0);
    }
    let lp = log_power(&spec);
    assert_eq!(lp.shape(), &[1, 2, 161]);
    assert!(lp.data()[..161].iter().all(|v| v.abs() < 1e-11));
    for v in &lp.data()[161..164] {
        assert!((v - 2.0).abs() < 1e-12);
    }
    for v in &lp.data()[164..] {
        assert!((v - 1e-12f64.ln()).abs() < 1e-12);
        assert!((v + 27.631).abs() < 1e-3);
    }
}

#[test]
fn short_clip_and_bin_mismatch_are_errors() {
    let cfg = StftConfig::default();
    assert!(matches!(
        stft(&AudioClip::zeros(319), &cfg),
        Err(Error::EmptyFrames { .. })
    ));
    let mut bad = SpectralFrames::zeros(2, &cfg);
    bad.bins = 100;
    bad.data.truncate(200);
    assert!(matches!(istft(&bad, &cfg), Err(Error::Shape(_))));
}

#[test]
fn non_finite_input_is_rejected() {
    let clip = AudioClip::new(vec![0.0, f64::NAN, 0.0]);
    assert!(clip.check().is_err());
}

#[test]
fn wav_round_trip_quantizes_to_16_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.wav");
    let mut r = rng(6);
    let x = AudioClip::new(noise(&mut r, 1000, 0.9));
    write_wav(&path, &x).unwrap();
    let y = read_wav(&path).unwrap();
    assert_eq!(y.sample_rate, 16000);
    assert_eq!(y.len(), 1000);
    for (a, b) in x.samples.iter().zip(&y.samples) {
        assert!((a - b).abs() <= 1.0 / 32768.0);
        assert_eq!((b * 32768.0).fract(), 0.0);
    }
    let mut reader = WavChunkReader::open(&path).unwrap();
    let mut streamed = Vec::new();
    loop {
        let c = reader.read_chunk(160).unwrap();
        if c.is_empty() {
            break;
        }
        streamed.extend(c);
    }
    assert_eq!(streamed, y.samples);
    let copy = dir.path().join("y.wav");
    let mut w = WavStreamWriter::create(&copy).unwrap();
    for c in y.samples.chunks(333) {
        w.write(c).unwrap();
    }
    w.finish().unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
}
