//! Cross-correlation delay estimators: whole-clip (global) and frame-rate
//! causal tracking (online).

mod online;

pub use online::{online_track, OnlineAligner, OnlineConfig};

use log::warn;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Energy below which a signal counts as silent.
pub const SILENCE_ENERGY: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    /// Samples by which the microphone lags the far end.
    pub delay: usize,
    /// Normalized correlation at `delay`, in `[-1, 1]`.
    pub confidence: f64,
    /// Frame-rate trace from the online estimator.
    pub per_frame: Option<Vec<usize>>,
}

/// `c[d] = sum_n a[n] * b[n - d]` for `d` in `0..=max_lag`, via FFT.
pub fn cross_correlation(a: &[f64], b: &[f64], max_lag: usize) -> Vec<f64> {
    let n = (a.len() + b.len()).next_power_of_two().max(2);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f64]| {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for (o, &s) in v.iter_mut().zip(x) {
            o.re = s;
        }
        v
    };
    let (mut fa, mut fb) = (load(a), load(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y.conj();
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    (0..=max_lag)
        .map(|d| if d < n { fa[d].re * scale } else { 0.0 })
        .collect()
}

/// Cosine similarity between `mic` and `far` delayed by each `d` in
/// `0..=max_lag`. Lags with a silent overlap score zero.
pub fn normalized_correlation(mic: &[f64], far: &[f64], max_lag: usize) -> Vec<f64> {
    let raw = cross_correlation(mic, far, max_lag);
    let e_mic: f64 = mic.iter().map(|v| v * v).sum();
    // far[0..k] energies: the part of the delayed far end inside the mic span
    let mut prefix = Vec::with_capacity(far.len() + 1);
    prefix.push(0.0);
    for v in far {
        prefix.push(prefix.last().unwrap() + v * v);
    }
    raw.iter()
        .enumerate()
        .map(|(d, &c)| {
            let k = mic.len().saturating_sub(d).min(far.len());
            let denom = (e_mic * prefix[k]).sqrt();
            if denom > SILENCE_ENERGY {
                (c / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Correlation of a microphone window against a far-end segment that starts
/// `max_lag` samples earlier: entry `d` pairs `mic[j]` with
/// `far[j + max_lag - d]`. `None` when the microphone window is silent.
fn normalized_window(mic: &[f64], far: &[f64], max_lag: usize) -> Option<Vec<f64>> {
    let e_mic: f64 = mic.iter().map(|v| v * v).sum();
    if e_mic <= SILENCE_ENERGY {
        return None;
    }
    let raw = cross_correlation(far, mic, max_lag);
    let mut prefix = Vec::with_capacity(far.len() + 1);
    prefix.push(0.0);
    for v in far {
        prefix.push(prefix.last().unwrap() + v * v);
    }
    let w = mic.len();
    Some(
        (0..=max_lag)
            .map(|d| {
                let e = max_lag - d;
                let denom =
                    (e_mic * (prefix[(e + w).min(far.len())] - prefix[e.min(far.len())])).sqrt();
                if denom > SILENCE_ENERGY {
                    (raw[e] / denom).clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// Index of the maximum, lowest index on ties.
fn peak(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Whole-clip estimate: the lag in `[0, max_delay]` with the highest
/// normalized correlation between `mic` and the delayed `far`.
pub fn global_delay(mic: &AudioClip, far: &AudioClip, max_delay: usize) -> Result<DelayEstimate> {
    mic.check()?;
    far.check()?;
    if far.energy() <= SILENCE_ENERGY {
        return Err(Error::NoSignal("far end is silent".into()));
    }
    if mic.energy() <= SILENCE_ENERGY {
        return Err(Error::NoSignal("microphone is silent".into()));
    }
    let corr = normalized_correlation(&mic.samples, &far.samples, max_delay);
    let (delay, confidence) = peak(&corr);
    Ok(DelayEstimate {
        delay,
        confidence,
        per_frame: None,
    })
}

/// Prefixes `delay` zeros and crops the tail, keeping the length.
pub fn apply_delay(x: &AudioClip, delay: usize) -> AudioClip {
    let n = x.len();
    if delay > n {
        warn!("delay of {delay} samples exceeds clip length {n}; output is silent");
    }
    let mut out = vec![0.0; n];
    if delay < n {
        out[delay..].copy_from_slice(&x.samples[..n - delay]);
    }
    AudioClip {
        samples: out,
        sample_rate: x.sample_rate,
    }
}
