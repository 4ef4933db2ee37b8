//! Signal sources: speech surrogate, optional WAV corpus, noise and room
//! impulse responses.

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::dsp::{read_wav, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Peak level of generated surrogate speech.
pub const SURROGATE_PEAK: f64 = 0.4;

/// Direct-path to reverberant energy ratio of synthetic RIRs (linear).
pub const DIRECT_TO_REVERB: f64 = 4.0;

fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Noise through `y[n] = x[n] + a y[n-1]`, with `a` updated at the given
/// segment boundaries and the gain kept near unit variance.
fn colored(rng: &mut impl Rng, out: &mut [f64], a: f64, state: &mut f64) {
    let norm = (1.0 - a * a).sqrt();
    for o in out.iter_mut() {
        *state = gauss(rng) + a * *state;
        *o = *state * norm;
    }
}

/// Speech-like test signal: talk spurts separated by pauses, each spurt a
/// chain of syllable bursts of spectrally tilted noise under a smooth
/// envelope. Deterministic given the generator state.
pub fn speech_surrogate(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let mut pos = if rng.random_bool(0.5) {
        0
    } else {
        (rng.random_range(0.05..0.4) * fs) as usize
    };
    let mut state = 0.0;
    while pos < len {
        let spurt_end = (pos + (rng.random_range(0.8..2.5) * fs) as usize).min(len);
        while pos < spurt_end {
            let n = ((rng.random_range(0.08..0.3) * fs) as usize).min(spurt_end - pos);
            let amp = rng.random_range(0.3..1.0);
            let a = rng.random_range(-0.3..0.85);
            let seg = &mut out[pos..pos + n];
            colored(rng, seg, a, &mut state);
            for (i, v) in seg.iter_mut().enumerate() {
                *v *= amp * (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
            }
            pos += n;
        }
        pos += (rng.random_range(0.15..0.6) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= SURROGATE_PEAK / peak;
        }
    }
    out
}

/// Stationary colored noise with unit variance.
pub fn noise(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let a = rng.random_range(0.0..0.9);
    let mut out = vec![0.0; len];
    let mut state = 0.0;
    colored(rng, &mut out, a, &mut state);
    out
}

/// Decay envelope of an RIR: 60 dB down after `rt60` seconds.
pub fn rir_envelope(n: usize, rt60: f64) -> f64 {
    (-3.0 * std::f64::consts::LN_10 * n as f64 / (rt60 * SAMPLE_RATE as f64)).exp()
}

/// Exponentially decaying Gaussian noise of `ceil(rt60 * fs)` taps with a
/// positive direct path at `n = 0`, normalized to unit energy.
pub fn make_rir(rt60: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.05..=1.0).contains(&rt60) {
        return Err(Error::Config(format!("rt60 {rt60} s outside [0.05, 1.0]")));
    }
    let len = (rt60 * SAMPLE_RATE as f64).ceil() as usize;
    let mut h: Vec<f64> = (0..len)
        .map(|n| gauss(rng) * rir_envelope(n, rt60))
        .collect();
    let tail: f64 = h[1..].iter().map(|v| v * v).sum();
    h[0] = (tail * DIRECT_TO_REVERB).sqrt().max(f64::MIN_POSITIVE);
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut h {
        *v /= norm;
    }
    Ok(h)
}

/// Linear convolution truncated to `out_len` samples, via FFT.
pub fn convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    if h.len() == 1 {
        let mut y: Vec<f64> = x.iter().map(|v| v * h[0]).collect();
        y.resize(out_len, 0.0);
        return y;
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |s: &[f64]| {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for (o, &x) in v.iter_mut().zip(s) {
            o.re = x;
        }
        v
    };
    let (mut a, mut b) = (load(x), load(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    (0..out_len)
        .map(|i| if i < n { a[i].re / n as f64 } else { 0.0 })
        .collect()
}

/// Speech clips loaded from a directory of 16 kHz mono WAV files.
#[derive(Clone, Debug)]
pub struct Corpus {
    clips: Vec<AudioClip>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let clips = paths.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
        let clips: Vec<_> = clips.into_iter().filter(|c| c.energy() > 0.0).collect();
        if clips.is_empty() {
            return Err(Error::Config(format!(
                "no usable WAV files in {}",
                dir.display()
            )));
        }
        for c in &clips {
            c.check()?;
        }
        Ok(Self { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// A random excerpt of `len` samples, looping short files, scaled to
    /// the surrogate peak level.
    pub fn draw(&self, rng: &mut impl Rng, len: usize) -> Vec<f64> {
        let c = &self.clips[rng.random_range(0..self.clips.len())];
        let start = rng.random_range(0..c.len());
        let mut out: Vec<f64> = (0..len).map(|i| c.samples[(start + i) % c.len()]).collect();
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            for v in &mut out {
                *v *= SURROGATE_PEAK / peak;
            }
        }
        out
    }
}
