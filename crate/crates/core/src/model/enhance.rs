use log::warn;

use super::config::AlignMode;
use super::forward::{infer, DelayDistribution};
use super::params::ParamStore;
use super::stream::StreamState;
use crate::autodiff::Tensor;
use crate::dsp::{log_power, AudioClip, Framer, OverlapAdd, SpectralFrames, StftConfig, StftPlan};
use crate::error::{Error, Result};
use num_complex::Complex64;

/// Scales every bin by a non-negative real gain; phase is untouched.
pub fn apply_mask(mask: &Tensor, spec: &SpectralFrames) -> Result<SpectralFrames> {
    if mask.shape() != [1, spec.frames, spec.bins] {
        return Err(Error::Shape(format!(
            "mask {:?} does not cover {} x {} spectrum",
            mask.shape(),
            spec.frames,
            spec.bins
        )));
    }
    if let Some(v) = mask.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!(
            "mask values must be non-negative, found {v}"
        )));
    }
    let mut out = spec.clone();
    for (o, &m) in out.data.iter_mut().zip(mask.data()) {
        *o *= m;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnhanceOptions {
    pub align: AlignMode,
    /// Skip the network and pass the microphone through (mask of ones).
    pub unit_mask: bool,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            align: AlignMode::Causal,
            unit_mask: false,
        }
    }
}

fn check_inputs(mic: &AudioClip, far: &AudioClip, cfg: &StftConfig) -> Result<Vec<f64>> {
    mic.check()?;
    far.check()?;
    if mic.sample_rate != cfg.sample_rate || far.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "sample rates {} / {} differ from {}",
            mic.sample_rate, far.sample_rate, cfg.sample_rate
        )));
    }
    if mic.len() < cfg.win_len {
        return Err(Error::EmptyFrames {
            len: mic.len(),
            need: cfg.win_len,
        });
    }
    if mic.len().abs_diff(far.len()) > cfg.hop {
        warn!(
            "microphone has {} samples, far end {}; far end trimmed/padded to match",
            mic.len(),
            far.len()
        );
    }
    let mut f = far.samples.clone();
    f.resize(mic.len(), 0.0);
    Ok(f)
}

/// Whole-clip enhancement. Output has the microphone's length; samples past
/// the last full frame are zero.
pub fn enhance(
    store: &ParamStore,
    mic: &AudioClip,
    far: &AudioClip,
    opts: EnhanceOptions,
) -> Result<(AudioClip, Option<DelayDistribution>)> {
    let cfg = StftConfig::default();
    let far = check_inputs(mic, far, &cfg)?;
    let plan = StftPlan::new(&cfg)?;
    let ms = plan.stft(&mic.samples)?;
    let (mask, delay) = if opts.unit_mask {
        (Tensor::full(&[1, ms.frames, ms.bins], 1.0), None)
    } else {
        let fs = plan.stft(&far)?;
        infer(store, &log_power(&ms), &log_power(&fs), opts.align)?
    };
    let mut out = plan.istft(&apply_mask(&mask, &ms)?)?;
    out.resize(mic.len(), 0.0);
    Ok((AudioClip::new(out), delay))
}

/// Chunked enhancement with bounded memory. Output sample `n` is final once
/// input up to `n + hop` has arrived (one window of algorithmic latency).
pub struct Enhancer<'a> {
    store: &'a ParamStore,
    plan: StftPlan,
    state: StreamState,
    mic: Framer,
    far: Framer,
    ola: OverlapAdd,
    unit_mask: bool,
    received: usize,
    emitted: usize,
    frames: usize,
    last_delay: Option<Vec<f64>>,
    spec: Vec<Complex64>,
}

impl<'a> Enhancer<'a> {
    pub fn new(store: &'a ParamStore, unit_mask: bool) -> Result<Self> {
        let cfg = StftConfig::default();
        if !unit_mask {
            store.running_stats("mic.0")?;
        }
        Ok(Self {
            store,
            state: StreamState::new(store.config())?,
            mic: Framer::new(cfg.win_len, cfg.hop),
            far: Framer::new(cfg.win_len, cfg.hop),
            ola: OverlapAdd::new(cfg.win_len, cfg.hop),
            spec: vec![Complex64::new(0.0, 0.0); cfg.bins()],
            plan: StftPlan::new(&cfg)?,
            unit_mask,
            received: 0,
            emitted: 0,
            frames: 0,
            last_delay: None,
        })
    }

    /// Delay distribution of the most recent frame.
    pub fn delay(&self) -> Option<&[f64]> {
        self.last_delay.as_deref()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Feeds matching chunks of microphone and far-end samples; returns the
    /// enhanced samples that became final.
    pub fn push(&mut self, mic: &[f64], far: &[f64]) -> Result<Vec<f64>> {
        if mic.len() != far.len() {
            return Err(Error::Shape(format!(
                "chunk lengths differ: {} vs {}",
                mic.len(),
                far.len()
            )));
        }
        if mic.iter().chain(far).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input chunk".into()));
        }
        self.received += mic.len();
        self.mic.push(mic);
        self.far.push(far);
        let bins = self.plan.config().bins();
        let mut out = Vec::new();
        let mut far_spec = vec![Complex64::new(0.0, 0.0); bins];
        let mut seg = vec![0.0; self.plan.config().win_len];
        while let (Some(mf), Some(ff)) = (self.mic.pop_frame(), self.far.pop_frame()) {
            self.plan.analyze_frame(&mf, &mut self.spec);
            if !self.unit_mask {
                self.plan.analyze_frame(&ff, &mut far_spec);
                let lp = |s: &[Complex64]| -> Vec<f64> {
                    s.iter()
                        .map(|c| (c.norm_sqr() + crate::dsp::LOG_POWER_EPS).ln())
                        .collect()
                };
                let (mask, delay) = self
                    .state
                    .step(self.store, &lp(&self.spec), &lp(&far_spec))?;
                for (s, m) in self.spec.iter_mut().zip(&mask) {
                    *s *= *m;
                }
                self.last_delay = delay;
            }
            self.plan.synthesize_frame(&self.spec, &mut seg);
            out.extend(self.ola.push(&seg));
            self.frames += 1;
        }
        self.emitted += out.len();
        Ok(out)
    }

    /// Flushes the overlap tail and zero-pads to the total input length.
    pub fn finish(mut self) -> Vec<f64> {
        let mut out = if self.frames > 0 {
            self.ola.flush()
        } else {
            Vec::new()
        };
        out.resize(self.received.saturating_sub(self.emitted), 0.0);
        out
    }
}
