use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{normalized_window, peak, DelayEstimate, SILENCE_ENERGY};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub hop: usize,
    pub max_delay: usize,
    /// Trailing correlation window in samples.
    pub window: usize,
    /// Margin by which a new peak must beat the held one.
    pub hysteresis: f64,
    /// Frames between correlation updates.
    pub update_every: usize,
    /// Samples required before the first estimate.
    pub warmup: usize,
    /// Per-frame confidence decay during silence.
    pub silence_decay: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            hop: 160,
            max_delay: 16_000,
            window: 32_000,
            hysteresis: 0.05,
            update_every: 10,
            warmup: 16_000,
            silence_decay: 0.9,
        }
    }
}

/// Causal frame-rate delay tracker. State is bounded by
/// `window + max_delay` samples of far end and `window` of microphone.
#[derive(Clone, Debug)]
pub struct OnlineAligner {
    cfg: OnlineConfig,
    mic: VecDeque<f64>,
    far: VecDeque<f64>,
    seen: usize,
    frames: usize,
    held: Option<usize>,
    confidence: f64,
}

impl OnlineAligner {
    pub fn new(cfg: OnlineConfig) -> Result<Self> {
        if cfg.hop == 0 || cfg.window < cfg.hop || cfg.update_every == 0 {
            return Err(Error::Config(format!(
                "invalid online aligner settings {cfg:?}"
            )));
        }
        if !(0.0..=1.0).contains(&cfg.silence_decay) || !(cfg.hysteresis >= 0.0) {
            return Err(Error::Config(
                "silence decay must lie in [0, 1], hysteresis ≥ 0".into(),
            ));
        }
        Ok(Self {
            mic: VecDeque::with_capacity(cfg.window),
            far: VecDeque::with_capacity(cfg.window + cfg.max_delay),
            cfg,
            seen: 0,
            frames: 0,
            held: None,
            confidence: 0.0,
        })
    }

    pub fn config(&self) -> &OnlineConfig {
        &self.cfg
    }

    /// Consumes one hop of each signal and returns the current estimate.
    pub fn push(&mut self, mic: &[f64], far: &[f64]) -> Result<DelayEstimate> {
        if mic.len() != self.cfg.hop || far.len() != self.cfg.hop {
            return Err(Error::Shape(format!(
                "online aligner expects frames of {} samples",
                self.cfg.hop
            )));
        }
        if mic.iter().chain(far).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("aligner input".into()));
        }
        push_bounded(&mut self.mic, mic, self.cfg.window);
        push_bounded(&mut self.far, far, self.cfg.window + self.cfg.max_delay);
        self.seen += mic.len();
        self.frames += 1;

        let energy = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        if self.seen < self.cfg.warmup {
            return Ok(self.estimate());
        }
        if energy(mic) <= SILENCE_ENERGY || energy(far) <= SILENCE_ENERGY {
            self.confidence *= self.cfg.silence_decay;
            return Ok(self.estimate());
        }
        if self.held.is_none() || self.frames % self.cfg.update_every == 0 {
            self.update();
        }
        Ok(self.estimate())
    }

    fn update(&mut self) {
        let w = self.mic.len();
        let span = w + self.cfg.max_delay;
        // far samples aligned so index j + max_delay matches mic index j
        let mut far = vec![0.0; span - self.far.len().min(span)];
        far.extend(self.far.iter().skip(self.far.len().saturating_sub(span)));
        let mic: Vec<f64> = self.mic.iter().copied().collect();
        let Some(corr) = normalized_window(&mic, &far, self.cfg.max_delay) else {
            return;
        };
        let (best, value) = peak(&corr);
        let held = match self.held {
            Some(h) if value <= corr[h] + self.cfg.hysteresis => h,
            _ => best,
        };
        self.held = Some(held);
        self.confidence = corr[held];
    }

    fn estimate(&self) -> DelayEstimate {
        DelayEstimate {
            delay: self.held.unwrap_or(0),
            confidence: self.confidence,
            per_frame: None,
        }
    }
}

fn push_bounded(buf: &mut VecDeque<f64>, x: &[f64], cap: usize) {
    buf.extend(x);
    let excess = buf.len().saturating_sub(cap);
    buf.drain(..excess);
}

/// Runs the tracker over whole clips; the result holds the final estimate
/// and the per-frame delay trace. Trailing samples short of a hop are ignored.
pub fn online_track(mic: &AudioClip, far: &AudioClip, cfg: &OnlineConfig) -> Result<DelayEstimate> {
    mic.check()?;
    far.check()?;
    let mut al = OnlineAligner::new(cfg.clone())?;
    let n = mic.len().min(far.len()) / cfg.hop;
    let mut trace = Vec::with_capacity(n);
    let mut last = al.estimate();
    for k in 0..n {
        let r = k * cfg.hop..(k + 1) * cfg.hop;
        last = al.push(&mic.samples[r.clone()], &far.samples[r])?;
        trace.push(last.delay);
    }
    last.per_frame = Some(trace);
    Ok(last)
}
