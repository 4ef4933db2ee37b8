//! Synthetic echo scenarios and the long-delay evaluation sets.

mod ldset;
mod source;

pub use ldset::{make_ld_set, read_manifest, write_manifest, LdKind, ManifestRow, MANIFEST_NAME};
pub use source::{
    convolve, make_rir, noise, rir_envelope, speech_surrogate, Corpus, DIRECT_TO_REVERB,
    SURROGATE_PEAK,
};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    None,
    /// Clip at a drawn fraction of the loudspeaker peak.
    HardClip,
    /// `tanh(drive x) / drive` with a drawn drive.
    TanhGain,
}

impl Nonlinearity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "hard-clip" => Ok(Self::HardClip),
            "tanh-gain" => Ok(Self::TanhGain),
            other => Err(Error::Config(format!("unknown nonlinearity '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::HardClip => "hard-clip",
            Self::TanhGain => "tanh-gain",
        }
    }
}

/// Draw ranges for one scenario. `None` ranges disable the stage: no echo
/// rescaling, no noise, a unit-impulse echo path, no level change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Seconds, within `[0, 1]`.
    pub delay_range: [f64; 2],
    /// Near end to echo energy ratio, dB.
    pub ser_range: Option<[f64; 2]>,
    /// Near end plus echo to noise energy ratio, dB.
    pub snr_range: Option<[f64; 2]>,
    /// RT60 in seconds.
    pub rir_decay: Option<[f64; 2]>,
    pub nonlinearity: Nonlinearity,
    /// Probability that near-end speech is present.
    pub near_prob: f64,
    /// Microphone peak level in dBFS.
    pub level_range: Option<[f64; 2]>,
    /// Seconds.
    pub clip_len: f64,
    /// Generate surrogate speech when no corpus is supplied.
    pub surrogate: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            delay_range: [0.0, 1.0],
            ser_range: Some([-10.0, 10.0]),
            snr_range: Some([0.0, 40.0]),
            rir_decay: Some([0.1, 0.5]),
            nonlinearity: Nonlinearity::None,
            near_prob: 0.5,
            level_range: Some([-15.0, -3.0]),
            clip_len: 10.0,
            surrogate: true,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!(
            "{name} range {r:?} must be finite and ordered"
        )));
    }
    Ok(())
}

fn draw(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("delay", self.delay_range)?;
        if self.delay_range[0] < 0.0 || self.delay_range[1] > 1.0 {
            return Err(Error::Config(format!(
                "delay range {:?} s must lie in [0, 1]",
                self.delay_range
            )));
        }
        for (name, r) in [
            ("ser", self.ser_range),
            ("snr", self.snr_range),
            ("level", self.level_range),
        ] {
            if let Some(r) = r {
                check_range(name, r)?;
            }
        }
        if let Some(r) = self.rir_decay {
            check_range("rt60", r)?;
            if r[0] < 0.05 || r[1] > 1.0 {
                return Err(Error::Config(format!(
                    "rt60 range {r:?} must lie in [0.05, 1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.near_prob) {
            return Err(Error::Config("near_prob must lie in [0, 1]".into()));
        }
        if !(self.clip_len * SAMPLE_RATE as f64 >= 320.0) {
            return Err(Error::Config(format!(
                "clip length {} s is shorter than one window",
                self.clip_len
            )));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_len * SAMPLE_RATE as f64).round() as usize
    }
}

/// Every random draw of a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub delay_samples: usize,
    pub ser_db: Option<f64>,
    pub snr_db: Option<f64>,
    pub rt60_s: Option<f64>,
    pub nonlinearity: Nonlinearity,
    /// Clip threshold or tanh drive.
    pub nl_param: Option<f64>,
    pub near_active: bool,
    pub echo_gain: f64,
    pub noise_gain: f64,
    pub level_gain: f64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub far: AudioClip,
    /// Near-end speech as it reaches the microphone; the training target.
    pub near: AudioClip,
    pub echo: AudioClip,
    pub noise: AudioClip,
    pub mic: AudioClip,
    pub rir: Vec<f64>,
    pub delay: usize,
    pub meta: ScenarioMeta,
}

impl Scenario {
    pub fn target(&self) -> &AudioClip {
        &self.near
    }

    /// Rebuilds the echo from the far end, path and recorded gains.
    pub fn render_echo(&self) -> Vec<f64> {
        render_echo(&self.far.samples, self.delay, &self.rir, &self.meta)
    }
}

fn nonlinear(x: &mut [f64], kind: Nonlinearity, param: Option<f64>) {
    match (kind, param) {
        (Nonlinearity::HardClip, Some(th)) => {
            for v in x {
                *v = v.clamp(-th, th);
            }
        }
        (Nonlinearity::TanhGain, Some(drive)) => {
            for v in x {
                *v = (drive * *v).tanh() / drive;
            }
        }
        _ => {}
    }
}

fn render_echo(far: &[f64], delay: usize, rir: &[f64], meta: &ScenarioMeta) -> Vec<f64> {
    let n = far.len();
    let mut shifted = vec![0.0; n];
    if delay < n {
        shifted[delay..].copy_from_slice(&far[..n - delay]);
    }
    nonlinear(&mut shifted, meta.nonlinearity, meta.nl_param);
    let mut echo = convolve(&shifted, rir, n);
    for v in &mut echo {
        *v = *v * meta.echo_gain * meta.level_gain;
    }
    echo
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Draws one scenario from surrogate sources.
pub fn synth_scenario(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Result<Scenario> {
    synth_scenario_with(cfg, None, rng)
}

/// Draws one scenario, taking speech from `corpus` when given.
pub fn synth_scenario_with(
    cfg: &ScenarioConfig,
    corpus: Option<&Corpus>,
    rng: &mut impl Rng,
) -> Result<Scenario> {
    cfg.validate()?;
    if corpus.is_none() && !cfg.surrogate {
        return Err(Error::Config(
            "no speech corpus given and surrogate generation disabled".into(),
        ));
    }
    let n = cfg.clip_samples();
    let speech = |rng: &mut _| match corpus {
        Some(c) => c.draw(rng, n),
        None => speech_surrogate(rng, n),
    };
    let fs = SAMPLE_RATE as f64;
    let far = speech(rng);
    let delay = ((draw(rng, cfg.delay_range) * fs).round() as usize).min(n);
    let near_active = cfg.near_prob > 0.0 && rng.random_bool(cfg.near_prob);
    let mut near = if near_active {
        speech(rng)
    } else {
        vec![0.0; n]
    };
    let rt60 = cfg.rir_decay.map(|r| draw(rng, r));
    let rir = match rt60 {
        Some(t) => make_rir(t, rng)?,
        None => vec![1.0],
    };
    let nl_param = match cfg.nonlinearity {
        Nonlinearity::None => None,
        Nonlinearity::HardClip => Some(rng.random_range(0.3..0.8) * peak(&far)),
        Nonlinearity::TanhGain => Some(rng.random_range(1.0..4.0)),
    };
    let mut meta = ScenarioMeta {
        delay_samples: delay,
        ser_db: None,
        snr_db: None,
        rt60_s: rt60,
        nonlinearity: cfg.nonlinearity,
        nl_param,
        near_active,
        echo_gain: 1.0,
        noise_gain: 0.0,
        level_gain: 1.0,
    };
    let raw_echo = render_echo(&far, delay, &rir, &meta);
    if let (Some(r), true) = (cfg.ser_range, near_active) {
        let ser = draw(rng, r);
        let e_echo = energy(&raw_echo);
        if e_echo > 0.0 {
            meta.echo_gain = (energy(&near) / (e_echo * 10f64.powf(ser / 10.0))).sqrt();
        }
        meta.ser_db = Some(ser);
    }
    let mut echo: Vec<f64> = raw_echo.iter().map(|v| v * meta.echo_gain).collect();
    let mut noise_sig = vec![0.0; n];
    if let Some(r) = cfg.snr_range {
        let snr = draw(rng, r);
        let raw = noise(rng, n);
        let signal: f64 = near.iter().zip(&echo).map(|(a, b)| (a + b) * (a + b)).sum();
        meta.noise_gain = (signal / (energy(&raw) * 10f64.powf(snr / 10.0))).sqrt();
        noise_sig = raw.iter().map(|v| v * meta.noise_gain).collect();
        meta.snr_db = Some(snr);
    }
    let mixed_peak = (0..n).fold(0.0f64, |m, i| {
        m.max((near[i] + echo[i] + noise_sig[i]).abs())
    });
    meta.level_gain = match cfg.level_range {
        Some(r) if mixed_peak > 0.0 => 10f64.powf(draw(rng, r) / 20.0) / mixed_peak,
        _ if mixed_peak > 0.99 => 0.99 / mixed_peak,
        _ => 1.0,
    };
    if meta.level_gain != 1.0 {
        for v in &mut near {
            *v *= meta.level_gain;
        }
        for v in &mut noise_sig {
            *v *= meta.level_gain;
        }
        echo = render_echo(&far, delay, &rir, &meta);
    }
    let mic: Vec<f64> = (0..n).map(|i| near[i] + echo[i] + noise_sig[i]).collect();
    Ok(Scenario {
        far: AudioClip::new(far),
        near: AudioClip::new(near),
        echo: AudioClip::new(echo),
        noise: AudioClip::new(noise_sig),
        mic: AudioClip::new(mic),
        rir,
        delay,
        meta,
    })
}

/// Seed of item `index` in a set generated from `seed`.
pub fn child_seed(seed: u64, index: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r.next_u64()
}

/// `n` scenarios, item `i` drawn from `child_seed(cfg.seed, i)`.
pub fn scenario_set(cfg: &ScenarioConfig, n: usize) -> Result<Vec<Scenario>> {
    (0..n)
        .map(|i| synth_scenario(cfg, &mut ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, i))))
        .collect()
}

impl ScenarioConfig {
    /// Training mix over a delay range: echo in every clip, near-end speech
    /// in a share of them so that the far end has to be used to tell the
    /// two apart.
    pub fn training(delay_range: [f64; 2], clip_len: f64, seed: u64) -> Self {
        Self {
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
}
