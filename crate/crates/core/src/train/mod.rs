//! Training: compressed complex loss through the STFT consistency chain,
//! Adam, and the epoch loop with checkpoints.

mod adam;
mod run;

pub use adam::{adam_step, Adam, OptimConfig, StepOutcome};
pub use run::{
    train_loop, EpochMetrics, TrainConfig, TrainOutcome, TrainState, TRAIN_STATE_RECORD,
};

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{ManifestRow, Scenario};
use crate::dsp::{log_power, read_wav, AudioClip, StftPlan};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Magnitude compression exponent.
    pub compression: f64,
    /// Weight of the complex term; the magnitude term gets `1 - beta`.
    pub beta: f64,
    /// Resynthesize and re-analyze the estimate before scoring.
    pub consistency: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            compression: 0.3,
            beta: 0.7,
            consistency: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.compression > 0.0 && self.compression <= 1.0) || !(0.0..=1.0).contains(&self.beta)
        {
            return Err(Error::Config(format!(
                "loss needs 0 < c <= 1 and 0 <= beta <= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Loss between an estimated spectrum (`2 x t x f` planes on the graph)
/// and constant target planes.
pub fn spectral_loss(g: &mut Graph, est: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    g.ccmse(est, target, cfg.compression, cfg.beta)
}

/// Loss of a time-domain estimate: both signals go through the STFT and
/// the target is trimmed or zero-padded to the estimate's length.
pub fn loss_ccmse(
    g: &mut Graph,
    enhanced: Var,
    target: &AudioClip,
    cfg: &LossConfig,
    plan: &Arc<StftPlan>,
) -> Result<Var> {
    let n = g.value(enhanced).len();
    let mut t = target.samples.clone();
    t.resize(n, 0.0);
    let target = plan.stft(&t)?.to_planes();
    let est = g.stft(enhanced, plan)?;
    spectral_loss(g, est, &target, cfg)
}

/// Masked microphone spectrum, optionally passed through the
/// synthesis/analysis chain. Returns the spectrum to score and the
/// time-domain estimate when it was synthesized.
pub fn masked_estimate(
    g: &mut Graph,
    mask: Var,
    mic_planes: &Tensor,
    cfg: &LossConfig,
    plan: &Arc<StftPlan>,
) -> Result<(Var, Option<Var>)> {
    let masked = g.apply_mask(mask, mic_planes)?;
    if cfg.consistency {
        let y = g.istft(masked, plan)?;
        Ok((g.stft(y, plan)?, Some(y)))
    } else {
        Ok((masked, None))
    }
}

/// One clip with features and spectra precomputed.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub mic: AudioClip,
    pub mic_feat: Tensor,
    pub far_feat: Tensor,
    pub mic_planes: Tensor,
    pub target_planes: Tensor,
    pub delay_samples: Option<usize>,
}

impl Example {
    /// The far end is trimmed or zero-padded to the microphone length.
    pub fn new(
        id: impl Into<String>,
        mic: &AudioClip,
        far: &AudioClip,
        target: &AudioClip,
        delay_samples: Option<usize>,
        plan: &StftPlan,
    ) -> Result<Self> {
        mic.check()?;
        far.check()?;
        target.check()?;
        let n = mic.len();
        let fit = |x: &AudioClip| {
            let mut v = x.samples.clone();
            v.resize(n, 0.0);
            v
        };
        let ms = plan.stft(&mic.samples)?;
        let fs = plan.stft(&fit(far))?;
        let ts = plan.stft(&fit(target))?;
        Ok(Self {
            id: id.into(),
            mic: mic.clone(),
            mic_feat: log_power(&ms),
            far_feat: log_power(&fs),
            mic_planes: ms.to_planes(),
            target_planes: ts.to_planes(),
            delay_samples,
        })
    }

    pub fn from_scenario(id: impl Into<String>, sc: &Scenario, plan: &StftPlan) -> Result<Self> {
        Self::new(id, &sc.mic, &sc.far, &sc.near, Some(sc.delay), plan)
    }

    pub fn from_manifest(row: &ManifestRow, base: &Path, plan: &StftPlan) -> Result<Self> {
        let (m, f, t) = row.resolve(base);
        Self::new(
            row.id.clone(),
            &read_wav(m)?,
            &read_wav(f)?,
            &read_wav(t)?,
            row.delay_samples,
            plan,
        )
    }

    pub fn frames(&self) -> usize {
        self.mic_feat.shape()[1]
    }
}
