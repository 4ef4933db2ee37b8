//! Objective metrics, delay-recovery scoring and runtime measurement.

mod report;

pub use report::{render_table, Aggregate, EvalReport, EvalRow, Runtime, AECMOS_NOTE};

use std::path::Path;
use std::time::Instant;

use log::warn;

use crate::alignment::{global_delay, online_track, OnlineConfig};
use crate::data::ManifestRow;
use crate::dsp::{read_wav, AudioClip, StftConfig};
use crate::error::{Error, Result};
use crate::model::{enhance, AlignMode, EnhanceOptions, Enhancer, ParamStore};

pub const ERLE_EPS: f64 = 1e-12;
pub const ERLE_MIN_DB: f64 = -20.0;
pub const ERLE_MAX_DB: f64 = 80.0;

/// Whole-clip echo return loss enhancement in dB, clamped to [-20, 80].
pub fn erle(mic: &AudioClip, enhanced: &AudioClip) -> Result<f64> {
    erle_samples(&mic.samples, &enhanced.samples)
}

pub fn erle_samples(mic: &[f64], enhanced: &[f64]) -> Result<f64> {
    if mic.len() != enhanced.len() {
        return Err(Error::Shape(format!(
            "ERLE needs equal lengths, got {} and {}",
            mic.len(),
            enhanced.len()
        )));
    }
    let e = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() + ERLE_EPS;
    let db = 10.0 * (e(mic) / e(enhanced)).log10();
    if !db.is_finite() {
        return Err(Error::NonFinite("ERLE".into()));
    }
    Ok(db.clamp(ERLE_MIN_DB, ERLE_MAX_DB))
}

/// What produces the delay estimate being scored.
#[derive(Clone, Debug)]
pub enum DelaySystem<'a> {
    /// Argmax of the network's delay distribution (last row in causal mode).
    Model(&'a ParamStore, AlignMode),
    /// Whole-clip cross-correlation with a maximum lag in samples.
    Global {
        max_delay: usize,
    },
    Online(OnlineConfig),
}

impl DelaySystem<'_> {
    pub fn name(&self) -> String {
        match self {
            DelaySystem::Model(s, m) => format!("{:?} ({m:?} align)", s.config().variant),
            DelaySystem::Global { .. } => "global cross-correlation".into(),
            DelaySystem::Online(_) => "online cross-correlation".into(),
        }
    }
}

/// One evaluation item held in memory.
#[derive(Clone, Debug)]
pub struct EvalClip {
    pub id: String,
    pub mic: AudioClip,
    pub far: AudioClip,
    pub delay_samples: Option<usize>,
}

impl EvalClip {
    pub fn load(row: &ManifestRow, base: &Path) -> Result<Self> {
        let (m, f, _) = row.resolve(base);
        Ok(Self {
            id: row.id.clone(),
            mic: read_wav(m)?,
            far: read_wav(f)?,
            delay_samples: row.delay_samples,
        })
    }
}

fn hop() -> usize {
    StftConfig::default().hop
}

fn delay_row(id: &str, est_frames: f64, truth: Option<usize>) -> EvalRow {
    let true_frames = truth.map(|d| d as f64 / hop() as f64);
    EvalRow {
        id: id.to_string(),
        erle_db: None,
        align_argmax_frames: Some(est_frames),
        true_delay_frames: true_frames,
        abs_delay_err_frames: true_frames.map(|t| (est_frames - t).abs()),
    }
}

/// Scores delay estimates against ground truth. Clips without ground
/// truth are skipped and counted.
pub fn delay_recovery_report(system: &DelaySystem, clips: &[EvalClip]) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    for c in clips {
        let Some(truth) = c.delay_samples else {
            skipped += 1;
            continue;
        };
        let est_frames = match system {
            DelaySystem::Model(store, mode) => {
                let opts = EnhanceOptions {
                    align: *mode,
                    unit_mask: false,
                };
                let (_, dist) = enhance(store, &c.mic, &c.far, opts)?;
                let dist = dist.ok_or_else(|| Error::Config("model has no align block".into()))?;
                dist.argmax() as f64
            }
            DelaySystem::Global { max_delay } => {
                global_delay(&c.mic, &c.far, *max_delay)?.delay as f64 / hop() as f64
            }
            DelaySystem::Online(cfg) => {
                online_track(&c.mic, &c.far, cfg)?.delay as f64 / hop() as f64
            }
        };
        rows.push(delay_row(&c.id, est_frames, Some(truth)));
    }
    if skipped > 0 {
        warn!("{skipped} clips without ground-truth delay skipped");
    }
    Ok(EvalReport::new(system.name(), rows, skipped))
}

/// ERLE of the enhanced output per clip, plus the delay argmax when the
/// model has an align block.
pub fn evaluate_model(
    store: &ParamStore,
    align: AlignMode,
    clips: &[EvalClip],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(clips.len());
    for c in clips {
        let (out, dist) = enhance(
            store,
            &c.mic,
            &c.far,
            EnhanceOptions {
                align,
                unit_mask: false,
            },
        )?;
        let mut row = match (&dist, c.delay_samples) {
            (Some(d), truth) => delay_row(&c.id, d.argmax() as f64, truth),
            (None, truth) => EvalRow {
                id: c.id.clone(),
                erle_db: None,
                align_argmax_frames: None,
                true_delay_frames: truth.map(|d| d as f64 / hop() as f64),
                abs_delay_err_frames: None,
            },
        };
        row.erle_db = Some(erle(&c.mic, &out)?);
        rows.push(row);
    }
    let name = format!("{:?}", store.config().variant);
    Ok(EvalReport::new(name, rows, 0))
}

/// Median wall time of one streamed 10 ms frame (analysis, network,
/// synthesis) on the calling thread, after `warmup` frames.
pub fn benchmark_runtime(
    store: &ParamStore,
    n_frames: usize,
    warmup: usize,
    seed: u64,
) -> Result<Runtime> {
    use rand::{Rng, SeedableRng};
    if n_frames == 0 {
        return Err(Error::Config("benchmark needs at least one frame".into()));
    }
    let hop = hop();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut chunk = || -> Vec<f64> { (0..hop).map(|_| rng.random_range(-0.1..0.1)).collect() };
    let mut enh = Enhancer::new(store, false)?;
    // prime the framer so every timed push completes exactly one frame
    let (m, f) = (chunk(), chunk());
    enh.push(&m, &f)?;
    for _ in 0..warmup {
        let (m, f) = (chunk(), chunk());
        enh.push(&m, &f)?;
    }
    let mut times = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let (m, f) = (chunk(), chunk());
        let t0 = Instant::now();
        let out = enh.push(&m, &f)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    let ms = times[times.len() / 2];
    let frame_ms = 1e3 * hop as f64 / crate::dsp::SAMPLE_RATE as f64;
    Ok(Runtime {
        ms_per_frame: ms,
        real_time_factor: ms / frame_ms,
        frames: n_frames,
    })
}
