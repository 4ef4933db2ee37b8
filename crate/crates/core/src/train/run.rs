use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, Adam, OptimConfig};
use super::{masked_estimate, spectral_loss, Example, LossConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::child_seed;
use crate::dsp::{StftConfig, StftPlan};
use crate::error::{Error, Result};
use crate::eval::erle_samples;
use crate::model::container::{self, Payload, Record};
use crate::model::{
    forward, forward_batch, AlignMode, BnSource, ForwardOptions, ModelConfig, ParamStore,
};

pub const TRAIN_STATE_RECORD: &str = "meta.train_state";

/// Smallest mask gain kept after an update, so masks stay non-negative.
const MIN_GAIN: f64 = 1e-3;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    /// Parameter initialization and per-epoch shuffling.
    pub seed: u64,
    /// Written after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines metrics, appended per epoch.
    pub metrics: Option<PathBuf>,
    /// Abort when the epoch loss exceeds `factor` times the first epoch's
    /// loss for `patience` consecutive epochs.
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, optim: OptimConfig, seed: u64) -> Self {
        Self {
            model,
            optim,
            loss: LossConfig::default(),
            seed,
            checkpoint: None,
            metrics: None,
            divergence_factor: 10.0,
            divergence_patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's clips.
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub val_erle_db: Option<f64>,
    /// Fraction of validation clips whose delay argmax is within one frame.
    pub align_top1: Option<f64>,
    /// Seconds since this process started or resumed the run.
    pub wall_s: f64,
    pub skipped_steps: usize,
}

/// Progress stored alongside parameters and optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub initial_loss: Option<f64>,
    pub bad_epochs: usize,
    pub seed: u64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub adam: Adam,
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

fn save_checkpoint(path: &Path, store: &ParamStore, adam: &Adam, state: &TrainState) -> Result<()> {
    let mut records = store.to_records()?;
    records.extend(adam.to_records(store));
    records.push(Record::text(
        TRAIN_STATE_RECORD,
        serde_json::to_string(state)?,
    ));
    container::write_file(path, &records)
}

fn load_checkpoint(path: &Path) -> Result<(ParamStore, Adam, TrainState)> {
    let records = container::read_file(path)?;
    let store = ParamStore::from_records(&records)?;
    let adam = Adam::from_records(&records, &store)?;
    let state = match records
        .iter()
        .find(|r| r.name == TRAIN_STATE_RECORD)
        .map(|r| &r.payload)
    {
        Some(Payload::Text(s)) => serde_json::from_str(s)?,
        _ => {
            return Err(Error::Format(format!(
                "{} lacks {TRAIN_STATE_RECORD}",
                path.display()
            )))
        }
    };
    Ok((store, adam, state))
}

/// Per-clip losses and the gradient of their mean over one batch.
/// Batch norm normalizes over all clips of the batch; running statistics
/// take one update from the joint moments.
fn batch_step(
    store: &mut ParamStore,
    batch: &[&Example],
    loss: &LossConfig,
    plan: &Arc<StftPlan>,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let inputs: Vec<_> = batch
        .iter()
        .map(|ex| {
            (
                g.constant(ex.mic_feat.clone()),
                g.constant(ex.far_feat.clone()),
            )
        })
        .collect();
    let out = forward_batch(&mut g, store, &p, &inputs, ForwardOptions::train())?;
    let mut values = Vec::with_capacity(batch.len());
    let mut total: Option<Var> = None;
    for (ex, &(mask, _)) in batch.iter().zip(&out.clips) {
        let (est, _) = masked_estimate(&mut g, mask, &ex.mic_planes, loss, plan)?;
        let l = spectral_loss(&mut g, est, &ex.target_planes, loss)?;
        values.push(g.value(l).item());
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let scale = g.constant(Tensor::scalar(1.0 / batch.len() as f64));
    let mean = g.mul_scalar(total.expect("non-empty batch"), scale)?;
    g.backward(mean)?;
    let grads = p.grads(&g, store);
    for (block, s) in &out.bn_stats {
        store.update_running_stats(block, s)?;
    }
    Ok((values, grads))
}

struct Validation {
    loss: f64,
    erle_db: f64,
    align_top1: Option<f64>,
}

/// Inference-mode pass over the validation clips: utterance alignment,
/// running statistics, no gradients.
fn validate(
    store: &ParamStore,
    val: &[Example],
    loss: &LossConfig,
    plan: &Arc<StftPlan>,
) -> Result<Validation> {
    let hop = plan.config().hop as f64;
    let (mut l_sum, mut e_sum, mut hits, mut scored) = (0.0, 0.0, 0usize, 0usize);
    let opts = ForwardOptions {
        align: AlignMode::Utterance,
        bn: BnSource::Running,
    };
    for ex in val {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (mf, ff) = (
            g.constant(ex.mic_feat.clone()),
            g.constant(ex.far_feat.clone()),
        );
        let out = forward(&mut g, store, &p, mf, ff, opts)?;
        let synth = LossConfig {
            consistency: true,
            ..*loss
        };
        let (resynth, y) = masked_estimate(&mut g, out.mask, &ex.mic_planes, &synth, plan)?;
        let est = if loss.consistency {
            resynth
        } else {
            g.apply_mask(out.mask, &ex.mic_planes)?
        };
        let l = spectral_loss(&mut g, est, &ex.target_planes, loss)?;
        l_sum += g.value(l).item();
        let y = g.value(y.expect("synthesized")).data();
        e_sum += erle_samples(&ex.mic.samples[..y.len()], y)?;
        if let (Some(d), Some(truth)) = (out.delay, ex.delay_samples) {
            let arg = crate::model::argmax(g.value(d).data()) as f64;
            scored += 1;
            if (arg - truth as f64 / hop).abs() <= 1.0 {
                hits += 1;
            }
        }
    }
    let n = val.len() as f64;
    Ok(Validation {
        loss: l_sum / n,
        erle_db: e_sum / n,
        align_top1: (scored > 0).then(|| hits as f64 / scored as f64),
    })
}

fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    serde_json::to_writer(&mut f, m)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Trains from scratch, or continues the run stored in `resume`.
/// Each epoch visits every training clip once in a seeded order, stepping
/// the optimizer once per `batch` clips.
pub fn train_loop(
    cfg: &TrainConfig,
    train: &[Example],
    val: &[Example],
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.optim.validate()?;
    cfg.loss.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training needs at least one clip".into()));
    }
    let plan = Arc::new(StftPlan::new(&StftConfig::default())?);
    let (mut store, mut adam, mut state) = match resume {
        Some(path) => {
            let (store, adam, state) = load_checkpoint(path)?;
            if store.config() != &cfg.model || state.seed != cfg.seed {
                return Err(Error::Config(format!(
                    "{} was trained with a different model or seed",
                    path.display()
                )));
            }
            (store, adam, state)
        }
        None => {
            let store = ParamStore::init(&cfg.model, cfg.seed)?;
            let adam = Adam::for_store(&store);
            (
                store,
                adam,
                TrainState {
                    epoch: 0,
                    initial_loss: None,
                    bad_epochs: 0,
                    seed: cfg.seed,
                },
            )
        }
    };
    let mut metrics = Vec::new();
    let start = Instant::now();
    while state.epoch < cfg.optim.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(child_seed(
            cfg.seed ^ SHUFFLE_STREAM,
            epoch,
        )));
        let (mut loss_sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.optim.batch) {
            let clips: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let grads = match batch_step(&mut store, &clips, &cfg.loss, &plan) {
                Ok((values, grads)) => {
                    loss_sum += values.iter().sum::<f64>();
                    counted += values.len();
                    grads
                }
                Err(e) if e.is_numeric() => {
                    let ids: Vec<&str> = clips.iter().map(|c| c.id.as_str()).collect();
                    warn!("batch {ids:?}: {e}; skipped");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !adam_step(&mut store, &grads, &mut adam, &cfg.optim)?.applied {
                skipped += 1;
            }
            if store.gain() < MIN_GAIN {
                store.set("mask.gain", Tensor::scalar(MIN_GAIN))?;
            }
        }
        let loss = if counted > 0 {
            loss_sum / counted as f64
        } else {
            f64::NAN
        };
        let v = if val.is_empty() {
            None
        } else {
            Some(validate(&store, val, &cfg.loss, &plan)?)
        };
        state.epoch = epoch;
        let m = EpochMetrics {
            epoch,
            loss,
            val_loss: v.as_ref().map(|v| v.loss),
            val_erle_db: v.as_ref().map(|v| v.erle_db),
            align_top1: v.as_ref().and_then(|v| v.align_top1),
            wall_s: start.elapsed().as_secs_f64(),
            skipped_steps: skipped,
        };
        info!("epoch {epoch}: {}", serde_json::to_string(&m)?);
        if let Some(p) = &cfg.metrics {
            append_metrics(p, &m)?;
        }
        let initial = *state.initial_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > cfg.divergence_factor * initial {
            state.bad_epochs += 1;
        } else {
            state.bad_epochs = 0;
        }
        if let Some(p) = &cfg.checkpoint {
            save_checkpoint(p, &store, &adam, &state)?;
        }
        metrics.push(m);
        if state.bad_epochs >= cfg.divergence_patience {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: loss {loss:.4e} above {}x the first epoch ({initial:.4e}) for {} epochs",
                cfg.divergence_factor, state.bad_epochs
            )));
        }
    }
    Ok(TrainOutcome {
        store,
        adam,
        state,
        metrics,
    })
}
