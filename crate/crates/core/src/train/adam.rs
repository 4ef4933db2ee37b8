use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::container::Record;
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    /// Decoupled: `theta -= lr * weight_decay * theta` each step.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clips per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl OptimConfig {
    /// Published schedule: 400-clip batches for 150 epochs.
    pub fn paper() -> Self {
        Self {
            lr: 1.5e-4,
            weight_decay: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 400,
            epochs: 150,
            grad_clip_norm: Some(5.0),
        }
    }

    /// Desk-scale schedule for the tiny preset.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            batch: 4,
            epochs: 20,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" | "default" => Ok(Self::paper()),
            "tiny" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected tiny or paper)"
            ))),
        }
    }

    /// Paper learning rate scaled linearly from a batch of 400 to `batch`.
    pub fn linear_scaled(batch: usize) -> Self {
        let base = Self::paper();
        Self {
            lr: base.lr * batch as f64 / base.batch as f64,
            batch,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = [self.lr, self.weight_decay, self.eps]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite_nonneg || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("gradient clip norm must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub applied: bool,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adam moments for a fixed list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self { step: 0, m, v }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.trainable().map(|(_, t)| t.len()))
    }

    /// Clips, then applies one bias-corrected step with decoupled weight
    /// decay. A non-finite gradient skips the step and leaves all state
    /// untouched.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        cfg: &OptimConfig,
    ) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::Shape(
                    "parameter, gradient and moment sizes differ".into(),
                ));
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            warn!("non-finite gradient (norm {norm}); optimizer step skipped");
            return Ok(StepOutcome {
                applied: false,
                grad_norm: norm,
                clipped: false,
            });
        }
        let scale = match cfg.grad_clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * scale;
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
                *x -= cfg.lr * cfg.weight_decay * *x + cfg.lr * upd;
            }
        }
        Ok(StepOutcome {
            applied: true,
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }

    /// Records named after the store's trainable tensors.
    pub fn to_records(&self, store: &ParamStore) -> Vec<Record> {
        let mut out = vec![Record::tensor(
            "adam.step",
            Tensor::scalar(self.step as f64),
        )];
        for ((name, t), (m, v)) in store.trainable().zip(self.m.iter().zip(&self.v)) {
            out.push(Record::tensor(
                format!("adam.m.{name}"),
                Tensor::from_vec(t.shape().to_vec(), m.clone()).expect("moment size"),
            ));
            out.push(Record::tensor(
                format!("adam.v.{name}"),
                Tensor::from_vec(t.shape().to_vec(), v.clone()).expect("moment size"),
            ));
        }
        out
    }

    pub fn from_records(records: &[Record], store: &ParamStore) -> Result<Self> {
        use crate::model::container::Payload;
        let find = |name: &str| -> Result<&Tensor> {
            match records.iter().find(|r| r.name == name).map(|r| &r.payload) {
                Some(Payload::F64(t)) | Some(Payload::F32(t)) => Ok(t),
                _ => Err(Error::Format(format!(
                    "checkpoint lacks optimizer record {name}"
                ))),
            }
        };
        let step = find("adam.step")?.item();
        let mut adam = Self::for_store(store);
        adam.step = step as u64;
        for (i, (name, t)) in store.trainable().enumerate() {
            for (buf, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let r = find(&format!("adam.{kind}.{name}"))?;
                if r.len() != t.len() {
                    return Err(Error::Format(format!(
                        "optimizer record adam.{kind}.{name} has wrong size"
                    )));
                }
                buf.copy_from_slice(r.data());
            }
        }
        Ok(adam)
    }
}

/// One optimizer step over every trainable tensor of `store`; `grads`
/// follow [`ParamStore::trainable`] order.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    adam: &mut Adam,
    cfg: &OptimConfig,
) -> Result<StepOutcome> {
    let mut params: Vec<&mut Tensor> = store.trainable_mut().map(|(_, t)| t).collect();
    adam.update(&mut params, grads, cfg)
}
