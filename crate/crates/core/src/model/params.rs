use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Variant};
use super::container::{self, Payload, Record};
use crate::autodiff::kernels::BN_MOMENTUM;
use crate::autodiff::{BnBatchStats, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CONFIG_RECORD: &str = "meta.model_config";
const STATE_RECORD: &str = "meta.bn_ready";

/// Conv-BN-ELU blocks in evaluation order.
pub const ENCODER_BLOCKS: [&str; 6] = ["mic.0", "mic.1", "far.0", "far.1", "enc.0", "enc.1"];
pub const DECODER_BLOCKS: [&str; 3] = ["dec.0", "dec.1", "dec.2"];

#[derive(Clone, Copy, Debug)]
enum Init {
    Uniform(f64),
    Const(f64),
}

struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

fn slot(name: impl Into<String>, shape: Vec<usize>, init: Init, trainable: bool) -> Slot {
    Slot {
        name: name.into(),
        shape,
        init,
        trainable,
    }
}

fn bn_slots(p: &str, c: usize) -> [Slot; 4] {
    [
        slot(format!("{p}.bn.gamma"), vec![c], Init::Const(1.0), true),
        slot(format!("{p}.bn.beta"), vec![c], Init::Const(0.0), true),
        slot(format!("{p}.bn.mean"), vec![c], Init::Const(0.0), false),
        slot(format!("{p}.bn.var"), vec![c], Init::Const(1.0), false),
    ]
}

fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let mut slots = Vec::new();
    let (kt, kf, dk) = (cfg.kernel_t, cfg.kernel_f, cfg.dec_kernel_f);
    let m = &cfg.mic_channels;
    let f = &cfg.far_channels;
    let d = &cfg.dec_channels;
    let convs = [
        ("mic.0", 1, m[0]),
        ("mic.1", m[0], m[1]),
        ("far.0", 1, f[0]),
        ("far.1", f[0], f[1]),
        ("enc.0", m[1] + f[1], m[2]),
        ("enc.1", m[2], m[3]),
    ];
    for (p, ci, co) in convs {
        let bound = 1.0 / ((ci * kt * kf) as f64).sqrt();
        slots.push(slot(
            format!("{p}.w"),
            vec![co, ci, kt, kf],
            Init::Uniform(bound),
            true,
        ));
        slots.push(slot(format!("{p}.b"), vec![co], Init::Uniform(bound), true));
        slots.extend(bn_slots(p, co));
    }
    if cfg.variant == Variant::AlignCruse {
        let pooled = cfg.pooled_bins();
        for (p, c) in [("align.q", m[1]), ("align.k", f[1])] {
            let n = c * pooled;
            let bound = 1.0 / (n as f64).sqrt();
            slots.push(slot(
                format!("{p}.w"),
                vec![cfg.align_proj, n],
                Init::Uniform(bound),
                true,
            ));
            slots.push(slot(
                format!("{p}.b"),
                vec![cfg.align_proj],
                Init::Const(0.0),
                true,
            ));
        }
    }
    let h = cfg.gru_hidden;
    let gb = 1.0 / (h as f64).sqrt();
    slots.push(slot("gru.w_ih", vec![3 * h, h], Init::Uniform(gb), true));
    slots.push(slot("gru.w_hh", vec![3 * h, h], Init::Uniform(gb), true));
    slots.push(slot("gru.b", vec![3 * h], Init::Uniform(gb), true));
    // skip i pairs an encoder output with the decoder stage input at the same resolution
    let skips = [(m[3], m[3]), (m[2], d[0]), (m[1], d[1]), (m[0], d[2])];
    for (i, (ci, co)) in skips.into_iter().enumerate() {
        let bound = 1.0 / (ci as f64).sqrt();
        slots.push(slot(
            format!("skip.{i}.w"),
            vec![co, ci, 1, 1],
            Init::Uniform(bound),
            true,
        ));
        slots.push(slot(
            format!("skip.{i}.b"),
            vec![co],
            Init::Const(0.0),
            true,
        ));
    }
    let decs = [(m[3], d[0]), (d[0], d[1]), (d[1], d[2])];
    for (i, (ci, co)) in decs.into_iter().enumerate() {
        let p = DECODER_BLOCKS[i];
        let bound = 1.0 / ((ci * dk) as f64).sqrt();
        slots.push(slot(
            format!("{p}.w"),
            vec![ci, co, 1, dk],
            Init::Uniform(bound),
            true,
        ));
        slots.push(slot(format!("{p}.b"), vec![co], Init::Uniform(bound), true));
        slots.extend(bn_slots(p, co));
    }
    let bound = 1.0 / ((d[2] * dk) as f64).sqrt();
    slots.push(slot(
        "mask.w",
        vec![d[2], 1, 1, dk],
        Init::Uniform(bound),
        true,
    ));
    slots.push(slot("mask.b", vec![1], Init::Const(0.0), true));
    slots.push(slot("mask.gain", vec![1], Init::Const(1.0), true));
    slots
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named network tensors: learnable weights plus batch-norm running
/// statistics.
#[derive(Clone, Debug)]
pub struct ParamStore {
    config: ModelConfig,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    bn_ready: bool,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.bn_ready == other.bn_ready
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.trainable == b.trainable && a.value == b.value)
    }
}

impl ParamStore {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for slot in layout(config) {
            let n: usize = slot.shape.iter().product();
            let data = match slot.init {
                Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
                Init::Const(v) => vec![v; n],
            };
            entries.push(Entry {
                name: slot.name,
                value: Tensor::from_vec(slot.shape, data)?,
                trainable: slot.trainable,
            });
        }
        Ok(Self::from_entries(config.clone(), entries, false))
    }

    fn from_entries(config: ModelConfig, entries: Vec<Entry>, bn_ready: bool) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Self {
            config,
            entries,
            index,
            bn_ready,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn slot(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.entries[self.slot(name)?].value)
    }

    /// Replaces a tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.slot(name)?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: {:?} does not match {:?}",
                value.shape(),
                self.entries[i].value.shape()
            )));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// `(name, tensor)` for every learnable tensor, in a fixed order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| (e.name.as_str(), &e.value))
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .filter(|e| e.trainable)
            .map(|e| (e.name.as_str(), &mut e.value))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index
            .get(name)
            .is_some_and(|&i| self.entries[i].trainable)
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn gain(&self) -> f64 {
        self.get("mask.gain").map(|t| t.item()).unwrap_or(1.0)
    }

    /// Whether running statistics may be used for inference.
    pub fn bn_ready(&self) -> bool {
        self.bn_ready
    }

    /// Declares the current running statistics usable for inference.
    pub fn freeze_bn(&mut self) {
        self.bn_ready = true;
    }

    /// Exponential moving average update from one train-mode pass.
    pub fn update_running_stats(&mut self, block: &str, stats: &BnBatchStats) -> Result<()> {
        for (suffix, obs) in [("mean", &stats.mean), ("var", &stats.var)] {
            let i = self.slot(&format!("{block}.bn.{suffix}"))?;
            let run = self.entries[i].value.data_mut();
            if run.len() != obs.len() {
                return Err(Error::Shape(format!("{block}: running statistics size")));
            }
            for (r, o) in run.iter_mut().zip(obs) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
            }
        }
        self.bn_ready = true;
        Ok(())
    }

    /// Frozen `(mean, var)` of a block; fails until statistics exist.
    pub fn running_stats(&self, block: &str) -> Result<(&[f64], &[f64])> {
        if !self.bn_ready {
            return Err(Error::Contract(
                "batch-norm statistics not frozen; train or call freeze_bn before inference".into(),
            ));
        }
        let m = self.get(&format!("{block}.bn.mean"))?;
        let v = self.get(&format!("{block}.bn.var"))?;
        Ok((m.data(), v.data()))
    }

    /// Puts every tensor on the graph. Learnable tensors become
    /// gradient-tracked leaves when `grad` is set.
    pub fn bind(&self, g: &mut Graph, grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.value.clone(), grad && e.trainable))
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Binds learnable tensors to existing graph nodes (in
    /// [`ParamStore::trainable`] order); the rest become constants.
    pub fn bind_with(&self, g: &mut Graph, trainable: &[Var]) -> Result<Bound> {
        let mut it = trainable.iter();
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let v = if e.trainable {
                *it.next()
                    .ok_or_else(|| Error::Config("too few trainable handles".into()))?
            } else {
                g.constant(e.value.clone())
            };
            vars.push(v);
        }
        if it.next().is_some() {
            return Err(Error::Config("too many trainable handles".into()));
        }
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }

    pub fn to_records(&self) -> Result<Vec<Record>> {
        let mut out = vec![
            Record::text(CONFIG_RECORD, serde_json::to_string(&self.config)?),
            Record::tensor(
                STATE_RECORD,
                Tensor::scalar(if self.bn_ready { 1.0 } else { 0.0 }),
            ),
        ];
        out.extend(
            self.entries
                .iter()
                .map(|e| Record::tensor(e.name.clone(), e.value.clone())),
        );
        Ok(out)
    }

    /// Rebuilds a store from container records, validating every shape
    /// against the embedded configuration. Unrelated records are ignored.
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let cfg = records
            .iter()
            .find(|r| r.name == CONFIG_RECORD)
            .ok_or_else(|| Error::Format(format!("missing {CONFIG_RECORD} record")))?;
        let config: ModelConfig = match &cfg.payload {
            Payload::Text(s) => serde_json::from_str(s)?,
            _ => return Err(Error::Format(format!("{CONFIG_RECORD} must be text"))),
        };
        let mut store = Self::init(&config, 0)?;
        let mut seen = vec![false; store.entries.len()];
        let mut bn_ready = false;
        for r in records {
            if r.name == STATE_RECORD {
                if let Payload::F64(t) = &r.payload {
                    bn_ready = t.item() != 0.0;
                }
                continue;
            }
            let Some(&i) = store.index.get(&r.name) else {
                continue;
            };
            let t = match &r.payload {
                Payload::F64(t) | Payload::F32(t) => t.clone(),
                Payload::Text(_) => return Err(Error::Format(format!("{} holds text", r.name))),
            };
            store
                .set(&r.name, t)
                .map_err(|e| Error::Format(e.to_string()))?;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "missing parameter {}",
                store.entries[i].name
            )));
        }
        store.bn_ready = bn_ready;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path, &self.to_records()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(&container::read_file(path)?)
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    /// Gradients after backward, aligned with [`ParamStore::trainable`];
    /// untouched tensors get zeros.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Tensor> {
        store
            .entries
            .iter()
            .zip(&self.vars)
            .filter(|(e, _)| e.trainable)
            .map(|(e, v)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(e.value.shape()))
            })
            .collect()
    }
}
