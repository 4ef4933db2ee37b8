//! The network as a differentiable graph.

use super::config::{AlignMode, ModelConfig, Variant};
use super::params::{Bound, ParamStore};
use crate::autodiff::{BnBatchStats, BnMode, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Where batch-norm statistics come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnSource {
    /// Moments of the current input (training).
    Batch,
    /// Frozen running statistics (inference, causal).
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub align: AlignMode,
    pub bn: BnSource,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            align: AlignMode::Utterance,
            bn: BnSource::Batch,
        }
    }

    pub fn infer(align: AlignMode) -> Self {
        Self {
            align,
            bn: BnSource::Running,
        }
    }
}

pub struct Forward {
    /// `1 x t x bins`, in `[0, gain]`.
    pub mask: Var,
    /// `d_max` (utterance) or `t x d_max` (causal); absent for the baseline.
    pub delay: Option<Var>,
    /// Observed moments per block when normalizing with batch statistics.
    pub bn_stats: Vec<(String, BnBatchStats)>,
}

/// Probabilities over integer frame delays.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayDistribution {
    pub d_max: usize,
    /// One row (utterance) or one row per frame.
    pub probs: Vec<f64>,
}

impl DelayDistribution {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d_max = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("scalar delay distribution".into()))?;
        if d_max == 0 || t.rank() > 2 {
            return Err(Error::Shape(format!(
                "delay distribution of shape {:?}",
                t.shape()
            )));
        }
        Ok(Self {
            d_max,
            probs: t.data().to_vec(),
        })
    }

    pub fn rows(&self) -> usize {
        self.probs.len() / self.d_max
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.d_max..(i + 1) * self.d_max]
    }

    pub fn last(&self) -> &[f64] {
        self.row(self.rows() - 1)
    }

    /// Most likely delay of a row in frames (lowest index on ties).
    pub fn argmax_row(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    /// Delay of the final row: the whole utterance, or the latest frame.
    pub fn argmax(&self) -> usize {
        argmax(self.last())
    }

    /// Every row is non-negative and sums to one within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        (0..self.rows()).all(|i| {
            let r = self.row(i);
            r.iter().all(|&p| p >= 0.0 && p.is_finite())
                && (r.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Ctx<'a> {
    store: &'a ParamStore,
    p: &'a Bound,
    opts: ForwardOptions,
    stats: Vec<(String, BnBatchStats)>,
}

impl Ctx<'_> {
    /// Batch statistics are shared by every clip: the maps are joined along
    /// time, normalized together and split again.
    fn bn(&mut self, g: &mut Graph, xs: &[Var], block: &str) -> Result<Vec<Var>> {
        let gamma = self.p.var(&format!("{block}.bn.gamma"))?;
        let beta = self.p.var(&format!("{block}.bn.beta"))?;
        match self.opts.bn {
            BnSource::Batch => {
                let joint = if xs.len() == 1 {
                    xs[0]
                } else {
                    g.concat_time(xs)?
                };
                let (y, s) = g.batch_norm(joint, gamma, beta, BnMode::Train)?;
                if let Some(s) = s {
                    self.stats.push((block.to_string(), s));
                }
                if xs.len() == 1 {
                    return Ok(vec![y]);
                }
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let t = g.value(x).shape()[1];
                    out.push(g.slice_time(y, start, t)?);
                    start += t;
                }
                Ok(out)
            }
            BnSource::Running => {
                let (mean, var) = self.store.running_stats(block)?;
                xs.iter()
                    .map(|&x| Ok(g.batch_norm(x, gamma, beta, BnMode::Infer { mean, var })?.0))
                    .collect()
            }
        }
    }

    fn conv_block(&mut self, g: &mut Graph, xs: &[Var], block: &str) -> Result<Vec<Var>> {
        let (w, b) = (
            self.p.var(&format!("{block}.w"))?,
            self.p.var(&format!("{block}.b"))?,
        );
        let stride = self.store.config().stride_f;
        let ys = xs
            .iter()
            .map(|&x| g.conv2d_causal(x, w, b, stride))
            .collect::<Result<Vec<_>>>()?;
        let ys = self.bn(g, &ys, block)?;
        ys.into_iter().map(|y| g.elu(y)).collect()
    }

    fn dec_block(
        &mut self,
        g: &mut Graph,
        xs: &[Var],
        block: &str,
        to_bins: usize,
    ) -> Result<Vec<Var>> {
        let cfg = self.store.config();
        let (w, b) = (
            self.p.var(&format!("{block}.w"))?,
            self.p.var(&format!("{block}.b"))?,
        );
        let mut ys = Vec::with_capacity(xs.len());
        for &x in xs {
            let from = g.value(x).shape()[2];
            let geom = cfg.tconv_geom(1, 1, from, to_bins)?;
            ys.push(g.conv2d_transpose(x, w, b, cfg.stride_f, geom.out_pad)?);
        }
        let ys = self.bn(g, &ys, block)?;
        ys.into_iter().map(|y| g.elu(y)).collect()
    }
}

/// `conv1x1(enc) + dec`.
pub fn skip_block(g: &mut Graph, enc: Var, dec: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.conv2d_causal(enc, w, b, 1)?;
    g.add(s, dec)
}

/// Pool, project to queries/keys, score every delay, softmax, and take the
/// probability-weighted sum of delayed far-end maps.
pub fn align_block(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &Bound,
    x_mic: Var,
    x_far: Var,
    mode: AlignMode,
) -> Result<(Var, Var)> {
    let (sm, sf) = (
        g.value(x_mic).shape().to_vec(),
        g.value(x_far).shape().to_vec(),
    );
    if sm.len() != 3 || sf.len() != 3 || sm[1..] != sf[1..] {
        return Err(Error::Shape(format!(
            "align inputs {sm:?} and {sf:?} differ in time or frequency"
        )));
    }
    let pm = g.max_pool_freq(x_mic, cfg.align_pool)?;
    let pf = g.max_pool_freq(x_far, cfg.align_pool)?;
    let pm = g.flatten_cf(pm)?;
    let pf = g.flatten_cf(pf)?;
    let q = g.linear(pm, p.var("align.q.w")?, p.var("align.q.b")?)?;
    let k = g.linear(pf, p.var("align.k.w")?, p.var("align.k.b")?)?;
    let scores = match mode {
        AlignMode::Utterance => g.align_scores(q, k, cfg.d_max)?,
        AlignMode::Causal => g.align_scores_causal(q, k, cfg.d_max, cfg.align_alpha)?,
    };
    let probs = g.softmax_last(scores)?;
    let aligned = g.soft_shift(x_far, probs)?;
    Ok((aligned, probs))
}

/// Mask estimation from `1 x t x bins` log-power features of microphone and
/// far end.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    p: &Bound,
    mic_feat: Var,
    far_feat: Var,
    opts: ForwardOptions,
) -> Result<Forward> {
    let mut b = forward_batch(g, store, p, &[(mic_feat, far_feat)], opts)?;
    let (mask, delay) = b.clips.pop().expect("one clip");
    Ok(Forward {
        mask,
        delay,
        bn_stats: b.bn_stats,
    })
}

/// Outputs of a jointly normalized batch.
pub struct BatchForward {
    /// Mask and delay distribution per clip, in input order.
    pub clips: Vec<(Var, Option<Var>)>,
    pub bn_stats: Vec<(String, BnBatchStats)>,
}

/// Runs several clips (each `(mic, far)` features, lengths may differ)
/// through the network layer by layer. With batch statistics every
/// batch-norm layer normalizes over all clips together.
pub fn forward_batch(
    g: &mut Graph,
    store: &ParamStore,
    p: &Bound,
    inputs: &[(Var, Var)],
    opts: ForwardOptions,
) -> Result<BatchForward> {
    let cfg = store.config();
    if inputs.is_empty() {
        return Err(Error::Shape("forward needs at least one clip".into()));
    }
    for &(mic_feat, far_feat) in inputs {
        let ms = g.value(mic_feat).shape().to_vec();
        if ms.len() != 3
            || ms[0] != 1
            || ms[2] != cfg.bins
            || g.value(far_feat).shape() != ms.as_slice()
        {
            return Err(Error::Shape(format!(
                "features must both be 1 x t x {}; got {:?} and {:?}",
                cfg.bins,
                ms,
                g.value(far_feat).shape()
            )));
        }
    }
    let bins = cfg.encoder_bins();
    let mut cx = Ctx {
        store,
        p,
        opts,
        stats: Vec::new(),
    };
    let mics: Vec<Var> = inputs.iter().map(|x| x.0).collect();
    let fars: Vec<Var> = inputs.iter().map(|x| x.1).collect();

    let e1 = cx.conv_block(g, &mics, "mic.0")?;
    let e2 = cx.conv_block(g, &e1, "mic.1")?;
    let f1 = cx.conv_block(g, &fars, "far.0")?;
    let f2 = cx.conv_block(g, &f1, "far.1")?;
    let mut joint = Vec::with_capacity(inputs.len());
    let mut delays = Vec::with_capacity(inputs.len());
    for (&m, &f) in e2.iter().zip(&f2) {
        let (aligned, delay) = match cfg.variant {
            Variant::AlignCruse => {
                let (a, d) = align_block(g, cfg, p, m, f, opts.align)?;
                (a, Some(d))
            }
            Variant::Cruse => (f, None),
        };
        joint.push(g.concat_channels(m, aligned)?);
        delays.push(delay);
    }
    let e3 = cx.conv_block(g, &joint, "enc.0")?;
    let e4 = cx.conv_block(g, &e3, "enc.1")?;

    let c4 = cfg.mic_channels[3];
    let mut d = Vec::with_capacity(inputs.len());
    for &x in &e4 {
        let flat = g.flatten_cf(x)?;
        let h0 = g.constant(Tensor::zeros(&[cfg.gru_hidden]));
        let r = g.gru(
            flat,
            h0,
            p.var("gru.w_ih")?,
            p.var("gru.w_hh")?,
            p.var("gru.b")?,
        )?;
        d.push(g.unflatten_cf(r, c4)?);
    }

    let encs = [&e4, &e3, &e2, &e1];
    for (i, enc) in encs.into_iter().enumerate() {
        let (w, b) = (
            p.var(&format!("skip.{i}.w"))?,
            p.var(&format!("skip.{i}.b"))?,
        );
        d = enc
            .iter()
            .zip(&d)
            .map(|(&e, &x)| skip_block(g, e, x, w, b))
            .collect::<Result<Vec<_>>>()?;
        if i < 3 {
            d = cx.dec_block(g, &d, super::params::DECODER_BLOCKS[i], bins[3 - i])?;
        }
    }
    let mut clips = Vec::with_capacity(inputs.len());
    for (x, delay) in d.into_iter().zip(delays) {
        let from = g.value(x).shape()[2];
        let geom = cfg.tconv_geom(1, 1, from, bins[0])?;
        let m = g.conv2d_transpose(
            x,
            p.var("mask.w")?,
            p.var("mask.b")?,
            cfg.stride_f,
            geom.out_pad,
        )?;
        let m = g.sigmoid(m)?;
        clips.push((g.mul_scalar(m, p.var("mask.gain")?)?, delay));
    }
    Ok(BatchForward {
        clips,
        bn_stats: cx.stats,
    })
}

/// One-shot inference on feature tensors with frozen statistics.
pub fn infer(
    store: &ParamStore,
    mic_feat: &Tensor,
    far_feat: &Tensor,
    align: AlignMode,
) -> Result<(Tensor, Option<DelayDistribution>)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let (m, f) = (g.constant(mic_feat.clone()), g.constant(far_feat.clone()));
    let out = forward(&mut g, store, &p, m, f, ForwardOptions::infer(align))?;
    let delay = out
        .delay
        .map(|d| DelayDistribution::from_tensor(g.value(d)))
        .transpose()?;
    Ok((g.value(out.mask).clone(), delay))
}

/// Baseline entry point: channel 0 microphone, channel 1 far end already
/// aligned by other means.
pub fn cruse_forward(store: &ParamStore, stacked: &Tensor) -> Result<Tensor> {
    if store.config().variant != Variant::Cruse {
        return Err(Error::Config(
            "cruse_forward needs a baseline parameter set".into(),
        ));
    }
    let [c, t, f] = stacked.dims3()?;
    if c != 2 {
        return Err(Error::Shape(format!(
            "expected 2 stacked channels, got {c}"
        )));
    }
    let n = t * f;
    let mic = Tensor::from_vec(vec![1, t, f], stacked.data()[..n].to_vec())?;
    let far = Tensor::from_vec(vec![1, t, f], stacked.data()[n..].to_vec())?;
    Ok(infer(store, &mic, &far, AlignMode::Causal)?.0)
}
