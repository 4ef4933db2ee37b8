//! Tape of coarse-grained ops with reverse-mode differentiation.
//!
//! Every op validates shapes, checks its output for NaN/Inf and records what
//! its backward rule needs. The tape is single-use: after [`Graph::backward`]
//! saved activations are released and a second call fails until
//! [`Graph::reset`].

use std::sync::Arc;

use num_complex::Complex64;

use super::kernels::{self, ConvGeom, GruCache, GruWeights, TConvGeom};
use super::Tensor;
use crate::dsp::StftPlan;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics source for batch normalization.
#[derive(Clone, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the moments of this input.
    Train,
    /// Normalize with frozen running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Moments observed by a train-mode batch-norm node; `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Var,
        geom: TConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Elu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
        d: usize,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Gru {
        x: Var,
        h0: Var,
        w_ih: Var,
        w_hh: Var,
        bias: Var,
        cache: GruCache,
    },
    Flatten {
        x: Var,
    },
    Unflatten {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    ConcatTime {
        xs: Vec<Var>,
    },
    SliceTime {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    AlignScores {
        q: Var,
        k: Var,
        d_max: usize,
    },
    AlignScoresCausal {
        q: Var,
        k: Var,
        d_max: usize,
        alpha: f64,
    },
    SoftShift {
        x: Var,
        probs: Var,
        d_max: usize,
    },
    ApplyMask {
        mask: Var,
        spec: Tensor,
    },
    Istft {
        x: Var,
        plan: Arc<StftPlan>,
    },
    Stft {
        x: Var,
        plan: Arc<StftPlan>,
    },
    Ccmse {
        est: Var,
        target: Tensor,
        compression: f64,
        beta: f64,
    },
    WeightedSum {
        x: Var,
        w: Tensor,
    },
    SumSquares {
        x: Var,
    },
    Freed,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
}

/// Guard used inside the magnitude compression: `|X|^c ~ X (|X|^2 + eps)^((c-1)/2)`.
pub const COMPRESSION_EPS: f64 = 1e-12;

fn shape_err(op: &str, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{op}: {msg}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the tape can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.differentiated = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.differentiated {
            return Err(Error::Graph(
                "graph already differentiated; reset before reuse".into(),
            ));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Causal convolution: `k_t - 1` zero frames of past padding, symmetric
    /// frequency padding of `(k_f - 1) / 2`.
    pub fn conv2d_causal(&mut self, x: Var, w: Var, b: Var, stride_f: usize) -> Result<Var> {
        let [ci, t, f] = self.val(x).dims3()?;
        let [co, wci, kt, kf] = self.val(w).dims4()?;
        if wci != ci {
            return Err(shape_err(
                "conv2d_causal",
                format!("input has {ci} channels, kernel expects {wci}"),
            ));
        }
        if self.val(b).len() != co {
            return Err(shape_err(
                "conv2d_causal",
                "bias length differs from output channels",
            ));
        }
        if stride_f == 0 || kf == 0 || kt == 0 || f + 2 * ((kf - 1) / 2) < kf {
            return Err(shape_err("conv2d_causal", "invalid kernel/stride geometry"));
        }
        let geom = ConvGeom {
            c_in: ci,
            c_out: co,
            k_t: kt,
            k_f: kf,
            stride_f,
            pad_t: kt - 1,
        };
        let (to, fo) = (geom.out_t(t), geom.out_f(f));
        let mut out = vec![0.0; co * to * fo];
        kernels::conv2d_forward(
            &geom,
            self.val(x).data(),
            t,
            f,
            self.val(w).data(),
            self.val(b).data(),
            &mut out,
        );
        let value = Tensor::from_vec(vec![co, to, fo], out)?;
        self.push(
            "conv2d_causal",
            value,
            &[x, w, b],
            Op::Conv2d { x, w, b, geom },
        )
    }

    /// Transposed convolution over frequency with `k_t = 1`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride_f: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let [ci, t, f] = self.val(x).dims3()?;
        let [wci, co, kt, kf] = self.val(w).dims4()?;
        if wci != ci {
            return Err(shape_err(
                "conv2d_transpose",
                format!("input has {ci} channels, kernel expects {wci}"),
            ));
        }
        if kt != 1 {
            return Err(shape_err("conv2d_transpose", "only k_t = 1 is supported"));
        }
        if self.val(b).len() != co {
            return Err(shape_err(
                "conv2d_transpose",
                "bias length differs from output channels",
            ));
        }
        if stride_f == 0 || f == 0 || out_pad >= stride_f {
            return Err(shape_err(
                "conv2d_transpose",
                "invalid stride/output padding",
            ));
        }
        let geom = TConvGeom {
            c_in: ci,
            c_out: co,
            k_f: kf,
            stride_f,
            out_pad,
        };
        let fo = geom.out_f(f);
        let mut out = vec![0.0; co * t * fo];
        kernels::tconv_forward(
            &geom,
            self.val(x).data(),
            t,
            f,
            self.val(w).data(),
            self.val(b).data(),
            &mut out,
        );
        let value = Tensor::from_vec(vec![co, t, fo], out)?;
        self.push(
            "conv2d_transpose",
            value,
            &[x, w, b],
            Op::ConvT { x, w, b, geom },
        )
    }

    /// Per-channel normalization over all non-channel axes, followed by the
    /// affine `gamma * x_hat + beta`. Train mode also reports the observed
    /// moments so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        let xv = self.val(x);
        if xv.rank() < 2 {
            return Err(shape_err(
                "batch_norm",
                "need a channel axis and at least one more",
            ));
        }
        let c = xv.shape()[0];
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(shape_err(
                "batch_norm",
                "affine parameters differ from channel count",
            ));
        }
        let n = xv.len() / c;
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                let (m, v) = kernels::channel_moments(xv.data(), c);
                let unbiased = if n > 1 {
                    v.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
                } else {
                    v.clone()
                };
                let stats = BnBatchStats {
                    mean: m.clone(),
                    var: unbiased,
                };
                (m, v, Some(stats), true)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        "running statistics differ from channel count",
                    ));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let mut out = vec![0.0; xv.len()];
        let xhat = kernels::bn_apply(
            xv.data(),
            c,
            &mean,
            &var,
            self.val(gamma).data(),
            self.val(beta).data(),
            &mut out,
        );
        let inv_std = var
            .iter()
            .map(|v| 1.0 / (v + kernels::BN_EPS).sqrt())
            .collect();
        let value = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let y = self.push(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((y, stats))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x).map(kernels::elu);
        self.push("elu", value, &[x], Op::Elu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.val(x).map(kernels::sigmoid);
        self.push("sigmoid", value, &[x], Op::Sigmoid { x })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("softmax", "scalar input"))?;
        if d == 0 {
            return Err(shape_err("softmax", "empty last axis"));
        }
        let mut out = vec![0.0; xv.len()];
        kernels::softmax_rows(xv.data(), d, &mut out);
        let value = Tensor::from_vec(xv.shape().to_vec(), out)?;
        self.push("softmax", value, &[x], Op::Softmax { x, d })
    }

    pub fn max_pool_freq(&mut self, x: Var, k: usize) -> Result<Var> {
        let [c, t, f] = self.val(x).dims3()?;
        if k == 0 || f < k {
            return Err(shape_err(
                "max_pool_freq",
                format!("{f} bins cannot hold a window of {k}"),
            ));
        }
        let (out, arg) = kernels::max_pool_freq(self.val(x).data(), c * t, f, k);
        let value = Tensor::from_vec(vec![c, t, f / k], out)?;
        self.push("max_pool_freq", value, &[x], Op::MaxPool { x, arg })
    }

    /// Row-wise affine map: `x` is `rows x n_in`, `w` is `n_out x n_in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [rows, n_in] = self.val(x).dims2()?;
        let [n_out, wn] = self.val(w).dims2()?;
        if wn != n_in || self.val(b).len() != n_out {
            return Err(shape_err(
                "linear",
                format!("input width {n_in}, weight {n_out}x{wn}"),
            ));
        }
        let mut out = vec![0.0; rows * n_out];
        kernels::linear_forward(
            self.val(x).data(),
            n_in,
            self.val(w).data(),
            self.val(b).data(),
            &mut out,
        );
        let value = Tensor::from_vec(vec![rows, n_out], out)?;
        self.push("linear", value, &[x, w, b], Op::Linear { x, w, b })
    }

    /// GRU over the rows of `x` (`t x n`) starting from `h0`.
    pub fn gru(&mut self, x: Var, h0: Var, w_ih: Var, w_hh: Var, bias: Var) -> Result<Var> {
        let [t, n] = self.val(x).dims2()?;
        let h = self.val(h0).len();
        if self.val(w_ih).shape() != [3 * h, n]
            || self.val(w_hh).shape() != [3 * h, h]
            || self.val(bias).len() != 3 * h
        {
            return Err(shape_err(
                "gru",
                format!("weights do not match input {n} / hidden {h}"),
            ));
        }
        let wts = GruWeights {
            input: n,
            hidden: h,
            w_ih: self.val(w_ih).data(),
            w_hh: self.val(w_hh).data(),
            bias: self.val(bias).data(),
        };
        let (out, cache) = kernels::gru_forward(&wts, self.val(x).data(), t, self.val(h0).data());
        let value = Tensor::from_vec(vec![t, h], out)?;
        self.push(
            "gru",
            value,
            &[x, h0, w_ih, w_hh, bias],
            Op::Gru {
                x,
                h0,
                w_ih,
                w_hh,
                bias,
                cache,
            },
        )
    }

    /// `c x t x f` to `t x (c f)`.
    pub fn flatten_cf(&mut self, x: Var) -> Result<Var> {
        let [c, t, f] = self.val(x).dims3()?;
        let xd = self.val(x).data();
        let mut out = vec![0.0; c * t * f];
        for ch in 0..c {
            for tt in 0..t {
                out[tt * c * f + ch * f..tt * c * f + (ch + 1) * f]
                    .copy_from_slice(&xd[(ch * t + tt) * f..(ch * t + tt + 1) * f]);
            }
        }
        let value = Tensor::from_vec(vec![t, c * f], out)?;
        self.push("flatten", value, &[x], Op::Flatten { x })
    }

    /// `t x (c f)` back to `c x t x f`.
    pub fn unflatten_cf(&mut self, x: Var, c: usize) -> Result<Var> {
        let [t, cf] = self.val(x).dims2()?;
        if c == 0 || cf % c != 0 {
            return Err(shape_err(
                "unflatten",
                format!("{cf} is not a multiple of {c}"),
            ));
        }
        let f = cf / c;
        let xd = self.val(x).data();
        let mut out = vec![0.0; c * t * f];
        for ch in 0..c {
            for tt in 0..t {
                out[(ch * t + tt) * f..(ch * t + tt + 1) * f]
                    .copy_from_slice(&xd[tt * cf + ch * f..tt * cf + (ch + 1) * f]);
            }
        }
        let value = Tensor::from_vec(vec![c, t, f], out)?;
        self.push("unflatten", value, &[x], Op::Unflatten { x })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ca, ta, fa] = self.val(a).dims3()?;
        let [cb, tb, fb] = self.val(b).dims3()?;
        if ta != tb || fa != fb {
            return Err(shape_err(
                "concat",
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let mut out = self.val(a).data().to_vec();
        out.extend_from_slice(self.val(b).data());
        let value = Tensor::from_vec(vec![ca + cb, ta, fa], out)?;
        self.push("concat", value, &[a, b], Op::Concat { a, b })
    }

    /// Joins `c x t_i x f` maps along time.
    pub fn concat_time(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err("concat_time", "no inputs"))?;
        let [c, _, f] = self.val(first).dims3()?;
        let mut total = 0;
        for &x in xs {
            let [cx, tx, fx] = self.val(x).dims3()?;
            if cx != c || fx != f {
                return Err(shape_err(
                    "concat_time",
                    format!("{:?} vs {:?}", self.val(first).shape(), self.val(x).shape()),
                ));
            }
            total += tx;
        }
        let mut out = vec![0.0; c * total * f];
        let mut off = 0;
        for &x in xs {
            let tx = self.val(x).shape()[1];
            let xd = self.val(x).data();
            for ch in 0..c {
                let dst = (ch * total + off) * f;
                out[dst..dst + tx * f].copy_from_slice(&xd[ch * tx * f..(ch + 1) * tx * f]);
            }
            off += tx;
        }
        let value = Tensor::from_vec(vec![c, total, f], out)?;
        self.push("concat_time", value, xs, Op::ConcatTime { xs: xs.to_vec() })
    }

    /// Frames `start..start + len` of a `c x t x f` map.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [c, t, f] = self.val(x).dims3()?;
        if start + len > t {
            return Err(shape_err(
                "slice_time",
                format!("frames {start}..{} of {t}", start + len),
            ));
        }
        let xd = self.val(x).data();
        let mut out = Vec::with_capacity(c * len * f);
        for ch in 0..c {
            let src = (ch * t + start) * f;
            out.extend_from_slice(&xd[src..src + len * f]);
        }
        let value = Tensor::from_vec(vec![c, len, f], out)?;
        self.push("slice_time", value, &[x], Op::SliceTime { x, start })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        let mut value = self.val(a).clone();
        value.add_assign(self.val(b));
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    /// Multiplies every element by a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.val(s).is_scalar() {
            return Err(shape_err("mul_scalar", "scale must hold one value"));
        }
        let sv = self.val(s).item();
        let value = self.val(x).map(|v| v * sv);
        self.push("mul_scalar", value, &[x, s], Op::MulScalar { x, s })
    }

    fn check_qk(&self, q: Var, k: Var, d_max: usize) -> Result<(usize, usize)> {
        let [t, p] = self.val(q).dims2()?;
        if self.val(k).shape() != [t, p] {
            return Err(shape_err(
                "align_scores",
                "queries and keys differ in shape",
            ));
        }
        if t == 0 || d_max == 0 {
            return Err(Error::Config(
                "align scores need t >= 1 and d_max >= 1".into(),
            ));
        }
        Ok((t, p))
    }

    /// Utterance-level delay scores: `s[d] = sum_t q_t . k_{t-d}`.
    pub fn align_scores(&mut self, q: Var, k: Var, d_max: usize) -> Result<Var> {
        let (t, p) = self.check_qk(q, k, d_max)?;
        let (qd, kd) = (self.val(q).data(), self.val(k).data());
        let mut s = vec![0.0; d_max];
        for (d, sd) in s.iter_mut().enumerate() {
            for tt in d..t {
                *sd += kernels::dot(
                    &qd[tt * p..(tt + 1) * p],
                    &kd[(tt - d) * p..(tt - d + 1) * p],
                );
            }
        }
        let value = Tensor::from_vec(vec![d_max], s)?;
        self.push(
            "align_scores",
            value,
            &[q, k],
            Op::AlignScores { q, k, d_max },
        )
    }

    /// Running scores `s_t[d] = alpha s_{t-1}[d] + q_t . k_{t-d}`, one row per frame.
    pub fn align_scores_causal(&mut self, q: Var, k: Var, d_max: usize, alpha: f64) -> Result<Var> {
        let (t, p) = self.check_qk(q, k, d_max)?;
        let (qd, kd) = (self.val(q).data(), self.val(k).data());
        let mut s = vec![0.0; t * d_max];
        let mut acc = vec![0.0; d_max];
        for tt in 0..t {
            let qt = &qd[tt * p..(tt + 1) * p];
            for (d, a) in acc.iter_mut().enumerate() {
                *a *= alpha;
                if d <= tt {
                    *a += kernels::dot(qt, &kd[(tt - d) * p..(tt - d + 1) * p]);
                }
            }
            s[tt * d_max..(tt + 1) * d_max].copy_from_slice(&acc);
        }
        let value = Tensor::from_vec(vec![t, d_max], s)?;
        self.push(
            "align_scores_causal",
            value,
            &[q, k],
            Op::AlignScoresCausal { q, k, d_max, alpha },
        )
    }

    /// `out[c,t] = sum_d D[d] x[c,t-d]` (zero before the start). `probs` is
    /// `d_max` (shared) or `t x d_max` (per frame).
    pub fn soft_shift(&mut self, x: Var, probs: Var) -> Result<Var> {
        let [c, t, f] = self.val(x).dims3()?;
        let pv = self.val(probs);
        let d_max = *pv
            .shape()
            .last()
            .ok_or_else(|| shape_err("soft_shift", "scalar weights"))?;
        let ok = match pv.shape() {
            [_] => true,
            [pt, _] => *pt == t,
            _ => false,
        };
        if !ok || d_max == 0 {
            return Err(shape_err(
                "soft_shift",
                format!("weights {:?} for {t} frames", pv.shape()),
            ));
        }
        let out = kernels::soft_shift(self.val(x).data(), c, t, f, pv.data(), d_max);
        let value = Tensor::from_vec(vec![c, t, f], out)?;
        self.push(
            "soft_shift",
            value,
            &[x, probs],
            Op::SoftShift { x, probs, d_max },
        )
    }

    /// Real mask (`1 x t x f`) times a constant complex spectrum (`2 x t x f`).
    pub fn apply_mask(&mut self, mask: Var, spec: &Tensor) -> Result<Var> {
        let [one, t, f] = self.val(mask).dims3()?;
        if one != 1 || spec.shape() != [2, t, f] {
            return Err(shape_err(
                "apply_mask",
                format!(
                    "mask {:?} vs spectrum {:?}",
                    self.val(mask).shape(),
                    spec.shape()
                ),
            ));
        }
        let n = t * f;
        let m = self.val(mask).data();
        let s = spec.data();
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            out[i] = m[i] * s[i];
            out[n + i] = m[i] * s[n + i];
        }
        let value = Tensor::from_vec(vec![2, t, f], out)?;
        self.push(
            "apply_mask",
            value,
            &[mask],
            Op::ApplyMask {
                mask,
                spec: spec.clone(),
            },
        )
    }

    /// Overlap-add synthesis of `2 x t x f` planes into a waveform.
    pub fn istft(&mut self, x: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let cfg = plan.config();
        let [two, t, f] = self.val(x).dims3()?;
        if two != 2 || f != cfg.bins() {
            return Err(shape_err(
                "istft",
                format!("expected 2 x t x {} planes", cfg.bins()),
            ));
        }
        let n = t * f;
        let xd = self.val(x).data();
        let mut out = vec![0.0; cfg.signal_len(t)];
        let mut bins = vec![Complex64::new(0.0, 0.0); f];
        let mut seg = vec![0.0; cfg.win_len];
        for tt in 0..t {
            for (k, b) in bins.iter_mut().enumerate() {
                *b = Complex64::new(xd[tt * f + k], xd[n + tt * f + k]);
            }
            plan.synthesize_frame(&bins, &mut seg);
            kernels::axpy(
                1.0,
                &seg,
                &mut out[tt * cfg.hop..tt * cfg.hop + cfg.win_len],
            );
        }
        let len = out.len();
        let value = Tensor::from_vec(vec![len], out)?;
        self.push(
            "istft",
            value,
            &[x],
            Op::Istft {
                x,
                plan: plan.clone(),
            },
        )
    }

    /// Analysis of a waveform into `2 x t x f` planes.
    pub fn stft(&mut self, x: Var, plan: &Arc<StftPlan>) -> Result<Var> {
        let cfg = plan.config();
        let xv = self.val(x);
        if xv.rank() != 1 {
            return Err(shape_err("stft", "expected a 1-D signal"));
        }
        let spec = plan.stft(xv.data())?;
        let value = spec.to_planes();
        self.push(
            "stft",
            value,
            &[x],
            Op::Stft {
                x,
                plan: plan.clone(),
            },
        )
        .map(|v| {
            debug_assert_eq!(self.val(v).shape()[2], cfg.bins());
            v
        })
    }

    /// Complex compressed MSE between estimate and constant target planes:
    /// `beta * mean|C(S) - C(S^)|^2 + (1 - beta) * mean(|C(S)| - |C(S^)|)^2`
    /// with `C(X) = X (|X|^2 + eps)^((c-1)/2)`.
    pub fn ccmse(&mut self, est: Var, target: &Tensor, compression: f64, beta: f64) -> Result<Var> {
        let [two, t, f] = self.val(est).dims3()?;
        if two != 2 || target.shape() != self.val(est).shape() {
            return Err(shape_err(
                "ccmse",
                format!(
                    "estimate {:?} vs target {:?}",
                    self.val(est).shape(),
                    target.shape()
                ),
            ));
        }
        let n = t * f;
        let e = self.val(est).data();
        let s = target.data();
        let (mut complex, mut mag) = (0.0, 0.0);
        for i in 0..n {
            let (ce, me) = compress(e[i], e[n + i], compression);
            let (cs, ms) = compress(s[i], s[n + i], compression);
            complex += (cs.0 - ce.0).powi(2) + (cs.1 - ce.1).powi(2);
            mag += (ms - me).powi(2);
        }
        let loss = (beta * complex + (1.0 - beta) * mag) / n as f64;
        self.push(
            "ccmse",
            Tensor::scalar(loss),
            &[est],
            Op::Ccmse {
                est,
                target: target.clone(),
                compression,
                beta,
            },
        )
    }

    /// `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if w.len() != self.val(x).len() {
            return Err(shape_err("weighted_sum", "weights differ in length"));
        }
        let value = Tensor::scalar(self.val(x).dot(w));
        self.push(
            "weighted_sum",
            value,
            &[x],
            Op::WeightedSum { x, w: w.clone() },
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.val(x).data().iter().map(|v| v * v).sum());
        self.push("sum_squares", value, &[x], Op::SumSquares { x })
    }

    /// Reverse pass from a scalar node. Leaf gradients stay readable through
    /// [`Graph::grad`]; saved activations are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Graph(
                "backward already ran on this graph; call reset first".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contribs = self.node_backward(i, &g)?;
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            self.nodes[i].op = Op::Freed;
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let zeros_like = |v: &Var| Tensor::zeros(self.val(*v).shape());
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Freed => {}
            Op::Conv2d { x, w, b, geom } => {
                let [_, t, f] = self.val(*x).dims3()?;
                let mut dx = needs(x).then(|| zeros_like(x));
                let mut dw = needs(w).then(|| zeros_like(w));
                let mut db = needs(b).then(|| zeros_like(b));
                kernels::conv2d_backward(
                    geom,
                    self.val(*x).data(),
                    t,
                    f,
                    self.val(*w).data(),
                    gd,
                    dx.as_mut().map(|d| d.data_mut()),
                    dw.as_mut().map(|d| d.data_mut()),
                    db.as_mut().map(|d| d.data_mut()),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                out.extend(db.map(|d| (*b, d)));
            }
            Op::ConvT { x, w, b, geom } => {
                let [_, t, f] = self.val(*x).dims3()?;
                let mut dx = needs(x).then(|| zeros_like(x));
                let mut dw = needs(w).then(|| zeros_like(w));
                let mut db = needs(b).then(|| zeros_like(b));
                kernels::tconv_backward(
                    geom,
                    self.val(*x).data(),
                    t,
                    f,
                    self.val(*w).data(),
                    gd,
                    dx.as_mut().map(|d| d.data_mut()),
                    dw.as_mut().map(|d| d.data_mut()),
                    db.as_mut().map(|d| d.data_mut()),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                out.extend(db.map(|d| (*b, d)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                let gam = self.val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xhat.len()];
                for ch in 0..c {
                    let r = ch * n..(ch + 1) * n;
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for j in r.clone() {
                        sg += gd[j];
                        sgx += gd[j] * xhat[j];
                    }
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    let k = gam[ch] * inv_std[ch];
                    if *train {
                        let (mg, mgx) = (sg / n as f64, sgx / n as f64);
                        for j in r {
                            dx[j] = k * (gd[j] - mg - xhat[j] * mgx);
                        }
                    } else {
                        for j in r {
                            dx[j] = k * gd[j];
                        }
                    }
                }
                out.push((*x, Tensor::from_vec(self.val(*x).shape().to_vec(), dx)?));
                out.push((*gamma, Tensor::from_vec(vec![c], dgamma)?));
                out.push((*beta, Tensor::from_vec(vec![c], dbeta)?));
            }
            Op::Elu { x } => {
                let xd = self.val(*x).data();
                let d = gd
                    .iter()
                    .zip(xd.iter().zip(y.data()))
                    .map(|(g, (&xv, &yv))| if xv > 0.0 { *g } else { g * (yv + 1.0) })
                    .collect();
                out.push((*x, Tensor::from_vec(y.shape().to_vec(), d)?));
            }
            Op::Sigmoid { x } => {
                let d = gd
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                out.push((*x, Tensor::from_vec(y.shape().to_vec(), d)?));
            }
            Op::Softmax { x, d } => {
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(*d)
                    .zip(gd.chunks(*d))
                    .zip(dx.chunks_mut(*d))
                {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                out.push((*x, Tensor::from_vec(y.shape().to_vec(), dx)?));
            }
            Op::MaxPool { x, arg } => {
                let mut dx = zeros_like(x);
                for (a, gv) in arg.iter().zip(gd) {
                    dx.data_mut()[*a] += gv;
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let [rows, n_in] = self.val(*x).dims2()?;
                let n_out = self.val(*b).len();
                let (xd, wd) = (self.val(*x).data(), self.val(*w).data());
                let mut dx = vec![0.0; rows * n_in];
                let mut dw = vec![0.0; n_out * n_in];
                let mut db = vec![0.0; n_out];
                kernels::gemm(rows, n_out, n_in, gd, false, wd, false, 0.0, &mut dx);
                kernels::gemm(n_out, rows, n_in, gd, true, xd, false, 0.0, &mut dw);
                for row in gd.chunks(n_out) {
                    kernels::axpy(1.0, row, &mut db);
                }
                out.push((*x, Tensor::from_vec(vec![rows, n_in], dx)?));
                out.push((*w, Tensor::from_vec(vec![n_out, n_in], dw)?));
                out.push((*b, Tensor::from_vec(vec![n_out], db)?));
            }
            Op::Gru {
                x,
                h0,
                w_ih,
                w_hh,
                bias,
                cache,
            } => {
                let [t, n] = self.val(*x).dims2()?;
                let h = self.val(*h0).len();
                let wts = GruWeights {
                    input: n,
                    hidden: h,
                    w_ih: self.val(*w_ih).data(),
                    w_hh: self.val(*w_hh).data(),
                    bias: self.val(*bias).data(),
                };
                let gg = kernels::gru_backward(&wts, self.val(*x).data(), t, cache, gd);
                out.push((*x, Tensor::from_vec(vec![t, n], gg.dx)?));
                out.push((
                    *h0,
                    Tensor::from_vec(self.val(*h0).shape().to_vec(), gg.dh0)?,
                ));
                out.push((*w_ih, Tensor::from_vec(vec![3 * h, n], gg.dw_ih)?));
                out.push((*w_hh, Tensor::from_vec(vec![3 * h, h], gg.dw_hh)?));
                out.push((*bias, Tensor::from_vec(vec![3 * h], gg.dbias)?));
            }
            Op::Flatten { x } => {
                let [c, t, f] = self.val(*x).dims3()?;
                let mut dx = vec![0.0; c * t * f];
                for ch in 0..c {
                    for tt in 0..t {
                        dx[(ch * t + tt) * f..(ch * t + tt + 1) * f]
                            .copy_from_slice(&gd[tt * c * f + ch * f..tt * c * f + (ch + 1) * f]);
                    }
                }
                out.push((*x, Tensor::from_vec(vec![c, t, f], dx)?));
            }
            Op::Unflatten { x } => {
                let [c, t, f] = y.dims3()?;
                let mut dx = vec![0.0; c * t * f];
                for ch in 0..c {
                    for tt in 0..t {
                        dx[tt * c * f + ch * f..tt * c * f + (ch + 1) * f]
                            .copy_from_slice(&gd[(ch * t + tt) * f..(ch * t + tt + 1) * f]);
                    }
                }
                out.push((*x, Tensor::from_vec(vec![t, c * f], dx)?));
            }
            Op::Concat { a, b } => {
                let na = self.val(*a).len();
                out.push((
                    *a,
                    Tensor::from_vec(self.val(*a).shape().to_vec(), gd[..na].to_vec())?,
                ));
                out.push((
                    *b,
                    Tensor::from_vec(self.val(*b).shape().to_vec(), gd[na..].to_vec())?,
                ));
            }
            Op::ConcatTime { xs } => {
                let [c, total, f] = y.dims3()?;
                let mut off = 0;
                for x in xs {
                    let tx = self.val(*x).shape()[1];
                    if needs(x) {
                        let mut dx = Vec::with_capacity(c * tx * f);
                        for ch in 0..c {
                            let src = (ch * total + off) * f;
                            dx.extend_from_slice(&gd[src..src + tx * f]);
                        }
                        out.push((*x, Tensor::from_vec(vec![c, tx, f], dx)?));
                    }
                    off += tx;
                }
            }
            Op::SliceTime { x, start } => {
                let [c, t, f] = self.val(*x).dims3()?;
                let len = y.shape()[1];
                let mut dx = vec![0.0; c * t * f];
                for ch in 0..c {
                    let dst = (ch * t + start) * f;
                    dx[dst..dst + len * f].copy_from_slice(&gd[ch * len * f..(ch + 1) * len * f]);
                }
                out.push((*x, Tensor::from_vec(vec![c, t, f], dx)?));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::MulScalar { x, s } => {
                let sv = self.val(*s).item();
                out.push((*x, g.map(|v| v * sv)));
                let ds = self.val(*x).dot(g);
                out.push((*s, Tensor::full(self.val(*s).shape(), ds)));
            }
            Op::AlignScores { q, k, d_max } => {
                let [t, p] = self.val(*q).dims2()?;
                let (qd, kd) = (self.val(*q).data(), self.val(*k).data());
                let mut dq = vec![0.0; t * p];
                let mut dk = vec![0.0; t * p];
                for d in 0..*d_max {
                    let gv = gd[d];
                    for tt in d..t {
                        kernels::axpy(
                            gv,
                            &kd[(tt - d) * p..(tt - d + 1) * p],
                            &mut dq[tt * p..(tt + 1) * p],
                        );
                        kernels::axpy(
                            gv,
                            &qd[tt * p..(tt + 1) * p],
                            &mut dk[(tt - d) * p..(tt - d + 1) * p],
                        );
                    }
                }
                out.push((*q, Tensor::from_vec(vec![t, p], dq)?));
                out.push((*k, Tensor::from_vec(vec![t, p], dk)?));
            }
            Op::AlignScoresCausal { q, k, d_max, alpha } => {
                let [t, p] = self.val(*q).dims2()?;
                let (qd, kd) = (self.val(*q).data(), self.val(*k).data());
                let mut dq = vec![0.0; t * p];
                let mut dk = vec![0.0; t * p];
                // reverse accumulation of the exponential recursion
                let mut acc = vec![0.0; *d_max];
                for tt in (0..t).rev() {
                    for d in 0..*d_max {
                        acc[d] = gd[tt * d_max + d] + alpha * acc[d];
                        if d <= tt && acc[d] != 0.0 {
                            let gv = acc[d];
                            kernels::axpy(
                                gv,
                                &kd[(tt - d) * p..(tt - d + 1) * p],
                                &mut dq[tt * p..(tt + 1) * p],
                            );
                            kernels::axpy(
                                gv,
                                &qd[tt * p..(tt + 1) * p],
                                &mut dk[(tt - d) * p..(tt - d + 1) * p],
                            );
                        }
                    }
                }
                out.push((*q, Tensor::from_vec(vec![t, p], dq)?));
                out.push((*k, Tensor::from_vec(vec![t, p], dk)?));
            }
            Op::SoftShift { x, probs, d_max } => {
                let [c, t, f] = self.val(*x).dims3()?;
                let xd = self.val(*x).data();
                let pd = self.val(*probs).data();
                let per_frame = pd.len() == t * d_max;
                let mut dx = vec![0.0; c * t * f];
                let mut dp = vec![0.0; pd.len()];
                for ch in 0..c {
                    for tt in 0..t {
                        let gr = &gd[(ch * t + tt) * f..(ch * t + tt + 1) * f];
                        let base = if per_frame { tt * d_max } else { 0 };
                        for d in 0..(*d_max).min(tt + 1) {
                            let src = (ch * t + tt - d) * f;
                            dp[base + d] += kernels::dot(gr, &xd[src..src + f]);
                            kernels::axpy(pd[base + d], gr, &mut dx[src..src + f]);
                        }
                    }
                }
                out.push((*x, Tensor::from_vec(vec![c, t, f], dx)?));
                out.push((
                    *probs,
                    Tensor::from_vec(self.val(*probs).shape().to_vec(), dp)?,
                ));
            }
            Op::ApplyMask { mask, spec } => {
                let n = self.val(*mask).len();
                let s = spec.data();
                let dm = (0..n)
                    .map(|i| gd[i] * s[i] + gd[n + i] * s[n + i])
                    .collect();
                out.push((
                    *mask,
                    Tensor::from_vec(self.val(*mask).shape().to_vec(), dm)?,
                ));
            }
            Op::Istft { x, plan } => {
                let cfg = plan.config();
                let [_, t, f] = self.val(*x).dims3()?;
                let n = t * f;
                let mut dx = vec![0.0; 2 * n];
                let mut bins = vec![Complex64::new(0.0, 0.0); f];
                for tt in 0..t {
                    let seg = &gd[tt * cfg.hop..tt * cfg.hop + cfg.win_len];
                    plan.synthesize_frame_adjoint(seg, &mut bins);
                    for (k, b) in bins.iter().enumerate() {
                        dx[tt * f + k] = b.re;
                        dx[n + tt * f + k] = b.im;
                    }
                }
                out.push((*x, Tensor::from_vec(vec![2, t, f], dx)?));
            }
            Op::Stft { x, plan } => {
                let cfg = plan.config();
                let [_, t, f] = y.dims3()?;
                let n = t * f;
                let mut dx = zeros_like(x);
                let mut bins = vec![Complex64::new(0.0, 0.0); f];
                let mut seg = vec![0.0; cfg.win_len];
                for tt in 0..t {
                    for (k, b) in bins.iter_mut().enumerate() {
                        *b = Complex64::new(gd[tt * f + k], gd[n + tt * f + k]);
                    }
                    plan.analyze_frame_adjoint(&bins, &mut seg);
                    kernels::axpy(
                        1.0,
                        &seg,
                        &mut dx.data_mut()[tt * cfg.hop..tt * cfg.hop + cfg.win_len],
                    );
                }
                out.push((*x, dx));
            }
            Op::Ccmse {
                est,
                target,
                compression,
                beta,
            } => {
                let [_, t, f] = self.val(*est).dims3()?;
                let n = t * f;
                let e = self.val(*est).data();
                let s = target.data();
                let scale = gd[0] / n as f64;
                let mut dx = vec![0.0; 2 * n];
                for i in 0..n {
                    let (a, b) = (e[i], e[n + i]);
                    let ((cre, cim), me) = compress(a, b, *compression);
                    let ((sre, sim), ms) = compress(s[i], s[n + i], *compression);
                    let r2 = a * a + b * b;
                    let q = r2 + COMPRESSION_EPS;
                    let ex = (*compression - 1.0) / 2.0;
                    let qe = q.powf(ex);
                    let qe1 = ex * q.powf(ex - 1.0) * 2.0;
                    // Jacobian of C(a, b)
                    let (j_ra, j_rb) = (qe + a * a * qe1, a * b * qe1);
                    let (j_ia, j_ib) = (a * b * qe1, qe + b * b * qe1);
                    let (dre, dim) = (cre - sre, cim - sim);
                    let mut da = 2.0 * beta * (dre * j_ra + dim * j_ia);
                    let mut db = 2.0 * beta * (dre * j_rb + dim * j_ib);
                    let r = r2.sqrt();
                    if r > 0.0 {
                        let dm_dr = qe + r2 * qe1;
                        let k = 2.0 * (1.0 - beta) * (me - ms) * dm_dr / r;
                        da += k * a;
                        db += k * b;
                    }
                    dx[i] = scale * da;
                    dx[n + i] = scale * db;
                }
                out.push((*est, Tensor::from_vec(vec![2, t, f], dx)?));
            }
            Op::WeightedSum { x, w } => {
                let gv = gd[0];
                out.push((
                    *x,
                    Tensor::from_vec(
                        self.val(*x).shape().to_vec(),
                        w.data().iter().map(|v| v * gv).collect(),
                    )?,
                ));
            }
            Op::SumSquares { x } => {
                let gv = gd[0];
                out.push((*x, self.val(*x).map(|v| 2.0 * v * gv)));
            }
        }
        Ok(out)
    }
}

/// Compressed complex value and its magnitude.
#[inline]
pub fn compress(re: f64, im: f64, c: f64) -> ((f64, f64), f64) {
    let r2 = re * re + im * im;
    let s = (r2 + COMPRESSION_EPS).powf((c - 1.0) / 2.0);
    ((re * s, im * s), r2.sqrt() * s)
}
