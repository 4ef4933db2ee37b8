//! Frame-at-a-time inference with bounded state. Mirrors
//! [`forward`](super::forward::forward) with running batch-norm statistics
//! and causal alignment.

use std::collections::VecDeque;

use super::config::{ModelConfig, Variant};
use super::params::{ParamStore, DECODER_BLOCKS, ENCODER_BLOCKS};
use crate::autodiff::kernels::{self, ConvGeom, GruWeights, TConvGeom, BN_EPS};
use crate::error::{Error, Result};

/// Sliding window of the last `k_t` input frames of one convolution.
#[derive(Clone, Debug)]
struct ConvHistory {
    c: usize,
    k_t: usize,
    f: usize,
    buf: Vec<f64>,
}

impl ConvHistory {
    fn new(c: usize, k_t: usize, f: usize) -> Self {
        Self {
            c,
            k_t,
            f,
            buf: vec![0.0; c * k_t * f],
        }
    }

    fn push(&mut self, frame: &[f64]) {
        let (kf, f) = (self.k_t * self.f, self.f);
        for ch in 0..self.c {
            let block = &mut self.buf[ch * kf..(ch + 1) * kf];
            block.copy_within(f.., 0);
            block[kf - f..].copy_from_slice(&frame[ch * f..(ch + 1) * f]);
        }
    }
}

#[derive(Clone, Debug)]
struct AlignState {
    scores: Vec<f64>,
    /// Newest first: keys and far-end maps of the last `d_max` frames.
    keys: VecDeque<Vec<f64>>,
    far: VecDeque<Vec<f64>>,
}

/// Per-stream recurrent state. Parameters are passed to every call so one
/// [`ParamStore`] can serve many streams.
#[derive(Clone, Debug)]
pub struct StreamState {
    conv: Vec<ConvHistory>,
    align: Option<AlignState>,
    h: Vec<f64>,
    frames: usize,
}

fn bn_elu(store: &ParamStore, block: &str, x: &mut [f64]) -> Result<()> {
    let (mean, var) = store.running_stats(block)?;
    let gamma = store.get(&format!("{block}.bn.gamma"))?.data();
    let beta = store.get(&format!("{block}.bn.beta"))?.data();
    let c = mean.len();
    let n = x.len() / c;
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        for v in &mut x[ch * n..(ch + 1) * n] {
            *v = kernels::elu(gamma[ch] * ((*v - mean[ch]) * inv) + beta[ch]);
        }
    }
    Ok(())
}

fn pool_flat(x: &[f64], c: usize, f: usize, k: usize) -> Vec<f64> {
    kernels::max_pool_freq(x, c, f, k).0
}

impl StreamState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let eb = cfg.encoder_bins();
        let (m, fc) = (&cfg.mic_channels, &cfg.far_channels);
        let k = cfg.kernel_t;
        let conv = vec![
            ConvHistory::new(1, k, eb[0]),
            ConvHistory::new(m[0], k, eb[1]),
            ConvHistory::new(1, k, eb[0]),
            ConvHistory::new(fc[0], k, eb[1]),
            ConvHistory::new(m[1] + fc[1], k, eb[2]),
            ConvHistory::new(m[2], k, eb[3]),
        ];
        let align = (cfg.variant == Variant::AlignCruse).then(|| AlignState {
            scores: vec![0.0; cfg.d_max],
            keys: VecDeque::with_capacity(cfg.d_max),
            far: VecDeque::with_capacity(cfg.d_max),
        });
        Ok(Self {
            conv,
            align,
            h: vec![0.0; cfg.gru_hidden],
            frames: 0,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Causal encoder block on history slot `i`; returns `c_out x f_out`.
    fn conv_block(&mut self, store: &ParamStore, i: usize, input: &[f64]) -> Result<Vec<f64>> {
        let cfg = store.config();
        let block = ENCODER_BLOCKS[i];
        let hist = &mut self.conv[i];
        hist.push(input);
        let w = store.get(&format!("{block}.w"))?;
        let b = store.get(&format!("{block}.b"))?.data();
        let geom = ConvGeom {
            pad_t: 0,
            ..cfg.conv_geom(hist.c, b.len())
        };
        let f_out = geom.out_f(hist.f);
        let mut out = vec![0.0; b.len() * f_out];
        kernels::conv2d_forward(&geom, &hist.buf, hist.k_t, hist.f, w.data(), b, &mut out);
        bn_elu(store, block, &mut out)?;
        Ok(out)
    }

    /// Processes one frame of `bins` log-power features from each side.
    /// Returns the mask frame and, for the aligned model, this frame's
    /// delay distribution.
    pub fn step(
        &mut self,
        store: &ParamStore,
        mic: &[f64],
        far: &[f64],
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let cfg = store.config();
        if mic.len() != cfg.bins || far.len() != cfg.bins {
            return Err(Error::Shape(format!(
                "stream frames must have {} bins",
                cfg.bins
            )));
        }
        if self.h.len() != cfg.gru_hidden
            || self.align.is_some() != (cfg.variant == Variant::AlignCruse)
        {
            return Err(Error::Config(
                "stream state was built for a different model".into(),
            ));
        }
        let eb = cfg.encoder_bins();
        let (mc, fc) = (&cfg.mic_channels, &cfg.far_channels);

        let e1 = self.conv_block(store, 0, mic)?;
        let e2 = self.conv_block(store, 1, &e1)?;
        let f1 = self.conv_block(store, 2, far)?;
        let f2 = self.conv_block(store, 3, &f1)?;

        let (far_aligned, delay) = match &mut self.align {
            None => (f2, None),
            Some(st) => {
                let k = cfg.align_pool;
                let qin = pool_flat(&e2, mc[1], eb[2], k);
                let kin = pool_flat(&f2, fc[1], eb[2], k);
                let qb = store.get("align.q.b")?.data();
                let kb = store.get("align.k.b")?.data();
                let mut q = vec![0.0; qb.len()];
                let mut key = vec![0.0; kb.len()];
                kernels::linear_forward(
                    &qin,
                    qin.len(),
                    store.get("align.q.w")?.data(),
                    qb,
                    &mut q,
                );
                kernels::linear_forward(
                    &kin,
                    kin.len(),
                    store.get("align.k.w")?.data(),
                    kb,
                    &mut key,
                );
                if st.keys.len() == cfg.d_max {
                    st.keys.pop_back();
                    st.far.pop_back();
                }
                st.keys.push_front(key);
                st.far.push_front(f2);
                for (d, s) in st.scores.iter_mut().enumerate() {
                    *s *= cfg.align_alpha;
                    if let Some(kd) = st.keys.get(d) {
                        *s += kernels::dot(&q, kd);
                    }
                }
                let mut probs = vec![0.0; cfg.d_max];
                kernels::softmax_rows(&st.scores, cfg.d_max, &mut probs);
                let mut aligned = vec![0.0; st.far[0].len()];
                for (p, x) in probs.iter().zip(&st.far) {
                    kernels::axpy(*p, x, &mut aligned);
                }
                (aligned, Some(probs))
            }
        };

        let mut joint = e2.clone();
        joint.extend_from_slice(&far_aligned);
        let e3 = self.conv_block(store, 4, &joint)?;
        let e4 = self.conv_block(store, 5, &e3)?;

        // bottleneck: c x f is already the flattened frame layout
        let h = cfg.gru_hidden;
        let w = GruWeights {
            input: h,
            hidden: h,
            w_ih: store.get("gru.w_ih")?.data(),
            w_hh: store.get("gru.w_hh")?.data(),
            bias: store.get("gru.b")?.data(),
        };
        let mut gx = vec![0.0; 3 * h];
        kernels::gru_input_proj(&w, &e4, &mut gx);
        let mut h_new = vec![0.0; h];
        kernels::gru_step(&w, &gx, &self.h, &mut h_new);
        self.h.copy_from_slice(&h_new);

        let mut d = h_new;
        let mut f = eb[4];
        let encs = [(&e4, mc[3]), (&e3, mc[2]), (&e2, mc[1]), (&e1, mc[0])];
        for (i, (enc, c_enc)) in encs.into_iter().enumerate() {
            let w = store.get(&format!("skip.{i}.w"))?.data();
            let b = store.get(&format!("skip.{i}.b"))?.data();
            for (o, bo) in b.iter().enumerate() {
                let row = &mut d[o * f..(o + 1) * f];
                for v in row.iter_mut() {
                    *v += bo;
                }
                for ci in 0..c_enc {
                    kernels::axpy(w[o * c_enc + ci], &enc[ci * f..(ci + 1) * f], row);
                }
            }
            let to = eb[3 - i];
            let (name, is_mask) = if i < 3 {
                (DECODER_BLOCKS[i], false)
            } else {
                ("mask", true)
            };
            let tw = store.get(&format!("{name}.w"))?;
            let tb = store.get(&format!("{name}.b"))?.data();
            let c_in = tw.shape()[0];
            let g = TConvGeom {
                c_in,
                c_out: tb.len(),
                ..cfg.tconv_geom(c_in, tb.len(), f, to)?
            };
            let mut out = vec![0.0; tb.len() * to];
            kernels::tconv_forward(&g, &d, 1, f, tw.data(), tb, &mut out);
            if is_mask {
                let gain = store.gain();
                for v in out.iter_mut() {
                    *v = gain * kernels::sigmoid(*v);
                }
            } else {
                bn_elu(store, name, &mut out)?;
            }
            d = out;
            f = to;
        }
        self.frames += 1;
        Ok((d, delay))
    }
}
