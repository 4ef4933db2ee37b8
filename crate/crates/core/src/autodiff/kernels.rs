//! Slice-level forward/backward kernels shared by the tape and the
//! frame-by-frame streaming engine.
//!
//! Layouts: feature maps are `c x t x f`, convolution weights
//! `c_out x c_in x k_t x k_f`, transposed-convolution weights
//! `c_in x c_out x 1 x k_f`, matrices row-major.

/// Geometry of a frequency-strided convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k_t: usize,
    pub k_f: usize,
    pub stride_f: usize,
    /// Zero frames prepended on the past side.
    pub pad_t: usize,
}

impl ConvGeom {
    pub fn pad_f(&self) -> usize {
        (self.k_f - 1) / 2
    }

    pub fn out_f(&self, f: usize) -> usize {
        (f + 2 * self.pad_f() - self.k_f) / self.stride_f + 1
    }

    pub fn out_t(&self, t: usize) -> usize {
        t + self.pad_t + 1 - self.k_t
    }

    /// Output bins `fo` whose tap `c` lands inside `[0, f)`.
    fn valid_range(&self, c: usize, f: usize, f_out: usize) -> (usize, usize) {
        let pad = self.pad_f();
        let s = self.stride_f;
        let lo = if c >= pad { 0 } else { (pad - c).div_ceil(s) };
        // fo * s + c - pad <= f - 1
        let hi_num = f - 1 + pad;
        let hi = if hi_num < c {
            0
        } else {
            ((hi_num - c) / s + 1).min(f_out)
        };
        (lo, hi.max(lo))
    }
}

/// `C = A B + beta C` on row-major operands; `ta`/`tb` read `A`/`B` transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix (`c_in k_t k_f` x `t_out f_out`) of a causal convolution.
fn im2col(g: &ConvGeom, x: &[f64], t: usize, f: usize) -> Vec<f64> {
    let (t_out, f_out) = (g.out_t(t), g.out_f(f));
    let n = t_out * f_out;
    let (pad, s) = (g.pad_f(), g.stride_f);
    let mut col = vec![0.0; g.c_in * g.k_t * g.k_f * n];
    for ci in 0..g.c_in {
        for a in 0..g.k_t {
            for c in 0..g.k_f {
                let r = (ci * g.k_t + a) * g.k_f + c;
                let (lo, hi) = g.valid_range(c, f, f_out);
                for to in 0..t_out {
                    let Some(ti) = (to + a).checked_sub(g.pad_t) else {
                        continue;
                    };
                    let xr = &x[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                    let dst = &mut col[r * n + to * f_out..r * n + (to + 1) * f_out];
                    for fo in lo..hi {
                        dst[fo] = xr[fo * s + c - pad];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(g: &ConvGeom, col: &[f64], t: usize, f: usize, dx: &mut [f64]) {
    let (t_out, f_out) = (g.out_t(t), g.out_f(f));
    let n = t_out * f_out;
    let (pad, s) = (g.pad_f(), g.stride_f);
    for ci in 0..g.c_in {
        for a in 0..g.k_t {
            for c in 0..g.k_f {
                let r = (ci * g.k_t + a) * g.k_f + c;
                let (lo, hi) = g.valid_range(c, f, f_out);
                for to in 0..t_out {
                    let Some(ti) = (to + a).checked_sub(g.pad_t) else {
                        continue;
                    };
                    let src = &col[r * n + to * f_out..r * n + (to + 1) * f_out];
                    let dr = &mut dx[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                    for fo in lo..hi {
                        dr[fo * s + c - pad] += src[fo];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    g: &ConvGeom,
    x: &[f64],
    t: usize,
    f: usize,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    let n = g.out_t(t) * g.out_f(f);
    for co in 0..g.c_out {
        out[co * n..(co + 1) * n].fill(b[co]);
    }
    let col = im2col(g, x, t, f);
    gemm(
        g.c_out,
        g.c_in * g.k_t * g.k_f,
        n,
        w,
        false,
        &col,
        false,
        1.0,
        out,
    );
}

/// Accumulates into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    t: usize,
    f: usize,
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let n = g.out_t(t) * g.out_f(f);
    let k = g.c_in * g.k_t * g.k_f;
    if let Some(db) = db {
        for co in 0..g.c_out {
            db[co] += dout[co * n..(co + 1) * n].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        let col = im2col(g, x, t, f);
        gemm(g.c_out, n, k, dout, false, &col, true, 1.0, dw);
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; k * n];
        gemm(k, g.c_out, n, w, true, dout, false, 0.0, &mut dcol);
        col2im_add(g, &dcol, t, f, dx);
    }
}

/// Geometry of a time-local (`k_t = 1`) transposed convolution over frequency.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k_f: usize,
    pub stride_f: usize,
    pub out_pad: usize,
}

impl TConvGeom {
    pub fn pad_f(&self) -> usize {
        (self.k_f - 1) / 2
    }

    pub fn out_f(&self, f: usize) -> usize {
        (f - 1) * self.stride_f + self.k_f + self.out_pad - 2 * self.pad_f()
    }
}

pub fn tconv_forward(
    g: &TConvGeom,
    x: &[f64],
    t: usize,
    f: usize,
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    let f_out = g.out_f(f);
    let (m, n) = (g.c_out * g.k_f, t * f);
    for co in 0..g.c_out {
        out[co * t * f_out..(co + 1) * t * f_out].fill(b[co]);
    }
    // per-tap contributions, then scatter to strided output bins
    let mut y = vec![0.0; m * n];
    gemm(m, g.c_in, n, w, true, x, false, 0.0, &mut y);
    let pad = g.pad_f() as isize;
    for co in 0..g.c_out {
        for c in 0..g.k_f {
            let yr = &y[(co * g.k_f + c) * n..(co * g.k_f + c + 1) * n];
            for tt in 0..t {
                let or = &mut out[(co * t + tt) * f_out..(co * t + tt + 1) * f_out];
                for fi in 0..f {
                    let fo = (fi * g.stride_f + c) as isize - pad;
                    if fo >= 0 && (fo as usize) < f_out {
                        or[fo as usize] += yr[tt * f + fi];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn tconv_backward(
    g: &TConvGeom,
    x: &[f64],
    t: usize,
    f: usize,
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let f_out = g.out_f(f);
    let (m, n) = (g.c_out * g.k_f, t * f);
    if let Some(db) = db {
        for co in 0..g.c_out {
            db[co] += dout[co * t * f_out..(co + 1) * t * f_out]
                .iter()
                .sum::<f64>();
        }
    }
    let pad = g.pad_f() as isize;
    let mut dy = vec![0.0; m * n];
    for co in 0..g.c_out {
        for c in 0..g.k_f {
            let dr = &mut dy[(co * g.k_f + c) * n..(co * g.k_f + c + 1) * n];
            for tt in 0..t {
                let gr = &dout[(co * t + tt) * f_out..(co * t + tt + 1) * f_out];
                for fi in 0..f {
                    let fo = (fi * g.stride_f + c) as isize - pad;
                    if fo >= 0 && (fo as usize) < f_out {
                        dr[tt * f + fi] = gr[fo as usize];
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        gemm(g.c_in, n, m, x, false, &dy, true, 1.0, dw);
    }
    if let Some(dx) = dx {
        gemm(g.c_in, m, n, w, false, &dy, false, 1.0, dx);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel normalization with the given statistics; returns `x_hat`
/// and writes `gamma * x_hat + beta` to `out`.
pub fn bn_apply(
    x: &[f64],
    c: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
) -> Vec<f64> {
    let n = x.len() / c;
    let mut xhat = vec![0.0; x.len()];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        for i in ch * n..(ch + 1) * n {
            let h = (x[i] - mean[ch]) * inv;
            xhat[i] = h;
            out[i] = gamma[ch] * h + beta[ch];
        }
    }
    xhat
}

/// Biased per-channel mean and variance over everything but the channel axis.
pub fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / c;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s = &x[ch * n..(ch + 1) * n];
        let m = s.iter().sum::<f64>() / n as f64;
        mean[ch] = m;
        var[ch] = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    }
    (mean, var)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Max-shifted softmax over consecutive rows of length `d`.
pub fn softmax_rows(x: &[f64], d: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in or.iter_mut() {
            *o /= s;
        }
    }
}

/// `out[r] = w . x[r] + b` for each row of `x` (`rows x n_in`), `w` is `n_out x n_in`.
pub fn linear_forward(x: &[f64], n_in: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_out = b.len();
    let rows = if n_in == 0 { 0 } else { x.len() / n_in };
    for or in out.chunks_mut(n_out).take(rows) {
        or.copy_from_slice(b);
    }
    gemm(rows, n_in, n_out, x, false, w, true, 1.0, out);
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the compiler vectorize while staying deterministic
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// GRU weights: gate order (z, r, n), single bias per gate.
#[derive(Clone, Copy)]
pub struct GruWeights<'a> {
    pub input: usize,
    pub hidden: usize,
    /// `3H x N`
    pub w_ih: &'a [f64],
    /// `3H x H`
    pub w_hh: &'a [f64],
    /// `3H`
    pub bias: &'a [f64],
}

/// Per-step activations kept for backpropagation through time.
#[derive(Clone, Debug, Default)]
pub struct GruCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub hn: Vec<f64>,
    pub h_prev: Vec<f64>,
}

/// Input projection `W_ih x + b` for one frame.
pub fn gru_input_proj(w: &GruWeights, x: &[f64], out: &mut [f64]) {
    linear_forward(x, w.input, w.w_ih, w.bias, out);
}

/// One recurrent step from a precomputed input projection `gx`.
/// Returns `(z, r, n, U_n h)` for the backward pass.
pub fn gru_step(
    w: &GruWeights,
    gx: &[f64],
    h_prev: &[f64],
    h_out: &mut [f64],
) -> ([Vec<f64>; 3], Vec<f64>) {
    let hs = w.hidden;
    let mut gh = vec![0.0; 3 * hs];
    for (o, wr) in gh.iter_mut().zip(w.w_hh.chunks(hs)) {
        *o = dot(wr, h_prev);
    }
    let mut z = vec![0.0; hs];
    let mut r = vec![0.0; hs];
    let mut n = vec![0.0; hs];
    for j in 0..hs {
        z[j] = sigmoid(gx[j] + gh[j]);
        r[j] = sigmoid(gx[hs + j] + gh[hs + j]);
        n[j] = (gx[2 * hs + j] + r[j] * gh[2 * hs + j]).tanh();
        h_out[j] = (1.0 - z[j]) * n[j] + z[j] * h_prev[j];
    }
    let hn = gh[2 * hs..].to_vec();
    ([z, r, n], hn)
}

/// Runs the sequence `x` (`t x N`) from `h0`; returns outputs (`t x H`) and cache.
pub fn gru_forward(w: &GruWeights, x: &[f64], t: usize, h0: &[f64]) -> (Vec<f64>, GruCache) {
    let hs = w.hidden;
    let mut gx = vec![0.0; t * 3 * hs];
    linear_forward(x, w.input, w.w_ih, w.bias, &mut gx);
    let mut out = vec![0.0; t * hs];
    let mut cache = GruCache {
        z: vec![0.0; t * hs],
        r: vec![0.0; t * hs],
        n: vec![0.0; t * hs],
        hn: vec![0.0; t * hs],
        h_prev: vec![0.0; t * hs],
    };
    let mut h = h0.to_vec();
    for s in 0..t {
        let h_out = &mut out[s * hs..(s + 1) * hs];
        let ([z, r, n], hn) = gru_step(w, &gx[s * 3 * hs..(s + 1) * 3 * hs], &h, h_out);
        cache.z[s * hs..(s + 1) * hs].copy_from_slice(&z);
        cache.r[s * hs..(s + 1) * hs].copy_from_slice(&r);
        cache.n[s * hs..(s + 1) * hs].copy_from_slice(&n);
        cache.hn[s * hs..(s + 1) * hs].copy_from_slice(&hn);
        cache.h_prev[s * hs..(s + 1) * hs].copy_from_slice(&h);
        h.copy_from_slice(h_out);
    }
    (out, cache)
}

pub struct GruGrads {
    pub dx: Vec<f64>,
    pub dh0: Vec<f64>,
    pub dw_ih: Vec<f64>,
    pub dw_hh: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub fn gru_backward(
    w: &GruWeights,
    x: &[f64],
    t: usize,
    cache: &GruCache,
    dout: &[f64],
) -> GruGrads {
    let hs = w.hidden;
    let n_in = w.input;
    let mut dgx = vec![0.0; t * 3 * hs];
    let mut dgh_all = vec![0.0; t * 3 * hs];
    let mut dh_next = vec![0.0; hs];
    for s in (0..t).rev() {
        let sl = s * hs..(s + 1) * hs;
        let (z, r, n, hn, hp) = (
            &cache.z[sl.clone()],
            &cache.r[sl.clone()],
            &cache.n[sl.clone()],
            &cache.hn[sl.clone()],
            &cache.h_prev[sl.clone()],
        );
        let dg = &mut dgx[s * 3 * hs..(s + 1) * 3 * hs];
        let dgh = &mut dgh_all[s * 3 * hs..(s + 1) * 3 * hs];
        let mut dh_prev = vec![0.0; hs];
        for j in 0..hs {
            let dh = dout[s * hs + j] + dh_next[j];
            let dz = dh * (hp[j] - n[j]);
            let dn = dh * (1.0 - z[j]);
            dh_prev[j] = dh * z[j];
            let dan = dn * (1.0 - n[j] * n[j]);
            let dr = dan * hn[j];
            let dar = dr * r[j] * (1.0 - r[j]);
            let daz = dz * z[j] * (1.0 - z[j]);
            dg[j] = daz;
            dg[hs + j] = dar;
            dg[2 * hs + j] = dan;
            dgh[j] = daz;
            dgh[hs + j] = dar;
            dgh[2 * hs + j] = dan * r[j];
        }
        gemm(1, 3 * hs, hs, dgh, false, w.w_hh, false, 1.0, &mut dh_prev);
        dh_next = dh_prev;
    }
    let mut dw_hh = vec![0.0; 3 * hs * hs];
    gemm(
        3 * hs,
        t,
        hs,
        &dgh_all,
        true,
        &cache.h_prev,
        false,
        0.0,
        &mut dw_hh,
    );
    let mut dw_ih = vec![0.0; 3 * hs * n_in];
    gemm(3 * hs, t, n_in, &dgx, true, x, false, 0.0, &mut dw_ih);
    let mut dx = vec![0.0; t * n_in];
    gemm(t, 3 * hs, n_in, &dgx, false, w.w_ih, false, 0.0, &mut dx);
    let mut dbias = vec![0.0; 3 * hs];
    for row in dgx.chunks(3 * hs) {
        axpy(1.0, row, &mut dbias);
    }
    GruGrads {
        dx,
        dh0: dh_next,
        dw_ih,
        dw_hh,
        dbias,
    }
}

/// Non-overlapping max over frequency windows of `k`; remainder bins dropped.
/// Returns pooled values and the flat argmax index per output (first wins).
pub fn max_pool_freq(x: &[f64], rows: usize, f: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let fo = f / k;
    let mut out = vec![0.0; rows * fo];
    let mut arg = vec![0; rows * fo];
    for r in 0..rows {
        for j in 0..fo {
            let base = r * f + j * k;
            let mut best = base;
            for i in base + 1..base + k {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out[r * fo + j] = x[best];
            arg[r * fo + j] = best;
        }
    }
    (out, arg)
}

/// Weighted sum of delayed copies: `out[c,t,:] = sum_d D[t?,d] * x[c,t-d,:]`.
/// `probs` is either one row (`d_max`) shared by every frame or `t x d_max`.
pub fn soft_shift(
    x: &[f64],
    c: usize,
    t: usize,
    f: usize,
    probs: &[f64],
    d_max: usize,
) -> Vec<f64> {
    let per_frame = probs.len() == t * d_max;
    let mut out = vec![0.0; c * t * f];
    for ch in 0..c {
        for tt in 0..t {
            let row = if per_frame {
                &probs[tt * d_max..(tt + 1) * d_max]
            } else {
                probs
            };
            let or = &mut out[(ch * t + tt) * f..(ch * t + tt + 1) * f];
            for (d, &p) in row.iter().enumerate().take(tt + 1) {
                let src = tt - d;
                axpy(p, &x[(ch * t + src) * f..(ch * t + src + 1) * f], or);
            }
        }
    }
    out
}
