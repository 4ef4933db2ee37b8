//! Framing, square-root Hann windowing, forward/inverse STFT and log-power
//! features.
//!
//! Conventions: frame `k` covers samples `[k*hop, k*hop + win_len)`, there is
//! no zero-padded first frame, the forward DFT is unnormalized and the inverse
//! carries the `1/fft_len` factor. Only bins `0..=fft_len/2` are kept.

mod stream;
pub mod wav;

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use stream::{Framer, OverlapAdd};
pub use wav::{read_wav, write_wav, WavChunkReader, WavStreamWriter};

pub const SAMPLE_RATE: u32 = 16_000;

/// Floor inside `ln(|X|^2 + eps)`.
pub const LOG_POWER_EPS: f64 = 1e-12;

/// Square root of the periodic Hann window.
pub fn make_sqrt_hann(win_len: usize) -> Result<Vec<f64>> {
    if win_len < 2 || win_len % 2 != 0 {
        return Err(Error::Config(format!(
            "window length must be even and >= 2, got {win_len}"
        )));
    }
    let n = win_len as f64;
    Ok((0..win_len)
        .map(|i| {
            let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos();
            // cos rounding can leave a tiny negative at i = 0
            hann.max(0.0).sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: Vec<f64>,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::new(320).expect("default STFT geometry is valid")
    }
}

impl StftConfig {
    /// Sqrt-Hann configuration with `hop = win_len / 2` and `fft_len = win_len`.
    pub fn new(win_len: usize) -> Result<Self> {
        let window = make_sqrt_hann(win_len)?;
        Ok(Self {
            sample_rate: SAMPLE_RATE,
            win_len,
            hop: win_len / 2,
            fft_len: win_len,
            window,
        })
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Number of full frames that fit in `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            (len - self.win_len) / self.hop + 1
        }
    }

    /// Length of the overlap-added signal covering `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.win_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len != self.fft_len {
            return Err(Error::Config(format!(
                "win_len ({}) must equal fft_len ({})",
                self.win_len, self.fft_len
            )));
        }
        if self.win_len < 2 || self.win_len % 2 != 0 || self.hop * 2 != self.win_len {
            return Err(Error::Config(format!(
                "hop ({}) must be half of an even win_len ({})",
                self.hop, self.win_len
            )));
        }
        if self.window.len() != self.win_len {
            return Err(Error::Config("window length differs from win_len".into()));
        }
        if self.window.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config("window entries must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    /// Pipeline entry check: 16 kHz and finite samples.
    pub fn check(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "expected {SAMPLE_RATE} Hz audio, got {} Hz",
                self.sample_rate
            )));
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(())
    }
}

/// Complex `t x f` matrix, row-major over frames.
#[derive(Clone, PartialEq)]
pub struct SpectralFrames {
    pub data: Vec<Complex64>,
    pub frames: usize,
    pub bins: usize,
    pub hop: usize,
    pub win_len: usize,
}

impl fmt::Debug for SpectralFrames {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralFrames")
            .field("frames", &self.frames)
            .field("bins", &self.bins)
            .field("hop", &self.hop)
            .field("win_len", &self.win_len)
            .finish_non_exhaustive()
    }
}

impl SpectralFrames {
    pub fn zeros(frames: usize, cfg: &StftConfig) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); frames * cfg.bins()],
            frames,
            bins: cfg.bins(),
            hop: cfg.hop,
            win_len: cfg.win_len,
        }
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.data[t * self.bins + f]
    }

    /// Real/imaginary planes as a `2 x t x f` tensor.
    pub fn to_planes(&self) -> Tensor {
        let n = self.frames * self.bins;
        let mut data = vec![0.0; 2 * n];
        for (i, c) in self.data.iter().enumerate() {
            data[i] = c.re;
            data[n + i] = c.im;
        }
        Tensor::from_vec(vec![2, self.frames, self.bins], data)
            .expect("plane layout matches frame count")
    }

    pub fn from_planes(planes: &Tensor, cfg: &StftConfig) -> Result<Self> {
        let [two, t, f] = planes.dims3()?;
        if two != 2 || f != cfg.bins() {
            return Err(Error::Shape(format!(
                "expected 2 x t x {} planes, got {:?}",
                cfg.bins(),
                planes.shape()
            )));
        }
        let n = t * f;
        let d = planes.data();
        Ok(Self {
            data: (0..n).map(|i| Complex64::new(d[i], d[n + i])).collect(),
            frames: t,
            bins: f,
            hop: cfg.hop,
            win_len: cfg.win_len,
        })
    }
}

/// Cached FFT plans and window for one STFT geometry.
pub struct StftPlan {
    cfg: StftConfig,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StftPlan").field("cfg", &self.cfg).finish()
    }
}

impl StftPlan {
    pub fn new(cfg: &StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg: cfg.clone(),
            forward: planner.plan_fft_forward(cfg.fft_len),
            inverse: planner.plan_fft_inverse(cfg.fft_len),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Window, transform and keep the non-negative bins of one frame.
    pub fn analyze_frame(&self, frame: &[f64], out: &mut [Complex64]) {
        let n = self.cfg.fft_len;
        let mut buf: Vec<Complex64> = frame
            .iter()
            .zip(&self.cfg.window)
            .map(|(x, w)| Complex64::new(x * w, 0.0))
            .collect();
        buf.resize(n, Complex64::new(0.0, 0.0));
        self.forward.process(&mut buf);
        out.copy_from_slice(&buf[..self.cfg.bins()]);
    }

    /// Hermitian-extend, inverse transform, scale by `1/fft_len` and apply
    /// the synthesis window. Imaginary parts of DC and Nyquist are ignored.
    pub fn synthesize_frame(&self, bins: &[Complex64], out: &mut [f64]) {
        let n = self.cfg.fft_len;
        let half = n / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[0] = Complex64::new(bins[0].re, 0.0);
        buf[half] = Complex64::new(bins[half].re, 0.0);
        for k in 1..half {
            buf[k] = bins[k];
            buf[n - k] = bins[k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for ((o, b), w) in out.iter_mut().zip(&buf).zip(&self.cfg.window) {
            *o = b.re * scale * w;
        }
    }

    /// Adjoint of [`analyze_frame`](Self::analyze_frame) with respect to the
    /// real/imaginary parts of the retained bins.
    pub fn analyze_frame_adjoint(&self, grad_bins: &[Complex64], out: &mut [f64]) {
        let n = self.cfg.fft_len;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..grad_bins.len()].copy_from_slice(grad_bins);
        // sum_k G_k e^{+2 pi i k n / N}
        self.inverse.process(&mut buf);
        for ((o, b), w) in out.iter_mut().zip(&buf).zip(&self.cfg.window) {
            *o = b.re * w;
        }
    }

    /// Adjoint of [`synthesize_frame`](Self::synthesize_frame).
    pub fn synthesize_frame_adjoint(&self, grad_samples: &[f64], out: &mut [Complex64]) {
        let n = self.cfg.fft_len;
        let half = n / 2;
        let mut buf: Vec<Complex64> = grad_samples
            .iter()
            .zip(&self.cfg.window)
            .map(|(g, w)| Complex64::new(g * w, 0.0))
            .collect();
        self.forward.process(&mut buf);
        let scale = 1.0 / n as f64;
        for k in 0..=half {
            let c = if k == 0 || k == half { 1.0 } else { 2.0 };
            out[k] = if k == 0 || k == half {
                Complex64::new(buf[k].re * c * scale, 0.0)
            } else {
                buf[k] * (c * scale)
            };
        }
    }

    pub fn stft(&self, samples: &[f64]) -> Result<SpectralFrames> {
        let cfg = &self.cfg;
        let frames = cfg.frame_count(samples.len());
        if frames == 0 {
            return Err(Error::EmptyFrames {
                len: samples.len(),
                need: cfg.win_len,
            });
        }
        let mut out = SpectralFrames::zeros(frames, cfg);
        for t in 0..frames {
            let start = t * cfg.hop;
            let frame = &samples[start..start + cfg.win_len];
            self.analyze_frame(frame, out.frame_mut(t));
        }
        Ok(out)
    }

    pub fn istft(&self, frames: &SpectralFrames) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if frames.bins != cfg.bins() {
            return Err(Error::Shape(format!(
                "spectrum has {} bins, configuration expects {}",
                frames.bins,
                cfg.bins()
            )));
        }
        let mut out = vec![0.0; cfg.signal_len(frames.frames)];
        let mut seg = vec![0.0; cfg.win_len];
        for t in 0..frames.frames {
            self.synthesize_frame(frames.frame(t), &mut seg);
            let start = t * cfg.hop;
            for (o, s) in out[start..start + cfg.win_len].iter_mut().zip(&seg) {
                *o += s;
            }
        }
        Ok(out)
    }
}

pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<SpectralFrames> {
    StftPlan::new(cfg)?.stft(&clip.samples)
}

/// Inverse STFT by overlap-add. The output covers
/// `(frames - 1) * hop + win_len` samples.
pub fn istft(frames: &SpectralFrames, cfg: &StftConfig) -> Result<AudioClip> {
    let samples = StftPlan::new(cfg)?.istft(frames)?;
    Ok(AudioClip {
        samples,
        sample_rate: cfg.sample_rate,
    })
}

/// `ln(|X|^2 + eps)` as a `1 x t x f` feature tensor.
pub fn log_power(frames: &SpectralFrames) -> Tensor {
    let data = frames
        .data
        .iter()
        .map(|c| (c.norm_sqr() + LOG_POWER_EPS).ln())
        .collect();
    Tensor::from_vec(vec![1, frames.frames, frames.bins], data)
        .expect("feature layout matches frame count")
}
