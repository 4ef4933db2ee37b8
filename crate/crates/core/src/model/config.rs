use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{ConvGeom, TConvGeom};
use crate::error::{Error, Result};

/// Which network the parameters describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Two encoder branches joined by the delay-attention block.
    AlignCruse,
    /// Same network with the align block replaced by identity; the far end
    /// must be aligned beforehand.
    Cruse,
}

/// How the align block turns scores into delay weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// One distribution from the whole utterance.
    Utterance,
    /// Leaky running scores, one distribution per frame.
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Microphone branch; the last two blocks run after the concat.
    pub mic_channels: Vec<usize>,
    pub far_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub kernel_t: usize,
    pub kernel_f: usize,
    pub stride_f: usize,
    pub dec_kernel_f: usize,
    pub align_pool: usize,
    pub align_proj: usize,
    pub d_max: usize,
    pub align_alpha: f64,
    pub gru_hidden: usize,
    pub bins: usize,
    pub scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AlignCruse,
            mic_channels: vec![16, 40, 72, 32],
            far_channels: vec![8, 24],
            dec_channels: vec![32, 48, 48],
            kernel_t: 4,
            kernel_f: 3,
            stride_f: 2,
            dec_kernel_f: 3,
            align_pool: 4,
            align_proj: 16,
            d_max: 100,
            align_alpha: 0.99,
            gru_hidden: 352,
            bins: 161,
            scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// Full-size network.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Quarter-width network with a 0.5 s delay range.
    pub fn tiny() -> Self {
        let mut cfg = Self::default().scaled(0.25);
        cfg.d_max = 50;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" | "default" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected tiny or paper)"
            ))),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Multiplies every channel count by `s` (rounded, at least 1) and
    /// resizes the recurrent layer to match the bottleneck.
    pub fn scaled(mut self, s: f64) -> Self {
        let sc = |v: &mut Vec<usize>| {
            for c in v.iter_mut() {
                *c = ((*c as f64 * s).round() as usize).max(1);
            }
        };
        sc(&mut self.mic_channels);
        sc(&mut self.far_channels);
        sc(&mut self.dec_channels);
        self.scale *= s;
        self.gru_hidden = self.bottleneck_size();
        self
    }

    pub fn conv_geom(&self, c_in: usize, c_out: usize) -> ConvGeom {
        ConvGeom {
            c_in,
            c_out,
            k_t: self.kernel_t,
            k_f: self.kernel_f,
            stride_f: self.stride_f,
            pad_t: self.kernel_t - 1,
        }
    }

    /// Bin counts after each of the four encoder convolutions.
    pub fn encoder_bins(&self) -> [usize; 5] {
        let g = self.conv_geom(1, 1);
        let mut b = [self.bins; 5];
        for i in 1..5 {
            b[i] = g.out_f(b[i - 1]);
        }
        b
    }

    /// Transposed convolution restoring `to` bins from `from`.
    pub fn tconv_geom(
        &self,
        c_in: usize,
        c_out: usize,
        from: usize,
        to: usize,
    ) -> Result<TConvGeom> {
        let mut g = TConvGeom {
            c_in,
            c_out,
            k_f: self.dec_kernel_f,
            stride_f: self.stride_f,
            out_pad: 0,
        };
        let base = g.out_f(from);
        if to < base || to - base >= self.stride_f {
            return Err(Error::Config(format!(
                "no transposed convolution maps {from} to {to} bins"
            )));
        }
        g.out_pad = to - base;
        Ok(g)
    }

    pub fn bottleneck_size(&self) -> usize {
        self.mic_channels.last().copied().unwrap_or(0) * self.encoder_bins()[4]
    }

    pub fn pooled_bins(&self) -> usize {
        self.encoder_bins()[2] / self.align_pool.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.mic_channels.len() != 4
            || self.far_channels.len() != 2
            || self.dec_channels.len() != 3
        {
            return bad("expected 4 microphone, 2 far-end and 3 decoder channel counts");
        }
        let all = self
            .mic_channels
            .iter()
            .chain(&self.far_channels)
            .chain(&self.dec_channels);
        if all.copied().any(|c| c == 0) {
            return bad("channel counts must be positive");
        }
        if self.kernel_t == 0
            || self.kernel_f % 2 == 0
            || self.dec_kernel_f % 2 == 0
            || self.stride_f == 0
        {
            return bad("kernels must be non-empty with odd frequency size; stride positive");
        }
        if self.d_max == 0 || self.align_proj == 0 || self.align_pool == 0 {
            return bad("d_max, align projection and pool size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.align_alpha) {
            return bad("align decay must lie in [0, 1]");
        }
        if self.bins < 2 {
            return bad("need at least two frequency bins");
        }
        let eb = self.encoder_bins();
        if eb[4] == 0 || self.pooled_bins() == 0 {
            return bad("too few bins for the encoder/pooling plan");
        }
        for (from, to) in [
            (eb[4], eb[3]),
            (eb[3], eb[2]),
            (eb[2], eb[1]),
            (eb[1], eb[0]),
        ] {
            self.tconv_geom(1, 1, from, to)?;
        }
        if self.gru_hidden != self.bottleneck_size() {
            return Err(Error::Config(format!(
                "gru_hidden {} must equal the flattened bottleneck {}",
                self.gru_hidden,
                self.bottleneck_size()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan() {
        let c = ModelConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.encoder_bins(), [161, 81, 41, 21, 11]);
        assert_eq!(c.bottleneck_size(), 352);
        assert_eq!(c.pooled_bins(), 10);
    }

    #[test]
    fn tiny_plan() {
        let c = ModelConfig::tiny();
        c.validate().unwrap();
        assert_eq!(c.mic_channels, vec![4, 10, 18, 8]);
        assert_eq!(c.far_channels, vec![2, 6]);
        assert_eq!(c.dec_channels, vec![8, 12, 12]);
        assert_eq!(c.gru_hidden, 88);
        assert_eq!(c.d_max, 50);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = ModelConfig::tiny();
        c.d_max = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.gru_hidden = 10;
        assert!(c.validate().is_err());
        assert!(ModelConfig::preset("huge").is_err());
    }
}
