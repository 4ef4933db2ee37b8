//! 16-bit PCM mono WAV I/O. Samples map to `[-1, 1)` by division by 32768.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

const SCALE: f64 = 32768.0;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn check_spec(s: &WavSpec, path: &Path) -> Result<()> {
    if s.channels != 1 || s.bits_per_sample != 16 || s.sample_format != SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono, got {} ch / {} bit",
            path.display(),
            s.channels,
            s.bits_per_sample
        )));
    }
    Ok(())
}

pub fn quantize(x: f64) -> i16 {
    (x * SCALE).round().clamp(-32768.0, 32767.0) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let s = reader.spec();
    check_spec(&s, path)?;
    let samples = reader
        .samples::<i16>()
        .map(|r| r.map(|v| v as f64 / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(AudioClip {
        samples,
        sample_rate: s.sample_rate,
    })
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let mut w = WavStreamWriter::create(path)?;
    w.write(&clip.samples)?;
    w.finish()
}

/// Chunked reader that never holds more than one chunk of samples.
pub struct WavChunkReader {
    reader: WavReader<BufReader<File>>,
    sample_rate: u32,
    remaining: usize,
}

impl WavChunkReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = WavReader::open(path)?;
        let s = reader.spec();
        check_spec(&s, path)?;
        let remaining = reader.len() as usize;
        Ok(Self {
            reader,
            sample_rate: s.sample_rate,
            remaining,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.reader.len() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Up to `n` samples; empty once the file is exhausted.
    pub fn read_chunk(&mut self, n: usize) -> Result<Vec<f64>> {
        let take = n.min(self.remaining);
        let mut out = Vec::with_capacity(take);
        for s in self.reader.samples::<i16>().take(take) {
            out.push(s? as f64 / SCALE);
        }
        self.remaining -= out.len();
        Ok(out)
    }
}

pub struct WavStreamWriter {
    writer: WavWriter<BufWriter<File>>,
}

impl WavStreamWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            writer: WavWriter::create(path, spec())?,
        })
    }

    pub fn write(&mut self, samples: &[f64]) -> Result<()> {
        for &x in samples {
            self.writer.write_sample(quantize(x))?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        self.writer.finalize()?;
        Ok(())
    }
}
