use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{child_seed, synth_scenario, Nonlinearity, ScenarioConfig};
use crate::dsp::write_wav;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Long-delay far-end single-talk sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LdKind {
    /// Delays in [0.3, 0.5] s.
    M,
    /// Delays in [0.5, 1.0] s.
    H,
}

impl LdKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ld-m" | "m" => Ok(Self::M),
            "ld-h" | "h" => Ok(Self::H),
            other => Err(Error::Config(format!(
                "unknown set kind '{other}' (expected ld-m or ld-h)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::M => "ld-m",
            Self::H => "ld-h",
        }
    }

    pub fn delay_range(self) -> [f64; 2] {
        match self {
            Self::M => [0.3, 0.5],
            Self::H => [0.5, 1.0],
        }
    }

    /// Far-end single talk: the near end is silent, so the target is too.
    pub fn scenario_config(self, clip_len: f64, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            delay_range: self.delay_range(),
            ser_range: None,
            snr_range: Some([20.0, 40.0]),
            rir_decay: Some([0.1, 0.5]),
            nonlinearity: Nonlinearity::None,
            near_prob: 0.0,
            level_range: Some([-15.0, -3.0]),
            clip_len,
            surrogate: true,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub mic_path: String,
    pub far_path: String,
    pub target_path: String,
    pub delay_samples: Option<usize>,
    pub ser_db: Option<f64>,
    pub snr_db: Option<f64>,
    pub rt60_s: Option<f64>,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl ManifestRow {
    pub fn resolve(&self, base: &Path) -> (PathBuf, PathBuf, PathBuf) {
        (
            base.join(&self.mic_path),
            base.join(&self.far_path),
            base.join(&self.target_path),
        )
    }
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON-lines manifest. Rows lacking a ground-truth delay are kept
/// with `delay_samples = None`; blank lines are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    let missing = rows.iter().filter(|r| r.delay_samples.is_none()).count();
    if missing > 0 {
        warn!("{missing} manifest rows carry no ground-truth delay");
    }
    Ok(rows)
}

/// Writes `n` scenarios drawn from `cfg` as WAV triples plus a manifest in
/// `out`. Item `i` uses `child_seed(cfg.seed, i)`.
pub fn make_ld_set(
    out: impl AsRef<Path>,
    prefix: &str,
    cfg: &ScenarioConfig,
    n: usize,
) -> Result<Vec<ManifestRow>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let seed = child_seed(cfg.seed, i);
        let sc = synth_scenario(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let id = format!("{prefix}-{i:04}");
        let row = ManifestRow {
            mic_path: format!("{id}_mic.wav"),
            far_path: format!("{id}_far.wav"),
            target_path: format!("{id}_target.wav"),
            id,
            delay_samples: Some(sc.delay),
            ser_db: sc.meta.ser_db,
            snr_db: sc.meta.snr_db,
            rt60_s: sc.meta.rt60_s,
            nonlinearity: sc.meta.nonlinearity,
            seed,
        };
        let (m, f, t) = row.resolve(out);
        write_wav(m, &sc.mic)?;
        write_wav(f, &sc.far)?;
        write_wav(t, &sc.near)?;
        rows.push(row);
    }
    write_manifest(out.join(MANIFEST_NAME), &rows)?;
    Ok(rows)
}
