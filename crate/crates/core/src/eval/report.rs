use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const AECMOS_NOTE: &str = "AECMOS requires an external neural scorer and is not computed";

/// Frames of delay error counted as a successful recovery.
pub const DELAY_TOLERANCE_FRAMES: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub erle_db: Option<f64>,
    pub align_argmax_frames: Option<f64>,
    pub true_delay_frames: Option<f64>,
    pub abs_delay_err_frames: Option<f64>,
}

/// Mean with a normal-approximation 95% confidence half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl Aggregate {
    /// `ci95 = 1.96 * s / sqrt(n)` with the sample standard deviation `s`
    /// (zero for a single value).
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Self {
            mean,
            ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
            n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub ms_per_frame: f64,
    /// Processing time over frame duration.
    pub real_time_factor: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub rows: Vec<EvalRow>,
    pub skipped: usize,
    pub erle_db: Option<Aggregate>,
    /// Fraction of clips within one frame of the true delay.
    pub delay_success: Option<Aggregate>,
    pub abs_delay_err_frames: Option<Aggregate>,
    pub runtime: Option<Runtime>,
    pub aecmos: Option<f64>,
    pub note: String,
}

impl EvalReport {
    pub fn new(system: impl Into<String>, rows: Vec<EvalRow>, skipped: usize) -> Self {
        let mut r = Self {
            system: system.into(),
            rows,
            skipped,
            erle_db: None,
            delay_success: None,
            abs_delay_err_frames: None,
            runtime: None,
            aecmos: None,
            note: AECMOS_NOTE.into(),
        };
        r.recompute();
        r
    }

    /// Rebuilds every aggregate from the stored rows.
    pub fn recompute(&mut self) {
        let erle: Vec<f64> = self.rows.iter().filter_map(|r| r.erle_db).collect();
        let err: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.abs_delay_err_frames)
            .collect();
        let hit: Vec<f64> = err
            .iter()
            .map(|&e| {
                if e <= DELAY_TOLERANCE_FRAMES {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        self.erle_db = Aggregate::of(&erle);
        self.abs_delay_err_frames = Aggregate::of(&err);
        self.delay_success = Aggregate::of(&hit);
    }

    pub fn with_runtime(mut self, rt: Runtime) -> Self {
        self.runtime = Some(rt);
        self
    }

    /// Rows as JSON lines followed by one summary line.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "summary": {
                "system": self.system,
                "skipped": self.skipped,
                "erle_db": self.erle_db,
                "delay_success": self.delay_success,
                "abs_delay_err_frames": self.abs_delay_err_frames,
                "runtime": self.runtime,
                "aecmos": self.aecmos,
                "note": self.note,
            }
        });
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn cell(a: Option<Aggregate>, scale: f64, digits: usize) -> String {
    match a {
        Some(a) => format!(
            "{:.*} ± {:.*}",
            digits,
            a.mean * scale,
            digits,
            a.ci95 * scale
        ),
        None => "N/A".into(),
    }
}

/// Plain-text table: one line per system, metric ± 95% CI.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = [
        "System",
        "ERLE [dB]",
        "AECMOS",
        "Delay ±1 fr [%]",
        "ms/frame",
    ];
    let body: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.system.clone(),
                cell(r.erle_db, 1.0, 2),
                r.aecmos.map_or("N/A".into(), |v| format!("{v:.2}")),
                cell(r.delay_success, 100.0, 1),
                r.runtime
                    .map_or("N/A".into(), |rt| format!("{:.3}", rt.ms_per_frame)),
            ]
        })
        .collect();
    let mut width = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "| {} |", parts.join(" | "));
    };
    line(&header.map(String::from), &mut out);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for row in &body {
        line(row, &mut out);
    }
    let _ = writeln!(out, "AECMOS: {AECMOS_NOTE}.");
    out
}
