mod common;

use align_cruse::alignment::{apply_delay, online_track, OnlineConfig};
use align_cruse::data::{scenario_set, speech_surrogate, LdKind, ScenarioConfig};
use align_cruse::dsp::AudioClip;
use align_cruse::eval::{
    benchmark_runtime, delay_recovery_report, erle, evaluate_model, render_table, Aggregate,
    DelaySystem, EvalClip, EvalReport, EvalRow, AECMOS_NOTE,
};
use align_cruse::model::{AlignMode, ModelConfig, Variant};
use common::{clip, frozen_store, noise, rng};

#[test]
fn erle_examples() {
    let mic = clip(noise(&mut rng(1), 4000, 0.5));
    assert_eq!(erle(&mic, &mic).unwrap(), 0.0);
    let half = clip(mic.samples.iter().map(|v| 0.5 * v).collect());
    assert!((erle(&mic, &half).unwrap() - 6.0206).abs() < 1e-4);
    assert_eq!(erle(&mic, &AudioClip::zeros(4000)).unwrap(), 80.0);
    assert!(erle(&mic, &AudioClip::zeros(10)).is_err());
    let louder = clip(mic.samples.iter().map(|v| 20.0 * v).collect());
    assert_eq!(erle(&mic, &louder).unwrap(), -20.0);
}

#[test]
fn erle_matches_direct_computation_and_ignores_common_scale() {
    let mut r = rng(2);
    let mic = noise(&mut r, 3000, 0.8);
    let out = noise(&mut r, 3000, 0.05);
    let direct = 10.0
        * ((mic.iter().map(|v| v * v).sum::<f64>() + 1e-12)
            / (out.iter().map(|v| v * v).sum::<f64>() + 1e-12))
            .log10();
    let got = erle(&clip(mic.clone()), &clip(out.clone())).unwrap();
    assert!((got - direct).abs() < 1e-9);
    let s = |x: &[f64]| clip(x.iter().map(|v| 3.0 * v).collect());
    assert!((erle(&s(&mic), &s(&out)).unwrap() - got).abs() < 1e-9);
}

#[test]
fn aggregate_mean_and_interval() {
    let a = Aggregate::of(&[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(a.mean, 2.0);
    assert!((a.ci95 - 1.96 / 3f64.sqrt()).abs() < 1e-12);
    assert_eq!(a.n, 3);
    assert_eq!(Aggregate::of(&[4.0]).unwrap().ci95, 0.0);
    assert!(Aggregate::of(&[]).is_none());
}

fn row(id: &str, erle_db: f64, err: f64) -> EvalRow {
    EvalRow {
        id: id.into(),
        erle_db: Some(erle_db),
        align_argmax_frames: Some(30.0 + err),
        true_delay_frames: Some(30.0),
        abs_delay_err_frames: Some(err),
    }
}

#[test]
fn report_aggregates_recompute_from_rows() {
    let mut rep = EvalReport::new(
        "x",
        vec![
            row("a", 10.0, 0.0),
            row("b", 20.0, 1.0),
            row("c", 30.0, 3.0),
        ],
        1,
    );
    assert_eq!(rep.erle_db.unwrap().mean, 20.0);
    assert!((rep.delay_success.unwrap().mean - 2.0 / 3.0).abs() < 1e-12);
    let snapshot = rep.clone();
    rep.recompute();
    assert_eq!(rep, snapshot);
    rep.rows.pop();
    rep.recompute();
    assert_eq!(rep.delay_success.unwrap().mean, 1.0);
    assert!(rep.aecmos.is_none());
    assert_eq!(rep.note, AECMOS_NOTE);
}

#[test]
fn report_file_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let rep = EvalReport::new(
        "Align-CRUSE",
        vec![row("a", 10.0, 0.0), row("b", 12.0, 0.5)],
        0,
    );
    let path = dir.path().join("r.jsonl");
    rep.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], "a");
    assert_eq!(lines[2]["summary"]["erle_db"]["mean"], 11.0);
    assert!(lines[2]["summary"]["aecmos"].is_null());
    let table = render_table(&[rep, EvalReport::new("CRUSE", vec![], 0)]);
    assert!(table.contains("Align-CRUSE"));
    assert!(table.contains("11.00 ±"));
    assert!(table.contains("N/A"));
    assert_eq!(table.lines().count(), 5);
}

fn eval_clips(cfg: &ScenarioConfig, n: usize) -> Vec<EvalClip> {
    scenario_set(cfg, n)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| EvalClip {
            id: format!("c{i}"),
            mic: s.mic,
            far: s.far,
            delay_samples: Some(s.delay),
        })
        .collect()
}

#[test]
fn global_aligner_is_exact_on_noiseless_ld_h() {
    let cfg = ScenarioConfig {
        snr_range: None,
        ..LdKind::H.scenario_config(3.0, 9)
    };
    let mut clips = eval_clips(&cfg, 10);
    clips[3].delay_samples = None;
    let rep = delay_recovery_report(&DelaySystem::Global { max_delay: 16000 }, &clips).unwrap();
    assert_eq!(rep.skipped, 1);
    assert_eq!(rep.rows.len(), 9);
    assert_eq!(rep.delay_success.unwrap().mean, 1.0);
    assert!(rep
        .rows
        .iter()
        .all(|r| r.abs_delay_err_frames.unwrap() == 0.0));
}

#[test]
fn online_aligner_errs_more_right_after_a_delay_step() {
    let n = 16000 * 12;
    let far = speech_surrogate(&mut rng(3), n);
    let half = n / 2;
    let mut mic = apply_delay(&clip(far.clone()), 4800).samples;
    mic[half..].copy_from_slice(&apply_delay(&clip(far.clone()), 9600).samples[half..]);
    let trace = online_track(&clip(mic), &clip(far), &OnlineConfig::default())
        .unwrap()
        .per_frame
        .unwrap();
    let err = |range: std::ops::Range<usize>| {
        let r = &trace[range];
        r.iter().map(|&d| d.abs_diff(9600) as f64).sum::<f64>() / r.len() as f64
    };
    let k = half / 160;
    assert!(err(k..k + 100) > err(trace.len() - 100..trace.len()));
}

#[test]
fn model_reports_carry_erle_and_delay_columns() {
    let cfg = LdKind::M.scenario_config(1.0, 4);
    let clips = eval_clips(&cfg, 2);
    let align = frozen_store(&ModelConfig::tiny(), 1);
    let rep = evaluate_model(&align, AlignMode::Causal, &clips).unwrap();
    assert!(rep
        .rows
        .iter()
        .all(|r| r.erle_db.is_some() && r.align_argmax_frames.is_some()));
    assert!(rep.erle_db.is_some() && rep.delay_success.is_some());
    let rep =
        delay_recovery_report(&DelaySystem::Model(&align, AlignMode::Utterance), &clips).unwrap();
    assert_eq!(rep.rows.len(), 2);
    let plain = frozen_store(&ModelConfig::tiny().with_variant(Variant::Cruse), 1);
    let rep = evaluate_model(&plain, AlignMode::Causal, &clips).unwrap();
    assert!(rep
        .rows
        .iter()
        .all(|r| r.erle_db.is_some() && r.align_argmax_frames.is_none()));
    assert!(rep.delay_success.is_none());
    assert!(delay_recovery_report(&DelaySystem::Model(&plain, AlignMode::Causal), &clips).is_err());
}

#[test]
fn tiny_model_runs_faster_than_default() {
    let tiny = benchmark_runtime(&frozen_store(&ModelConfig::tiny(), 1), 300, 20, 0).unwrap();
    let full = benchmark_runtime(&frozen_store(&ModelConfig::paper(), 1), 300, 20, 0).unwrap();
    assert!(
        tiny.ms_per_frame < full.ms_per_frame,
        "{tiny:?} vs {full:?}"
    );
    assert!((full.real_time_factor - full.ms_per_frame / 10.0).abs() < 1e-12);
    assert_eq!(full.frames, 300);
    assert!(benchmark_runtime(&frozen_store(&ModelConfig::tiny(), 1), 0, 0, 0).is_err());
}
