use std::path::Path;
use std::process::{Command, Output};

use align_cruse::alignment::apply_delay;
use align_cruse::data::speech_surrogate;
use align_cruse::dsp::{read_wav, write_wav, AudioClip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn acrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acrs"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn far_and_mic(dir: &Path, delay: usize) -> (String, String) {
    let far = AudioClip::new(speech_surrogate(&mut ChaCha8Rng::seed_from_u64(3), 32000));
    let mic = apply_delay(&far, delay);
    let (f, m) = (dir.join("far.wav"), dir.join("mic.wav"));
    write_wav(&f, &far).unwrap();
    write_wav(&m, &mic).unwrap();
    (p(&m).to_string(), p(&f).to_string())
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = acrs(&[
            "gen-data",
            "--kind",
            "ld-h",
            "--n",
            "5",
            "--seed",
            "7",
            "--clip-len",
            "1.5",
            "--out",
            p(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{o:?}");
    }
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 16);
    for n in names {
        assert_eq!(
            std::fs::read(a.join(&n)).unwrap(),
            std::fs::read(b.join(&n)).unwrap()
        );
    }
}

#[test]
fn unit_mask_enhance_passes_microphone_through() {
    let dir = tempfile::tempdir().unwrap();
    let (mic, far) = far_and_mic(dir.path(), 800);
    let out = dir.path().join("out.wav");
    let trace = dir.path().join("delay.jsonl");
    let o = acrs(&[
        "enhance",
        "--unit-mask",
        "--mic",
        &mic,
        "--far",
        &far,
        "--out",
        p(&out),
        "--emit-delay",
        p(&trace),
        "--chunk",
        "160",
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let x = read_wav(&mic).unwrap().samples;
    let y = read_wav(&out).unwrap().samples;
    assert_eq!(x.len(), y.len());
    let worst = (320..x.len() - 320)
        .map(|i| (x[i] - y[i]).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 2.0 / 32768.0, "{worst}");
}

#[test]
fn inspect_reports_default_parameter_count() {
    let o = acrs(&["inspect"]);
    assert_eq!(o.status.code(), Some(0));
    let recs = stdout_json(&o);
    assert_eq!(recs[0]["resolved"]["command"], "inspect");
    assert_eq!(recs[1]["param_count"], 869_842);
    let o = acrs(&["inspect", "--preset", "tiny", "--variant", "cruse"]);
    let recs = stdout_json(&o);
    assert!(recs[1]["param_count"].as_u64().unwrap() < 869_842);
    assert_eq!(recs[1]["config"]["variant"], "cruse");
}

#[test]
fn exit_codes_follow_error_class() {
    assert_eq!(acrs(&["--help"]).status.code(), Some(0));
    assert_eq!(acrs(&["inspect", "--bogus"]).status.code(), Some(1));
    assert_eq!(acrs(&["gen-data", "--kind", "ld-x"]).status.code(), Some(1));
    let o = acrs(&[
        "align",
        "--mic",
        "/nonexistent/m.wav",
        "--far",
        "/nonexistent/f.wav",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let rec: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(rec["exit_code"], 2);
}

#[test]
fn align_estimates_known_delay() {
    let dir = tempfile::tempdir().unwrap();
    let (mic, far) = far_and_mic(dir.path(), 4000);
    for extra in [&["estimate"][..], &[][..]] {
        let mut args = vec!["align"];
        args.extend_from_slice(extra);
        args.extend(["--mic", &mic, "--far", &far]);
        let o = acrs(&args);
        assert_eq!(o.status.code(), Some(0), "{o:?}");
        let recs = stdout_json(&o);
        assert_eq!(recs[1]["delay_samples"], 4000);
        assert_eq!(recs[1]["delay_ms"], 250.0);
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        "# bench settings\nseed = 11\nframes = 40\nwarmup=2\npreset=tiny\n",
    )
    .unwrap();
    let o = acrs(&["bench", "--config", p(&cfg), "--frames", "30"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let recs = stdout_json(&o);
    let resolved = &recs[0]["resolved"];
    assert_eq!(resolved["seed"], 11);
    assert_eq!(resolved["args"]["frames"], 30);
    assert_eq!(resolved["args"]["warmup"], 2);
    assert_eq!(resolved["args"]["preset"], "tiny");
    assert_eq!(recs[1]["frames"], 30);

    std::fs::write(&cfg, "no equals sign\n").unwrap();
    assert_eq!(acrs(&["bench", "--config", p(&cfg)]).status.code(), Some(1));
}
