//! Command-line front end: dataset generation, training, streaming
//! enhancement, delay estimation, evaluation, benchmarking and inspection.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, LevelFilter};
use serde::Serialize;
use serde_json::json;

use crate::alignment::{global_delay, online_track, OnlineConfig};
use crate::data::{
    child_seed, make_ld_set, read_manifest, scenario_set, LdKind, ScenarioConfig, MANIFEST_NAME,
};
use crate::dsp::{read_wav, StftConfig, StftPlan, WavChunkReader, WavStreamWriter, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::eval::{
    benchmark_runtime, delay_recovery_report, evaluate_model, render_table, DelaySystem, EvalClip,
};
use crate::model::{AlignMode, Enhancer, ModelConfig, ParamStore, Variant};
use crate::train::{train_loop, Example, OptimConfig, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Config-file keys that belong before the subcommand.
const GLOBAL_KEYS: [&str; 2] = ["seed", "log-level"];

#[derive(Parser, Debug)]
#[command(
    name = "acrs",
    version,
    about = "Echo cancellation with built-in delay alignment",
    args_override_self = true
)]
pub struct Cli {
    /// Seed for data synthesis, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Plain `key=value` file; keys mirror the long flags. Flags given on
    /// the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write an LD-M or LD-H far-end single-talk set with a manifest.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a model and write an ACRS checkpoint every epoch.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Enhance a microphone recording in 10 ms chunks.
    #[command(args_override_self = true)]
    Enhance(EnhanceArgs),
    /// Estimate the far-end delay with a classical aligner.
    #[command(args_override_self = true)]
    Align(AlignArgs),
    /// Score a model or a classical aligner on a manifest.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Measure per-frame streaming latency.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Print configuration, tensor shapes and parameter count.
    #[command(args_override_self = true)]
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    LdM,
    LdH,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    Tiny,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    AlignCruse,
    Cruse,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignModeArg {
    Utterance,
    Causal,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignerArg {
    Global,
    Online,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignAction {
    Estimate,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemArg {
    Model,
    Global,
    Online,
}

impl PresetArg {
    fn model(self, variant: VariantArg) -> ModelConfig {
        let cfg = match self {
            PresetArg::Tiny => ModelConfig::tiny(),
            PresetArg::Paper => ModelConfig::paper(),
        };
        cfg.with_variant(variant.into())
    }

    fn optim(self) -> OptimConfig {
        match self {
            PresetArg::Tiny => OptimConfig::toy(),
            PresetArg::Paper => OptimConfig::paper(),
        }
    }

    fn clip_len(self) -> f64 {
        match self {
            PresetArg::Tiny => 2.0,
            PresetArg::Paper => 10.0,
        }
    }
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::AlignCruse => Variant::AlignCruse,
            VariantArg::Cruse => Variant::Cruse,
        }
    }
}

impl From<AlignModeArg> for AlignMode {
    fn from(m: AlignModeArg) -> Self {
        match m {
            AlignModeArg::Utterance => AlignMode::Utterance,
            AlignModeArg::Causal => AlignMode::Causal,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub clip_len: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Directory holding a manifest of training clips.
    #[arg(long, conflicts_with = "online", required_unless_present = "online")]
    pub data: Option<PathBuf>,
    /// Synthesize the training and validation clips from the seed.
    #[arg(long)]
    pub online: bool,
    #[arg(long, value_enum, default_value_t = PresetArg::Tiny)]
    pub preset: PresetArg,
    #[arg(long, value_enum, default_value_t = VariantArg::AlignCruse)]
    pub variant: VariantArg,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Synthesized training clips (with --online).
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    /// Synthesized validation clips (with --online).
    #[arg(long, default_value_t = 50)]
    pub n_val: usize,
    /// Synthesized clip length in seconds; defaults to the preset's.
    #[arg(long)]
    pub clip_len: Option<f64>,
    /// Directory holding a validation manifest.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// JSON-lines metrics log, appended per epoch.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EnhanceArgs {
    #[arg(long, required_unless_present = "unit_mask")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub mic: PathBuf,
    #[arg(long)]
    pub far: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-frame delay argmax as JSON lines.
    #[arg(long)]
    pub emit_delay: Option<PathBuf>,
    /// Debug: bypass the network with a mask of ones.
    #[arg(long)]
    pub unit_mask: bool,
    /// Samples per streamed chunk.
    #[arg(long, default_value_t = 160)]
    pub chunk: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct AlignArgs {
    /// Optional action word; estimation is the only one.
    #[arg(value_enum)]
    pub action: Option<AlignAction>,
    #[arg(long, value_enum, default_value_t = AlignerArg::Global)]
    pub mode: AlignerArg,
    #[arg(long)]
    pub mic: PathBuf,
    #[arg(long)]
    pub far: PathBuf,
    #[arg(long, default_value_t = 1000.0)]
    pub max_delay_ms: f64,
    /// Online mode: per-frame delay estimates as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long, required_if_eq("system", "model"))]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = SystemArg::Model)]
    pub system: SystemArg,
    #[arg(long, value_enum, default_value_t = AlignModeArg::Causal)]
    pub align: AlignModeArg,
    /// Also time this many streamed frames.
    #[arg(long)]
    pub bench_frames: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    /// Checkpoint to time; without it a seeded preset network is used.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Paper)]
    pub preset: PresetArg,
    #[arg(long, value_enum, default_value_t = VariantArg::AlignCruse)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 10_000)]
    pub frames: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PresetArg::Paper)]
    pub preset: PresetArg,
    #[arg(long, value_enum, default_value_t = VariantArg::AlignCruse)]
    pub variant: VariantArg,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Enhance(_) => "enhance",
            Command::Align(_) => "align",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
            Command::Inspect(_) => "inspect",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else if e.is_io() {
        EXIT_IO
    } else {
        EXIT_USAGE
    }
}

fn report_error(kind: &str, code: i32, message: &str) {
    let msg = message.split_whitespace().collect::<Vec<_>>().join(" ");
    let rec = json!({ "level": "error", "kind": kind, "exit_code": code, "message": msg });
    eprintln!("{rec}");
}

/// Position of `--config` in the raw arguments.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
/// A value of `true` stands for a bare switch, `false` drops the key.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {}: expected key=value, got '{line}'",
                i + 1
            ))
        })?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(Error::Config(format!(
                "config line {}: invalid key '{}'",
                i + 1,
                k.trim()
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn flag_args(entries: &[(String, String)]) -> Vec<OsString> {
    let mut out = Vec::new();
    for (k, v) in entries {
        match v.as_str() {
            "true" => out.push(format!("--{k}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{k}").into());
                out.push(v.into());
            }
        }
    }
    out
}

/// Splices config-file flags in front of the command line's own: globals
/// right after the program name, the rest right after the subcommand.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)?;
    let entries = parse_config_file(&text)?;
    let (global, local): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|(k, _)| GLOBAL_KEYS.contains(&k.as_str()));
    let names = [
        "gen-data", "train", "enhance", "align", "eval", "bench", "inspect",
    ];
    let sub = argv
        .iter()
        .position(|a| names.contains(&a.to_string_lossy().as_ref()));
    let mut out = vec![argv[0].clone()];
    out.extend(flag_args(&global));
    match sub {
        Some(i) => {
            out.extend(argv[1..=i].iter().cloned());
            out.extend(flag_args(&local));
            out.extend(argv[i + 1..].iter().cloned());
        }
        None => out.extend(argv[1..].iter().cloned()),
    }
    Ok(out)
}

/// Runs one command and returns the process exit code. Errors are written
/// to stderr as single-line JSON records.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = exit_code(&e);
            report_error(e.kind(), code, &e.to_string());
            return code;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            report_error("usage", EXIT_USAGE, first);
            return EXIT_USAGE;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_target(false)
        .try_init();
    let resolved = json!({
        "command": cli.command.name(),
        "seed": cli.seed,
        "config_file": cli.config,
        "log_level": cli.log_level.to_string().to_lowercase(),
        "args": serde_json::to_value(&cli.command).map(|v| v.as_object().and_then(|o| o.values().next().cloned())).ok().flatten(),
    });
    println!("{}", json!({ "resolved": resolved }));
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            report_error(e.kind(), code, &e.to_string());
            code
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Enhance(a) => enhance(a),
        Command::Align(a) => align(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a, cli.seed),
        Command::Inspect(a) => inspect(a),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn gen_data(a: &GenDataArgs, seed: u64) -> Result<()> {
    let kind = match a.kind {
        KindArg::LdM => LdKind::M,
        KindArg::LdH => LdKind::H,
    };
    let cfg = kind.scenario_config(a.clip_len, seed);
    let rows = make_ld_set(&a.out, kind.name(), &cfg, a.n)?;
    print_json(&json!({ "written": rows.len(), "manifest": a.out.join(MANIFEST_NAME) }))
}

fn load_examples(dir: &Path, plan: &StftPlan) -> Result<Vec<Example>> {
    let rows = read_manifest(dir.join(MANIFEST_NAME))?;
    rows.iter()
        .map(|r| Example::from_manifest(r, dir, plan))
        .collect()
}

fn synth_examples(
    cfg: &ScenarioConfig,
    n: usize,
    prefix: &str,
    plan: &StftPlan,
) -> Result<Vec<Example>> {
    scenario_set(cfg, n)?
        .iter()
        .enumerate()
        .map(|(i, s)| Example::from_scenario(format!("{prefix}{i:05}"), s, plan))
        .collect()
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let mut optim = a.preset.optim();
    optim.epochs = a.epochs.unwrap_or(optim.epochs);
    optim.batch = a.batch.unwrap_or(optim.batch);
    optim.lr = a.lr.unwrap_or(optim.lr);
    let mut cfg = TrainConfig::new(a.preset.model(a.variant), optim, seed);
    cfg.checkpoint = Some(a.out.clone());
    cfg.metrics = a.metrics.clone();
    info!("training config: {}", serde_json::to_string(&cfg)?);

    let plan = StftPlan::new(&StftConfig::default())?;
    let clip_len = a.clip_len.unwrap_or(a.preset.clip_len());
    let (train, mut val) = match &a.data {
        Some(dir) => (load_examples(dir, &plan)?, Vec::new()),
        None => {
            let delays = LdKind::M.delay_range();
            let tcfg = ScenarioConfig::training(delays, clip_len, child_seed(seed, 1));
            let vcfg = LdKind::M.scenario_config(clip_len, child_seed(seed, 2));
            (
                synth_examples(&tcfg, a.n_train, "train-", &plan)?,
                synth_examples(&vcfg, a.n_val, "val-", &plan)?,
            )
        }
    };
    if let Some(dir) = &a.val_data {
        val = load_examples(dir, &plan)?;
    }
    info!(
        "{} training clips, {} validation clips",
        train.len(),
        val.len()
    );
    let out = train_loop(&cfg, &train, &val, a.resume.as_deref())?;
    print_json(&json!({
        "checkpoint": a.out,
        "epochs": out.state.epoch,
        "param_count": out.store.param_count(),
        "last": out.metrics.last(),
    }))
}

fn enhance(a: &EnhanceArgs) -> Result<()> {
    if a.chunk == 0 {
        return Err(Error::Config("--chunk must be at least 1".into()));
    }
    let store = match &a.model {
        Some(p) => ParamStore::load(p)?,
        None => ParamStore::init(&ModelConfig::tiny(), 0)?,
    };
    let mut mic = WavChunkReader::open(&a.mic)?;
    let mut far = WavChunkReader::open(&a.far)?;
    for (r, p) in [(&mic, &a.mic), (&far, &a.far)] {
        if r.sample_rate() != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "{} is {} Hz, expected {SAMPLE_RATE}",
                p.display(),
                r.sample_rate()
            )));
        }
    }
    let mut enh = Enhancer::new(&store, a.unit_mask)?;
    let mut writer = WavStreamWriter::create(&a.out)?;
    let mut trace = match &a.emit_delay {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut total = 0usize;
    loop {
        let m = mic.read_chunk(a.chunk)?;
        if m.is_empty() {
            break;
        }
        let mut f = far.read_chunk(m.len())?;
        f.resize(m.len(), 0.0);
        let before = enh.frames();
        writer.write(&enh.push(&m, &f)?)?;
        total += m.len();
        if let (Some(w), Some(d)) = (trace.as_mut(), enh.delay()) {
            if enh.frames() > before {
                let arg = crate::model::argmax(d);
                serde_json::to_writer(
                    &mut *w,
                    &json!({ "frame": enh.frames() - 1, "argmax_frames": arg, "p_max": d[arg] }),
                )?;
                w.write_all(b"\n")?;
            }
        }
    }
    let frames = enh.frames();
    writer.write(&enh.finish())?;
    writer.finish()?;
    if let Some(mut w) = trace {
        w.flush()?;
    }
    print_json(&json!({ "out": a.out, "samples": total, "frames": frames }))
}

fn align(a: &AlignArgs) -> Result<()> {
    if !(a.max_delay_ms >= 0.0) {
        return Err(Error::Config("--max-delay-ms must be non-negative".into()));
    }
    let (mic, far) = (read_wav(&a.mic)?, read_wav(&a.far)?);
    let max_delay = (a.max_delay_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize;
    let est = match a.mode {
        AlignerArg::Global => global_delay(&mic, &far, max_delay)?,
        AlignerArg::Online => {
            let cfg = OnlineConfig {
                max_delay,
                ..OnlineConfig::default()
            };
            online_track(&mic, &far, &cfg)?
        }
    };
    if let (Some(path), Some(per_frame)) = (&a.trace, &est.per_frame) {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (i, d) in per_frame.iter().enumerate() {
            serde_json::to_writer(&mut w, &json!({ "frame": i, "delay_samples": d }))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    print_json(&json!({
        "delay_samples": est.delay,
        "delay_ms": est.delay as f64 * 1000.0 / SAMPLE_RATE as f64,
        "confidence": est.confidence,
    }))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let rows = read_manifest(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let clips = rows
        .iter()
        .map(|r| EvalClip::load(r, base))
        .collect::<Result<Vec<_>>>()?;
    let store = a.model.as_ref().map(ParamStore::load).transpose()?;
    let max_delay = SAMPLE_RATE as usize;
    let mut report = match a.system {
        SystemArg::Model => {
            let store = store
                .as_ref()
                .ok_or_else(|| Error::Config("--system model needs --model".into()))?;
            evaluate_model(store, a.align.into(), &clips)?
        }
        SystemArg::Global => delay_recovery_report(&DelaySystem::Global { max_delay }, &clips)?,
        SystemArg::Online => {
            let cfg = OnlineConfig {
                max_delay,
                ..OnlineConfig::default()
            };
            delay_recovery_report(&DelaySystem::Online(cfg), &clips)?
        }
    };
    if let (Some(n), Some(store)) = (a.bench_frames, &store) {
        report = report.with_runtime(benchmark_runtime(store, n, 50, 0)?);
    }
    report.write_jsonl(&a.report)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    Ok(())
}

fn preset_store(
    model: &Option<PathBuf>,
    preset: PresetArg,
    variant: VariantArg,
    seed: u64,
) -> Result<ParamStore> {
    match model {
        Some(p) => ParamStore::load(p),
        None => {
            let mut s = ParamStore::init(&preset.model(variant), seed)?;
            s.freeze_bn();
            Ok(s)
        }
    }
}

fn bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let store = preset_store(&a.model, a.preset, a.variant, seed)?;
    let rt = benchmark_runtime(&store, a.frames, a.warmup, seed)?;
    print_json(&json!({
        "variant": store.config().variant,
        "param_count": store.param_count(),
        "ms_per_frame": rt.ms_per_frame,
        "real_time_factor": rt.real_time_factor,
        "frames": rt.frames,
    }))
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let store = preset_store(&a.model, a.preset, a.variant, 0)?;
    let tensors: Vec<_> = store
        .names()
        .map(|n| {
            let t = store.get(n).expect("listed name");
            json!({ "name": n, "shape": t.shape(), "trainable": store.is_trainable(n) })
        })
        .collect();
    print_json(&json!({
        "config": store.config(),
        "param_count": store.param_count(),
        "bn_ready": store.bn_ready(),
        "tensors": tensors,
    }))
}
