//! Command-line front end: pretrain, generate, bench, replay, serve.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clicksim::{run_benchmark, write_csv, BenchConfig};
use crate::dataio::{
    generate_synthetic, load_bench_samples, load_model, model_hash, read_image, read_mask, save_model, Manifest,
    SynthConfig,
};
use crate::engine::{Engine, EngineConfig, Mode, Transcript, TranscriptEvent};
use crate::error::Error;
use crate::segmenter::{pretrain, Click, PretrainConfig, PretrainReport, Sign};
use crate::service::{serve, AppState, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_UNAVAILABLE: i32 = 69;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Parser)]
#[command(name = "dcseg", version, about = "Divide-and-conquer test-time adaptation for click-based segmentation")]
pub struct Cli {
    /// Seed for data generation, initialisation and the echoed run config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with `engine` and `synth` overrides.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy segmenter and write a model file plus a JSON report.
    Pretrain(PretrainArgs),
    /// Write a synthetic dataset (PNG images, masks, manifest).
    Generate(GenerateArgs),
    /// Run the click-simulation benchmark over a dataset.
    Bench(BenchArgs),
    /// Feed a fixed click list through one engine and emit the transcript.
    Replay(ReplayArgs),
    /// Serve interactive sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// SynthConfig JSON for the training scenes; unset fields keep their defaults.
    #[arg(long, value_name = "JSON")]
    pub synth: Option<String>,
    /// Defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_name = "JSON")]
    pub synth: Option<String>,
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<Mode>>,
    #[arg(long)]
    pub max_clicks: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out>` with a `.csv` extension.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// A JSON list of `{x, y, sign}` or a transcript.
    #[arg(long)]
    pub clicks: PathBuf,
    /// Defaults to the transcript's mode, else dc_tta.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Defaults to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value = "dc_tta")]
    pub mode: Mode,
    /// Directory for transcripts written on delete and shutdown.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
}

/// Contents of `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    engine: Option<serde_json::Value>,
    #[serde(default)]
    synth: Option<serde_json::Value>,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            Error::Pretrain { .. } | Error::AdaptationStep(_) => EXIT_NUMERIC,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_NO_INPUT,
            Error::Io(_) => EXIT_IO,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn merge_json(base: &mut serde_json::Value, overrides: &serde_json::Value) -> CliResult {
    match (base.as_object_mut(), overrides) {
        (Some(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                b.insert(k.clone(), v.clone());
            }
            Ok(())
        }
        _ => Err(CliError::usage("overrides must be a JSON object")),
    }
}

struct Resolved {
    engine: EngineConfig,
    synth: SynthConfig,
}

/// Defaults, then the `--config` file, then `--synth` and `--seed`.
fn resolve(cli: &Cli, synth_flag: Option<&str>, synth_default: SynthConfig) -> CliResult<Resolved> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::new(EXIT_NO_INPUT, format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let engine = match &file.engine {
        Some(o) => EngineConfig::default().with_overrides(o)?,
        None => EngineConfig::default(),
    };
    let mut synth = serde_json::to_value(&synth_default).expect("config serializes");
    if let Some(o) = &file.synth {
        merge_json(&mut synth, o)?;
    }
    if let Some(text) = synth_flag {
        let o: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::usage(format!("--synth: {e}")))?;
        merge_json(&mut synth, &o)?;
    }
    if let Some(seed) = cli.seed {
        synth["seed"] = seed.into();
    }
    let synth: SynthConfig = serde_json::from_value(synth).map_err(|e| CliError::usage(format!("synth config: {e}")))?;
    synth.validate()?;
    Ok(Resolved { engine, synth })
}

fn require(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_NO_INPUT, format!("{what} {} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PretrainOutput<'a> {
    config: &'a PretrainConfig,
    model_hash: String,
    #[serde(flatten)]
    report: &'a PretrainReport,
}

fn cmd_pretrain(cli: &Cli, args: &PretrainArgs, out: &mut dyn Write) -> CliResult {
    let defaults = PretrainConfig::default();
    let resolved = resolve(cli, args.synth.as_deref(), defaults.synth.clone())?;
    let cfg = PretrainConfig {
        synth: resolved.synth,
        epochs: args.epochs.unwrap_or(defaults.epochs),
        seed: cli.seed.unwrap_or(defaults.seed),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        sigma_fraction: resolved.engine.sigma_fraction,
        ..defaults
    };
    if cfg.epochs == 0 {
        return Err(CliError::usage("--epochs must be at least 1"));
    }
    let (params, report) = pretrain(&cfg)?;
    let hash = save_model(&args.out, &params)?;
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    write_json(&report_path, &PretrainOutput { config: &cfg, model_hash: hash.clone(), report: &report })?;
    writeln!(out, "model {} sha256 {hash}", args.out.display())?;
    writeln!(out, "final loss {:.6}, validation 1-click IoU {:.4}", report.final_loss, report.validation_iou)?;
    Ok(())
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs, out: &mut dyn Write) -> CliResult {
    let mut synth = resolve(cli, args.synth.as_deref(), SynthConfig::default())?.synth;
    if let Some(n) = args.n_samples {
        synth.n_samples = n;
    }
    let manifest = generate_synthetic(&synth, &args.out)?;
    write_json(&args.out.join("synth.json"), &synth)?;
    writeln!(out, "{} samples written to {}", manifest.entries.len(), args.out.display())?;
    Ok(())
}

fn cmd_bench(cli: &Cli, args: &BenchArgs, out: &mut dyn Write) -> CliResult {
    require(&args.model, "model")?;
    require(&args.dataset, "dataset")?;
    let resolved = resolve(cli, None, SynthConfig::default())?;
    let (params, hash) = load_model(&args.model)?;
    let manifest = Manifest::load(&args.dataset)?;
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        modes: args.modes.clone().unwrap_or(defaults.modes),
        max_clicks: args.max_clicks.unwrap_or(defaults.max_clicks),
        thresholds: args.thresholds.clone().unwrap_or(defaults.thresholds),
        seed: cli.seed.unwrap_or(defaults.seed),
        engine: resolved.engine,
        model_hash: Some(hash),
        dataset: Some(args.dataset.display().to_string()),
    };
    let samples = load_bench_samples(&manifest);
    let report = run_benchmark(&samples, &Arc::new(params), &cfg)?;
    write_json(&args.out, &report)?;
    let csv_path = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut csv = Vec::new();
    write_csv(&report, &mut csv)?;
    std::fs::write(&csv_path, csv)?;
    write!(out, "{}", report.table())?;
    for f in &report.load_failures {
        writeln!(out, "failed to load {}: {}", f.sample_id, f.message)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceClick {
    x: i64,
    y: i64,
    sign: Sign,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Trace {
    Transcript(Transcript),
    Clicks(Vec<TraceClick>),
}

fn cmd_replay(cli: &Cli, args: &ReplayArgs, out: &mut dyn Write) -> CliResult {
    require(&args.model, "model")?;
    require(&args.image, "image")?;
    require(&args.clicks, "click trace")?;
    let resolved = resolve(cli, None, SynthConfig::default())?;
    let (params, hash) = load_model(&args.model)?;
    let image = read_image(&args.image)?;
    let gt = args.gt.as_deref().map(read_mask).transpose()?;
    if let Some(g) = &gt {
        if (g.width(), g.height()) != (image.width(), image.height()) {
            return Err(CliError::new(EXIT_DATA, "gt and image sizes differ"));
        }
    }
    let text = std::fs::read_to_string(&args.clicks)?;
    let trace: Trace = serde_json::from_str(&text)
        .map_err(|e| CliError::new(EXIT_DATA, format!("{}: not a click list or transcript: {e}", args.clicks.display())))?;

    let (clicks, expected, mode, engine_cfg) = match trace {
        Trace::Transcript(t) => {
            let clicks = t.events.iter().map(|e| (e.x as i64, e.y as i64, e.sign)).collect::<Vec<_>>();
            let hashes: Vec<String> = t.events.iter().map(|e| e.mask_hash.clone()).collect();
            let cfg = if cli.config.is_some() { resolved.engine } else { t.config };
            (clicks, Some(hashes), args.mode.unwrap_or(t.mode), cfg)
        }
        Trace::Clicks(list) => {
            let clicks = list.iter().map(|c| (c.x, c.y, c.sign)).collect();
            (clicks, None, args.mode.unwrap_or(Mode::DcTta), resolved.engine)
        }
    };
    let (w, h) = (image.width() as i64, image.height() as i64);
    if let Some(i) = clicks.iter().position(|&(x, y, _)| !(0..w).contains(&x) || !(0..h).contains(&y)) {
        let (x, y, _) = clicks[i];
        return Err(CliError::new(EXIT_DATA, format!("click {i} at ({x}, {y}) is outside the {w}x{h} image")));
    }

    let mut engine = Engine::new(Arc::new(image), Arc::new(params), mode, engine_cfg.clone())?;
    let mut transcript = Transcript::new(mode, engine_cfg, w as usize, h as usize, Some(hash));
    for &(x, y, sign) in &clicks {
        let outcome = engine.step(Click::new(x as u32, y as u32, sign, 0))?;
        transcript.events.push(TranscriptEvent::from_outcome(&outcome, gt.as_ref())?);
    }
    let text = serde_json::to_string_pretty(&transcript).map_err(Error::from)? + "\n";
    match &args.out {
        Some(p) => std::fs::write(p, &text)?,
        None => out.write_all(text.as_bytes())?,
    }
    if let Some(expected) = expected {
        let got: Vec<String> = transcript.events.iter().map(|e| e.mask_hash.clone()).collect();
        if let Some(i) = got.iter().zip(&expected).position(|(a, b)| a != b) {
            return Err(CliError::new(EXIT_DATA, format!("mask hash differs from the recorded transcript at event {i}")));
        }
    }
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn cmd_serve(cli: &Cli, args: &ServeArgs, out: &mut dyn Write) -> CliResult {
    require(&args.model, "model")?;
    let resolved = resolve(cli, None, SynthConfig::default())?;
    let bytes = std::fs::read(&args.model)?;
    let params = crate::dataio::decode_model(&bytes)?;
    let config = ServiceConfig {
        mode: args.mode,
        engine: resolved.engine,
        transcript_dir: args.transcripts.clone(),
        ..ServiceConfig::new(Arc::new(params), model_hash(&bytes))
    };
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::new(EXIT_UNAVAILABLE, format!("starting the runtime: {e}")))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::new(EXIT_UNAVAILABLE, format!("cannot listen on {addr}: {e}")))?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        serve(listener, AppState::new(config), shutdown_signal()).await?;
        Ok(())
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(&cli, a, out),
        Command::Generate(a) => cmd_generate(&cli, a, out),
        Command::Bench(a) => cmd_bench(&cli, a, out),
        Command::Replay(a) => cmd_replay(&cli, a, out),
        Command::Serve(a) => cmd_serve(&cli, a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
