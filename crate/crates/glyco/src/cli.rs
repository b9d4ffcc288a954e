//! Command-line orchestration: synth, smooth, train, predict, evaluate.
//! Every command is deterministic given flags + seed, and every command
//! that writes artifacts also writes a run manifest capturing the full
//! configuration and input digests.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or parse, 3 insufficient data,
//! 4 checkpoint mismatch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointError};
use crate::eval::{build_report, fingerstick_mae, EvalReport};
use crate::features::{build_channels, ChannelBlock, FeatureParams, GlucoseSource};
use crate::ingest::{
    align_to_grid, parse_csv, parse_ohio_xml, CsvSchema, EventKind, GriddedSeries,
    PatientDataset,
};
use crate::kalman::{smooth_cgm, SmoothedSeries};
use crate::synth::{generate, series_to_csv, to_ingest_csv, SynthConfig};
use crate::train::{
    make_windows, predict, split_train_val, train, Checkpoint, Prediction, TrainConfig,
    TrainError,
};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INSUFFICIENT: i32 = 3;
pub const EXIT_CKPT: i32 = 4;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Insufficient(String),
    Ckpt(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Insufficient(_) => EXIT_INSUFFICIENT,
            CliError::Ckpt(_) => EXIT_CKPT,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Io(m)
            | CliError::Insufficient(m)
            | CliError::Ckpt(m) => m,
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        CliError::Ckpt(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "glyco", version, about = "Glucose forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset with sensor faults
    Synth(SynthArgs),
    /// Kalman-smooth the CGM channel of a dataset
    Smooth(SmoothArgs),
    /// Train a forecasting model
    Train(TrainArgs),
    /// Emit per-anchor forecasts from a checkpoint
    Predict(PredictArgs),
    /// Evaluate a checkpoint against a dataset
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Flat `key = value` config file; explicit flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Days of data to generate (288 slots/day)
    #[arg(long)]
    days: Option<u32>,
    /// RNG seed (default: GLYCO_SEED env, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SmoothArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input dataset (CSV `ts,kind,value` or clinical XML)
    #[arg(long = "in")]
    input: PathBuf,
    /// Process-noise scale
    #[arg(long = "q-scale")]
    q_scale: Option<f64>,
    /// Measurement-noise variance
    #[arg(long)]
    r: Option<f64>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input dataset
    #[arg(long)]
    data: PathBuf,
    /// Glucose input channel: raw or smoothed
    #[arg(long = "glucose-source")]
    glucose_source: Option<String>,
    /// Prediction horizon in minutes (30 or 60)
    #[arg(long)]
    ph: Option<u64>,
    /// History span in minutes (multiple of 5)
    #[arg(long)]
    history: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dense1: Option<usize>,
    #[arg(long)]
    dense2: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "val-fraction")]
    val_fraction: Option<f64>,
    #[arg(long = "q-scale")]
    q_scale: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "q-scale")]
    q_scale: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "q-scale")]
    q_scale: Option<f64>,
    #[arg(long)]
    r: Option<f64>,
}

/// Flat key=value config file; `#` starts a comment.
struct ConfigFile(BTreeMap<String, String>);

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<ConfigFile, CliError> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}:{}: expected `key = value`",
                        path.display(),
                        i + 1
                    ))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(ConfigFile(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config key `{key}`: bad value `{v}`"))),
        }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("GLYCO_SEED") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("GLYCO_SEED: bad value `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, file: &ConfigFile) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = file.get("seed")? {
        return Ok(s);
    }
    Ok(env_seed()?.unwrap_or(0))
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Provenance record written next to every command's artifacts.
struct RunManifest {
    command: String,
    seed: Option<u64>,
    config: BTreeMap<String, String>,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            seed: None,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.config.insert(key.to_string(), value.to_string());
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs
            .push((path.display().to_string(), format!("sha256:{}", sha256_hex(bytes))));
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "toolkit_version = {}", env!("CARGO_PKG_VERSION"));
        if let Some(seed) = self.seed {
            let _ = writeln!(out, "seed = {seed}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k} = {v}");
        }
        for (path, digest) in &self.inputs {
            let _ = writeln!(out, "input {path} {digest}");
        }
        for path in &self.outputs {
            let _ = writeln!(out, "output {path}");
        }
        out
    }
}

fn sniff_and_parse(path: &Path, bytes: &[u8]) -> Result<PatientDataset, CliError> {
    let is_xml = bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'<');
    let parsed = if is_xml {
        parse_ohio_xml(bytes)
    } else {
        parse_csv(bytes, &CsvSchema::default())
    };
    parsed.map_err(|e| CliError::Io(format!("parsing {}: {e}", path.display())))
}

struct LoadedData {
    grids: BTreeMap<EventKind, GriddedSeries>,
    raw_cgm: GriddedSeries,
    smoothed: SmoothedSeries,
    dataset: PatientDataset,
}

fn load_and_grid(path: &Path, bytes: &[u8], q_scale: f64, r: f64) -> Result<LoadedData, CliError> {
    let dataset = sniff_and_parse(path, bytes)?;
    if dataset.stream(EventKind::Cgm).is_none_or(|s| s.is_empty()) {
        return Err(CliError::Insufficient(format!("{}: no CGM events", path.display())));
    }
    let grids = align_to_grid(&dataset);
    let raw_cgm = grids[&EventKind::Cgm].clone();
    let smoothed = smooth_cgm(&raw_cgm, q_scale, r)
        .map_err(|e| CliError::Io(format!("smoothing failed: {e}")))?;
    Ok(LoadedData { grids, raw_cgm, smoothed, dataset })
}

fn block_for(
    data: &LoadedData,
    source: GlucoseSource,
    fp: &FeatureParams,
) -> Result<ChannelBlock, CliError> {
    build_channels(&data.grids, source, Some(&data.smoothed), fp)
        .map_err(|e| CliError::Io(format!("building channels: {e}")))
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let days = match args.days.or(file.get("days")?) {
        Some(d) => d,
        None => return Err(CliError::Usage("--days is required".into())),
    };
    if days == 0 {
        return Err(CliError::Usage("--days must be >= 1".into()));
    }
    let seed = resolve_seed(args.seed, &file)?;
    let cfg = SynthConfig { days, seed, ..SynthConfig::default() };
    let out = generate(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;

    let dataset_path = args.out.join("dataset.csv");
    let latent_path = args.out.join("latent.csv");
    let manifest_path = args.out.join("manifest.txt");
    write_file(&dataset_path, to_ingest_csv(&out.dataset).as_bytes())?;
    write_file(&latent_path, series_to_csv(&out.latent_truth, "glucose").as_bytes())?;

    let mut manifest = RunManifest::new("synth");
    manifest.seed = Some(seed);
    manifest.set("days", days);
    manifest.set("basal_glucose", cfg.basal_glucose);
    manifest.set("clearance", cfg.clearance);
    manifest.set("carb_gain", cfg.carb_gain);
    manifest.set("insulin_gain", cfg.insulin_gain);
    manifest.set("process_noise", cfg.process_noise);
    manifest.set("sensor_noise", cfg.sensor_noise);
    manifest.set("spike_prob", cfg.spike_prob);
    manifest.set("dropout_prob", cfg.dropout_prob);
    manifest.set("attenuation_prob", cfg.attenuation_prob);
    manifest.output(&dataset_path);
    manifest.output(&latent_path);
    write_file(&manifest_path, manifest.render().as_bytes())
}

fn cmd_smooth(args: &SmoothArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let q_scale = args.q_scale.or(file.get("q-scale")?).unwrap_or(0.01);
    let r = args.r.or(file.get("r")?).unwrap_or(25.0);
    let bytes = read_file(&args.input)?;
    let data = load_and_grid(&args.input, &bytes, q_scale, r)?;
    write_file(&args.out, data.smoothed.to_csv(&data.raw_cgm).as_bytes())?;

    let mut manifest = RunManifest::new("smooth");
    manifest.set("q_scale", q_scale);
    manifest.set("r", r);
    manifest.input(&args.input, &bytes);
    manifest.output(&args.out);
    write_file(&manifest_path_for(&args.out), manifest.render().as_bytes())
}

/// Manifest path for a single-file artifact: `<out>.manifest.txt`.
fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    out.with_file_name(name)
}

fn train_config(args: &TrainArgs, file: &ConfigFile) -> Result<(TrainConfig, f64, f64), CliError> {
    let d = TrainConfig::default();
    let ph_minutes: u64 = match args.ph.or(file.get("ph")?) {
        Some(p) if p == 30 || p == 60 => p,
        Some(p) => return Err(CliError::Usage(format!("--ph must be 30 or 60, got {p}"))),
        None => 30,
    };
    let history_minutes: u64 =
        args.history.or(file.get("history")?).unwrap_or(d.history_slots as u64 * 5);
    if history_minutes == 0 || history_minutes % 5 != 0 {
        return Err(CliError::Usage(format!(
            "--history must be a positive multiple of 5 minutes, got {history_minutes}"
        )));
    }
    let source_name: Option<String> =
        args.glucose_source.clone().or(file.get("glucose-source")?);
    let glucose_source = match source_name.as_deref() {
        None => d.glucose_source,
        Some(s) => GlucoseSource::from_name(s).ok_or_else(|| {
            CliError::Usage(format!("--glucose-source must be raw or smoothed, got `{s}`"))
        })?,
    };
    let cfg = TrainConfig {
        history_slots: (history_minutes / 5) as usize,
        ph_slots: (ph_minutes / 5) as usize,
        batch_size: args.batch_size.or(file.get("batch-size")?).unwrap_or(d.batch_size),
        lr: args.lr.or(file.get("lr")?).unwrap_or(d.lr),
        max_epochs: args.max_epochs.or(file.get("max-epochs")?).unwrap_or(d.max_epochs),
        patience: args.patience.or(file.get("patience")?).unwrap_or(d.patience),
        val_fraction: args.val_fraction.or(file.get("val-fraction")?).unwrap_or(d.val_fraction),
        hidden: args.hidden.or(file.get("hidden")?).unwrap_or(d.hidden),
        dense1: args.dense1.or(file.get("dense1")?).unwrap_or(d.dense1),
        dense2: args.dense2.or(file.get("dense2")?).unwrap_or(d.dense2),
        dropout_rate: args.dropout.or(file.get("dropout")?).unwrap_or(d.dropout_rate),
        glucose_source,
        seed: resolve_seed(args.seed, file)?,
    };
    if cfg.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be >= 1".into()));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(CliError::Usage("--val-fraction must be in (0,1)".into()));
    }
    let q_scale = args.q_scale.or(file.get("q-scale")?).unwrap_or(0.01);
    let r = args.r.or(file.get("r")?).unwrap_or(25.0);
    Ok((cfg, q_scale, r))
}

fn manifest_train_config(manifest: &mut RunManifest, cfg: &TrainConfig, q: f64, r: f64) {
    manifest.seed = Some(cfg.seed);
    manifest.set("history_slots", cfg.history_slots);
    manifest.set("ph_slots", cfg.ph_slots);
    manifest.set("batch_size", cfg.batch_size);
    manifest.set("lr", cfg.lr);
    manifest.set("max_epochs", cfg.max_epochs);
    manifest.set("patience", cfg.patience);
    manifest.set("val_fraction", cfg.val_fraction);
    manifest.set("hidden", cfg.hidden);
    manifest.set("dense1", cfg.dense1);
    manifest.set("dense2", cfg.dense2);
    manifest.set("dropout_rate", cfg.dropout_rate);
    manifest.set("glucose_source", cfg.glucose_source.name());
    manifest.set("q_scale", q);
    manifest.set("r", r);
}

fn map_train_err(e: TrainError) -> CliError {
    match e {
        TrainError::TooFewWindows(n) => {
            CliError::Insufficient(format!("only {n} training windows available"))
        }
        other => CliError::Io(other.to_string()),
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let (cfg, q_scale, r) = train_config(args, &file)?;
    let bytes = read_file(&args.data)?;
    let data = load_and_grid(&args.data, &bytes, q_scale, r)?;
    let fp = FeatureParams::default();
    let block = block_for(&data, cfg.glucose_source, &fp)?;
    let windows = make_windows(&block, &cfg);
    let (train_w, val_w) = split_train_val(windows, cfg.val_fraction).map_err(map_train_err)?;
    let ckpt = train(&train_w, &val_w, &cfg, &fp).map_err(map_train_err)?;
    write_file(&args.out, &checkpoint::to_bytes(&ckpt))?;

    let mut manifest = RunManifest::new("train");
    manifest_train_config(&mut manifest, &cfg, q_scale, r);
    manifest.input(&args.data, &bytes);
    manifest.output(&args.out);
    write_file(&manifest_path_for(&args.out), manifest.render().as_bytes())
}

struct EvalContext {
    ckpt: Checkpoint,
    data: LoadedData,
    block: ChannelBlock,
    predictions: Vec<Prediction>,
    q_scale: f64,
    r: f64,
    ckpt_bytes: Vec<u8>,
    data_bytes: Vec<u8>,
}

fn load_eval_context(
    ckpt_path: &Path,
    data_path: &Path,
    q_flag: Option<f64>,
    r_flag: Option<f64>,
    file: &ConfigFile,
) -> Result<EvalContext, CliError> {
    let q_scale = q_flag.or(file.get("q-scale")?).unwrap_or(0.01);
    let r = r_flag.or(file.get("r")?).unwrap_or(25.0);
    let ckpt_bytes = read_file(ckpt_path)?;
    let ckpt = checkpoint::from_bytes(&ckpt_bytes)?;
    let data_bytes = read_file(data_path)?;
    let data = load_and_grid(data_path, &data_bytes, q_scale, r)?;
    let block = block_for(&data, ckpt.config.glucose_source, &ckpt.feature_params)?;
    if block.len() < ckpt.config.history_slots + ckpt.config.ph_slots {
        return Err(CliError::Insufficient(format!(
            "{} slots of data; need at least {}",
            block.len(),
            ckpt.config.history_slots + ckpt.config.ph_slots
        )));
    }
    let predictions =
        predict(&ckpt, &block).map_err(|e| CliError::Io(format!("prediction failed: {e}")))?;
    Ok(EvalContext { ckpt, data, block, predictions, q_scale, r, ckpt_bytes, data_bytes })
}

/// Plot-data CSV: anchor, forecast mean, one-standard-deviation band, and
/// both references at the target slot.
fn plot_csv(ctx: &EvalContext) -> String {
    let ph = ctx.ckpt.config.ph_slots;
    let n = ctx.block.len();
    let mut out = String::from("anchor_ts,mu,mu_minus_sd,mu_plus_sd,ref_raw,ref_smoothed\n");
    for p in &ctx.predictions {
        let target = p.t_anchor + ph;
        let (ref_raw, ref_smoothed) = if target < n {
            (
                ctx.data.raw_cgm.values[target],
                Some(ctx.data.smoothed.mean[target]),
            )
        } else {
            (None, None)
        };
        let sd = p.sigma2.sqrt();
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{},{}",
            p.anchor_ts,
            p.mu,
            p.mu - sd,
            p.mu + sd,
            opt(ref_raw),
            opt(ref_smoothed),
        );
    }
    out
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let ctx = load_eval_context(&args.ckpt, &args.data, args.q_scale, args.r, &file)?;
    write_file(&args.out, plot_csv(&ctx).as_bytes())?;

    let mut manifest = RunManifest::new("predict");
    manifest_train_config(&mut manifest, &ctx.ckpt.config, ctx.q_scale, ctx.r);
    manifest.input(&args.ckpt, &ctx.ckpt_bytes);
    manifest.input(&args.data, &ctx.data_bytes);
    manifest.output(&args.out);
    write_file(&manifest_path_for(&args.out), manifest.render().as_bytes())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let ctx = load_eval_context(&args.ckpt, &args.data, args.q_scale, args.r, &file)?;
    let report = build_report(
        &ctx.predictions,
        &ctx.block,
        &ctx.data.raw_cgm,
        Some(&ctx.data.smoothed),
        ctx.data.dataset.stream(EventKind::Fingerstick),
        &ctx.data.dataset.patient_id,
        ctx.ckpt.config.ph_slots,
    );

    let mut text = EvalReport::render_text(std::slice::from_ref(&report));
    if let Some(fs) = ctx.data.dataset.stream(EventKind::Fingerstick) {
        let cmp = fingerstick_mae(&ctx.data.smoothed_as_series(), fs, 5);
        let _ = writeln!(
            text,
            "\nfingerstick check (smoothed, 5 min tolerance): matched {}, unmatched {}, mae {}",
            cmp.n_matched,
            cmp.n_unmatched,
            cmp.mae.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into()),
        );
    }

    let report_txt = args.out.join("report.txt");
    let report_csv = args.out.join("report.csv");
    let residuals_csv = args.out.join("residuals.csv");
    let plot = args.out.join("plot.csv");
    write_file(&report_txt, text.as_bytes())?;
    write_file(&report_csv, EvalReport::render_csv(std::slice::from_ref(&report)).as_bytes())?;
    write_file(&residuals_csv, report.residuals_csv().as_bytes())?;
    write_file(&plot, plot_csv(&ctx).as_bytes())?;

    let mut manifest = RunManifest::new("evaluate");
    manifest_train_config(&mut manifest, &ctx.ckpt.config, ctx.q_scale, ctx.r);
    manifest.input(&args.ckpt, &ctx.ckpt_bytes);
    manifest.input(&args.data, &ctx.data_bytes);
    manifest.output(&report_txt);
    manifest.output(&report_csv);
    manifest.output(&residuals_csv);
    manifest.output(&plot);
    write_file(&args.out.join("manifest.txt"), manifest.render().as_bytes())
}

impl LoadedData {
    /// Smoothed means as a total gridded series (for fingerstick matching).
    fn smoothed_as_series(&self) -> GriddedSeries {
        GriddedSeries {
            start: self.raw_cgm.start,
            values: self.smoothed.mean.iter().map(|v| Some(*v)).collect(),
        }
    }
}

/// Parses `args` and runs the selected command, returning the process
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Smooth(a) => cmd_smooth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
