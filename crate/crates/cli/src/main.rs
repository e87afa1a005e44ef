//! Command-line driver wiring experiment configs to the pipeline.
//!
//! ```text
//! mofe <synth|pretrain|finetune|forecast|eval|spectrum|gradcheck> \
//!      <config.json> [--set path=value ...] [--out dir]
//! ```
//!
//! Every run creates a directory (named by config hash and timestamp, or
//! `--out`) holding `effective-config.json` plus the command's artifacts.
//! Exit codes: 0 success, 1 runtime error, 2 usage or config error.

use clap::{Args, Parser, Subcommand};
use mofe_core::analysis::{mse_mae, spectral_experiment, MetricSpace, SpectralComparison};
use mofe_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mofe_core::config::{canonical_json, config_hash, DataSource, ExperimentConfig, Phase};
use mofe_core::model::{autoregressive_forecast, init_params, normalize_plain};
use mofe_core::preprocess::{
    load_csv, make_windows, synth_composite, write_csv, RawSeries, RevInStats, SeriesWindow,
};
use mofe_core::trainer::{finetune, grad_check, train, TrainRun};
use mofe_core::{Error as CoreError, ModelConfig, ModelParams};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mofe", about = "Frequency-time mixture-of-experts forecaster", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic composite as CSV.
    Synth(RunArgs),
    /// Train from random initialization and save a checkpoint.
    Pretrain(RunArgs),
    /// Continue training from the configured checkpoint at transfer settings.
    Finetune(RunArgs),
    /// Roll the checkpointed model forward and write forecast CSV.
    Forecast(RunArgs),
    /// Evaluate the checkpointed model on the test split, both metric spaces.
    Eval(RunArgs),
    /// Train expert-type twins and compare hidden-state spectra.
    Spectrum(RunArgs),
    /// Check reverse-mode gradients against finite differences.
    Gradcheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    config: PathBuf,
    /// Dotted-path overrides, e.g. `--set train.lr=1e-4`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Artifact directory; defaults to `runs/<command>-<hash>-<time>`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

enum CliError {
    /// Bad invocation or configuration: exit 2.
    Usage(String),
    /// Failure while running a valid configuration: exit 1.
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidConfig { .. } | CoreError::Json(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Synth(a) => ("synth", a),
        Command::Pretrain(a) => ("pretrain", a),
        Command::Finetune(a) => ("finetune", a),
        Command::Forecast(a) => ("forecast", a),
        Command::Eval(a) => ("eval", a),
        Command::Spectrum(a) => ("spectrum", a),
        Command::Gradcheck(a) => ("gradcheck", a),
    };
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(name: &str, args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let run_dir = prepare_run_dir(name, args, &cfg)?;

    match name {
        "synth" => cmd_synth(&cfg, &run_dir),
        "pretrain" => cmd_pretrain(&cfg, &run_dir),
        "finetune" => cmd_finetune(&cfg, &run_dir),
        "forecast" => cmd_forecast(&cfg, &run_dir),
        "eval" => cmd_eval(&cfg, &run_dir),
        "spectrum" => cmd_spectrum(&cfg, &run_dir),
        "gradcheck" => cmd_gradcheck(&cfg, &run_dir),
        _ => unreachable!("clap enumerates commands"),
    }
}

// ── configuration ───────────────────────────────────────────────────────

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let raw = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.config.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    for setting in &args.set {
        apply_override(&mut value, setting)?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Set `path=value` inside the config tree. The value parses as JSON when
/// it can, otherwise it is taken as a string.
fn apply_override(root: &mut serde_json::Value, setting: &str) -> Result<(), CliError> {
    let (path, raw) = setting
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set needs PATH=VALUE, got `{setting}`")))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Usage(format!("bad override path `{path}`")));
    }
    let mut node = root;
    for (i, seg) in segments.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("`{path}`: `{seg}` is not an object field")))?;
        if i + 1 == segments.len() {
            obj.insert(seg.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("segments is non-empty")
}

fn prepare_run_dir(name: &str, args: &RunArgs, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => {
            let hash = config_hash(cfg)?;
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            PathBuf::from("runs").join(format!("{name}-{hash}-{now}"))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let effective = canonical_json(cfg)?;
    std::fs::write(dir.join("effective-config.json"), &effective)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    // echo the effective configuration so overrides are visible
    println!("{effective}");
    println!("run-dir: {}", dir.display());
    Ok(dir)
}

// ── data plumbing ───────────────────────────────────────────────────────

fn load_series(cfg: &ExperimentConfig) -> Result<Vec<RawSeries>, CliError> {
    match &cfg.data.source {
        DataSource::Csv { path } => {
            if !Path::new(path).exists() {
                return Err(CliError::Usage(format!("data.source.path `{path}` does not exist")));
            }
            Ok(load_csv(path)?)
        }
        DataSource::Synth { freqs_hz, amps, sample_rate_hz, n, noise_std, seed } => Ok(vec![
            synth_composite(freqs_hz, amps, *sample_rate_hz, *n, *noise_std, *seed)?,
        ]),
    }
}

fn all_windows(cfg: &ExperimentConfig, series: &[RawSeries]) -> Result<Vec<SeriesWindow>, CliError> {
    let mut windows = Vec::new();
    for s in series {
        windows.extend(make_windows(s, cfg.data.t_x, cfg.data.t_y, cfg.data.stride)?);
    }
    Ok(windows)
}

/// Contiguous train/validation/test split by the configured fractions.
fn split_windows(windows: Vec<SeriesWindow>, split: [f64; 3]) -> [Vec<SeriesWindow>; 3] {
    let n = windows.len();
    let n_train = (n as f64 * split[0]).floor() as usize;
    let n_val = (n as f64 * split[1]).floor() as usize;
    let mut it = windows.into_iter();
    let train: Vec<_> = it.by_ref().take(n_train).collect();
    let val: Vec<_> = it.by_ref().take(n_val).collect();
    let test: Vec<_> = it.collect();
    [train, val, test]
}

fn required_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| {
        CliError::Usage("checkpoint: required by this command, set `checkpoint`".into())
    })?;
    if !Path::new(path).exists() {
        return Err(CliError::Usage(format!("checkpoint `{path}` does not exist")));
    }
    Ok(load_checkpoint(path)?)
}

fn write_json(dir: &Path, file: &str, value: &impl serde::Serialize) -> Result<(), CliError> {
    std::fs::write(dir.join(file), canonical_json(value)?)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn write_text(dir: &Path, file: &str, text: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(file), text).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn training_log_csv(run: &TrainRun) -> String {
    let mut out = String::new();
    let layers = run.log.first().map(|r| r.routing.len()).unwrap_or(0);
    let experts = run
        .log
        .first()
        .map(|r| r.routing[0].dispatch_fraction.len())
        .unwrap_or(0);
    out.push_str("step,lr,ar_loss,aux_mean,total");
    for l in 0..layers {
        for e in 0..experts {
            let _ = write!(out, ",dispatch_l{l}_e{e}");
        }
    }
    out.push('\n');
    for rec in &run.log {
        let aux_mean = if rec.loss.aux_loss_per_layer.is_empty() {
            0.0
        } else {
            rec.loss.aux_loss_per_layer.iter().sum::<f64>()
                / rec.loss.aux_loss_per_layer.len() as f64
        };
        let _ = write!(
            out,
            "{},{},{},{},{}",
            rec.step, rec.lr, rec.loss.ar_loss, aux_mean, rec.loss.total
        );
        for stats in &rec.routing {
            for f in &stats.dispatch_fraction {
                let _ = write!(out, ",{f}");
            }
        }
        out.push('\n');
    }
    out
}

fn checkpoint_from_run(
    config: ModelConfig,
    params: ModelParams,
    run: &TrainRun,
    prior_steps: u64,
) -> Checkpoint {
    Checkpoint {
        config,
        params,
        rng_seed: run.rng_seed,
        rng_word_pos: run.rng_word_pos,
        step: prior_steps + run.steps_done,
    }
}

// ── commands ────────────────────────────────────────────────────────────

fn cmd_synth(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    if !matches!(cfg.data.source, DataSource::Synth { .. }) {
        return Err(CliError::Usage("data.source: synth command needs kind = synth".into()));
    }
    let series = load_series(cfg)?;
    write_csv(dir.join("data.csv"), &series)?;
    println!("wrote {} points to data.csv", series[0].values.len());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    if cfg.train.phase != Phase::Pretrain {
        return Err(CliError::Usage("train.phase: pretrain command needs phase = pretrain".into()));
    }
    let series = load_series(cfg)?;
    let [train_split, _, _] = split_windows(all_windows(cfg, &series)?, cfg.data.split);
    if train_split.is_empty() {
        return Err(CliError::Usage("data.split: no training windows".into()));
    }
    let mut params = init_params(&cfg.model, cfg.train.seed);
    let run = train(&mut params, &cfg.model, &train_split, &cfg.train, &cfg.loss)?;
    let ckpt = checkpoint_from_run(cfg.model.clone(), params, &run, 0);
    save_checkpoint(dir.join("checkpoint.bin"), &ckpt)?;
    write_text(dir, "training-log.csv", &training_log_csv(&run))?;
    if let Some(last) = run.log.last() {
        println!("final ar_loss {} total {}", last.loss.ar_loss, last.loss.total);
    }
    Ok(())
}

fn cmd_finetune(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    if cfg.train.phase != Phase::Finetune {
        return Err(CliError::Usage("train.phase: finetune command needs phase = finetune".into()));
    }
    let ckpt = required_checkpoint(cfg)?;
    let series = load_series(cfg)?;
    let [train_split, _, _] = split_windows(all_windows(cfg, &series)?, cfg.data.split);
    if train_split.is_empty() {
        return Err(CliError::Usage("data.split: no training windows".into()));
    }
    let (params, run) = finetune(&ckpt, &cfg.model, &train_split, &cfg.train, &cfg.loss)?;
    let out = checkpoint_from_run(cfg.model.clone(), params, &run, ckpt.step);
    save_checkpoint(dir.join("checkpoint.bin"), &out)?;
    write_text(dir, "training-log.csv", &training_log_csv(&run))?;
    if let Some(first) = run.log.first() {
        println!("initial ar_loss {}", first.loss.ar_loss);
    }
    Ok(())
}

fn cmd_forecast(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let ckpt = required_checkpoint(cfg)?;
    ckpt.require_config(&cfg.model)?;
    let series = load_series(cfg)?;
    let mut out = Vec::new();
    for s in &series {
        if s.values.len() < cfg.data.t_x {
            return Err(CliError::Usage(format!(
                "series `{}` shorter than context {}",
                s.series_id, cfg.data.t_x
            )));
        }
        let context = &s.values[s.values.len() - cfg.data.t_x..];
        let forecast = autoregressive_forecast(&ckpt.params, &cfg.model, context, cfg.data.t_y)?;
        out.push(RawSeries {
            series_id: s.series_id.clone(),
            values: forecast,
            granularity: s.granularity.clone(),
        });
    }
    write_csv(dir.join("forecast.csv"), &out)?;
    println!("forecast {} series x {} points", out.len(), cfg.data.t_y);
    Ok(())
}

fn metric_json(space: &str, mse: f64, mae: f64) -> serde_json::Value {
    serde_json::json!({ "mse": mse, "mae": mae, "space": space })
}

fn cmd_eval(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let ckpt = required_checkpoint(cfg)?;
    ckpt.require_config(&cfg.model)?;
    let series = load_series(cfg)?;
    let [_, _, test_split] = split_windows(all_windows(cfg, &series)?, cfg.data.split);
    if test_split.is_empty() {
        return Err(CliError::Usage("data.split: no test windows to evaluate".into()));
    }
    // pool every horizon point across windows, both metric spaces
    let mut orig_t = Vec::new();
    let mut orig_f = Vec::new();
    let mut norm_t = Vec::new();
    let mut norm_f = Vec::new();
    for w in &test_split {
        let forecast = autoregressive_forecast(&ckpt.params, &cfg.model, &w.context, cfg.data.t_y)?;
        let stats = if cfg.model.revin {
            RevInStats::from_values(&w.context)?
        } else {
            RevInStats::identity()
        };
        norm_t.extend(normalize_plain(&ckpt.params, &cfg.model, &w.target, &stats)?);
        norm_f.extend(normalize_plain(&ckpt.params, &cfg.model, &forecast, &stats)?);
        orig_t.extend_from_slice(&w.target);
        orig_f.extend(forecast);
    }
    let original = mse_mae(&orig_t, &orig_f, cfg.data.t_y, MetricSpace::OriginalUnits)?;
    let normalized = mse_mae(&norm_t, &norm_f, cfg.data.t_y, MetricSpace::Normalized)?;

    write_json(
        dir,
        "metrics-original.json",
        &metric_json("original-units", original.mse, original.mae),
    )?;
    write_json(
        dir,
        "metrics-normalized.json",
        &metric_json("normalized", normalized.mse, normalized.mae),
    )?;
    write_text(
        dir,
        "metrics-original.csv",
        &format!("metric,value\nmse,{}\nmae,{}\n", original.mse, original.mae),
    )?;
    write_text(
        dir,
        "metrics-normalized.csv",
        &format!("metric,value\nmse,{}\nmae,{}\n", normalized.mse, normalized.mae),
    )?;
    println!(
        "eval over {} windows: original mse {} mae {}",
        test_split.len(),
        original.mse,
        original.mae
    );
    Ok(())
}

fn spectrum_csv(report: &mofe_core::SpectralReport) -> String {
    let mut out = String::from("bin_hz,energy\n");
    for (f, e) in report.bin_freqs_hz.iter().zip(&report.energy) {
        let _ = writeln!(out, "{f},{e}");
    }
    out
}

fn cmd_spectrum(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let signal = &series[0];
    let (truth, rate) = match &cfg.data.source {
        DataSource::Synth { freqs_hz, sample_rate_hz, .. } => (freqs_hz.clone(), *sample_rate_hz),
        // CSV timestamps are opaque; bins are reported per sample
        DataSource::Csv { .. } => (Vec::new(), 1.0),
    };

    let cfg_ftc = ModelConfig { ftc: true, ..cfg.model.clone() };
    let cfg_ffn = ModelConfig { ftc: false, ..cfg.model.clone() };
    let [train_split, _, _] = split_windows(all_windows(cfg, &series)?, cfg.data.split);
    if train_split.is_empty() {
        return Err(CliError::Usage("data.split: no training windows".into()));
    }

    // identical data and seed; only the expert type differs
    let mut params_ftc = init_params(&cfg_ftc, cfg.train.seed);
    train(&mut params_ftc, &cfg_ftc, &train_split, &cfg.train, &cfg.loss)?;
    let mut params_ffn = init_params(&cfg_ffn, cfg.train.seed);
    train(&mut params_ffn, &cfg_ffn, &train_split, &cfg.train, &cfg.loss)?;

    let report: SpectralComparison = spectral_experiment(
        &params_ftc,
        &cfg_ftc,
        &params_ffn,
        &cfg_ffn,
        signal,
        rate,
        &truth,
        cfg.data.t_x,
        cfg.data.t_y,
    )?;
    write_json(dir, "spectral-report.json", &report)?;
    write_text(dir, "spectrum-ftc.csv", &spectrum_csv(&report.ftc_arm.spectrum))?;
    write_text(dir, "spectrum-baseline.csv", &spectrum_csv(&report.baseline_arm.spectrum))?;
    println!(
        "alignment ftc {:?} baseline {:?}",
        report.ftc_arm.alignment, report.baseline_arm.alignment
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let windows = all_windows(cfg, &series)?;
    let window = windows
        .first()
        .ok_or_else(|| CliError::Usage("data: no windows for gradcheck".into()))?;
    let params = init_params(&cfg.model, cfg.train.seed);
    let report = grad_check(&params, &cfg.model, &cfg.loss, window, 256, cfg.train.seed)?;
    write_json(dir, "gradcheck.json", &report)?;
    println!(
        "gradcheck: {} entries, max rel err {:.3e}",
        report.total_checked, report.max_rel_err
    );
    Ok(())
}
