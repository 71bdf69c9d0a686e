//! Command-line front end.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    hidden_spectrogram, lipschitz_report, loss_gradcheck, spectral_entropy, k_evolution_report, SpectrogramConfig,
};
use crate::checkpoint;
use crate::datasets::{load_csv, window_split, CsvData, System, TimeSeries, WindowDataset};
use crate::error::FodeError;
use crate::model::{FieldKind, FilterInit, FodeModel};
use crate::odeint::Method;
use crate::trainer::{
    evaluate, evaluate_classifier, train, EvalMode, LossKind, TrainConfig, TrainData, TrainOutcome,
};

#[derive(Debug, Parser)]
#[command(name = "fode", version, about = "Fourier ODE models for time-series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset CSV.
    Gen(Flags),
    /// Train a model and write its checkpoint, history and metrics.
    Train(Flags),
    /// Evaluate a checkpoint.
    Eval(Flags),
    /// Paired trainings with and without the output filter.
    AblateK(Flags),
    /// Train with zeros, ones and xavier filter initialisations.
    KInitStudy(Flags),
    /// Lipschitz bound and empirical check for a model.
    Lipschitz(Flags),
    /// Spectrograms of the solver trajectory for one or more checkpoints.
    Spectrogram(Flags),
    /// Finite-difference check of the training loss gradient.
    Gradcheck(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::AblateK(_) => "ablate-k",
            Command::KInitStudy(_) => "k-init-study",
            Command::Lipschitz(_) => "lipschitz",
            Command::Spectrogram(_) => "spectrogram",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::Gen(f)
            | Command::Train(f)
            | Command::Eval(f)
            | Command::AblateK(f)
            | Command::KInitStudy(f)
            | Command::Lipschitz(f)
            | Command::Spectrogram(f)
            | Command::Gradcheck(f) => f,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub system: Option<System>,
    #[arg(long)]
    pub amp: Option<f64>,
    /// Noise level of the unstable oscillator.
    #[arg(long)]
    pub noise: Option<f64>,
    /// CSV input instead of a generated system.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    /// Input and output window length.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub model: Option<FieldKind>,
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub k_init: Option<FilterInit>,
    #[arg(long)]
    pub time_input: bool,
    #[arg(long)]
    pub no_normalize: bool,
    /// Record the filter at the start of every epoch.
    #[arg(long)]
    pub snapshot_k: bool,
    #[arg(long)]
    pub solver: Option<Method>,
    #[arg(long)]
    pub rk4_steps: Option<usize>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub eval: Option<EvalMode>,
    /// Model checkpoint(s); repeat for several spectrogram snapshots.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Finite-difference step.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub stft_window: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Test window used for spectrograms.
    #[arg(long)]
    pub window_index: Option<usize>,
    #[arg(long)]
    pub channel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub system: System,
    pub amp: f64,
    pub noise_sigma: f64,
    /// Seed for generated noise.
    pub seed: u64,
    pub csv: Option<PathBuf>,
    pub label_column: Option<String>,
    pub window: usize,
    pub train_frac: f64,
    pub normalize: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            system: System::Periodic3dA,
            amp: 0.05,
            noise_sigma: 0.01,
            seed: 0,
            csv: None,
            label_column: None,
            window: 10,
            train_frac: 0.8,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSpec {
    pub pairs: usize,
    pub radius: f64,
    pub eps: f64,
    pub window_index: usize,
    pub spectrogram: SpectrogramConfig,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            pairs: 1000,
            radius: 1.0,
            eps: 1e-6,
            window_index: 0,
            spectrogram: SpectrogramConfig::default(),
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub eval_mode: EvalMode,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub analysis: AnalysisSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            data: DataSpec::default(),
            train: TrainConfig::default(),
            eval_mode: EvalMode::Windowed,
            seeds: vec![0],
            out: PathBuf::from("runs"),
            checkpoints: Vec::new(),
            analysis: AnalysisSpec::default(),
        }
    }
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl std::fmt::Display) -> Self {
        CliError {
            code: 2,
            message: msg.to_string(),
        }
    }
}

impl From<FodeError> for CliError {
    fn from(e: FodeError) -> Self {
        let code = match e {
            FodeError::Config(_) | FodeError::UnknownVariant { .. } => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: 1,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Defaults, then the `--config` file, then flags.
pub fn resolve(command: &Command) -> CliResult<RunConfig> {
    let f = command.flags();
    let mut cfg = match &f.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.command = command.name().to_string();
    let d = &mut cfg.data;
    if let Some(v) = f.system {
        d.system = v;
        d.csv = None;
    }
    set(&mut d.amp, f.amp);
    set(&mut d.noise_sigma, f.noise);
    if let Some(p) = &f.data {
        d.csv = Some(p.clone());
    }
    if let Some(l) = &f.label_column {
        d.label_column = Some(l.clone());
    }
    set(&mut d.window, f.window);
    set(&mut d.train_frac, f.train_frac);
    if f.no_normalize {
        d.normalize = false;
    }
    if let Some(s) = f.seed {
        if matches!(command, Command::Gen(_)) {
            d.seed = s;
        }
        cfg.seeds = vec![s];
    }
    if let Some(s) = &f.seeds {
        cfg.seeds = s.clone();
    }
    let t = &mut cfg.train;
    set(&mut t.epochs, f.epochs);
    set(&mut t.lr, f.lr);
    set(&mut t.batch_size, f.batch);
    set(&mut t.hidden, f.hidden);
    set(&mut t.model_kind, f.model);
    set(&mut t.k_init, f.k_init);
    if f.no_filter {
        t.use_filter = false;
    }
    if f.time_input {
        t.time_input = true;
    }
    if f.snapshot_k {
        t.snapshot_k = true;
    }
    set(&mut t.solver.method, f.solver);
    set(&mut t.solver.rk4_steps, f.rk4_steps);
    for s in [&mut t.solver, &mut t.eval_solver] {
        set(&mut s.rtol, f.rtol);
        set(&mut s.atol, f.atol);
    }
    t.normalize = cfg.data.normalize;
    set(&mut cfg.eval_mode, f.eval);
    if let Some(o) = &f.out {
        cfg.out = o.clone();
    }
    if !f.checkpoint.is_empty() {
        cfg.checkpoints = f.checkpoint.clone();
    }
    let a = &mut cfg.analysis;
    set(&mut a.pairs, f.pairs);
    set(&mut a.radius, f.radius);
    set(&mut a.eps, f.eps);
    set(&mut a.window_index, f.window_index);
    set(&mut a.spectrogram.window_len, f.stft_window);
    set(&mut a.spectrogram.hop, f.hop);
    set(&mut a.spectrogram.samples, f.samples);
    set(&mut a.spectrogram.channel, f.channel);
    validate(&cfg)?;
    Ok(cfg)
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn validate(cfg: &RunConfig) -> CliResult<()> {
    cfg.train.validate()?;
    if cfg.seeds.is_empty() {
        return Err(CliError::usage("at least one seed is required"));
    }
    if let Some(p) = &cfg.data.csv {
        if !p.is_file() {
            return Err(CliError::usage(format!("data file {} does not exist", p.display())));
        }
    }
    for p in &cfg.checkpoints {
        if !p.is_file() {
            return Err(CliError::usage(format!("checkpoint {} does not exist", p.display())));
        }
    }
    let needs = matches!(cfg.command.as_str(), "eval" | "spectrogram");
    if needs && cfg.checkpoints.is_empty() {
        return Err(CliError::usage(format!("`{}` needs --checkpoint", cfg.command)));
    }
    if !(cfg.data.train_frac > 0.0 && cfg.data.train_frac < 1.0) {
        return Err(CliError::usage("train_frac must lie in (0, 1)"));
    }
    if cfg.data.window == 0 {
        return Err(CliError::usage("window must be >= 1"));
    }
    Ok(())
}

/// Creates `<out>/<command>-<timestamp>/`, adding a numeric suffix when
/// the name is taken.
pub fn create_run_dir(out: &Path, command: &str) -> std::io::Result<PathBuf> {
    fs::create_dir_all(out)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{command}-{stamp}");
    for i in 0.. {
        let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

enum Loaded {
    Forecast(WindowDataset),
    Labeled(crate::datasets::LabeledSet),
}

fn load_series(d: &DataSpec) -> CliResult<TimeSeries> {
    match &d.csv {
        Some(p) => Ok(crate::datasets::load_series_csv(p)?),
        None => Ok(d.system.generate(d.amp, d.noise_sigma, d.seed)?),
    }
}

fn load(d: &DataSpec, window: usize) -> CliResult<Loaded> {
    if let (Some(p), Some(label)) = (&d.csv, &d.label_column) {
        return match load_csv(p, Some(label))? {
            CsvData::Labeled(set) => Ok(Loaded::Labeled(set)),
            CsvData::Series(_) => Err(CliError::usage("label column produced no labeled data")),
        };
    }
    let s = load_series(d)?;
    let ds = window_split(&s, window, window, d.train_frac)?;
    Ok(Loaded::Forecast(ds))
}

fn train_data(loaded: &Loaded, d: &DataSpec) -> CliResult<TrainData> {
    Ok(match loaded {
        Loaded::Forecast(ds) => TrainData::from_windows(ds, d.normalize)?,
        Loaded::Labeled(set) => TrainData::from_labeled(set, d.train_frac, d.normalize)?,
    })
}

fn metrics_json(model: &FodeModel, loaded: &Loaded, data: &TrainData, cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let solver = &cfg.train.eval_solver;
    Ok(match loaded {
        Loaded::Forecast(ds) => serde_json::to_value(evaluate(model, ds, cfg.eval_mode, solver)?)?,
        Loaded::Labeled(_) => serde_json::to_value(evaluate_classifier(model, data, solver)?)?,
    })
}

/// Result of one training within a command.
struct SeedRun {
    seed: u64,
    outcome: TrainOutcome,
    metrics: serde_json::Value,
}

fn train_one(loaded: &Loaded, cfg: &RunConfig, train_cfg: &TrainConfig, dir: &Path) -> CliResult<SeedRun> {
    let data = train_data(loaded, &cfg.data)?;
    let mut tc = *train_cfg;
    if matches!(loaded, Loaded::Labeled(_)) {
        tc.loss = LossKind::CrossEntropy;
    }
    let init = data.init_model(&tc)?;
    let outcome = match train(&init, &data, &tc) {
        Ok(o) => o,
        Err(FodeError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            fs::create_dir_all(dir)?;
            checkpoint::save(&last_good, dir.join("last_good.ckpt"))?;
            return Err(CliError {
                code: 1,
                message: format!("training diverged at epoch {epoch}: {reason}; last good model saved"),
            });
        }
        Err(e) => return Err(e.into()),
    };
    fs::create_dir_all(dir)?;
    checkpoint::save(&outcome.model, dir.join("model.ckpt"))?;
    checkpoint::save(&outcome.best, dir.join("best.ckpt"))?;
    outcome
        .history
        .write_csv(BufWriter::new(fs::File::create(dir.join("history.csv"))?))?;
    if tc.snapshot_k {
        k_evolution_report(&outcome.history, BufWriter::new(fs::File::create(dir.join("k_evolution.csv"))?))?;
    }
    let metrics = metrics_json(&outcome.model, loaded, &data, cfg)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(SeedRun {
        seed: tc.seed,
        outcome,
        metrics,
    })
}

fn seed_dir(root: &Path, seeds: &[u64], seed: u64) -> PathBuf {
    if seeds.len() == 1 {
        root.to_path_buf()
    } else {
        root.join(format!("seed-{seed}"))
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn metric(m: &serde_json::Value, key: &str) -> f64 {
    m.get(key).and_then(|v| v.as_f64()).unwrap_or(f64::NAN)
}

fn summarize(runs: &[SeedRun]) -> serde_json::Value {
    let keys: Vec<String> = runs[0]
        .metrics
        .as_object()
        .map(|o| o.keys().filter(|k| *k != "n_test").cloned().collect())
        .unwrap_or_default();
    let mut out = serde_json::Map::new();
    out.insert("seeds".into(), runs.iter().map(|r| r.seed).collect::<Vec<_>>().into());
    for k in keys {
        let vals: Vec<f64> = runs.iter().map(|r| metric(&r.metrics, &k)).collect();
        let (mean, std) = mean_std(&vals);
        out.insert(k, serde_json::json!({ "values": vals, "mean": mean, "std": std }));
    }
    serde_json::Value::Object(out)
}

fn print_summary(summary: &serde_json::Value) {
    if let Some(o) = summary.as_object() {
        for (k, v) in o {
            if let (Some(m), Some(s)) = (v.get("mean"), v.get("std")) {
                println!("{k}: {} ± {}", m, s);
            }
        }
    }
}

fn cmd_gen(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let s = load_series(&cfg.data)?;
    s.save_csv(dir.join("data.csv"))?;
    println!("{} rows, {} channels -> {}", s.len(), s.channels(), dir.join("data.csv").display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let loaded = load(&cfg.data, cfg.data.window)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let tc = TrainConfig { seed, ..cfg.train };
        let run = train_one(&loaded, cfg, &tc, &seed_dir(dir, &cfg.seeds, seed))?;
        println!("seed {seed}: {}", run.metrics);
        runs.push(run);
    }
    if runs.len() > 1 {
        let summary = summarize(&runs);
        write_json(&dir.join("summary.json"), &summary)?;
        print_summary(&summary);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let model = checkpoint::load(&cfg.checkpoints[0])?;
    let mut d = cfg.data.clone();
    d.normalize = model.normalizer.is_some();
    let loaded = load(&d, model.window_len())?;
    let data = train_data(&loaded, &d)?;
    let metrics = metrics_json(&model, &loaded, &data, cfg)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!("{metrics}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let loaded = load(&cfg.data, cfg.data.window)?;
    let mut rows = Vec::new();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in &cfg.seeds {
        let base = TrainConfig { seed, ..cfg.train };
        let a = train_one(&loaded, cfg, &TrainConfig { use_filter: true, ..base }, &dir.join(format!("seed-{seed}/with-k")))?;
        let b = train_one(&loaded, cfg, &TrainConfig { use_filter: false, ..base }, &dir.join(format!("seed-{seed}/without-k")))?;
        rows.push((seed, metric(&a.metrics, "mse"), metric(&a.metrics, "mape"), metric(&b.metrics, "mse"), metric(&b.metrics, "mape")));
        with.push(a);
        without.push(b);
    }
    let mut table = String::from("seed,mse_with_k,mape_with_k,mse_without_k,mape_without_k\n");
    for r in &rows {
        table.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.0, r.1, r.2, r.3, r.4));
    }
    let col = |i: usize| -> Vec<f64> {
        rows.iter()
            .map(|r| [r.1, r.2, r.3, r.4][i])
            .collect()
    };
    let stats: Vec<(f64, f64)> = (0..4).map(|i| mean_std(&col(i))).collect();
    table.push_str(&format!("mean,{:?},{:?},{:?},{:?}\n", stats[0].0, stats[1].0, stats[2].0, stats[3].0));
    table.push_str(&format!("std,{:?},{:?},{:?},{:?}\n", stats[0].1, stats[1].1, stats[2].1, stats[3].1));
    fs::write(dir.join("ablation.csv"), &table)?;
    write_json(
        &dir.join("metrics.json"),
        &serde_json::json!({ "with_k": summarize(&with), "without_k": summarize(&without) }),
    )?;
    println!("{:>8} {:>14} {:>14}", "", "MAPE with K", "MAPE w/o K");
    for r in &rows {
        println!("{:>8} {:>14.4} {:>14.4}", format!("seed {}", r.0), r.2, r.4);
    }
    println!(
        "{:>8} {:>14} {:>14}",
        "mean",
        format!("{:.4} ± {:.4}", stats[1].0, stats[1].1),
        format!("{:.4} ± {:.4}", stats[3].0, stats[3].1)
    );
    Ok(())
}

fn cmd_k_init(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let loaded = load(&cfg.data, cfg.data.window)?;
    let mut table = String::from("k_init,seed,initial_train_loss,final_train_loss,mse,mape\n");
    for &seed in &cfg.seeds {
        for init in [FilterInit::Zeros, FilterInit::Ones, FilterInit::Xavier] {
            let tc = TrainConfig {
                seed,
                k_init: init,
                use_filter: true,
                snapshot_k: true,
                ..cfg.train
            };
            let sub = dir.join(format!("seed-{seed}")).join(init.to_string());
            let run = train_one(&loaded, cfg, &tc, &sub)?;
            fs::copy(sub.join("k_evolution.csv"), dir.join(format!("k_evolution_{init}_seed-{seed}.csv")))?;
            let h = &run.outcome.history;
            let line = format!(
                "{init},{seed},{:?},{:?},{:?},{:?}\n",
                h.initial_train_loss.unwrap_or(f64::NAN),
                h.final_train_loss().unwrap_or(f64::NAN),
                metric(&run.metrics, "mse"),
                metric(&run.metrics, "mape")
            );
            print!("{line}");
            table.push_str(&line);
        }
    }
    fs::write(dir.join("summary.csv"), table)?;
    Ok(())
}

/// Model from the first checkpoint, or a freshly initialised one built
/// from the data spec and training config.
fn model_for_analysis(cfg: &RunConfig) -> CliResult<(FodeModel, Option<Loaded>)> {
    if let Some(p) = cfg.checkpoints.first() {
        return Ok((checkpoint::load(p)?, None));
    }
    let loaded = load(&cfg.data, cfg.data.window)?;
    let data = train_data(&loaded, &cfg.data)?;
    let tc = TrainConfig {
        seed: cfg.seeds[0],
        ..cfg.train
    };
    Ok((data.init_model(&tc)?, Some(loaded)))
}

fn cmd_lipschitz(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let (model, _) = model_for_analysis(cfg)?;
    let report = lipschitz_report(&model, cfg.analysis.pairs, cfg.analysis.radius, cfg.seeds[0])?;
    let mut v = serde_json::to_value(report)?;
    v["pass"] = report.passed().into();
    write_json(&dir.join("lipschitz.json"), &v)?;
    println!(
        "bound {:.6} empirical {:.6} over {} pairs: {}",
        report.l_f_bound,
        report.empirical_max_ratio,
        report.n_pairs,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(())
}

fn cmd_spectrogram(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let models = cfg
        .checkpoints
        .iter()
        .map(checkpoint::load)
        .collect::<crate::Result<Vec<_>>>()?;
    let first = &models[0];
    let series = load_series(&cfg.data)?;
    let ds = window_split(&series, first.window_len(), first.window_len(), cfg.data.train_frac)?;
    let (test_in, _) = ds.test();
    let Some(raw) = test_in.get(cfg.analysis.window_index) else {
        return Err(CliError::usage(format!(
            "window index {} outside the {} test windows",
            cfg.analysis.window_index,
            test_in.len()
        )));
    };
    let window = match &first.normalizer {
        Some(n) => n.normalize(raw),
        None => raw.clone(),
    };
    let specs = hidden_spectrogram(&models, &window, &cfg.train.eval_solver, &cfg.analysis.spectrogram)?;
    let mut entropies = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        s.write_csv(BufWriter::new(fs::File::create(dir.join(format!("spectrogram_{i}.csv")))?))?;
        let e = spectral_entropy(s);
        println!("{}: entropy {e:.6}", cfg.checkpoints[i].display());
        entropies.push(e);
    }
    write_json(&dir.join("entropy.json"), &serde_json::json!({ "entropy": entropies }))?;
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let (model, loaded) = model_for_analysis(cfg)?;
    let loaded = match loaded {
        Some(l) => l,
        None => load(&cfg.data, model.window_len())?,
    };
    let data = train_data(&loaded, &cfg.data)?;
    let report = loss_gradcheck(&model, &data, &cfg.train.solver, cfg.analysis.eps)?;
    write_json(&dir.join("gradcheck.json"), &report)?;
    println!(
        "max relative error {:e} over {} entries (tensor {}, element {})",
        report.max_rel_error, report.n_checked, report.worst.0, report.worst.1
    );
    Ok(())
}

/// Runs one parsed invocation and returns the run directory.
pub fn execute(command: &Command) -> CliResult<PathBuf> {
    let cfg = resolve(command)?;
    let dir = create_run_dir(&cfg.out, &cfg.command)?;
    write_json(&dir.join("resolved_config.json"), &cfg)?;
    match command {
        Command::Gen(_) => cmd_gen(&cfg, &dir)?,
        Command::Train(_) => cmd_train(&cfg, &dir)?,
        Command::Eval(_) => cmd_eval(&cfg, &dir)?,
        Command::AblateK(_) => cmd_ablate(&cfg, &dir)?,
        Command::KInitStudy(_) => cmd_k_init(&cfg, &dir)?,
        Command::Lipschitz(_) => cmd_lipschitz(&cfg, &dir)?,
        Command::Spectrogram(_) => cmd_spectrogram(&cfg, &dir)?,
        Command::Gradcheck(_) => cmd_gradcheck(&cfg, &dir)?,
    }
    Ok(dir)
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("fode").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epochs": 7, "lr": 0.5}, "seeds": [4, 5]}"#).unwrap();
        let cmd = parse(&["train", "--config", path.to_str().unwrap(), "--lr", "0.01", "--no-filter"]);
        let cfg = resolve(&cmd).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr, 0.01);
        assert!(!cfg.train.use_filter);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.command, "train");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cmd = parse(&["train", "--seeds", "1,2,3", "--solver", "dopri5", "--rtol", "1e-9", "--model", "node"]);
        let cfg = resolve(&cmd).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.train.solver.method, Method::Dopri5);
        assert_eq!(cfg.train.eval_solver.rtol, 1e-9);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_errors_map_to_usage_code() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{ not json").unwrap();
        let err = resolve(&parse(&["train", "--config", path.to_str().unwrap()])).unwrap_err();
        assert_eq!(err.code, 2);
        let err = resolve(&parse(&["eval"])).unwrap_err();
        assert_eq!(err.code, 2);
        let err = resolve(&parse(&["train", "--lr=-1"])).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn unknown_command_exits_2() {
        assert_eq!(run(["fode", "frobnicate"]), 2);
        assert_eq!(run(["fode", "train", "--model", "cnn"]), 2);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let a = create_run_dir(dir.path(), "gen").unwrap();
        let b = create_run_dir(dir.path(), "gen").unwrap();
        assert_ne!(a, b);
    }
}
