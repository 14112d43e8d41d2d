use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ulc::correction::{Ablation, NoObserver, Observer, UlcConfig};
use ulc::dataset::{self, Dataset, NoiseConvention, NoiseKind};
use ulc::experiment::{run_seeds, DataConfig};
use ulc::methods::train_with_models;
use ulc::network::save_model;
use ulc::report::{emit_report, load_report, DiagnosticsDump, Fanout, JsonLinesLog, Report, ReportFormat};
use ulc::{Result, UlcError};

#[derive(Parser)]
#[command(
    name = "ulc",
    version,
    about = "Uncertainty-aware label correction on synthetic blobs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a noisy, imbalanced training set and a balanced clean test set.
    Generate(GenerateArgs),
    /// Train with uncertainty-aware label correction.
    Train(TrainArgs),
    /// Train the plain cross-entropy baseline.
    Baseline(TrainArgs),
    /// Summarize one or more report files.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    None,
    Sym,
    Asym,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    ExcludeSelf,
    IncludeSelf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 250)]
    test_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    center_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    within_std: f64,
    #[arg(long, default_value_t = 1.0)]
    imbalance_ratio: f64,
    #[arg(long, value_enum, default_value = "none")]
    noise: NoiseArg,
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    #[arg(long, value_enum, default_value = "exclude-self")]
    noise_convention: ConventionArg,
    #[arg(long, env = "ULC_SEED", default_value_t = 0)]
    seed: u64,
    /// Training set path.
    #[arg(long)]
    out: PathBuf,
    /// Test set path; defaults to `<out>.test`.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training set written by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Test set; defaults to `<data>.test`.
    #[arg(long)]
    test: Option<PathBuf>,
    /// JSON file with a full or partial configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path. With several seeds, `_seed<N>` is inserted before the extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Per-epoch JSON-lines log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory for per-epoch per-sample noise-model CSV files.
    #[arg(long)]
    dump_diagnostics: Option<PathBuf>,
    /// Directory receiving the trained network checkpoints.
    #[arg(long)]
    save_models: Option<PathBuf>,
    /// Comma-separated seed list; overrides the single seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record wall-clock time in the report (breaks byte-identical reruns).
    #[arg(long)]
    record_time: bool,
    /// Disable a component; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<AblationArg>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Csm,
    Eum,
    Aul,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Csm => Ablation::Csm,
            AblationArg::Eum => Ablation::Eum,
            AblationArg::Aul => Ablation::Aul,
        }
    }
}

#[derive(Args, Default)]
struct ConfigOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_decay_epoch: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    lambda_u_rampup: Option<usize>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    augmentations: Option<usize>,
    #[arg(long)]
    mc_passes: Option<usize>,
    #[arg(long)]
    aleatoric_samples: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    entropy_weight: Option<f64>,
    #[arg(long)]
    noise_model: Option<String>,
    #[arg(long)]
    no_aleatoric: bool,
    #[arg(long)]
    uniform_prior_reg: Option<f64>,
    #[arg(long)]
    gmm_tol: Option<f64>,
    #[arg(long)]
    gmm_max_iter: Option<usize>,
    #[arg(long)]
    min_class_size: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files, typically one per seed.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `json`: summary statistics. `csv`: one row per input report.
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut UlcConfig) {
        set(&mut cfg.hidden_width, self.hidden_width);
        set(&mut cfg.dropout, self.dropout);
        set(&mut cfg.warmup_epochs, self.warmup_epochs);
        set(&mut cfg.max_epochs, self.max_epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.lr, self.lr);
        set(&mut cfg.momentum, self.momentum);
        if self.lr_decay_epoch.is_some() {
            cfg.lr_decay_epoch = self.lr_decay_epoch;
        }
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.lambda_u, self.lambda_u);
        set(&mut cfg.lambda_u_rampup, self.lambda_u_rampup);
        set(&mut cfg.mixmatch.alpha, self.mixup_alpha);
        set(&mut cfg.mixmatch.temperature, self.temperature);
        set(&mut cfg.mixmatch.augmentations, self.augmentations);
        set(&mut cfg.mc_passes, self.mc_passes);
        set(&mut cfg.aleatoric_samples, self.aleatoric_samples);
        set(&mut cfg.r, self.r);
        set(&mut cfg.tau, self.tau);
        set(&mut cfg.entropy_weight, self.entropy_weight);
        set(&mut cfg.noise_model, self.noise_model.clone());
        if self.no_aleatoric {
            cfg.aleatoric = false;
        }
        set(&mut cfg.uniform_prior_reg, self.uniform_prior_reg);
        set(&mut cfg.gmm.tol, self.gmm_tol);
        set(&mut cfg.gmm.max_iter, self.gmm_max_iter);
        set(&mut cfg.min_class_size, self.min_class_size);
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}_seed{seed}"),
    };
    path.with_file_name(name)
}

/// Precedence: defaults, then `--config`, then `ULC_SEED`, then flags.
fn resolve_config(args: &TrainArgs) -> Result<UlcConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| UlcError::Io {
                path: path.clone(),
                source: e,
            })?;
            let mut value: serde_json::Value = serde_json::from_str(&text)?;
            let mut base = serde_json::to_value(UlcConfig::default())?;
            merge(&mut base, value.take());
            serde_json::from_value(base)?
        }
        None => UlcConfig::default(),
    };
    if let Ok(raw) = std::env::var("ULC_SEED") {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| UlcError::Config(format!("ULC_SEED must be an unsigned integer, got `{raw}`")))?;
    }
    set(&mut cfg.seed, args.overrides.seed);
    args.overrides.apply(&mut cfg);
    for &a in &args.ablate {
        cfg.ablate(a.into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let cfg = DataConfig {
        class_count: args.classes,
        dim: args.dim,
        per_class: args.per_class,
        test_per_class: args.test_per_class,
        center_spread: args.center_spread,
        within_std: args.within_std,
        imbalance_ratio: args.imbalance_ratio,
        noise: match args.noise {
            NoiseArg::None => NoiseKind::None,
            NoiseArg::Sym => NoiseKind::Symmetric,
            NoiseArg::Asym => NoiseKind::Asymmetric,
        },
        noise_rate: args.noise_rate,
        convention: match args.noise_convention {
            ConventionArg::ExcludeSelf => NoiseConvention::ExcludeSelf,
            ConventionArg::IncludeSelf => NoiseConvention::IncludeSelf,
        },
        seed: args.seed,
    };
    let (train, test) = cfg.datasets()?;
    dataset::save(&train, &args.out)?;
    let test_path = args.test_out.clone().unwrap_or_else(|| with_suffix(&args.out, ".test"));
    dataset::save(&test, &test_path)?;
    log::info!(
        "wrote {} training rows to {} and {} test rows to {}",
        train.len(),
        args.out.display(),
        test.len(),
        test_path.display()
    );
    Ok(())
}

fn train_one(
    method: &str,
    args: &TrainArgs,
    cfg: &UlcConfig,
    train: &Dataset,
    test: &Dataset,
    many: bool,
) -> Result<()> {
    let place = |p: &Path| {
        if many {
            seeded_path(p, cfg.seed)
        } else {
            p.to_path_buf()
        }
    };
    let mut log_sink = match &args.log {
        Some(p) => {
            let path = place(p);
            let file = fs::File::create(&path).map_err(|e| UlcError::Io { path, source: e })?;
            Some(JsonLinesLog::new(io::BufWriter::new(file)))
        }
        None => None,
    };
    let mut dump = match &args.dump_diagnostics {
        Some(dir) => Some(DiagnosticsDump::new(if many {
            dir.join(format!("seed{}", cfg.seed))
        } else {
            dir.clone()
        })?),
        None => None,
    };
    let mut sinks: Vec<&mut dyn Observer> = Vec::new();
    if let Some(l) = log_sink.as_mut() {
        sinks.push(l);
    }
    if let Some(d) = dump.as_mut() {
        sinks.push(d);
    }
    let started = std::time::Instant::now();
    let (mut report, models) = if sinks.is_empty() {
        train_with_models(method, train, test, cfg, &mut NoObserver)?
    } else {
        train_with_models(method, train, test, cfg, &mut Fanout(sinks))?
    };
    if args.record_time {
        report.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    }
    if let Some(l) = log_sink {
        let path = place(args.log.as_ref().expect("log path"));
        l.into_inner().flush().map_err(|e| UlcError::Io { path, source: e })?;
    }
    emit_report(&report, &place(&args.out), args.format.into())?;
    if let Some(dir) = &args.save_models {
        let dir = if many {
            dir.join(format!("seed{}", cfg.seed))
        } else {
            dir.clone()
        };
        fs::create_dir_all(&dir).map_err(|e| UlcError::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (k, m) in models.iter().enumerate() {
            save_model(m, &dir.join(format!("net{}.model", k + 1)))?;
        }
    }
    log::info!(
        "{method} seed {}: last {:.4} best {:.4}",
        cfg.seed,
        report.last_acc,
        report.best_acc
    );
    Ok(())
}

fn train(method: &str, args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let train = dataset::load(&args.data)?;
    let test_path = args.test.clone().unwrap_or_else(|| with_suffix(&args.data, ".test"));
    let test = dataset::load(&test_path)?;
    if args.seeds.is_empty() {
        return train_one(method, args, &cfg, &train, &test, false);
    }
    run_seeds(&args.seeds, args.jobs.max(1), |seed| {
        let cfg = UlcConfig { seed, ..cfg.clone() };
        train_one(method, args, &cfg, &train, &test, true)
    })?;
    Ok(())
}

#[derive(Serialize)]
struct Stat {
    mean: f64,
    std: f64,
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(Stat { mean, std: var.sqrt() })
}

#[derive(Serialize)]
struct Summary {
    runs: usize,
    methods: Vec<String>,
    seeds: Vec<u64>,
    best_acc: Option<Stat>,
    last_acc: Option<Stat>,
    best_last_gap: Option<Stat>,
    final_auc: Option<Stat>,
    minority_acc: Option<Stat>,
    majority_acc: Option<Stat>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    file: String,
    method: &'a str,
    seed: u64,
    best_acc: f64,
    best_epoch: usize,
    last_acc: f64,
    best_last_gap: f64,
    final_auc: Option<f64>,
    minority_acc: Option<f64>,
    majority_acc: Option<f64>,
}

fn summarize(reports: &[Report]) -> Summary {
    let col = |f: &dyn Fn(&Report) -> Option<f64>| stat(&reports.iter().filter_map(f).collect::<Vec<_>>());
    let mut methods: Vec<String> = reports.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    Summary {
        runs: reports.len(),
        methods,
        seeds: reports.iter().map(|r| r.seed).collect(),
        best_acc: col(&|r| Some(r.best_acc)),
        last_acc: col(&|r| Some(r.last_acc)),
        best_last_gap: col(&|r| Some(r.best_last_gap())),
        final_auc: col(&|r| r.final_auc),
        minority_acc: col(&|r| r.minority_acc),
        majority_acc: col(&|r| r.majority_acc),
    }
}

fn report(args: &ReportArgs) -> Result<()> {
    let reports = args.inputs.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
    let mut buf: Vec<u8> = Vec::new();
    match args.format {
        FormatArg::Json => {
            serde_json::to_writer_pretty(&mut buf, &summarize(&reports))?;
            buf.push(b'\n');
        }
        FormatArg::Csv => {
            let mut w = csv::Writer::from_writer(&mut buf);
            for (path, r) in args.inputs.iter().zip(&reports) {
                w.serialize(SummaryRow {
                    file: path.display().to_string(),
                    method: &r.method,
                    seed: r.seed,
                    best_acc: r.best_acc,
                    best_epoch: r.best_epoch,
                    last_acc: r.last_acc,
                    best_last_gap: r.best_last_gap(),
                    final_auc: r.final_auc,
                    minority_acc: r.minority_acc,
                    majority_acc: r.majority_acc,
                })
                .map_err(|e| UlcError::Contract(format!("csv encoding: {e}")))?;
            }
            w.flush().map_err(|e| UlcError::Io {
                path: PathBuf::from("<buffer>"),
                source: e,
            })?;
        }
    }
    match &args.out {
        Some(path) => fs::write(path, &buf).map_err(|e| UlcError::Io {
            path: path.clone(),
            source: e,
        }),
        None => io::stdout().write_all(&buf).map_err(|e| UlcError::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim(), 2),
    };
    let outcome = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train("ulc", a),
        Command::Baseline(a) => train("ce", a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e {
                UlcError::Config(_) | UlcError::UnknownStrategy { .. } => 2,
                _ => 1,
            };
            fail(e.kind(), &e.to_string(), code)
        }
    }
}
