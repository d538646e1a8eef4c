//! `bamp` command-line front end.
//!
//! Exit codes: 0 success, 1 computation error, 2 usage or input error.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bamp_core::adaptation::{
    config_hash, load_checkpoint, save_checkpoint, train_base_session, Checkpoint, ClassSet, FrozenHead, TrainError,
};
use bamp_core::config::RunConfig;
use bamp_core::protocol::{run_protocol_with, ProtocolConfig, ProtocolError};
use bamp_core::report::{curves_csv, parse_results, summary_table, ResultsWriter};
use bamp_core::store::{
    build_session_plan_with, default_session_count, load_embeddings, sample_session_data, write_embeddings,
    write_sidecar, DatasetManifest, LabeledEmbedding, SessionMode, SessionPlan, StoreError,
};
use bamp_core::synth::{class_names, generate, SynthConfig};

#[derive(Parser)]
#[command(name = "bamp", version, about = "Few-shot class-incremental learning over pre-extracted embeddings")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic embedding file and its sidecar.
    Synth(SynthArgs),
    /// Split a dataset into sessions and write the plan.
    Prepare(PrepareArgs),
    /// Adapt the head on the base session and write a checkpoint.
    TrainBase(TrainBaseArgs),
    /// Run the full incremental protocol and write a results CSV.
    Run(RunArgs),
    /// Summarize results files and write per-session curve data.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output embedding file; the sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name recorded in the sidecar.
    #[arg(long, default_value = "synth")]
    name: String,
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().train_per_class)]
    train_per_class: usize,
    #[arg(long, default_value_t = SynthConfig::default().test_per_class)]
    test_per_class: usize,
    /// Distance of the class centres from the origin.
    #[arg(long, default_value_t = SynthConfig::default().radius)]
    radius: f64,
    /// Isotropic within-class standard deviation.
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    noise: f64,
    /// Number of stretched directions shared by every class.
    #[arg(long, default_value_t = SynthConfig::default().shared_rank)]
    shared_rank: usize,
    /// Standard deviation along the shared directions.
    #[arg(long, default_value_t = SynthConfig::default().shared_scale)]
    shared_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Embedding file.
    #[arg(long)]
    embeddings: PathBuf,
    /// `big_start` or `small_start`.
    #[arg(long, default_value = "big_start", value_parser = parse_mode)]
    mode: SessionMode,
    /// Session count including the base session; defaults per dataset.
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Nonzero seeds shuffle the class order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output plan file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<SessionMode, String> {
    s.parse()
}

/// Configuration sources shared by `train-base` and `run`. Precedence is
/// flag over file over default.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Embedding file (the `dataset` key).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Plan file (the `plan` key); without one the plan is derived from the
    /// `mode`, `sessions`, `shots` and `plan_seed` keys.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Component toggles of one ablation row: B1, B2, B3 or B4.
    #[arg(long, value_name = "PRESET")]
    toggle_preset: Option<String>,
}

#[derive(Args)]
struct TrainBaseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Results CSV; the run manifest is written to `<out>.manifest`.
    #[arg(long)]
    out: PathBuf,
    /// Base-session checkpoint from `train-base`; skips adaptation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results files written by `run`.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Per-session curve CSV to write.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Compute(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Compute(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Compute(m) => m,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptyDataset | TrainError::EmptyClass(_) | TrainError::UnknownClass(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Compute(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Store(_) | ProtocolError::Invalid(_) => CliError::Input(e.to_string()),
            ProtocolError::Train(t) => t.into(),
            _ => CliError::Compute(e.to_string()),
        }
    }
}

fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<LabeledEmbedding>), CliError> {
    let (manifest, records) = load_embeddings(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    manifest.validate().map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok((manifest, records))
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        classes: a.classes,
        dim: a.dim,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        radius: a.radius,
        noise: a.noise,
        shared_rank: a.shared_rank,
        shared_scale: a.shared_scale,
        seed: a.seed,
    };
    cfg.validate().map_err(CliError::Input)?;
    let records = generate(&cfg);
    let err = |e: StoreError| CliError::Input(format!("{}: {e}", a.out.display()));
    write_embeddings(&records, &a.out).map_err(err)?;
    write_sidecar(&a.out, &a.name, &class_names(cfg.classes)).map_err(err)?;
    println!("wrote {} records ({} classes, dim {}) to {}", records.len(), cfg.classes, cfg.dim, a.out.display());
    Ok(())
}

fn cmd_prepare(a: PrepareArgs) -> Result<(), CliError> {
    let (manifest, _) = load_dataset(&a.embeddings)?;
    let sessions = a.sessions.unwrap_or_else(|| default_session_count(&manifest.name, manifest.class_count, a.mode));
    let plan = build_session_plan_with(&manifest, a.mode, sessions, a.shots, a.seed)
        .map_err(|e| CliError::Input(e.to_string()))?;
    plan.save(&a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    println!("{}", plan.summary());
    Ok(())
}

/// Dataset, plan and configuration of one `train-base` or `run` invocation.
struct Prepared {
    config: RunConfig,
    manifest: DatasetManifest,
    records: Vec<LabeledEmbedding>,
    plan: SessionPlan,
    protocol: ProtocolConfig,
}

fn prepare_run(args: &ConfigArgs) -> Result<Prepared, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| CliError::Input(e.to_string()))?,
        None => RunConfig::default(),
    };
    let set = |c: &mut RunConfig, k: &str, v: &str| c.set(k, v).map_err(|e| CliError::Input(e.to_string()));
    if let Some(p) = &args.embeddings {
        set(&mut config, "dataset", &p.display().to_string())?;
    }
    if let Some(p) = &args.plan {
        set(&mut config, "plan", &p.display().to_string())?;
    }
    if let Some(p) = &args.toggle_preset {
        set(&mut config, "toggle_preset", p)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Input(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        set(&mut config, k.trim(), v)?;
    }
    config.validate().map_err(|e| CliError::Input(e.to_string()))?;

    let dataset = config.dataset.clone().ok_or_else(|| CliError::Input("no dataset given (use --embeddings or the `dataset` key)".into()))?;
    let (manifest, records) = load_dataset(&dataset)?;
    let plan = match &config.plan {
        Some(path) => {
            let plan = SessionPlan::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            plan.validate_against(&manifest).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            plan
        }
        None => {
            let sessions =
                config.sessions.unwrap_or_else(|| default_session_count(&manifest.name, manifest.class_count, config.mode));
            build_session_plan_with(&manifest, config.mode, sessions, config.shots, config.plan_seed)
                .map_err(|e| CliError::Input(e.to_string()))?
        }
    };
    let config = config.resolved(&manifest.name);
    let protocol = config.protocol(&manifest.name);
    Ok(Prepared { config, manifest, records, plan, protocol })
}

fn cmd_train_base(a: TrainBaseArgs) -> Result<(), CliError> {
    let p = prepare_run(&a.config)?;
    let base_ids = p.plan.base_classes().to_vec();
    let base = sample_session_data(&p.plan, 0, &p.records, p.protocol.seed).map_err(|e| CliError::Input(e.to_string()))?;
    let set = ClassSet::from_records(&base, &base_ids)?;
    let train = p.protocol.effective_train();
    let trained = train_base_session(&set, &train)?;
    let ckpt = Checkpoint {
        config_hash: config_hash(&train, &base_ids),
        class_ids: base_ids,
        head: trained.head.into_inner(),
        bank: trained.bank,
    };
    save_checkpoint(&a.out, &ckpt).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    println!(
        "trained base session of {} ({} classes, {} epochs), training accuracy {:.4}",
        p.manifest.name,
        ckpt.class_ids.len(),
        trained.report.epochs.len(),
        trained.report.final_accuracy
    );
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let p = prepare_run(&a.config)?;
    let pretrained = match &a.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let expected = config_hash(&p.protocol.effective_train(), p.plan.base_classes());
            ckpt.ensure_matches(expected).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            Some(FrozenHead::new(ckpt.head))
        }
        None => None,
    };

    let mut manifest = p.config.to_text();
    if let Some(path) = &a.checkpoint {
        manifest.push_str(&format!("# checkpoint: {}\n", path.display()));
    }
    let mpath = manifest_path(&a.out);
    std::fs::write(&mpath, manifest).map_err(io_error(&mpath))?;

    let file = File::create(&a.out).map_err(io_error(&a.out))?;
    let mut writer = ResultsWriter::new(BufWriter::new(file)).map_err(io_error(&a.out))?;
    let mut write_error = None;
    let outcome = run_protocol_with(&p.records, &p.plan, &p.protocol, pretrained, &mut |r| {
        if write_error.is_none() {
            write_error = writer.session(r).err();
        }
    });
    if let Some(e) = write_error {
        return Err(io_error(&a.out)(e));
    }
    match outcome {
        Ok(result) => {
            writer.summary(result.a_last, result.a_inc).map_err(io_error(&a.out))?;
            println!("A_last {:.2}  A_inc {:.2}", result.a_last, result.a_inc);
            Ok(())
        }
        Err(e) => {
            let e = CliError::from(e);
            writer.failed(e.message()).map_err(io_error(&a.out))?;
            Err(e)
        }
    }
}

fn cmd_report(a: ReportArgs) -> Result<(), CliError> {
    let mut runs = Vec::with_capacity(a.results.len());
    for path in &a.results {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let parsed = parse_results(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        runs.push((name, parsed));
    }
    let table = summary_table(&runs).map_err(|e| CliError::Input(e.to_string()))?;
    print!("{table}");
    if let Some(out) = &a.curves {
        std::fs::write(out, curves_csv(&runs)).map_err(io_error(out))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
