mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdafl::checkpoint::Checkpoint;
use hdafl::dataset::{generate_synthetic, Dataset, SynthSpec};
use hdafl::eval::{self, EvalMode};
use hdafl::losses::FeatureSource;
use hdafl::trainer::{self, TrainConfig};
use hdafl::{Error, Result};

use config::RunConfigFile;

const SEED_ENV: &str = "HDAFL_SEED";
const LOSS_TRACE: &str = "loss_trace.csv";

#[derive(Parser)]
#[command(name = "hdafl", version, about = "Attribute-attention zero-shot learning head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    SynthData(SynthArgs),
    /// Train the head with episodic SGD.
    #[command(after_help = defaults_help())]
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    #[command(after_help = defaults_help())]
    Eval(EvalArgs),
    /// Write test-split attribute features for external projection.
    ExportEmbeddings(ExportArgs),
}

fn defaults_help() -> String {
    format!(
        "Configuration defaults (override with --config FILE; {SEED_ENV} overrides every seed):\n\n{}",
        config::defaults_toml()
    )
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    seen: usize,
    #[arg(long, default_value_t = 3)]
    unseen: usize,
    #[arg(long, default_value_t = 12)]
    attrs: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 7)]
    height: usize,
    #[arg(long, default_value_t = 7)]
    width: usize,
    #[arg(long, default_value_t = 20)]
    images_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for checkpoints and the loss trace.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint's parameters, momentum and epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Calibration factor subtracted from seen-class scores [default: 0.7].
    #[arg(long)]
    gamma: Option<f64>,
    /// GZSL sweep `start:end:step`, one row per value.
    #[arg(long, value_name = "START:END:STEP")]
    gamma_sweep: Option<String>,
    /// Directory for `eval_report.json` and `eval_table.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Czsl,
    Gzsl,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeaturesArg {
    Raw,
    Enhanced,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "enhanced")]
    features: FeaturesArg,
    /// Output CSV: image,label,attribute,f0..f{C-1}.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::MissingFile { .. } => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::ExportEmbeddings(a) => export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile> {
    let mut cfg = match path {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn require(value: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("--{flag} is required (or set it under [paths])")))
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth_data(a: SynthArgs) -> Result<()> {
    if is_non_empty_dir(&a.out) && !a.force {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to overwrite",
            a.out.display()
        )));
    }
    let spec = SynthSpec {
        n_seen: a.seen,
        n_unseen: a.unseen,
        num_attributes: a.attrs,
        channels: a.channels,
        height: a.height,
        width: a.width,
        images_per_class: a.images_per_class,
        noise_scale: a.noise,
        seed: seed_override()?.unwrap_or(a.seed),
    };
    let ds = generate_synthetic(&spec)?;
    ds.save(&a.out)?;
    println!(
        "wrote {}: {} images, {} seen / {} unseen classes, K={}, grid {:?}, {} train / {} test",
        a.out.display(),
        ds.len(),
        ds.seen_classes().len(),
        ds.unseen_classes().len(),
        ds.num_attributes(),
        ds.grid(),
        ds.train_indices().len(),
        ds.test_indices().len()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?;
    let data = require(a.data, &file.paths.data, "data")?;
    let out = require(a.out, &file.paths.out, "out")?;
    let resume = a.resume.map(Checkpoint::load).transpose()?;
    if resume.is_none() && is_non_empty_dir(&out) && !a.force {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to overwrite or --resume to continue",
            out.display()
        )));
    }
    let mut cfg: TrainConfig = match (&resume, a.config.is_some()) {
        // A resumed run keeps its saved hyperparameters unless a file is given.
        (Some(ck), false) => ck.train_config.clone().unwrap_or_else(|| file.train_config()),
        _ => file.train_config(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(seed) = seed_override()? {
        cfg.init_seed = seed;
        cfg.episode.seed = seed;
    }
    cfg.checkpoint_dir = Some(out.clone());

    let dataset = Dataset::load(&data)?;
    let continued = resume.is_some();
    let outcome = trainer::train_from(&dataset, &cfg, resume)?;
    let trace_path = out.join(LOSS_TRACE);
    if continued && trace_path.exists() {
        append_trace(&trace_path, &outcome.trace)?;
    } else {
        trainer::write_loss_trace(&trace_path, &outcome.trace)?;
    }
    let last = outcome.trace.last();
    println!(
        "trained {} episodes ({} epochs total); final checkpoint {}; last loss {}",
        outcome.trace.len(),
        outcome.checkpoint.progress.epochs_completed,
        trainer::final_checkpoint_path(&out).display(),
        last.map_or_else(|| "n/a".into(), |r| format!("{:.4}", r.total))
    );
    Ok(())
}

fn append_trace(path: &Path, trace: &[trainer::LossRecord]) -> Result<()> {
    let tmp = path.with_extension("csv.new");
    trainer::write_loss_trace(&tmp, trace)?;
    let body = fs::read_to_string(&tmp).map_err(|e| Error::Io { path: tmp.clone(), source: e })?;
    let _ = fs::remove_file(&tmp);
    let rows: String = body.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    f.write_all(rows.as_bytes())
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let file = load_config(a.config.as_deref())?;
    let data = require(a.data, &file.paths.data, "data")?;
    let ckpt_path = require(a.checkpoint, &file.paths.checkpoint, "checkpoint")?;
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let dataset = Dataset::load(&data)?;

    let (json, table) = if let Some(sweep) = &a.gamma_sweep {
        let gammas = parse_sweep(sweep)?;
        let reports = eval::gamma_sweep(&checkpoint, &dataset, &gammas)?;
        (to_json(&reports), eval::sweep_table(&reports))
    } else {
        let mode = match a.mode {
            Some(ModeArg::Czsl) => EvalMode::Czsl,
            Some(ModeArg::Gzsl) => EvalMode::Gzsl,
            None => file.eval.mode,
        };
        let gamma = a.gamma.unwrap_or(file.eval.gamma);
        let report = eval::evaluate(&checkpoint, &dataset, mode, gamma)?;
        (to_json(&report), report.table())
    };
    print!("{table}");
    if let Some(out) = a.out {
        fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        write_file(&out.join("eval_report.json"), json.as_bytes())?;
        write_file(&out.join("eval_table.txt"), table.as_bytes())?;
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialize report")
}

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Option<Vec<f64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some(&[start, end, step]) => eval::gamma_range(start, end, step),
        _ => Err(Error::Config(format!("--gamma-sweep expects START:END:STEP, got `{s}`"))),
    }
}

fn export_embeddings(a: ExportArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let dataset = Dataset::load(&a.data)?;
    if dataset.test_indices().is_empty() {
        return Err(Error::Config("test split is empty; nothing to export".into()));
    }
    let source = match a.features {
        FeaturesArg::Raw => FeatureSource::Raw,
        FeaturesArg::Enhanced => FeatureSource::Enhanced,
    };
    let entries = eval::test_attribute_features(&checkpoint, &dataset, source)?;
    let mut out = String::from("image,label,attribute");
    for c in 0..checkpoint.model.channels {
        out.push_str(&format!(",f{c}"));
    }
    out.push('\n');
    for e in &entries {
        out.push_str(&format!("{},{},{}", e.image, e.label, e.attribute));
        for v in &e.feature {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let rows = entries.len();
    write_file(&a.out, out.as_bytes())?;
    println!("wrote {rows} attribute features to {}", a.out.display());
    Ok(())
}
