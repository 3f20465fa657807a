//! Command-line entry point: run experiments, ablations, checkpoint
//! verification and dataset export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dimoe::checkpoint::{latest_in, stage_path, verify, Checkpoint};
use dimoe::config::{default_ablation_rows, parse_ablation_rows, ExperimentConfig, ToggleSet};
use dimoe::experiment::{
    ablate, build_stream, run_baselines, write_ablation, write_report, Session,
};
use dimoe::taskgen::write_bundle;
use dimoe::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dimoe",
    version,
    about = "Continual learning with self-evolving adapter experts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the task stream, checkpoint every stage and write reports.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ablation toggles, or `full`.
        #[arg(long)]
        toggles: Option<String>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Skip the shared-adapter and fine-tune reference runs.
        #[arg(long)]
        no_baselines: bool,
    },
    /// Run the ablation grid on shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Rows to run besides `full`: comma-separated, `+` joins toggles
        /// within a row. Defaults to the standard grid.
        #[arg(long)]
        toggles: Option<String>,
    },
    /// Reload a checkpoint and check that it reproduces its evaluation.
    VerifyCheckpoint { path: PathBuf },
    /// Write the generated task stream as a dataset bundle.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default().resolved(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))
}

fn cmd_run(
    common: &Common,
    toggles: Option<&str>,
    resume: bool,
    no_baselines: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(t) = toggles {
        cfg.toggles = ToggleSet::parse(t, ',')?;
        cfg.validate()?;
    }
    let out = out_dir(common, &cfg)?;
    let ckpt_dir = out.join("checkpoints");
    let mut session = match latest_in(&ckpt_dir)? {
        Some(path) if resume => {
            log::info!("resuming from {}", path.display());
            Checkpoint::load(&path)?.resume(&cfg)?
        }
        _ => Session::new(cfg)?,
    };
    while !session.is_done() {
        let stage = session.next_stage()?.stage;
        Checkpoint::capture(&session).save(&stage_path(&ckpt_dir, stage))?;
    }
    let baselines = if no_baselines {
        None
    } else {
        Some(run_baselines(&session.config, &session.stream)?)
    };
    let result = session.into_result()?;
    write_report(&out, &result, baselines.as_ref())?;
    for p in result.matrices.keys() {
        let m = result.metrics(*p)?;
        println!(
            "{:<18} transfer {}  avg {}  last {}",
            p.name(),
            fmt_opt(m.transfer.overall),
            fmt_opt(m.avg.overall),
            fmt_opt(m.last.overall)
        );
    }
    if let Some(b) = &baselines {
        println!(
            "{:<18} last {}",
            "shared_adapter",
            fmt_opt(b.shared_adapter.last.overall)
        );
        println!("{:<18} mean {:.4}", "finetune", b.finetune_mean);
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn cmd_ablate(common: &Common, rows: Option<&str>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let rows = match rows {
        Some(r) => parse_ablation_rows(r)?,
        None => default_ablation_rows(),
    };
    let out = out_dir(common, &cfg)?;
    let table = ablate(&cfg, &rows)?;
    write_ablation(&out, &table)?;
    println!(
        "{:<24} {:>8} {:>8} {:>8} {:>9}",
        "row", "transfer", "avg", "last", "Δlast"
    );
    for r in &table {
        println!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>+9.4}",
            r.name, r.transfer, r.avg, r.last, r.delta_last
        );
    }
    Ok(())
}

fn cmd_verify(path: &Path) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(path)?;
    let stage = ckpt.stages.len();
    match verify(ckpt) {
        Ok(_) => {
            println!("{}: {stage} stages, evaluation reproduces", path.display());
            Ok(())
        }
        Err(Error::Integrity(m)) if m.contains("reproduce") => Err(Failure {
            code: EXIT_CHECK,
            message: m,
        }),
        Err(e) => Err(e.into()),
    }
}

fn cmd_gen_data(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = out_dir(common, &cfg)?;
    let stream = build_stream(&cfg)?;
    write_bundle(&stream, &out)?;
    println!("{} tasks written to {}", stream.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match &cli.command {
        Command::Run {
            common,
            toggles,
            resume,
            no_baselines,
        } => cmd_run(common, toggles.as_deref(), *resume, *no_baselines),
        Command::Ablate { common, toggles } => cmd_ablate(common, toggles.as_deref()),
        Command::VerifyCheckpoint { path } => cmd_verify(path),
        Command::GenData { common } => cmd_gen_data(common),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
