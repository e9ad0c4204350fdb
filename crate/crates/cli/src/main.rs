use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsrelu::exp::{emit_reports, run, ExperimentConfig, ExperimentKind, RunLog, RunMode};
use tsrelu::Error;

#[derive(Parser, Debug)]
#[command(name = "tsrelu", version, about = "Teacher-student ReLU experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config layered over the subcommand's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: the config's output_dir, else runs/<kind>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated seed list, e.g. "1,2,3".
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Also write one SVG line plot per metric.
    #[arg(long, global = true)]
    plots: bool,

    /// Worker threads for seeds and grid cells.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Check the gradient decomposition on random networks.
    VerifyThm1,
    /// Train students against a teacher and track node correlations.
    Train,
    /// Two-layer reduced dynamics over the over-parameterization grid.
    Thm5Grid,
    /// Compare training variants.
    Ablate {
        /// Which ablation; taken from the config's kind when omitted.
        #[arg(value_enum)]
        which: Option<Ablation>,
    },
    /// Reset-and-prune of the winning students.
    Lottery,
    /// Sign audit of BN biases of trained students.
    BnAudit,
    /// Overlap estimators against a planar oracle, plus an assumption audit.
    PsiCheck,
    /// Fall-off exponent of the rectified overlap.
    Falloff,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Ablation {
    Size,
    Overparam,
    Finite,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Guaranteed,
    FreeRun,
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

fn kind_for(command: Command, from_file: Option<ExperimentKind>) -> Result<ExperimentKind, Error> {
    Ok(match command {
        Command::VerifyThm1 => ExperimentKind::VerifyThm1,
        Command::Train => ExperimentKind::Train,
        Command::Thm5Grid => ExperimentKind::Thm5Grid,
        Command::Ablate {
            which: Some(Ablation::Size),
        } => ExperimentKind::AblateSize,
        Command::Ablate {
            which: Some(Ablation::Overparam),
        } => ExperimentKind::AblateOverparam,
        Command::Ablate {
            which: Some(Ablation::Finite),
        } => ExperimentKind::AblateFinite,
        Command::Ablate { which: None } => match from_file {
            Some(k) if k.is_ablation() => k,
            _ => return Err(Error::Config("ablate needs size, overparam or finite".into())),
        },
        Command::Lottery => ExperimentKind::Lottery,
        Command::BnAudit => ExperimentKind::BnAudit,
        Command::PsiCheck => ExperimentKind::PsiCheck,
        Command::Falloff => ExperimentKind::FalloffProbe,
    })
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?),
        None => None,
    };
    let file_kind = match &text {
        Some(t) => {
            let v: serde_json::Value = serde_json::from_str(t).map_err(|e| Error::Config(e.to_string()))?;
            match v.get("kind") {
                Some(k) => Some(
                    serde_json::from_value::<ExperimentKind>(k.clone()).map_err(|e| Error::Config(e.to_string()))?,
                ),
                None => None,
            }
        }
        None => None,
    };
    let kind = kind_for(cli.command, file_kind)?;
    if let Some(k) = file_kind {
        if k != kind {
            return Err(Error::Config(format!(
                "config kind {k:?} does not match the subcommand ({kind:?})"
            )));
        }
    }
    let base = ExperimentConfig::for_kind(kind);
    let mut cfg = match &text {
        Some(t) => base.with_overrides(t)?,
        None => base,
    };
    if let Some(s) = &cli.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(m) = cli.mode {
        cfg.mode = match m {
            ModeArg::Guaranteed => RunMode::Guaranteed,
            ModeArg::FreeRun => RunMode::FreeRun,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(o) = &cli.out {
        return o.clone();
    }
    if let Some(o) = &cfg.output_dir {
        return PathBuf::from(o);
    }
    let kind = serde_json::to_value(cfg.kind)
        .ok()
        .and_then(|v| v.as_str().map(String::from));
    PathBuf::from("runs").join(kind.unwrap_or_else(|| "run".into()))
}

fn report(log: &RunLog, written: &[PathBuf]) {
    println!("config hash {}", log.config_hash);
    for c in &log.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("wrote {} files, wall clock {:.1} s", written.len(), log.wall_clock_s);
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start the worker pool: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let log = match run(&cfg) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let dir = out_dir(&cli, &cfg);
    let written = match emit_reports(&log, &dir, cli.plots) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    report(&log, &written);
    if matches!(cli.command, Command::VerifyThm1) && !log.all_checks_pass() {
        return ExitCode::from(EXIT_CHECK);
    }
    ExitCode::SUCCESS
}
