//! Command-line front end: `run`, `check` and `metrics` over scenario files.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use capdma_core::lint;
use capdma_core::report::{metrics_document, EXIT_INPUT};
use capdma_core::scenario::Scenario;
use capdma_core::{simulate, Mode};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "capdma", version, about = "Simulate and analyse DMA capability isolation on an MPU microkernel")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and print the run report.
    Run(RunArgs),
    /// Apply the task-creation rules without simulating.
    Check(CommonArgs),
    /// Report standard and worst-case exposure per task.
    Metrics(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "dbox")]
    Dbox,
    #[value(name = "fmpu_compat")]
    FmpuCompat,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Dbox => Mode::Dbox,
            ModeArg::FmpuCompat => Mode::FmpuCompat,
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    pub scenario: PathBuf,
    /// Override the scenario's mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Set an attack toggle, e.g. `--toggle modbus_attack=true`.
    #[arg(long = "toggle", value_parser = parse_toggle)]
    pub toggles: Vec<(String, bool)>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Stop after this many ticks.
    #[arg(long)]
    pub ticks: Option<u64>,
    /// Print the event trace to stderr.
    #[arg(long)]
    pub trace: bool,
}

fn parse_toggle(s: &str) -> Result<(String, bool), String> {
    let (name, value) = s.split_once('=').ok_or("expected name=true|false")?;
    let value = value
        .parse::<bool>()
        .map_err(|_| format!("toggle value {value:?} is not true or false"))?;
    Ok((name.to_string(), value))
}

fn load(args: &CommonArgs) -> Result<Scenario, String> {
    let mut s = Scenario::from_path(&args.scenario).map_err(|e| e.to_string())?;
    if let Some(m) = args.mode {
        s = s.with_mode(m.into());
    }
    for (name, value) in &args.toggles {
        s.set_toggle(name, *value).map_err(|e| e.to_string())?;
    }
    Ok(s)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), String> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}").map_err(|e| e.to_string())
        }
    }
}

/// Runs one parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(args) => load(&args.common).and_then(|s| {
            let (report, trace) = simulate(s, args.ticks);
            if args.trace {
                eprint!("{}", trace.render());
            }
            emit(args.common.out.as_deref(), &report.to_json())?;
            Ok(report.exit_code())
        }),
        Command::Check(args) => load(&args).and_then(|s| {
            let report = lint::check(&s);
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for t in report.tasks.iter().filter(|t| t.message.is_some()) {
                eprintln!("error: task {} ({}): {}", t.id, t.name, t.message.as_deref().unwrap_or(""));
            }
            let text = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
            emit(args.out.as_deref(), &text)?;
            Ok(report.exit_code())
        }),
        Command::Metrics(args) => load(&args).and_then(|s| {
            let doc = metrics_document(&s).map_err(|e| e.to_string())?;
            emit(args.out.as_deref(), &doc.to_json())?;
            Ok(0)
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_INPUT
    })
}

/// Parses `args` and runs. Usage errors exit with the input-error code;
/// `--help` and `--version` exit 0.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                0
            }
        }
    }
}
