use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regret_design::commands::{self, CommandError, Options, EXIT_IO};
use regret_design::io::Format;

#[derive(Parser)]
#[command(name = "regret-design", version, about = "Treatment-fraction choice, regret bounds and experiment design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose the rule with the largest estimated welfare from a sample file.
    Choose(Flags),
    /// Welfare sandwich and uniform regret bound for a design.
    Bounds(Flags),
    /// Distribute clusters over candidate ratios.
    Design(Flags),
    /// Smallest sample size whose regret bound is below a threshold.
    Samplesize(Flags),
    /// Simulate a rule in a configured state.
    Simulate(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct Flags {
    /// Sample or counts CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// JSON configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CommandError> {
    let (flags, cmd): (&Flags, fn(&Options) -> Result<String, CommandError>) = match &cli.command {
        Command::Choose(f) => (f, commands::cmd_choose),
        Command::Bounds(f) => (f, commands::cmd_bounds),
        Command::Design(f) => (f, commands::cmd_design),
        Command::Samplesize(f) => (f, commands::cmd_samplesize),
        Command::Simulate(f) => (f, commands::cmd_simulate),
    };
    let opts = Options {
        input: flags.input.clone(),
        config: flags.config.clone(),
        format: match flags.format {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        },
        seed: flags.seed,
        reps: flags.reps,
    };
    let text = cmd(&opts)?;
    let io_err = |e: std::io::Error| CommandError {
        code: EXIT_IO,
        message: e.to_string(),
    };
    match &flags.output {
        Some(p) => std::fs::write(p, text).map_err(io_err),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(io_err),
    }
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("REGRET_DESIGN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Only fails if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
