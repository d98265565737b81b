use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gridmarket::config::{Case, ScenarioConfig};
use gridmarket::model::validate_model;
use gridmarket::scenario::{self, RunManifest};
use gridmarket::Result;

/// Reward-based market for power grids: solve, simulate and audit.
///
/// Exit status: 0 when every check passes, 1 when a check fails, 2 on
/// configuration, I/O or usage errors.
#[derive(Parser)]
#[command(name = "gridmarket", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Override the simulation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the number of simulated paths.
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Override the simulation step.
    #[arg(long, global = true)]
    dt: Option<f64>,

    /// Output directory (default: the config's `output`, else `out/<command>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Only print errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check dimensions and standing assumptions of a configuration.
    Validate { config: PathBuf },
    /// Solve for the value function and emit prices.
    Solve { config: PathBuf },
    /// Simulate the Nash profile and settle rewards.
    Simulate { config: PathBuf },
    /// Run one of the market cases end to end.
    Scenario {
        #[arg(value_enum)]
        case: CaseArg,
        config: PathBuf,
    },
    /// Run the auction sequence with an information audit.
    Auction { config: PathBuf },
    /// Unilateral deviation tests for every agent.
    DeviationTest { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    A,
    B,
    C,
}

fn load(cli: &Cli, path: &Path) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(path)?;
    cfg.override_sim(cli.seed, cli.paths, cli.dt)?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ScenarioConfig, default: &str) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(default))
}

fn report(manifest: &RunManifest, dir: &Path) -> u8 {
    for c in &manifest.checks {
        println!("{} {}: {:.6e} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.detail);
    }
    for n in &manifest.notes {
        println!("note: {n}");
    }
    println!("manifest: {}", dir.join("manifest.json").display());
    if manifest.passed {
        0
    } else {
        1
    }
}

fn run(cli: &Cli) -> Result<u8> {
    type Runner = fn(&ScenarioConfig, Option<&Path>) -> Result<RunManifest>;
    let (config, name, runner, case): (&Path, &str, Runner, Option<Case>) = match &cli.command {
        Command::Validate { config } => {
            let cfg = load(cli, config)?;
            let report = validate_model(&cfg.model);
            print!("{report}");
            return Ok(if report.passed() { 0 } else { 1 });
        }
        Command::Solve { config } => (config, "solve", scenario::run_solve, None),
        Command::Simulate { config } => (config, "simulate", scenario::run_simulate, None),
        Command::Scenario { case, config } => match case {
            CaseArg::A => (config, "scenario-a", scenario::run_case_a, Some(Case::A)),
            CaseArg::B => (config, "scenario-b", scenario::run_case_b, Some(Case::B)),
            CaseArg::C => (config, "scenario-c", scenario::run_case_c, Some(Case::C)),
        },
        Command::Auction { config } => (config, "auction", scenario::run_auction, None),
        Command::DeviationTest { config } => (config, "deviation-test", scenario::run_deviation_test, None),
    };
    let mut cfg = load(cli, config)?;
    if let Some(case) = case {
        cfg.set_case(case);
    }
    let dir = out_dir(cli, &cfg, name);
    let manifest = runner(&cfg, Some(&dir))?;
    Ok(report(&manifest, &dir))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "info" }))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
