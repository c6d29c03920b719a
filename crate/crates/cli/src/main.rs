use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fvsim_cli::args::{applicable, load, parse_overrides, Overrides};
use fvsim_cli::output::{run_hash, RunDir};
use fvsim_cli::{commands, demos, Status, EXIT_ERROR};
use fvsim_core::config::Config;

/// Scaled multi-type birth-death-immigration simulator with Fleming-Viot
/// references.
///
/// Every subcommand writes to runs/<hash>/ (override the root with
/// `--runs DIR`), where <hash> is the SHA-256 of the canonical config and the
/// subcommand. Trailing `--dotted.key value` pairs override config entries;
/// `--N` is short for `--sim.N` and `--seed` sets every seed in the file.
///
/// Exit codes: 0 success, 1 malformed config or failed run, 2 validation
/// failure, 3 diagnostic failure.
#[derive(Parser)]
#[command(name = "fvsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the model assumptions and report the equilibrium.
    Validate(Single),
    /// Integrate the density flow; writes flow.csv and equilibrium.toml.
    Flow(Single),
    /// Series solution of the left-eigenvector field; writes coefficients.csv,
    /// residuals.csv and lambda_report.toml.
    Lambda(Single),
    /// Run the replicates of [sim]; writes trajectories/, states/ and events.jsonl.
    Simulate(Single),
    /// Sample the reference process of [reference]; writes samples.csv.
    Reference(Single),
    /// N-scaling diagnostics over [compare].N; writes diagnostics.csv and summary.toml.
    Compare(Single),
    /// Shipped demonstration pipelines.
    Demo {
        which: DemoKind,
        /// `--dotted.key value` overrides, applied to each embedded config that has the section.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

#[derive(clap::Args)]
struct Single {
    /// TOML configuration file.
    config: PathBuf,
    /// `--dotted.key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoKind {
    Genetics,
    Polarity,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

fn read_config(path: &Path, ov: &Overrides) -> Result<Config, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let cfg = load(&text, &ov.pairs).map_err(|e| Failure::Config(anyhow::anyhow!("{}: {e}", path.display())))?;
    cfg.build_spec().map_err(|e| Failure::Config(anyhow::anyhow!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn seed_of(cfg: &Config) -> u64 {
    cfg.sim.as_ref().map(|s| s.seed).or_else(|| cfg.reference.as_ref().map(|r| r.seed)).unwrap_or(0)
}

fn single(name: &str, args: &Single, f: fn(&Config, &mut RunDir) -> Result<Status>) -> Result<Status, Failure> {
    let ov = parse_overrides(&args.overrides).map_err(Failure::Config)?;
    let cfg = read_config(&args.config, &ov)?;
    let root = ov.runs.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let canonical = cfg.canonical();
    let mut run = RunDir::create(&root, run_hash(&[&canonical], name), name, seed_of(&cfg)).map_err(Failure::Run)?;
    run.write("config.toml", &canonical).map_err(Failure::Run)?;
    let status = f(&cfg, &mut run).map_err(|e| match e.downcast_ref::<fvsim_core::config::ConfigError>() {
        Some(_) => Failure::Config(e),
        None => Failure::Run(e),
    })?;
    let path = run.finish(status.label()).map_err(Failure::Run)?;
    eprintln!("run directory: {}", path.display());
    Ok(status)
}

fn embedded(text: &str, ov: &Overrides) -> Result<Config, Failure> {
    let pairs = applicable(text, &ov.pairs).map_err(|e| Failure::Config(e.into()))?;
    load(text, &pairs).map_err(|e| Failure::Config(e.into()))
}

fn demo(which: DemoKind, rest: &[String]) -> Result<Status, Failure> {
    let ov = parse_overrides(rest).map_err(Failure::Config)?;
    let root = ov.runs.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match which {
        DemoKind::Genetics => {
            let fix = embedded(demos::GENETICS, &ov)?;
            let iam = embedded(demos::GENETICS_IAM, &ov)?;
            let (a, b) = (fix.canonical(), iam.canonical());
            let mut run = RunDir::create(&root, run_hash(&[&a, &b], "demo genetics"), "demo genetics", seed_of(&fix))
                .map_err(Failure::Run)?;
            run.write("fixation_config.toml", &a).map_err(Failure::Run)?;
            run.write("clan_config.toml", &b).map_err(Failure::Run)?;
            let status = demos::genetics(&fix, &iam, &mut run).map_err(Failure::Run)?;
            let path = run.finish(status.label()).map_err(Failure::Run)?;
            eprintln!("run directory: {}", path.display());
            Ok(status)
        }
        DemoKind::Polarity => {
            let cfg = embedded(demos::POLARITY, &ov)?;
            let c = cfg.canonical();
            let mut run =
                RunDir::create(&root, run_hash(&[&c], "demo polarity"), "demo polarity", seed_of(&cfg)).map_err(Failure::Run)?;
            run.write("config.toml", &c).map_err(Failure::Run)?;
            let status = demos::polarity(&cfg, &mut run).map_err(Failure::Run)?;
            let path = run.finish(status.label()).map_err(Failure::Run)?;
            eprintln!("run directory: {}", path.display());
            Ok(status)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(a) => single("validate", a, commands::validate),
        Command::Flow(a) => single("flow", a, commands::flow),
        Command::Lambda(a) => single("lambda", a, commands::lambda),
        Command::Simulate(a) => single("simulate", a, commands::simulate),
        Command::Reference(a) => single("reference", a, commands::reference),
        Command::Compare(a) => single("compare", a, commands::compare),
        Command::Demo { which, overrides } => demo(*which, overrides),
    };
    match result {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
