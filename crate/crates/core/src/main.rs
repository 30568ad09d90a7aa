use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use energy_storage::config::RunConfig;
use energy_storage::pipeline::{execute, sha256_file, Command, ManifestInputs, Run, RunDir};
use energy_storage::ConfigError;

/// Energy storage valuation under a hidden-regime price model.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter preset, overriding the configuration's.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reload a `field.bin` dump instead of solving.
    #[arg(long, global = true)]
    field: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Backward solve; writes value/policy CSV and a binary dump.
    Solve,
    /// Switching levels, their smooth fit and fit statistics.
    Extract,
    /// Mixed-derivative and non-parallelity reports.
    Check,
    /// Controlled sample paths under the smoothed levels.
    Simulate,
    /// Monte Carlo value of the policy against the grid value.
    Evaluate,
    /// Truth-mode price, regime and filter paths.
    FilterDemo,
    /// Every stage; stops if an admissibility margin is not positive.
    All,
}

impl Cmd {
    fn command(&self) -> Command {
        match self {
            Cmd::Solve => Command::Solve,
            Cmd::Extract => Command::Extract,
            Cmd::Check => Command::Check,
            Cmd::Simulate => Command::Simulate,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::FilterDemo => Command::FilterDemo,
            Cmd::All => Command::All,
        }
    }
}

fn load(cli: &Cli) -> Result<Run, ConfigError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &cli.preset {
        config.preset = Some(p.clone());
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.output_dir = o.clone();
    }
    Run::new(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let run = match load(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("invalid configuration: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("invalid configuration: --threads: must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot set up worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }

    let cmd = cli.command.command();
    let mut dir = match RunDir::create(&run.config.output_dir, cmd.as_str()) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("invalid configuration: output_dir: {}: {e}", run.config.output_dir.display());
            return ExitCode::from(2);
        }
    };
    log::info!("writing to {}", dir.path.display());

    let checksum = |p: &Option<PathBuf>| p.as_ref().and_then(|p| sha256_file(p).ok());
    let inputs = ManifestInputs {
        subcommand: cmd.as_str().to_string(),
        config_path: cli.config.clone(),
        config_sha256: checksum(&cli.config),
        field_path: cli.field.clone(),
        field_sha256: checksum(&cli.field),
        threads: rayon::current_num_threads(),
        resolved_config: run.config.clone(),
        params: run.params.clone(),
    };

    let result = execute(cmd, &run, &mut dir, cli.field.as_deref());
    let status = match &result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{} failed: {e}", cmd.as_str());
            let diag = serde_json::json!({ "subcommand": cmd.as_str(), "error": e.to_string(), "debug": format!("{e:?}") });
            if let Err(w) = dir.write_json("diagnostics.json", &diag) {
                eprintln!("could not write diagnostics: {w}");
            }
            ExitCode::FAILURE
        }
    };
    if let Err(e) = dir.write_manifest(&inputs) {
        eprintln!("could not write manifest: {e}");
        return ExitCode::FAILURE;
    }
    println!("{}", dir.path.display());
    status
}
