use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nhmc_cli::{cmd_compare, cmd_oracle, cmd_run, cmd_sweep, exit_code, load_config, ConfigError, Method, Overrides, SweepAxis};

#[derive(Parser)]
#[command(name = "nhmc", version, about = "Noise-space HMC experiments for inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Number of chains (paired seeds for `compare`); overrides the config.
    #[arg(long, global = true)]
    chains: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sampler and write samples, trace and metrics.
    Run { config: PathBuf },
    /// Repeat the run over values of one hyperparameter.
    Sweep {
        config: PathBuf,
        /// One of delta, L, gamma, decoder_steps, K.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write grid and conjugate posterior oracles.
    Oracle { config: PathBuf },
    /// Paired-seed comparison of samplers and the MAP baseline.
    Compare {
        config: PathBuf,
        /// Comma-separated subset of nhmc, nanhmc, ula, mala, map.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let overrides = Overrides { seed: cli.seed, chains: cli.chains };
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config, &overrides)?;
            let digest = cmd_run(&cfg, &cli.out)?;
            println!("manifest sha256 {digest}");
        }
        Command::Sweep { config, axis, values } => {
            let cfg = load_config(&config, &overrides)?;
            let axis = SweepAxis::parse(&axis)
                .ok_or_else(|| ConfigError(format!("--axis: unknown axis `{axis}` (expected delta, L, gamma, decoder_steps or K)")))?;
            let digest = cmd_sweep(&cfg, axis, &values, &cli.out)?;
            println!("manifest sha256 {digest}");
        }
        Command::Oracle { config } => {
            let cfg = load_config(&config, &overrides)?;
            let digest = cmd_oracle(&cfg, &cli.out)?;
            println!("manifest sha256 {digest}");
        }
        Command::Compare { config, methods } => {
            let cfg = load_config(&config, &overrides)?;
            let methods = methods
                .iter()
                .map(|m| Method::parse(m).ok_or_else(|| ConfigError(format!("--methods: unknown method `{m}`"))))
                .collect::<Result<Vec<_>, _>>()?;
            for s in cmd_compare(&cfg, &methods, &cli.out)? {
                println!("{:<7} success {}/{} ({:.2})", s.method.name(), s.successes, s.chains, s.success_rate);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("NHMC_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
