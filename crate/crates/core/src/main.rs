use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ergolab::runner::{self, exit_code, Manifest, RunConfig, CONFIG_SCHEMA};
use ergolab::Error;

#[derive(Parser)]
#[command(name = "ergolab", version, about = "Ergodic stochastic control laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured scenario and write its result bundle.
    Run {
        /// TOML configuration file; optional with --replay.
        config: Option<PathBuf>,
        /// Comma-separated stages: check, simulate, adjoint, ergodicity, ebsde, smp, all.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
        /// Bundle directory; defaults to $ERGOLAB_OUT/<scenario>-seed<N>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-run a bundle manifest and verify every file byte for byte.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Print the configuration schema.
    Schema,
    /// List the registered scenarios.
    Scenarios,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn execute(command: Command) -> ergolab::Result<i32> {
    match command {
        Command::Schema => {
            print!("{CONFIG_SCHEMA}");
            Ok(0)
        }
        Command::Scenarios => {
            for s in runner::scenario::SCENARIOS {
                println!("{s}");
            }
            Ok(0)
        }
        Command::Run { config, stages, seed, threads, out, replay } => {
            if let Some(k) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global()
                    .map_err(|e| Error::Config(format!("cannot start {k} threads: {e}")))?;
            }
            let manifest = replay.as_deref().map(Manifest::load).transpose()?;
            let mut cfg = match (&manifest, config) {
                (Some(m), _) => m.config.clone(),
                (None, Some(path)) => RunConfig::load(&path)?,
                (None, None) => return Err(Error::Config("a config file or --replay manifest is required".into())),
            };
            if manifest.is_none() {
                if let Some(s) = stages {
                    cfg.stages = Some(s.into_iter().filter(|s| !s.is_empty()).collect());
                }
                if let Some(s) = seed {
                    cfg.seed = s;
                }
            } else if stages.is_some() || seed.is_some() {
                return Err(Error::Config("--stages and --seed cannot override a replayed manifest".into()));
            }
            let dir = out.unwrap_or_else(|| {
                let root = std::env::var_os("ERGOLAB_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ergolab-out"));
                root.join(format!("{}-seed{}", cfg.scenario, cfg.seed))
            });
            let outcome = match &manifest {
                Some(m) => runner::replay(m, &dir)?,
                None => runner::run(&cfg, &dir)?,
            };
            print!("{}", outcome.summary_table());
            if manifest.is_some() {
                println!("replay identical: {} files", outcome.manifest.files.len());
            }
            println!("bundle: {}", outcome.dir.display());
            Ok(outcome.status.exit_code())
        }
    }
}
