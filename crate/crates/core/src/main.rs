use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corner_scatter::harness::{run, Context, ExperimentConfig, Status};

#[derive(Parser)]
#[command(name = "corner-scatter", version, about = "Scattering experiments on lattice corner models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments of a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (falls back to CORNER_SCATTER_THREADS).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse a config and check its preconditions without solving.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig, u8> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("config error: {e}");
        2
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { config } => match load(&config) {
            Err(c) => c,
            Ok(cfg) => match Context::new(cfg) {
                Ok(ctx) => {
                    println!(
                        "ok: dimension {}, reflection time {}, grid {:?}",
                        ctx.model.dim(),
                        ctx.reflection_time,
                        ctx.times
                    );
                    0
                }
                Err(e) => {
                    eprintln!("config error: {e}");
                    2
                }
            },
        },
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let threads = threads.or_else(|| {
                std::env::var("CORNER_SCATTER_THREADS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            });
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("thread pool: {e}");
                }
            }
            match load(&config) {
                Err(c) => c,
                Ok(mut cfg) => {
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    let out = out
                        .or_else(|| cfg.output.clone())
                        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
                    match run(cfg, &out) {
                        Ok(o) => {
                            for r in &o.reports {
                                let status = match r.status {
                                    Status::Pass => "PASS",
                                    Status::Fail => "FAIL",
                                    Status::ConfigError => "CONFIG-ERROR",
                                    Status::NumericalError => "NUMERICAL-ERROR",
                                };
                                println!("{:<16} {status}", r.experiment.name());
                                for c in &r.checks {
                                    println!(
                                        "  {:<44} {:<4} {:.3e} (limit {:.3e})",
                                        c.name,
                                        if c.pass { "ok" } else { "FAIL" },
                                        c.value,
                                        c.limit
                                    );
                                }
                                if let Some(e) = &r.error {
                                    println!("  error: {e}");
                                }
                            }
                            if o.reports.is_empty() {
                                eprintln!("config rejected before any experiment ran");
                            } else {
                                println!("outputs in {}", o.out_dir.display());
                            }
                            o.exit_code as u8
                        }
                        Err(e) => {
                            eprintln!("error: {e}");
                            if e.is_numerical() {
                                3
                            } else {
                                2
                            }
                        }
                    }
                }
            }
        }
    };
    ExitCode::from(code)
}
