use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phantom::runner::sweep::parse_seeds;
use phantom::runner::{self, Axis, ExperimentConfig, Figure};

/// Toy experiments on sharpness-aware minimization and feature diversity.
///
/// Outputs go to the config's `out_dir`, else `$PHANTOM_OUT/<name>`, else
/// `runs/<name>`.
#[derive(Parser)]
#[command(name = "phantom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the Cartesian product of the axes for every seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`; repeat for more axes.
        #[arg(long = "axis", value_name = "KEY=V1,V2")]
        axes: Vec<String>,
        #[arg(long, default_value = "0,1,2,3")]
        seeds: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one figure table from every run under a directory.
    Emit {
        #[arg(long)]
        figure: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant and closed-form checks; exits nonzero on failure.
    Verify {
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(config: &Path, set: &[String]) -> phantom::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(config)?;
    let overrides = set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| phantom::Error::Config(format!("override {kv:?} is not key=value")))
        })
        .collect::<phantom::Result<Vec<_>>>()?;
    cfg.with_overrides(&overrides)
}

fn execute(cmd: Command) -> phantom::Result<bool> {
    match cmd {
        Command::Run { config, set, out } => {
            let cfg = load(&config, &set)?;
            let dir = out.unwrap_or_else(|| cfg.resolved_out_dir());
            let m = runner::run_in(&cfg, &dir)?;
            println!("wrote {}", dir.display());
            println!(
                "train_error {} easy_probe_error {} hard_probe_error {} ({:.1}s)",
                m.metrics.train_error,
                m.metrics.easy_probe_error,
                m.metrics.hard_probe_error,
                m.wall_time_s
            );
            Ok(true)
        }
        Command::Sweep {
            config,
            axes,
            seeds,
            workers,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axes = axes
                .iter()
                .map(|a| Axis::parse(a))
                .collect::<phantom::Result<Vec<_>>>()?;
            let seeds = parse_seeds(&seeds)?;
            let root = out.unwrap_or_else(|| cfg.resolved_out_dir());
            let result = runner::sweep(&cfg, &axes, &seeds, workers, &root)?;
            for cell in result.failures() {
                eprintln!(
                    "cell {} failed: {}",
                    cell.dir.display(),
                    cell.error.as_deref().unwrap_or_default()
                );
            }
            println!(
                "{} runs, {} failed; aggregate in {}",
                result.cells.len(),
                result.failures().count(),
                root.join(runner::sweep::AGGREGATE_FILE).display()
            );
            Ok(result.failures().count() == 0)
        }
        Command::Emit { figure, input, out } => {
            let figure: Figure = figure.parse()?;
            let path = runner::emit_figure_data(&input, figure, &out)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Verify { instances, seed } => {
            let report = runner::verify(instances, seed)?;
            print!("{report}");
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
