use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crossloc::app::{self, Outcome};
use crossloc::config::ExperimentConfig;
use crossloc::tracker::Mode;

/// Camera localization in a LiDAR map with cross-modal flow consistency.
///
/// Exit codes: 0 complete, 2 tracking interrupted, 1 usage or I/O error.
/// Log verbosity follows CROSSLOC_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "crossloc", version)]
struct Cli {
    /// Suppress the summary printed on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic map, trajectory and VO oracle.
    Synth {
        /// TOML config or a manifest.json from a previous run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Derive every component seed from this value.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track a scenario directory written by `synth`.
    Track {
        /// Scenario directory.
        scenario: PathBuf,
        /// Overrides the config recorded in the scenario manifest.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an estimated KITTI trajectory against ground truth.
    Eval {
        estimate: PathBuf,
        ground_truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        rpe_delta: usize,
        /// Rigidly align the estimate before computing ATE.
        #[arg(long)]
        align: bool,
    },
    /// Compare tracking modes on paired scenarios.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump the depth map and oracle flows of one frame.
    DebugFrame {
        scenario: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn optional_config(path: Option<&Path>, seed: Option<u64>) -> crossloc::Result<Option<ExperimentConfig>> {
    if path.is_none() && seed.is_none() {
        return Ok(None);
    }
    app::load_config(path, seed).map(Some)
}

fn execute(cli: Cli) -> crossloc::Result<Outcome> {
    let quiet = cli.quiet;
    match cli.cmd {
        Cmd::Synth { config, out, seed } => {
            let cfg = app::load_config(config.as_deref(), seed)?;
            let o = app::synth(&cfg, &out)?;
            if !quiet {
                println!("wrote scenario to {}", out.display());
            }
            Ok(o)
        }
        Cmd::Track {
            scenario,
            config,
            out,
            mode,
            seed,
        } => {
            let cfg = optional_config(config.as_deref(), seed)?;
            let o = app::track(cfg.as_ref(), &scenario, &out, mode)?;
            if !quiet {
                let n = app::read_trajectory(&out.join(app::TRAJECTORY_FILE))?.len();
                println!("tracked {n} frames -> {}", out.display());
                if o == Outcome::Interrupted {
                    println!("tracking interrupted");
                }
            }
            Ok(o)
        }
        Cmd::Eval {
            estimate,
            ground_truth,
            out,
            rpe_delta,
            align,
        } => {
            let opts = crossloc::eval::EvalOptions {
                align,
                rpe_delta,
                ..Default::default()
            };
            if rpe_delta == 0 {
                return Err(crossloc::Error::Config {
                    field: "rpe-delta".into(),
                    msg: "must be >= 1".into(),
                });
            }
            let (report, o) = app::eval(&estimate, &ground_truth, &opts, out.as_deref())?;
            if !quiet {
                print!("{}", report.text());
            }
            Ok(o)
        }
        Cmd::Ablate { config, out, seed } => {
            let cfg = app::load_config(config.as_deref(), seed)?;
            let (rows, o) = app::ablate(&cfg, &out)?;
            if !quiet {
                println!("{}", app::ABLATION_COLUMNS);
                for r in &rows {
                    println!("{}", r.csv_row());
                }
            }
            Ok(o)
        }
        Cmd::DebugFrame {
            scenario,
            frame,
            config,
            out,
        } => {
            let cfg = optional_config(config.as_deref(), None)?;
            let files = app::debug_frame(cfg.as_ref(), &scenario, frame, &out)?;
            if !quiet {
                for f in files {
                    println!("{}", f.display());
                }
            }
            Ok(Outcome::Complete)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSLOC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli) {
        Ok(o) => ExitCode::from(o.exit_code() as u8),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
