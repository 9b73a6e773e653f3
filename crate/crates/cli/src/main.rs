use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use l2r::harness::{evaluate, run_pipeline, write_report, EvalOptions, HarnessError, PipelineConfig, StageStatus};

#[derive(Parser)]
#[command(name = "l2r-pipeline", about = "Train, adapt and evaluate the latent-space racing agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, evaluate on the training track and write the report.
    Run {
        config: PathBuf,
        /// Recompute stages even when cached.
        #[arg(long)]
        force: bool,
        /// Override the global seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the stored agent; adapts first on tracks it has not seen.
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        track_seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        laps: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Drive every segment at the initial target speed.
        #[arg(long)]
        no_adapt: bool,
        /// Disable the correction policy.
        #[arg(long)]
        no_correction: bool,
    },
    /// Summarize an artifact directory into `<dir>/report`.
    Report { dir: PathBuf },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<PipelineConfig, HarnessError> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, force, seed } => {
            let cfg = load(&config, seed)?;
            let run = run_pipeline(&cfg, force)?;
            for (stage, status) in &run.stages {
                let s = match status {
                    StageStatus::Ran => "ran",
                    StageStatus::Cached => "cached",
                };
                println!("{stage:<16} {s}");
            }
            let m = &run.metrics;
            println!(
                "success {:.3}  avg speed {:.2} km/h  off-road {}  laps {}  ({:.1}s)",
                m.success_rate, m.avg_speed, m.off_road_events, m.laps_completed, m.wall_time
            );
            println!("artifacts in {}", cfg.artifact_dir.display());
        }
        Command::Evaluate {
            config,
            track_seed,
            episodes,
            laps,
            seed,
            no_adapt,
            no_correction,
        } => {
            let cfg = load(&config, seed)?;
            let opts = EvalOptions {
                track_seed: track_seed.unwrap_or(cfg.track_seed),
                episodes: episodes.unwrap_or(cfg.eval.episodes),
                laps: laps.unwrap_or(cfg.eval.laps),
                adapted: !no_adapt,
                corrections: !no_correction,
            };
            let out = evaluate(&cfg, &opts)?;
            let m = &out.metrics;
            println!("{}", out.label);
            println!("success_rate {:.3}", m.success_rate);
            println!("avg_speed_kmh {:.2}", m.avg_speed);
            println!("off_road_events {}", m.off_road_events);
            println!("laps_completed {}", m.laps_completed);
            println!("wall_time_s {:.1}", m.wall_time);
        }
        Command::Report { dir } => {
            let r = write_report(&dir)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            for f in &r.files {
                println!("{}", dir.join("report").join(f).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
