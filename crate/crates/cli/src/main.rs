use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};
use wflab::pipeline::{self, ExperimentConfig, Method};
use wflab::WflabError;

#[derive(Parser, Debug)]
#[command(name = "wflab", version, about = "Wind field simulation and sparse-sensor extrapolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the reconstruction method.
    #[arg(long, global = true, value_parser = ["alm", "bpfa", "omp"])]
    method: Option<String>,

    /// Output directory.
    #[arg(long, global = true, default_value = "wflab-out")]
    out: PathBuf,

    /// Worker threads.
    #[arg(long, global = true, env = "WFLAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate the realization ensemble.
    Simulate,
    /// Assemble four BLWT face files into a field (config `blwt` section).
    Ingest,
    /// Draw the observation mask.
    Mask,
    /// Reconstruct missing records for every realization.
    Reconstruct,
    /// Spectra, correlation and coherence of truth vs reconstruction.
    Stats,
    /// Error tables, histograms and summary.
    Report,
}

fn exit_code(e: &WflabError) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn run(cli: &Cli) -> Result<(), WflabError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| WflabError::invalid(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(m) = &cli.method {
        config.method = m.parse::<Method>()?;
    }
    config.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Simulate => {
            let files = pipeline::cmd_simulate(&config, out)?;
            info!("wrote {} files", files.len());
        }
        Command::Ingest => {
            let b = pipeline::cmd_ingest(&config, out)?;
            info!("assembled {} samples at {} Hz", b.n_t, b.sampling_hz);
        }
        Command::Mask => {
            let m = pipeline::cmd_mask(&config, out)?;
            info!("{} of {} points observed", m.n_observed_points(), m.grid().n_points());
        }
        Command::Reconstruct => {
            let files = pipeline::cmd_reconstruct(&config, out)?;
            info!("wrote {} files", files.len());
        }
        Command::Stats => {
            let files = pipeline::cmd_stats(&config, out)?;
            info!("wrote {} files", files.len());
        }
        Command::Report => {
            let s = pipeline::cmd_report(&config, out)?;
            println!(
                "{}: median l1 {:.6}, mean hellinger {:.6}, spearman {}",
                s.method.name(),
                s.median_l1,
                s.mean_hellinger,
                s.spearman_error_variance.map_or("n/a".to_string(), |r| format!("{r:.4}"))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
