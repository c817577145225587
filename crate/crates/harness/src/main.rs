use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irs_harness::{commands, ExperimentSpec, Result};

/// IRS-assisted uplink channel estimation experiments.
#[derive(Parser)]
#[command(name = "irs-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Spec file (TOML) overriding a built-in scenario.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory; defaults to the spec's `experiment.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate channel and observation datasets.
    Generate(Common),
    /// Train the learned estimators at every sweep SNR.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate NMSE, spectral efficiency and timing over the SNR sweep.
    Sweep(Common),
    /// Compare reference provenances and array sizes.
    AblateRef(Common),
    /// Time single-CSI inference of every estimator.
    Bench(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (common, stage): (&Common, &str) = match &cli.command {
        Command::Generate(c) => (c, commands::GENERATE),
        Command::Train { common, .. } => (common, commands::TRAIN),
        Command::Sweep(c) => (c, commands::SWEEP),
        Command::AblateRef(c) => (c, commands::ABLATE),
        Command::Bench(c) => (c, commands::BENCH),
    };
    let spec = ExperimentSpec::load(&common.spec)?;
    let out = common.out.clone().unwrap_or_else(|| spec.experiment.output_dir.clone());
    let seed = common.seed;
    log::info!("{stage}: scenario {}, seed {seed}, output {}", spec.scenario, out.display());
    match cli.command {
        Command::Generate(_) => {
            commands::generate(&spec, &out, seed)?;
        }
        Command::Train { resume, .. } => {
            commands::train(&spec, &out, seed, resume)?;
        }
        Command::Sweep(_) => {
            for r in commands::sweep(&spec, &out, seed)? {
                println!(
                    "{:>6} dB  {:<10} nmse {:.4e}  se {:.4}",
                    r.snr_db, r.method, r.mean_nmse, r.mean_se_bps_hz
                );
            }
        }
        Command::AblateRef(_) => {
            for r in commands::ablate(&spec, &out, seed)? {
                println!("M={} N={} {:<10} nmse {:.4e}", r.m, r.n, r.provenance, r.mean_nmse);
            }
        }
        Command::Bench(_) => {
            for r in commands::bench(&spec, &out, seed)? {
                println!("run {} {:<10} {:.5} ms (sd {:.5})", r.run, r.method, r.mean_ms, r.std_ms);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
