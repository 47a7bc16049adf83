use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};

use manhattan_rotation::app::{
    cmd_estimate, cmd_eval, cmd_fit_normalizer, cmd_segment, cmd_synth, PipelineConfig,
    RotationSource, SynthFile,
};
use manhattan_rotation::Result;

/// Camera rotation from surface normals under a Manhattan-world prior.
#[derive(Parser)]
#[command(name = "mwrot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a rotation trajectory from a manifest of normal maps.
    Estimate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_traj: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        /// Disable multi-frame smoothing regardless of the config.
        #[arg(long)]
        single_frame: bool,
    },
    /// Generate a synthetic sequence.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit the normaliser spline table.
    FitNormalizer {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a ground mask (PGM) for one frame.
    Segment {
        #[arg(long)]
        frame: PathBuf,
        /// Trajectory to take the rotation from; without it the frame is
        /// estimated on its own.
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        threshold_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Estimate {
            manifest,
            config,
            out_traj,
            out_csv,
            single_frame,
        } => {
            let mut cfg = PipelineConfig::read(&config)?;
            cfg.single_frame_only |= single_frame;
            let out = cmd_estimate(&manifest, &cfg, &out_traj, &out_csv)?;
            println!(
                "{} poses written, {} frames dropped",
                out.trajectory.len(),
                out.dropped()
            );
        }
        Command::Synth { spec, out_dir } => {
            let manifest = cmd_synth(&SynthFile::read(&spec)?, &out_dir)?;
            println!("{}", manifest.display());
        }
        Command::Eval { est, gt, csv } => {
            println!("{}", cmd_eval(&est, &gt, csv.as_deref())?);
        }
        Command::FitNormalizer { out } => {
            let spline = cmd_fit_normalizer(&out)?;
            println!("{} knots written to {}", spline.knots().len(), out.display());
        }
        Command::Segment {
            frame,
            traj,
            index,
            threshold_deg,
            out,
        } => {
            let source = match &traj {
                Some(path) => RotationSource::Trajectory { path, index },
                None => RotationSource::SingleFrame,
            };
            let mask = cmd_segment(&frame, source, threshold_deg, &out)?;
            println!("{} of {} pixels marked ground", mask.count(), mask.width() * mask.height());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
