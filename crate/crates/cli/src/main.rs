//! `dff`: synthetic data generation, descriptor training, matching and
//! cascaded face alignment from the command line.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dff", version, about = "Dense face descriptors and cascaded 3D face alignment")]
pub struct Cli {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration entry, e.g. `--set epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic morphable model.
    GenModel {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic dataset of face images with ground truth records.
    GenData {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory; receives PNGs, records and `manifest.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a bank of random surface segmentations.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the descriptor network.
    TrainDff {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss and accuracy log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compute the descriptor map of one image.
    Extract {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match descriptors between two images.
    Match(MatchArgs),
    /// Learn the cascade of descent stages.
    LearnCascade {
        #[arg(long)]
        model: PathBuf,
        /// Seed for the perturbed training boxes
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align the face model to one image.
    Align {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        cascade: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Face box as `x,y,width,height`.
        #[arg(long = "box", value_parser = parse_box)]
        face_box: [f64; 4],
        /// Output prefix for `.txt`, `.dfft` and `.png`; defaults to the
        /// image path with an `.aligned` suffix.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the aligner on a labeled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        cascade: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Normalization::Bbox)]
        norm: Normalization,
        /// Key-value report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value_t = MatchMode::Sparse)]
    pub mode: MatchMode,
    /// Angle threshold in degrees; defaults to the configured value for the mode.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Source pixels for sparse matching, one `x y` per line; defaults to a
    /// stride-4 grid over the source face.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Visualization PNG.
    #[arg(long)]
    pub vis: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatchMode {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Normalization {
    Bbox,
    Interpupil,
}

fn parse_box(s: &str) -> Result<[f64; 4], String> {
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}`")))
        .collect::<Result<Vec<_>, _>>()?;
    let b: [f64; 4] = v.try_into().map_err(|_| "expected x,y,width,height".to_string())?;
    if !b.iter().all(|x| x.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
        return Err("box must be finite with positive width and height".into());
    }
    Ok(b)
}

/// Bad input discovered after argument parsing; exits like a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

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
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
