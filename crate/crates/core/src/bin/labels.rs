use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hfunet::cli::{self, Failure};
use hfunet::contour::{heatmap_stack, stack_to_volume, DEFAULT_SIGMA};
use hfunet::volume::{read_label, write_volume};

#[derive(Parser)]
#[command(name = "labels", version, about = "Training targets derived from label volumes")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-slice Gaussian contour heatmaps of a binary label volume.
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        /// Support radius; defaults to sigma.
        #[arg(long)]
        truncation: Option<f64>,
    },
}

fn main() -> ExitCode {
    let Cmd::Heatmap { input, out, sigma, truncation } = Args::parse().cmd;
    cli::run(|| {
        let label = read_label(&input).map_err(Failure::runtime)?;
        let stack = heatmap_stack(&label, sigma, truncation.unwrap_or(sigma)).map_err(Failure::config)?;
        let vol = stack_to_volume(&stack, *label.geometry());
        let max = vol.data().iter().copied().fold(0.0f32, f32::max);
        write_volume(&out, &vol).map_err(Failure::runtime)?;
        log::info!("wrote {} ({} slices, peak {max:.6})", out.display(), stack.len());
        Ok(())
    })
}
