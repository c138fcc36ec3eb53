use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};

use clap::{Parser, Subcommand};

use hfunet::cli::{self, Failure};
use hfunet::config::{parse_config, ExperimentConfig};
use hfunet::features::dump_features;
use hfunet::model::load_checkpoint;
use hfunet::pipeline::dataset::CACHE_ENV;
use hfunet::pipeline::experiment::{self, cell_dir, ExperimentError};
use hfunet::pipeline::localize::{localize, paste, UnetLocalizer};
use hfunet::pipeline::{infer, InferConfig};
use hfunet::report::{self, CellStatus, CellSummary};
use hfunet::volume::{read_volume, write_label, write_volume};

#[derive(Parser)]
#[command(name = "hfunet", version, about = "Train, run and report hierarchically fused multi-task U-Nets")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every grid cell of a config in this process, then write the report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run the config's single cell without writing a report.
        #[arg(long, hide = true)]
        worker: bool,
    },
    /// Run every grid cell as a separate worker process, then write the report.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Concurrent workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Segment a volume with a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Region volume, or a full preprocessed volume with `--localizer`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output binary mask.
        #[arg(long)]
        out: PathBuf,
        /// Localizer checkpoint; the mask is pasted back into the full volume.
        #[arg(long)]
        localizer: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        crop: usize,
        /// Also write foreground probabilities.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Also write the regressed contour heatmap.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Keep every connected component.
        #[arg(long)]
        all_components: bool,
    },
    /// Rebuild the comparison table from finished run directories.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a channel mosaic of the fused features at one level.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        /// Region volume with square slices.
        #[arg(long = "in")]
        input: PathBuf,
        /// Level name (E2, B, D1, ...), index, or `top`.
        #[arg(long, default_value = "top")]
        level: String,
        /// Axial slice; defaults to the middle one.
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, output: Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = parse_config(path)?;
    if let Some(o) = output {
        cfg.output = o;
    }
    Ok(cfg)
}

fn experiment_failure(e: ExperimentError) -> Failure {
    match e {
        ExperimentError::Config(m) => Failure::config(m),
        e if e.is_divergence() => Failure::divergence(e),
        e => Failure::runtime(e),
    }
}

/// Exit status of a finished grid: divergence outranks other failures.
fn grid_outcome(cells: &[CellSummary]) -> Result<(), Failure> {
    let bad: Vec<String> = cells
        .iter()
        .filter(|c| c.status != CellStatus::Ok)
        .map(|c| format!("{} {}: {}", c.id, c.status.as_str(), c.error.as_deref().unwrap_or("")))
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    let mut f = if cells.iter().any(|c| c.status == CellStatus::Diverged) {
        Failure::divergence(format!("{} of {} cells did not finish", bad.len(), cells.len()))
    } else {
        Failure::runtime(format!("{} of {} cells failed", bad.len(), cells.len()))
    };
    f.details = bad;
    Err(f)
}

fn print_table(cells: &[CellSummary]) {
    for r in report::table_rows(cells) {
        log::info!(
            "{} ({}+{}) alpha {} dsc {:.4}±{:.4} asd {:.3}±{:.3} mm",
            r.method, r.fb.0, r.fb.1, r.alpha, r.dsc.mean, r.dsc.std, r.asd_mm.mean, r.asd_mm.std
        );
    }
}

fn train_cmd(config: &Path, output: Option<PathBuf>, worker: bool) -> Result<(), Failure> {
    let cfg = load_config(config, output)?;
    if worker {
        let cells = cfg.cells().map_err(Failure::config)?;
        let [cell] = cells.as_slice() else {
            return Err(Failure::config(format!("a worker config must hold one cell, found {}", cells.len())));
        };
        let data = experiment::load_dataset(&cfg).map_err(experiment_failure)?;
        let dir = cell_dir(&cfg, cell);
        return match experiment::run_cell(&cfg, cell, &data, &dir) {
            Ok(s) => {
                log::info!("{} dsc {:.4} asd {:.3}", s.id, s.dsc().mean, s.asd().mean);
                Ok(())
            }
            Err(e) => {
                let status = if e.is_divergence() { CellStatus::Diverged } else { CellStatus::Failed };
                let _ = experiment::write_summary(&dir, &CellSummary::failed(cell.id(), cell.topology.clone(), cell.seed, status, e.to_string()));
                Err(experiment_failure(e))
            }
        };
    }
    let out = experiment::run_experiment(&cfg).map_err(experiment_failure)?;
    print_table(&out.cells);
    for f in &out.report_files {
        log::info!("wrote {}", f.display());
    }
    grid_outcome(&out.cells)
}

fn sweep_cmd(config: &Path, output: Option<PathBuf>, jobs: usize) -> Result<(), Failure> {
    let cfg = load_config(config, output)?;
    let cells = cfg.cells().map_err(Failure::config)?;
    std::fs::create_dir_all(&cfg.output).map_err(Failure::runtime)?;
    std::fs::write(cfg.output.join("experiment.toml"), cfg.to_toml()).map_err(Failure::runtime)?;
    let cache = experiment::cache_root(&cfg);
    experiment::load_dataset(&cfg).map_err(experiment_failure)?;
    let exe = std::env::current_exe().map_err(Failure::runtime)?;
    let mut pending: VecDeque<_> = cells.iter().collect();
    let mut running: Vec<(Child, String)> = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs.max(1) {
            let Some(cell) = pending.pop_front() else { break };
            let dir = cell_dir(&cfg, cell);
            std::fs::create_dir_all(&dir).map_err(Failure::runtime)?;
            let cell_cfg = dir.join("config.toml");
            std::fs::write(&cell_cfg, experiment::cell_config(&cfg, cell).to_toml()).map_err(Failure::runtime)?;
            let _ = std::fs::remove_file(dir.join(report::SUMMARY_FILE));
            log::info!("start {}", cell.id());
            let child = Command::new(&exe)
                .args(["train", "--worker", "--config"])
                .arg(&cell_cfg)
                .env(CACHE_ENV, &cache)
                .stdout(std::fs::File::create(dir.join("worker.log")).map_err(Failure::runtime)?)
                .stderr(std::fs::File::create(dir.join("worker.err")).map_err(Failure::runtime)?)
                .spawn()
                .map_err(Failure::runtime)?;
            running.push((child, cell.id()));
        }
        let (mut child, id) = running.remove(0);
        let status = child.wait().map_err(Failure::runtime)?;
        log::info!("done {id}: {status}");
    }
    let summaries: Vec<CellSummary> = cells
        .iter()
        .map(|c| {
            let dir = cell_dir(&cfg, c);
            std::fs::read(dir.join(report::SUMMARY_FILE))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or_else(|| {
                    let err = std::fs::read_to_string(dir.join("worker.err")).unwrap_or_default();
                    CellSummary::failed(c.id(), c.topology.clone(), c.seed, CellStatus::Failed, format!("worker left no summary: {}", err.trim()))
                })
        })
        .collect();
    let files = report::write_report(&summaries, &cfg.output.join("table.csv")).map_err(Failure::runtime)?;
    print_table(&summaries);
    for f in &files {
        log::info!("wrote {}", f.display());
    }
    grid_outcome(&summaries)
}

#[allow(clippy::too_many_arguments)]
fn infer_cmd(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    localizer: Option<&Path>,
    crop: usize,
    probs: Option<&Path>,
    heatmap: Option<&Path>,
    all_components: bool,
) -> Result<(), Failure> {
    let model = load_checkpoint(ckpt, None).map_err(Failure::runtime)?;
    let vol = read_volume(input).map_err(Failure::runtime)?;
    let icfg = InferConfig { largest_component: !all_components, ..Default::default() };
    let (region, origin) = match localizer {
        Some(l) => {
            let loc = UnetLocalizer { model: load_checkpoint(l, None).map_err(Failure::runtime)? };
            let found = localize(&vol, &loc, crop).map_err(Failure::runtime)?;
            log::info!("organ center {:?}{}", found.center, if found.fallback { " (fallback)" } else { "" });
            (found.region, Some(found.origin))
        }
        None => (vol.clone(), None),
    };
    let res = infer(&model, &region, &icfg).map_err(Failure::runtime)?;
    let mask = match origin {
        Some(o) => paste(&res.mask, o, *vol.geometry()),
        None => res.mask,
    };
    log::info!("{} foreground voxels", mask.count());
    write_label(out, &mask).map_err(Failure::runtime)?;
    if let Some(p) = probs {
        write_volume(p, &res.probs).map_err(Failure::runtime)?;
    }
    if let Some(h) = heatmap {
        let hm = res.heatmap.ok_or_else(|| Failure::runtime(format!("{} has no contour branch", model.config().name())))?;
        write_volume(h, &hm).map_err(Failure::runtime)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    cli::run(|| match args.cmd {
        Cmd::Train { config, output, worker } => train_cmd(&config, output, worker),
        Cmd::Sweep { config, output, jobs } => sweep_cmd(&config, output, jobs),
        Cmd::Infer { ckpt, input, out, localizer, crop, probs, heatmap, all_components } => infer_cmd(
            &ckpt,
            &input,
            &out,
            localizer.as_deref(),
            crop,
            probs.as_deref(),
            heatmap.as_deref(),
            all_components,
        ),
        Cmd::Report { runs, out } => {
            let cells = report::collect_summaries(&runs).map_err(Failure::runtime)?;
            let files = report::write_report(&cells, &out).map_err(Failure::runtime)?;
            print_table(&cells);
            for f in files {
                log::info!("wrote {}", f.display());
            }
            Ok(())
        }
        Cmd::DumpFeatures { ckpt, input, level, slice, out } => {
            let region = read_volume(&input).map_err(Failure::runtime)?;
            let z = slice.unwrap_or(region.dims()[2] / 2);
            let (w, h) = dump_features(&ckpt, &region, z, &level, &out).map_err(|e| match e {
                hfunet::features::FeatureError::Level(m) | hfunet::features::FeatureError::Input(m) => Failure::config(m),
                e => Failure::runtime(e),
            })?;
            log::info!("wrote {} ({w}x{h})", out.display());
            Ok(())
        }
    })
}
