//! Grid experiments: per-cell training, localized testing in full-volume
//! coordinates, run directories and the comparison report.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::dataset::{cache_root_from_env, load_or_generate, Case, Dataset, DatasetError};
use super::infer::{infer, InferConfig};
use super::localize::{contains, localize, paste, region_origin, train_localizer, FixedMask, UnetLocalizer, COARSE_FACTOR};
use super::train::{evaluate_regions, train, TrainCase, TrainConfig, TrainError, TrainHooks};
use crate::config::{Cell, ExperimentConfig, LocalizationMode};
use crate::metrics::{evaluate_case, RunMeta};
use crate::model::checkpoint::{encode_checkpoint, file_hash};
use crate::model::{build_topology, load_checkpoint, save_checkpoint, ModelError, ModelState, TopologyConfig};
use crate::preprocess::downsample_label;
use crate::report::{self, CaseRow, CellStatus, CellSummary, ReportError};
use crate::rng;
use crate::volume::{LabelVolume, Volume};

/// Hash of the library sources this binary was built from.
pub const SOURCE_HASH: &str = env!("HFUNET_SOURCE_HASH");

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, Self::Train(TrainError::Diverged { .. }))
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(io_at(path))
}

/// Cache root: `$HFUNET_CACHE`, else `<output>/cache`.
pub fn cache_root(cfg: &ExperimentConfig) -> PathBuf {
    cache_root_from_env().unwrap_or_else(|| cfg.output.join("cache"))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    Ok(load_or_generate(&cfg.data, Some(&cache_root(cfg)))?)
}

/// Config reproducing exactly one cell.
pub fn cell_config(cfg: &ExperimentConfig, cell: &Cell) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.topology.names = vec![cell.topology.name()];
    c.topology.alpha = vec![cell.topology.alpha];
    c.topology.attention = vec![cell.topology.attention];
    c.topology.seeds = Some(vec![cell.seed]);
    c
}

/// Region locator shared by training-region selection and testing.
pub enum Locator {
    Oracle,
    Unet(UnetLocalizer),
}

impl Locator {
    /// Region origin for a case; the oracle centers on the label centroid.
    fn origin(&self, case: &Case, crop: usize) -> Result<[isize; 3], ModelError> {
        match self {
            Self::Oracle => {
                let coarse =
                    downsample_label(&case.label, COARSE_FACTOR).map_err(|e| ModelError::Input(e.to_string()))?;
                Ok(localize(&case.image, &FixedMask(coarse), crop)?.origin)
            }
            Self::Unet(u) => Ok(localize(&case.image, u, crop)?.origin),
        }
    }
}

fn localizer_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let e = &cfg.eval;
    TrainConfig {
        epochs: e.localizer_epochs,
        steps_per_epoch: e.localizer_steps_per_epoch,
        batch_size: e.localizer_batch,
        lr_step_iterations: e.localizer_steps_per_epoch,
        cold_start_epochs: 0,
        seed: rng::derive_seed(seed, "localizer"),
        ..cfg.train.clone()
    }
}

/// Trains the localizer for `seed`, or reads it from `<output>/localizers/`
/// when an identical one was trained before.
pub fn localizer_for(cfg: &ExperimentConfig, seed: u64, data: &Dataset) -> Result<Locator, ExperimentError> {
    if cfg.eval.localization == LocalizationMode::Oracle {
        return Ok(Locator::Oracle);
    }
    let tc = localizer_train_config(cfg, seed);
    let mut h = Sha256::new();
    h.update(cfg.data.content_hash());
    h.update(serde_json::to_vec(&tc).expect("train config serializes"));
    h.update(SOURCE_HASH);
    let key = hex::encode(&h.finalize()[..12]);
    let dir = cfg.output.join("localizers");
    let path = dir.join(format!("{key}.hfck"));
    if let Ok(model) = load_checkpoint(&path, None) {
        return Ok(Locator::Unet(UnetLocalizer { model }));
    }
    let cases: Vec<(Volume, LabelVolume)> = data.train.iter().map(|c| (c.image.clone(), c.label.clone())).collect();
    let loc = train_localizer(&cases, &tc, tc.seed)?;
    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
    let tmp = dir.join(format!("{key}.{}.tmp", std::process::id()));
    write_file(&tmp, encode_checkpoint(&loc.model))?;
    fs::rename(&tmp, &path).map_err(io_at(&path))?;
    Ok(Locator::Unet(loc))
}

/// Training region of a case: the localized crop when it holds the whole
/// organ, else the crop centered on the label centroid.
fn training_region(case: &Case, loc: &Locator, crop: usize, data: &crate::pipeline::dataset::DataConfig) -> Result<(TrainCase, bool), ExperimentError> {
    let mut origin = loc.origin(case, crop)?;
    let mut fallback = false;
    if !contains(&case.label, origin, crop) {
        if let Some(c) = case.label.centroid() {
            origin = region_origin(c.map(|v| v.round() as usize), crop);
            fallback = true;
        }
    }
    let image = case.image.crop(origin, [crop; 3], 0.0).map_err(|e| ModelError::Input(e.to_string()))?;
    let label = case.label.crop(origin, [crop; 3]).map_err(|e| ModelError::Input(e.to_string()))?;
    Ok((TrainCase::new(case.id.clone(), image, label, data.sigma, data.truncation())?, fallback))
}

/// Localizes, segments and scores one test case in full-volume coordinates.
pub fn test_case(model: &ModelState, case: &Case, loc: &Locator, cfg: &ExperimentConfig) -> Result<CaseRow, ExperimentError> {
    let crop = cfg.train.crop_size;
    let origin = loc.origin(case, crop)?;
    let region = case.image.crop(origin, [crop; 3], 0.0).map_err(|e| ModelError::Input(e.to_string()))?;
    let icfg = InferConfig { batch: cfg.eval.infer_batch, largest_component: cfg.eval.largest_component };
    let out = infer(model, &region, &icfg)?;
    let full = paste(&out.mask, origin, *case.label.geometry());
    let m = evaluate_case(&case.id, &case.label, &full, case.label.geometry().spacing_f64());
    Ok(CaseRow {
        case: m.case,
        dsc: m.dsc.is_finite().then_some(m.dsc),
        asd_mm: m.asd_mm,
        sen: m.sen,
        ppv: m.ppv,
        contained: contains(&case.label, origin, crop),
    })
}

fn write_cases_csv(path: &Path, rows: &[CaseRow]) -> Result<(), ExperimentError> {
    let mut s = String::from("case,dsc,asd_mm,sen,ppv,contained\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.case, opt(r.dsc), opt(r.asd_mm), opt(r.sen), opt(r.ppv), r.contained));
    }
    write_file(path, s)
}

fn write_loss_plot(dir: &Path, steps: &[super::train::StepRecord]) -> Result<(), ExperimentError> {
    let pts = |f: fn(&super::train::StepRecord) -> f64| steps.iter().map(|s| (s.step as f64, f(s))).collect::<Vec<_>>();
    let svg = report::line_plot_svg(
        "training loss",
        &[
            ("total", pts(|s| s.loss.total)),
            ("l_cls", pts(|s| s.loss.l_cls)),
            ("l_reg", pts(|s| s.loss.l_reg)),
            ("l_tcl", pts(|s| s.loss.l_tcl)),
        ],
        true,
    );
    write_file(&dir.join("loss.svg"), svg)
}

/// Trains and tests one cell inside `dir`, writing `config.toml`,
/// `build.json`, `loss.csv`, `loss.svg`, `model.hfck`, `metrics.csv` and
/// `summary.json`.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, data: &Dataset, dir: &Path) -> Result<CellSummary, ExperimentError> {
    let t0 = Instant::now();
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    write_file(&dir.join("config.toml"), cell_config(cfg, cell).to_toml())?;
    let build = serde_json::json!({ "source_sha256": SOURCE_HASH, "version": env!("CARGO_PKG_VERSION") });
    write_file(&dir.join("build.json"), serde_json::to_vec_pretty(&build).expect("json"))?;

    let loc = localizer_for(cfg, cell.seed, data)?;
    let crop = cfg.train.crop_size;
    let mut fallbacks = Vec::new();
    let train_cases = data
        .train
        .iter()
        .map(|c| {
            let (tc, fb) = training_region(c, &loc, crop, &cfg.data)?;
            if fb {
                fallbacks.push(c.id.clone());
            }
            Ok(tc)
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    if !fallbacks.is_empty() {
        log::info!("{}: centroid crop for {}", cell.id(), fallbacks.join(" "));
    }
    let val_cases = data
        .val
        .iter()
        .map(|c| training_region(c, &loc, crop, &cfg.data).map(|r| r.0))
        .collect::<Result<Vec<_>, _>>()?;

    let tcfg = TrainConfig { seed: cell.seed, ..cfg.train.clone() };
    let model = build_topology(&cell.topology, rng::derive_seed(cell.seed, "model"))?;
    let loss_path = dir.join("loss.csv");
    let mut loss = BufWriter::new(File::create(&loss_path).map_err(io_at(&loss_path))?);
    let every = cfg.eval.validate_every;
    let mut hooks = TrainHooks {
        loss_csv: Some(&mut loss),
        validation: (every > 0 && !val_cases.is_empty()).then_some(val_cases.as_slice()),
        validate_every: every,
        on_epoch_end: None,
    };
    let result = train(model, &train_cases, &tcfg, &mut hooks);
    drop(hooks);
    drop(loss);
    let (model, hist) = match result {
        Ok(r) => r,
        Err(TrainError::Diverged { step, source, last_good, history }) => {
            save_checkpoint(dir.join("last_good.hfck"), &last_good)?;
            write_loss_plot(dir, &history.steps)?;
            return Err(TrainError::Diverged { step, source, last_good, history }.into());
        }
        Err(e) => return Err(e.into()),
    };
    write_loss_plot(dir, &hist.steps)?;
    if !hist.validation.is_empty() {
        let mut s = String::from("epoch,dsc_mean,asd_mean\n");
        for (e, r) in &hist.validation {
            s.push_str(&format!("{e},{:.6},{:.6}\n", r.dsc.mean, r.asd_mm.mean));
        }
        write_file(&dir.join("validation.csv"), s)?;
    }
    let ckpt = dir.join("model.hfck");
    save_checkpoint(&ckpt, &model)?;
    let checkpoint_sha256 = file_hash(&ckpt).map_err(io_at(&ckpt))?;

    let fit = evaluate_regions(&model, &train_cases, &RunMeta::default())?;
    let rows = data.test.iter().map(|c| test_case(&model, c, &loc, cfg)).collect::<Result<Vec<_>, _>>()?;
    write_cases_csv(&dir.join("metrics.csv"), &rows)?;
    let meta = RunMeta { topology: cell.topology.name(), seed: cell.seed, checkpoint_hash: checkpoint_sha256.clone() };
    let summary = CellSummary {
        id: cell.id(),
        topology: cell.topology.clone(),
        seed: meta.seed,
        status: CellStatus::Ok,
        error: None,
        cases: rows,
        train_dsc: Some(fit.dsc.mean),
        train_asd_mm: Some(fit.asd_mm.mean),
        steps: hist.steps.len(),
        checkpoint_sha256: Some(checkpoint_sha256),
        param_checksum: Some(model.store.checksum_all()),
        seconds: t0.elapsed().as_secs_f64(),
    };
    write_summary(dir, &summary)?;
    Ok(summary)
}

pub fn write_summary(dir: &Path, s: &CellSummary) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    write_file(&dir.join(report::SUMMARY_FILE), serde_json::to_vec_pretty(s).expect("summary serializes"))
}

/// Runs a cell and records a failure summary instead of propagating errors.
pub fn run_cell_recorded(cfg: &ExperimentConfig, cell: &Cell, data: &Dataset, dir: &Path) -> CellSummary {
    match run_cell(cfg, cell, data, dir) {
        Ok(s) => s,
        Err(e) => {
            let status = if e.is_divergence() { CellStatus::Diverged } else { CellStatus::Failed };
            log::warn!("cell {} {}: {e}", cell.id(), status.as_str());
            let s = CellSummary::failed(cell.id(), cell.topology.clone(), cell.seed, status, e.to_string());
            if let Err(w) = write_summary(dir, &s) {
                log::warn!("cell {}: could not record failure: {w}", cell.id());
            }
            s
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub cells: Vec<CellSummary>,
    pub report_files: Vec<PathBuf>,
}

pub fn cell_dir(cfg: &ExperimentConfig, cell: &Cell) -> PathBuf {
    cfg.output.join(cell.id())
}

/// Runs every cell in-process, then writes the report into `output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    let cells = cfg.cells().map_err(ExperimentError::Config)?;
    fs::create_dir_all(&cfg.output).map_err(io_at(&cfg.output))?;
    write_file(&cfg.output.join("experiment.toml"), cfg.to_toml())?;
    let data = load_dataset(cfg)?;
    let mut done = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        log::info!("cell {}/{}: {}", i + 1, cells.len(), cell.id());
        let s = run_cell_recorded(cfg, cell, &data, &cell_dir(cfg, cell));
        log::info!("cell {} {} dsc {:.4} asd {:.3}", s.id, s.status.as_str(), s.dsc().mean, s.asd().mean);
        done.push(s);
    }
    let report_files = report::write_report(&done, &cfg.output.join("table.csv"))?;
    Ok(ExperimentOutcome { cells: done, report_files })
}

/// Topology of a checkpoint, for commands that only need its shape.
pub fn checkpoint_topology(path: &Path) -> Result<TopologyConfig, ModelError> {
    Ok(load_checkpoint(path, None)?.config().clone())
}
