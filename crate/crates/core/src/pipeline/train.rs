//! Patch training with cold start and momentum SGD.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::infer::{infer, InferConfig};
use super::schedule::StepDecay;
use crate::autograd::{Grads, Tape, Var};
use crate::contour::{heatmap_stack, stack_to_volume, ContourError};
use crate::losses::{self, LossBreakdown, LossError, LossVars, LossWeights};
use crate::metrics::{evaluate_cases, MetricsReport, RunMeta};
use crate::model::{Group, ModelError, ModelState};
use crate::patches::{sample_training_patches, stacks_to_tensor, Patch};
use crate::preprocess::DataError;
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_steps")]
    pub steps_per_epoch: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr_start")]
    pub lr_start: f64,
    #[serde(default = "d_lr_end")]
    pub lr_end: f64,
    #[serde(default = "d_lr_step")]
    pub lr_step_iterations: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_cold")]
    pub cold_start_epochs: usize,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_crop")]
    pub crop_size: usize,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    /// Global L2 norm cap on each step's gradient; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
}

fn d_clip() -> f64 {
    1.0
}
fn d_epochs() -> usize {
    20
}
fn d_steps() -> usize {
    100
}
fn d_batch() -> usize {
    64
}
fn d_lr_start() -> f64 {
    0.01
}
fn d_lr_end() -> f64 {
    0.0001
}
fn d_lr_step() -> usize {
    200
}
fn d_momentum() -> f64 {
    0.9
}
fn d_cold() -> usize {
    1
}
fn d_crop() -> usize {
    64
}
fn d_patch() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            steps_per_epoch: d_steps(),
            batch_size: d_batch(),
            lr_start: d_lr_start(),
            lr_end: d_lr_end(),
            lr_step_iterations: d_lr_step(),
            momentum: d_momentum(),
            cold_start_epochs: d_cold(),
            weights: LossWeights::default(),
            seed: 0,
            crop_size: d_crop(),
            patch_size: d_patch(),
            grad_clip: d_clip(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay::new(self.lr_start, self.lr_end, self.lr_step_iterations, self.total_steps())
    }

    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            e.push("epochs, steps_per_epoch and batch_size must be positive".into());
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            e.push(format!("lr_end {} must be in (0, lr_start {}]", self.lr_end, self.lr_start));
        }
        if self.cold_start_epochs >= self.epochs.max(1) {
            e.push(format!("cold_start_epochs {} must be below epochs {}", self.cold_start_epochs, self.epochs));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            e.push(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.patch_size > self.crop_size || self.patch_size == 0 {
            e.push(format!("patch_size {} must be in 1..=crop_size {}", self.patch_size, self.crop_size));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            e.push(format!("grad_clip {} must be finite and non-negative", self.grad_clip));
        }
        let w = &self.weights;
        if [w.lambda1, w.lambda2, w.lambda3, w.weight_decay].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            e.push("loss weights must be finite and non-negative".into());
        }
        e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ColdStart,
    Joint,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::ColdStart => "cold_start",
            Phase::Joint => "joint",
        }
    }

    /// Groups updated in this phase.
    pub fn trains(self, g: Group) -> bool {
        match self {
            Phase::ColdStart => matches!(g, Group::Shared | Group::SegBranch),
            Phase::Joint => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOSS_CSV_HEADER: &str = "step,l_cls,l_reg,l_tcl,l_regularizer,total,lr,phase";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.step,
            l.l_cls,
            l.l_reg,
            l.l_tcl,
            l.l_regularizer,
            l.total,
            self.lr,
            self.phase.as_str()
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    /// `(epoch, report)` for every validated epoch.
    pub validation: Vec<(usize, MetricsReport)>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        source: LossError,
        /// Parameters before the failing step.
        last_good: Box<ModelState>,
        history: Box<TrainHistory>,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A cropped training region with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCase {
    pub id: String,
    pub image: Volume,
    pub label: LabelVolume,
    pub heatmap: Volume,
}

impl TrainCase {
    pub fn new(id: impl Into<String>, image: Volume, label: LabelVolume, sigma: f64, truncation: f64) -> Result<Self, TrainError> {
        let stack = heatmap_stack(&label, sigma, truncation)?;
        let heatmap = stack_to_volume(&stack, *label.geometry());
        Ok(Self { id: id.into(), image, label, heatmap })
    }
}

/// Optional side channels of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives the loss CSV header and one line per step.
    pub loss_csv: Option<&'a mut dyn Write>,
    /// Cases evaluated after every `validate_every` epochs.
    pub validation: Option<&'a [TrainCase]>,
    pub validate_every: usize,
    pub on_epoch_end: Option<&'a mut dyn FnMut(usize, &ModelState)>,
}

fn epoch_patches(cases: &[TrainCase], cfg: &TrainConfig, k: usize, epoch: usize) -> Result<Vec<Patch>, TrainError> {
    let need = cfg.steps_per_epoch * cfg.batch_size;
    let per_case = need.div_ceil(cases.len());
    let mut all = Vec::with_capacity(per_case * cases.len());
    for (i, c) in cases.iter().enumerate() {
        let seed = rng::derive_seed(cfg.seed, &format!("epoch{epoch}.case{i}"));
        all.extend(sample_training_patches(&c.image, &c.label, &c.heatmap, cfg.patch_size, k, per_case, seed)?);
    }
    all.shuffle(&mut rng::stream(cfg.seed, &format!("shuffle{epoch}")));
    all.truncate(need);
    Ok(all)
}

/// Builds the objective of one batch on `t`.
pub fn objective(
    t: &mut Tape<f32>,
    model: &ModelState,
    pv: &[Var],
    batch: &[Patch],
    phase: Phase,
    w: &LossWeights,
) -> Result<LossVars, TrainError> {
    let x = t.constant(stacks_to_tensor(batch.iter().map(|p| &p.stack)));
    let p = batch[0].stack.p;
    let b = batch.len();
    let out = model.forward(t, pv, x)?;
    let sm = t.softmax_channels(out.seg_logits).map_err(ModelError::from)?;
    let probs = t.select_channel(sm, 1).map_err(ModelError::from)?;
    let y = Tensor::from_vec(&[b, p, p], batch.iter().flat_map(|q| q.mask.iter().map(|&v| v as f32)).collect())
        .map_err(ModelError::from)?;
    let l_cls = losses::classification_loss(t, probs, y).map_err(ModelError::from)?;
    let zero = t.constant(Tensor::scalar(0.0));
    let (l_reg, l_tcl) = match (phase, out.contour) {
        (Phase::Joint, Some(c)) => {
            let pred = t.select_channel(c, 0).map_err(ModelError::from)?;
            let h = Tensor::from_vec(&[b, p, p], batch.iter().flat_map(|q| q.heatmap.iter().copied()).collect())
                .map_err(ModelError::from)?;
            let h = t.constant(h);
            let l_reg = losses::regression_loss(t, pred, h).map_err(ModelError::from)?;
            let tr: Vec<_> = out.triples.iter().map(|r| (r.seg, r.cont, r.tcl)).collect();
            (l_reg, losses::tcl_consistency_loss(t, &tr).map_err(ModelError::from)?)
        }
        _ => (zero, zero),
    };
    let l_r = losses::regularizer(t, pv, w.weight_decay).map_err(ModelError::from)?;
    let wts = match phase {
        Phase::ColdStart => LossWeights { lambda2: 0.0, lambda3: 0.0, ..*w },
        Phase::Joint => *w,
    };
    Ok(losses::total_loss(t, l_cls, l_reg, l_tcl, l_r, &wts).map_err(ModelError::from)?)
}

/// Momentum SGD state.
struct Sgd {
    velocity: Vec<Vec<f32>>,
    momentum: f32,
}

impl Sgd {
    fn new(model: &ModelState, momentum: f64) -> Self {
        Self { velocity: model.store.iter().map(|p| vec![0.0; p.value.numel()]).collect(), momentum: momentum as f32 }
    }
}

/// Factor bringing the trainable gradient's global L2 norm down to `clip`.
fn clip_scale(model: &ModelState, pv: &[Var], grads: &Grads<f32>, phase: Phase, clip: f64) -> f32 {
    if clip <= 0.0 {
        return 1.0;
    }
    let sq: f64 = model
        .store
        .iter()
        .enumerate()
        .filter(|(_, p)| phase.trains(p.group))
        .filter_map(|(i, _)| grads.get(pv[i]))
        .map(|g| g.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > clip { (clip / norm) as f32 } else { 1.0 }
}

/// Trains `model` on `cases`. Frozen groups are never written, so their
/// bits and momentum are untouched.
pub fn train(
    mut model: ModelState,
    cases: &[TrainCase],
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<(ModelState, TrainHistory), TrainError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(TrainError::Invalid(errs.join("; ")));
    }
    if cases.is_empty() {
        return Err(TrainError::Invalid("no training cases".into()));
    }
    let k = model.config().in_slices;
    let sched = cfg.schedule();
    let mut sgd = Sgd::new(&model, cfg.momentum);
    let mut hist = TrainHistory::default();
    if let Some(w) = hooks.loss_csv.as_mut() {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
    }
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let phase = if epoch < cfg.cold_start_epochs { Phase::ColdStart } else { Phase::Joint };
        let patches = epoch_patches(cases, cfg, k, epoch)?;
        for batch in patches.chunks(cfg.batch_size) {
            let lr = sched.lr(step);
            let mut t = Tape::<f32>::new();
            let pv = model.bind(&mut t, |g| phase.trains(g));
            let lv = objective(&mut t, &model, &pv, batch, phase, &cfg.weights)?;
            let wts = match phase {
                Phase::ColdStart => LossWeights { lambda2: 0.0, lambda3: 0.0, ..cfg.weights },
                Phase::Joint => cfg.weights,
            };
            let loss = match lv.breakdown(&t, &wts) {
                Ok(l) => l,
                Err(source) => {
                    return Err(TrainError::Diverged { step, source, last_good: Box::new(model), history: Box::new(hist) })
                }
            };
            let grads = t.backward(lv.total);
            let scale = clip_scale(&model, &pv, &grads, phase, cfg.grad_clip);
            for (i, p) in model.store.iter_mut().enumerate() {
                if !phase.trains(p.group) {
                    continue;
                }
                let Some(g) = grads.get(pv[i]) else { continue };
                let v = &mut sgd.velocity[i];
                for ((w, vel), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vel = sgd.momentum * *vel + scale * gi;
                    *w -= lr as f32 * *vel;
                }
            }
            let rec = StepRecord { step, epoch, phase, lr, loss };
            if let Some(w) = hooks.loss_csv.as_mut() {
                writeln!(w, "{}", rec.csv_line())?;
            }
            log::debug!("step {step} {} total {:.5} cls {:.5}", phase.as_str(), loss.total, loss.l_cls);
            hist.steps.push(rec);
            step += 1;
        }
        if let Some(w) = hooks.loss_csv.as_mut() {
            w.flush()?;
        }
        if let Some(cb) = hooks.on_epoch_end.as_mut() {
            cb(epoch, &model);
        }
        if let Some(val) = hooks.validation {
            let every = hooks.validate_every.max(1);
            if (epoch + 1) % every == 0 || epoch + 1 == cfg.epochs {
                hist.validation.push((epoch, evaluate_regions(&model, val, &RunMeta::default())?));
            }
        }
    }
    Ok((model, hist))
}

/// Region-level metrics of a model on cropped cases.
pub fn evaluate_regions(model: &ModelState, cases: &[TrainCase], meta: &RunMeta) -> Result<MetricsReport, TrainError> {
    let preds = cases
        .iter()
        .map(|c| infer(model, &c.image, &InferConfig::default()).map(|o| o.mask))
        .collect::<Result<Vec<_>, _>>()?;
    let spacing = cases.first().map(|c| c.image.geometry().spacing_f64()).unwrap_or([1.0; 3]);
    Ok(evaluate_cases(cases.iter().zip(&preds).map(|(c, p)| (c.id.as_str(), &c.label, p)), spacing, meta.clone()))
}
