//! Task losses and their weighted combination, built on the tape so the
//! same code serves training (f32) and gradient checks (f64).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Result as TapeResult, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss component {name} is not finite ({value})")]
    NonFinite { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "d_l1")]
    pub lambda1: f64,
    #[serde(default = "d_l2")]
    pub lambda2: f64,
    #[serde(default = "d_l3")]
    pub lambda3: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
}

fn d_l1() -> f64 {
    1.0
}
fn d_l2() -> f64 {
    0.01
}
fn d_l3() -> f64 {
    1.0
}
fn d_wd() -> f64 {
    1e-4
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: d_l1(), lambda2: d_l2(), lambda3: d_l3(), weight_decay: d_wd() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_tcl: f64,
    pub l_regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `lambda1 l_cls + lambda2 l_reg + lambda3 l_tcl + R`.
    pub fn combine(l_cls: f64, l_reg: f64, l_tcl: f64, l_regularizer: f64, w: &LossWeights) -> Result<Self, LossError> {
        for (name, value) in [("l_cls", l_cls), ("l_reg", l_reg), ("l_tcl", l_tcl), ("l_regularizer", l_regularizer)] {
            if !value.is_finite() {
                return Err(LossError::NonFinite { name, value });
            }
        }
        let total = w.lambda1 * l_cls + w.lambda2 * l_reg + w.lambda3 * l_tcl + l_regularizer;
        if !total.is_finite() {
            return Err(LossError::NonFinite { name: "total", value: total });
        }
        Ok(Self { l_cls, l_reg, l_tcl, l_regularizer, total })
    }
}

/// Mean binary cross-entropy of foreground probabilities against binary
/// targets, probabilities clamped to `[eps, 1 - eps]`.
pub fn classification_loss<T: Real>(t: &mut Tape<T>, probs: Var, targets: Tensor<T>) -> TapeResult<Var> {
    t.bce(probs, targets, T::of(PROB_EPS))
}

/// Mean squared error against the contour heatmap.
pub fn regression_loss<T: Real>(t: &mut Tape<T>, pred: Var, target: Var) -> TapeResult<Var> {
    t.mse(pred, target)
}

/// `sum_m mse(seg_m, tcl_m) + mse(cont_m, tcl_m)`; zero for no levels.
pub fn tcl_consistency_loss<T: Real>(t: &mut Tape<T>, triples: &[(Var, Var, Var)]) -> TapeResult<Var> {
    let mut terms = Vec::with_capacity(2 * triples.len());
    for &(s, c, p) in triples {
        terms.push(t.mse(s, p)?);
        terms.push(t.mse(c, p)?);
    }
    if terms.is_empty() {
        return Ok(t.constant(Tensor::scalar(T::zero())));
    }
    t.add_all(&terms)
}

/// `weight_decay * sum ||theta||^2 / 2`.
pub fn regularizer<T: Real>(t: &mut Tape<T>, params: &[Var], weight_decay: f64) -> TapeResult<Var> {
    if params.is_empty() || weight_decay == 0.0 {
        return Ok(t.constant(Tensor::scalar(T::zero())));
    }
    let norms: Vec<Var> = params.iter().map(|&p| t.sq_norm_half(p)).collect();
    let s = t.add_all(&norms)?;
    Ok(t.scale(s, T::of(weight_decay)))
}

/// Graph nodes of each component plus the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_cls: Var,
    pub l_reg: Var,
    pub l_tcl: Var,
    pub l_regularizer: Var,
    pub total: Var,
}

pub fn total_loss<T: Real>(
    t: &mut Tape<T>,
    l_cls: Var,
    l_reg: Var,
    l_tcl: Var,
    l_regularizer: Var,
    w: &LossWeights,
) -> TapeResult<LossVars> {
    let a = t.lincomb(l_cls, T::of(w.lambda1), l_reg, T::of(w.lambda2))?;
    let b = t.lincomb(l_tcl, T::of(w.lambda3), l_regularizer, T::one())?;
    let total = t.add(a, b)?;
    Ok(LossVars { l_cls, l_reg, l_tcl, l_regularizer, total })
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, t: &Tape<T>, w: &LossWeights) -> Result<LossBreakdown, LossError> {
        let v = |x: Var| t.value(x).item().f64();
        let b = LossBreakdown::combine(v(self.l_cls), v(self.l_reg), v(self.l_tcl), v(self.l_regularizer), w)?;
        let total = v(self.total);
        if !total.is_finite() {
            return Err(LossError::NonFinite { name: "total", value: total });
        }
        Ok(LossBreakdown { total, ..b })
    }
}
