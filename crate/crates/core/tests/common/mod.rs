#![allow(dead_code)]

use hfunet::autograd::{Tape, Var};
use hfunet::gradcheck::{self, GradReport};
use hfunet::losses::{self, LossWeights};
use hfunet::model::tcl::{self, AttnVars, QueryKey};
use hfunet::model::{build_topology, Attention, Family, ModelError, TopologyConfig};
use hfunet::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const FRACTION: f64 = 0.99;
pub const WORST: f64 = 1e-3;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Uniform values with magnitude at least `gap`, keeping finite differences
/// away from kinks at zero.
pub fn signed(shape: &[usize], gap: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(gap..hi);
        if r.random_bool(0.5) { m } else { -m }
    })
}

pub fn binary(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if r.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// Scalarizes a tensor-valued node with a fixed random projection.
pub fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, TensorError> {
    let w = uniform(t.shape(v), -1.0, 1.0, seed ^ 0x9e37);
    t.dot(v, w)
}

pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    gradcheck::check(inputs, STEP, TOL, f).expect("gradient check runs")
}

fn qk(c: usize, seed: u64) -> Vec<Tensor<f64>> {
    let m = (c / 8).max(1);
    vec![
        uniform(&[m, c, 1, 1], -0.5, 0.5, seed),
        uniform(&[m], -0.1, 0.1, seed + 1),
        uniform(&[m, c, 1, 1], -0.5, 0.5, seed + 2),
        uniform(&[m], -0.1, 0.1, seed + 3),
    ]
}

fn qk_vars(v: &[Var]) -> QueryKey {
    QueryKey { q: (v[0], v[1]), k: (v[2], v[3]) }
}

fn model_cfg(attention: Attention) -> TopologyConfig {
    TopologyConfig { base_width: 2, depth: 2, attention, ..TopologyConfig::new(Family::Hf, 2) }
}

fn model_total(attention: Attention, seed: u64) -> GradReport {
    let cfg = model_cfg(attention);
    let model = build_topology(&cfg, seed).expect("tiny model builds");
    let mut inputs: Vec<Tensor<f64>> = model
        .store
        .iter()
        .enumerate()
        .map(|(i, p)| uniform(p.value.shape(), -0.5, 0.5, seed * 1000 + i as u64))
        .collect();
    let x = uniform(&[1, 3, 8, 8], -1.0, 1.0, seed + 77);
    let y = binary(&[1, 8, 8], seed + 78);
    let heat = uniform(&[1, 8, 8], 0.0, 0.2, seed + 79);
    inputs.push(x);
    let w = LossWeights { weight_decay: 1e-2, ..Default::default() };
    check(&inputs, |t, v| {
        let (pv, xv) = v.split_at(v.len() - 1);
        let out = model.forward(t, pv, xv[0]).map_err(|e| match e {
            ModelError::Tensor(e) => e,
            e => TensorError::Invalid(e.to_string()),
        })?;
        let sm = t.softmax_channels(out.seg_logits)?;
        let probs = t.select_channel(sm, 1)?;
        let l_cls = losses::classification_loss(t, probs, y.clone())?;
        let c = t.select_channel(out.contour.expect("contour head"), 0)?;
        let h = t.constant(heat.clone());
        let l_reg = losses::regression_loss(t, c, h)?;
        let tr: Vec<_> = out.triples.iter().map(|r| (r.seg, r.cont, r.tcl)).collect();
        let l_tcl = losses::tcl_consistency_loss(t, &tr)?;
        let l_r = losses::regularizer(t, pv, w.weight_decay)?;
        Ok(losses::total_loss(t, l_cls, l_reg, l_tcl, l_r, &w)?.total)
    })
}

/// Loss and fusion gradient checks on random double-precision inputs.
pub fn loss_and_fusion_suite() -> Vec<(&'static str, GradReport)> {
    let mut out = Vec::new();
    let y = binary(&[2, 8, 8], 11);
    out.push((
        "classification",
        check(&[uniform(&[2, 2, 8, 8], -2.0, 2.0, 1)], |t, v| {
            let sm = t.softmax_channels(v[0])?;
            let p = t.select_channel(sm, 1)?;
            losses::classification_loss(t, p, y.clone())
        }),
    ));
    out.push((
        "regression",
        check(&[uniform(&[2, 8, 8], -1.0, 1.0, 2), uniform(&[2, 8, 8], 0.0, 0.5, 3)], |t, v| {
            losses::regression_loss(t, v[0], v[1])
        }),
    ));
    let feat = |s| uniform(&[2, 4, 8, 8], -1.0, 1.0, s);
    out.push((
        "tcl consistency",
        check(&[feat(4), feat(5), feat(6), feat(7), feat(8), feat(9)], |t, v| {
            losses::tcl_consistency_loss(t, &[(v[0], v[1], v[2]), (v[3], v[4], v[5])])
        }),
    ));
    out.push(("total (weighted)", model_total(Attention::None, 3)));
    out.push(("total (dual attention)", model_total(Attention::Dual, 4)));
    out.push((
        "weighted residual fusion",
        check(&[feat(12), feat(13)], |t, v| {
            let f = tcl::tcl_fuse_weighted(t, v[0], v[1], 0.3)?;
            project(t, f, 14)
        }),
    ));
    for averaged in [false, true] {
        let mut inputs = vec![uniform(&[2, 4, 8, 8], -0.5, 0.5, 20), uniform(&[2, 4, 8, 8], -0.5, 0.5, 21)];
        inputs.extend(qk(4, 30));
        inputs.extend(qk(4, 40));
        out.push((
            if averaged { "attention fusion (averaged)" } else { "attention fusion" },
            check(&inputs, |t, v| {
                let attn = AttnVars { private: qk_vars(&v[2..6]), public: qk_vars(&v[6..10]) };
                let f = tcl::tcl_fuse_attention(t, v[0], v[1], true, true, averaged, Some(attn))?;
                project(t, f, 22)
            }),
        ));
    }
    out
}
