//! Fusion operations: weighted residual feedback, channel and position
//! attention, and the TCL block.

use crate::autograd::{Result, Tape, Var};
use crate::tensor::{Real, TensorError};

/// Position attention runs on an average-pooled grid above this many pixels.
pub const MAX_ATTENTION_POSITIONS: usize = 4096;

/// `alpha * priv + (1 - alpha) * pub`.
pub fn tcl_fuse_weighted<T: Real>(t: &mut Tape<T>, private: Var, public: Var, alpha: f64) -> Result<Var> {
    t.lincomb(private, T::of(alpha), public, T::of(1.0 - alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// `[B, C, C]`, applied along channels.
    Channel,
    /// `[B, N, N]` over positions of the grid pooled by `pool`.
    Position { pool: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct AttnMask {
    pub mask: Var,
    pub kind: MaskKind,
}

fn flat<T: Real>(t: &mut Tape<T>, x: Var) -> Result<(Var, [usize; 4])> {
    let [b, c, h, w] = t.value(x).dims4("attention")?;
    Ok((t.reshape(x, &[b, c, h * w])?, [b, c, h, w]))
}

/// Applies a mask to a feature: `A X` along channels, or
/// `out[c, i] = sum_j A[i, j] X[c, j]` along positions.
pub fn attend<T: Real>(t: &mut Tape<T>, m: &AttnMask, x: Var) -> Result<Var> {
    let [b, c, h, w] = t.value(x).dims4("attend")?;
    match m.kind {
        MaskKind::Channel => {
            let (xf, _) = flat(t, x)?;
            let y = t.bmm(m.mask, xf, false, false)?;
            t.reshape(y, &[b, c, h, w])
        }
        MaskKind::Position { pool } => {
            let src = if pool > 1 { t.avg_pool(x, pool)? } else { x };
            let (xf, [_, _, ph, pw]) = flat(t, src)?;
            let y = t.bmm(xf, m.mask, false, true)?;
            let y = t.reshape(y, &[b, c, ph, pw])?;
            if pool > 1 {
                t.upsample(y, pool)
            } else {
                Ok(y)
            }
        }
    }
}

/// Row softmax of the channel affinity `X X^T`.
pub fn channel_attention<T: Real>(t: &mut Tape<T>, x: Var) -> Result<(AttnMask, Var)> {
    let (xf, _) = flat(t, x)?;
    let aff = t.bmm(xf, xf, false, true)?;
    let mask = t.softmax_last(aff)?;
    let m = AttnMask { mask, kind: MaskKind::Channel };
    let out = attend(t, &m, x)?;
    Ok((m, out))
}

/// Smallest power-of-two pooling that brings `h * w` within the position budget.
pub fn position_pool(h: usize, w: usize) -> usize {
    let mut k = 1;
    while (h / k) * (w / k) > MAX_ATTENTION_POSITIONS && h % (2 * k) == 0 && w % (2 * k) == 0 {
        k *= 2;
    }
    k
}

/// Query/key 1x1 projections, each `(weight, bias)`.
#[derive(Debug, Clone, Copy)]
pub struct QueryKey {
    pub q: (Var, Var),
    pub k: (Var, Var),
}

/// Row softmax of `Q^T K` over (pooled) positions.
pub fn position_attention<T: Real>(t: &mut Tape<T>, x: Var, qk: QueryKey) -> Result<(AttnMask, Var)> {
    let [_, _, h, w] = t.value(x).dims4("position_attention")?;
    let pool = position_pool(h, w);
    let src = if pool > 1 { t.avg_pool(x, pool)? } else { x };
    let q = t.conv2d(src, qk.q.0, Some(qk.q.1), 0)?;
    let k = t.conv2d(src, qk.k.0, Some(qk.k.1), 0)?;
    let (qf, _) = flat(t, q)?;
    let (kf, _) = flat(t, k)?;
    let aff = t.bmm(qf, kf, true, false)?;
    let mask = t.softmax_last(aff)?;
    let m = AttnMask { mask, kind: MaskKind::Position { pool } };
    let out = attend(t, &m, x)?;
    Ok((m, out))
}

/// Masks of one attention fusion: `c1`/`p1` act on the private feature,
/// `c2`/`p2` on the public one.
#[derive(Debug, Clone, Copy, Default)]
pub struct FusionMasks {
    pub c1: Option<AttnMask>,
    pub c2: Option<AttnMask>,
    pub p1: Option<AttnMask>,
    pub p2: Option<AttnMask>,
}

/// Sum of every present `A (x) src + src` term. With `averaged`, the
/// private and public residuals are counted once however many mask kinds
/// are present.
pub fn apply_masks<T: Real>(t: &mut Tape<T>, private: Var, public: Var, m: &FusionMasks, averaged: bool) -> Result<Var> {
    if t.shape(private) != t.shape(public) {
        return Err(TensorError::ShapeMismatch {
            op: "tcl_fuse_attention",
            expected: t.shape(private).to_vec(),
            got: t.shape(public).to_vec(),
        });
    }
    let mut terms = Vec::new();
    let mut kinds = 0;
    for (a, b) in [(m.c1, m.c2), (m.p1, m.p2)] {
        if a.is_none() && b.is_none() {
            continue;
        }
        kinds += 1;
        if let Some(a) = a {
            terms.push(attend(t, &a, private)?);
        }
        if let Some(b) = b {
            terms.push(attend(t, &b, public)?);
        }
    }
    let r = if averaged { kinds.min(1) } else { kinds };
    let res = t.lincomb(private, T::of(r as f64), public, T::of(r as f64))?;
    terms.push(res);
    t.add_all(&terms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fusion {
    Weighted { alpha: f64 },
    Attention { channel: bool, position: bool, averaged: bool },
}

/// Parameters of the attention masks: query/key for the private and the
/// public feature.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub private: QueryKey,
    pub public: QueryKey,
}

/// Bound parameters of one TCL block, each `(weight, bias)`.
#[derive(Debug, Clone, Copy)]
pub struct TclVars {
    pub bottleneck: (Var, Var),
    pub conv_a: (Var, Var),
    pub conv_b: (Var, Var),
    pub attention: Option<AttnVars>,
}

/// Masks computed from `private` and from `public` for the enabled kinds.
pub fn fusion_masks<T: Real>(
    t: &mut Tape<T>,
    private: Var,
    public: Var,
    channel: bool,
    position: bool,
    attn: Option<AttnVars>,
) -> Result<FusionMasks> {
    let mut m = FusionMasks::default();
    if channel {
        m.c1 = Some(channel_attention(t, private)?.0);
        m.c2 = Some(channel_attention(t, public)?.0);
    }
    if position {
        let a = attn.ok_or_else(|| TensorError::Invalid("position attention without projections".into()))?;
        m.p1 = Some(position_attention(t, private, a.private)?.0);
        m.p2 = Some(position_attention(t, public, a.public)?.0);
    }
    Ok(m)
}

/// Attention feedback of one branch with masks computed from its inputs.
#[allow(clippy::too_many_arguments)]
pub fn tcl_fuse_attention<T: Real>(
    t: &mut Tape<T>,
    private: Var,
    public: Var,
    channel: bool,
    position: bool,
    averaged: bool,
    attn: Option<AttnVars>,
) -> Result<Var> {
    let m = fusion_masks(t, private, public, channel, position, attn)?;
    apply_masks(t, private, public, &m, averaged)
}

/// Output of one TCL block.
#[derive(Debug, Clone, Copy)]
pub struct TclOut {
    pub public: Var,
    pub seg: Var,
    pub cont: Var,
}

pub fn tcl_public<T: Real>(t: &mut Tape<T>, seg: Var, cont: Var, p: &TclVars) -> Result<Var> {
    let fused = t.add(seg, cont)?;
    let b = t.conv2d(fused, p.bottleneck.0, Some(p.bottleneck.1), 0)?;
    let b = t.relu(b);
    let a = t.conv2d(b, p.conv_a.0, Some(p.conv_a.1), 1)?;
    let a = t.relu(a);
    let c = t.conv2d(a, p.conv_b.0, Some(p.conv_b.1), 1)?;
    Ok(t.relu(c))
}

/// Fuses the two branch features into the public feature and feeds it back
/// to each branch.
pub fn tcl_block<T: Real>(t: &mut Tape<T>, seg: Var, cont: Var, p: &TclVars, fusion: Fusion) -> Result<TclOut> {
    let public = tcl_public(t, seg, cont, p)?;
    let (fs, fc) = match fusion {
        Fusion::Weighted { alpha } => (
            tcl_fuse_weighted(t, seg, public, alpha)?,
            tcl_fuse_weighted(t, cont, public, alpha)?,
        ),
        Fusion::Attention { channel, position, averaged } => {
            let ms = fusion_masks(t, seg, public, channel, position, p.attention)?;
            let mut mc = FusionMasks { c2: ms.c2, p2: ms.p2, ..Default::default() };
            if channel {
                mc.c1 = Some(channel_attention(t, cont)?.0);
            }
            if position {
                let a = p.attention.expect("checked by fusion_masks");
                mc.p1 = Some(position_attention(t, cont, a.private)?.0);
            }
            let fs = apply_masks(t, seg, public, &ms, averaged)?;
            let fc = apply_masks(t, cont, public, &mc, averaged)?;
            (fs, fc)
        }
    };
    Ok(TclOut { public, seg: fs, cont: fc })
}
