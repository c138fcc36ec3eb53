//! Register-blocked 3x3 pad-1 convolution kernels for few-channel planes.
//!
//! Single precision uses AVX-512 when the CPU has it; the portable body
//! serves everything else. The two agree to rounding, and each is
//! deterministic on its own.

use crate::tensor::Real;

/// Output channels per register tile.
const CB: usize = 8;
/// Output pixels per register tile.
const XW: usize = 16;
const XP: usize = XW + 2;

/// Planes zero-padded by one pixel on every side and widened so each row
/// holds a whole number of tiles.
struct Padded<T> {
    data: Vec<T>,
    ph: usize,
    pw: usize,
}

fn padded_width(w: usize) -> usize {
    w.div_ceil(XW) * XW + 2
}

fn pad<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Padded<T> {
    let (ph, pw) = (h + 2, padded_width(w));
    let mut data = vec![T::zero(); c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let dst = (ci * ph + y + 1) * pw + 1;
            data[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    Padded { data, ph, pw }
}

/// `[cout, cin, 3, 3]` into `[block][cin][tap][CB]`, zero-filling the last block.
fn block_weights<T: Real>(weight: &[T], cin: usize, cout: usize) -> Vec<T> {
    let nblk = cout.div_ceil(CB);
    let mut out = vec![T::zero(); nblk * cin * 9 * CB];
    for co in 0..cout {
        let (blk, j) = (co / CB, co % CB);
        for ci in 0..cin {
            for tap in 0..9 {
                out[((blk * cin + ci) * 9 + tap) * CB + j] = weight[(co * cin + ci) * 9 + tap];
            }
        }
    }
    out
}

/// Block layout of the flipped, transposed kernel used for input gradients.
fn block_weights_flipped<T: Real>(weight: &[T], cin: usize, cout: usize) -> Vec<T> {
    let mut t = vec![T::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for tap in 0..9 {
                t[(ci * cout + co) * 9 + (8 - tap)] = weight[(co * cin + ci) * 9 + tap];
            }
        }
    }
    block_weights(&t, cout, cin)
}

#[inline(always)]
fn forward_body<T: Real>(xp: &Padded<T>, cin: usize, h: usize, w: usize, wb: &[T], cout: usize, out: &mut [T]) {
    let hw = h * w;
    for blk in 0..cout.div_ceil(CB) {
        let wblk = &wb[blk * cin * 9 * CB..(blk + 1) * cin * 9 * CB];
        let nj = CB.min(cout - blk * CB);
        for y in 0..h {
            for x0 in (0..w).step_by(XW) {
                let mut acc = [[T::zero(); XW]; CB];
                for ci in 0..cin {
                    for ky in 0..3 {
                        let base = (ci * xp.ph + y + ky) * xp.pw + x0;
                        let row: &[T; XP] = xp.data[base..base + XP].try_into().unwrap();
                        for kx in 0..3 {
                            let wk: &[T; CB] = wblk[(ci * 9 + ky * 3 + kx) * CB..][..CB].try_into().unwrap();
                            for j in 0..CB {
                                let wv = wk[j];
                                for t in 0..XW {
                                    acc[j][t] += wv * row[kx + t];
                                }
                            }
                        }
                    }
                }
                let nt = XW.min(w - x0);
                for (j, a) in acc.iter().enumerate().take(nj) {
                    let dst = (blk * CB + j) * hw + y * w + x0;
                    out[dst..dst + nt].copy_from_slice(&a[..nt]);
                }
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn dw_body<T: Real>(xp: &Padded<T>, cin: usize, h: usize, w: usize, dp: &Padded<T>, cout: usize, dw: &mut [T]) {
    // dp holds dout shifted by one pixel, so tile (y, x0) of dout starts at
    // row y + 1, column x0 + 1.
    for co in 0..cout {
        for ci in 0..cin {
            let mut acc = [[T::zero(); XW]; 9];
            for y in 0..h {
                for x0 in (0..w).step_by(XW) {
                    let db = (co * dp.ph + y + 1) * dp.pw + x0 + 1;
                    let d: &[T; XW] = dp.data[db..db + XW].try_into().unwrap();
                    for ky in 0..3 {
                        let base = (ci * xp.ph + y + ky) * xp.pw + x0;
                        let row: &[T; XP] = xp.data[base..base + XP].try_into().unwrap();
                        for kx in 0..3 {
                            let a = &mut acc[ky * 3 + kx];
                            for t in 0..XW {
                                a[t] += d[t] * row[kx + t];
                            }
                        }
                    }
                }
            }
            let base = (co * cin + ci) * 9;
            for (tap, a) in acc.iter().enumerate() {
                let mut s = T::zero();
                for &v in a {
                    s += v;
                }
                dw[base + tap] += s;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{CB, XW};

    /// Borrowed padded planes.
    pub struct View<'a> {
        pub data: &'a [f32],
        pub ph: usize,
        pub pw: usize,
    }

    /// Full-width unaligned load.
    #[inline(always)]
    unsafe fn load(p: *const f32) -> __m512 {
        _mm512_maskz_loadu_ps(0xffff, p)
    }

    /// # Safety
    /// The CPU must support AVX-512F. `xp`, `wb` and `out` must have the
    /// layouts produced by `pad` and `block_weights`.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn forward(xp: &View, cin: usize, h: usize, w: usize, wb: &[f32], cout: usize, out: &mut [f32]) {
        let hw = h * w;
        assert!(xp.data.len() >= cin * xp.ph * xp.pw && xp.pw >= w.div_ceil(XW) * XW + 2 && xp.ph >= h + 2);
        assert!(wb.len() >= cout.div_ceil(CB) * cin * 9 * CB && out.len() >= cout * hw);
        let xptr = xp.data.as_ptr();
        for blk in 0..cout.div_ceil(CB) {
            let wblk = wb.as_ptr().wrapping_add(blk * cin * 9 * CB);
            let nj = CB.min(cout - blk * CB);
            for y in 0..h {
                for x0 in (0..w).step_by(XW) {
                    let mut acc = [_mm512_setzero_ps(); CB];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            let row = xptr.wrapping_add((ci * xp.ph + y + ky) * xp.pw + x0);
                            let r = [load(row), load(row.wrapping_add(1)), load(row.wrapping_add(2))];
                            for (kx, rv) in r.iter().enumerate() {
                                let wk = wblk.wrapping_add((ci * 9 + ky * 3 + kx) * CB);
                                for (j, a) in acc.iter_mut().enumerate() {
                                    *a = _mm512_fmadd_ps(_mm512_set1_ps(*wk.wrapping_add(j)), *rv, *a);
                                }
                            }
                        }
                    }
                    let nt = XW.min(w - x0);
                    let mask: __mmask16 = if nt == XW { 0xffff } else { (1u16 << nt) - 1 };
                    for (j, a) in acc.iter().enumerate().take(nj) {
                        let dst = out.as_mut_ptr().wrapping_add((blk * CB + j) * hw + y * w + x0);
                        _mm512_mask_storeu_ps(dst, mask, *a);
                    }
                }
            }
        }
    }

    /// # Safety
    /// As for [`forward`]; `dp` is the padded output gradient.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn dw(xp: &View, cin: usize, h: usize, w: usize, dp: &View, cout: usize, dw: &mut [f32]) {
        assert!(xp.data.len() >= cin * xp.ph * xp.pw && xp.pw >= w.div_ceil(XW) * XW + 2 && xp.ph >= h + 2);
        assert!(dp.data.len() >= cout * dp.ph * dp.pw && dp.pw >= w.div_ceil(XW) * XW + 2 && dp.ph >= h + 2);
        assert!(dw.len() >= cout * cin * 9);
        let (xptr, dptr) = (xp.data.as_ptr(), dp.data.as_ptr());
        for co in 0..cout {
            for ci in 0..cin {
                let mut acc = [_mm512_setzero_ps(); 9];
                for y in 0..h {
                    for x0 in (0..w).step_by(XW) {
                        let d = load(dptr.wrapping_add((co * dp.ph + y + 1) * dp.pw + x0 + 1));
                        for ky in 0..3 {
                            let row = xptr.wrapping_add((ci * xp.ph + y + ky) * xp.pw + x0);
                            for kx in 0..3 {
                                let a = &mut acc[ky * 3 + kx];
                                *a = _mm512_fmadd_ps(d, load(row.wrapping_add(kx)), *a);
                            }
                        }
                    }
                }
                let base = (co * cin + ci) * 9;
                for (tap, a) in acc.iter().enumerate() {
                    dw[base + tap] += _mm512_reduce_add_ps(*a);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx512() -> bool {
    std::arch::is_x86_feature_detected!("avx512f")
}

fn run_forward<T: Real>(xp: &Padded<T>, cin: usize, h: usize, w: usize, wb: &[T], cout: usize, out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        if let (Some(xd), Some(wf)) = (T::as_f32(&xp.data), T::as_f32(wb)) {
            let xf = avx512::View { data: xd, ph: xp.ph, pw: xp.pw };
            if let Some(of) = T::as_f32_mut(out) {
                // SAFETY: AVX-512F was detected; layouts come from `pad` and `block_weights`.
                return unsafe { avx512::forward(&xf, cin, h, w, wf, cout, of) };
            }
        }
    }
    forward_body(xp, cin, h, w, wb, cout, out)
}

fn run_dw<T: Real>(xp: &Padded<T>, cin: usize, h: usize, w: usize, dp: &Padded<T>, cout: usize, dw: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        if let (Some(xd), Some(dd)) = (T::as_f32(&xp.data), T::as_f32(&dp.data)) {
            let xf = avx512::View { data: xd, ph: xp.ph, pw: xp.pw };
            let df = avx512::View { data: dd, ph: dp.ph, pw: dp.pw };
            if let Some(wf) = T::as_f32_mut(dw) {
                // SAFETY: AVX-512F was detected; layouts come from `pad`.
                return unsafe { avx512::dw(&xf, cin, h, w, &df, cout, wf) };
            }
        }
    }
    dw_body(xp, cin, h, w, dp, cout, dw)
}

/// Batched forward without bias. `x` is `[batch, cin, h, w]`.
pub fn forward<T: Real>(x: &[T], batch: usize, cin: usize, h: usize, w: usize, weight: &[T], cout: usize) -> Vec<T> {
    let wb = block_weights(weight, cin, cout);
    let (in_sz, out_sz) = (cin * h * w, cout * h * w);
    let mut out = vec![T::zero(); batch * out_sz];
    for b in 0..batch {
        let xp = pad(&x[b * in_sz..(b + 1) * in_sz], cin, h, w);
        run_forward(&xp, cin, h, w, &wb, cout, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    out
}

/// Accumulates the weight gradient into `dw` and returns the input gradient
/// when requested.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    dout: &[T],
    dw: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (in_sz, out_sz) = (cin * h * w, cout * h * w);
    let dps: Vec<Padded<T>> = (0..batch).map(|b| pad(&dout[b * out_sz..(b + 1) * out_sz], cout, h, w)).collect();
    if let Some(dw) = dw {
        for (b, dp) in dps.iter().enumerate() {
            let xp = pad(&x[b * in_sz..(b + 1) * in_sz], cin, h, w);
            run_dw(&xp, cin, h, w, dp, cout, dw);
        }
    }
    if !want_dx {
        return None;
    }
    let wb = block_weights_flipped(weight, cin, cout);
    let mut dx = vec![T::zero(); batch * in_sz];
    for (b, dp) in dps.iter().enumerate() {
        run_forward(dp, cout, h, w, &wb, cin, &mut dx[b * in_sz..(b + 1) * in_sz]);
    }
    Some(dx)
}
