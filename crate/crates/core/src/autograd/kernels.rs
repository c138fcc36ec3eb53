//! Forward and backward kernels for the spatial operators.
//!
//! Activations are `[batch, channels, height, width]`, row-major. Convolutions
//! use stride 1 and run as im2col + gemm per sample.

use crate::tensor::{gemm, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * ohw..(r + 1) * ohw];
                // valid output columns: 0 <= ox + kx - pad < w
                let ox0 = g.pad.saturating_sub(kx);
                let ox1 = (g.w + g.pad).saturating_sub(kx).min(ow);
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || ox0 >= ox1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..ox0].fill(T::zero());
                    let ix0 = ox0 + kx - g.pad;
                    dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    dst[ox1..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &cols[r * ohw..(r + 1) * ohw];
                let ox0 = g.pad.saturating_sub(kx);
                let ox1 = (g.w + g.pad).saturating_sub(kx).min(ow);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let ix0 = ox0 + kx - g.pad;
                    let dst = &mut plane[iy as usize * g.w + ix0..iy as usize * g.w + ix0 + (ox1 - ox0)];
                    for (d, &s) in dst.iter_mut().zip(&row[oy * ow + ox0..oy * ow + ox1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Whether the direct 3x3 kernels beat im2col + gemm for this geometry.
fn use_direct(g: &ConvGeom) -> bool {
    g.kh == 3 && g.kw == 3 && g.pad == 1 && g.w >= 16
}

/// Dot product with lane-chunked partial sums, in a fixed order.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const L: usize = 16;
    let mut acc = [T::zero(); L];
    let (ac, bc) = (a.chunks_exact(L), b.chunks_exact(L));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).fold(T::zero(), |s, v| s + v);
    for (x, y) in ac.zip(bc) {
        for t in 0..L {
            acc[t] += x[t] * y[t];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Sum with lane-chunked partial sums, in a fixed order.
pub fn sum<T: Real>(a: &[T]) -> T {
    const L: usize = 16;
    let mut acc = [T::zero(); L];
    let c = a.chunks_exact(L);
    let tail = c.remainder().iter().fold(T::zero(), |s, &v| s + v);
    for x in c {
        for t in 0..L {
            acc[t] += x[t];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `y += a * x`.
#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `out[co] = sum_ci w[co, ci] x[ci]` for one sample of planes of length `n`.
fn pointwise_sample<T: Real>(x: &[T], cin: usize, n: usize, weight: &[T], cout: usize, out: &mut [T]) {
    for co in 0..cout {
        let o = &mut out[co * n..(co + 1) * n];
        o.fill(T::zero());
        for ci in 0..cin {
            axpy(o, weight[co * cin + ci], &x[ci * n..(ci + 1) * n]);
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], batch: usize, g: &ConvGeom, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ohw = g.out_h() * g.out_w();
    let (k, in_sz, out_sz) = (g.k(), g.cin * g.h * g.w, g.cout * ohw);
    let mut out = vec![T::zero(); batch * out_sz];
    if use_direct(g) {
        let mut out = super::direct::forward(x, batch, g.cin, g.h, g.w, weight, g.cout);
        if let Some(bias) = bias {
            for os in out.chunks_mut(out_sz) {
                for (co, &bv) in bias.iter().enumerate() {
                    for v in os[co * ohw..(co + 1) * ohw].iter_mut() {
                        *v += bv;
                    }
                }
            }
        }
        return out;
    }
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * ohw] };
    let wm = MatRef::rm(weight, g.cout, k);
    for b in 0..batch {
        let xs = &x[b * in_sz..(b + 1) * in_sz];
        let os = &mut out[b * out_sz..(b + 1) * out_sz];
        if g.pointwise() {
            pointwise_sample(xs, g.cin, ohw, weight, g.cout, os);
        } else {
            im2col(xs, g, &mut cols);
            gemm(wm, MatRef::rm(&cols, k, ohw), T::zero(), os);
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in os[co * ohw..(co + 1) * ohw].iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Accumulates parameter gradients into `dw`/`db` and returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    dout: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let ohw = g.out_h() * g.out_w();
    let (k, in_sz, out_sz) = (g.k(), g.cin * g.h * g.w, g.cout * ohw);
    if use_direct(g) {
        return direct3_backward(x, batch, g, weight, dout, dw, db, want_dx);
    }
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * ohw] };
    let mut dcols = if g.pointwise() || !want_dx { Vec::new() } else { vec![T::zero(); k * ohw] };
    let mut dx = if want_dx { Some(vec![T::zero(); batch * in_sz]) } else { None };
    let mut dw = dw;
    if let Some(db) = db {
        for b in 0..batch {
            let ds = &dout[b * out_sz..(b + 1) * out_sz];
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += sum(&ds[co * ohw..(co + 1) * ohw]);
            }
        }
    }
    for b in 0..batch {
        let xs = &x[b * in_sz..(b + 1) * in_sz];
        let ds = MatRef::rm(&dout[b * out_sz..(b + 1) * out_sz], g.cout, ohw);
        if let Some(dw) = dw.as_deref_mut() {
            if g.pointwise() {
                let d = &dout[b * out_sz..(b + 1) * out_sz];
                for co in 0..g.cout {
                    for ci in 0..g.cin {
                        dw[co * g.cin + ci] += dot(&d[co * ohw..(co + 1) * ohw], &xs[ci * ohw..(ci + 1) * ohw]);
                    }
                }
            } else {
                im2col(xs, g, &mut cols);
                gemm(ds, MatRef::rm(&cols, k, ohw).t(), T::one(), dw);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[b * in_sz..(b + 1) * in_sz];
            let wt = MatRef::rm(weight, g.cout, k).t();
            if g.pointwise() {
                let d = &dout[b * out_sz..(b + 1) * out_sz];
                for ci in 0..g.cin {
                    let o = &mut dxs[ci * ohw..(ci + 1) * ohw];
                    for co in 0..g.cout {
                        axpy(o, weight[co * g.cin + ci], &d[co * ohw..(co + 1) * ohw]);
                    }
                }
            } else {
                gemm(wt, ds, T::zero(), &mut dcols);
                col2im(&dcols, g, dxs);
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn direct3_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    dout: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let hw = g.h * g.w;
    let out_sz = g.cout * hw;
    if let Some(db) = db {
        for b in 0..batch {
            let ds = &dout[b * out_sz..(b + 1) * out_sz];
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += sum(&ds[co * hw..(co + 1) * hw]);
            }
        }
    }
    super::direct::backward(x, batch, g.cin, g.h, g.w, weight, g.cout, dout, dw, want_dx)
}

/// 2x2 transposed convolution with stride 2; weight layout `[cin, cout, 2, 2]`.
pub fn conv_t2_forward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = h * w;
    let (ow, ohw) = (2 * w, 4 * hw);
    let mut out = vec![T::zero(); batch * cout * ohw];
    let mut tmp = vec![T::zero(); cout * 4 * hw];
    let wt = MatRef::rm(weight, cin, cout * 4).t();
    for b in 0..batch {
        gemm(wt, MatRef::rm(&x[b * cin * hw..(b + 1) * cin * hw], cin, hw), T::zero(), &mut tmp);
        let os = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
        for co in 0..cout {
            let bv = bias.map_or(T::zero(), |bb| bb[co]);
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let src = &tmp[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                for y in 0..h {
                    let orow = &mut os[co * ohw + (2 * y + dy) * ow..];
                    for xx in 0..w {
                        orow[2 * xx + dx] = src[y * w + xx] + bv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t2_backward<T: Real>(
    x: &[T],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    weight: &[T],
    dout: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    let (ow, ohw) = (2 * w, 4 * hw);
    let mut dtmp = vec![T::zero(); cout * 4 * hw];
    let mut dx = if want_dx { Some(vec![T::zero(); batch * cin * hw]) } else { None };
    let mut dw = dw;
    let mut db = db;
    for b in 0..batch {
        let ds = &dout[b * cout * ohw..(b + 1) * cout * ohw];
        if let Some(db) = db.as_deref_mut() {
            for co in 0..cout {
                db[co] += ds[co * ohw..(co + 1) * ohw].iter().copied().sum::<T>();
            }
        }
        for co in 0..cout {
            for q in 0..4 {
                let (dy, dxo) = (q / 2, q % 2);
                let dst = &mut dtmp[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                for y in 0..h {
                    let drow = &ds[co * ohw + (2 * y + dy) * ow..];
                    for xx in 0..w {
                        dst[y * w + xx] = drow[2 * xx + dxo];
                    }
                }
            }
        }
        let xs = MatRef::rm(&x[b * cin * hw..(b + 1) * cin * hw], cin, hw);
        let dt = MatRef::rm(&dtmp, cout * 4, hw);
        if let Some(dw) = dw.as_deref_mut() {
            gemm(xs, dt.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(MatRef::rm(weight, cin, cout * 4), dt, T::zero(), &mut dx[b * cin * hw..(b + 1) * cin * hw]);
        }
    }
    dx
}

/// 2x2 max pooling (stride 2, trailing odd row/column dropped). Returns the
/// pooled values and the flat input index of each maximum.
pub fn max_pool2_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for &i in &[i0 + 1, i0 + w, i0 + w + 1] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::of(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[p * h * w + (y * k + dy) * w + xx * k + dx];
                    }
                }
                out[p * oh * ow + y * ow + xx] = s * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::of(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let g = dout[p * oh * ow + y * ow + xx] * inv;
                for dy in 0..k {
                    for dx_ in 0..k {
                        dx[p * h * w + (y * k + dy) * w + xx * k + dx_] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                out[p * oh * ow + y * ow + xx] = x[p * h * w + (y / k) * w + xx / k];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                dx[p * h * w + (y / k) * w + xx / k] += dout[p * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, wt: &[f64], bias: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.cout * oh * ow];
        for co in 0..g.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[co];
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = oy as isize + ky as isize - g.pad as isize;
                                let ix = ox as isize + kx as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    s += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let g = ConvGeom { cin: 2, h: 5, w: 4, cout: 3, kh: 3, kw: 3, pad: 1 };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let wt: Vec<f64> = (0..54).map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let got = conv2d_forward(&x, 1, &g, &wt, Some(&bias));
        let want = naive_conv(&x, &g, &wt, &bias);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_t2_places_each_tap() {
        // single input pixel, single channel: output block is the kernel itself
        let w = [1.0, 2.0, 3.0, 4.0];
        let out = conv_t2_forward(&[1.0f64], 1, 1, 1, 1, 1, &w, None);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = [1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0];
        let (v, a) = max_pool2_forward(&x, 1, 2, 4);
        assert_eq!(v, vec![5.0, 9.0]);
        assert_eq!(a, vec![1, 6]);
    }

    fn gemm_path(x: &[f64], batch: usize, g: &ConvGeom, wt: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let ohw = g.out_h() * g.out_w();
        let (in_sz, out_sz) = (g.cin * g.h * g.w, g.cout * ohw);
        let mut y = Vec::new();
        let mut dw = vec![0.0; wt.len()];
        let mut dx = Vec::new();
        let mut cols = vec![0.0; g.k() * ohw];
        let mut dcols = vec![0.0; g.k() * ohw];
        for b in 0..batch {
            let xs = &x[b * in_sz..(b + 1) * in_sz];
            y.extend(naive_conv(xs, g, wt, &vec![0.0; g.cout]));
            im2col(xs, g, &mut cols);
            let ds = &dout[b * out_sz..(b + 1) * out_sz];
            gemm(MatRef::rm(ds, g.cout, ohw), MatRef::rm(&cols, g.k(), ohw).t(), 1.0, &mut dw);
            gemm(MatRef::rm(wt, g.cout, g.k()).t(), MatRef::rm(ds, g.cout, ohw), 0.0, &mut dcols);
            let mut d = vec![0.0; in_sz];
            col2im(&dcols, g, &mut d);
            dx.extend(d);
        }
        (y, dw, dx)
    }

    #[test]
    fn direct_kernels_match_im2col() {
        for &(cin, cout, h, w) in &[(3, 8, 5, 16), (8, 5, 3, 17), (1, 1, 1, 16)] {
            let g = ConvGeom { cin, h, w, cout, kh: 3, kw: 3, pad: 1 };
            assert!(use_direct(&g));
            let batch = 2;
            let x: Vec<f64> = (0..batch * cin * h * w).map(|i| ((i * 37 % 101) as f64 - 50.0) / 17.0).collect();
            let wt: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 13 % 29) as f64 - 14.0) / 9.0).collect();
            let dout: Vec<f64> = (0..batch * cout * h * w).map(|i| ((i * 11 % 23) as f64 - 11.0) / 5.0).collect();
            let (y, dw, dx) = gemm_path(&x, batch, &g, &wt, &dout);
            let got = conv2d_forward(&x, batch, &g, &wt, None);
            let mut gdw = vec![0.0; wt.len()];
            let gdx = conv2d_backward(&x, batch, &g, &wt, &dout, Some(&mut gdw), None, true).unwrap();
            for (a, b) in got.iter().zip(&y).chain(gdw.iter().zip(&dw)).chain(gdx.iter().zip(&dx)) {
                assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }
}
