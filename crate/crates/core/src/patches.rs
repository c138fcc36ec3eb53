//! 2.5D slice stacks and training patch sampling.

use rand::Rng;

use crate::preprocess::DataError;
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::{LabelVolume, Volume};

pub const DEFAULT_PATCH: usize = 64;
pub const DEFAULT_SLICES: usize = 3;

/// `k` consecutive axial slices of a `p x p` window, slice-major, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub k: usize,
    pub p: usize,
    pub data: Vec<f32>,
    /// Voxel coordinates of the window's first in-plane pixel and the
    /// middle slice.
    pub origin: [isize; 3],
}

impl SliceStack {
    pub fn middle(&self) -> usize {
        self.k / 2
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.p * self.p;
        &self.data[c * n..(c + 1) * n]
    }
}

/// One training example: the stack and its middle-slice targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub stack: SliceStack,
    pub mask: Vec<u8>,
    pub heatmap: Vec<f32>,
}

fn in_plane<T: Copy>(src: &[T], nx: usize, ny: usize, x0: isize, y0: isize, p: usize, fill: T, out: &mut Vec<T>) {
    for j in 0..p as isize {
        for i in 0..p as isize {
            let (x, y) = (x0 + i, y0 + j);
            if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
                out.push(src[x as usize + nx * y as usize]);
            } else {
                out.push(fill);
            }
        }
    }
}

/// Stack of `k` slices centered on `z`; out-of-range slices replicate the
/// nearest edge slice, out-of-range pixels are zero.
pub fn extract_stack(v: &Volume, x0: isize, y0: isize, z: usize, p: usize, k: usize) -> SliceStack {
    let [nx, ny, nz] = v.dims();
    let half = (k / 2) as isize;
    let mut data = Vec::with_capacity(k * p * p);
    for dz in -half..=half {
        let zz = (z as isize + dz).clamp(0, nz as isize - 1) as usize;
        in_plane(v.slice(zz), nx, ny, x0, y0, p, 0.0, &mut data);
    }
    SliceStack { k, p, data, origin: [x0, y0, z as isize] }
}

/// Middle-slice window of a label, same cropping rule as [`extract_stack`].
pub fn extract_mask(l: &LabelVolume, x0: isize, y0: isize, z: usize, p: usize) -> Vec<u8> {
    let [nx, ny, _] = l.dims();
    let mut out = Vec::with_capacity(p * p);
    in_plane(l.slice(z), nx, ny, x0, y0, p, 0, &mut out);
    out
}

pub fn extract_plane(v: &Volume, x0: isize, y0: isize, z: usize, p: usize) -> Vec<f32> {
    let [nx, ny, _] = v.dims();
    let mut out = Vec::with_capacity(p * p);
    in_plane(v.slice(z), nx, ny, x0, y0, p, 0.0, &mut out);
    out
}

/// Inclusive range of valid window origins along one axis whose center lies
/// in the organ range dilated by `p / 2`.
fn center_range(lo: usize, hi: usize, n: usize, p: usize) -> (usize, usize) {
    let half = p / 2;
    let cmin = half;
    let cmax = n - p + half;
    let a = lo.saturating_sub(half).max(cmin);
    let b = (hi + half).min(cmax);
    (a.min(b), b)
}

/// `n` random middle-slice patches whose centers lie inside the organ
/// bounding box dilated by half the `p x p x k` patch extent. Windows stay
/// inside the volume in-plane; stacks replicate edge slices along z.
pub fn sample_training_patches(
    v: &Volume,
    gt: &LabelVolume,
    heatmaps: &Volume,
    p: usize,
    k: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Patch>, DataError> {
    if v.geometry() != gt.geometry() || v.geometry() != heatmaps.geometry() {
        return Err(DataError::GeometryMismatch(format!(
            "image {:?}, label {:?}, heatmap {:?}",
            v.dims(),
            gt.dims(),
            heatmaps.dims()
        )));
    }
    if k % 2 == 0 || p == 0 {
        return Err(DataError::Invalid(format!("stack depth {k} must be odd and patch {p} positive")));
    }
    let dims = v.dims();
    if p > dims[0] || p > dims[1] {
        return Err(DataError::PatchTooLarge { patch: [p, p, k], dims });
    }
    let (lo, hi) = gt.bounding_box().ok_or(DataError::EmptyOrgan)?;
    let rx = center_range(lo[0], hi[0], dims[0], p);
    let ry = center_range(lo[1], hi[1], dims[1], p);
    let rz = (lo[2].saturating_sub(k / 2), (hi[2] + k / 2).min(dims[2] - 1));
    let mut rng = rng::stream(seed, "patches");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let cx = rng.random_range(rx.0..=rx.1);
        let cy = rng.random_range(ry.0..=ry.1);
        let cz = rng.random_range(rz.0..=rz.1);
        let (x0, y0) = ((cx - p / 2) as isize, (cy - p / 2) as isize);
        out.push(Patch {
            stack: extract_stack(v, x0, y0, cz, p, k),
            mask: extract_mask(gt, x0, y0, cz, p),
            heatmap: extract_plane(heatmaps, x0, y0, cz, p),
        });
    }
    Ok(out)
}

/// Batches stacks into a `[B, k, p, p]` tensor.
pub fn stacks_to_tensor<'a>(stacks: impl IntoIterator<Item = &'a SliceStack>) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut b = 0;
    let mut shape = (0, 0);
    for s in stacks {
        shape = (s.k, s.p);
        data.extend_from_slice(&s.data);
        b += 1;
    }
    Tensor::from_vec(&[b, shape.0, shape.1, shape.1], data).expect("uniform stacks")
}
