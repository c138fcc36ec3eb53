//! Resampling, body cropping and intensity normalization.

use thiserror::Error;

use crate::volume::{Geometry, LabelVolume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no voxel above body threshold {0}")]
    EmptyForeground(f32),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("patch {patch:?} exceeds volume extent {dims:?}")]
    PatchTooLarge { patch: [usize; 3], dims: [usize; 3] },
    #[error("ground truth is empty")]
    EmptyOrgan,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Dims after resampling `dims` from `spacing` to `target`.
pub fn resampled_dims(dims: [usize; 3], spacing: [f32; 3], target: [f32; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] as f64 / target[a] as f64).round() as usize).max(1);
    }
    out
}

fn trilinear(g: &Geometry, data: &[f32], p: [f64; 3]) -> f64 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0.0f64; 3];
    for a in 0..3 {
        let n = g.dims[a];
        let c = p[a].clamp(0.0, (n - 1) as f64);
        let lo = c.floor() as usize;
        i0[a] = lo.min(n - 1);
        i1[a] = (lo + 1).min(n - 1);
        f[a] = c - lo as f64;
    }
    let at = |x: usize, y: usize, z: usize| data[g.index(x, y, z)] as f64;
    let c00 = at(i0[0], i0[1], i0[2]) * (1.0 - f[0]) + at(i1[0], i0[1], i0[2]) * f[0];
    let c10 = at(i0[0], i1[1], i0[2]) * (1.0 - f[0]) + at(i1[0], i1[1], i0[2]) * f[0];
    let c01 = at(i0[0], i0[1], i1[2]) * (1.0 - f[0]) + at(i1[0], i0[1], i1[2]) * f[0];
    let c11 = at(i0[0], i1[1], i1[2]) * (1.0 - f[0]) + at(i1[0], i1[1], i1[2]) * f[0];
    let c0 = c00 * (1.0 - f[1]) + c10 * f[1];
    let c1 = c01 * (1.0 - f[1]) + c11 * f[1];
    c0 * (1.0 - f[2]) + c1 * f[2]
}

fn resample_raw(g: &Geometry, data: &[f32], target: [f32; 3]) -> Result<(Geometry, Vec<f64>), VolumeError> {
    let dims = resampled_dims(g.dims, g.spacing, target);
    let ng = Geometry::new(dims, target)?;
    let ratio: [f64; 3] = std::array::from_fn(|a| target[a] as f64 / g.spacing[a] as f64);
    let mut out = Vec::with_capacity(ng.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 * ratio[0], y as f64 * ratio[1], z as f64 * ratio[2]];
                out.push(trilinear(g, data, p));
            }
        }
    }
    Ok((ng, out))
}

/// Trilinear resampling onto a grid of spacing `target`. Voxel `j` samples
/// physical position `j * target` (voxel 0 anchored at the origin); positions
/// past the last voxel clamp to the edge.
pub fn resample(v: &Volume, target: [f32; 3]) -> Result<Volume, VolumeError> {
    if v.spacing() == target {
        return Ok(v.clone());
    }
    let (g, d) = resample_raw(v.geometry(), v.data(), target)?;
    Volume::new(g, d.into_iter().map(|x| x as f32).collect())
}

/// Label resampling: trilinear interpolation of the indicator, kept where >= 0.5.
pub fn resample_label(l: &LabelVolume, target: [f32; 3]) -> Result<LabelVolume, VolumeError> {
    if l.spacing() == target {
        return Ok(l.clone());
    }
    let as_f32: Vec<f32> = l.data().iter().map(|&v| v as f32).collect();
    let (g, d) = resample_raw(l.geometry(), &as_f32, target)?;
    LabelVolume::new(g, d.into_iter().map(|x| (x >= 0.5) as u8).collect())
}

/// Bounding box of `data > threshold`, padded by `pad` voxels and clamped.
pub fn body_box(v: &Volume, threshold: f32, pad: usize) -> Result<([usize; 3], [usize; 3]), DataError> {
    let as_mask = LabelVolume::threshold(v, threshold);
    let (lo, hi) = as_mask.bounding_box().ok_or(DataError::EmptyForeground(threshold))?;
    let dims = v.dims();
    let lo = lo.map(|c| c.saturating_sub(pad));
    let hi: [usize; 3] = std::array::from_fn(|a| (hi[a] + pad).min(dims[a] - 1));
    Ok((lo, hi))
}

/// Min-max normalization to `[-1, 1]`; a constant volume maps to all zeros.
pub fn normalize(v: &mut Volume) {
    let (mn, mx) = v.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(mx > mn) {
        v.data_mut().fill(0.0);
        return;
    }
    let (mn, range) = (mn as f64, mx as f64 - mn as f64);
    for x in v.data_mut() {
        let t = 2.0 * (*x as f64 - mn) / range - 1.0;
        *x = t.clamp(-1.0, 1.0) as f32;
    }
}

pub const BODY_PAD: usize = 2;
pub const DEFAULT_BODY_THRESHOLD: f32 = -0.95;

/// Where a preprocessed case came from in the resampled grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropInfo {
    pub origin: [usize; 3],
    pub resampled_dims: [usize; 3],
}

/// Resample, crop to the padded body box, normalize to `[-1, 1]`.
pub fn preprocess(v: &Volume, target_spacing: [f32; 3], body_threshold: f32) -> Result<Volume, DataError> {
    Ok(preprocess_with_info(v, target_spacing, body_threshold)?.0)
}

pub fn preprocess_with_info(
    v: &Volume,
    target_spacing: [f32; 3],
    body_threshold: f32,
) -> Result<(Volume, CropInfo), DataError> {
    Geometry::new(target_spacing.map(|_| 1), target_spacing)?;
    let r = resample(v, target_spacing)?;
    let (lo, hi) = body_box(&r, body_threshold, BODY_PAD)?;
    let size: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let mut out = r.crop(lo.map(|c| c as isize), size, 0.0)?;
    normalize(&mut out);
    Ok((out, CropInfo { origin: lo, resampled_dims: r.dims() }))
}

/// Preprocesses an image and carries its label through the same geometry.
pub fn preprocess_case(
    img: &Volume,
    label: &LabelVolume,
    target_spacing: [f32; 3],
    body_threshold: f32,
) -> Result<(Volume, LabelVolume), DataError> {
    if img.geometry() != label.geometry() {
        return Err(DataError::GeometryMismatch(format!("{:?} vs {:?}", img.dims(), label.dims())));
    }
    let (out, info) = preprocess_with_info(img, target_spacing, body_threshold)?;
    let rl = resample_label(label, target_spacing)?;
    let l = rl.crop(info.origin.map(|c| c as isize), out.dims())?;
    Ok((out, l))
}

/// Block-average downsampling by an integer factor (partial edge blocks
/// average the voxels they contain). Spacing scales by the factor.
pub fn downsample(v: &Volume, factor: usize) -> Result<Volume, VolumeError> {
    let dims = v.dims();
    let nd = dims.map(|d| d.div_ceil(factor));
    let g = Geometry::new(nd, v.spacing().map(|s| s * factor as f32))?;
    let mut sum = vec![0.0f64; g.len()];
    let mut cnt = vec![0u32; g.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = g.index(x / factor, y / factor, z / factor);
                sum[i] += v.get(x, y, z) as f64;
                cnt[i] += 1;
            }
        }
    }
    Volume::new(g, sum.iter().zip(&cnt).map(|(s, &c)| (s / c as f64) as f32).collect())
}

/// Majority-vote label downsampling matching [`downsample`].
pub fn downsample_label(l: &LabelVolume, factor: usize) -> Result<LabelVolume, VolumeError> {
    let d = downsample(&l.to_volume(), factor)?;
    LabelVolume::new(*d.geometry(), d.data().iter().map(|&v| (v >= 0.5) as u8).collect())
}
