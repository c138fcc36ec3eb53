//! Coarse organ localization and fixed-size region cropping.

use super::components::largest_component;
use super::infer::{infer, InferConfig};
use super::train::{train, TrainCase, TrainConfig, TrainError, TrainHooks};
use crate::model::{build_topology, ModelError, ModelState, TopologyConfig};
use crate::preprocess::{downsample, downsample_label};
use crate::volume::{Geometry, LabelVolume, Volume, VolumeError};

pub const COARSE_FACTOR: usize = 4;

/// Anything producing a binary mask on the coarse grid.
pub trait CoarseSegmenter {
    fn segment(&self, coarse: &Volume) -> Result<LabelVolume, ModelError>;
}

/// A plain U-Net applied slice-wise to square, zero-padded coarse slices.
pub struct UnetLocalizer {
    pub model: ModelState,
}

fn padded_side(v: &Volume, multiple: usize) -> usize {
    let [nx, ny, _] = v.dims();
    nx.max(ny).div_ceil(multiple) * multiple
}

/// Pads slices to a square side divisible by `multiple` using `fill`.
pub fn pad_slices(v: &Volume, multiple: usize, fill: f32) -> Result<Volume, VolumeError> {
    let s = padded_side(v, multiple);
    v.crop([0, 0, 0], [s, s, v.dims()[2]], fill)
}

impl CoarseSegmenter for UnetLocalizer {
    fn segment(&self, coarse: &Volume) -> Result<LabelVolume, ModelError> {
        let m = 1 << self.model.config().depth;
        let padded = pad_slices(coarse, m, -1.0).map_err(|e| ModelError::Input(e.to_string()))?;
        let out = infer(&self.model, &padded, &InferConfig { largest_component: false, ..Default::default() })?;
        out.mask.crop([0, 0, 0], coarse.dims()).map_err(|e| ModelError::Input(e.to_string()))
    }
}

/// Trains the localizer on whole coarse slices of preprocessed volumes.
pub fn train_localizer(cases: &[(Volume, LabelVolume)], cfg: &TrainConfig, seed: u64) -> Result<UnetLocalizer, TrainError> {
    let mut topo = TopologyConfig::named("unet")?;
    topo.base_width = 4;
    let m = 1 << topo.depth;
    let mut tc = Vec::with_capacity(cases.len());
    let mut side = 0;
    for (i, (v, l)) in cases.iter().enumerate() {
        let cv = downsample(v, COARSE_FACTOR).map_err(crate::preprocess::DataError::from)?;
        let cl = downsample_label(l, COARSE_FACTOR).map_err(crate::preprocess::DataError::from)?;
        side = side.max(padded_side(&cv, m));
        tc.push((i, cv, cl));
    }
    let cases: Vec<TrainCase> = tc
        .into_iter()
        .map(|(i, cv, cl)| {
            let size = [side, side, cv.dims()[2]];
            let img = cv.crop([0, 0, 0], size, -1.0).map_err(crate::preprocess::DataError::from)?;
            let lab = cl.crop([0, 0, 0], size).map_err(crate::preprocess::DataError::from)?;
            TrainCase::new(format!("coarse{i}"), img, lab, 1.0, 1.0)
        })
        .collect::<Result<_, _>>()?;
    let cfg = TrainConfig { cold_start_epochs: 0, crop_size: side, patch_size: side, seed, ..cfg.clone() };
    let model = build_topology(&topo, seed)?;
    let (model, _) = train(model, &cases, &cfg, &mut TrainHooks::default())?;
    Ok(UnetLocalizer { model })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub center: [usize; 3],
    pub fallback: bool,
    /// Voxel of `v` at the region's first corner (may be negative).
    pub origin: [isize; 3],
    pub region: Volume,
}

/// Maps the centroid of the coarse mask's largest component back to the
/// full grid; `None` for an empty mask.
pub fn coarse_center(coarse_mask: &LabelVolume, factor: usize, dims: [usize; 3]) -> Option<[usize; 3]> {
    let c = largest_component(coarse_mask).centroid()?;
    Some(std::array::from_fn(|a| {
        let full = (c[a] + 0.5) * factor as f64 - 0.5;
        (full.round().max(0.0) as usize).min(dims[a] - 1)
    }))
}

/// Origin of a `crop`-cube centered on `center`.
pub fn region_origin(center: [usize; 3], crop: usize) -> [isize; 3] {
    center.map(|c| c as isize - (crop / 2) as isize)
}

/// Localizes the organ in a preprocessed volume and crops a zero-padded
/// `crop`-cube around it. An empty coarse prediction falls back to the
/// volume center.
pub fn localize(v: &Volume, seg: &dyn CoarseSegmenter, crop: usize) -> Result<Localization, ModelError> {
    let coarse = downsample(v, COARSE_FACTOR).map_err(|e| ModelError::Input(e.to_string()))?;
    let mask = seg.segment(&coarse)?;
    let dims = v.dims();
    let (center, fallback) = match coarse_center(&mask, COARSE_FACTOR, dims) {
        Some(c) => (c, false),
        None => (dims.map(|d| d / 2), true),
    };
    let origin = region_origin(center, crop);
    let region = v.crop(origin, [crop; 3], 0.0).map_err(|e| ModelError::Input(e.to_string()))?;
    Ok(Localization { center, fallback, origin, region })
}

/// Segmenter returning a fixed mask, for tests and oracle runs.
pub struct FixedMask(pub LabelVolume);

impl CoarseSegmenter for FixedMask {
    fn segment(&self, coarse: &Volume) -> Result<LabelVolume, ModelError> {
        if self.0.dims() != coarse.dims() {
            return Err(ModelError::Input(format!("mask {:?} vs coarse {:?}", self.0.dims(), coarse.dims())));
        }
        Ok(self.0.clone())
    }
}

/// Whether every foreground voxel of `gt` lies inside the region.
pub fn contains(gt: &LabelVolume, origin: [isize; 3], crop: usize) -> bool {
    match gt.bounding_box() {
        None => true,
        Some((lo, hi)) => {
            (0..3).all(|a| lo[a] as isize >= origin[a] && (hi[a] as isize) < origin[a] + crop as isize)
        }
    }
}

/// Pastes a region mask back into a full-size empty label.
pub fn paste(region: &LabelVolume, origin: [isize; 3], full: Geometry) -> LabelVolume {
    let mut out = LabelVolume::empty(full);
    let [rx, ry, rz] = region.dims();
    let [nx, ny, nz] = full.dims;
    for z in 0..rz {
        for y in 0..ry {
            for x in 0..rx {
                if !region.get(x, y, z) {
                    continue;
                }
                let p = [x as isize + origin[0], y as isize + origin[1], z as isize + origin[2]];
                if p.iter().all(|&c| c >= 0) && (p[0] as usize) < nx && (p[1] as usize) < ny && (p[2] as usize) < nz {
                    out.set(p[0] as usize, p[1] as usize, p[2] as usize, true);
                }
            }
        }
    }
    out
}
