//! Slice-sweep inference over a cropped region.

use super::components::largest_component;
use crate::model::{ModelError, ModelState};
use crate::patches::{extract_stack, stacks_to_tensor};
use crate::volume::{LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    /// Slices per forward pass.
    pub batch: usize,
    pub largest_component: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { batch: 16, largest_component: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub mask: LabelVolume,
    /// Foreground probability per voxel.
    pub probs: Volume,
    pub heatmap: Option<Volume>,
}

/// Predicts every axial slice from its `(s-1, s, s+1)` stack (edges
/// replicated), binarizes by argmax and optionally keeps the largest 3-D
/// component.
pub fn infer(model: &ModelState, region: &Volume, cfg: &InferConfig) -> Result<InferOutput, ModelError> {
    let [nx, ny, nz] = region.dims();
    if nx != ny {
        return Err(ModelError::Input(format!("region slices must be square, got {nx}x{ny}")));
    }
    let k = model.config().in_slices;
    let plane = nx * ny;
    let mut probs = Vec::with_capacity(region.geometry().len());
    let mut heat = model.config().has_contour_branch().then(|| Vec::with_capacity(region.geometry().len()));
    let zs: Vec<usize> = (0..nz).collect();
    for chunk in zs.chunks(cfg.batch.max(1)) {
        let stacks: Vec<_> = chunk.iter().map(|&z| extract_stack(region, 0, 0, z, nx, k)).collect();
        let pred = model.predict(&stacks_to_tensor(&stacks))?;
        probs.extend_from_slice(pred.probs.data());
        if let (Some(h), Some(c)) = (heat.as_mut(), pred.contour.as_ref()) {
            h.extend_from_slice(c.data());
        }
    }
    debug_assert_eq!(probs.len(), plane * nz);
    let g = *region.geometry();
    let raw = LabelVolume::new(g, probs.iter().map(|&p| (p > 0.5) as u8).collect()).expect("binary");
    let mask = if cfg.largest_component { largest_component(&raw) } else { raw };
    Ok(InferOutput {
        mask,
        probs: Volume::new(g, probs).expect("geometry"),
        heatmap: heat.map(|h| Volume::new(g, h).expect("geometry")),
    })
}
