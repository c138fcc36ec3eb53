//! Channel mosaics of the fused features at one TCL level: rows are the
//! segmentation, contour and TCL features, columns the first channels, all
//! on one grayscale scale.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::model::{load_checkpoint, ModelError, ModelState};
use crate::patches::{extract_stack, stacks_to_tensor};
use crate::volume::Volume;

pub const MOSAIC_CHANNELS: usize = 14;
const GAP: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("{0}")]
    Level(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Resolves a level name (`E2`, `B`, `D1`, ...), index or `top` (the last
/// fused level) to a TCL level index.
pub fn resolve_level(model: &ModelState, level: &str) -> Result<usize, FeatureError> {
    let cfg = model.config();
    let tcl = model.tcl_levels();
    if tcl.is_empty() {
        return Err(FeatureError::Level(format!("{} has no TCL levels", cfg.name())));
    }
    let names: Vec<String> = tcl.iter().map(|&l| cfg.level_name(l)).collect();
    let found = if level.eq_ignore_ascii_case("top") {
        tcl.last().copied()
    } else {
        (0..cfg.levels()).find(|&l| cfg.level_name(l).eq_ignore_ascii_case(level) || l.to_string() == level)
    };
    match found {
        Some(l) if tcl.contains(&l) => Ok(l),
        _ => Err(FeatureError::Level(format!(
            "level '{level}' has no TCL block in {}; valid levels: {}",
            cfg.name(),
            names.join(", ")
        ))),
    }
}

/// Renders the mosaic of slice `z` of `region` as a grayscale image of
/// 3 rows by `min(C, 14)` tiles.
pub fn feature_mosaic(model: &ModelState, region: &Volume, z: usize, level: &str) -> Result<GrayImage, FeatureError> {
    let l = resolve_level(model, level)?;
    let [nx, ny, nz] = region.dims();
    if nx != ny || z >= nz {
        return Err(FeatureError::Input(format!("need square slices and z < {nz}, got {nx}x{ny} and z = {z}")));
    }
    let x = stacks_to_tensor([&extract_stack(region, 0, 0, z, nx, model.config().in_slices)]);
    let triples = model.feature_triples(&x)?;
    let t = triples.iter().find(|t| t.level == l).expect("resolved level is fused");
    let [_, c, h, w] = t.seg.dims4("features").map_err(ModelError::from)?;
    let n = c.min(MOSAIC_CHANNELS);
    let rows = [&t.seg, &t.cont, &t.tcl];
    let shown = |tensor: &crate::tensor::Tensor<f32>| tensor.data()[..n * h * w].to_vec();
    let all: Vec<f32> = rows.iter().flat_map(|r| shown(r)).collect();
    let lo = all.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = all.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let (tw, th) = (w as u32, h as u32);
    let mut img = GrayImage::from_pixel(n as u32 * (tw + GAP) - GAP, 3 * (th + GAP) - GAP, Luma([255]));
    for (r, tensor) in rows.iter().enumerate() {
        let d = tensor.data();
        for ch in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = d[(ch * h + y) * w + xx];
                    let g = ((v - lo) * scale).round().clamp(0.0, 255.0) as u8;
                    img.put_pixel(ch as u32 * (tw + GAP) + xx as u32, r as u32 * (th + GAP) + y as u32, Luma([g]));
                }
            }
        }
    }
    Ok(img)
}

/// Loads a checkpoint and writes the mosaic of `region` slice `z` as PNG.
pub fn dump_features(ckpt: &Path, region: &Volume, z: usize, level: &str, out: &Path) -> Result<(u32, u32), FeatureError> {
    let model = load_checkpoint(ckpt, None)?;
    let img = feature_mosaic(&model, region, z, level)?;
    img.save_with_format(out, image::ImageFormat::Png)?;
    Ok(img.dimensions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_topology, TopologyConfig};
    use crate::volume::Geometry;

    fn region() -> Volume {
        let g = Geometry::new([16, 16, 4], [1.0; 3]).unwrap();
        Volume::from_fn(g, |x, y, z| ((x * 3 + y * 5 + z) % 7) as f32 / 3.0 - 1.0)
    }

    #[test]
    fn hf6_top_level_has_three_rows_of_fourteen() {
        let mut cfg = TopologyConfig::named("hf-6").unwrap();
        cfg.base_width = 16;
        let m = build_topology(&cfg, 1).unwrap();
        let img = feature_mosaic(&m, &region(), 1, "top").unwrap();
        assert_eq!(img.dimensions(), (14 * 16 + 13 * GAP, 3 * 16 + 2 * GAP));
        let again = feature_mosaic(&m, &region(), 1, "D1").unwrap();
        assert_eq!(img, again);
    }

    #[test]
    fn level_errors() {
        let unet = build_topology(&TopologyConfig::named("unet").unwrap(), 0).unwrap();
        assert!(resolve_level(&unet, "top").unwrap_err().to_string().contains("no TCL levels"));
        let hf2 = build_topology(&TopologyConfig::named("hf-2").unwrap(), 0).unwrap();
        let e = resolve_level(&hf2, "E1").unwrap_err().to_string();
        assert!(e.contains("valid levels: D2, D1"), "{e}");
        assert_eq!(resolve_level(&hf2, "d2").unwrap(), 5);
    }
}
