//! Per-slice contour extraction and truncated Gaussian contour heatmaps.
//!
//! Coordinates are `(i, j)` with `i` along x and `j` along y, matching the
//! x-fastest layout of [`Volume`] slices.

use thiserror::Error;

use crate::volume::{Geometry, LabelVolume, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum ContourError {
    #[error("mask value {value} at index {index} is not binary")]
    NonBinary { index: usize, value: u8 },
    #[error("mask length {len} does not match dims {dims:?}")]
    Length { len: usize, dims: [usize; 2] },
    #[error("sigma and truncation must be positive and finite (sigma {sigma}, truncation {truncation})")]
    Parameters { sigma: f64, truncation: f64 },
}

pub const DEFAULT_SIGMA: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourSet {
    pub slice: usize,
    pub points: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContourHeatmap {
    pub dims: [usize; 2],
    pub sigma: f64,
    pub truncation: f64,
    pub data: Vec<f64>,
}

impl ContourHeatmap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.dims[0] * j]
    }
}

/// Foreground pixels with at least one background 4-neighbor; pixels outside
/// the slice count as background.
pub fn extract_contour(mask: &[u8], dims: [usize; 2], slice: usize) -> Result<ContourSet, ContourError> {
    let [nx, ny] = dims;
    if mask.len() != nx * ny {
        return Err(ContourError::Length { len: mask.len(), dims });
    }
    if let Some((index, &value)) = mask.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(ContourError::NonBinary { index, value });
    }
    let fg = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny && mask[i as usize + nx * j as usize] == 1;
    let mut points = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if mask[i + nx * j] == 0 {
                continue;
            }
            let (a, b) = (i as isize, j as isize);
            if !(fg(a - 1, b) && fg(a + 1, b) && fg(a, b - 1) && fg(a, b + 1)) {
                points.push((i, j));
            }
        }
    }
    Ok(ContourSet { slice, points })
}

fn check_params(sigma: f64, truncation: f64) -> Result<(), ContourError> {
    if !(sigma > 0.0 && sigma.is_finite() && truncation > 0.0 && truncation.is_finite()) {
        return Err(ContourError::Parameters { sigma, truncation });
    }
    Ok(())
}

/// Sum over contour points within distance `< truncation` of
/// `exp(-d^2 / (2 sigma^2)) / (sigma sqrt(2 pi))`.
pub fn gaussian_contour_map(
    contour: &ContourSet,
    dims: [usize; 2],
    sigma: f64,
    truncation: f64,
) -> Result<ContourHeatmap, ContourError> {
    check_params(sigma, truncation)?;
    let [nx, ny] = dims;
    let mut data = vec![0.0f64; nx * ny];
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let inv = 1.0 / (2.0 * sigma * sigma);
    let t2 = truncation * truncation;
    let r = truncation.ceil() as isize;
    for &(ci, cj) in &contour.points {
        let (ci, cj) = (ci as isize, cj as isize);
        for j in (cj - r).max(0)..=(cj + r).min(ny as isize - 1) {
            for i in (ci - r).max(0)..=(ci + r).min(nx as isize - 1) {
                let d2 = ((i - ci) * (i - ci) + (j - cj) * (j - cj)) as f64;
                if d2 < t2 {
                    data[i as usize + nx * j as usize] += norm * (-d2 * inv).exp();
                }
            }
        }
    }
    Ok(ContourHeatmap { dims, sigma, truncation, data })
}

/// Heatmap of every axial slice of `gt`.
pub fn heatmap_stack(gt: &LabelVolume, sigma: f64, truncation: f64) -> Result<Vec<ContourHeatmap>, ContourError> {
    check_params(sigma, truncation)?;
    let [nx, ny, nz] = gt.dims();
    (0..nz)
        .map(|z| {
            let c = extract_contour(gt.slice(z), [nx, ny], z)?;
            gaussian_contour_map(&c, [nx, ny], sigma, truncation)
        })
        .collect()
}

/// Packs a heatmap stack into an f32 volume with the label's geometry.
pub fn stack_to_volume(stack: &[ContourHeatmap], geom: Geometry) -> Volume {
    let mut data = Vec::with_capacity(geom.len());
    for h in stack {
        data.extend(h.data.iter().map(|&v| v as f32));
    }
    Volume::new(geom, data).expect("heatmap stack matches label geometry")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(i: usize, j: usize) -> ContourSet {
        ContourSet { slice: 0, points: vec![(i, j)] }
    }

    #[test]
    fn single_point_values() {
        let h = gaussian_contour_map(&point(8, 8), [17, 17], 5.0, 5.0).unwrap();
        assert!((h.get(8, 8) - 0.0797885).abs() < 5e-8);
        assert!((h.get(8, 11) - 0.0797885 * (-0.18f64).exp()).abs() < 5e-8);
        assert_eq!(h.get(8, 13), 0.0);
        assert!(h.get(11, 12) == 0.0 && h.get(12, 11) == 0.0);
    }

    #[test]
    fn empty_contour_gives_zero_map() {
        let c = ContourSet { slice: 0, points: vec![] };
        let h = gaussian_contour_map(&c, [5, 4], 5.0, 5.0).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_and_empty_slice() {
        let mut m = vec![0u8; 25];
        assert!(extract_contour(&m, [5, 5], 0).unwrap().points.is_empty());
        m[12] = 1;
        assert_eq!(extract_contour(&m, [5, 5], 0).unwrap().points, vec![(2, 2)]);
    }

    #[test]
    fn block_perimeter() {
        let mut m = vec![0u8; 64];
        for j in 2..6 {
            for i in 2..6 {
                m[i + 8 * j] = 1;
            }
        }
        let c = extract_contour(&m, [8, 8], 0).unwrap();
        assert_eq!(c.points.len(), 12);
        assert!(!c.points.contains(&(3, 3)));
    }

    #[test]
    fn border_pixels_are_contour() {
        let m = vec![1u8; 9];
        let c = extract_contour(&m, [3, 3], 0).unwrap();
        assert_eq!(c.points.len(), 8);
    }

    #[test]
    fn rejects_non_binary_and_bad_params() {
        assert!(matches!(extract_contour(&[0, 2], [2, 1], 0), Err(ContourError::NonBinary { index: 1, value: 2 })));
        assert!(gaussian_contour_map(&point(0, 0), [2, 2], 0.0, 1.0).is_err());
    }
}
