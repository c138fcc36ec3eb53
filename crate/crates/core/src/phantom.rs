//! Synthetic low-contrast phantoms with exact ground truth.
//!
//! The organ is an ellipsoid whose radius is modulated by smooth, band-limited
//! angular noise. It sits inside an elliptic-cylinder "body" surrounded by air.
//! Image intensity inside the body is `background + contrast * blur(label)`
//! plus Gaussian noise; air is a noise-free constant.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::volume::{Geometry, LabelVolume, Volume, VolumeError};

/// Voxels that must separate the organ from every volume face.
pub const ORGAN_MARGIN: f64 = 4.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("organ does not fit: axis {axis} spans voxels [{lo:.1}, {hi:.1}] but must stay within [{min:.1}, {max:.1}] (4-voxel margin)")]
    DoesNotFit { axis: char, lo: f64, hi: f64, min: f64, max: f64 },
    #[error("organ voxel ({0}, {1}, {2}) lies outside the body")]
    OutsideBody(usize, usize, usize),
    #[error("invalid phantom parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Organ center in voxel coordinates.
    pub organ_center: [f64; 3],
    /// Organ semi-axes in mm.
    pub radii: [f64; 3],
    /// Peak relative radius perturbation (0 gives an exact ellipsoid).
    pub radial_perturbation_amplitude: f64,
    pub contrast_delta: f64,
    pub noise_sigma: f64,
    /// Gaussian blur of the organ boundary, in voxels.
    pub boundary_blur_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub background: f64,
    #[serde(default = "default_air")]
    pub air_level: f64,
    /// Body semi-axes as a fraction of the in-plane half extents; values
    /// `>= sqrt(2)` make the whole volume body.
    #[serde(default = "default_body_fraction")]
    pub body_fraction: f64,
    /// Level of a noise-free posterior bone column inside the body.
    #[serde(default = "default_bone")]
    pub bone_level: f64,
    /// Bone column radius as a fraction of the smaller body half extent;
    /// 0 disables it.
    #[serde(default = "default_bone_fraction")]
    pub bone_fraction: f64,
}

/// Outside-body level, far below the noise tails of soft tissue so that
/// min-max normalization anchors on it.
pub fn default_air() -> f64 {
    -4.0
}
fn default_body_fraction() -> f64 {
    0.92
}

/// Bone level, far above the noise tails of soft tissue so that min-max
/// normalization anchors on it.
pub fn default_bone() -> f64 {
    6.0
}
fn default_bone_fraction() -> f64 {
    0.09
}

/// Offset of the bone column center behind the body center, as a fraction
/// of the body half extent in y.
const BONE_OFFSET: f64 = 0.78;

impl PhantomSpec {
    /// Centered organ with the default intensity model.
    pub fn centered(dims: [usize; 3], spacing: [f32; 3], radii: [f64; 3], seed: u64) -> Self {
        Self {
            dims,
            spacing,
            organ_center: dims.map(|d| (d as f64 - 1.0) / 2.0),
            radii,
            radial_perturbation_amplitude: 0.0,
            contrast_delta: 1.0,
            noise_sigma: 0.0,
            boundary_blur_sigma: 0.0,
            seed,
            background: 0.0,
            air_level: default_air(),
            body_fraction: default_body_fraction(),
            bone_level: default_bone(),
            bone_fraction: default_bone_fraction(),
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        Geometry::new(self.dims, self.spacing)?;
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(PhantomError::Invalid(format!("radii must be positive, got {:?}", self.radii)));
        }
        if !(0.0..1.0).contains(&self.radial_perturbation_amplitude) {
            return Err(PhantomError::Invalid("radial_perturbation_amplitude must be in [0, 1)".into()));
        }
        if self.noise_sigma < 0.0 || self.boundary_blur_sigma < 0.0 || !(self.body_fraction > 0.0) {
            return Err(PhantomError::Invalid("noise, blur, and body fraction must be non-negative".into()));
        }
        if !(0.0..1.0 - BONE_OFFSET).contains(&self.bone_fraction) {
            return Err(PhantomError::Invalid(format!("bone_fraction must be in [0, {})", 1.0 - BONE_OFFSET)));
        }
        for (a, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
            let ext = self.radii[a] * (1.0 + self.radial_perturbation_amplitude) / self.spacing[a] as f64;
            let (lo, hi) = (self.organ_center[a] - ext, self.organ_center[a] + ext);
            let (min, max) = (ORGAN_MARGIN, self.dims[a] as f64 - 1.0 - ORGAN_MARGIN);
            if lo < min || hi > max {
                return Err(PhantomError::DoesNotFit { axis, lo, hi, min, max });
            }
        }
        Ok(())
    }
}

/// Smooth function on the unit sphere with values in `[-1, 1]`.
struct AngularNoise {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl AngularNoise {
    const TERMS: usize = 6;

    fn new(rng: &mut impl Rng) -> Self {
        let terms = (0..Self::TERMS)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let s = (1.0 - z * z).sqrt();
                let dir = [s * phi.cos(), s * phi.sin(), z];
                let freq = rng.random_range(0.5..2.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (dir, freq, phase)
            })
            .collect();
        Self { terms }
    }

    fn eval(&self, u: [f64; 3]) -> f64 {
        let s: f64 = self
            .terms
            .iter()
            .map(|(d, f, p)| (std::f64::consts::PI * f * (u[0] * d[0] + u[1] * d[1] + u[2] * d[2]) + p).sin())
            .sum();
        s / self.terms.len() as f64
    }
}

fn organ_mask(spec: &PhantomSpec, geom: Geometry) -> LabelVolume {
    let noise = AngularNoise::new(&mut rng::stream(spec.seed, "phantom/shape"));
    let amp = spec.radial_perturbation_amplitude;
    let s = spec.spacing.map(|v| v as f64);
    LabelVolume::from_fn(geom, |x, y, z| {
        let q = [
            (x as f64 - spec.organ_center[0]) * s[0] / spec.radii[0],
            (y as f64 - spec.organ_center[1]) * s[1] / spec.radii[1],
            (z as f64 - spec.organ_center[2]) * s[2] / spec.radii[2],
        ];
        let rho2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
        if amp == 0.0 {
            return rho2 <= 1.0;
        }
        let rho = rho2.sqrt();
        if rho == 0.0 {
            return true;
        }
        let u = q.map(|c| c / rho);
        rho <= 1.0 + amp * noise.eval(u)
    })
}

fn in_body(spec: &PhantomSpec, x: usize, y: usize) -> bool {
    let hx = spec.dims[0] as f64 / 2.0 * spec.body_fraction;
    let hy = spec.dims[1] as f64 / 2.0 * spec.body_fraction;
    let dx = (x as f64 + 0.5 - spec.dims[0] as f64 / 2.0) / hx;
    let dy = (y as f64 + 0.5 - spec.dims[1] as f64 / 2.0) / hy;
    dx * dx + dy * dy <= 1.0
}

fn in_bone(spec: &PhantomSpec, x: usize, y: usize) -> bool {
    if spec.bone_fraction <= 0.0 {
        return false;
    }
    let hx = spec.dims[0] as f64 / 2.0 * spec.body_fraction;
    let hy = spec.dims[1] as f64 / 2.0 * spec.body_fraction;
    let r = spec.bone_fraction * hx.min(hy);
    let dx = x as f64 + 0.5 - spec.dims[0] as f64 / 2.0;
    let dy = y as f64 + 0.5 - spec.dims[1] as f64 / 2.0 - BONE_OFFSET * hy;
    dx * dx + dy * dy <= r * r
}

/// Separable Gaussian blur (sigma in voxels, 3-sigma support, clamped edges).
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return v.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let g = *v.geometry();
    let mut cur: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let n = g.dims[axis] as isize;
        let stride = match axis {
            0 => 1,
            1 => g.dims[0],
            _ => g.dims[0] * g.dims[1],
        };
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % g.dims[axis]) as isize;
            let base = i as isize - pos * stride as isize;
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let p = (pos + ki as isize - radius).clamp(0, n - 1);
                acc += k * cur[(base + p * stride as isize) as usize];
            }
            *out = acc;
        }
        cur = next;
    }
    Volume::new(g, cur.into_iter().map(|x| x as f32).collect()).expect("same geometry")
}

/// Generates `(image, ground truth)`; a pure function of the spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume), PhantomError> {
    spec.validate()?;
    let geom = Geometry::new(spec.dims, spec.spacing)?;
    let label = organ_mask(spec, geom);
    let [nx, ny, nz] = spec.dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if label.get(x, y, z) && !in_body(spec, x, y) {
                    return Err(PhantomError::OutsideBody(x, y, z));
                }
            }
        }
    }
    let blurred = gaussian_blur(&label.to_volume(), spec.boundary_blur_sigma);
    let mut noise_rng = rng::stream(spec.seed, "phantom/noise");
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| PhantomError::Invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(geom.len());
    for z in 0..nz {
        for y in 0..ny {
            let body = (0..nx).map(|x| in_body(spec, x, y));
            for (x, b) in body.enumerate() {
                let v = if b && in_bone(spec, x, y) && !label.get(x, y, z) {
                    spec.bone_level
                } else if b {
                    let n = if spec.noise_sigma > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
                    spec.background + spec.contrast_delta * blurred.get(x, y, z) as f64 + n
                } else {
                    spec.air_level
                };
                data.push(v as f32);
            }
        }
    }
    Ok((Volume::new(geom, data)?, label))
}
