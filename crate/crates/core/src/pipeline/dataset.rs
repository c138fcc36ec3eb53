//! Phantom benchmark: case generation, preprocessing and an on-disk cache
//! keyed by a content hash of the data settings.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contour::DEFAULT_SIGMA;
use crate::phantom::{generate_phantom, PhantomError, PhantomSpec};
use crate::preprocess::{preprocess_case, DataError, DEFAULT_BODY_THRESHOLD};
use crate::rng;
use crate::volume::{read_label, read_volume, write_label, write_volume, LabelVolume, Volume, VolumeError};

pub const CACHE_ENV: &str = "HFUNET_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_train")]
    pub n_train: usize,
    #[serde(default = "d_val")]
    pub n_val: usize,
    #[serde(default = "d_test")]
    pub n_test: usize,
    #[serde(default = "d_dims")]
    pub dims: [usize; 3],
    #[serde(default = "d_spacing")]
    pub spacing: [f32; 3],
    #[serde(default = "d_target")]
    pub target_spacing: [f32; 3],
    /// Organ semi-axes are drawn uniformly from this range, in mm.
    #[serde(default = "d_radius")]
    pub radius_range: [f64; 2],
    /// Maximum organ-center offset from the volume center, in voxels.
    #[serde(default = "d_jitter")]
    pub center_jitter: f64,
    #[serde(default = "d_pert")]
    pub radial_perturbation_amplitude: f64,
    #[serde(default = "d_contrast")]
    pub contrast_delta: f64,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    #[serde(default = "d_blur")]
    pub boundary_blur_sigma: f64,
    #[serde(default = "d_air")]
    pub air_level: f64,
    #[serde(default = "d_bone")]
    pub bone_level: f64,
    #[serde(default = "d_threshold")]
    pub body_threshold: f32,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    /// Heatmap support radius; defaults to `sigma`.
    #[serde(default)]
    pub truncation: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn d_train() -> usize {
    8
}
fn d_val() -> usize {
    2
}
fn d_test() -> usize {
    4
}
fn d_dims() -> [usize; 3] {
    [96, 96, 48]
}
fn d_spacing() -> [f32; 3] {
    [1.0, 1.0, 2.0]
}
fn d_target() -> [f32; 3] {
    [1.0, 1.0, 1.0]
}
fn d_radius() -> [f64; 2] {
    [10.0, 17.0]
}
fn d_jitter() -> f64 {
    6.0
}
fn d_pert() -> f64 {
    0.12
}
fn d_contrast() -> f64 {
    1.0
}
fn d_noise() -> f64 {
    0.6
}
fn d_blur() -> f64 {
    1.0
}
fn d_air() -> f64 {
    crate::phantom::default_air()
}
fn d_bone() -> f64 {
    crate::phantom::default_bone()
}
fn d_threshold() -> f32 {
    DEFAULT_BODY_THRESHOLD
}
fn d_sigma() -> f64 {
    DEFAULT_SIGMA
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: d_train(),
            n_val: d_val(),
            n_test: d_test(),
            dims: d_dims(),
            spacing: d_spacing(),
            target_spacing: d_target(),
            radius_range: d_radius(),
            center_jitter: d_jitter(),
            radial_perturbation_amplitude: d_pert(),
            contrast_delta: d_contrast(),
            noise_sigma: d_noise(),
            boundary_blur_sigma: d_blur(),
            air_level: d_air(),
            bone_level: d_bone(),
            body_threshold: d_threshold(),
            sigma: d_sigma(),
            truncation: None,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn truncation(&self) -> f64 {
        self.truncation.unwrap_or(self.sigma)
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let js = serde_json::to_vec(self).expect("data config serializes");
        hex::encode(Sha256::digest(js))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.n_train == 0 || self.n_test == 0 {
            e.push("n_train and n_test must be positive".into());
        }
        if !(self.radius_range[0] > 0.0 && self.radius_range[0] <= self.radius_range[1]) {
            e.push(format!("radius_range {:?} must be positive and ordered", self.radius_range));
        }
        if !(self.sigma > 0.0) || self.truncation().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            e.push("sigma and truncation must be positive".into());
        }
        if self.center_jitter < 0.0 || self.noise_sigma < 0.0 || self.boundary_blur_sigma < 0.0 {
            e.push("center_jitter, noise_sigma and boundary_blur_sigma must be non-negative".into());
        }
        if !(self.air_level < self.body_threshold as f64) {
            e.push(format!("air_level {} must be below body_threshold {}", self.air_level, self.body_threshold));
        }
        if !(self.bone_level > self.contrast_delta) {
            e.push(format!("bone_level {} must be above the organ level {}", self.bone_level, self.contrast_delta));
        }
        if self.spacing.iter().chain(&self.target_spacing).any(|&s| !(s > 0.0)) {
            e.push("spacings must be positive".into());
        }
        e
    }

    /// Phantom specs of every case, in split order train, val, test.
    pub fn specs(&self) -> Vec<PhantomSpec> {
        (0..self.total())
            .map(|i| {
                let mut r = rng::stream(self.seed, &format!("case{i}"));
                let radii = [0, 1, 2].map(|_| r.random_range(self.radius_range[0]..=self.radius_range[1]));
                let mut spec = PhantomSpec::centered(self.dims, self.spacing, radii, rng::derive_seed(self.seed, &format!("phantom{i}")));
                for a in 0..3 {
                    let j = self.center_jitter / if a == 2 { self.spacing[2] as f64 / self.spacing[0] as f64 } else { 1.0 };
                    spec.organ_center[a] += if j > 0.0 { r.random_range(-j..=j) } else { 0.0 };
                }
                spec.radial_perturbation_amplitude = self.radial_perturbation_amplitude;
                spec.contrast_delta = self.contrast_delta;
                spec.noise_sigma = self.noise_sigma;
                spec.boundary_blur_sigma = self.boundary_blur_sigma;
                spec.air_level = self.air_level;
                spec.bone_level = self.bone_level;
                spec
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("case {case}: {source}")]
    Phantom { case: usize, source: PhantomError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A preprocessed case.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub label: LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
    pub test: Vec<Case>,
    /// Whether the cases were read from the cache.
    pub cached: bool,
}

fn case_id(i: usize) -> String {
    format!("case{i:03}")
}

pub fn generate_case(cfg: &DataConfig, i: usize, spec: &PhantomSpec) -> Result<Case, DatasetError> {
    let (img, lab) = generate_phantom(spec).map_err(|source| DatasetError::Phantom { case: i, source })?;
    let (image, label) = preprocess_case(&img, &lab, cfg.target_spacing, cfg.body_threshold)?;
    Ok(Case { id: case_id(i), image, label })
}

/// Default cache root: `$HFUNET_CACHE`, if set.
pub fn cache_root_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn split(cfg: &DataConfig, mut cases: Vec<Case>, cached: bool) -> Dataset {
    let test = cases.split_off(cfg.n_train + cfg.n_val);
    let val = cases.split_off(cfg.n_train);
    Dataset { train: cases, val, test, cached }
}

/// Generates the benchmark or reads it from `cache_root/<content hash>/`.
pub fn load_or_generate(cfg: &DataConfig, cache_root: Option<&Path>) -> Result<Dataset, DatasetError> {
    let dir = cache_root.map(|r| r.join(cfg.content_hash()));
    if let Some(d) = &dir {
        if d.join("complete").exists() {
            let cases = (0..cfg.total())
                .map(|i| {
                    let id = case_id(i);
                    Ok(Case {
                        image: read_volume(d.join(format!("{id}_image.hfv")))?,
                        label: read_label(d.join(format!("{id}_label.hfv")))?,
                        id,
                    })
                })
                .collect::<Result<Vec<_>, DatasetError>>()?;
            return Ok(split(cfg, cases, true));
        }
    }
    let cases = cfg
        .specs()
        .iter()
        .enumerate()
        .map(|(i, s)| generate_case(cfg, i, s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(d) = &dir {
        std::fs::create_dir_all(d)?;
        for c in &cases {
            write_volume(d.join(format!("{}_image.hfv", c.id)), &c.image)?;
            write_label(d.join(format!("{}_label.hfv", c.id)), &c.label)?;
        }
        std::fs::write(d.join("config.json"), serde_json::to_vec_pretty(cfg).expect("serializes"))?;
        std::fs::write(d.join("complete"), b"")?;
    }
    Ok(split(cfg, cases, false))
}
