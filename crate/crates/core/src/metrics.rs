//! Overlap and surface-distance metrics with per-case reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::LabelVolume;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("geometry mismatch: {0:?} vs {1:?}")]
    Geometry([usize; 3], [usize; 3]),
    #[error("undefined surface: {0} mask is empty")]
    EmptySurface(&'static str),
    #[error("{0} undefined: {1} mask is empty")]
    EmptyDenominator(&'static str, &'static str),
}

fn check(gt: &LabelVolume, seg: &LabelVolume) -> Result<(), MetricsError> {
    if gt.dims() != seg.dims() {
        return Err(MetricsError::Geometry(gt.dims(), seg.dims()));
    }
    Ok(())
}

fn overlap(gt: &LabelVolume, seg: &LabelVolume) -> usize {
    gt.data().iter().zip(seg.data()).filter(|(&a, &b)| a == 1 && b == 1).count()
}

/// `2 |gt & seg| / (|gt| + |seg|)`; two empty masks score 1.
pub fn dsc(gt: &LabelVolume, seg: &LabelVolume) -> Result<f64, MetricsError> {
    check(gt, seg)?;
    let denom = gt.count() + seg.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap(gt, seg) as f64 / denom as f64)
}

/// `(|gt & seg| / |gt|, |gt & seg| / |seg|)`.
pub fn sen_ppv(gt: &LabelVolume, seg: &LabelVolume) -> Result<(f64, f64), MetricsError> {
    check(gt, seg)?;
    let (g, s) = (gt.count(), seg.count());
    if g == 0 {
        return Err(MetricsError::EmptyDenominator("SEN", "ground-truth"));
    }
    if s == 0 {
        return Err(MetricsError::EmptyDenominator("PPV", "prediction"));
    }
    let i = overlap(gt, seg) as f64;
    Ok((i / g as f64, i / s as f64))
}

/// Mask voxels with at least one of six face neighbors outside the mask;
/// the volume border counts as outside.
pub fn surface(m: &LabelVolume) -> Vec<bool> {
    let [nx, ny, nz] = m.dims();
    let g = *m.geometry();
    let mut out = vec![false; g.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && m.get(x - 1, y, z)
                    && m.get(x + 1, y, z)
                    && m.get(x, y - 1, z)
                    && m.get(x, y + 1, z)
                    && m.get(x, y, z - 1)
                    && m.get(x, y, z + 1);
                out[g.index(x, y, z)] = !interior;
            }
        }
    }
    out
}

/// Exact 1-D squared distance transform of sampled function `f` on a grid of
/// spacing `s` (lower envelope of parabolas). Infinite entries are absent sites.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let s2 = s * s;
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let x = ((fq + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = (qf - v[k] as f64) * s;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance in mm from every voxel center to the nearest
/// site voxel center.
pub fn squared_distance_map(sites: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        let lines: Vec<usize> = (0..nx * ny * nz)
            .filter(|&i| {
                let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
                c[axis] == 0
            })
            .collect();
        for start in lines {
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = d[start + k * stride];
            }
            edt_1d(&line, spacing[axis], &mut res, &mut v, &mut z);
            for (k, &r) in res.iter().enumerate() {
                d[start + k * stride] = r;
            }
        }
    }
    d
}

fn mean_distance(from: &[bool], to_sq: &[f64]) -> f64 {
    let (s, n) = from.iter().zip(to_sq).filter(|(&f, _)| f).fold((0.0, 0usize), |(s, n), (_, &d)| (s + d.sqrt(), n + 1));
    s / n as f64
}

/// Symmetric average surface distance in mm.
pub fn asd(gt: &LabelVolume, seg: &LabelVolume, spacing: [f64; 3]) -> Result<f64, MetricsError> {
    check(gt, seg)?;
    if gt.count() == 0 {
        return Err(MetricsError::EmptySurface("ground-truth"));
    }
    if seg.count() == 0 {
        return Err(MetricsError::EmptySurface("prediction"));
    }
    let (sg, ss) = (surface(gt), surface(seg));
    let dims = gt.dims();
    let to_seg = squared_distance_map(&ss, dims, spacing);
    let to_gt = squared_distance_map(&sg, dims, spacing);
    Ok(0.5 * (mean_distance(&sg, &to_seg) + mean_distance(&ss, &to_gt)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub dsc: f64,
    pub asd_mm: Option<f64>,
    pub sen: Option<f64>,
    pub ppv: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    /// Sample mean and standard deviation (n - 1 denominator, 0 for one value).
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub topology: String,
    pub seed: u64,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<CaseMetrics>,
    pub dsc: Aggregate,
    pub asd_mm: Aggregate,
    pub sen: Aggregate,
    pub ppv: Aggregate,
    pub meta: RunMeta,
}

pub fn evaluate_case(case: &str, gt: &LabelVolume, seg: &LabelVolume, spacing: [f64; 3]) -> CaseMetrics {
    let mut errors = Vec::new();
    let mut push = |e: MetricsError| errors.push(e.to_string());
    let d = dsc(gt, seg).map_err(&mut push).ok();
    let a = asd(gt, seg, spacing).map_err(&mut push).ok();
    let (sen, ppv) = if gt.dims() == seg.dims() && gt.count() > 0 {
        let i = overlap(gt, seg) as f64;
        (Some(i / gt.count() as f64), (seg.count() > 0).then(|| i / seg.count() as f64))
    } else {
        (None, None)
    };
    CaseMetrics {
        case: case.to_string(),
        dsc: d.unwrap_or(f64::NAN),
        asd_mm: a,
        sen,
        ppv,
        error: (!errors.is_empty()).then(|| errors.join("; ")),
    }
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<CaseMetrics>, meta: RunMeta) -> Self {
        let dsc = Aggregate::of(rows.iter().map(|r| r.dsc).filter(|v| v.is_finite()));
        let asd_mm = Aggregate::of(rows.iter().filter_map(|r| r.asd_mm));
        let sen = Aggregate::of(rows.iter().filter_map(|r| r.sen));
        let ppv = Aggregate::of(rows.iter().filter_map(|r| r.ppv));
        Self { rows, dsc, asd_mm, sen, ppv, meta }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,dsc,asd_mm,sen,ppv,error\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{},{}",
                r.case,
                r.dsc,
                opt(r.asd_mm),
                opt(r.sen),
                opt(r.ppv),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "topology {} seed {} checkpoint {}\n",
            self.meta.topology, self.meta.seed, self.meta.checkpoint_hash
        );
        for (name, a) in [("dsc", &self.dsc), ("asd_mm", &self.asd_mm), ("sen", &self.sen), ("ppv", &self.ppv)] {
            let _ = writeln!(s, "{name}: mean {:.4} std {:.4} (n={})", a.mean, a.std, a.n);
        }
        s
    }
}

/// Evaluates every `(case, gt, prediction)` triple; failures are recorded
/// in the row and excluded from the aggregates.
pub fn evaluate_cases<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a LabelVolume, &'a LabelVolume)>,
    spacing: [f64; 3],
    meta: RunMeta,
) -> MetricsReport {
    let rows = pairs.into_iter().map(|(c, g, s)| evaluate_case(c, g, s, spacing)).collect();
    MetricsReport::from_rows(rows, meta)
}
