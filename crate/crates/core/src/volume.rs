//! Volumetric grids and the `HFV1` file format.
//!
//! Layout is x-fastest: voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`.
//! Axial slices are the `z = const` planes and are contiguous in memory.
//!
//! File layout (little-endian): magic `HFV1`, `u32 nx, ny, nz`,
//! `f32 sx, sy, sz`, `u8 dtype` (0 = f32 image, 1 = u8 label), payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"HFV1";
pub const HEADER_LEN: usize = 4 + 12 + 12 + 1;
/// Upper bound on voxels accepted from a file header.
pub const MAX_VOXELS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("label volume must be binary, found value {0}")]
    NonBinary(f64),
    #[error("bad magic: expected \"HFV1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("dimension overflow: {nx} x {ny} x {nz} voxels")]
    DimOverflow { nx: u32, ny: u32, nz: u32 },
    #[error("truncated payload: header declares {expected} values, file holds {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("expected {expected} volume, file holds {found}")]
    WrongDtype { expected: &'static str, found: &'static str },
    #[error("{0} trailing bytes after payload")]
    TrailingData(u64),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f32; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Geometry(format!("all dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Geometry(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        self.spacing.map(|s| s as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self, VolumeError> {
        if data.len() != geom.len() {
            return Err(VolumeError::Geometry(format!(
                "data length {} does not match {:?}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Self {
        Self { data: vec![0.0; geom.len()], geom }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }
    pub fn spacing(&self) -> [f32; 3] {
        self.geom.spacing
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.geom.slice_len();
        &self.data[z * n..(z + 1) * n]
    }
}

/// Binary mask volume. Values are only ever 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geom: Geometry,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geom: Geometry, data: Vec<u8>) -> Result<Self, VolumeError> {
        if data.len() != geom.len() {
            return Err(VolumeError::Geometry(format!(
                "data length {} does not match {:?}",
                data.len(),
                geom.dims
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(VolumeError::NonBinary(v as f64));
        }
        Ok(Self { geom, data })
    }

    pub fn empty(geom: Geometry) -> Self {
        Self { data: vec![0; geom.len()], geom }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Self { geom, data }
    }

    pub fn from_bools(geom: Geometry, mask: &[bool]) -> Result<Self, VolumeError> {
        Self::new(geom, mask.iter().map(|&b| b as u8).collect())
    }

    /// Binarizes an f32 volume: values above `threshold` become 1.
    pub fn threshold(v: &Volume, threshold: f32) -> Self {
        Self { geom: v.geom, data: v.data.iter().map(|&x| (x > threshold) as u8).collect() }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }
    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }
    pub fn spacing(&self) -> [f32; 3] {
        self.geom.spacing
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geom.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.geom.index(x, y, z);
        self.data[i] = v as u8;
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.geom.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_volume(&self) -> Volume {
        Volume { geom: self.geom, data: self.data.iter().map(|&v| v as f32).collect() }
    }

    /// Inclusive bounding box `(min, max)` of the foreground, if any.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let [nx, ny, nz] = self.geom.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.data[self.geom.index(x, y, z)] != 0 {
                        any = true;
                        for (a, v) in [x, y, z].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Mean foreground voxel coordinate.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let [nx, ny, nz] = self.geom.dims;
        let mut s = [0.0f64; 3];
        let mut n = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.data[self.geom.index(x, y, z)] != 0 {
                        s[0] += x as f64;
                        s[1] += y as f64;
                        s[2] += z as f64;
                        n += 1;
                    }
                }
            }
        }
        (n > 0).then(|| s.map(|v| v / n as f64))
    }
}

/// Extracts the sub-box starting at `origin` (may be negative) of extent
/// `size`; voxels outside the source are filled with `fill`.
pub fn crop_padded<T: Copy>(
    geom: &Geometry,
    data: &[T],
    origin: [isize; 3],
    size: [usize; 3],
    fill: T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[2] {
        let sz = origin[2] + z as isize;
        for y in 0..size[1] {
            let sy = origin[1] + y as isize;
            for x in 0..size[0] {
                let sx = origin[0] + x as isize;
                let inside = [sx, sy, sz].iter().zip(geom.dims).all(|(&c, d)| c >= 0 && (c as usize) < d);
                out.push(if inside { data[geom.index(sx as usize, sy as usize, sz as usize)] } else { fill });
            }
        }
    }
    out
}

impl Volume {
    pub fn crop(&self, origin: [isize; 3], size: [usize; 3], fill: f32) -> Result<Volume, VolumeError> {
        let geom = Geometry::new(size, self.geom.spacing)?;
        Volume::new(geom, crop_padded(&self.geom, &self.data, origin, size, fill))
    }
}

impl LabelVolume {
    pub fn crop(&self, origin: [isize; 3], size: [usize; 3]) -> Result<LabelVolume, VolumeError> {
        let geom = Geometry::new(size, self.geom.spacing)?;
        Ok(LabelVolume { geom, data: crop_padded(&self.geom, &self.data, origin, size, 0) })
    }
}

/// Contents of an `HFV1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Image(Volume),
    Label(LabelVolume),
}

fn write_header<W: Write>(w: &mut W, g: &Geometry, dtype: u8) -> Result<(), VolumeError> {
    w.write_all(MAGIC)?;
    for &d in &g.dims {
        let d = u32::try_from(d).map_err(|_| VolumeError::Geometry(format!("dimension {d} exceeds u32")))?;
        w.write_u32::<LittleEndian>(d)?;
    }
    for &s in &g.spacing {
        w.write_f32::<LittleEndian>(s)?;
    }
    w.write_u8(dtype)?;
    Ok(())
}

pub fn encode_image(v: &Volume) -> Result<Vec<u8>, VolumeError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * v.data.len());
    write_header(&mut buf, &v.geom, 0)?;
    for &x in &v.data {
        buf.write_f32::<LittleEndian>(x)?;
    }
    Ok(buf)
}

pub fn encode_label(v: &LabelVolume) -> Result<Vec<u8>, VolumeError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + v.data.len());
    write_header(&mut buf, &v.geom, 1)?;
    buf.extend_from_slice(&v.data);
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<VolumeFile, VolumeError> {
    let mut r = bytes;
    if r.len() < 4 {
        return Err(VolumeError::TruncatedHeader);
    }
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VolumeError::BadMagic(magic));
    }
    if r.len() < HEADER_LEN - 4 {
        return Err(VolumeError::TruncatedHeader);
    }
    let nx = r.read_u32::<LittleEndian>()?;
    let ny = r.read_u32::<LittleEndian>()?;
    let nz = r.read_u32::<LittleEndian>()?;
    let spacing = [r.read_f32::<LittleEndian>()?, r.read_f32::<LittleEndian>()?, r.read_f32::<LittleEndian>()?];
    let dtype = r.read_u8()?;
    let count = (nx as u64).checked_mul(ny as u64).and_then(|v| v.checked_mul(nz as u64));
    let count = match count {
        Some(c) if c <= MAX_VOXELS => c,
        _ => return Err(VolumeError::DimOverflow { nx, ny, nz }),
    };
    let elem = match dtype {
        0 => 4u64,
        1 => 1u64,
        other => return Err(VolumeError::UnknownDtype(other)),
    };
    let avail = r.len() as u64;
    if avail < count * elem {
        return Err(VolumeError::TruncatedPayload { expected: count, found: avail / elem });
    }
    if avail > count * elem {
        return Err(VolumeError::TrailingData(avail - count * elem));
    }
    let geom = Geometry::new([nx as usize, ny as usize, nz as usize], spacing)?;
    match dtype {
        0 => {
            let data = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(VolumeFile::Image(Volume::new(geom, data)?))
        }
        _ => Ok(VolumeFile::Label(LabelVolume::new(geom, r.to_vec())?)),
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<(), VolumeError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_image(v)?)?;
    f.flush()?;
    Ok(())
}

pub fn write_label(path: impl AsRef<Path>, v: &LabelVolume) -> Result<(), VolumeError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_label(v)?)?;
    f.flush()?;
    Ok(())
}

pub fn read_any(path: impl AsRef<Path>) -> Result<VolumeFile, VolumeError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Reads an image volume; label files are promoted to 0/1 intensities.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    match read_any(path)? {
        VolumeFile::Image(v) => Ok(v),
        VolumeFile::Label(l) => Ok(l.to_volume()),
    }
}

pub fn read_label(path: impl AsRef<Path>) -> Result<LabelVolume, VolumeError> {
    match read_any(path)? {
        VolumeFile::Label(l) => Ok(l),
        VolumeFile::Image(_) => Err(VolumeError::WrongDtype { expected: "label", found: "image" }),
    }
}
