//! Minimal single-file NIfTI-1 (`.nii`, uncompressed, little-endian) I/O.
//!
//! Only what the pipeline exchanges is supported: `uint8` hard label maps,
//! `float32` soft/one-hot volumes (channel as the 4th dimension) and vector
//! fields. Geometry travels in the sform matrix.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::{Grid3, LabelVolume, Mask3, Vec3};

const HEADER_SIZE: i32 = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

const NIFTI_XFORM_ALIGNED_ANAT: i16 = 2;
const NIFTI_UNITS_MM: u8 = 2;
const NIFTI_INTENT_VECTOR: i16 = 1007;

#[derive(Debug, Clone, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl NiftiData {
    pub fn len(&self) -> usize {
        match self {
            NiftiData::U8(v) => v.len(),
            NiftiData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    /// Sizes of the used dimensions (1..=7 entries), x fastest.
    pub dims: Vec<usize>,
    /// Rows of the voxel-to-world sform matrix.
    pub affine: [[f64; 4]; 3],
    pub intent_code: i16,
    pub data: NiftiData,
}

impl NiftiImage {
    pub fn dim(&self, a: usize) -> usize {
        self.dims.get(a).copied().unwrap_or(1)
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dim(0), self.dim(1), self.dim(2)]
    }

    pub fn grid(&self) -> Result<Grid3> {
        grid_from_affine(self.spatial_dims(), &self.affine)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dims.is_empty() || self.dims.len() > 7 {
            return Err(Error::Nifti(format!("unsupported rank {}", self.dims.len())));
        }
        let expected: usize = self.dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::Nifti(format!(
                "data has {} elements, dims {:?} need {expected}",
                self.data.len(),
                self.dims
            )));
        }
        let (datatype, bitpix) = match &self.data {
            NiftiData::U8(_) => (DT_UINT8, 8i16),
            NiftiData::F32(_) => (DT_FLOAT32, 32i16),
        };
        let mut h = vec![0u8; VOX_OFFSET];
        {
            let mut w = Cursor::new(&mut h[..]);
            w.write_i32::<LittleEndian>(HEADER_SIZE)?;
        }
        let mut dim = [1i16; 8];
        dim[0] = self.dims.len() as i16;
        for (a, &d) in self.dims.iter().enumerate() {
            dim[a + 1] = i16::try_from(d).map_err(|_| Error::Nifti(format!("dimension {d} too large")))?;
        }
        let spacing = column_norms(&self.affine);
        let mut pixdim = [1f32; 8];
        pixdim[0] = 1.0;
        for a in 0..3 {
            pixdim[a + 1] = spacing[a] as f32;
        }
        put_i16s(&mut h, 40, &dim);
        put_i16s(&mut h, 68, &[self.intent_code]);
        put_i16s(&mut h, 70, &[datatype, bitpix]);
        put_f32s(&mut h, 76, &pixdim);
        put_f32s(&mut h, 108, &[VOX_OFFSET as f32, 1.0, 0.0]);
        h[123] = NIFTI_UNITS_MM;
        put_i16s(&mut h, 252, &[0, NIFTI_XFORM_ALIGNED_ANAT]);
        for (r, row) in self.affine.iter().enumerate() {
            let vals: Vec<f32> = row.iter().map(|&v| v as f32).collect();
            put_f32s(&mut h, 280 + 16 * r, &vals);
        }
        h[344..348].copy_from_slice(MAGIC);

        let mut out = h;
        match &self.data {
            NiftiData::U8(v) => out.extend_from_slice(v),
            NiftiData::F32(v) => {
                out.reserve(v.len() * 4);
                for &x in v {
                    out.write_f32::<LittleEndian>(x)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE as usize {
            return Err(Error::Nifti("file shorter than a NIfTI-1 header".into()));
        }
        let sizeof_hdr = get_i32(bytes, 0);
        if sizeof_hdr != HEADER_SIZE {
            if sizeof_hdr.swap_bytes() == HEADER_SIZE {
                return Err(Error::Nifti("big-endian files are not supported".into()));
            }
            return Err(Error::Nifti(format!("bad sizeof_hdr {sizeof_hdr}")));
        }
        if &bytes[344..348] != MAGIC {
            return Err(Error::Nifti("magic is not \"n+1\\0\" (single-file NIfTI-1 required)".into()));
        }
        let dim: Vec<i16> = (0..8).map(|a| get_i16(bytes, 40 + 2 * a)).collect();
        let rank = dim[0];
        if !(1..=7).contains(&rank) {
            return Err(Error::Nifti(format!("bad dim[0] {rank}")));
        }
        let dims: Vec<usize> = (1..=rank as usize)
            .map(|a| {
                if dim[a] < 1 {
                    Err(Error::Nifti(format!("bad dim[{a}] {}", dim[a])))
                } else {
                    Ok(dim[a] as usize)
                }
            })
            .collect::<Result<_>>()?;
        let intent_code = get_i16(bytes, 68);
        let datatype = get_i16(bytes, 70);
        let vox_offset = get_f32(bytes, 108) as usize;
        let slope = get_f32(bytes, 112);
        let inter = get_f32(bytes, 116);
        let pixdim: Vec<f64> = (0..8).map(|a| get_f32(bytes, 76 + 4 * a) as f64).collect();
        let qform_code = get_i16(bytes, 252);
        let sform_code = get_i16(bytes, 254);

        let affine = if sform_code > 0 {
            let mut a = [[0.0; 4]; 3];
            for (r, row) in a.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = get_f32(bytes, 280 + 16 * r + 4 * c) as f64;
                }
            }
            a
        } else if qform_code > 0 {
            qform_affine(bytes, &pixdim)
        } else {
            [
                [pixdim[1].abs().max(1e-12), 0.0, 0.0, 0.0],
                [0.0, pixdim[2].abs().max(1e-12), 0.0, 0.0],
                [0.0, 0.0, pixdim[3].abs().max(1e-12), 0.0],
            ]
        };

        let n: usize = dims.iter().product();
        let width = match datatype {
            DT_UINT8 => 1,
            DT_INT16 | DT_UINT16 => 2,
            DT_INT32 | DT_FLOAT32 => 4,
            DT_FLOAT64 => 8,
            other => return Err(Error::Nifti(format!("unsupported datatype {other}"))),
        };
        if vox_offset < HEADER_SIZE as usize || bytes.len() < vox_offset + n * width {
            return Err(Error::Nifti("truncated voxel data".into()));
        }
        let raw = &bytes[vox_offset..vox_offset + n * width];
        let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
        let mut rd = Cursor::new(raw);
        let data = match datatype {
            DT_UINT8 if !scaled => NiftiData::U8(raw.to_vec()),
            DT_FLOAT32 => {
                let mut v = vec![0f32; n];
                rd.read_f32_into::<LittleEndian>(&mut v)?;
                NiftiData::F32(apply_scale(v, scaled, slope, inter))
            }
            DT_FLOAT64 => {
                let mut v = vec![0f64; n];
                rd.read_f64_into::<LittleEndian>(&mut v)?;
                NiftiData::F32(apply_scale(v.into_iter().map(|x| x as f32).collect(), scaled, slope, inter))
            }
            _ => {
                let v: Vec<f32> = match datatype {
                    DT_UINT8 => raw.iter().map(|&x| x as f32).collect(),
                    DT_INT16 => (0..n).map(|_| rd.read_i16::<LittleEndian>().map(|x| x as f32)).collect::<std::io::Result<_>>()?,
                    DT_UINT16 => (0..n).map(|_| rd.read_u16::<LittleEndian>().map(|x| x as f32)).collect::<std::io::Result<_>>()?,
                    _ => (0..n).map(|_| rd.read_i32::<LittleEndian>().map(|x| x as f32)).collect::<std::io::Result<_>>()?,
                };
                NiftiData::F32(apply_scale(v, scaled, slope, inter))
            }
        };
        Ok(Self { dims, affine, intent_code, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn apply_scale(mut v: Vec<f32>, scaled: bool, slope: f32, inter: f32) -> Vec<f32> {
    if scaled {
        v.iter_mut().for_each(|x| *x = *x * slope + inter);
    }
    v
}

fn put_i16s(h: &mut [u8], off: usize, vals: &[i16]) {
    for (i, v) in vals.iter().enumerate() {
        h[off + 2 * i..off + 2 * i + 2].copy_from_slice(&v.to_le_bytes());
    }
}

fn put_f32s(h: &mut [u8], off: usize, vals: &[f32]) {
    for (i, v) in vals.iter().enumerate() {
        h[off + 4 * i..off + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
    }
}

fn get_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn get_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn get_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn qform_affine(bytes: &[u8], pixdim: &[f64]) -> [[f64; 4]; 3] {
    let b = get_f32(bytes, 256) as f64;
    let c = get_f32(bytes, 260) as f64;
    let d = get_f32(bytes, 264) as f64;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let off = [get_f32(bytes, 268) as f64, get_f32(bytes, 272) as f64, get_f32(bytes, 276) as f64];
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let s = [pixdim[1], pixdim[2], pixdim[3] * qfac];
    let mut m = [[0.0; 4]; 3];
    for row in 0..3 {
        for col in 0..3 {
            m[row][col] = r[row][col] * s[col];
        }
        m[row][3] = off[row];
    }
    m
}

fn column_norms(a: &[[f64; 4]; 3]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (c, sc) in s.iter_mut().enumerate() {
        *sc = (a[0][c] * a[0][c] + a[1][c] * a[1][c] + a[2][c] * a[2][c]).sqrt();
    }
    s
}

pub fn affine_from_grid(g: &Grid3) -> [[f64; 4]; 3] {
    let mut a = [[0.0; 4]; 3];
    for row in 0..3 {
        for col in 0..3 {
            a[row][col] = g.axes[col][row] * g.spacing[col];
        }
        a[row][3] = g.origin[row];
    }
    a
}

/// Recovers a grid from an sform. The sform is stored in float32, so the axes
/// are re-orthonormalised before validation.
pub fn grid_from_affine(dims: [usize; 3], a: &[[f64; 4]; 3]) -> Result<Grid3> {
    let spacing = column_norms(a);
    if spacing.iter().any(|&s| s <= 0.0) {
        return Err(Error::Nifti("degenerate sform".into()));
    }
    let col = |c: usize| Vec3::new(a[0][c], a[1][c], a[2][c]) / spacing[c];
    let (c0, c1, c2) = (col(0), col(1), col(2));
    if c0.dot(&c1).abs() > 1e-4 || c0.dot(&c2).abs() > 1e-4 || c1.dot(&c2).abs() > 1e-4 {
        return Err(Error::Nifti("sform has shear; only orthogonal grids are supported".into()));
    }
    let x = c0.normalize();
    let y = (c1 - x * c1.dot(&x)).normalize();
    let mut z = x.cross(&y);
    if z.dot(&c2) < 0.0 {
        z = -z;
    }
    Grid3::new(dims, spacing, Vec3::new(a[0][3], a[1][3], a[2][3]), [x, y, z])
}

/// Writes the argmax labels as a 3D `uint8` image (voxel value = channel index).
pub fn write_labels(path: impl AsRef<Path>, vol: &LabelVolume) -> Result<()> {
    NiftiImage {
        dims: vol.grid.dims.to_vec(),
        affine: affine_from_grid(&vol.grid),
        intent_code: 0,
        data: NiftiData::U8(vol.hard_labels()),
    }
    .write(path)
}

/// Writes all channels as a 4D `float32` image, channel last.
pub fn write_soft(path: impl AsRef<Path>, vol: &LabelVolume) -> Result<()> {
    let mut dims = vol.grid.dims.to_vec();
    dims.push(vol.channels);
    NiftiImage {
        dims,
        affine: affine_from_grid(&vol.grid),
        intent_code: 0,
        data: NiftiData::F32(vol.data.clone()),
    }
    .write(path)
}

/// Reads a label volume. 3D images are treated as hard label indices expanded
/// to `channels` one-hot channels; 4D float images are taken as given.
pub fn read_label_volume(path: impl AsRef<Path>, channels: usize) -> Result<LabelVolume> {
    let img = NiftiImage::read(path)?;
    let grid = img.grid()?;
    let rank = img.dims.iter().rposition(|&d| d > 1).map_or(1, |p| p + 1);
    match (&img.data, rank <= 3) {
        (NiftiData::U8(v), true) => LabelVolume::from_labels(grid, channels, v),
        (NiftiData::F32(v), true) => {
            let labels: Vec<u8> = v.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect();
            LabelVolume::from_labels(grid, channels, &labels)
        }
        (NiftiData::F32(v), false) => Ok(LabelVolume { grid, channels: img.dim(3), data: v.clone() }),
        (NiftiData::U8(v), false) => Ok(LabelVolume {
            grid,
            channels: img.dim(3),
            data: v.iter().map(|&x| x as f32).collect(),
        }),
    }
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask3) -> Result<()> {
    NiftiImage {
        dims: mask.grid.dims.to_vec(),
        affine: affine_from_grid(&mask.grid),
        intent_code: 0,
        data: NiftiData::U8(mask.data.iter().map(|&b| b as u8).collect()),
    }
    .write(path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3> {
    let img = NiftiImage::read(path)?;
    let grid = img.grid()?;
    let data = match &img.data {
        NiftiData::U8(v) => v.iter().map(|&x| x != 0).collect(),
        NiftiData::F32(v) => v.iter().map(|&x| x != 0.0).collect(),
    };
    Ok(Mask3 { grid, data })
}

/// Writes per-voxel 3-vectors (mm) as a 4D `float32` image with 3 components.
pub fn write_vectors(path: impl AsRef<Path>, grid: &Grid3, vectors: &[Vec3]) -> Result<()> {
    let n = grid.len();
    let mut data = vec![0f32; n * 3];
    for (i, v) in vectors.iter().enumerate() {
        for c in 0..3 {
            data[c * n + i] = v[c] as f32;
        }
    }
    let mut dims = grid.dims.to_vec();
    dims.push(3);
    NiftiImage {
        dims,
        affine: affine_from_grid(grid),
        intent_code: NIFTI_INTENT_VECTOR,
        data: NiftiData::F32(data),
    }
    .write(path)
}

pub fn read_vectors(path: impl AsRef<Path>) -> Result<(Grid3, Vec<Vec3>)> {
    let img = NiftiImage::read(path)?;
    let grid = img.grid()?;
    if img.dim(3) != 3 {
        return Err(Error::Nifti(format!("expected 3 vector components, found {}", img.dim(3))));
    }
    let n = grid.len();
    let NiftiData::F32(v) = &img.data else {
        return Err(Error::Nifti("vector fields must be float32".into()));
    };
    let vectors = (0..n)
        .map(|i| Vec3::new(v[i] as f64, v[n + i] as f64, v[2 * n + i] as f64))
        .collect();
    Ok((grid, vectors))
}
