//! Single-file, uncompressed, little-endian NIfTI-1 (`n+1`) images of type
//! uint8, int16 or float32.
//!
//! NIfTI stores the first index fastest; volume axis `a` here is NIfTI
//! dimension `a + 1`, so voxel `(i, j, k)` keeps its coordinates.

use std::fs;
use std::path::Path;

use dnsreg_core::{Dims, Volume};

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => DT_UINT8,
            Datatype::Int16 => DT_INT16,
            Datatype::Float32 => DT_FLOAT32,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    /// Scaled values: `slope * stored + intercept`.
    pub volume: Volume,
    pub datatype: Datatype,
    pub slope: f64,
    pub intercept: f64,
    /// Header features that were read but ignored.
    pub warnings: Vec<String>,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn parse_nifti(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let size = i32_at(bytes, 0);
    if size != HEADER_SIZE as i32 {
        if size.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::Unsupported { path: path.into(), reason: "big-endian NIfTI".into() });
        }
        return Err(Error::format(path, format!("header size {size}, expected 348")));
    }
    match &bytes[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::Unsupported { path: path.into(), reason: "two-file NIfTI (magic ni1)".into() })
        }
        m => return Err(Error::format(path, format!("bad magic {m:?}"))),
    }
    let rank = i16_at(bytes, 40);
    if !(1..=7).contains(&rank) {
        return Err(Error::format(path, format!("dim[0] = {rank}")));
    }
    let mut extents = [1usize; 7];
    for (d, e) in extents.iter_mut().enumerate().take(rank as usize) {
        let n = i16_at(bytes, 42 + 2 * d);
        if n < 1 {
            return Err(Error::format(path, format!("dim[{}] = {n}", d + 1)));
        }
        *e = n as usize;
    }
    if extents[3..].iter().any(|&n| n != 1) {
        return Err(Error::Unsupported { path: path.into(), reason: format!("more than three dimensions {extents:?}") });
    }
    let dims = Dims([extents[0], extents[1], extents[2]]);
    let datatype = match i16_at(bytes, 70) {
        DT_UINT8 => Datatype::Uint8,
        DT_INT16 => Datatype::Int16,
        DT_FLOAT32 => Datatype::Float32,
        other => return Err(Error::Unsupported { path: path.into(), reason: format!("datatype code {other}") }),
    };
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = f32_at(bytes, 80 + 4 * a).abs() as f64;
        if p > 0.0 && p.is_finite() {
            *s = p;
        }
    }
    let offset = f32_at(bytes, 108);
    if !(offset >= DATA_OFFSET as f32) || offset.fract() != 0.0 {
        return Err(Error::format(path, format!("vox_offset {offset}")));
    }
    let offset = offset as usize;
    let (mut slope, mut intercept) = (f32_at(bytes, 112) as f64, f32_at(bytes, 116) as f64);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
        intercept = 0.0;
    }
    if !intercept.is_finite() {
        intercept = 0.0;
    }
    let mut warnings = Vec::new();
    let (qform, sform) = (i16_at(bytes, 252), i16_at(bytes, 254));
    if qform > 0 || sform > 0 {
        warnings.push(format!("orientation (qform_code {qform}, sform_code {sform}) ignored; only pixdim spacing is used"));
    }

    let n = dims.len();
    let need = offset + n * datatype.bytes();
    if bytes.len() < need {
        return Err(Error::format(path, format!("truncated payload: {} bytes, need {need}", bytes.len())));
    }
    let raw = &bytes[offset..need];
    let stored = |m: usize| -> f64 {
        match datatype {
            Datatype::Uint8 => raw[m] as f64,
            Datatype::Int16 => i16_at(raw, 2 * m) as f64,
            Datatype::Float32 => f32_at(raw, 4 * m) as f64,
        }
    };
    let [nx, ny, _] = dims.0;
    let volume = Volume::from_fn(dims, |c| slope * stored(c[0] + nx * (c[1] + ny * c[2])) + intercept);
    let volume = Volume { spacing, ..volume };
    if volume.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(path, "non-finite voxel values"));
    }
    Ok(NiftiImage { volume, datatype, slope, intercept, warnings })
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(path, &bytes)
}

/// Float32 image with identity scaling and no orientation.
pub fn encode_nifti(v: &Volume) -> Result<Vec<u8>> {
    if v.dims.0.iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::Usage(format!("dims {:?} exceed the NIfTI-1 limit", v.dims)));
    }
    let mut h = vec![0u8; DATA_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dim: [i16; 8] = [3, v.dims.0[0] as i16, v.dims.0[1] as i16, v.dims.0[2] as i16, 1, 1, 1, 1];
    for (d, x) in dim.iter().enumerate() {
        h[40 + 2 * d..42 + 2 * d].copy_from_slice(&x.to_le_bytes());
    }
    h[70..72].copy_from_slice(&Datatype::Float32.code().to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    let pixdim = [1.0f32, v.spacing[0] as f32, v.spacing[1] as f32, v.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (d, x) in pixdim.iter().enumerate() {
        h[76 + 4 * d..80 + 4 * d].copy_from_slice(&x.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    h[123] = 2; // millimetres
    h[344..348].copy_from_slice(b"n+1\0");
    let [nx, ny, nz] = v.dims.0;
    h.reserve(4 * v.dims.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                h.extend_from_slice(&(v.get(i, j, k) as f32).to_le_bytes());
            }
        }
    }
    Ok(h)
}

pub fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    let bytes = encode_nifti(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
