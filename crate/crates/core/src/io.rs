//! Volume file formats.
//!
//! The native format is a 44-byte little-endian header followed by the raw
//! voxels:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `AVOL`                            |
//! | 4      | 1    | format version (1)                      |
//! | 5      | 1    | scalar width in bytes (4 or 8)          |
//! | 6      | 1    | spacing present (0 or 1)                |
//! | 7      | 1    | reserved, 0                             |
//! | 8      | 12   | depth, height, width as `u32`           |
//! | 20     | 24   | spacing per axis as `f64` (0 if absent) |
//! | 44     | ...  | voxels, row-major, width fastest        |
//!
//! Single-file NIfTI-1 (`.nii`, uncompressed) is supported for conversion.

use std::io::{self, Read, Write};

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::volume::{Volume, VolumeError};

pub const MAGIC: &[u8; 4] = b"AVOL";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 44;
const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: not a volume file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported scalar width {0}")]
    UnsupportedWidth(u8),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("NIfTI image must be 3-D, got {0} dimensions")]
    NotThreeD(i16),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub fn write_volume<T: Scalar, W: Write>(vol: &Volume<T>, mut w: W) -> Result<(), IoError> {
    w.write_all(MAGIC)?;
    w.write_u8(FORMAT_VERSION)?;
    w.write_u8(T::WIDTH)?;
    w.write_u8(vol.spacing().is_some() as u8)?;
    w.write_u8(0)?;
    for n in vol.shape() {
        w.write_u32::<LittleEndian>(n as u32)?;
    }
    for s in vol.spacing().unwrap_or([0.0; 3]) {
        w.write_f64::<LittleEndian>(s)?;
    }
    for &v in vol.voxels() {
        match T::WIDTH {
            4 => w.write_f32::<LittleEndian>(v.f64() as f32)?,
            _ => w.write_f64::<LittleEndian>(v.f64())?,
        }
    }
    Ok(())
}

/// Reads a native volume, converting voxels to `T` if the stored width differs.
pub fn read_volume<T: Scalar, R: Read>(mut r: R) -> Result<Volume<T>, IoError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(IoError::BadMagic);
    }
    if header[4] != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion(header[4]));
    }
    let width = header[5];
    if width != 4 && width != 8 {
        return Err(IoError::UnsupportedWidth(width));
    }
    let has_spacing = header[6] != 0;
    let shape = [
        LittleEndian::read_u32(&header[8..12]) as usize,
        LittleEndian::read_u32(&header[12..16]) as usize,
        LittleEndian::read_u32(&header[16..20]) as usize,
    ];
    let spacing = [
        LittleEndian::read_f64(&header[20..28]),
        LittleEndian::read_f64(&header[28..36]),
        LittleEndian::read_f64(&header[36..44]),
    ];
    let n: usize = shape.iter().product();
    let mut voxels = Vec::with_capacity(n);
    for _ in 0..n {
        let v = if width == 4 {
            r.read_f32::<LittleEndian>()? as f64
        } else {
            r.read_f64::<LittleEndian>()?
        };
        voxels.push(T::of(v));
    }
    Ok(Volume::new(shape, voxels)?.with_spacing(has_spacing.then_some(spacing)))
}

/// Writes an uncompressed single-file NIfTI-1 image (`float32` or `float64`).
pub fn write_nifti<T: Scalar, W: Write>(vol: &Volume<T>, mut w: W) -> Result<(), IoError> {
    let mut hdr = [0u8; NIFTI_VOX_OFFSET];
    let [d, h, wd] = vol.shape();
    LittleEndian::write_i32(&mut hdr[0..4], NIFTI_HEADER_LEN as i32);
    // dim: NIfTI x is the fastest axis, so x = width, y = height, z = depth.
    let dims = [3i16, wd as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, v) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..42 + 2 * i], *v);
    }
    let (code, bitpix) = if T::WIDTH == 4 { (16i16, 32i16) } else { (64, 64) };
    LittleEndian::write_i16(&mut hdr[70..72], code);
    LittleEndian::write_i16(&mut hdr[72..74], bitpix);
    let sp = vol.spacing().unwrap_or([1.0; 3]);
    let pixdim = [1.0f32, sp[2] as f32, sp[1] as f32, sp[0] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..80 + 4 * i], *v);
    }
    LittleEndian::write_f32(&mut hdr[108..112], NIFTI_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..116], 1.0);
    hdr[123] = 10; // xyzt_units: mm, seconds
    hdr[344..348].copy_from_slice(b"n+1\0");
    w.write_all(&hdr)?;
    for &v in vol.voxels() {
        if T::WIDTH == 4 {
            w.write_f32::<LittleEndian>(v.f64() as f32)?;
        } else {
            w.write_f64::<LittleEndian>(v.f64())?;
        }
    }
    Ok(())
}

/// Reads an uncompressed single-file NIfTI-1 image of either byte order.
pub fn read_nifti<T: Scalar, R: Read>(mut r: R) -> Result<Volume<T>, IoError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(IoError::BadMagic);
    }
    if LittleEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_LEN as i32 {
        decode_nifti::<T, LittleEndian>(&bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == NIFTI_HEADER_LEN as i32 {
        decode_nifti::<T, BigEndian>(&bytes)
    } else {
        Err(IoError::BadMagic)
    }
}

fn decode_nifti<T: Scalar, E: ByteOrder>(bytes: &[u8]) -> Result<Volume<T>, IoError> {
    if &bytes[344..347] != b"n+1" {
        return Err(IoError::BadMagic);
    }
    let ndim = E::read_i16(&bytes[40..42]);
    let dim = |i: usize| E::read_i16(&bytes[40 + 2 * i..42 + 2 * i]).max(1) as usize;
    if !(1..=3).contains(&ndim) && !(ndim == 4 && dim(4) == 1) {
        return Err(IoError::NotThreeD(ndim));
    }
    let (nx, ny, nz) = (dim(1), dim(2), if ndim >= 3 { dim(3) } else { 1 });
    let datatype = E::read_i16(&bytes[70..72]);
    let pix = |i: usize| E::read_f32(&bytes[76 + 4 * i..80 + 4 * i]) as f64;
    let offset = E::read_f32(&bytes[108..112]).max(NIFTI_VOX_OFFSET as f32) as usize;
    let slope = E::read_f32(&bytes[112..116]) as f64;
    let inter = E::read_f32(&bytes[116..120]) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, inter)
    };

    let n = nx * ny * nz;
    let width = match datatype {
        2 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(IoError::UnsupportedDatatype(other)),
    };
    let data = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "truncated NIfTI data"))?;
    let voxels = data
        .chunks_exact(width)
        .map(|c| {
            let raw = match datatype {
                2 => c[0] as f64,
                4 => E::read_i16(c) as f64,
                512 => E::read_u16(c) as f64,
                8 => E::read_i32(c) as f64,
                16 => E::read_f32(c) as f64,
                _ => E::read_f64(c),
            };
            T::of(raw * slope + inter)
        })
        .collect();
    Ok(Volume::new([nz, ny, nx], voxels)?.with_spacing(Some([pix(3), pix(2), pix(1)])))
}
