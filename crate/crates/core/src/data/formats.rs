//! `HSB1` cubes, `HSM1` masks and plain-text spectra.
//!
//! ```text
//! HSB1: "HSB1" | u32 H | u32 W | u32 B | f32[H·W·B]   (band-interleaved-by-pixel)
//! HSM1: "HSM1" | u32 H | u32 W | u8[H·W] ∈ {0, 1}
//! ```

use std::path::Path;

use super::{HsiCube, TargetMask};
use crate::binio::{dim_u32, put_f32s, put_u32, Reader};
use crate::error::{Error, Result};

const CUBE_MAGIC: &[u8; 4] = b"HSB1";
const MASK_MAGIC: &[u8; 4] = b"HSM1";

pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * cube.values().len());
    out.extend_from_slice(CUBE_MAGIC);
    put_u32(&mut out, dim_u32(cube.height(), "height")?);
    put_u32(&mut out, dim_u32(cube.width(), "width")?);
    put_u32(&mut out, dim_u32(cube.bands(), "bands")?);
    put_f32s(&mut out, cube.values().iter().copied());
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    let mut r = Reader::new(bytes);
    r.magic(CUBE_MAGIC)?;
    let (h, w, b) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(b))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format {
            offset: 4,
            msg: format!("invalid extents {h}×{w}×{b}"),
        })?;
    let values = r.f32s(n)?;
    r.finish()?;
    HsiCube::new(h, w, b, values)
}

pub fn encode_mask(mask: &TargetMask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + mask.labels().len());
    out.extend_from_slice(MASK_MAGIC);
    put_u32(&mut out, dim_u32(mask.height(), "height")?);
    put_u32(&mut out, dim_u32(mask.width(), "width")?);
    out.extend(mask.labels().iter().map(|&l| l as u8));
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<TargetMask> {
    let mut r = Reader::new(bytes);
    r.magic(MASK_MAGIC)?;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let n = h.checked_mul(w).filter(|&n| n > 0).ok_or_else(|| Error::Format {
        offset: 4,
        msg: format!("invalid extents {h}×{w}"),
    })?;
    let start = r.offset();
    let raw = r.take(n)?;
    r.finish()?;
    let mut labels = Vec::with_capacity(n);
    for (i, &byte) in raw.iter().enumerate() {
        match byte {
            0 => labels.push(false),
            1 => labels.push(true),
            other => {
                return Err(Error::Format {
                    offset: start + i as u64,
                    msg: format!("mask byte {other} is not 0 or 1"),
                })
            }
        }
    }
    TargetMask::new(h, w, labels)
}

pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    std::fs::write(path, encode_cube(cube)?)?;
    Ok(())
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    decode_cube(&std::fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &TargetMask) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<TargetMask> {
    decode_mask(&std::fs::read(path)?)
}

/// Reads a mask and checks it against the cube it labels.
pub fn read_mask_for(path: &Path, cube: &HsiCube) -> Result<TargetMask> {
    let mask = read_mask(path)?;
    mask.check_matches(cube)?;
    Ok(mask)
}

/// One value per line; blank lines are ignored.
pub fn parse_spectrum(text: &str) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if !t.is_empty() {
            let v: f32 = t.parse().map_err(|_| Error::Format {
                offset,
                msg: format!("cannot parse {t:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("spectrum value {}", out.len())));
            }
            out.push(v);
        }
        offset += line.len() as u64;
    }
    if out.is_empty() {
        return Err(Error::Format {
            offset: 0,
            msg: "spectrum file has no values".into(),
        });
    }
    Ok(out)
}

pub fn write_spectrum(path: &Path, spectrum: &[f32]) -> Result<()> {
    let mut text = String::with_capacity(spectrum.len() * 12);
    for v in spectrum {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_spectrum(path: &Path) -> Result<Vec<f32>> {
    parse_spectrum(&std::fs::read_to_string(path)?)
}

/// Reads a spectrum and checks its length against a `bands`-band cube.
pub fn read_spectrum_for(path: &Path, bands: usize) -> Result<Vec<f32>> {
    let s = read_spectrum(path)?;
    if s.len() != bands {
        return Err(Error::DimensionMismatch(format!(
            "spectrum has {} values but the cube has {bands} bands",
            s.len()
        )));
    }
    Ok(s)
}
