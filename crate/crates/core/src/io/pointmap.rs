use std::path::Path;

use super::{in_file, read_bytes, write_bytes, Reader};
use crate::{Error, Pointmap, Result};

const MAGIC: &[u8; 4] = b"PMAP";
pub const POINTMAP_VERSION: u16 = 1;

/// `PMAP`, version (u16), width and height (u32), `W·H` xyz triples (f32),
/// then `W·H` validity bytes; all little-endian.
pub fn encode_pointmap(pm: &Pointmap) -> Vec<u8> {
    let n = pm.len();
    let mut out = Vec::with_capacity(14 + n * 13);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&POINTMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(pm.width() as u32).to_le_bytes());
    out.extend_from_slice(&(pm.height() as u32).to_le_bytes());
    for p in pm.raw_points() {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out.extend(pm.valid_flags().iter().map(|&v| v as u8));
    out
}

pub fn decode_pointmap(bytes: &[u8]) -> Result<Pointmap> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, "bad pointmap magic"));
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != POINTMAP_VERSION {
        return Err(Error::format(4, format!("unsupported pointmap version {version}")));
    }
    let width = u32::from_le_bytes(r.array("width")?) as usize;
    let height = u32::from_le_bytes(r.array("height")?) as usize;
    if width == 0 || height == 0 {
        return Err(Error::format(6, "pointmap dimensions must be nonzero"));
    }
    let n = width
        .checked_mul(height)
        .filter(|n| n.checked_mul(13).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated pointmap payload"))?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0f32; 3];
        for c in p.iter_mut() {
            *c = f32::from_le_bytes(r.array("point")?);
        }
        points.push(p);
    }
    let mut valid = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        match r.array::<1>("validity")?[0] {
            0 => valid.push(false),
            1 => valid.push(true),
            b => return Err(Error::format(at, format!("validity byte must be 0 or 1, got {b}"))),
        }
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after pointmap"));
    }
    Pointmap::new(width, height, points, valid).map_err(|e| Error::format(14, e.to_string()))
}

pub fn write_pointmap(path: &Path, pm: &Pointmap) -> Result<()> {
    write_bytes(path, &encode_pointmap(pm))
}

pub fn read_pointmap(path: &Path) -> Result<Pointmap> {
    in_file(path, decode_pointmap(&read_bytes(path)?))
}
