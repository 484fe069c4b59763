//! Binary PGM (16-bit masks) and PPM (8-bit color).

use std::path::Path;

use super::{in_file, read_bytes, write_bytes, Reader};
use crate::{Error, Image, LabeledMaskSet, Result};

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
}

fn skip_space_and_comments(r: &mut Reader) {
    while let Some(b) = r.peek() {
        if b == b'#' {
            while let Some(c) = r.peek() {
                r.bump();
                if c == b'\n' {
                    break;
                }
            }
        } else if b.is_ascii_whitespace() {
            r.bump();
        } else {
            break;
        }
    }
}

fn header_number(r: &mut Reader, what: &str) -> Result<u32> {
    skip_space_and_comments(r);
    let start = r.offset();
    let mut value: u64 = 0;
    let mut digits = 0;
    while let Some(b) = r.peek().filter(u8::is_ascii_digit) {
        value = value * 10 + (b - b'0') as u64;
        if value > u32::MAX as u64 {
            return Err(Error::format(start, format!("{what} is too large")));
        }
        digits += 1;
        r.bump();
    }
    if digits == 0 {
        return Err(Error::format(start, format!("expected {what}")));
    }
    Ok(value as u32)
}

fn parse_header(r: &mut Reader, magic: &[u8; 2]) -> Result<Header> {
    let m = r.array::<2>("magic")?;
    if &m != magic {
        return Err(Error::format(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let width = header_number(r, "width")? as usize;
    let height = header_number(r, "height")? as usize;
    let maxval = header_number(r, "maxval")?;
    let at = r.offset();
    match r.peek() {
        Some(b) if b.is_ascii_whitespace() => r.bump(),
        _ => return Err(Error::format(at, "expected a single whitespace byte after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(Error::format(at, "dimensions must be nonzero"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(at, format!("maxval {maxval} is outside 1..=65535")));
    }
    Ok(Header { width, height, maxval })
}

/// `P5` with maxval 65535 and big-endian samples.
pub fn encode_mask(mask: &LabeledMaskSet) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", mask.width(), mask.height()).into_bytes();
    for id in mask.ids() {
        out.extend_from_slice(&id.to_be_bytes());
    }
    out
}

/// Accepts 8- and 16-bit PGM.
pub fn decode_mask(bytes: &[u8]) -> Result<LabeledMaskSet> {
    let mut r = Reader::new(bytes);
    let h = parse_header(&mut r, b"P5")?;
    let n = h.width * h.height;
    let wide = h.maxval > 255;
    let sample = if wide { 2 } else { 1 };
    let data = r.take(n * sample, "mask samples")?;
    let ids = if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after mask samples"));
    }
    LabeledMaskSet::new(h.width, h.height, ids)
}

/// `P6`, 8 bits per channel; values are clamped to `[0, 1]` and rounded.
pub fn encode_image(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::invalid(format!("PPM needs 3 channels, image has {}", img.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes 8-bit PPM into `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let mut r = Reader::new(bytes);
    let h = parse_header(&mut r, b"P6")?;
    if h.maxval != 255 {
        return Err(Error::format(r.offset(), "only 8-bit PPM is supported"));
    }
    let data = r.take(h.width * h.height * 3, "image samples")?;
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after image samples"));
    }
    Image::new(h.width, h.height, 3, data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn write_mask(path: &Path, mask: &LabeledMaskSet) -> Result<()> {
    write_bytes(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path) -> Result<LabeledMaskSet> {
    in_file(path, decode_mask(&read_bytes(path)?))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_image(img)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    in_file(path, decode_image(&read_bytes(path)?))
}
