//! Binary Netpbm images: PGM (`P5`, one channel) and PPM (`P6`, three channels).
//! https://netpbm.sourceforge.net/doc/pgm.html

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn decode_err(msg: impl Into<String>) -> Error {
    Error::Decode(msg.into())
}

/// Reads one ASCII decimal header field, skipping whitespace and `#` comments.
fn header_field(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(decode_err(format!("header ends before {name}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(decode_err(format!("malformed header: expected {name}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| decode_err(format!("{name} out of range")))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some([b'P', d]) => {
            return Err(decode_err(format!(
                "unsupported Netpbm format P{} (only binary P5/P6)",
                *d as char
            )))
        }
        _ => return Err(decode_err("bad magic: not a PGM/PPM file")),
    };
    let mut pos = 2;
    let width = header_field(bytes, &mut pos, "width")?;
    let height = header_field(bytes, &mut pos, "height")?;
    let maxval = header_field(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(decode_err(format!("image is {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(format!("maxval {maxval} unsupported (1..=255)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(decode_err("malformed header: no whitespace before raster")),
    }
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        data_start: pos,
    })
}

/// Decodes a binary PGM/PPM into `[H, W, C]` with values in `[0, 255]`.
/// Samples with a maxval below 255 are stretched to the full range.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    let len = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(h.channels))
        .ok_or_else(|| decode_err("image dimensions overflow"))?;
    let raster = bytes
        .get(h.data_start..h.data_start + len)
        .ok_or_else(|| {
            decode_err(format!(
                "truncated payload: {} of {len} bytes",
                bytes.len().saturating_sub(h.data_start)
            ))
        })?;
    let scale = 255.0 / h.maxval as f32;
    let data = raster
        .iter()
        .map(|&b| if h.maxval == 255 { b as f32 } else { (b as f32 * scale).min(255.0) })
        .collect();
    Ok(Tensor::from_parts(Shape::new([h.height, h.width, h.channels])?, data))
}

/// Encodes 8-bit grayscale pixels (row-major) as binary PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
