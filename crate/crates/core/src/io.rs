//! Netpbm image formats: binary PGM (`P5`, 8 or 16 bit) and binary PBM (`P4`).
//!
//! Grey images are `[H, W]` tensors with values in `[0, 1]`; writers clamp
//! and round to the nearest code. PBM bits are set where the mask is 1.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

fn image_dims(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(op, format!("expected [H, W], got {s:?}"))),
    }
}

pub fn encode_pgm(img: &Tensor, depth: BitDepth) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img, "encode_pgm")?;
    let maxval = depth.maxval();
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in img.data() {
        let code = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        match depth {
            BitDepth::Eight => out.push(code as u8),
            BitDepth::Sixteen => out.extend_from_slice(&(code as u16).to_be_bytes()),
        }
    }
    Ok(out)
}

/// Parses a header of `n` whitespace-separated integers after the magic.
fn parse_header(bytes: &[u8], magic: &[u8; 2], n: usize, kind: &'static str) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(kind, "bad magic"));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(n);
    while fields.len() < n {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(kind, "malformed header"));
        }
        let field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(kind, "header field out of range"))?;
        fields.push(field);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(kind, "missing raster"));
    }
    Ok((fields, pos + 1))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(Tensor, BitDepth)> {
    let (f, start) = parse_header(bytes, b"P5", 3, "PGM")?;
    let (w, h, maxval) = (f[0], f[1], f[2]);
    let depth = match maxval {
        255 => BitDepth::Eight,
        65535 => BitDepth::Sixteen,
        m => return Err(Error::format("PGM", format!("unsupported maxval {m}"))),
    };
    let bpp = if depth == BitDepth::Eight { 1 } else { 2 };
    let raster = &bytes[start..];
    if w == 0 || h == 0 || raster.len() != w * h * bpp {
        return Err(Error::format("PGM", "raster size does not match header"));
    }
    let data = raster
        .chunks_exact(bpp)
        .map(|c| {
            let code = if bpp == 1 { c[0] as u32 } else { u16::from_be_bytes([c[0], c[1]]) as u32 };
            code as f64 / maxval as f64
        })
        .collect();
    Ok((Tensor::new(vec![h, w], data)?, depth))
}

pub fn encode_pbm(mask: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image_dims(mask, "encode_pbm")?;
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("PBM masks must be binary"));
    }
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let stride = w.div_ceil(8);
    for y in 0..h {
        let row = &mask.data()[y * w..(y + 1) * w];
        let mut packed = vec![0u8; stride];
        for (x, &v) in row.iter().enumerate() {
            if v == 1.0 {
                packed[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    Ok(out)
}

pub fn decode_pbm(bytes: &[u8]) -> Result<Tensor> {
    let (f, start) = parse_header(bytes, b"P4", 2, "PBM")?;
    let (w, h) = (f[0], f[1]);
    let stride = w.div_ceil(8);
    let raster = &bytes[start..];
    if w == 0 || h == 0 || raster.len() != stride * h {
        return Err(Error::format("PBM", "raster size does not match header"));
    }
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &raster[y * stride..(y + 1) * stride];
        data.extend((0..w).map(|x| ((row[x / 8] >> (7 - x % 8)) & 1) as f64));
    }
    Tensor::new(vec![h, w], data)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img, depth)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_pgm(&bytes)?.0)
}

pub fn write_pbm(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pbm(mask)?).map_err(|e| Error::io(path, e))
}

pub fn read_pbm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pbm(&bytes)
}
