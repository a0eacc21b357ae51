//! Binary PGM (P5) and PPM (P6) images, 8 or 16 bits per sample.
//!
//! Images are `(c, h, w)` tensors with values in `[0, 1]`; `c` is 1 for PGM
//! and 3 for PPM. 16-bit samples are big-endian as the formats require.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

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

fn bad(msg: impl Into<String>) -> Error {
    Error::Image(msg.into())
}

/// Parses a P5/P6 byte stream.
pub fn decode_pnm(bytes: &[u8]) -> Result<(Tensor<f64>, BitDepth)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() {
        return Err(bad("missing raster"));
    }
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(format!("unsupported magic {other:?}"))),
    };
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| bad(format!("bad {what} {s:?}")))
    };
    let (w, h, maxval) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if w == 0 || h == 0 {
        return Err(bad("zero image extent"));
    }
    let depth = match maxval {
        1..=255 => BitDepth::Eight,
        256..=65535 => BitDepth::Sixteen,
        _ => return Err(bad(format!("maxval {maxval} out of range"))),
    };
    let bps = if depth == BitDepth::Eight { 1 } else { 2 };
    let n = w * h * channels;
    let raster = bytes
        .get(pos..pos + n * bps)
        .ok_or_else(|| bad("truncated raster"))?;
    let scale = maxval as f64;
    let mut data = vec![0.0; n];
    // Interleaved raster to planar (c, h, w).
    for i in 0..w * h {
        for c in 0..channels {
            let s = i * channels + c;
            let v = if bps == 1 {
                raster[s] as f64
            } else {
                u16::from_be_bytes([raster[2 * s], raster[2 * s + 1]]) as f64
            };
            data[c * w * h + i] = (v / scale).min(1.0);
        }
    }
    Ok((Tensor::new(vec![channels, h, w], data)?, depth))
}

/// Encodes a 1- or 3-channel image, clamping to `[0, 1]` and rounding to
/// the nearest level.
pub fn encode_pnm(img: &Tensor<f64>, depth: BitDepth) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3("encode_pnm")?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(bad(format!("{c} channels: need 1 or 3"))),
    };
    if !img.is_finite() {
        return Err(Error::NonFinite("encode_pnm"));
    }
    let maxval = depth.maxval();
    let mut out = format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes();
    let d = img.data();
    for i in 0..w * h {
        for ch in 0..c {
            let q = (d[ch * w * h + i].clamp(0.0, 1.0) * maxval as f64).round() as u32;
            match depth {
                BitDepth::Eight => out.push(q as u8),
                BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path)?;
    decode_pnm(&bytes)
        .map(|(t, _)| t)
        .map_err(|e| bad(format!("{}: {e}", path.display())))
}

pub fn write_image(path: &Path, img: &Tensor<f64>, depth: BitDepth) -> Result<()> {
    std::fs::write(path, encode_pnm(img, depth)?)?;
    Ok(())
}

/// BT.601 luma of a 3-channel image; 1-channel images pass through.
pub fn to_luma(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (c, h, w) = img.dims3("to_luma")?;
    match c {
        1 => Ok(img.clone()),
        3 => {
            let d = img.data();
            let p = h * w;
            Tensor::new(
                vec![1, h, w],
                (0..p)
                    .map(|i| 0.299 * d[i] + 0.587 * d[p + i] + 0.114 * d[2 * p + i])
                    .collect(),
            )
        }
        _ => Err(Error::shape("to_luma", format!("{c} channels"))),
    }
}
