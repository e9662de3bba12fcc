//! Single-channel PFM depth maps (`Pf`, negative scale = little-endian,
//! rows stored bottom-up). Values are stored as f32.

use std::path::Path;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};

pub fn encode_pfm(map: &DepthMap) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    out.reserve(4 * map.len());
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            out.extend_from_slice(&(map.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

/// Reads the four header tokens (`Pf`, width, height, scale) and returns
/// them with the payload offset.
fn header_tokens(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(Error::parse(start, "truncated PFM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the scale from the payload.
    Ok((tokens, pos + 1))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let (t, start) = header_tokens(bytes)?;
    if t[0] != "Pf" {
        return Err(Error::parse(0, format!("expected `Pf`, found `{}`", t[0])));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(3, format!("bad dimension `{s}`")))
    };
    let (w, h) = (dim(&t[1])?, dim(&t[2])?);
    let scale: f64 = t[3]
        .parse()
        .map_err(|_| Error::parse(start, format!("bad scale `{}`", t[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(start, "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let need = w * h * 4;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != need {
        return Err(Error::parse(
            start,
            format!("payload is {} bytes, {w}x{h} needs {need}", payload.len()),
        ));
    }
    let mut img = Image::filled(w, h, 0.0);
    for (k, c) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, row) = (k % w, k / w);
        img.set(x, h - 1 - row, v as f64);
    }
    Ok(img)
}

pub fn save_depth_pfm(path: &Path, map: &DepthMap) -> Result<()> {
    write_atomic(path, &encode_pfm(map))
}

pub fn load_depth_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_bytes(path)?)
}
