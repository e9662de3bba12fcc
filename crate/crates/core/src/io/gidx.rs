//! Gaussian index maps: `GIDX`, u32 width, u32 height, i32 payload (−1 = none).

use std::path::Path;

use super::{read_bytes, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::image::{GaussianMap, Image};

pub const MAGIC: &[u8; 4] = b"GIDX";

pub fn encode_gmap(map: &GaussianMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for v in &map.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_gmap(bytes: &[u8]) -> Result<GaussianMap> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic, expected GIDX"));
    }
    let w = r.u32("width")? as usize;
    let h = r.u32("height")? as usize;
    let n = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::parse(4, "dimensions overflow"))?;
    if r.remaining() != n {
        return Err(Error::parse(
            r.pos,
            format!("payload is {} bytes, {w}x{h} needs {n}", r.remaining()),
        ));
    }
    let data = r
        .take(n, "payload")?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Image::from_vec(w, h, data).expect("length checked"))
}

pub fn save_gmap(path: &Path, map: &GaussianMap) -> Result<()> {
    write_atomic(path, &encode_gmap(map))
}

pub fn load_gmap(path: &Path) -> Result<GaussianMap> {
    decode_gmap(&read_bytes(path)?)
}

/// Loads and checks the map has the expected size.
pub fn load_gmap_sized(path: &Path, width: usize, height: usize) -> Result<GaussianMap> {
    let m = load_gmap(path)?;
    if (m.width, m.height) != (width, height) {
        return Err(Error::Shape(format!(
            "{}: gaussian map is {}x{}, expected {width}x{height}",
            path.display(),
            m.width,
            m.height
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_sentinel() {
        let m = Image::from_vec(3, 2, vec![-1, 0, 7, i32::MAX, -1, 2]).unwrap();
        assert_eq!(decode_gmap(&encode_gmap(&m)).unwrap(), m);
        let empty = Image::filled(2, 2, -1);
        let bytes = encode_gmap(&empty);
        assert!(bytes[12..].iter().all(|&b| b == 0xff));
    }

    #[test]
    fn size_mismatch() {
        let mut bytes = encode_gmap(&Image::filled(2, 2, 5));
        bytes.pop();
        assert!(matches!(decode_gmap(&bytes), Err(Error::Parse { offset: 12, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_gmap(&bytes), Err(Error::Parse { offset: 0, .. })));
    }
}
