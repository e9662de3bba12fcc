//! `GTNS` tensor container: magic, u32 version, u32 rank, u32 dims[rank],
//! u32 dtype tag (0 = f32, 1 = f64, 2 = i32), row-major little-endian payload.

use std::path::Path;

use super::{read_bytes, write_atomic, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GTNS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u32 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I32(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {n} elements, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(data))
    }

    /// Values widened to f64 (i32 converts exactly).
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_i64(&self) -> Result<Vec<i64>> {
        match &self.data {
            TensorData::I32(v) => Ok(v.iter().map(|&x| x as i64).collect()),
            _ => Err(Error::Shape("expected an i32 tensor".into())),
        }
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&t.data.tag().to_le_bytes());
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic, expected GTNS"));
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(at, format!("unsupported version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    if rank > 16 {
        return Err(Error::parse(8, format!("rank {rank} is too large")));
    }
    let dims = (0..rank)
        .map(|_| r.u32("dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let at = r.pos;
    let tag = r.u32("dtype")?;
    let size = match tag {
        0 | 2 => 4,
        1 => 8,
        _ => return Err(Error::parse(at, format!("unknown dtype tag {tag}"))),
    };
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(size))
        .ok_or_else(|| Error::parse(12, "dimensions overflow"))?;
    if r.remaining() != n {
        return Err(Error::parse(
            r.pos,
            format!("payload is {} bytes, dims {dims:?} need {n}", r.remaining()),
        ));
    }
    let p = r.take(n, "payload")?;
    let data = match tag {
        0 => TensorData::F32(p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        1 => TensorData::F64(p.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => TensorData::I32(p.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(Tensor { dims, data })
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips() {
        for t in [
            Tensor::new(vec![2, 3], TensorData::F32(vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0])).unwrap(),
            Tensor::f64(vec![1, 2], vec![std::f64::consts::PI, -1e-300]).unwrap(),
            Tensor::new(vec![3], TensorData::I32(vec![-1, 0, i32::MAX])).unwrap(),
            Tensor::f64(vec![], vec![42.0]).unwrap(),
        ] {
            let bytes = encode_tensor(&t);
            let back = decode_tensor(&bytes).unwrap();
            assert_eq!(encode_tensor(&back), bytes);
        }
    }

    #[test]
    fn hand_encoded() {
        let mut b = b"GTNS".to_vec();
        for v in [1u32, 1, 2, 2] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&7i32.to_le_bytes());
        b.extend_from_slice(&(-3i32).to_le_bytes());
        let t = decode_tensor(&b).unwrap();
        assert_eq!(t.dims, vec![2]);
        assert_eq!(t.data, TensorData::I32(vec![7, -3]));
        b.pop();
        assert!(matches!(decode_tensor(&b), Err(Error::Parse { offset: 20, .. })));
        assert!(Tensor::f64(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
