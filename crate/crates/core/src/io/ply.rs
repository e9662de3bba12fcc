//! Binary little-endian PLY in the reference 3DGS vertex layout:
//! `x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2 rot_0..3`.
//!
//! Properties are looked up by name, so any order (and extra properties) is
//! accepted. `f_rest` is channel-major, matching [`crate::types`]' SH layout.

use std::path::Path;

use nalgebra::Vector3;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::types::{GaussianPrimitive, GaussianScene, SH_COEFFS_PER_CHANNEL, SH_LEN};

const REST_PER_CHANNEL: usize = SH_COEFFS_PER_CHANNEL - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyPrecision {
    /// `float` properties, as written by the reference trainer.
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// Property names in write order.
pub fn property_names() -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..3 * REST_PER_CHANNEL).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn sh_slot(name: &str) -> Option<usize> {
    if let Some(i) = name.strip_prefix("f_dc_").and_then(|s| s.parse::<usize>().ok()) {
        return (i < 3).then_some(i * SH_COEFFS_PER_CHANNEL);
    }
    let i = name.strip_prefix("f_rest_")?.parse::<usize>().ok()?;
    (i < 3 * REST_PER_CHANNEL).then_some((i / REST_PER_CHANNEL) * SH_COEFFS_PER_CHANNEL + 1 + i % REST_PER_CHANNEL)
}

fn values_of(p: &GaussianPrimitive) -> Vec<f64> {
    let mut v = vec![p.position.x, p.position.y, p.position.z, 0.0, 0.0, 0.0];
    for c in 0..3 {
        v.push(p.sh[c * SH_COEFFS_PER_CHANNEL]);
    }
    for c in 0..3 {
        for k in 1..SH_COEFFS_PER_CHANNEL {
            v.push(p.sh[c * SH_COEFFS_PER_CHANNEL + k]);
        }
    }
    v.push(p.opacity_logit);
    v.extend(p.log_scale.iter());
    v.extend(p.rotation);
    v
}

pub fn encode_scene_ply(scene: &GaussianScene, precision: PlyPrecision) -> Vec<u8> {
    let ty = match precision {
        PlyPrecision::F32 => "float",
        PlyPrecision::F64 => "double",
    };
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        scene.len()
    );
    for name in property_names() {
        header.push_str(&format!("property {ty} {name}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for p in &scene.primitives {
        for v in values_of(p) {
            match precision {
                PlyPrecision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                PlyPrecision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Header {
    count: usize,
    props: Vec<(String, Scalar)>,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut next_line = |what: &str| -> Result<(usize, String)> {
        let start = pos;
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::parse(start, format!("unterminated header while reading {what}")))?;
        pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| Error::parse(start, "header is not UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (_, magic) = next_line("magic")?;
    if magic != "ply" {
        return Err(Error::parse(0, "missing `ply` magic"));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    let mut format_seen = false;
    loop {
        let (at, line) = next_line("header")?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::parse(at, format!("unsupported format `{fmt}`")));
                }
                format_seen = true;
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::parse(at, "duplicate vertex element"));
                }
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::parse(at, format!("bad vertex count `{n}`")))?,
                );
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(Error::parse(at, format!("unsupported element `{name}`")));
            }
            ["property", "list", ..] => {
                return Err(Error::parse(at, "list properties are not supported"));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(Error::parse(at, "property outside an element"));
                }
                let s = Scalar::parse(ty).ok_or_else(|| Error::parse(at, format!("unknown property type `{ty}`")))?;
                props.push((name.to_string(), s));
            }
            ["end_header"] => break,
            _ => return Err(Error::parse(at, format!("unrecognised header line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(Error::parse(pos, "header has no format line"));
    }
    let count = count.ok_or_else(|| Error::parse(pos, "header has no vertex element"))?;
    Ok(Header { count, props, body: pos })
}

pub fn decode_scene_ply(bytes: &[u8], scene_id: &str) -> Result<GaussianScene> {
    let h = parse_header(bytes)?;
    let find = |name: &str| -> Result<(usize, Scalar)> {
        let mut off = 0;
        for (n, s) in &h.props {
            if n == name {
                return Ok((off, *s));
            }
            off += s.size();
        }
        Err(Error::MissingProperty(name.to_string()))
    };
    let stride: usize = h.props.iter().map(|p| p.1.size()).sum();
    let pos: Vec<_> = ["x", "y", "z"].iter().map(|n| find(n)).collect::<Result<_>>()?;
    let scale: Vec<_> = (0..3).map(|i| find(&format!("scale_{i}"))).collect::<Result<_>>()?;
    let rot: Vec<_> = (0..4).map(|i| find(&format!("rot_{i}"))).collect::<Result<_>>()?;
    let opacity = find("opacity")?;
    let mut sh = vec![(0, Scalar::F32); SH_LEN];
    for name in property_names().iter().filter(|n| sh_slot(n).is_some()) {
        sh[sh_slot(name).unwrap()] = find(name)?;
    }

    let need = h
        .count
        .checked_mul(stride)
        .ok_or_else(|| Error::parse(h.body, "vertex count overflows"))?;
    let body = &bytes[h.body..];
    if body.len() < need {
        let row = body.len() / stride.max(1);
        return Err(Error::parse(
            h.body + row * stride,
            format!("truncated payload: vertex {row} of {} is incomplete", h.count),
        ));
    }
    if body.len() > need {
        return Err(Error::parse(h.body + need, format!("{} trailing bytes", body.len() - need)));
    }
    let primitives = body
        .chunks_exact(stride.max(1))
        .take(h.count)
        .map(|row| {
            let get = |(off, s): (usize, Scalar)| s.read(&row[off..off + s.size()]);
            let mut coeffs = [0.0; SH_LEN];
            for (k, slot) in sh.iter().enumerate() {
                coeffs[k] = get(*slot);
            }
            GaussianPrimitive {
                position: Vector3::new(get(pos[0]), get(pos[1]), get(pos[2])),
                log_scale: Vector3::new(get(scale[0]), get(scale[1]), get(scale[2])),
                rotation: [get(rot[0]), get(rot[1]), get(rot[2]), get(rot[3])],
                opacity_logit: get(opacity),
                sh: coeffs,
            }
        })
        .collect();
    Ok(GaussianScene::new(scene_id, primitives))
}

pub fn save_scene_ply(path: &Path, scene: &GaussianScene, precision: PlyPrecision) -> Result<()> {
    write_atomic(path, &encode_scene_ply(scene, precision))
}

/// Loads a scene; its id is the file stem.
pub fn load_scene_ply(path: &Path) -> Result<GaussianScene> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_scene_ply(&read_bytes(path)?, &id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GaussianPrimitive {
        let mut sh = [0.0; SH_LEN];
        for (k, v) in sh.iter_mut().enumerate() {
            *v = k as f64 * 0.125 - 2.0;
        }
        GaussianPrimitive {
            position: Vector3::new(1.5, -2.25, 3.0),
            log_scale: Vector3::new(-1.0, -2.0, -9.25),
            rotation: [0.5, 0.5, -0.5, 0.5],
            opacity_logit: 0.75,
            sh,
        }
    }

    #[test]
    fn names_and_slots() {
        let names = property_names();
        assert_eq!(names.len(), 62);
        assert_eq!(sh_slot("f_dc_1"), Some(16));
        assert_eq!(sh_slot("f_rest_0"), Some(1));
        assert_eq!(sh_slot("f_rest_15"), Some(17));
        assert_eq!(sh_slot("f_rest_44"), Some(47));
        assert_eq!(sh_slot("f_rest_45"), None);
    }

    #[test]
    fn roundtrip_both_precisions() {
        let scene = GaussianScene::new("s", vec![sample(), sample()]);
        for prec in [PlyPrecision::F32, PlyPrecision::F64] {
            let bytes = encode_scene_ply(&scene, prec);
            let back = decode_scene_ply(&bytes, "s").unwrap();
            assert_eq!(back, scene);
            assert_eq!(encode_scene_ply(&back, prec), bytes);
        }
    }

    #[test]
    fn missing_property_is_named() {
        let bytes = encode_scene_ply(&GaussianScene::new("s", vec![sample()]), PlyPrecision::F32);
        let text = String::from_utf8_lossy(&bytes).replace("property float rot_3\n", "property float rot_x\n");
        let err = decode_scene_ply(text.as_bytes(), "s").unwrap_err();
        assert!(matches!(err, Error::MissingProperty(ref p) if p == "rot_3"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_scene_ply(&GaussianScene::new("s", vec![sample(), sample()]), PlyPrecision::F32);
        let body = bytes.len() - 2 * 62 * 4;
        let err = decode_scene_ply(&bytes[..bytes.len() - 3], "s").unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset == body + 62 * 4), "{err}");
        let err = decode_scene_ply(b"plx\n", "s").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }
}
