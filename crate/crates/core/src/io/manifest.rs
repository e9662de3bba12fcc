//! Camera manifests (JSON array) and pair manifests (JSON Lines).

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::labeler::PairRecord;
use crate::types::CameraModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub view_id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation, row-major.
    #[serde(rename = "R_wc")]
    pub r_wc: [f64; 9],
    #[serde(rename = "t_wc")]
    pub t_wc: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(view_id: impl Into<String>, c: &CameraModel) -> Self {
        let r = &c.rotation_wc;
        Self {
            view_id: view_id.into(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            r_wc: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t_wc: [c.translation_wc.x, c.translation_wc.y, c.translation_wc.z],
        }
    }

    pub fn to_camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            Matrix3::from_row_slice(&self.r_wc),
            Vector3::from(self.t_wc),
        )
        .map_err(|e| Error::RejectedInput(format!("camera `{}`: {e}", self.view_id)))
    }
}

pub fn encode_cameras(records: &[CameraRecord]) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(records)?;
    s.push(b'\n');
    Ok(s)
}

pub fn decode_cameras(text: &str) -> Result<Vec<CameraRecord>> {
    let records: Vec<CameraRecord> = serde_json::from_str(text)?;
    let mut ids: Vec<&str> = records.iter().map(|r| r.view_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::RejectedInput(format!("duplicate view id `{}`", w[0])));
    }
    for r in &records {
        r.to_camera()?;
    }
    Ok(records)
}

pub fn save_cameras(path: &Path, records: &[CameraRecord]) -> Result<()> {
    write_atomic(path, &encode_cameras(records)?)
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraRecord>> {
    decode_cameras(&read_text(path)?)
}

pub fn encode_pairs(records: &[PairRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn decode_pairs(text: &str) -> Result<Vec<PairRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::ConfigLine {
                path: "pairs".into(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn save_pairs(path: &Path, records: &[PairRecord]) -> Result<()> {
    write_atomic(path, &encode_pairs(records)?)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    decode_pairs(&read_text(path)?).map_err(|e| match e {
        Error::ConfigLine { line, msg, .. } => Error::ConfigLine {
            path: path.display().to_string(),
            line,
            msg,
        },
        other => other,
    })
}
