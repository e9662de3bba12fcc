//! End-to-end pipeline stages: render, synthesise views, label pairs and
//! evaluate label quality.
//!
//! Stages talk only through files. Each stage writes a `<stage>.stage.json`
//! record holding a hash of its inputs and the hashes of its outputs; a rerun
//! whose inputs and outputs still match is skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    attribute_loss, combined_infonce, l2_normalize, normalize_scene_scales, pairwise_sum, quaternion_to_6d,
    AlignmentAnchor, AttributeLossConfig, GaussianFeature, InfoNceConfig, InfoNceLoss, NegativePool, FEATURE_LEN,
};
use crate::augment::{augment_image, AugmentRecipe, ColorJitter};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::io::config::ConfigFile;
use crate::io::gtns::{Tensor, TensorData};
use crate::io::manifest::{load_cameras, save_cameras, CameraRecord};
use crate::io::ply::load_scene_ply;
use crate::io::{gidx, pfm, read_bytes, rgb, write_atomic};
use crate::labeler::{
    build_pair_manifest, score_pair, LabelConfig, LabelView, SampleMode, DEFAULT_GRID_STEP, DEFAULT_OVERLAP_BINS,
    DEFAULT_REL_TOL, DEFAULT_SAMPLE_COUNT,
};
use crate::metrics::{
    depth_l1_regularization, evaluate_gt_quality, DepthRegularization, DepthSource, GtEvalConfig, GtQualityReport,
    GtScene, GtView, PriorAlignment,
};
use crate::render::{render_buffers, view_from_buffers, DepthMode, RenderSettings, DEFAULT_TAU};
use crate::synthetic::{make_synthetic_scene, SceneKind, SyntheticParams};
use crate::types::{CameraModel, GaussianScene};
use crate::view_synth::{
    default_tau_depth, synthesize_views, BatchGranularity, PerturbationConfig, SynthConfig, DEFAULT_TAU_ALPHA,
};

/// splitmix64 finaliser over `seed ^ salt`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RgbFormat {
    #[default]
    Png,
    Ppm,
}

impl RgbFormat {
    pub fn extension(self) -> &'static str {
        match self {
            RgbFormat::Png => "png",
            RgbFormat::Ppm => "ppm",
        }
    }
}

/// Every tunable of the pipeline. Parsed from a flat config file, then
/// overridden by command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub depth_mode: DepthMode,
    pub tau: f64,
    pub tau_alpha: f64,
    pub tau_depth: Option<f64>,
    pub rot_jitter_max: f64,
    pub trans_jitter_max: f64,
    pub scale_range: (f64, f64),
    pub per_view_count: usize,
    pub extra_ratio: f64,
    pub batch: BatchGranularity,
    pub overlap_bins: Vec<(f64, f64)>,
    pub rel_tol: f64,
    pub sampling: SampleMode,
    pub pairs_per_scene: usize,
    pub augment: AugmentRecipe,
    pub rgb_format: RgbFormat,
    pub write_correspondences: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let p = PerturbationConfig::default();
        Self {
            seed: 0,
            depth_mode: DepthMode::Plane,
            tau: DEFAULT_TAU,
            tau_alpha: DEFAULT_TAU_ALPHA,
            tau_depth: None,
            rot_jitter_max: p.rot_jitter_max,
            trans_jitter_max: p.trans_jitter_max,
            scale_range: p.scale_range,
            per_view_count: 4,
            extra_ratio: 1.0,
            batch: BatchGranularity::PerTrainView,
            overlap_bins: DEFAULT_OVERLAP_BINS.to_vec(),
            rel_tol: DEFAULT_REL_TOL,
            sampling: SampleMode::Grid {
                step: DEFAULT_GRID_STEP,
            },
            pairs_per_scene: 99,
            augment: AugmentRecipe::default(),
            rgb_format: RgbFormat::Png,
            write_correspondences: true,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "depth_mode",
    "tau",
    "tau_alpha",
    "tau_depth",
    "rot_jitter_max",
    "trans_jitter_max",
    "scale_range",
    "per_view_count",
    "extra_ratio",
    "batch",
    "overlap_bins",
    "rel_tol",
    "sampling",
    "grid_step",
    "sample_count",
    "pairs_per_scene",
    "gamma",
    "jitter_gain",
    "jitter_bias",
    "blur_length",
    "iso_noise",
    "rgb_format",
    "write_correspondences",
];

/// `lo:hi`, or a single value meaning `lo = hi`.
fn parse_range<T: std::str::FromStr + Copy>(s: &str) -> std::result::Result<(T, T), String>
where
    T::Err: std::fmt::Display,
{
    let p = |t: &str| t.trim().parse::<T>().map_err(|e| format!("`{t}`: {e}"));
    match s.split_once(':') {
        Some((a, b)) => Ok((p(a)?, p(b)?)),
        None => {
            let v = p(s)?;
            Ok((v, v))
        }
    }
}

impl PipelineConfig {
    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let file = ConfigFile::parse(text, path, CONFIG_KEYS)?;
        let mut cfg = Self::default();
        cfg.apply(&file)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::io::read_text(path)?, &path.display().to_string())
    }

    /// Overrides fields with the entries of `file`, validating each on its line.
    pub fn apply(&mut self, file: &ConfigFile) -> Result<()> {
        let range = |key: &str| -> Result<Option<(f64, f64)>> {
            match file.get(key) {
                None => Ok(None),
                Some(e) => parse_range(&e.value)
                    .map(Some)
                    .map_err(|m| file.error_at(e.line, format!("`{key}`: {m}"))),
            }
        };
        if let Some(v) = file.parse_value("seed")? {
            self.seed = v;
        }
        if let Some(v) = file.parse_value("depth_mode")? {
            self.depth_mode = v;
        }
        if let Some(v) = file.parse_value("tau")? {
            self.tau = v;
        }
        if let Some(v) = file.parse_value("tau_alpha")? {
            self.tau_alpha = v;
        }
        if let Some(e) = file.get("tau_depth") {
            self.tau_depth = match e.value.as_str() {
                "auto" => None,
                s => Some(
                    s.parse()
                        .map_err(|err| file.error_at(e.line, format!("`tau_depth`: {err}")))?,
                ),
            };
        }
        if let Some(v) = file.parse_value("rot_jitter_max")? {
            self.rot_jitter_max = v;
        }
        if let Some(v) = file.parse_value("trans_jitter_max")? {
            self.trans_jitter_max = v;
        }
        if let Some(v) = range("scale_range")? {
            self.scale_range = v;
        }
        if let Some(v) = file.parse_value("per_view_count")? {
            self.per_view_count = v;
        }
        if let Some(v) = file.parse_value("extra_ratio")? {
            self.extra_ratio = v;
        }
        if let Some(e) = file.get("batch") {
            self.batch = match e.value.as_str() {
                "per_train_view" => BatchGranularity::PerTrainView,
                "global" => BatchGranularity::Global,
                other => {
                    return Err(file.error_at(e.line, format!("`batch`: expected per_train_view or global, got `{other}`")))
                }
            };
        }
        if let Some(e) = file.get("overlap_bins") {
            self.overlap_bins = e
                .value
                .split(',')
                .map(|b| parse_range::<f64>(b.trim()))
                .collect::<std::result::Result<_, _>>()
                .map_err(|m| file.error_at(e.line, format!("`overlap_bins`: {m}")))?;
            crate::labeler::validate_bins(&self.overlap_bins).map_err(|err| file.error_at(e.line, err.to_string()))?;
        }
        if let Some(v) = file.parse_value("rel_tol")? {
            self.rel_tol = v;
        }
        let step: Option<usize> = file.parse_value("grid_step")?;
        let count: Option<usize> = file.parse_value("sample_count")?;
        match file.get("sampling").map(|e| (e.value.as_str(), e.line)) {
            None | Some(("grid", _)) => {
                if let Some(step) = step {
                    self.sampling = SampleMode::Grid { step };
                }
            }
            Some(("random", _)) => {
                self.sampling = SampleMode::Random {
                    count: count.unwrap_or(DEFAULT_SAMPLE_COUNT),
                    seed: 0,
                };
            }
            Some((other, line)) => {
                return Err(file.error_at(line, format!("`sampling`: expected grid or random, got `{other}`")))
            }
        }
        if let Some(v) = file.parse_value("pairs_per_scene")? {
            self.pairs_per_scene = v;
        }
        if let Some(v) = range("gamma")? {
            self.augment.gamma = Some(v);
        }
        let gain = range("jitter_gain")?;
        let bias = range("jitter_bias")?;
        if gain.is_some() || bias.is_some() {
            self.augment.color_jitter = Some(ColorJitter {
                gain: gain.unwrap_or((1.0, 1.0)),
                bias: bias.unwrap_or((0.0, 0.0)),
            });
        }
        if let Some(e) = file.get("blur_length") {
            self.augment.motion_blur = Some(
                parse_range::<usize>(&e.value).map_err(|m| file.error_at(e.line, format!("`blur_length`: {m}")))?,
            );
        }
        if let Some(v) = range("iso_noise")? {
            self.augment.iso_noise = Some(v);
        }
        if let Some(e) = file.get("rgb_format") {
            self.rgb_format = match e.value.as_str() {
                "png" => RgbFormat::Png,
                "ppm" => RgbFormat::Ppm,
                other => return Err(file.error_at(e.line, format!("`rgb_format`: expected png or ppm, got `{other}`"))),
            };
        }
        if let Some(v) = file.parse_value("write_correspondences")? {
            self.write_correspondences = v;
        }
        self.validate().map_err(|e| Error::Config(format!("{}: {e}", file.path)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if let SampleMode::Grid { step: 0 } = self.sampling {
            return Err(Error::Config("grid_step must be positive".into()));
        }
        crate::labeler::validate_bins(&self.overlap_bins)?;
        self.perturbation().validate()?;
        self.augment.validate()
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        PerturbationConfig {
            rot_jitter_max: self.rot_jitter_max,
            trans_jitter_max: self.trans_jitter_max,
            scale_range: self.scale_range,
            seed: self.seed,
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            depth_mode: self.depth_mode,
            tau: self.tau,
            tau_alpha: self.tau_alpha,
            tau_depth: self.tau_depth.unwrap_or(f64::INFINITY),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            perturbation: self.perturbation(),
            per_view_count: self.per_view_count,
            extra_ratio: self.extra_ratio,
            depth_mode: self.depth_mode,
            tau: self.tau,
            tau_alpha: self.tau_alpha,
            tau_depth: self.tau_depth,
            batch: self.batch,
        }
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            rel_tol: self.rel_tol,
            sampling: match self.sampling {
                SampleMode::Random { count, .. } => SampleMode::Random {
                    count,
                    seed: derive_seed(self.seed, 0x1abe1),
                },
                grid => grid,
            },
        }
    }

    /// Stable text form used in stage hashes.
    pub fn fingerprint(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub input_hash: String,
    /// Output path (relative to the stage root) to sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Inputs and outputs matched the previous record.
    Skipped,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything a stage depends on.
pub fn input_hash(stage: &str, cfg: &PipelineConfig, files: &[&Path], extra: &str) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(cfg.fingerprint().as_bytes());
    h.update([0]);
    h.update(extra.as_bytes());
    for f in files {
        h.update([0]);
        h.update(read_bytes(f)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn record_path(root: &Path, stage: &str) -> PathBuf {
    root.join(format!("{stage}.stage.json"))
}

fn stage_is_current(root: &Path, stage: &str, hash: &str) -> bool {
    let Ok(text) = std::fs::read_to_string(record_path(root, stage)) else {
        return false;
    };
    let Ok(rec) = serde_json::from_str::<StageRecord>(&text) else {
        return false;
    };
    rec.stage == stage
        && rec.input_hash == hash
        && rec.outputs.iter().all(|(rel, digest)| {
            std::fs::read(root.join(rel)).map(|b| sha256_hex(&b) == *digest).unwrap_or(false)
        })
}

/// Collects a stage's outputs in memory, then writes each atomically and
/// records the stage.
struct StageWriter {
    root: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl StageWriter {
    fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        }
    }

    fn add(&mut self, rel: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(rel.into(), bytes);
    }

    fn add_json<T: Serialize>(&mut self, rel: impl Into<String>, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(rel, bytes);
        Ok(())
    }

    fn commit(self, stage: &str, hash: String) -> Result<Vec<PathBuf>> {
        let mut outputs = BTreeMap::new();
        let mut paths = Vec::new();
        for (rel, bytes) in &self.files {
            let path = self.root.join(rel);
            write_atomic(&path, bytes)?;
            outputs.insert(rel.clone(), sha256_hex(bytes));
            paths.push(path);
        }
        let rec = StageRecord {
            stage: stage.to_string(),
            input_hash: hash,
            outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&rec)?;
        bytes.push(b'\n');
        write_atomic(&record_path(&self.root, stage), &bytes)?;
        Ok(paths)
    }
}

fn load_bundle(scene_path: &Path, cameras_path: &Path) -> Result<(GaussianScene, Vec<CameraRecord>)> {
    let scene = load_scene_ply(scene_path)?;
    scene.activate_all()?;
    let cams = load_cameras(cameras_path)?;
    if cams.is_empty() {
        return Err(Error::EmptyInput("camera manifest has no cameras"));
    }
    Ok((scene, cams))
}

fn cameras_of(records: &[CameraRecord]) -> Result<Vec<CameraModel>> {
    records.iter().map(CameraRecord::to_camera).collect()
}

fn normal_tensor(n: &Image<[f64; 3]>) -> Tensor {
    Tensor {
        dims: vec![n.height, n.width, 3],
        data: TensorData::F64(n.data.iter().flatten().copied().collect()),
    }
}

fn map_tensor(m: &DepthMap) -> Tensor {
    Tensor {
        dims: vec![m.height, m.width],
        data: TensorData::F64(m.data.clone()),
    }
}

/// Renders every camera and writes, per view `v`:
/// `v.rgb.{png,ppm}`, `v.gmap.gidx`, `v.normal.gtns`, `v.distance.gtns`,
/// `v.alpha.pfm`, and per mode `v.depth_<mode>.pfm` and `v.stats_<mode>.json`.
/// With a non-trivial augmentation recipe `v.rgb_aug.*` is written as well.
pub fn run_render(
    scene_path: &Path,
    cameras_path: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    modes: &[DepthMode],
) -> Result<StageOutcome> {
    cfg.validate()?;
    let root = out.join("render");
    let extra: Vec<&str> = modes.iter().map(|m| m.as_str()).collect();
    let hash = input_hash("render", cfg, &[scene_path, cameras_path], &extra.join(","))?;
    if stage_is_current(&root, "render", &hash) {
        return Ok(StageOutcome::Skipped);
    }
    let (scene, records) = load_bundle(scene_path, cameras_path)?;
    let cams = cameras_of(&records)?;
    let tau_depth = match cfg.tau_depth {
        Some(t) => t,
        None => default_tau_depth(&scene, &cams, cfg.depth_mode, cfg.tau)?,
    };
    let buffers: Vec<_> = cams
        .par_iter()
        .map(|c| render_buffers(c, &scene, cfg.tau))
        .collect::<Result<_>>()?;

    let mut w = StageWriter::new(&root);
    let ext = cfg.rgb_format.extension();
    for (k, (rec, b)) in records.iter().zip(buffers).enumerate() {
        let v = &rec.view_id;
        let rgb_bytes = |img: &crate::image::RgbImage| match cfg.rgb_format {
            RgbFormat::Png => rgb::encode_png(img),
            RgbFormat::Ppm => Ok(rgb::encode_ppm(img)),
        };
        w.add(format!("{v}.rgb.{ext}"), rgb_bytes(&b.rgb)?);
        if !cfg.augment.is_identity() {
            let aug = augment_image(&b.rgb, &cfg.augment, derive_seed(cfg.seed, k as u64))?;
            w.add(format!("{v}.rgb_aug.{ext}"), rgb_bytes(&aug)?);
        }
        w.add(format!("{v}.gmap.gidx"), gidx::encode_gmap(&b.gmap));
        w.add(
            format!("{v}.normal.gtns"),
            crate::io::gtns::encode_tensor(&normal_tensor(&b.normal)),
        );
        w.add(
            format!("{v}.distance.gtns"),
            crate::io::gtns::encode_tensor(&map_tensor(&b.distance)),
        );
        w.add(format!("{v}.alpha.pfm"), pfm::encode_pfm(&b.alpha_acc));
        for &m in modes {
            w.add(format!("{v}.depth_{m}.pfm"), pfm::encode_pfm(b.depth(m)));
            let settings = RenderSettings {
                depth_mode: m,
                tau_depth,
                ..cfg.render_settings()
            };
            let view = view_from_buffers(b.clone(), &settings);
            w.add_json(format!("{v}.stats_{m}.json"), &view.stats)?;
        }
    }
    w.commit("render", hash)?;
    Ok(StageOutcome::Ran)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub view_id: String,
    pub train_id: String,
    pub draw_index: usize,
    pub stats: crate::view_synth::ViewStats,
}

/// Writes `synth/cameras.json` (training cameras followed by accepted novel
/// views, ids `<train>_s<draw>`) and `synth/report.json`.
pub fn run_synth_views(scene_path: &Path, cameras_path: &Path, out: &Path, cfg: &PipelineConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let root = out.join("synth");
    let hash = input_hash("synth-views", cfg, &[scene_path, cameras_path], "")?;
    if stage_is_current(&root, "synth-views", &hash) {
        return Ok(StageOutcome::Skipped);
    }
    let (scene, records) = load_bundle(scene_path, cameras_path)?;
    let cams = cameras_of(&records)?;
    let views = synthesize_views(&scene, &cams, &cfg.synth_config())?;
    let mut manifest = records.clone();
    let mut report = Vec::new();
    for v in &views {
        let train_id = &records[v.train_index].view_id;
        let id = format!("{train_id}_s{}", v.draw_index);
        manifest.push(CameraRecord::from_camera(&id, &v.camera));
        report.push(SynthEntry {
            view_id: id,
            train_id: train_id.clone(),
            draw_index: v.draw_index,
            stats: v.stats,
        });
    }
    let mut w = StageWriter::new(&root);
    w.add("cameras.json", crate::io::manifest::encode_cameras(&manifest)?);
    w.add_json("report.json", &report)?;
    w.commit("synth-views", hash)?;
    Ok(StageOutcome::Ran)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub depth_mode: DepthMode,
    pub views: usize,
    pub evaluated_pairs: usize,
    pub kept_pairs: usize,
    pub per_bin: Vec<usize>,
    pub matches: usize,
}

/// Renders depth and Gaussian maps for every camera, scores all pairs and
/// writes `label/pairs.jsonl`, `label/summary.json` and, per kept pair,
/// `label/corr/<a>__<b>.gtns`: an (H, W, 3) f64 tensor of target x, target
/// y and projected depth, NaN where the pixel is not a consistent match.
pub fn run_label(scene_path: &Path, cameras_path: &Path, out: &Path, cfg: &PipelineConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let root = out.join("label");
    let hash = input_hash("label", cfg, &[scene_path, cameras_path], "")?;
    if stage_is_current(&root, "label", &hash) {
        return Ok(StageOutcome::Skipped);
    }
    let (scene, records) = load_bundle(scene_path, cameras_path)?;
    let cams = cameras_of(&records)?;
    let views: Vec<LabelView> = records
        .par_iter()
        .zip(cams.par_iter())
        .map(|(r, c)| {
            let b = render_buffers(c, &scene, cfg.tau)?;
            Ok(LabelView {
                id: r.view_id.clone(),
                camera: c.clone(),
                depth: b.depth(cfg.depth_mode).clone(),
                gmap: b.gmap,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = build_pair_manifest(&views, &cfg.overlap_bins, &cfg.label_config())?;

    let mut w = StageWriter::new(&root);
    w.add("pairs.jsonl", crate::io::manifest::encode_pairs(&manifest.records)?);
    let mut per_bin = vec![0; cfg.overlap_bins.len()];
    for r in &manifest.records {
        per_bin[r.bin] += 1;
    }
    w.add_json(
        "summary.json",
        &LabelSummary {
            depth_mode: cfg.depth_mode,
            views: views.len(),
            evaluated_pairs: manifest.evaluated,
            kept_pairs: manifest.records.len(),
            per_bin,
            matches: manifest.records.iter().map(|r| r.matches.len()).sum(),
        },
    )?;
    if cfg.write_correspondences {
        let index: BTreeMap<&str, usize> = views.iter().enumerate().map(|(k, v)| (v.id.as_str(), k)).collect();
        let dense: Vec<(String, Vec<u8>)> = manifest
            .records
            .par_iter()
            .map(|r| {
                let scored = score_pair(&views, index[r.view_a.as_str()], index[r.view_b.as_str()], cfg.rel_tol)?;
                let mut data = Vec::with_capacity(scored.mask_ab.len() * 3);
                for (i, &ok) in scored.mask_ab.data.iter().enumerate() {
                    if ok {
                        let [x, y] = scored.corr_ab.target_coords.data[i];
                        data.extend([x, y, scored.corr_ab.projected_depth.data[i]]);
                    } else {
                        data.extend([f64::NAN; 3]);
                    }
                }
                let t = Tensor {
                    dims: vec![scored.mask_ab.height, scored.mask_ab.width, 3],
                    data: TensorData::F64(data),
                };
                Ok((
                    format!("corr/{}__{}.gtns", r.view_a, r.view_b),
                    crate::io::gtns::encode_tensor(&t),
                ))
            })
            .collect::<Result<_>>()?;
        for (rel, bytes) in dense {
            w.add(rel, bytes);
        }
    }
    w.commit("label", hash)?;
    Ok(StageOutcome::Ran)
}

/// Cameras used by the bundled synthetic evaluation: a horizontal row with a
/// slight vertical drift, all looking along +z.
pub fn synthetic_eval_cameras(count: usize, step: f64, focal: f64, size: u32) -> Result<Vec<CameraModel>> {
    let c = (size as f64 - 1.0) / 2.0;
    (0..count)
        .map(|i| {
            let x = i as f64 * step - (count as f64 - 1.0) * step / 2.0;
            let center = Vector3::new(x, 0.05 * i as f64, 0.0);
            CameraModel::new(focal, focal, c, c, size, size, Matrix3::identity(), -center)
        })
        .collect()
}

/// One bundled evaluation scene: the kind, its parameters and a seed.
pub fn synthetic_eval_specs() -> Vec<(SceneKind, SyntheticParams)> {
    let base = SyntheticParams {
        extent: 4.0,
        count: 1600,
        radius: 1.2,
        ..Default::default()
    };
    vec![
        (SceneKind::Plane, SyntheticParams { tilt: 0.4, ..base }),
        (SceneKind::SphereShell, base),
        (SceneKind::TwoPlanes, base),
    ]
}

/// Builds the evaluation dataset: every bundled scene rendered in every depth
/// mode plus its analytic depth, over the synthetic camera row.
pub fn synthetic_gt_dataset(seed: u64, tau: f64) -> Result<Vec<GtScene>> {
    let cams = synthetic_eval_cameras(10, 0.5, 50.0, 64)?;
    synthetic_eval_specs()
        .into_iter()
        .enumerate()
        .map(|(k, (kind, params))| {
            let s = make_synthetic_scene(kind, &params, derive_seed(seed, k as u64))?;
            let views = cams
                .par_iter()
                .enumerate()
                .map(|(i, c)| {
                    let b = render_buffers(c, &s.scene, tau)?;
                    let mut depths = BTreeMap::new();
                    depths.insert(DepthSource::Analytic, s.surface.depth_map(c));
                    for m in DepthMode::ALL {
                        depths.insert(DepthSource::from(m), b.depth(m).clone());
                    }
                    Ok(GtView {
                        id: format!("v{i}"),
                        camera: c.clone(),
                        depths,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(GtScene {
                scene_id: s.scene.scene_id.clone(),
                views,
                surface: Some(s.surface),
            })
        })
        .collect()
}

fn gt_eval_config(cfg: &PipelineConfig) -> GtEvalConfig {
    GtEvalConfig {
        sampling: cfg.label_config().sampling,
        bins: cfg.overlap_bins.clone(),
        pairs_per_scene: cfg.pairs_per_scene,
        rel_tol: cfg.rel_tol,
        seed: cfg.seed,
    }
}

/// Label-quality report for a scene bundle (sources: every depth mode).
pub fn run_eval_gt(scene_path: &Path, cameras_path: &Path, out: &Path, cfg: &PipelineConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    let root = out.join("eval");
    let hash = input_hash("eval-gt", cfg, &[scene_path, cameras_path], "")?;
    if stage_is_current(&root, "eval-gt", &hash) {
        return Ok(StageOutcome::Skipped);
    }
    let (scene, records) = load_bundle(scene_path, cameras_path)?;
    let cams = cameras_of(&records)?;
    let views = records
        .par_iter()
        .zip(cams.par_iter())
        .map(|(r, c)| {
            let b = render_buffers(c, &scene, cfg.tau)?;
            Ok(GtView {
                id: r.view_id.clone(),
                camera: c.clone(),
                depths: DepthMode::ALL.iter().map(|&m| (m.into(), b.depth(m).clone())).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let dataset = [GtScene {
        scene_id: scene.scene_id.clone(),
        views,
        surface: None,
    }];
    let report = evaluate_gt_quality(&dataset, &gt_eval_config(cfg))?;
    let mut w = StageWriter::new(&root);
    w.add_json("gt_report.json", &report)?;
    w.commit("eval-gt", hash)?;
    Ok(StageOutcome::Ran)
}

/// Label-quality report on the bundled synthetic scenes (adds the analytic
/// source and oracle-referenced relative errors).
pub fn run_eval_gt_synthetic(out: &Path, cfg: &PipelineConfig) -> Result<(StageOutcome, GtQualityReport)> {
    cfg.validate()?;
    let root = out.join("eval");
    let dataset = synthetic_gt_dataset(cfg.seed, cfg.tau)?;
    let report = evaluate_gt_quality(&dataset, &gt_eval_config(cfg))?;
    let mut w = StageWriter::new(&root);
    w.add_json("gt_report.json", &report)?;
    let hash = input_hash("eval-gt", cfg, &[], "synthetic")?;
    w.commit("eval-gt", hash)?;
    Ok((StageOutcome::Ran, report))
}

/// Writes a bundled synthetic scene as PLY plus a camera manifest.
pub fn write_synthetic_bundle(
    kind: SceneKind,
    params: &SyntheticParams,
    seed: u64,
    cameras: usize,
    out: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let s = make_synthetic_scene(kind, params, seed)?;
    let cams = synthetic_eval_cameras(cameras, 0.5, 50.0, 64)?;
    let ply = out.join("scene.ply");
    let cam_path = out.join("cameras.json");
    crate::io::ply::save_scene_ply(&ply, &s.scene, crate::io::ply::PlyPrecision::F32)?;
    let records: Vec<CameraRecord> = cams
        .iter()
        .enumerate()
        .map(|(i, c)| CameraRecord::from_camera(format!("v{i}"), c))
        .collect();
    save_cameras(&cam_path, &records)?;
    Ok((ply, cam_path))
}

// ---- loss evaluation on tensor inputs ----

fn rows(t: &Tensor, width: Option<usize>, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    if t.dims.len() != 2 {
        return Err(Error::Shape(format!("{what}: expected a rank-2 tensor, got dims {:?}", t.dims)));
    }
    if let Some(w) = width {
        if t.dims[1] != w {
            return Err(Error::Shape(format!("{what}: expected {w} columns, got {}", t.dims[1])));
        }
    }
    Ok((t.dims[0], t.dims[1], t.to_f64()))
}

/// NLL over a score matrix (rank 2) and an (N, 2) i32 tensor of indices.
pub fn eval_nll(scores: &Tensor, matches: &Tensor) -> Result<f64> {
    let (r, c, s) = rows(scores, None, "scores")?;
    let s = DMatrix::from_row_slice(r, c, &s);
    let (_, _, _) = rows(matches, Some(2), "matches")?;
    let idx = matches.to_i64()?;
    let gt = idx
        .chunks_exact(2)
        .map(|p| {
            if p[0] < 0 || p[1] < 0 {
                Err(Error::Shape(format!("negative match index ({}, {})", p[0], p[1])))
            } else {
                Ok((p[0] as usize, p[1] as usize))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    crate::align::nll_match_loss(&s, &gt)
}

/// Combined InfoNCE over (N, D) voxel and patch embeddings. Rows are
/// L2-normalised first. `scenes` is an optional length-N i32 tensor of scene
/// ids (all zero if absent).
pub fn eval_infonce(v: &Tensor, q_a: &Tensor, q_b: &Tensor, scenes: Option<&Tensor>, cfg: &InfoNceConfig) -> Result<InfoNceLoss> {
    let (n, d, vv) = rows(v, None, "v")?;
    let (_, _, qa) = rows(q_a, Some(d), "q_a")?;
    let (_, _, qb) = rows(q_b, Some(d), "q_b")?;
    if q_a.dims[0] != n || q_b.dims[0] != n {
        return Err(Error::Shape("v, q_a and q_b need the same number of rows".into()));
    }
    let ids = match scenes {
        Some(t) => {
            let ids = t.to_i64()?;
            if ids.len() != n {
                return Err(Error::Shape(format!("{} scene ids for {n} anchors", ids.len())));
            }
            ids
        }
        None => vec![0; n],
    };
    let batch = (0..n)
        .map(|i| {
            Ok(AlignmentAnchor {
                scene: ids[i] as usize,
                v: l2_normalize(&vv[i * d..(i + 1) * d])?,
                q_a: l2_normalize(&qa[i * d..(i + 1) * d])?,
                q_b: l2_normalize(&qb[i * d..(i + 1) * d])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    combined_infonce(&batch, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAttributeLoss {
    pub rows: usize,
    pub regression: f64,
    pub consistency: f64,
    pub total: f64,
}

/// Attribute loss averaged over rows of four (N, 59) tensors.
pub fn eval_attribute(pred_a: &Tensor, pred_b: &Tensor, gt_a: &Tensor, gt_b: &Tensor, cfg: &AttributeLossConfig) -> Result<MeanAttributeLoss> {
    let (n, _, pa) = rows(pred_a, Some(FEATURE_LEN), "pred_a")?;
    let mut others = Vec::new();
    for (t, name) in [(pred_b, "pred_b"), (gt_a, "gt_a"), (gt_b, "gt_b")] {
        let (m, _, d) = rows(t, Some(FEATURE_LEN), name)?;
        if m != n {
            return Err(Error::Shape(format!("{name} has {m} rows, expected {n}")));
        }
        others.push(d);
    }
    if n == 0 {
        return Err(Error::EmptyInput("no attribute rows"));
    }
    let f = |d: &[f64], i: usize| GaussianFeature::from_slice(&d[i * FEATURE_LEN..(i + 1) * FEATURE_LEN]);
    let losses = (0..n)
        .map(|i| attribute_loss(&f(&pa, i)?, &f(&others[0], i)?, &f(&others[1], i)?, &f(&others[2], i)?, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mean = |g: &dyn Fn(&crate::align::AttributeLoss) -> f64| {
        pairwise_sum(&losses.iter().map(g).collect::<Vec<_>>()) / n as f64
    };
    Ok(MeanAttributeLoss {
        rows: n,
        regression: mean(&|l| l.regression),
        consistency: mean(&|l| l.consistency),
        total: mean(&|l| l.total),
    })
}

/// (N, 4) quaternions (w, x, y, z) to an (N, 6) f64 tensor.
pub fn eval_rot6d(q: &Tensor) -> Result<Tensor> {
    let (n, _, d) = rows(q, Some(4), "quaternions")?;
    let mut out = Vec::with_capacity(6 * n);
    for r in d.chunks_exact(4) {
        let q = nalgebra::Quaternion::new(r[0], r[1], r[2], r[3]);
        if !(q.norm() > 0.0) {
            return Err(Error::RejectedInput("zero-norm quaternion".into()));
        }
        out.extend(quaternion_to_6d(&nalgebra::UnitQuaternion::from_quaternion(q)));
    }
    Tensor::f64(vec![n, 6], out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub primitives: usize,
    pub mu: f64,
    pub sigma: f64,
    pub floored: bool,
    pub standardized_mean_mean: f64,
    pub standardized_mean_std: f64,
}

/// Scale standardisation summary plus the (N, 3) standardised log-scales.
pub fn eval_scale_norm(scene: &GaussianScene) -> Result<(ScaleReport, Tensor)> {
    let n = normalize_scene_scales(scene)?;
    let m = &n.standardized_mean;
    let k = m.len() as f64;
    let mean = pairwise_sum(m) / k;
    let var = pairwise_sum(&m.iter().map(|x| (x - mean) * (x - mean)).collect::<Vec<_>>()) / k;
    let t = Tensor::f64(vec![n.standardized.len(), 3], n.standardized.iter().flatten().copied().collect())?;
    Ok((
        ScaleReport {
            primitives: scene.len(),
            mu: n.mu,
            sigma: n.sigma,
            floored: n.floored,
            standardized_mean_mean: mean,
            standardized_mean_std: var.sqrt(),
        },
        t,
    ))
}

/// Depth-prior loss over pixels valid (> 0) in both maps.
pub fn eval_depth_reg(rendered: &DepthMap, prior: &DepthMap, alignment: PriorAlignment) -> Result<DepthRegularization> {
    if (rendered.width, rendered.height) != (prior.width, prior.height) {
        return Err(Error::Shape("rendered and prior depth sizes differ".into()));
    }
    let mask = Image {
        width: rendered.width,
        height: rendered.height,
        data: rendered.data.iter().zip(&prior.data).map(|(a, b)| *a > 0.0 && *b > 0.0).collect(),
    };
    depth_l1_regularization(rendered, prior, &mask, alignment)
}

/// Default negative pool name for reports.
pub fn pool_name(p: NegativePool) -> &'static str {
    match p {
        NegativePool::IntraScene => "intra_scene",
        NegativePool::CrossScene => "cross_scene",
    }
}
