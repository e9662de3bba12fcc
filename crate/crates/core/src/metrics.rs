//! Ground-truth quality metrics and depth-prior regularisation.
//!
//! * symmetric epipolar error of labelled matches under the pose-derived
//!   fundamental matrix (pixels, plus a normalised-coordinate variant),
//! * relative reprojection error `|d̂′ − d′| / d′`,
//! * the ℓ1 depth-regularisation loss against an affinely aligned prior,
//! * a dataset-level report that samples pairs per overlap bin and
//!   aggregates the above.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_depth_bilinear, DepthMap, Image};
use crate::labeler::{
    bin_of, sample_gt_matches, score_pair, validate_bins, GtMatch, LabelView, SampleMode, DEFAULT_OVERLAP_BINS,
    DEFAULT_REL_TOL,
};
use crate::render::{DepthMode, NEAR_PLANE};
use crate::synthetic::AnalyticSurface;
use crate::types::CameraModel;

const LINE_GRADIENT_MIN: f64 = 1e-12;

/// Fundamental matrix, scaled to unit Frobenius norm with its first nonzero
/// entry (row-major) positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(pub Matrix3<f64>);

impl FundamentalMatrix {
    pub fn normalized(m: Matrix3<f64>) -> Self {
        let norm = m.norm();
        let mut f = m / norm;
        let max = f.abs().max();
        for r in 0..3 {
            for c in 0..3 {
                let v = f[(r, c)];
                if v.abs() > 1e-12 * max {
                    if v < 0.0 {
                        f = -f;
                    }
                    return Self(f);
                }
            }
        }
        Self(f)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Relative pose `(R, t)` taking camera-A coordinates to camera-B coordinates.
pub fn relative_pose(cam_a: &CameraModel, cam_b: &CameraModel) -> (Matrix3<f64>, Vector3<f64>) {
    let r = cam_b.rotation_wc * cam_a.rotation_wc.transpose();
    let t = cam_b.translation_wc - r * cam_a.translation_wc;
    (r, t)
}

/// Essential matrix `[t]× R` for normalised image coordinates.
pub fn essential_from_cameras(cam_a: &CameraModel, cam_b: &CameraModel) -> Result<Matrix3<f64>> {
    let baseline = (cam_a.center() - cam_b.center()).norm();
    if baseline <= 1e-12 * (1.0 + cam_a.center().norm()) {
        return Err(Error::DegenerateBaseline);
    }
    let (r, t) = relative_pose(cam_a, cam_b);
    Ok(skew(&t) * r)
}

/// F = K_B⁻ᵀ [t]× R K_A⁻¹.
pub fn fundamental_from_cameras(cam_a: &CameraModel, cam_b: &CameraModel) -> Result<FundamentalMatrix> {
    let e = essential_from_cameras(cam_a, cam_b)?;
    Ok(FundamentalMatrix::normalized(
        cam_b.intrinsics_inv().transpose() * e * cam_a.intrinsics_inv(),
    ))
}

/// Per-match errors with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub per_match: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Matches left out (degenerate epipolar lines or invalid depths).
    pub skipped: usize,
}

impl ErrorSummary {
    fn from_values(per_match: Vec<f64>, skipped: usize) -> Self {
        let (mean, std) = mean_std(&per_match);
        Self {
            per_match,
            mean,
            std,
            skipped,
        }
    }

    pub fn count(&self) -> usize {
        self.per_match.len()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Symmetric point-to-epipolar-line distance
/// `½(|x̃′ᵀFx̃| / ‖(Fx̃)₁:₂‖ + |x̃ᵀFᵀx̃′| / ‖(Fᵀx̃′)₁:₂‖)`, or `None` if either
/// epipolar line is degenerate.
pub fn symmetric_epipolar_distance(f: &Matrix3<f64>, a: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let xa = Vector3::new(a[0], a[1], 1.0);
    let xb = Vector3::new(b[0], b[1], 1.0);
    let line_b = f * xa;
    let line_a = f.transpose() * xb;
    let na = line_b.x.hypot(line_b.y);
    let nb = line_a.x.hypot(line_a.y);
    if na < LINE_GRADIENT_MIN || nb < LINE_GRADIENT_MIN {
        return None;
    }
    let r1 = xb.dot(&line_b).abs();
    let r2 = xa.dot(&line_a).abs();
    Some(0.5 * (r1 / na + r2 / nb))
}

pub fn symmetric_epipolar_error(f: &FundamentalMatrix, matches: &[GtMatch]) -> Result<ErrorSummary> {
    epipolar_error_with(f.matrix(), matches)
}

/// Same error measured in normalised image coordinates with the essential
/// matrix (unitless, focal-length independent).
pub fn normalized_epipolar_error(
    cam_a: &CameraModel,
    cam_b: &CameraModel,
    matches: &[GtMatch],
) -> Result<ErrorSummary> {
    let e = essential_from_cameras(cam_a, cam_b)?;
    let e = e / e.norm();
    let to_a = |p: [f64; 2]| [(p[0] - cam_a.cx) / cam_a.fx, (p[1] - cam_a.cy) / cam_a.fy];
    let to_b = |p: [f64; 2]| [(p[0] - cam_b.cx) / cam_b.fx, (p[1] - cam_b.cy) / cam_b.fy];
    let normalized: Vec<GtMatch> = matches
        .iter()
        .map(|m| GtMatch {
            a: to_a(m.a),
            b: to_b(m.b),
            depth_b: m.depth_b,
        })
        .collect();
    epipolar_error_with(&e, &normalized)
}

fn epipolar_error_with(f: &Matrix3<f64>, matches: &[GtMatch]) -> Result<ErrorSummary> {
    if matches.is_empty() {
        return Err(Error::EmptyInput("epipolar error needs at least one match"));
    }
    if f.norm() == 0.0 {
        return Err(Error::Config("fundamental matrix is zero".into()));
    }
    let mut values = Vec::with_capacity(matches.len());
    let mut skipped = 0;
    for m in matches {
        match symmetric_epipolar_distance(f, m.a, m.b) {
            Some(e) => values.push(e),
            None => skipped += 1,
        }
    }
    Ok(ErrorSummary::from_values(values, skipped))
}

/// For each match: lift A's pixel with `depth_a`, move it into camera B
/// (giving d̂′) and compare with `depth_b` at the match's B pixel (d′).
/// Matches with an invalid depth at either end are skipped.
pub fn relative_reprojection_error(
    matches: &[GtMatch],
    depth_a: &DepthMap,
    depth_b: &DepthMap,
    cam_a: &CameraModel,
    cam_b: &CameraModel,
) -> Result<ErrorSummary> {
    relative_reprojection_error_with(matches, depth_a, cam_a, cam_b, |u, v| {
        sample_depth_bilinear(depth_b, u, v)
    })
}

/// As [`relative_reprojection_error`] with d′ supplied by `reference`, e.g.
/// an exact surface oracle.
pub fn relative_reprojection_error_with(
    matches: &[GtMatch],
    depth_a: &DepthMap,
    cam_a: &CameraModel,
    cam_b: &CameraModel,
    reference: impl Fn(f64, f64) -> Option<f64>,
) -> Result<ErrorSummary> {
    if matches.is_empty() {
        return Err(Error::EmptyInput("relative reprojection error needs at least one match"));
    }
    let mut values = Vec::with_capacity(matches.len());
    let mut skipped = 0;
    for m in matches {
        let da = sample_depth_bilinear(depth_a, m.a[0], m.a[1]);
        let db = reference(m.b[0], m.b[1]).filter(|d| *d > 0.0);
        let (Some(da), Some(db)) = (da, db) else {
            skipped += 1;
            continue;
        };
        let p = cam_b.world_to_camera(&cam_a.camera_to_world(&cam_a.backproject(m.a[0], m.a[1], da)));
        if p.z <= NEAR_PLANE {
            skipped += 1;
            continue;
        }
        values.push((p.z - db).abs() / db);
    }
    Ok(ErrorSummary::from_values(values, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorAlignment {
    /// Closed-form least-squares scale and shift.
    #[default]
    LeastSquares,
    /// Scale by the median of rendered/prior, no shift.
    MedianRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRegularization {
    pub loss: f64,
    pub scale: f64,
    pub shift: f64,
}

/// ℓ1 loss between rendered depth and the prior after aligning the prior
/// with `scale·prior + shift` over `mask`.
pub fn depth_l1_regularization(
    rendered: &DepthMap,
    prior: &DepthMap,
    mask: &Image<bool>,
    alignment: PriorAlignment,
) -> Result<DepthRegularization> {
    if rendered.len() != prior.len() || rendered.len() != mask.len() {
        return Err(Error::Shape("rendered, prior and mask sizes differ".into()));
    }
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask.data[i]).collect();
    if idx.len() < 2 {
        return Err(Error::InsufficientSupport {
            need: 2,
            got: idx.len(),
        });
    }
    let n = idx.len() as f64;
    let (scale, shift) = match alignment {
        PriorAlignment::LeastSquares => {
            let mp = idx.iter().map(|&i| prior.data[i]).sum::<f64>() / n;
            let mr = idx.iter().map(|&i| rendered.data[i]).sum::<f64>() / n;
            let mut cov = 0.0;
            let mut var = 0.0;
            for &i in &idx {
                let dp = prior.data[i] - mp;
                cov += dp * (rendered.data[i] - mr);
                var += dp * dp;
            }
            let a = if var > 0.0 { cov / var } else { 0.0 };
            (a, mr - a * mp)
        }
        PriorAlignment::MedianRatio => {
            let mut ratios: Vec<f64> = idx
                .iter()
                .filter(|&&i| prior.data[i] != 0.0)
                .map(|&i| rendered.data[i] / prior.data[i])
                .collect();
            if ratios.is_empty() {
                return Err(Error::InsufficientSupport { need: 1, got: 0 });
            }
            ratios.sort_by(f64::total_cmp);
            let k = ratios.len();
            let med = if k % 2 == 1 {
                ratios[k / 2]
            } else {
                0.5 * (ratios[k / 2 - 1] + ratios[k / 2])
            };
            (med, 0.0)
        }
    };
    let loss = idx
        .iter()
        .map(|&i| (rendered.data[i] - (scale * prior.data[i] + shift)).abs())
        .sum::<f64>()
        / n;
    Ok(DepthRegularization { loss, scale, shift })
}

/// Where a view's depth map comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSource {
    /// Exact depth from an analytic surface.
    Analytic,
    Alpha,
    Dominant,
    Plane,
}

impl DepthSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DepthSource::Analytic => "analytic",
            DepthSource::Alpha => "alpha",
            DepthSource::Dominant => "dominant",
            DepthSource::Plane => "plane",
        }
    }
}

impl From<DepthMode> for DepthSource {
    fn from(m: DepthMode) -> Self {
        match m {
            DepthMode::Alpha => DepthSource::Alpha,
            DepthMode::Dominant => DepthSource::Dominant,
            DepthMode::Plane => DepthSource::Plane,
        }
    }
}

impl fmt::Display for DepthSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DepthSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(DepthSource::Analytic),
            other => other.parse::<DepthMode>().map(DepthSource::from),
        }
    }
}

/// One view of an evaluation scene with its depth maps per source.
#[derive(Debug, Clone, PartialEq)]
pub struct GtView {
    pub id: String,
    pub camera: CameraModel,
    pub depths: BTreeMap<DepthSource, DepthMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtScene {
    pub scene_id: String,
    pub views: Vec<GtView>,
    /// Exact geometry, when known. Enables the oracle-referenced relative
    /// error, where d′ is the true depth instead of the source's own render.
    pub surface: Option<AnalyticSurface>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtEvalConfig {
    pub sampling: SampleMode,
    pub bins: Vec<(f64, f64)>,
    /// Pairs drawn per scene, split evenly across bins.
    pub pairs_per_scene: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for GtEvalConfig {
    fn default() -> Self {
        Self {
            sampling: SampleMode::default(),
            bins: DEFAULT_OVERLAP_BINS.to_vec(),
            pairs_per_scene: 100,
            rel_tol: DEFAULT_REL_TOL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairQuality {
    pub scene_id: String,
    pub view_a: String,
    pub view_b: String,
    pub overlap: f64,
    pub bin: usize,
    pub n_matches: usize,
    pub epi_px_mean: f64,
    pub epi_px_std: f64,
    pub epi_norm_mean: f64,
    pub epi_norm_std: f64,
    pub epi_skipped: usize,
    pub rel_mean: f64,
    pub rel_std: f64,
    pub rel_count: usize,
    pub rel_skipped: usize,
    /// Relative error against the exact surface depth (oracle scenes only).
    pub rel_gt: Option<(f64, f64, usize)>,
}

/// Pooled and across-group statistics of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricAggregate {
    /// Mean over every match of every pair.
    pub mean: f64,
    /// Standard deviation over every match of every pair.
    pub std_pooled: f64,
    /// Standard deviation of the per-pair means.
    pub std_across_pairs: f64,
    /// Standard deviation of the per-scene means.
    pub std_across_scenes: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub source: DepthSource,
    pub pairs: Vec<PairQuality>,
    pub epi_px: MetricAggregate,
    pub epi_norm: MetricAggregate,
    pub rel: MetricAggregate,
    /// Oracle-referenced relative error over the pairs that have one.
    pub rel_gt: Option<MetricAggregate>,
    /// `(scene, bin, requested, available)` for bins that ran short.
    pub bin_shortfalls: Vec<(String, usize, usize, usize)>,
}

/// Real-scene magnitudes `(label, epipolar mean, relative error mean)` for
/// orientation only; synthetic scenes are not expected to reproduce them.
pub const REFERENCE_MAGNITUDES: [(&str, f64, f64); 6] = [
    ("alpha", 8.37e-6, 0.0293),
    ("dominant", 8.60e-6, 0.0203),
    ("plane", 2.13e-6, 0.0373),
    ("plane+regularized", 2.35e-6, 0.0132),
    ("sfm", 1.00e-4, 0.0498),
    ("depth-sensor", 1.01e-4, 0.0116),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtQualityReport {
    pub sources: Vec<SourceReport>,
    pub reference_magnitudes: Vec<(String, f64, f64)>,
}

impl GtQualityReport {
    pub fn source(&self, s: DepthSource) -> Option<&SourceReport> {
        self.sources.iter().find(|r| r.source == s)
    }
}

/// Aggregates of one metric from per-pair `(scene, count, mean, std)`.
pub fn aggregate_metric(per_pair: &[(&str, usize, f64, f64)]) -> MetricAggregate {
    let count: usize = per_pair.iter().map(|p| p.1).sum();
    if count == 0 {
        return MetricAggregate::default();
    }
    let total = count as f64;
    let mean = per_pair.iter().map(|p| p.1 as f64 * p.2).sum::<f64>() / total;
    // Pooled second moment: Σ n_i (σ_i² + (μ_i − μ)²).
    let m2 = per_pair
        .iter()
        .map(|p| p.1 as f64 * (p.3 * p.3 + (p.2 - mean) * (p.2 - mean)))
        .sum::<f64>();
    let pair_means: Vec<f64> = per_pair.iter().filter(|p| p.1 > 0).map(|p| p.2).collect();
    let mut scenes: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for p in per_pair {
        let e = scenes.entry(p.0).or_default();
        e.0 += p.1 as f64 * p.2;
        e.1 += p.1;
    }
    let scene_means: Vec<f64> = scenes
        .values()
        .filter(|(_, n)| *n > 0)
        .map(|(s, n)| s / *n as f64)
        .collect();
    MetricAggregate {
        mean,
        std_pooled: (m2 / total).sqrt(),
        std_across_pairs: mean_std(&pair_means).1,
        std_across_scenes: mean_std(&scene_means).1,
        count,
    }
}

fn scene_seed(seed: u64, scene_id: &str, source: DepthSource) -> u64 {
    // FNV-1a over the scene id and source tag.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for b in scene_id.bytes().chain(source.as_str().bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Evaluates label quality for every depth source present in the dataset.
///
/// Per scene and source: every view pair is scored for overlap with that
/// source's depth maps, `pairs_per_scene / bins` pairs are drawn per bin
/// (seeded), matches are grid-sampled from the consistent A→B warp, and
/// epipolar and relative reprojection errors are recorded.
pub fn evaluate_gt_quality(dataset: &[GtScene], cfg: &GtEvalConfig) -> Result<GtQualityReport> {
    validate_bins(&cfg.bins)?;
    if cfg.bins.is_empty() {
        return Err(Error::Config("at least one overlap bin is required".into()));
    }
    let mut sources: Vec<DepthSource> = dataset
        .iter()
        .flat_map(|s| s.views.iter().flat_map(|v| v.depths.keys().copied()))
        .collect();
    sources.sort();
    sources.dedup();
    let per_bin = cfg.pairs_per_scene / cfg.bins.len();

    let mut reports = Vec::new();
    for source in sources {
        let mut pairs = Vec::new();
        let mut shortfalls = Vec::new();
        for scene in dataset {
            let views: Vec<LabelView> = scene
                .views
                .iter()
                .filter_map(|v| {
                    v.depths.get(&source).map(|d| LabelView {
                        id: v.id.clone(),
                        camera: v.camera.clone(),
                        depth: d.clone(),
                        gmap: Image::filled(0, 0, -1),
                    })
                })
                .collect();
            let index_pairs: Vec<(usize, usize)> = (0..views.len())
                .flat_map(|a| (a + 1..views.len()).map(move |b| (a, b)))
                .collect();
            let scored: Vec<_> = index_pairs
                .par_iter()
                .map(|&(a, b)| score_pair(&views, a, b, cfg.rel_tol))
                .collect::<Result<_>>()?;

            let mut by_bin: Vec<Vec<usize>> = vec![Vec::new(); cfg.bins.len()];
            for (k, s) in scored.iter().enumerate() {
                if let Some(bin) = bin_of(&cfg.bins, s.overlap()) {
                    by_bin[bin].push(k);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, &scene.scene_id, source));
            let mut chosen = Vec::new();
            for (bin, list) in by_bin.iter_mut().enumerate() {
                list.shuffle(&mut rng);
                if list.len() < per_bin {
                    shortfalls.push((scene.scene_id.clone(), bin, per_bin, list.len()));
                }
                chosen.extend(list.iter().take(per_bin).map(|&k| (k, bin)));
            }
            chosen.sort_unstable();

            let evaluated: Vec<Option<PairQuality>> = chosen
                .par_iter()
                .map(|&(k, bin)| {
                    let s = &scored[k];
                    let (va, vb) = (&views[s.a], &views[s.b]);
                    let matches = sample_gt_matches(&s.corr_ab, &s.mask_ab, cfg.sampling)?;
                    if matches.is_empty() {
                        return Ok(None);
                    }
                    let f = fundamental_from_cameras(&va.camera, &vb.camera)?;
                    let epi = symmetric_epipolar_error(&f, &matches)?;
                    let epi_n = normalized_epipolar_error(&va.camera, &vb.camera, &matches)?;
                    let rel = relative_reprojection_error(&matches, &va.depth, &vb.depth, &va.camera, &vb.camera)?;
                    let rel_gt = match &scene.surface {
                        Some(surf) => {
                            let r = relative_reprojection_error_with(&matches, &va.depth, &va.camera, &vb.camera, |u, v| {
                                surf.depth(&vb.camera, u, v)
                            })?;
                            Some((r.mean, r.std, r.count()))
                        }
                        None => None,
                    };
                    Ok(Some(PairQuality {
                        scene_id: scene.scene_id.clone(),
                        view_a: va.id.clone(),
                        view_b: vb.id.clone(),
                        overlap: s.overlap(),
                        bin,
                        n_matches: matches.len(),
                        epi_px_mean: epi.mean,
                        epi_px_std: epi.std,
                        epi_norm_mean: epi_n.mean,
                        epi_norm_std: epi_n.std,
                        epi_skipped: epi.skipped,
                        rel_mean: rel.mean,
                        rel_std: rel.std,
                        rel_count: rel.count(),
                        rel_skipped: rel.skipped,
                        rel_gt,
                    }))
                })
                .collect::<Result<_>>()?;
            pairs.extend(evaluated.into_iter().flatten());
        }
        let epi_px: Vec<_> = pairs
            .iter()
            .map(|p| (p.scene_id.as_str(), p.n_matches - p.epi_skipped, p.epi_px_mean, p.epi_px_std))
            .collect();
        let epi_norm: Vec<_> = pairs
            .iter()
            .map(|p| (p.scene_id.as_str(), p.n_matches - p.epi_skipped, p.epi_norm_mean, p.epi_norm_std))
            .collect();
        let rel: Vec<_> = pairs
            .iter()
            .map(|p| (p.scene_id.as_str(), p.rel_count, p.rel_mean, p.rel_std))
            .collect();
        let rel_gt: Vec<_> = pairs
            .iter()
            .filter_map(|p| p.rel_gt.map(|(m, sd, n)| (p.scene_id.as_str(), n, m, sd)))
            .collect();
        let rel_gt = (!rel_gt.is_empty()).then(|| aggregate_metric(&rel_gt));
        reports.push(SourceReport {
            rel_gt,
            source,
            epi_px: aggregate_metric(&epi_px),
            epi_norm: aggregate_metric(&epi_norm),
            rel: aggregate_metric(&rel),
            pairs,
            bin_shortfalls: shortfalls,
        });
    }
    Ok(GtQualityReport {
        sources: reports,
        reference_magnitudes: REFERENCE_MAGNITUDES
            .iter()
            .map(|&(l, e, r)| (l.to_string(), e, r))
            .collect(),
    })
}
