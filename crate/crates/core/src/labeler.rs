//! Dense correspondence labels from depth maps and camera poses.
//!
//! A source pixel with valid depth is lifted to 3D, moved into the target
//! camera and projected. Occluded warps are removed by comparing the
//! projected depth against the target's own depth map. The surviving
//! fraction of valid source pixels is the pair's overlap.

use nalgebra::Vector2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_depth_bilinear, DepthMap, GaussianMap, Image};
use crate::render::NEAR_PLANE;
use crate::types::CameraModel;

pub const DEFAULT_REL_TOL: f64 = 0.05;
pub const DEFAULT_GRID_STEP: usize = 10;
/// Number of sampled coarse matches when sampling randomly.
pub const DEFAULT_SAMPLE_COUNT: usize = 512;
pub const DEFAULT_OVERLAP_BINS: [(f64, f64); 3] = [(0.1, 0.3), (0.3, 0.5), (0.5, 0.7)];

/// Per-pixel warp of a source view into a target view.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCorrespondence {
    pub source_id: String,
    pub target_id: String,
    /// Target pixel coordinates; NaN where invalid.
    pub target_coords: Image<[f64; 2]>,
    /// Depth of the warped point in the target camera (d̂′); NaN where invalid.
    pub projected_depth: Image<f64>,
    pub valid: Image<bool>,
    /// Number of source pixels carrying a valid depth.
    pub source_valid: usize,
}

impl DenseCorrespondence {
    pub fn with_ids(mut self, source: impl Into<String>, target: impl Into<String>) -> Self {
        self.source_id = source.into();
        self.target_id = target.into();
        self
    }
}

/// Moves source pixel `(u, v)` at z-depth `depth` into `cam_b`. Returns the
/// target pixel and the depth there, or `None` when the point lands behind
/// the near plane or outside the target image.
pub fn warp_pixel(
    cam_a: &CameraModel,
    cam_b: &CameraModel,
    u: f64,
    v: f64,
    depth: f64,
) -> Option<(Vector2<f64>, f64)> {
    let world = cam_a.camera_to_world(&cam_a.backproject(u, v, depth));
    let in_b = cam_b.world_to_camera(&world);
    if in_b.z <= NEAR_PLANE {
        return None;
    }
    let p = cam_b.project_camera(&in_b);
    cam_b.contains(&p).then_some((p, in_b.z))
}

pub fn warp_depth(depth_a: &DepthMap, cam_a: &CameraModel, cam_b: &CameraModel) -> DenseCorrespondence {
    let (w, h) = (depth_a.width, depth_a.height);
    let mut coords = Image::filled(w, h, [f64::NAN; 2]);
    let mut projected = Image::filled(w, h, f64::NAN);
    let mut valid = Image::filled(w, h, false);
    let mut source_valid = 0;
    for y in 0..h {
        for x in 0..w {
            let d = depth_a.get(x, y);
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            source_valid += 1;
            if let Some((p, z)) = warp_pixel(cam_a, cam_b, x as f64, y as f64, d) {
                coords.set(x, y, [p.x, p.y]);
                projected.set(x, y, z);
                valid.set(x, y, true);
            }
        }
    }
    DenseCorrespondence {
        source_id: String::new(),
        target_id: String::new(),
        target_coords: coords,
        projected_depth: projected,
        valid,
        source_valid,
    }
}

/// Keeps warps whose projected depth agrees with the target depth map
/// (bilinear lookup) within relative tolerance `rel_tol`.
pub fn mutual_consistency_mask(
    corr: &DenseCorrespondence,
    depth_b: &DepthMap,
    rel_tol: f64,
) -> Result<Image<bool>> {
    if !(rel_tol > 0.0) {
        return Err(Error::Config(format!("rel_tol must be > 0, got {rel_tol}")));
    }
    let mut mask = Image::filled(corr.valid.width, corr.valid.height, false);
    for (i, &ok) in corr.valid.data.iter().enumerate() {
        if !ok {
            continue;
        }
        let [x, y] = corr.target_coords.data[i];
        let Some(db) = sample_depth_bilinear(depth_b, x, y) else {
            continue;
        };
        let d_hat = corr.projected_depth.data[i];
        mask.data[i] = (d_hat - db).abs() / db <= rel_tol;
    }
    Ok(mask)
}

/// Fraction of valid source pixels that survive warping and the
/// consistency check. Zero when the source has no valid depth.
pub fn compute_overlap(corr: &DenseCorrespondence, mask: &Image<bool>) -> f64 {
    if corr.source_valid == 0 {
        return 0.0;
    }
    let kept = mask.data.iter().filter(|&&m| m).count();
    kept as f64 / corr.source_valid as f64
}

pub fn symmetric_overlap(o_ab: f64, o_ba: f64) -> f64 {
    o_ab.min(o_ba)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SampleMode {
    /// Source pixels whose coordinates are both multiples of `step`.
    Grid { step: usize },
    /// `count` distinct pixels drawn uniformly from the consistent set.
    Random { count: usize, seed: u64 },
}

impl Default for SampleMode {
    fn default() -> Self {
        SampleMode::Grid {
            step: DEFAULT_GRID_STEP,
        }
    }
}

/// One ground-truth correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtMatch {
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// Depth of the point in camera B (d̂′).
    pub depth_b: f64,
}

/// Samples matches from the pixels set in `mask`, in row-major order.
pub fn sample_gt_matches(
    corr: &DenseCorrespondence,
    mask: &Image<bool>,
    mode: SampleMode,
) -> Result<Vec<GtMatch>> {
    let w = mask.width;
    let make = |i: usize| GtMatch {
        a: [(i % w) as f64, (i / w) as f64],
        b: corr.target_coords.data[i],
        depth_b: corr.projected_depth.data[i],
    };
    match mode {
        SampleMode::Grid { step } => {
            if step == 0 {
                return Err(Error::Config("grid step must be positive".into()));
            }
            Ok((0..mask.len())
                .filter(|&i| mask.data[i] && (i % w) % step == 0 && (i / w) % step == 0)
                .map(make)
                .collect())
        }
        SampleMode::Random { count, seed } => {
            let pool: Vec<usize> = (0..mask.len()).filter(|&i| mask.data[i]).collect();
            if count >= pool.len() {
                return Ok(pool.into_iter().map(make).collect());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), count)
                .into_iter()
                .map(|k| pool[k])
                .collect();
            picked.sort_unstable();
            Ok(picked.into_iter().map(make).collect())
        }
    }
}

fn gmap_lookup(gmap: &GaussianMap, p: [f64; 2]) -> i32 {
    let (x, y) = (p[0].round(), p[1].round());
    if !(x >= 0.0 && y >= 0.0 && x < gmap.width as f64 && y < gmap.height as f64) {
        return -1;
    }
    gmap.get(x as usize, y as usize)
}

/// Flags matches whose endpoints see the same primitive (nearest-pixel
/// lookup in both Gaussian maps).
pub fn same_primitive_pairs(matches: &[GtMatch], gmap_a: &GaussianMap, gmap_b: &GaussianMap) -> Vec<bool> {
    matches
        .iter()
        .map(|m| {
            let ia = gmap_lookup(gmap_a, m.a);
            ia >= 0 && ia == gmap_lookup(gmap_b, m.b)
        })
        .collect()
}

/// Inputs for labelling one view.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelView {
    pub id: String,
    pub camera: CameraModel,
    pub depth: DepthMap,
    pub gmap: GaussianMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub view_a: String,
    pub view_b: String,
    /// min(overlap_ab, overlap_ba).
    pub overlap: f64,
    pub overlap_ab: f64,
    pub overlap_ba: f64,
    pub bin: usize,
    pub matches: Vec<GtMatch>,
    pub same_primitive: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    pub rel_tol: f64,
    pub sampling: SampleMode,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            rel_tol: DEFAULT_REL_TOL,
            sampling: SampleMode::default(),
        }
    }
}

/// Half-open bins `[lo, hi)`, sorted and non-overlapping.
pub fn validate_bins(bins: &[(f64, f64)]) -> Result<()> {
    for (k, &(lo, hi)) in bins.iter().enumerate() {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("overlap bin {k} ({lo}, {hi}) is not within [0, 1]")));
        }
        if k > 0 && lo < bins[k - 1].1 {
            return Err(Error::Config(format!("overlap bin {k} overlaps its predecessor")));
        }
    }
    Ok(())
}

pub fn bin_of(bins: &[(f64, f64)], overlap: f64) -> Option<usize> {
    bins.iter().position(|&(lo, hi)| overlap >= lo && overlap < hi)
}

/// Everything computed for one unordered view pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub a: usize,
    pub b: usize,
    pub corr_ab: DenseCorrespondence,
    pub mask_ab: Image<bool>,
    pub overlap_ab: f64,
    pub overlap_ba: f64,
}

impl ScoredPair {
    pub fn overlap(&self) -> f64 {
        symmetric_overlap(self.overlap_ab, self.overlap_ba)
    }
}

pub fn score_pair(views: &[LabelView], a: usize, b: usize, rel_tol: f64) -> Result<ScoredPair> {
    let (va, vb) = (&views[a], &views[b]);
    let corr_ab = warp_depth(&va.depth, &va.camera, &vb.camera).with_ids(&va.id, &vb.id);
    let mask_ab = mutual_consistency_mask(&corr_ab, &vb.depth, rel_tol)?;
    let corr_ba = warp_depth(&vb.depth, &vb.camera, &va.camera);
    let mask_ba = mutual_consistency_mask(&corr_ba, &va.depth, rel_tol)?;
    Ok(ScoredPair {
        a,
        b,
        overlap_ab: compute_overlap(&corr_ab, &mask_ab),
        overlap_ba: compute_overlap(&corr_ba, &mask_ba),
        corr_ab,
        mask_ab,
    })
}

/// Result of scoring every pair of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PairManifest {
    /// Unordered pairs evaluated, N(N−1)/2.
    pub evaluated: usize,
    /// Pairs whose overlap falls in a configured bin, in `(a, b)` order.
    pub records: Vec<PairRecord>,
}

pub fn build_pair_manifest(
    views: &[LabelView],
    bins: &[(f64, f64)],
    cfg: &LabelConfig,
) -> Result<PairManifest> {
    validate_bins(bins)?;
    let pairs: Vec<(usize, usize)> = (0..views.len())
        .flat_map(|a| (a + 1..views.len()).map(move |b| (a, b)))
        .collect();
    let records: Vec<Option<PairRecord>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let scored = score_pair(views, a, b, cfg.rel_tol)?;
            let overlap = scored.overlap();
            let Some(bin) = bin_of(bins, overlap) else {
                return Ok(None);
            };
            let matches = sample_gt_matches(&scored.corr_ab, &scored.mask_ab, cfg.sampling)?;
            let same_primitive = same_primitive_pairs(&matches, &views[a].gmap, &views[b].gmap);
            Ok(Some(PairRecord {
                view_a: views[a].id.clone(),
                view_b: views[b].id.clone(),
                overlap,
                overlap_ab: scored.overlap_ab,
                overlap_ba: scored.overlap_ba,
                bin,
                matches,
                same_primitive,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(PairManifest {
        evaluated: pairs.len(),
        records: records.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn cam_at(tx: f64, w: u32, h: u32) -> CameraModel {
        // Camera centre at (tx, 0, 0): t_wc = -R·C.
        CameraModel::new(
            50.0,
            50.0,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
            Matrix3::identity(),
            Vector3::new(-tx, 0.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn identity_warp() {
        let cam = cam_at(0.0, 16, 12);
        let mut depth = Image::filled(16, 12, 2.5);
        depth.set(3, 4, 0.0);
        let corr = warp_depth(&depth, &cam, &cam);
        assert_eq!(corr.source_valid, 16 * 12 - 1);
        for y in 0..12 {
            for x in 0..16 {
                if (x, y) == (3, 4) {
                    assert!(!corr.valid.get(x, y));
                    assert!(corr.target_coords.get(x, y)[0].is_nan());
                    continue;
                }
                let [u, v] = corr.target_coords.get(x, y);
                assert!((u - x as f64).abs() < 1e-12 && (v - y as f64).abs() < 1e-12, "{x} {y} {u} {v}");
                assert!((corr.projected_depth.get(x, y) - 2.5).abs() < 1e-12);
            }
        }
        let mask = mutual_consistency_mask(&corr, &depth, 0.05).unwrap();
        assert_eq!(mask.data.iter().filter(|&&m| m).count(), corr.source_valid);
        assert!(!mask.get(3, 4));
    }

    #[test]
    fn lateral_translation_shift() {
        let (a, b) = (cam_at(0.0, 64, 8), cam_at(0.2, 64, 8));
        let depth = Image::filled(64, 8, 4.0);
        let corr = warp_depth(&depth, &a, &b);
        // Camera B sits 0.2 to the right: points move left by fx·t/z = 2.5 px.
        let [u, v] = corr.target_coords.get(20, 3);
        assert!((u - (20.0 - 50.0 * 0.2 / 4.0)).abs() < 1e-12);
        assert!((v - 3.0).abs() < 1e-12);
        // Leftmost columns fall off the target image.
        assert!(!corr.valid.get(1, 3));
    }

    #[test]
    fn behind_camera_is_invalid() {
        let a = cam_at(0.0, 8, 8);
        // B looks back toward -z from z = 10.
        let r = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let b = CameraModel::new(50.0, 50.0, 3.5, 3.5, 8, 8, r, -(r * Vector3::new(0.0, 0.0, 1.0))).unwrap();
        let corr = warp_depth(&Image::filled(8, 8, 2.0), &a, &b);
        assert!(corr.valid.data.iter().all(|&v| !v));
    }

    #[test]
    fn consistency_rejects_bad_tolerance() {
        let cam = cam_at(0.0, 4, 4);
        let depth = Image::filled(4, 4, 1.0);
        let corr = warp_depth(&depth, &cam, &cam);
        assert!(mutual_consistency_mask(&corr, &depth, 0.0).is_err());
        assert!(mutual_consistency_mask(&corr, &depth, -1.0).is_err());
        let inf = mutual_consistency_mask(&corr, &depth, f64::INFINITY).unwrap();
        assert_eq!(inf, corr.valid);
    }

    #[test]
    fn grid_sampling_counts() {
        let cam = cam_at(0.0, 100, 100);
        let depth = Image::filled(100, 100, 3.0);
        let corr = warp_depth(&depth, &cam, &cam);
        let mask = corr.valid.clone();
        assert_eq!(sample_gt_matches(&corr, &mask, SampleMode::Grid { step: 10 }).unwrap().len(), 100);
        assert!(sample_gt_matches(&corr, &mask, SampleMode::Grid { step: 100 }).unwrap().len() <= 4);
        let r1 = sample_gt_matches(&corr, &mask, SampleMode::Random { count: 50, seed: 4 }).unwrap();
        let r2 = sample_gt_matches(&corr, &mask, SampleMode::Random { count: 50, seed: 4 }).unwrap();
        assert_eq!(r1.len(), 50);
        assert_eq!(r1, r2);
        assert!(sample_gt_matches(&corr, &mask, SampleMode::Grid { step: 0 }).is_err());
    }

    #[test]
    fn same_primitive_flags() {
        let ga = Image::from_vec(2, 1, vec![7, 7]).unwrap();
        let gb = Image::from_vec(2, 1, vec![7, 9]).unwrap();
        let m = |b: [f64; 2]| GtMatch { a: [0.0, 0.0], b, depth_b: 1.0 };
        let flags = same_primitive_pairs(&[m([0.2, 0.1]), m([0.6, 0.0]), m([5.0, 0.0])], &ga, &gb);
        assert_eq!(flags, vec![true, false, false]);
        let empty = Image::from_vec(1, 1, vec![-1]).unwrap();
        assert_eq!(same_primitive_pairs(&[m([0.0, 0.0])], &empty, &empty), vec![false]);
    }

    #[test]
    fn bins_validation() {
        assert!(validate_bins(&DEFAULT_OVERLAP_BINS).is_ok());
        assert!(validate_bins(&[(0.3, 0.5), (0.4, 0.6)]).is_err());
        assert!(validate_bins(&[(0.5, 0.4)]).is_err());
        assert_eq!(bin_of(&DEFAULT_OVERLAP_BINS, 0.3), Some(1));
        assert_eq!(bin_of(&DEFAULT_OVERLAP_BINS, 0.05), None);
        assert_eq!(bin_of(&DEFAULT_OVERLAP_BINS, 0.7), None);
    }

    #[test]
    fn manifest_pair_counts() {
        let views: Vec<LabelView> = (0..4)
            .map(|i| LabelView {
                id: format!("v{i}"),
                camera: cam_at(0.1 * i as f64, 32, 16),
                depth: Image::filled(32, 16, 2.0),
                gmap: Image::filled(32, 16, 0),
            })
            .collect();
        let m = build_pair_manifest(&views, &[(0.0, 1.0)], &LabelConfig::default()).unwrap();
        assert_eq!(m.evaluated, 6);
        assert_eq!(m.records.len(), 6);
        let single = build_pair_manifest(&views[..1], &DEFAULT_OVERLAP_BINS, &LabelConfig::default()).unwrap();
        assert_eq!(single.evaluated, 0);
        assert!(single.records.is_empty());
    }
}
