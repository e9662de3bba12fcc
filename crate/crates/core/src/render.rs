//! Forward software rasterizer for Gaussian scenes.
//!
//! Primitives are EWA-projected to 2D, sorted once per view by camera depth
//! (ties by primitive index), and composited front to back per pixel. One
//! pass produces colour, the alpha-blended and dominant-primitive depths,
//! the blended plane normal and distance maps, accumulated opacity and the
//! Gaussian index map. Plane depth is derived from the normal and distance
//! maps by ray-plane intersection.
//!
//! The compositing order is global, so the tiled parallel render is
//! bit-identical to any other schedule.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, GaussianMap, Image, RgbImage};
use crate::sh::eval_sh_color;
use crate::types::{ActivatedPrimitive, CameraModel, GaussianScene};
use crate::view_synth::{compute_view_stats, ViewStats};

/// Primitives with camera depth at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic dilation added to every 2D covariance, in px².
pub const LOW_PASS: f64 = 0.3;
/// Per-pixel opacities below this are dropped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Pixels with accumulated opacity below this are invalid.
pub const ALPHA_ACC_VALID: f64 = 1e-3;
/// Default opacity threshold for dominant-primitive depth.
pub const DEFAULT_TAU: f64 = 0.5;

const TILE: usize = 16;
const PLANE_DENOM_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthMode {
    Alpha,
    Dominant,
    Plane,
}

impl DepthMode {
    pub const ALL: [DepthMode; 3] = [DepthMode::Alpha, DepthMode::Dominant, DepthMode::Plane];

    pub fn as_str(self) -> &'static str {
        match self {
            DepthMode::Alpha => "alpha",
            DepthMode::Dominant => "dominant",
            DepthMode::Plane => "plane",
        }
    }
}

impl fmt::Display for DepthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DepthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(DepthMode::Alpha),
            "dominant" => Ok(DepthMode::Dominant),
            "plane" => Ok(DepthMode::Plane),
            other => Err(Error::Config(format!(
                "unknown depth mode `{other}` (expected alpha, dominant or plane)"
            ))),
        }
    }
}

/// A primitive splatted onto the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected2D {
    pub primitive_index: usize,
    pub mean2d: Vector2<f64>,
    /// Dilated screen-space covariance, px².
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub z_cam: f64,
    /// R_cᵀ n_i, as given by the primitive (not yet flipped toward the camera).
    pub plane_normal_cam: Vector3<f64>,
    /// d_i = (R_cᵀ(μ_i − T_c))ᵀ (R_cᵀ n_i).
    pub plane_distance: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel bounds `[x0, x1] × [y0, y1]` of the opacity support.
    pub bbox: [usize; 4],
}

impl Projected2D {
    /// Per-pixel opacity `o · exp(-½ dᵀ Σ₂⁻¹ d)`, capped at 1 and zeroed below
    /// [`ALPHA_MIN`].
    #[inline]
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        let power = -0.5
            * (self.conic[(0, 0)] * dx * dx
                + 2.0 * self.conic[(0, 1)] * dx * dy
                + self.conic[(1, 1)] * dy * dy);
        if power > 0.0 {
            return 0.0;
        }
        let alpha = (self.opacity * power.exp()).min(1.0);
        if alpha < ALPHA_MIN {
            0.0
        } else {
            alpha
        }
    }

    /// Normal and distance flipped, if needed, so the normal faces the camera.
    pub fn facing_plane(&self, mean_cam: &Vector3<f64>) -> (Vector3<f64>, f64) {
        if self.plane_normal_cam.dot(mean_cam) > 0.0 {
            (-self.plane_normal_cam, -self.plane_distance)
        } else {
            (self.plane_normal_cam, self.plane_distance)
        }
    }
}

/// Splats one activated primitive. Returns `None` when it sits in front of
/// the near plane or when its opacity support misses the image.
///
/// The culling footprint is the ellipse where the opacity can reach
/// [`ALPHA_MIN`] (plus one pixel), so culling never removes a primitive that
/// would contribute to a pixel.
pub fn project_primitive(
    cam: &CameraModel,
    p: &ActivatedPrimitive,
    index: usize,
) -> Option<Projected2D> {
    let mean_cam = cam.world_to_camera(&p.position);
    let z = mean_cam.z;
    if z <= NEAR_PLANE {
        return None;
    }
    if p.opacity * 255.0 <= 1.0 {
        return None;
    }
    let jac = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * mean_cam.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * mean_cam.y / (z * z),
    );
    let t = jac * cam.rotation_wc;
    let mut cov2d = t * p.covariance() * t.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += LOW_PASS;
    cov2d[(1, 1)] += LOW_PASS;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(
        cov2d[(1, 1)] / det,
        -cov2d[(0, 1)] / det,
        -cov2d[(1, 0)] / det,
        cov2d[(0, 0)] / det,
    );
    let mean2d = cam.project_camera(&mean_cam);

    let support = (2.0 * (255.0 * p.opacity).ln()).sqrt();
    let rx = support * cov2d[(0, 0)].sqrt() + 1.0;
    let ry = support * cov2d[(1, 1)].sqrt() + 1.0;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let x0 = (mean2d.x - rx).ceil().max(0.0);
    let x1 = (mean2d.x + rx).floor().min(w - 1.0);
    let y0 = (mean2d.y - ry).ceil().max(0.0);
    let y1 = (mean2d.y + ry).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }

    let normal_cam = cam.rotation_wc * p.plane_normal();
    let plane_distance = mean_cam.dot(&normal_cam);
    let view_dir = (p.position - cam.center()).normalize();
    Some(Projected2D {
        primitive_index: index,
        mean2d,
        cov2d,
        conic,
        z_cam: z,
        plane_normal_cam: normal_cam,
        plane_distance,
        opacity: p.opacity,
        color: eval_sh_color(&p.sh, &view_dir),
        bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
    })
}

/// Front-to-back compositing of `(α, value)` pairs, already depth-sorted.
/// Returns the composited value and the final transmittance.
pub fn composite_pixel(contributions: &[(f64, f64)]) -> (f64, f64) {
    let mut value = 0.0;
    let mut transmittance = 1.0;
    for &(alpha, v) in contributions {
        debug_assert!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0, 1]");
        value += v * (alpha * transmittance);
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_MIN {
            break;
        }
    }
    (value, transmittance)
}

/// Per-pixel accumulator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub rgb: [f64; 3],
    /// Σ z_i w_i, not normalised by accumulated opacity.
    pub depth_alpha: f64,
    pub depth_dominant: f64,
    pub normal: [f64; 3],
    pub distance: f64,
    /// Σ w_i.
    pub alpha_acc: f64,
    /// Π (1 − α_i) over composited contributions.
    pub transmittance: f64,
    pub gmap: i32,
}

impl PixelSample {
    const EMPTY: PixelSample = PixelSample {
        rgb: [0.0; 3],
        depth_alpha: 0.0,
        depth_dominant: 0.0,
        normal: [0.0; 3],
        distance: 0.0,
        alpha_acc: 0.0,
        transmittance: 1.0,
        gmap: -1,
    };
}

/// One view's splats in global compositing order.
struct SplatList {
    splats: Vec<Projected2D>,
    /// Camera-facing (normal, distance), parallel to `splats`.
    planes: Vec<([f64; 3], f64)>,
}

fn project_scene(cam: &CameraModel, prims: &[ActivatedPrimitive]) -> SplatList {
    let mut splats: Vec<Projected2D> = prims
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project_primitive(cam, p, i))
        .collect();
    splats.sort_by(|a, b| {
        a.z_cam
            .total_cmp(&b.z_cam)
            .then(a.primitive_index.cmp(&b.primitive_index))
    });
    let planes = splats
        .iter()
        .map(|s| {
            let mean_cam = cam.world_to_camera(&prims[s.primitive_index].position);
            let (n, d) = s.facing_plane(&mean_cam);
            ([n.x, n.y, n.z], d)
        })
        .collect();
    SplatList { splats, planes }
}

/// Composites the given splats (indices into `list`, in compositing order)
/// at pixel `(x, y)`. Returns the sample and the splats that received a
/// nonzero weight.
fn shade_pixel(
    list: &SplatList,
    order: &[u32],
    x: f64,
    y: f64,
    tau: f64,
    contributors: &mut Vec<u32>,
) -> PixelSample {
    let mut px = PixelSample::EMPTY;
    let mut t = 1.0f64;
    let mut best_w = 0.0f64;
    let mut best_idx = usize::MAX;
    let mut dominant: Option<f64> = None;
    let mut saturated = false;
    for &k in order {
        let s = &list.splats[k as usize];
        let alpha = s.alpha_at(x, y);
        if alpha == 0.0 {
            continue;
        }
        if dominant.is_none() && alpha >= tau {
            dominant = Some(s.z_cam);
        }
        if saturated {
            // Blending has terminated; keep scanning only for the dominant primitive.
            if dominant.is_some() {
                break;
            }
            continue;
        }
        let w = alpha * t;
        for c in 0..3 {
            px.rgb[c] += s.color[c] * w;
        }
        px.depth_alpha += s.z_cam * w;
        let (n, d) = list.planes[k as usize];
        for c in 0..3 {
            px.normal[c] += n[c] * w;
        }
        px.distance += d * w;
        px.alpha_acc += w;
        if w > 0.0 {
            contributors.push(k);
        }
        if w > best_w || (w == best_w && s.primitive_index < best_idx) {
            best_w = w;
            best_idx = s.primitive_index;
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            saturated = true;
            if dominant.is_some() {
                break;
            }
        }
    }
    px.transmittance = t;
    px.depth_dominant = dominant.unwrap_or(0.0);
    if px.alpha_acc < ALPHA_ACC_VALID {
        px.depth_alpha = 0.0;
        px.gmap = -1;
    } else {
        px.gmap = best_idx as i32;
    }
    px
}

/// Every per-pixel product of one render pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub rgb: RgbImage,
    pub depth_alpha: DepthMap,
    pub depth_dominant: DepthMap,
    pub depth_plane: DepthMap,
    /// Blended camera-frame normals, not renormalised.
    pub normal: Image<[f64; 3]>,
    pub distance: DepthMap,
    pub alpha_acc: DepthMap,
    pub transmittance: DepthMap,
    pub gmap: GaussianMap,
    /// Sorted indices of primitives with a nonzero weight somewhere.
    pub contributors: Vec<usize>,
}

impl RenderBuffers {
    pub fn depth(&self, mode: DepthMode) -> &DepthMap {
        match mode {
            DepthMode::Alpha => &self.depth_alpha,
            DepthMode::Dominant => &self.depth_dominant,
            DepthMode::Plane => &self.depth_plane,
        }
    }

    /// Unit-length copy of the normal map; empty pixels stay zero.
    pub fn normal_unit(&self) -> Image<[f64; 3]> {
        self.normal.map(normalize_or_zero)
    }
}

fn normalize_or_zero(n: [f64; 3]) -> [f64; 3] {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        [n[0] / len, n[1] / len, n[2] / len]
    } else {
        [0.0; 3]
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("dominant threshold tau must lie in (0, 1], got {tau}")))
    }
}

/// Renders every buffer for one camera. Parallel over 16×16 tiles on the
/// current rayon pool.
pub fn render_buffers(cam: &CameraModel, scene: &GaussianScene, tau: f64) -> Result<RenderBuffers> {
    check_tau(tau)?;
    let prims = scene.activate_all()?;
    let list = project_scene(cam, &prims);
    let (w, h) = (cam.width as usize, cam.height as usize);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);

    let tile_results: Vec<(Vec<PixelSample>, Vec<u32>)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx0 = (tile % tiles_x) * TILE;
            let ty0 = (tile / tiles_x) * TILE;
            let tx1 = (tx0 + TILE).min(w) - 1;
            let ty1 = (ty0 + TILE).min(h) - 1;
            let order: Vec<u32> = list
                .splats
                .iter()
                .enumerate()
                .filter(|(_, s)| {
                    let [x0, y0, x1, y1] = s.bbox;
                    x0 <= tx1 && x1 >= tx0 && y0 <= ty1 && y1 >= ty0
                })
                .map(|(k, _)| k as u32)
                .collect();
            let mut contributors = Vec::new();
            let mut pixels = Vec::with_capacity((tx1 - tx0 + 1) * (ty1 - ty0 + 1));
            for y in ty0..=ty1 {
                for x in tx0..=tx1 {
                    pixels.push(shade_pixel(&list, &order, x as f64, y as f64, tau, &mut contributors));
                }
            }
            contributors.sort_unstable();
            contributors.dedup();
            (pixels, contributors)
        })
        .collect();

    let mut samples = vec![PixelSample::EMPTY; w * h];
    let mut touched = vec![false; list.splats.len()];
    for (tile, (pixels, contributors)) in tile_results.into_iter().enumerate() {
        let tx0 = (tile % tiles_x) * TILE;
        let ty0 = (tile / tiles_x) * TILE;
        let tw = (tx0 + TILE).min(w) - tx0;
        for (i, px) in pixels.into_iter().enumerate() {
            samples[(ty0 + i / tw) * w + tx0 + i % tw] = px;
        }
        for k in contributors {
            touched[k as usize] = true;
        }
    }
    let mut contributors: Vec<usize> = touched
        .iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(k, _)| list.splats[k].primitive_index)
        .collect();
    contributors.sort_unstable();

    let take = |f: &dyn Fn(&PixelSample) -> f64| Image {
        width: w,
        height: h,
        data: samples.iter().map(f).collect(),
    };
    let normal = Image {
        width: w,
        height: h,
        data: samples.iter().map(|s| s.normal).collect(),
    };
    let distance = take(&|s| s.distance);
    let alpha_acc = take(&|s| s.alpha_acc);
    let depth_plane = plane_depth_from_maps(cam, &normal, &distance, &alpha_acc);
    Ok(RenderBuffers {
        rgb: Image {
            width: w,
            height: h,
            data: samples.iter().map(|s| s.rgb).collect(),
        },
        depth_alpha: take(&|s| s.depth_alpha),
        depth_dominant: take(&|s| s.depth_dominant),
        depth_plane,
        normal,
        distance,
        alpha_acc,
        transmittance: take(&|s| s.transmittance),
        gmap: Image {
            width: w,
            height: h,
            data: samples.iter().map(|s| s.gmap).collect(),
        },
        contributors,
    })
}

/// Ray-plane depth `D(p) = 𝒟 / (N · K⁻¹ p̃)` per pixel. Near-zero
/// denominators, negative depths and low-opacity pixels map to 0.
pub fn plane_depth_from_maps(
    cam: &CameraModel,
    normal: &Image<[f64; 3]>,
    distance: &DepthMap,
    alpha_acc: &DepthMap,
) -> DepthMap {
    let mut out = Image::filled(normal.width, normal.height, 0.0);
    for y in 0..normal.height {
        for x in 0..normal.width {
            if alpha_acc.get(x, y) < ALPHA_ACC_VALID {
                continue;
            }
            out.set(x, y, plane_depth(cam, normal.get(x, y), distance.get(x, y), x as f64, y as f64));
        }
    }
    out
}

/// Ray-plane depth for a single pixel; 0 when undefined.
pub fn plane_depth(cam: &CameraModel, normal: [f64; 3], distance: f64, u: f64, v: f64) -> f64 {
    let ray = cam.pixel_ray(u, v);
    let denom = normal[0] * ray.x + normal[1] * ray.y + normal[2] * ray.z;
    if denom.abs() < PLANE_DENOM_MIN {
        return 0.0;
    }
    let d = distance / denom;
    if d > 0.0 && d.is_finite() {
        d
    } else {
        0.0
    }
}

/// Alpha-blended depth (Σ z_i w_i).
pub fn render_depth_alpha(cam: &CameraModel, scene: &GaussianScene) -> Result<DepthMap> {
    Ok(render_buffers(cam, scene, DEFAULT_TAU)?.depth_alpha)
}

/// Depth of the first primitive along each ray whose opacity reaches `tau`.
pub fn render_depth_dominant(cam: &CameraModel, scene: &GaussianScene, tau: f64) -> Result<DepthMap> {
    Ok(render_buffers(cam, scene, tau)?.depth_dominant)
}

/// Blended camera-facing normal map and plane-distance map.
pub fn render_normal_distance(
    cam: &CameraModel,
    scene: &GaussianScene,
) -> Result<(Image<[f64; 3]>, DepthMap)> {
    let b = render_buffers(cam, scene, DEFAULT_TAU)?;
    Ok((b.normal, b.distance))
}

pub fn render_depth_plane(cam: &CameraModel, scene: &GaussianScene) -> Result<DepthMap> {
    Ok(render_buffers(cam, scene, DEFAULT_TAU)?.depth_plane)
}

/// Index of the primitive with the largest compositing weight per pixel.
pub fn render_gaussian_map(cam: &CameraModel, scene: &GaussianScene) -> Result<GaussianMap> {
    Ok(render_buffers(cam, scene, DEFAULT_TAU)?.gmap)
}

/// Settings for [`render_view`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub depth_mode: DepthMode,
    pub tau: f64,
    /// Opacity threshold for the valid-pixel fraction.
    pub tau_alpha: f64,
    /// Depth threshold for the near-pixel fraction.
    pub tau_depth: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            depth_mode: DepthMode::Plane,
            tau: DEFAULT_TAU,
            tau_alpha: crate::view_synth::DEFAULT_TAU_ALPHA,
            tau_depth: f64::INFINITY,
        }
    }
}

/// A rendered view with the depth for one mode selected.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub depth_mode: DepthMode,
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub normal: Image<[f64; 3]>,
    pub distance: DepthMap,
    pub gmap: GaussianMap,
    pub alpha_acc: DepthMap,
    pub n_contributing: usize,
    pub stats: ViewStats,
}

pub fn render_view(
    cam: &CameraModel,
    scene: &GaussianScene,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    let b = render_buffers(cam, scene, settings.tau)?;
    Ok(view_from_buffers(b, settings))
}

pub fn view_from_buffers(b: RenderBuffers, settings: &RenderSettings) -> RenderedView {
    let depth = b.depth(settings.depth_mode).clone();
    let mut view = RenderedView {
        depth_mode: settings.depth_mode,
        rgb: b.rgb,
        depth,
        normal: b.normal,
        distance: b.distance,
        gmap: b.gmap,
        alpha_acc: b.alpha_acc,
        n_contributing: b.contributors.len(),
        stats: ViewStats::default(),
    };
    view.stats = compute_view_stats(&view, settings.tau_alpha, settings.tau_depth);
    view
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SH_LEN;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, UnitQuaternion};

    fn origin_cam(w: u32, h: u32, f: f64) -> CameraModel {
        CameraModel::new(
            f,
            f,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap()
    }

    fn prim(pos: [f64; 3], scale: [f64; 3], opacity: f64) -> ActivatedPrimitive {
        ActivatedPrimitive {
            position: Vector3::from(pos),
            scale: Vector3::from(scale),
            rotation: UnitQuaternion::identity(),
            opacity,
            sh: [0.0; SH_LEN],
        }
    }

    /// Opacity 1.0 is stored as a logit large enough that the sigmoid rounds to 1.
    fn scene_of(prims: &[ActivatedPrimitive]) -> GaussianScene {
        let stored = prims
            .iter()
            .map(|p| {
                let mut s = p.to_stored();
                if p.opacity >= 1.0 {
                    s.opacity_logit = 40.0;
                }
                s
            })
            .collect();
        GaussianScene::new("t", stored)
    }

    #[test]
    fn on_axis_covariance() {
        let cam = origin_cam(64, 64, 50.0);
        let (z, s) = (4.0, 0.2);
        let p = project_primitive(&cam, &prim([0.0, 0.0, z], [s; 3], 0.9), 0).unwrap();
        let expect = (50.0 * s / z).powi(2) + LOW_PASS;
        assert_relative_eq!(p.cov2d, Matrix2::new(expect, 0.0, 0.0, expect), epsilon = 1e-12);
        assert_relative_eq!(p.mean2d, Vector2::new(cam.cx, cam.cy), epsilon = 1e-12);
    }

    #[test]
    fn plane_distance_on_axis() {
        let cam = origin_cam(32, 32, 20.0);
        let p = project_primitive(&cam, &prim([0.0, 0.0, 2.0], [1.0, 1.0, 0.01], 0.9), 0).unwrap();
        assert_eq!(p.plane_normal_cam, Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(p.plane_distance, 2.0, epsilon = 1e-15);
        let (n, d) = p.facing_plane(&Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(n, Vector3::new(0.0, 0.0, -1.0));
        assert_eq!(d, -2.0);
    }

    #[test]
    fn culls_behind_camera() {
        let cam = origin_cam(32, 32, 20.0);
        assert!(project_primitive(&cam, &prim([0.0, 0.0, -1.0], [0.1; 3], 0.9), 0).is_none());
        assert!(project_primitive(&cam, &prim([0.0, 0.0, 0.005], [0.1; 3], 0.9), 0).is_none());
        // Far off to the side.
        assert!(project_primitive(&cam, &prim([100.0, 0.0, 1.0], [0.1; 3], 0.9), 0).is_none());
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_pixel(&[(1.0, 3.0)]), (3.0, 0.0));
        assert_eq!(composite_pixel(&[(0.5, 1.0), (1.0, 2.0)]).0, 1.5);
        assert_eq!(composite_pixel(&[]), (0.0, 1.0));
    }

    #[test]
    fn empty_scene_is_all_sentinels() {
        let cam = origin_cam(20, 10, 10.0);
        let b = render_buffers(&cam, &GaussianScene::default(), 0.5).unwrap();
        assert!(b.depth_alpha.data.iter().all(|&d| d == 0.0));
        assert!(b.depth_plane.data.iter().all(|&d| d == 0.0));
        assert!(b.depth_dominant.data.iter().all(|&d| d == 0.0));
        assert!(b.gmap.data.iter().all(|&g| g == -1));
        assert!(b.normal.data.iter().all(|&n| n == [0.0; 3]));
        assert!(b.contributors.is_empty());
    }

    #[test]
    fn tau_is_validated() {
        let cam = origin_cam(8, 8, 10.0);
        let s = GaussianScene::default();
        assert!(render_depth_dominant(&cam, &s, 0.0).is_err());
        assert!(render_depth_dominant(&cam, &s, 1.5).is_err());
        assert!(render_depth_dominant(&cam, &s, 1.0).is_ok());
    }

    #[test]
    fn single_opaque_primitive_depth_modes_agree() {
        let cam = origin_cam(16, 16, 10.0);
        // Very wide, thin, opaque slab at z=3: α ≈ 1 everywhere in view.
        let mut p = prim([0.0, 0.0, 3.0], [1e5, 1e5, 1e-3], 1.0 - 1e-12);
        p.sh[0] = 1.0;
        let b = render_buffers(&cam, &scene_of(&[p]), 0.5).unwrap();
        for i in 0..b.depth_alpha.len() {
            let (a, d, pl) = (b.depth_alpha.data[i], b.depth_dominant.data[i], b.depth_plane.data[i]);
            assert_relative_eq!(a, 3.0, epsilon = 1e-6);
            assert_eq!(d, 3.0);
            assert_relative_eq!(pl, 3.0, epsilon = 1e-9);
            assert_eq!(b.gmap.data[i], 0);
            assert_relative_eq!(b.normal.data[i][2], -1.0, epsilon = 1e-6);
            assert_relative_eq!(b.distance.data[i], -3.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn dominant_scan_and_gmap_weights() {
        // Three wide slabs with opacities 0.3, 0.6, 0.9 at z = 1, 2, 3.
        let cam = origin_cam(8, 8, 4.0);
        let slab = |z: f64, o: f64| prim([0.0, 0.0, z], [1e4, 1e4, 1e-3], o);
        let scene = scene_of(&[slab(1.0, 0.3), slab(2.0, 0.6), slab(3.0, 0.9)]);
        let b = render_buffers(&cam, &scene, 0.5).unwrap();
        let c = (4, 4);
        assert_relative_eq!(b.depth_dominant.get(c.0, c.1), 2.0, epsilon = 0.0);
        // Weights 0.3, 0.42, 0.252: the middle slab wins the Gaussian map.
        assert_eq!(b.gmap.get(c.0, c.1), 1);
        let b = render_buffers(&cam, &scene, 0.95).unwrap();
        assert_eq!(b.depth_dominant.get(c.0, c.1), 0.0);
        let b = render_buffers(&cam, &scene, 1e-9).unwrap();
        assert_eq!(b.depth_dominant.get(c.0, c.1), 1.0);

        // Weights 0.3 and 0.7·0.9 = 0.63: second wins.
        let scene = scene_of(&[slab(1.0, 0.3), slab(2.0, 0.9)]);
        assert_eq!(render_gaussian_map(&cam, &scene).unwrap().get(4, 4), 1);
        // Exact weights 0.5 and 0.5·1.0 need the centre pixel on the axis.
        let cam = origin_cam(9, 9, 4.0);
        let scene = scene_of(&[slab(1.0, 0.5), slab(2.0, 1.0)]);
        assert_eq!(render_gaussian_map(&cam, &scene).unwrap().get(4, 4), 0);
        // Tie resolved toward the smaller primitive index, not compositing order.
        let scene = scene_of(&[slab(2.0, 1.0), slab(1.0, 0.5)]);
        assert_eq!(render_gaussian_map(&cam, &scene).unwrap().get(4, 4), 0);
    }

    #[test]
    fn opposite_tangential_normals_cancel() {
        let cam = origin_cam(9, 9, 4.0);
        let tilt = 0.3;
        let mk = |angle: f64, z: f64, o: f64| ActivatedPrimitive {
            rotation: UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle),
            ..prim([0.0, 0.0, z], [1e4, 1e4, 1e-3], o)
        };
        // Weights: 0.5 and 0.5·1.0.
        let scene = scene_of(&[mk(tilt, 2.0, 0.5), mk(-tilt, 2.0 + 1e-9, 1.0)]);
        let (n, _) = render_normal_distance(&cam, &scene).unwrap();
        let c = n.get(4, 4);
        assert!(c[0].abs() < 1e-9, "tangential x = {}", c[0]);
        assert_relative_eq!(c[2], -tilt.cos(), epsilon = 1e-6);
    }

    #[test]
    fn plane_depth_formula() {
        let cam = origin_cam(21, 21, 10.0);
        // Plane z = 2 with the pre-flip normal (0, 0, 1): d = 2.
        assert_eq!(plane_depth(&cam, [0.0, 0.0, 1.0], 2.0, cam.cx, cam.cy), 2.0);
        // Ray K⁻¹p̃ = (0.1, 0, 1).
        assert_relative_eq!(plane_depth(&cam, [0.0, 0.0, 1.0], 2.0, cam.cx + 1.0, cam.cy), 2.0);
        assert_eq!(plane_depth(&cam, [1.0, 0.0, 0.0], 2.0, cam.cx, cam.cy), 0.0);
        assert_eq!(plane_depth(&cam, [0.0, 0.0, 1.0], -2.0, cam.cx, cam.cy), 0.0);
    }

    #[test]
    fn partition_of_unity() {
        let cam = origin_cam(24, 24, 20.0);
        let prims: Vec<_> = (0..30)
            .map(|i| {
                let f = i as f64;
                prim(
                    [(f * 0.37).sin() * 0.5, (f * 0.71).cos() * 0.5, 2.0 + 0.05 * f],
                    [0.2, 0.1 + 0.01 * f, 0.05],
                    0.3 + 0.02 * f,
                )
            })
            .collect();
        let b = render_buffers(&cam, &scene_of(&prims), 0.5).unwrap();
        for i in 0..b.alpha_acc.len() {
            let total = b.alpha_acc.data[i] + b.transmittance.data[i];
            assert!((total - 1.0).abs() < 1e-12, "pixel {i}: {total}");
        }
    }

    #[test]
    fn depth_mode_parsing() {
        for m in DepthMode::ALL {
            assert_eq!(m.as_str().parse::<DepthMode>().unwrap(), m);
        }
        assert!("bogus".parse::<DepthMode>().is_err());
    }
}
