//! Synthetic Gaussian scenes with exact depth oracles.
//!
//! Surface kinds place flattened discs (smallest scale a fixed fraction of
//! the others) centred exactly on an analytic surface and oriented along its
//! normal. `random_cloud` is unstructured and carries no surface.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::render::NEAR_PLANE;
use crate::types::{logit, CameraModel, GaussianPrimitive, GaussianScene, SH_COEFFS_PER_CHANNEL, SH_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Plane,
    TwoPlanes,
    SphereShell,
    RandomCloud,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Plane,
        SceneKind::TwoPlanes,
        SceneKind::SphereShell,
        SceneKind::RandomCloud,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SceneKind::Plane => "plane",
            SceneKind::TwoPlanes => "two_planes",
            SceneKind::SphereShell => "sphere_shell",
            SceneKind::RandomCloud => "random_cloud",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scene kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    /// Approximate primitive count.
    pub count: usize,
    /// Distance of the surface centre along +z.
    pub depth: f64,
    /// Half-size of planar patches or the random-cloud box.
    pub extent: f64,
    /// Rotation of planes about the x axis through their centre (radians).
    pub tilt: f64,
    /// `two_planes`: the far plane sits at `depth · far_ratio` for x ≥ split.
    pub split: f64,
    pub far_ratio: f64,
    pub radius: f64,
    /// Smallest-to-largest scale ratio of the flattened discs.
    pub flatness: f64,
    /// In-plane disc std as a fraction of the disc spacing.
    pub footprint: f64,
    pub opacity: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            count: 900,
            depth: 3.0,
            extent: 1.5,
            tilt: 0.0,
            split: 0.0,
            far_ratio: 1.5,
            radius: 1.0,
            flatness: 1e-5,
            footprint: 0.75,
            opacity: 0.95,
        }
    }
}

impl SyntheticParams {
    fn validate(&self) -> Result<()> {
        let ok = self.count > 0
            && self.depth > NEAR_PLANE
            && self.extent > 0.0
            && self.radius > 0.0
            && self.radius < self.depth
            && self.far_ratio > 0.0
            && self.flatness > 0.0
            && self.flatness <= 1e-4
            && self.footprint > 0.0
            && self.opacity > 0.0
            && self.opacity < 1.0
            && self.tilt.abs() < PI / 2.0;
        if !ok {
            return Err(Error::Config(format!("invalid synthetic scene parameters {self:?}")));
        }
        Ok(())
    }
}

/// Rectangle `{c + a·u + b·v : |a| ≤ half.0, |b| ≤ half.1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPatch {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Exact surface geometry of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalyticSurface {
    pub patches: Vec<PlanarPatch>,
    pub spheres: Vec<Sphere>,
}

impl AnalyticSurface {
    pub fn is_empty(&self) -> bool {
        self.patches.is_empty() && self.spheres.is_empty()
    }

    /// Camera-frame depth of the first surface hit along pixel `(u, v)`.
    pub fn depth(&self, cam: &CameraModel, u: f64, v: f64) -> Option<f64> {
        let o = cam.center();
        // Direction with unit camera z, so the ray parameter is the depth.
        let d = cam.rotation_cw() * cam.pixel_ray(u, v);
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > NEAR_PLANE && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        };
        for p in &self.patches {
            let den = p.normal.dot(&d);
            if den.abs() < 1e-12 {
                continue;
            }
            let t = p.normal.dot(&(p.center - o)) / den;
            let local = o + d * t - p.center;
            if local.dot(&p.u).abs() <= p.half.0 && local.dot(&p.v).abs() <= p.half.1 {
                consider(t);
            }
        }
        for s in &self.spheres {
            let oc = o - s.center;
            let a = d.dot(&d);
            let b = oc.dot(&d);
            let c = oc.dot(&oc) - s.radius * s.radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                continue;
            }
            let r = disc.sqrt();
            consider((-b - r) / a);
            consider((-b + r) / a);
        }
        best
    }

    /// Oracle depth for every pixel (0 where the ray misses).
    pub fn depth_map(&self, cam: &CameraModel) -> DepthMap {
        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut m = Image::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                m.set(x, y, self.depth(cam, x as f64, y as f64).unwrap_or(0.0));
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub scene: GaussianScene,
    pub surface: AnalyticSurface,
}

fn random_sh(rng: &mut ChaCha8Rng, amplitude: f64) -> [f64; SH_LEN] {
    let mut sh = [0.0; SH_LEN];
    for c in 0..3 {
        sh[c * SH_COEFFS_PER_CHANNEL] = rng.gen_range(-1.0..1.0);
        for k in 1..SH_COEFFS_PER_CHANNEL {
            let z: f64 = rng.sample(StandardNormal);
            sh[c * SH_COEFFS_PER_CHANNEL + k] = amplitude * z;
        }
    }
    sh
}

/// Disc centred at `p` whose smallest axis is `normal`.
fn disc(p: Vector3<f64>, normal: Vector3<f64>, sigma: f64, params: &SyntheticParams, sh: [f64; SH_LEN]) -> GaussianPrimitive {
    // Rotation columns are the scale axes; the third carries the thin scale.
    let n = normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let a = helper.cross(&n).normalize();
    let b = n.cross(&a);
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_basis_unchecked(&[a, b, n]));
    let q = rot.quaternion();
    GaussianPrimitive {
        position: p,
        log_scale: Vector3::new(sigma.ln(), sigma.ln(), (sigma * params.flatness).ln()),
        rotation: [q.w, q.i, q.j, q.k],
        opacity_logit: logit(params.opacity),
        sh,
    }
}

fn plane_patch(center: Vector3<f64>, tilt: f64, half: (f64, f64)) -> PlanarPatch {
    let r = Rotation3::from_axis_angle(&Vector3::x_axis(), tilt);
    PlanarPatch {
        center,
        normal: r * Vector3::z(),
        u: r * Vector3::x(),
        v: r * Vector3::y(),
        half,
    }
}

/// Fills `patch` with an `nx × ny` grid of discs; the analytic patch is
/// widened by 3σ so Gaussian tails stay inside the oracle's support.
fn grid_on_patch(
    patch: &PlanarPatch,
    nx: usize,
    ny: usize,
    params: &SyntheticParams,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<GaussianPrimitive>,
) -> PlanarPatch {
    let (sx, sy) = (2.0 * patch.half.0 / nx as f64, 2.0 * patch.half.1 / ny as f64);
    let sigma = params.footprint * sx.min(sy);
    for j in 0..ny {
        for i in 0..nx {
            let a = -patch.half.0 + (i as f64 + 0.5) * sx;
            let b = -patch.half.1 + (j as f64 + 0.5) * sy;
            let p = patch.center + patch.u * a + patch.v * b;
            out.push(disc(p, patch.normal, sigma, params, random_sh(rng, 0.05)));
        }
    }
    PlanarPatch {
        half: (patch.half.0 + 3.0 * sigma, patch.half.1 + 3.0 * sigma),
        ..*patch
    }
}

pub fn make_synthetic_scene(kind: SceneKind, params: &SyntheticParams, seed: u64) -> Result<SyntheticScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = Vec::with_capacity(params.count);
    let mut surface = AnalyticSurface::default();
    let center = Vector3::new(0.0, 0.0, params.depth);
    match kind {
        SceneKind::Plane => {
            let n = (params.count as f64).sqrt().ceil() as usize;
            let patch = plane_patch(center, params.tilt, (params.extent, params.extent));
            surface.patches.push(grid_on_patch(&patch, n, n, params, &mut rng, &mut prims));
        }
        SceneKind::TwoPlanes => {
            let e = params.extent;
            if !(params.split > -e && params.split < e) {
                return Err(Error::Config(format!("split {} must lie inside ±{e}", params.split)));
            }
            let ny = ((params.count as f64) / 2.0).sqrt().ceil().max(1.0) as usize;
            let near_w = params.split + e;
            let far_w = e - params.split;
            let nx_near = ((ny as f64 * near_w / (2.0 * e)).round() as usize).max(1);
            let nx_far = ((ny as f64 * far_w / (2.0 * e)).round() as usize).max(1);
            let near = PlanarPatch {
                center: Vector3::new(-e + near_w / 2.0, 0.0, params.depth),
                normal: Vector3::z(),
                u: Vector3::x(),
                v: Vector3::y(),
                half: (near_w / 2.0, e),
            };
            let fd = params.depth * params.far_ratio;
            let far = PlanarPatch {
                center: Vector3::new(params.split + far_w / 2.0, 0.0, fd),
                half: (far_w / 2.0, e),
                ..near
            };
            // The oracle keeps the exact split so the depth step is sharp.
            grid_on_patch(&near, nx_near, ny, params, &mut rng, &mut prims);
            grid_on_patch(&far, nx_far, ny, params, &mut rng, &mut prims);
            surface.patches.push(near);
            surface.patches.push(far);
        }
        SceneKind::SphereShell => {
            let n = params.count;
            let golden = PI * (3.0 - 5f64.sqrt());
            let spacing = (4.0 * PI / n as f64).sqrt() * params.radius;
            let sigma = params.footprint * spacing;
            for i in 0..n {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                let dir = Vector3::new(r * th.cos(), y, r * th.sin());
                prims.push(disc(center + dir * params.radius, dir, sigma, params, random_sh(&mut rng, 0.05)));
            }
            surface.spheres.push(Sphere {
                center,
                radius: params.radius,
            });
        }
        SceneKind::RandomCloud => {
            for _ in 0..params.count {
                let p = center
                    + Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ) * params.extent;
                let log_scale = Vector3::new(
                    rng.gen_range(-4.0..-1.5),
                    rng.gen_range(-4.0..-1.5),
                    rng.gen_range(-4.0..-1.5),
                );
                let rotation = [0; 4].map(|_| rng.sample::<f64, _>(StandardNormal));
                prims.push(GaussianPrimitive {
                    position: p,
                    log_scale,
                    rotation,
                    opacity_logit: rng.gen_range(-2.0..4.0),
                    sh: random_sh(&mut rng, 0.3),
                });
            }
        }
    }
    Ok(SyntheticScene {
        kind,
        scene: GaussianScene::new(format!("{}_{seed}", kind.as_str()), prims),
        surface,
    })
}

/// `count` cameras on a horizontal arc of half-angle `arc` around `target`,
/// all looking at it from `distance`.
pub fn ring_cameras(
    target: Vector3<f64>,
    distance: f64,
    count: usize,
    arc: f64,
    focal: f64,
    width: u32,
    height: u32,
) -> Result<Vec<CameraModel>> {
    (0..count)
        .map(|i| {
            let t = if count == 1 {
                0.0
            } else {
                -arc + 2.0 * arc * i as f64 / (count - 1) as f64
            };
            let eye = target + Vector3::new(t.sin(), 0.0, -t.cos()) * distance;
            CameraModel::look_at(eye, target, Vector3::new(0.0, -1.0, 0.0), focal, focal, width, height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn origin_cam() -> CameraModel {
        CameraModel::new(40.0, 40.0, 31.5, 31.5, 64, 64, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn plane_principal_point_depth() {
        for tilt in [0.0, 0.4, -0.6] {
            let s = make_synthetic_scene(
                SceneKind::Plane,
                &SyntheticParams {
                    depth: 2.0,
                    tilt,
                    ..Default::default()
                },
                1,
            )
            .unwrap();
            let cam = origin_cam();
            let d = s.surface.depth(&cam, cam.cx, cam.cy).unwrap();
            assert!((d - 2.0).abs() < 1e-12, "{d}");
        }
    }

    #[test]
    fn discs_lie_on_surface_and_are_flat() {
        for kind in [SceneKind::Plane, SceneKind::TwoPlanes, SceneKind::SphereShell] {
            let s = make_synthetic_scene(
                kind,
                &SyntheticParams {
                    tilt: 0.3,
                    count: 200,
                    ..Default::default()
                },
                4,
            )
            .unwrap();
            for p in &s.scene.primitives {
                let a = p.activate().unwrap();
                let (min, max) = (a.scale.min(), a.scale.max());
                assert!(min <= 1e-4 * max);
                let n = a.plane_normal();
                let on_surface = s.surface.patches.iter().any(|pp| {
                    (pp.normal.dot(&(a.position - pp.center))).abs() < 1e-12 && n.cross(&pp.normal).norm() < 1e-9
                }) || s.surface.spheres.iter().any(|sp| {
                    let r = a.position - sp.center;
                    (r.norm() - sp.radius).abs() < 1e-12 && n.cross(&r.normalize()).norm() < 1e-9
                });
                assert!(on_surface, "{kind}");
            }
        }
    }

    #[test]
    fn two_planes_switch_at_boundary() {
        let params = SyntheticParams {
            depth: 2.0,
            far_ratio: 2.0,
            split: 0.0,
            ..Default::default()
        };
        let s = make_synthetic_scene(SceneKind::TwoPlanes, &params, 0).unwrap();
        let cam = origin_cam();
        // x = 0 maps to the principal column for both planes.
        assert_eq!(s.surface.depth(&cam, cam.cx - 0.5, cam.cy), Some(2.0));
        assert_eq!(s.surface.depth(&cam, cam.cx + 0.5, cam.cy), Some(4.0));
    }

    #[test]
    fn sphere_depth() {
        let s = make_synthetic_scene(SceneKind::SphereShell, &SyntheticParams::default(), 0).unwrap();
        let cam = origin_cam();
        assert!((s.surface.depth(&cam, cam.cx, cam.cy).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(s.surface.depth(&cam, 0.0, 0.0), None);
    }

    #[test]
    fn random_cloud_reproducible() {
        let p = SyntheticParams {
            count: 50,
            ..Default::default()
        };
        let a = make_synthetic_scene(SceneKind::RandomCloud, &p, 7).unwrap();
        assert_eq!(a, make_synthetic_scene(SceneKind::RandomCloud, &p, 7).unwrap());
        assert_ne!(a.scene, make_synthetic_scene(SceneKind::RandomCloud, &p, 8).unwrap().scene);
        assert!(a.surface.is_empty());
        assert_eq!(a.scene.len(), 50);
    }

    #[test]
    fn rejects_bad_params() {
        let p = SyntheticParams {
            flatness: 1e-2,
            ..Default::default()
        };
        assert!(make_synthetic_scene(SceneKind::Plane, &p, 0).is_err());
        assert!("cube".parse::<SceneKind>().is_err());
    }
}
