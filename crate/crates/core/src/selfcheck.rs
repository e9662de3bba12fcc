//! Built-in consistency checks against slow reference implementations.
//! Run by `gsforge selfcheck`.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::align::{combined_infonce, l2_normalize, nll_match_loss, normalize_scene_scales, AlignmentAnchor, InfoNceConfig, NegativePool};
use crate::error::Result;
use crate::image::{DepthMap, GaussianMap, Image, RgbImage};
use crate::io::{gidx, gtns, pfm, ply};
use crate::labeler::{sample_gt_matches, warp_depth, warp_pixel, SampleMode};
use crate::metrics::{fundamental_from_cameras, symmetric_epipolar_error};
use crate::pipeline::derive_seed;
use crate::render::{
    plane_depth_from_maps, project_primitive, render_buffers, Projected2D, ALPHA_ACC_VALID, TRANSMITTANCE_MIN,
};
use crate::synthetic::{make_synthetic_scene, SceneKind, SyntheticParams};
use crate::types::{CameraModel, GaussianScene};

/// Output of [`reference_render`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRender {
    pub rgb: RgbImage,
    pub depth_alpha: DepthMap,
    pub depth_dominant: DepthMap,
    pub depth_plane: DepthMap,
    pub alpha_acc: DepthMap,
    pub transmittance: DepthMap,
    pub gmap: GaussianMap,
}

/// Per-pixel loop over every splat in (depth, index) order: no tiling, no
/// culling beyond projection. Slow but simple.
pub fn reference_render(cam: &CameraModel, scene: &GaussianScene, tau: f64) -> Result<ReferenceRender> {
    let prims = scene.activate_all()?;
    let mut splats: Vec<(Projected2D, [f64; 3], f64)> = prims
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let s = project_primitive(cam, p, i)?;
            let (n, d) = s.facing_plane(&cam.world_to_camera(&p.position));
            Some((s, [n.x, n.y, n.z], d))
        })
        .collect();
    splats.sort_by(|a, b| (a.0.z_cam, a.0.primitive_index).partial_cmp(&(b.0.z_cam, b.0.primitive_index)).unwrap());

    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut rgb = Image::filled(w, h, [0.0; 3]);
    let mut depth_alpha = Image::filled(w, h, 0.0);
    let mut depth_dominant = Image::filled(w, h, 0.0);
    let mut normal = Image::filled(w, h, [0.0; 3]);
    let mut distance = Image::filled(w, h, 0.0);
    let mut alpha_acc = Image::filled(w, h, 0.0);
    let mut transmittance = Image::filled(w, h, 1.0);
    let mut gmap = Image::filled(w, h, -1i32);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let mut t = 1.0f64;
            let mut c = [0.0; 3];
            let (mut z_acc, mut d_acc, mut a_acc) = (0.0, 0.0, 0.0);
            let mut n_acc = [0.0; 3];
            let mut dom = None;
            let mut best = (0.0f64, usize::MAX);
            let mut done = false;
            for (s, n, d) in &splats {
                let a = s.alpha_at(fx, fy);
                if a == 0.0 {
                    continue;
                }
                if dom.is_none() && a >= tau {
                    dom = Some(s.z_cam);
                }
                if done {
                    continue;
                }
                let wgt = a * t;
                for k in 0..3 {
                    c[k] += s.color[k] * wgt;
                    n_acc[k] += n[k] * wgt;
                }
                z_acc += s.z_cam * wgt;
                d_acc += d * wgt;
                a_acc += wgt;
                if wgt > best.0 || (wgt == best.0 && s.primitive_index < best.1) {
                    best = (wgt, s.primitive_index);
                }
                t *= 1.0 - a;
                done = t < TRANSMITTANCE_MIN;
            }
            rgb.set(x, y, c);
            normal.set(x, y, n_acc);
            distance.set(x, y, d_acc);
            alpha_acc.set(x, y, a_acc);
            transmittance.set(x, y, t);
            depth_dominant.set(x, y, dom.unwrap_or(0.0));
            if a_acc >= ALPHA_ACC_VALID {
                depth_alpha.set(x, y, z_acc);
                gmap.set(x, y, best.1 as i32);
            }
        }
    }
    let depth_plane = plane_depth_from_maps(cam, &normal, &distance, &alpha_acc);
    Ok(ReferenceRender {
        rgb,
        depth_alpha,
        depth_dominant,
        depth_plane,
        alpha_acc,
        transmittance,
        gmap,
    })
}

/// −ln(Σ_pos e^{s/τ} / Σ_all e^{s/τ}) without any stabilisation.
pub fn naive_info_nce(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]], tau: f64) -> f64 {
    let e = |z: &[f64]| (anchor.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
    let num: f64 = positives.iter().map(|z| e(z)).sum();
    let den: f64 = num + negatives.iter().map(|z| e(z)).sum::<f64>();
    -(num / den).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
}

impl SelfcheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn origin_camera(size: u32, focal: f64) -> Result<CameraModel> {
    let c = (size as f64 - 1.0) / 2.0;
    CameraModel::new(focal, focal, c, c, size, size, nalgebra::Matrix3::identity(), Vector3::zeros())
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&v).expect("gaussian sample is nonzero")
}

pub fn run_selfcheck(seed: u64) -> SelfcheckReport {
    let mut checks = Vec::new();

    checks.push(check("renderer_matches_reference", || {
        let cam = origin_camera(40, 36.0)?;
        let mut mismatched = 0;
        for k in 0..4 {
            let params = SyntheticParams {
                count: 250,
                ..Default::default()
            };
            let s = make_synthetic_scene(SceneKind::RandomCloud, &params, derive_seed(seed, k))?;
            let fast = render_buffers(&cam, &s.scene, 0.5)?;
            let slow = reference_render(&cam, &s.scene, 0.5)?;
            let same = fast.rgb == slow.rgb
                && fast.depth_alpha == slow.depth_alpha
                && fast.depth_dominant == slow.depth_dominant
                && fast.depth_plane == slow.depth_plane
                && fast.gmap == slow.gmap;
            mismatched += usize::from(!same);
        }
        Ok((mismatched == 0, format!("{mismatched} of 4 scenes differ")))
    }));

    checks.push(check("weights_partition_unity", || {
        let cam = origin_camera(40, 36.0)?;
        let s = make_synthetic_scene(SceneKind::RandomCloud, &SyntheticParams::default(), seed)?;
        let b = render_buffers(&cam, &s.scene, 0.5)?;
        let worst = b
            .alpha_acc
            .data
            .iter()
            .zip(&b.transmittance.data)
            .map(|(a, t)| (a + t - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((worst <= 1e-12, format!("max |Σw + T − 1| = {worst:.3e}")))
    }));

    checks.push(check("plane_depth_exact", || {
        let params = SyntheticParams {
            tilt: 0.4,
            extent: 4.0,
            count: 1600,
            ..Default::default()
        };
        let s = make_synthetic_scene(SceneKind::Plane, &params, seed)?;
        let cam = origin_camera(48, 40.0)?;
        let b = render_buffers(&cam, &s.scene, 0.5)?;
        let oracle = s.surface.depth_map(&cam);
        let mut worst = 0.0f64;
        for (d, g) in b.depth_plane.data.iter().zip(&oracle.data) {
            if *d > 0.0 && *g > 0.0 {
                worst = worst.max((d - g).abs() / g);
            }
        }
        Ok((worst < 1e-9, format!("max relative error {worst:.3e}")))
    }));

    checks.push(check("warp_round_trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = origin_camera(64, 50.0)?;
        let b = crate::view_synth::perturb_camera(&a, &Default::default(), 3)?;
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let (u, v, d) = (rng.gen_range(0.0..63.0), rng.gen_range(0.0..63.0), rng.gen_range(1.0..6.0));
            if let Some((p, z)) = warp_pixel(&a, &b, u, v, d) {
                if let Some((q, z2)) = warp_pixel(&b, &a, p.x, p.y, z) {
                    worst = worst.max((q.x - u).abs()).max((q.y - v).abs()).max((z2 - d).abs() / d);
                }
            }
        }
        Ok((worst < 1e-9, format!("max round-trip error {worst:.3e}")))
    }));

    checks.push(check("epipolar_exact_depth", || {
        let params = SyntheticParams {
            extent: 4.0,
            ..Default::default()
        };
        let s = make_synthetic_scene(SceneKind::Plane, &params, seed)?;
        let cams = crate::pipeline::synthetic_eval_cameras(2, 0.5, 50.0, 64)?;
        let depth = s.surface.depth_map(&cams[0]);
        let corr = warp_depth(&depth, &cams[0], &cams[1]);
        let m = sample_gt_matches(&corr, &corr.valid, SampleMode::Grid { step: 7 })?;
        let f = fundamental_from_cameras(&cams[0], &cams[1])?;
        let e = symmetric_epipolar_error(&f, &m)?;
        Ok((e.count() > 0 && e.mean < 1e-9, format!("{} matches, mean {:.3e} px", e.count(), e.mean)))
    }));

    checks.push(check("infonce_matches_naive", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<AlignmentAnchor> = (0..12)
            .map(|i| AlignmentAnchor {
                scene: i % 2,
                v: unit(&mut rng, 16),
                q_a: unit(&mut rng, 16),
                q_b: unit(&mut rng, 16),
            })
            .collect();
        let cfg = InfoNceConfig {
            tau: 0.5,
            pool: NegativePool::IntraScene,
            ..Default::default()
        };
        let got = combined_infonce(&batch, &cfg)?;
        let (mut lv, mut lq) = (0.0, 0.0);
        for (i, a) in batch.iter().enumerate() {
            let negs: Vec<&[f64]> = batch
                .iter()
                .enumerate()
                .filter(|(j, b)| *j != i && b.scene == a.scene)
                .flat_map(|(_, b)| [&b.v[..], &b.q_a[..], &b.q_b[..]])
                .collect();
            lv += naive_info_nce(&a.v, &[&a.q_a, &a.q_b], &negs, cfg.tau);
            lq += 0.5
                * (naive_info_nce(&a.q_a, &[&a.v, &a.q_b], &negs, cfg.tau)
                    + naive_info_nce(&a.q_b, &[&a.v, &a.q_a], &negs, cfg.tau));
        }
        let want = (lv + lq) / batch.len() as f64;
        let rel = (got.total - want).abs() / want.abs();
        Ok((rel < 1e-12, format!("relative difference {rel:.3e}")))
    }));

    checks.push(check("nll_matches_naive", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = DMatrix::from_fn(6, 5, |_, _| rng.gen_range(0.01..1.0));
        let gt = [(0, 1), (2, 2), (5, 4), (3, 0)];
        let got = nll_match_loss(&s, &gt)?;
        let want = -gt.iter().map(|&(i, j)| s[(i, j)].ln()).sum::<f64>() / gt.len() as f64;
        Ok(((got - want).abs() < 1e-14, format!("{got} vs {want}")))
    }));

    checks.push(check("scale_standardization", || {
        let s = make_synthetic_scene(SceneKind::RandomCloud, &SyntheticParams::default(), seed)?;
        let n = normalize_scene_scales(&s.scene)?;
        let k = n.standardized_mean.len() as f64;
        let mean = n.standardized_mean.iter().sum::<f64>() / k;
        let std = (n.standardized_mean.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k).sqrt();
        Ok((mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9, format!("mean {mean:.3e}, std {std:.12}")))
    }));

    checks.push(check("format_round_trips", || {
        let s = make_synthetic_scene(SceneKind::RandomCloud, &SyntheticParams { count: 50, ..Default::default() }, seed)?;
        let back = ply::decode_scene_ply(&ply::encode_scene_ply(&s.scene, ply::PlyPrecision::F64), &s.scene.scene_id)?;
        let cam = origin_camera(24, 20.0)?;
        let b = render_buffers(&cam, &s.scene, 0.5)?;
        let f32_depth = b.depth_plane.map(|v| v as f32 as f64);
        let tensor = gtns::Tensor::f64(vec![24, 24], b.distance.data.clone())?;
        let ok = back.primitives == s.scene.primitives
            && pfm::decode_pfm(&pfm::encode_pfm(&f32_depth))? == f32_depth
            && gidx::decode_gmap(&gidx::encode_gmap(&b.gmap))? == b.gmap
            && gtns::decode_tensor(&gtns::encode_tensor(&tensor))? == tensor;
        Ok((ok, "ply/pfm/gidx/gtns".into()))
    }));

    checks.push(check("thread_count_invariance", || {
        let cam = origin_camera(48, 40.0)?;
        let s = make_synthetic_scene(SceneKind::RandomCloud, &SyntheticParams::default(), seed)?;
        let run = |threads| -> Result<_> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| crate::Error::Config(e.to_string()))?;
            pool.install(|| render_buffers(&cam, &s.scene, 0.5))
        };
        let (one, many) = (run(1)?, run(4)?);
        Ok((one == many, "1 vs 4 threads".into()))
    }));

    SelfcheckReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selfcheck_passes() {
        let r = run_selfcheck(3);
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
