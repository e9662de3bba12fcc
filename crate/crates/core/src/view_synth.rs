//! Perturbation-based novel viewpoint generation with pre-rendering checks.
//!
//! Candidate cameras are jittered copies of training cameras. Each candidate
//! is rendered once to collect four indicators (contributing primitives, mean
//! opacity, valid-pixel fraction, near-pixel fraction); a candidate survives
//! when every indicator lies within two standard deviations of the batch
//! mean.
//!
//! All randomness is a pure function of `(seed, draw index)`: each draw uses
//! its own ChaCha stream.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render_buffers, view_from_buffers, DepthMode, RenderSettings, RenderedView};
use crate::types::{CameraModel, GaussianScene};

pub const DEFAULT_TAU_ALPHA: f64 = 0.5;
/// τ_D defaults to this multiple of the median valid train-view depth.
pub const TAU_DEPTH_MEDIAN_FACTOR: f64 = 3.0;
/// Candidates further than this many standard deviations from the batch mean
/// on any indicator are rejected.
pub const REJECT_SIGMAS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Per-axis Euler jitter bound, radians.
    pub rot_jitter_max: f64,
    /// Per-axis translation jitter bound, world units.
    pub trans_jitter_max: f64,
    /// Focal-length multiplier range `(lo, hi)`.
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            rot_jitter_max: 0.1,
            trans_jitter_max: 0.1,
            scale_range: (0.5, 2.0),
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    /// Zoom preset reaching the largest focal scaling used for training data.
    pub const WIDE_ZOOM: (f64, f64) = (0.25, 4.0);

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.rot_jitter_max >= 0.0 && self.rot_jitter_max.is_finite()) {
            return Err(Error::Config(format!("rot_jitter_max must be >= 0, got {}", self.rot_jitter_max)));
        }
        if !(self.trans_jitter_max >= 0.0 && self.trans_jitter_max.is_finite()) {
            return Err(Error::Config(format!(
                "trans_jitter_max must be >= 0, got {}",
                self.trans_jitter_max
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    rng.gen_range(-bound..=bound)
}

/// Jittered copy of `cam`. ΔR = Rz·Ry·Rx (uniform Euler angles) is applied
/// on the left of R_wc, Δt is added to t_wc and fx, fy are scaled by a
/// uniform draw from `scale_range`. The principal point and image size are
/// unchanged.
pub fn perturb_camera(cam: &CameraModel, cfg: &PerturbationConfig, draw_index: u64) -> Result<CameraModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(draw_index);
    let ax = symmetric(&mut rng, cfg.rot_jitter_max);
    let ay = symmetric(&mut rng, cfg.rot_jitter_max);
    let az = symmetric(&mut rng, cfg.rot_jitter_max);
    let dt = Vector3::new(
        symmetric(&mut rng, cfg.trans_jitter_max),
        symmetric(&mut rng, cfg.trans_jitter_max),
        symmetric(&mut rng, cfg.trans_jitter_max),
    );
    let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);

    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), ax);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), ay);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), az);
    let delta: Matrix3<f64> = (rz * ry * rx).into_inner();

    let mut out = cam.clone();
    out.rotation_wc = delta * cam.rotation_wc;
    out.translation_wc = cam.translation_wc + dt;
    out.fx = cam.fx * scale;
    out.fy = cam.fy * scale;
    Ok(out)
}

/// Pre-rendering indicators of one view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewStats {
    pub n_gaussians: usize,
    pub mean_alpha: f64,
    pub frac_valid: f64,
    pub frac_near: f64,
}

impl ViewStats {
    fn metrics(&self) -> [f64; 4] {
        [self.n_gaussians as f64, self.mean_alpha, self.frac_valid, self.frac_near]
    }
}

/// Indicators from a rendered view. `frac_near` is taken over valid pixels
/// (accumulated opacity above `tau_alpha`).
pub fn compute_view_stats(view: &RenderedView, tau_alpha: f64, tau_depth: f64) -> ViewStats {
    let n = view.alpha_acc.len();
    if n == 0 {
        return ViewStats::default();
    }
    let mut alpha_sum = 0.0;
    let mut valid = 0usize;
    let mut near = 0usize;
    for (i, &a) in view.alpha_acc.data.iter().enumerate() {
        alpha_sum += a;
        if a > tau_alpha {
            valid += 1;
            let d = view.depth.data[i];
            if d > 0.0 && d < tau_depth {
                near += 1;
            }
        }
    }
    ViewStats {
        n_gaussians: view.n_contributing,
        mean_alpha: alpha_sum / n as f64,
        frac_valid: valid as f64 / n as f64,
        frac_near: if valid == 0 { 0.0 } else { near as f64 / valid as f64 },
    }
}

/// Mean and population standard deviation, summed in sorted order so the
/// result depends only on the multiset of values.
fn mean_std(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

/// Indices of candidates within 2σ of the mean on every indicator. A metric
/// with zero spread rejects nothing.
pub fn filter_candidates(stats: &[ViewStats]) -> Result<Vec<usize>> {
    if stats.len() < 2 {
        return Err(Error::InsufficientCandidates(stats.len()));
    }
    let mut keep = vec![true; stats.len()];
    for m in 0..4 {
        let mut column: Vec<f64> = stats.iter().map(|s| s.metrics()[m]).collect();
        let (mean, std) = mean_std(&mut column);
        if std == 0.0 {
            continue;
        }
        for (k, s) in stats.iter().enumerate() {
            if (s.metrics()[m] - mean).abs() > REJECT_SIGMAS * std {
                keep[k] = false;
            }
        }
    }
    Ok((0..stats.len()).filter(|&k| keep[k]).collect())
}

/// How candidates are grouped for the 2σ statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchGranularity {
    /// Statistics over the candidates of one training camera.
    PerTrainView,
    /// Statistics over every candidate of the scene.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub perturbation: PerturbationConfig,
    pub per_view_count: usize,
    /// Novel views to keep per training view (1.0 = 1:1).
    pub extra_ratio: f64,
    pub depth_mode: DepthMode,
    pub tau: f64,
    pub tau_alpha: f64,
    /// `None` selects 3× the median valid train-view depth.
    pub tau_depth: Option<f64>,
    pub batch: BatchGranularity,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            perturbation: PerturbationConfig::default(),
            per_view_count: 4,
            extra_ratio: 1.0,
            depth_mode: DepthMode::Plane,
            tau: crate::render::DEFAULT_TAU,
            tau_alpha: DEFAULT_TAU_ALPHA,
            tau_depth: None,
            batch: BatchGranularity::PerTrainView,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedView {
    pub camera: CameraModel,
    pub train_index: usize,
    pub draw_index: usize,
    pub stats: ViewStats,
}

/// Median of valid (> 0) depths over the training views, times three.
pub fn default_tau_depth(
    scene: &GaussianScene,
    train_cams: &[CameraModel],
    depth_mode: DepthMode,
    tau: f64,
) -> Result<f64> {
    let depths: Vec<Vec<f64>> = train_cams
        .par_iter()
        .map(|cam| {
            let b = render_buffers(cam, scene, tau)?;
            Ok(b.depth(depth_mode).data.iter().copied().filter(|&d| d > 0.0).collect())
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<f64> = depths.into_iter().flatten().collect();
    if all.is_empty() {
        return Ok(f64::INFINITY);
    }
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let median = if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    };
    Ok(TAU_DEPTH_MEDIAN_FACTOR * median)
}

/// Generates `per_view_count` candidates per training camera, filters them
/// and keeps `round(extra_ratio × |train_cams|)` survivors. Survivors are
/// taken round-robin over training cameras (first surviving draw of every
/// camera, then the second, ...) and returned ordered by
/// `(train_index, draw_index)`.
pub fn synthesize_views(
    scene: &GaussianScene,
    train_cams: &[CameraModel],
    cfg: &SynthConfig,
) -> Result<Vec<SynthesizedView>> {
    cfg.perturbation.validate()?;
    if !(cfg.extra_ratio >= 0.0 && cfg.extra_ratio.is_finite()) {
        return Err(Error::Config(format!("extra_ratio must be >= 0, got {}", cfg.extra_ratio)));
    }
    let requested = (cfg.extra_ratio * train_cams.len() as f64).round() as usize;
    if requested == 0 {
        return Ok(Vec::new());
    }
    let tau_depth = match cfg.tau_depth {
        Some(t) => t,
        None => default_tau_depth(scene, train_cams, cfg.depth_mode, cfg.tau)?,
    };
    let settings = RenderSettings {
        depth_mode: cfg.depth_mode,
        tau: cfg.tau,
        tau_alpha: cfg.tau_alpha,
        tau_depth,
    };

    let jobs: Vec<(usize, usize)> = (0..train_cams.len())
        .flat_map(|t| (0..cfg.per_view_count).map(move |d| (t, d)))
        .collect();
    let candidates: Vec<SynthesizedView> = jobs
        .par_iter()
        .map(|&(t, d)| {
            let stream = (t * cfg.per_view_count + d) as u64;
            let camera = perturb_camera(&train_cams[t], &cfg.perturbation, stream)?;
            let view = view_from_buffers(render_buffers(&camera, scene, cfg.tau)?, &settings);
            Ok(SynthesizedView {
                camera,
                train_index: t,
                draw_index: d,
                stats: view.stats,
            })
        })
        .collect::<Result<_>>()?;

    let mut accepted = vec![false; candidates.len()];
    match cfg.batch {
        BatchGranularity::Global => {
            let stats: Vec<ViewStats> = candidates.iter().map(|c| c.stats).collect();
            for k in filter_candidates(&stats)? {
                accepted[k] = true;
            }
        }
        BatchGranularity::PerTrainView => {
            for (t, chunk) in candidates.chunks(cfg.per_view_count.max(1)).enumerate() {
                let stats: Vec<ViewStats> = chunk.iter().map(|c| c.stats).collect();
                for k in filter_candidates(&stats)? {
                    accepted[t * cfg.per_view_count + k] = true;
                }
            }
        }
    }

    let mut per_train: Vec<Vec<usize>> = vec![Vec::new(); train_cams.len()];
    for (k, c) in candidates.iter().enumerate() {
        if accepted[k] {
            per_train[c.train_index].push(k);
        }
    }
    let total: usize = per_train.iter().map(Vec::len).sum();
    if total < requested {
        return Err(Error::Shortfall {
            requested,
            accepted: total,
        });
    }
    let mut chosen = Vec::with_capacity(requested);
    'outer: for rank in 0.. {
        for list in &per_train {
            if let Some(&k) = list.get(rank) {
                chosen.push(k);
                if chosen.len() == requested {
                    break 'outer;
                }
            }
        }
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|k| candidates[k].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::look_at(
            Vector3::new(0.3, -0.2, -4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            40.0,
            42.0,
            32,
            24,
        )
        .unwrap()
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let cfg = PerturbationConfig {
            rot_jitter_max: 0.0,
            trans_jitter_max: 0.0,
            scale_range: (1.0, 1.0),
            seed: 9,
        };
        let c = cam();
        for draw in 0..5 {
            assert_eq!(perturb_camera(&c, &cfg, draw).unwrap(), c);
        }
    }

    #[test]
    fn focal_scaling_only() {
        let cfg = PerturbationConfig {
            rot_jitter_max: 0.0,
            trans_jitter_max: 0.0,
            scale_range: (2.0, 2.0),
            seed: 1,
        };
        let c = cam();
        let p = perturb_camera(&c, &cfg, 0).unwrap();
        assert_eq!(p.fx, 2.0 * c.fx);
        assert_eq!(p.fy, 2.0 * c.fy);
        assert_eq!((p.cx, p.cy, p.width, p.height), (c.cx, c.cy, c.width, c.height));
    }

    #[test]
    fn perturbation_is_deterministic_and_bounded() {
        let cfg = PerturbationConfig {
            rot_jitter_max: 0.2,
            trans_jitter_max: 0.5,
            scale_range: (0.5, 2.0),
            seed: 77,
        };
        let c = cam();
        let a = perturb_camera(&c, &cfg, 3).unwrap();
        assert_eq!(a, perturb_camera(&c, &cfg, 3).unwrap());
        assert_ne!(a, perturb_camera(&c, &cfg, 4).unwrap());
        a.validate().unwrap();
        let dt = a.translation_wc - c.translation_wc;
        assert!(dt.iter().all(|v| v.abs() <= 0.5));
        let s = a.fx / c.fx;
        assert!((0.5..=2.0).contains(&s));
        assert!((a.fy / c.fy - s).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = PerturbationConfig::default();
        cfg.scale_range = (0.0, 1.0);
        assert!(cfg.validate().is_err());
        cfg.scale_range = (2.0, 1.0);
        assert!(cfg.validate().is_err());
        cfg.scale_range = (1.0, 1.0);
        cfg.rot_jitter_max = -0.1;
        assert!(cfg.validate().is_err());
    }

    fn stats(n: usize, a: f64, v: f64, near: f64) -> ViewStats {
        ViewStats {
            n_gaussians: n,
            mean_alpha: a,
            frac_valid: v,
            frac_near: near,
        }
    }

    #[test]
    fn filter_identical_keeps_all() {
        let s = vec![stats(10, 0.1, 0.3, 0.7); 7];
        assert_eq!(filter_candidates(&s).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn filter_two_points_keeps_both() {
        let s = vec![stats(10, 0.1, 0.3, 0.7), stats(20, 0.9, 0.5, 0.1)];
        assert_eq!(filter_candidates(&s).unwrap(), vec![0, 1]);
    }

    #[test]
    fn filter_rejects_empty_view() {
        // 20 views with n ≈ 1e5 and one view with nothing in it: the empty
        // view sits sqrt(20) ≈ 4.47 σ below the mean on every indicator.
        let mut s: Vec<ViewStats> = (0..20)
            .map(|i| stats(100_000 + i * 37, 0.8 + 0.001 * i as f64, 0.9, 0.5))
            .collect();
        s.insert(13, ViewStats::default());
        let kept = filter_candidates(&s).unwrap();
        assert!(!kept.contains(&13));
        assert_eq!(kept.len(), 20);
    }

    #[test]
    fn filter_needs_two() {
        assert!(matches!(
            filter_candidates(&[ViewStats::default()]),
            Err(Error::InsufficientCandidates(1))
        ));
    }
}
