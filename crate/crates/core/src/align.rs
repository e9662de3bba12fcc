//! Supervision and alignment losses evaluated on plain numeric inputs.
//!
//! Nothing here differentiates; these are the forward values a training
//! loop would minimise, kept exact so they can be cross-checked.

use nalgebra::{DMatrix, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{quaternion_matrix, ActivatedPrimitive, GaussianScene, SH_LEN};

pub const FEATURE_LEN: usize = 59;
pub const EMBED_DIM: usize = 128;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Sampled coarse matches per pair.
pub const DEFAULT_N_PS: usize = 512;
/// Floor applied to the scene log-scale standard deviation.
pub const SCALE_STD_FLOOR: f64 = 1e-8;
const UNIT_TOL: f64 = 1e-6;

/// Sum with a fixed binary-tree shape, independent of thread count.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => {
            let (l, r) = v.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

fn population_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|x| (x - mu) * (x - mu)).collect();
    (mu, (pairwise_sum(&sq) / n).sqrt())
}

/// Standardised log-scales of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNormalization {
    /// ℓ̂_{i,k} = (ℓ_{i,k} − μ) / σ per primitive and axis.
    pub standardized: Vec<[f64; 3]>,
    /// (ℓ_i^mean − μ) / σ per primitive.
    pub standardized_mean: Vec<f64>,
    pub mu: f64,
    /// Effective σ (after flooring).
    pub sigma: f64,
    /// The raw σ fell below [`SCALE_STD_FLOOR`].
    pub floored: bool,
}

/// ℓ_i^mean = log of the arithmetic mean of the three (activated) scales.
pub fn log_mean_scale(log_scale: &Vector3<f64>) -> f64 {
    (log_scale.map(f64::exp).sum() / 3.0).ln()
}

pub fn normalize_scene_scales(scene: &GaussianScene) -> Result<ScaleNormalization> {
    if scene.is_empty() {
        return Err(Error::EmptyInput("scale normalisation needs at least one primitive"));
    }
    let means: Vec<f64> = scene.primitives.iter().map(|p| log_mean_scale(&p.log_scale)).collect();
    if means.iter().any(|m| !m.is_finite()) {
        return Err(Error::RejectedInput("non-finite log-scale".into()));
    }
    let (mu, raw_sigma) = population_mean_std(&means);
    let floored = raw_sigma < SCALE_STD_FLOOR;
    let sigma = if floored { SCALE_STD_FLOOR } else { raw_sigma };
    Ok(ScaleNormalization {
        standardized: scene
            .primitives
            .iter()
            .map(|p| [0, 1, 2].map(|k| (p.log_scale[k] - mu) / sigma))
            .collect(),
        standardized_mean: means.iter().map(|m| (m - mu) / sigma).collect(),
        mu,
        sigma,
        floored,
    })
}

/// Computes and stores `(μ, σ)` on the scene.
pub fn attach_scale_stats(scene: &mut GaussianScene) -> Result<(f64, f64)> {
    let n = normalize_scene_scales(scene)?;
    scene.scale_stats = Some((n.mu, n.sigma));
    Ok((n.mu, n.sigma))
}

/// Position ‖ opacity ‖ standardised log-scales ‖ quaternion (w,x,y,z) ‖ SH.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFeature(pub [f64; FEATURE_LEN]);

pub const POSITION: std::ops::Range<usize> = 0..3;
pub const OPACITY: std::ops::Range<usize> = 3..4;
pub const SCALES: std::ops::Range<usize> = 4..7;
pub const ROTATION: std::ops::Range<usize> = 7..11;
pub const SH: std::ops::Range<usize> = 11..FEATURE_LEN;

impl GaussianFeature {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; FEATURE_LEN] = v
            .try_into()
            .map_err(|_| Error::Shape(format!("gaussian feature needs {FEATURE_LEN} values, got {}", v.len())))?;
        Ok(Self(arr))
    }

    pub fn position(&self) -> &[f64] {
        &self.0[POSITION]
    }
    pub fn opacity(&self) -> f64 {
        self.0[OPACITY.start]
    }
    pub fn scales(&self) -> &[f64] {
        &self.0[SCALES]
    }
    pub fn rotation(&self) -> &[f64] {
        &self.0[ROTATION]
    }
    pub fn sh(&self) -> &[f64] {
        &self.0[SH]
    }

    /// Inverse of [`assemble_gaussian_feature`] given the same scene stats.
    pub fn to_activated(&self, stats: (f64, f64)) -> Result<ActivatedPrimitive> {
        let (mu, sigma) = effective_stats(stats)?;
        let r = self.rotation();
        let q = Quaternion::new(r[0], r[1], r[2], r[3]);
        if q.norm() == 0.0 {
            return Err(Error::RejectedInput("zero-norm quaternion".into()));
        }
        let s = self.scales();
        let mut sh = [0.0; SH_LEN];
        sh.copy_from_slice(self.sh());
        Ok(ActivatedPrimitive {
            position: Vector3::from_column_slice(self.position()),
            scale: Vector3::new(s[0], s[1], s[2]).map(|l| (l * sigma + mu).exp()),
            rotation: UnitQuaternion::from_quaternion(q),
            opacity: self.opacity(),
            sh,
        })
    }
}

fn effective_stats(stats: (f64, f64)) -> Result<(f64, f64)> {
    let (mu, sigma) = stats;
    if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::RejectedInput(format!("invalid scale stats ({mu}, {sigma})")));
    }
    Ok((mu, sigma.max(SCALE_STD_FLOOR)))
}

pub fn assemble_gaussian_feature(p: &ActivatedPrimitive, stats: (f64, f64)) -> Result<GaussianFeature> {
    let (mu, sigma) = effective_stats(stats)?;
    let mut f = [0.0; FEATURE_LEN];
    f[POSITION].copy_from_slice(p.position.as_slice());
    f[OPACITY.start] = p.opacity;
    for k in 0..3 {
        f[SCALES.start + k] = (p.scale[k].ln() - mu) / sigma;
    }
    let q = p.rotation.quaternion();
    f[ROTATION].copy_from_slice(&[q.w, q.i, q.j, q.k]);
    f[SH].copy_from_slice(&p.sh);
    Ok(GaussianFeature(f))
}

/// L = −(1/N) Σ log S(i, j) over the supervised entries.
pub fn nll_match_loss(s: &DMatrix<f64>, gt: &[(usize, usize)]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::EmptyInput("no ground-truth matches"));
    }
    let mut terms = Vec::with_capacity(gt.len());
    for &(i, j) in gt {
        if i >= s.nrows() || j >= s.ncols() {
            return Err(Error::Shape(format!(
                "match ({i}, {j}) outside {}x{} score matrix",
                s.nrows(),
                s.ncols()
            )));
        }
        let v = s[(i, j)];
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidProbability { row: i, col: j, value: v });
        }
        terms.push(-v.ln());
    }
    Ok(pairwise_sum(&terms) / gt.len() as f64)
}

/// Scales `v` to unit length.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::RejectedInput("cannot normalise a zero or non-finite embedding".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_unit(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Shape(format!("embedding of length {} where {dim} expected", v.len())));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::RejectedInput(format!("embedding norm {n} is not 1")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// −log(Σ_pos e^{s/τ} / Σ_Z e^{s/τ}) with Z = positives ∪ negatives. Terms
/// are summed in sorted order after subtracting the max logit.
fn info_nce(anchor: &[f64], positives: [&[f64]; 2], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let dim = anchor.len();
    check_unit(anchor, dim)?;
    for z in positives.iter().chain(negatives) {
        check_unit(z, dim)?;
    }
    let pos: Vec<f64> = positives.iter().map(|z| dot(anchor, z) / tau).collect();
    let mut all: Vec<f64> = pos.clone();
    all.extend(negatives.iter().map(|z| dot(anchor, z) / tau));
    let m = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut den: Vec<f64> = all.iter().map(|l| (l - m).exp()).collect();
    den.sort_by(f64::total_cmp);
    let mut num: Vec<f64> = pos.iter().map(|l| (l - m).exp()).collect();
    num.sort_by(f64::total_cmp);
    Ok(den.iter().sum::<f64>().ln() - num.iter().sum::<f64>().ln())
}

/// Voxel-anchored term: positives are the two patch embeddings.
pub fn infonce_voxel_loss(v: &[f64], q_a: &[f64], q_b: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    info_nce(v, [q_a, q_b], negatives, tau)
}

/// Patch-anchored term: positives are the voxel embedding and the other
/// view's patch embedding.
pub fn infonce_patch_loss(q: &[f64], v: &[f64], q_other: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    info_nce(q, [v, q_other], negatives, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePool {
    /// Only other anchors from the same scene.
    #[default]
    IntraScene,
    /// Every other anchor in the batch.
    CrossScene,
}

/// One matched point: voxel embedding and its two patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentAnchor {
    pub scene: usize,
    pub v: Vec<f64>,
    pub q_a: Vec<f64>,
    pub q_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoNceConfig {
    pub tau: f64,
    pub lambda_v: f64,
    pub lambda_q: f64,
    pub pool: NegativePool,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TEMPERATURE,
            lambda_v: DEFAULT_LAMBDA,
            lambda_q: DEFAULT_LAMBDA,
            pool: NegativePool::IntraScene,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoNceLoss {
    pub voxel: f64,
    pub patch: f64,
    pub total: f64,
}

/// λ_v · mean ℓ_voxel + λ_q · mean ½(ℓ_patchA + ℓ_patchB). Each anchor's
/// negatives are the v, q_A and q_B embeddings of every other anchor in its
/// pool.
pub fn combined_infonce(batch: &[AlignmentAnchor], cfg: &InfoNceConfig) -> Result<InfoNceLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("no alignment anchors"));
    }
    let per_anchor: Vec<(f64, f64)> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let a = &batch[i];
            let negatives: Vec<&[f64]> = batch
                .iter()
                .enumerate()
                .filter(|(j, b)| *j != i && (cfg.pool == NegativePool::CrossScene || b.scene == a.scene))
                .flat_map(|(_, b)| [b.v.as_slice(), b.q_a.as_slice(), b.q_b.as_slice()])
                .collect();
            let lv = infonce_voxel_loss(&a.v, &a.q_a, &a.q_b, &negatives, cfg.tau)?;
            let la = infonce_patch_loss(&a.q_a, &a.v, &a.q_b, &negatives, cfg.tau)?;
            let lb = infonce_patch_loss(&a.q_b, &a.v, &a.q_a, &negatives, cfg.tau)?;
            Ok((lv, 0.5 * (la + lb)))
        })
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let voxel = pairwise_sum(&per_anchor.iter().map(|p| p.0).collect::<Vec<_>>()) / n;
    let patch = pairwise_sum(&per_anchor.iter().map(|p| p.1).collect::<Vec<_>>()) / n;
    Ok(InfoNceLoss {
        voxel,
        patch,
        total: cfg.lambda_v * voxel + cfg.lambda_q * patch,
    })
}

/// First two columns of the rotation matrix, column-major.
pub fn quaternion_to_6d(q: &UnitQuaternion<f64>) -> [f64; 6] {
    let r = quaternion_matrix(q);
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// Gram–Schmidt reconstruction of a rotation from its 6D form.
pub fn rotation_from_6d(d: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a = Vector3::new(d[0], d[1], d[2]);
    let b = Vector3::new(d[3], d[4], d[5]);
    let c0 = a
        .try_normalize(1e-12)
        .ok_or_else(|| Error::RejectedInput("degenerate 6D rotation".into()))?;
    let c1 = (b - c0 * c0.dot(&b))
        .try_normalize(1e-12)
        .ok_or_else(|| Error::RejectedInput("degenerate 6D rotation".into()))?;
    let c2 = c0.cross(&c1);
    Ok(Matrix3::from_columns(&[c0, c1, c2]))
}

fn feature_rotation_6d(f: &GaussianFeature) -> Result<[f64; 6]> {
    let r = f.rotation();
    let q = Quaternion::new(r[0], r[1], r[2], r[3]);
    if !(q.norm() > 0.0) || !q.norm().is_finite() {
        return Err(Error::RejectedInput("zero-norm quaternion in feature".into()));
    }
    Ok(quaternion_to_6d(&UnitQuaternion::from_quaternion(q)))
}

/// Mean absolute difference per slice; rotation is compared in 6D.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceL1 {
    pub position: f64,
    pub opacity: f64,
    pub scales: f64,
    pub rotation: f64,
    pub sh: f64,
}

impl SliceL1 {
    pub fn sum(&self) -> f64 {
        self.position + self.opacity + self.scales + self.rotation + self.sh
    }

    fn average(a: &Self, b: &Self) -> Self {
        Self {
            position: 0.5 * (a.position + b.position),
            opacity: 0.5 * (a.opacity + b.opacity),
            scales: 0.5 * (a.scales + b.scales),
            rotation: 0.5 * (a.rotation + b.rotation),
            sh: 0.5 * (a.sh + b.sh),
        }
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn slice_l1(x: &GaussianFeature, y: &GaussianFeature) -> Result<SliceL1> {
    Ok(SliceL1 {
        position: mean_abs(x.position(), y.position()),
        opacity: (x.opacity() - y.opacity()).abs(),
        scales: mean_abs(x.scales(), y.scales()),
        rotation: mean_abs(&feature_rotation_6d(x)?, &feature_rotation_6d(y)?),
        sh: mean_abs(x.sh(), y.sh()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeLossConfig {
    pub regression_weight: f64,
    pub consistency_weight: f64,
    /// Include the cross-view consistency term.
    pub consistency: bool,
}

impl Default for AttributeLossConfig {
    fn default() -> Self {
        Self {
            regression_weight: 1.0,
            consistency_weight: 1.0,
            consistency: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeLoss {
    pub regression: f64,
    pub consistency: f64,
    pub total: f64,
    pub regression_slices: SliceL1,
    pub consistency_slices: SliceL1,
}

/// Regression: per-slice ℓ1 of each view's prediction against its ground
/// truth, averaged over the two views and summed over slices.
/// Consistency: per-slice ℓ1 between the two views' predictions (every
/// slice is view-invariant for a shared primitive), summed over slices.
pub fn attribute_loss(
    pred_a: &GaussianFeature,
    pred_b: &GaussianFeature,
    gt_a: &GaussianFeature,
    gt_b: &GaussianFeature,
    cfg: &AttributeLossConfig,
) -> Result<AttributeLoss> {
    let reg = SliceL1::average(&slice_l1(pred_a, gt_a)?, &slice_l1(pred_b, gt_b)?);
    let cons = if cfg.consistency {
        slice_l1(pred_a, pred_b)?
    } else {
        SliceL1::default()
    };
    let (regression, consistency) = (reg.sum(), cons.sum());
    Ok(AttributeLoss {
        regression,
        consistency,
        total: cfg.regression_weight * regression + cfg.consistency_weight * consistency,
        regression_slices: reg,
        consistency_slices: cons,
    })
}
