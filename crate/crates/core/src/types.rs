//! Scene, primitive and camera data model.
//!
//! Primitives are stored pre-activation (log scales, opacity logit, raw
//! quaternion), the same convention as the public 3DGS PLY layout. Call
//! [`GaussianPrimitive::activate`] to get working values.
//!
//! Quaternions are ordered `(w, x, y, z)`. SH coefficients are laid out
//! channel-major: `sh[c * 16 + k]` is coefficient `k` of colour channel `c`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

/// Number of SH coefficients per colour channel at degree 3.
pub const SH_COEFFS_PER_CHANNEL: usize = 16;
/// Total SH coefficients per primitive (3 channels).
pub const SH_LEN: usize = 3 * SH_COEFFS_PER_CHANNEL;
/// Scales at or below this are treated as a singular covariance.
pub const SCALE_FLOOR: f64 = 1e-12;
/// Border tolerance in pixels for in-image tests.
pub const PIXEL_EPS: f64 = 1e-9;

/// One stored Gaussian splat.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// `(w, x, y, z)`, not necessarily unit.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: [f64; SH_LEN],
}

/// A primitive with activations applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedPrimitive {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub sh: [f64; SH_LEN],
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianPrimitive {
    /// Builds a stored primitive from activated quantities.
    pub fn from_activated(
        position: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        opacity: f64,
        sh: [f64; SH_LEN],
    ) -> Self {
        let q = rotation.quaternion();
        Self {
            position,
            log_scale: scale.map(f64::ln),
            rotation: [q.w, q.i, q.j, q.k],
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn activate(&self) -> Result<ActivatedPrimitive> {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::RejectedInput("non-finite primitive field".into()));
        }
        let [w, x, y, z] = self.rotation;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if norm == 0.0 {
            return Err(Error::RejectedInput("zero-norm quaternion".into()));
        }
        // Already-unit quaternions pass through untouched so activation is idempotent.
        let rotation = if (norm - 1.0).abs() <= f64::EPSILON {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_unchecked(q / norm)
        };
        Ok(ActivatedPrimitive {
            position: self.position,
            scale: self.log_scale.map(f64::exp),
            rotation,
            opacity: sigmoid(self.opacity_logit),
            sh: self.sh,
        })
    }
}

impl ActivatedPrimitive {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quaternion_matrix(&self.rotation)
    }

    /// Σ = R S Sᵀ Rᵀ.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }

    /// Unnormalised 3D Gaussian `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
    pub fn evaluate(&self, x: &Vector3<f64>) -> Result<f64> {
        let min_scale = self.scale.min();
        if min_scale <= SCALE_FLOOR {
            return Err(Error::DegenerateCovariance(min_scale));
        }
        // Σ⁻¹ = R S⁻² Rᵀ, so the Mahalanobis term is |S⁻¹ Rᵀ (x-μ)|².
        let local = self.rotation_matrix().transpose() * (x - self.position);
        let m2: f64 = (0..3).map(|k| (local[k] / self.scale[k]).powi(2)).sum();
        Ok((-0.5 * m2).exp())
    }

    /// World-frame normal of the Gaussian plane: the rotation column of the
    /// smallest scale axis, ties resolved toward the lower axis index.
    pub fn plane_normal(&self) -> Vector3<f64> {
        let mut axis = 0;
        for k in 1..3 {
            if self.scale[k] < self.scale[axis] {
                axis = k;
            }
        }
        self.rotation_matrix().column(axis).into_owned()
    }

    pub fn to_stored(&self) -> GaussianPrimitive {
        GaussianPrimitive::from_activated(
            self.position,
            self.scale,
            self.rotation,
            self.opacity,
            self.sh,
        )
    }
}

/// Rotation matrix of a unit quaternion, expanded explicitly.
pub fn quaternion_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// An ordered set of primitives. Indices are identities: Gaussian maps refer
/// to primitives by position in `primitives`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianScene {
    pub scene_id: String,
    pub primitives: Vec<GaussianPrimitive>,
    /// `(μ, σ)` of the per-primitive log mean scale, when computed.
    pub scale_stats: Option<(f64, f64)>,
}

impl GaussianScene {
    pub fn new(scene_id: impl Into<String>, primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            scene_id: scene_id.into(),
            primitives,
            scale_stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn activate_all(&self) -> Result<Vec<ActivatedPrimitive>> {
        self.primitives.iter().map(|p| p.activate()).collect()
    }
}

/// Pinhole camera with a world-to-camera pose. Camera axes follow the
/// computer-vision convention: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation_wc: Matrix3<f64>,
    pub translation_wc: Vector3<f64>,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation_wc: Matrix3<f64>,
        translation_wc: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation_wc,
            translation_wc,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up
    /// direction (image y points opposite to it).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("look_at: eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("look_at: up is parallel to view direction".into()))?;
        let down = forward.cross(&right);
        // Rows of R_wc are the camera axes expressed in world coordinates.
        let rotation_wc = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation_wc = -(rotation_wc * eye);
        Self::new(
            fx,
            fy,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation_wc,
            translation_wc,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.rotation_wc.iter().all(|v| v.is_finite())
            && self.translation_wc.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::RejectedInput("non-finite camera field".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside image {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let r = &self.rotation_wc;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "rotation_wc must be orthonormal with determinant +1".into(),
            ));
        }
        Ok(())
    }

    /// R_c = R_wcᵀ.
    pub fn rotation_cw(&self) -> Matrix3<f64> {
        self.rotation_wc.transpose()
    }

    /// T_c = -R_wcᵀ t_wc.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_wc.transpose() * self.translation_wc)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_wc * p + self.translation_wc
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_wc.transpose() * (p - self.translation_wc)
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// K⁻¹ p̃ for pixel `(u, v)`; the z component is 1.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Perspective projection of a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Camera-frame point at z-depth `depth` along pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        self.pixel_ray(u, v) * depth
    }

    /// Pixel centres sit at integer coordinates, so the image spans
    /// `[0, width-1] × [0, height-1]`, widened by [`PIXEL_EPS`] to absorb
    /// rounding on the border.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= -PIXEL_EPS
            && p.y >= -PIXEL_EPS
            && p.x <= (self.width - 1) as f64 + PIXEL_EPS
            && p.y <= (self.height - 1) as f64 + PIXEL_EPS
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Unit;
    use std::f64::consts::FRAC_PI_2;

    fn prim(log_scale: [f64; 3], rotation: [f64; 4]) -> GaussianPrimitive {
        GaussianPrimitive {
            position: Vector3::zeros(),
            log_scale: Vector3::from(log_scale),
            rotation,
            opacity_logit: 0.0,
            sh: [0.0; SH_LEN],
        }
    }

    fn activated(scale: [f64; 3], rotation: UnitQuaternion<f64>) -> ActivatedPrimitive {
        ActivatedPrimitive {
            position: Vector3::zeros(),
            scale: Vector3::from(scale),
            rotation,
            opacity: 0.5,
            sh: [0.0; SH_LEN],
        }
    }

    #[test]
    fn activation_examples() {
        let a = prim([0.0; 3], [2.0, 0.0, 0.0, 0.0]).activate().unwrap();
        assert_eq!(a.scale, Vector3::new(1.0, 1.0, 1.0));
        assert_eq!(a.opacity, 0.5);
        let q = a.rotation.quaternion();
        assert_eq!([q.w, q.i, q.j, q.k], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_rejects_non_finite() {
        let mut p = prim([0.0; 3], [1.0, 0.0, 0.0, 0.0]);
        p.sh[5] = f64::NAN;
        assert!(matches!(p.activate(), Err(Error::RejectedInput(_))));
        let p = prim([0.0; 3], [0.0; 4]);
        assert!(matches!(p.activate(), Err(Error::RejectedInput(_))));
    }

    #[test]
    fn activation_is_idempotent_on_unit_quaternions() {
        let p = prim([0.1, -0.3, 0.2], [0.3, -0.2, 0.9, 0.1]);
        let a = p.activate().unwrap();
        let again = a.to_stored().activate().unwrap();
        assert_eq!(a.rotation, again.rotation);
        assert_relative_eq!(a.scale, again.scale, epsilon = 1e-15);
        assert_relative_eq!(a.opacity, again.opacity, epsilon = 1e-15);
    }

    #[test]
    fn covariance_examples() {
        let a = activated([1.0, 2.0, 3.0], UnitQuaternion::identity());
        assert_eq!(a.covariance(), Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));

        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let a = activated([1.0, 2.0, 1.0], rz);
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert_relative_eq!(a.covariance(), expected, epsilon = 1e-12);
        assert_eq!(a.covariance(), a.covariance().transpose());
    }

    #[test]
    fn gaussian_values() {
        let a = activated([1.0; 3], UnitQuaternion::identity());
        assert_eq!(a.evaluate(&Vector3::zeros()).unwrap(), 1.0);
        assert_relative_eq!(
            a.evaluate(&Vector3::new(0.0, 1.0, 0.0)).unwrap(),
            0.606530659712633,
            epsilon = 1e-12
        );
        let b = activated([2.0; 3], UnitQuaternion::identity());
        assert_relative_eq!(
            b.evaluate(&Vector3::new(0.0, 0.0, 2.0)).unwrap(),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        let flat = activated([1.0, 1.0, 1e-13], UnitQuaternion::identity());
        assert!(matches!(
            flat.evaluate(&Vector3::zeros()),
            Err(Error::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn plane_normals() {
        let a = activated([1.0, 1.0, 0.1], UnitQuaternion::identity());
        assert_eq!(a.plane_normal(), Vector3::new(0.0, 0.0, 1.0));

        let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), FRAC_PI_2);
        let a = activated([1.0, 0.1, 1.0], rx);
        assert_relative_eq!(a.plane_normal(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);

        let a = activated([0.1, 0.1, 1.0], UnitQuaternion::identity());
        assert_eq!(a.plane_normal(), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn quaternion_matrix_matches_nalgebra() {
        let q = UnitQuaternion::from_axis_angle(
            &Unit::new_normalize(Vector3::new(0.3, -1.0, 0.4)),
            0.77,
        );
        assert_relative_eq!(
            quaternion_matrix(&q),
            *q.to_rotation_matrix().matrix(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn camera_validation_and_geometry() {
        let cam = CameraModel::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            50.0,
            50.0,
            64,
            48,
        )
        .unwrap();
        assert_relative_eq!(cam.center(), Vector3::new(0.0, 0.0, -3.0), epsilon = 1e-12);
        let p = cam.project_camera(&cam.world_to_camera(&Vector3::zeros()));
        assert_relative_eq!(p.x, cam.cx, epsilon = 1e-12);
        assert_relative_eq!(p.y, cam.cy, epsilon = 1e-12);
        assert_relative_eq!(cam.intrinsics() * cam.intrinsics_inv(), Matrix3::identity(), epsilon = 1e-14);

        let mut bad = cam.clone();
        bad.rotation_wc[(0, 0)] = 2.0;
        assert!(bad.validate().is_err());
        let mut bad = cam.clone();
        bad.cx = 64.0;
        assert!(bad.validate().is_err());
        let mut bad = cam;
        bad.fx = 0.0;
        assert!(bad.validate().is_err());
    }
}
