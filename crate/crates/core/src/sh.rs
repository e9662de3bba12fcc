//! Degree-3 real spherical harmonics colour evaluation.
//!
//! Basis constants and sign conventions follow the reference 3DGS
//! rasterizer so that PLY files trained there decode to the same colours.

use nalgebra::Vector3;

use crate::types::{SH_COEFFS_PER_CHANNEL, SH_LEN};

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// The 16 basis values for a unit direction, in coefficient order.
pub fn sh_basis(dir: &Vector3<f64>) -> [f64; SH_COEFFS_PER_CHANNEL] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// View-dependent RGB: `Σ sh·Y + 0.5` per channel, clamped to `[0, 1]`.
pub fn eval_sh_color(sh: &[f64; SH_LEN], view_dir: &Vector3<f64>) -> [f64; 3] {
    let basis = sh_basis(view_dir);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let coeffs = &sh[c * SH_COEFFS_PER_CHANNEL..(c + 1) * SH_COEFFS_PER_CHANNEL];
        let v: f64 = coeffs.iter().zip(basis.iter()).map(|(a, b)| a * b).sum();
        *out = (v + 0.5).clamp(0.0, 1.0);
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    /// Real SH written from the normalisation constants directly, with the
    /// reference sign convention (odd-m terms negated).
    fn basis_oracle(d: &Vector3<f64>) -> [f64; 16] {
        let (x, y, z) = (d.x, d.y, d.z);
        let k = |num: f64, den: f64| (num / (den * PI)).sqrt();
        [
            0.5 * k(1.0, 1.0),
            -0.5 * k(3.0, 1.0) * y,
            0.5 * k(3.0, 1.0) * z,
            -0.5 * k(3.0, 1.0) * x,
            0.5 * k(15.0, 1.0) * x * y,
            -0.5 * k(15.0, 1.0) * y * z,
            0.25 * k(5.0, 1.0) * (2.0 * z * z - x * x - y * y),
            -0.5 * k(15.0, 1.0) * x * z,
            0.25 * k(15.0, 1.0) * (x * x - y * y),
            -0.25 * k(35.0, 2.0) * y * (3.0 * x * x - y * y),
            0.5 * k(105.0, 1.0) * x * y * z,
            -0.25 * k(21.0, 2.0) * y * (4.0 * z * z - x * x - y * y),
            0.25 * k(7.0, 1.0) * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y),
            -0.25 * k(21.0, 2.0) * x * (4.0 * z * z - x * x - y * y),
            0.25 * k(105.0, 1.0) * z * (x * x - y * y),
            -0.25 * k(35.0, 2.0) * x * (x * x - 3.0 * y * y),
        ]
    }

    #[test]
    fn basis_matches_analytic_table() {
        for d in [
            Vector3::new(0.3, -0.5, 0.8),
            Vector3::new(-1.0, 0.2, 0.1),
            Vector3::new(0.0, 0.0, 1.0),
        ] {
            let d = d.normalize();
            let got = sh_basis(&d);
            let want = basis_oracle(&d);
            for k in 0..16 {
                assert_relative_eq!(got[k], want[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dc_only_color() {
        let mut sh = [0.0; SH_LEN];
        sh[0] = 1.0;
        sh[16] = -0.5;
        sh[32] = 10.0;
        let rgb = eval_sh_color(&sh, &Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(rgb[0], 0.2820947918 + 0.5, epsilon = 1e-10);
        assert_relative_eq!(rgb[1], -0.5 * 0.2820947918 + 0.5, epsilon = 1e-10);
        assert_eq!(rgb[2], 1.0);
        let other = eval_sh_color(&sh, &Vector3::new(0.6, 0.0, -0.8));
        assert_eq!(rgb, other);
    }

    #[test]
    fn zero_coefficients_are_gray() {
        let sh = [0.0; SH_LEN];
        for d in [Vector3::x(), Vector3::new(0.0, -0.6, 0.8)] {
            assert_eq!(eval_sh_color(&sh, &d), [0.5; 3]);
        }
    }
}
