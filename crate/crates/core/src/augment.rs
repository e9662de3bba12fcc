//! Photometric augmentations for rendered RGB images.
//!
//! Ops run in a fixed order (colour jitter, gamma, motion blur, ISO noise),
//! each drawing its parameters from one seeded stream, and every op clamps
//! its output to `[0, 1]`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, RgbImage};

/// Closed interval a parameter is drawn from uniformly.
pub type Range = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    /// Per-channel multiplicative gain.
    pub gain: Range,
    /// Per-channel additive offset.
    pub bias: Range,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentRecipe {
    pub color_jitter: Option<ColorJitter>,
    /// Exponent γ in v ↦ v^γ.
    pub gamma: Option<Range>,
    /// Kernel length in pixels, drawn as an integer in the range.
    pub motion_blur: Option<(usize, usize)>,
    /// Noise std at unit luminance; the per-pixel std is `σ·√Y`.
    pub iso_noise: Option<Range>,
}

fn check_range(name: &str, r: Range, min: f64) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 && r.0 >= min) {
        return Err(Error::Config(format!("{name} range {r:?} is invalid")));
    }
    Ok(())
}

impl AugmentRecipe {
    pub fn validate(&self) -> Result<()> {
        if let Some(j) = &self.color_jitter {
            check_range("color jitter gain", j.gain, 0.0)?;
            check_range("color jitter bias", j.bias, f64::NEG_INFINITY)?;
        }
        if let Some(g) = self.gamma {
            check_range("gamma", g, f64::MIN_POSITIVE)?;
        }
        if let Some((lo, hi)) = self.motion_blur {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("motion blur length range ({lo}, {hi}) is invalid")));
            }
        }
        if let Some(n) = self.iso_noise {
            check_range("iso noise", n, 0.0)?;
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.color_jitter.is_none() && self.gamma.is_none() && self.motion_blur.is_none() && self.iso_noise.is_none()
    }
}

fn draw(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..=r.1)
    }
}

fn clamp01(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| v.clamp(0.0, 1.0))
}

pub fn luminance(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn sample_clamped(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 3];
    for (px, py, w) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if w == 0.0 {
            continue;
        }
        let v = img.get(px, py);
        for c in 0..3 {
            out[c] += w * v[c];
        }
    }
    out
}

/// Averages `length` bilinear taps spaced one pixel apart along direction
/// `angle`, centred on each pixel. Borders clamp.
pub fn motion_blur(img: &RgbImage, length: usize, angle: f64) -> RgbImage {
    if length <= 1 || img.is_empty() {
        return img.clone();
    }
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = (length as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = [0.0; 3];
            for k in 0..length {
                let t = k as f64 - half;
                let s = sample_clamped(img, x as f64 + t * dx, y as f64 + t * dy);
                for c in 0..3 {
                    acc[c] += s[c];
                }
            }
            out.set(x, y, clamp01(acc.map(|v| v / length as f64)));
        }
    }
    out
}

/// Applies `recipe` deterministically under `seed`.
pub fn augment_image(img: &RgbImage, recipe: &AugmentRecipe, seed: u64) -> Result<RgbImage> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: RgbImage = img.map(clamp01);

    if let Some(j) = &recipe.color_jitter {
        let gain = [0; 3].map(|_| draw(&mut rng, j.gain));
        let bias = [0; 3].map(|_| draw(&mut rng, j.bias));
        out = out.map(|p| clamp01([0, 1, 2].map(|c| gain[c] * p[c] + bias[c])));
    }
    if let Some(g) = recipe.gamma {
        let gamma = draw(&mut rng, g);
        out = out.map(|p| clamp01(p.map(|v| v.powf(gamma))));
    }
    if let Some((lo, hi)) = recipe.motion_blur {
        let length = rng.gen_range(lo..=hi);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        out = motion_blur(&out, length, angle);
    }
    if let Some(n) = recipe.iso_noise {
        let sigma = draw(&mut rng, n);
        let mut noisy = Image::filled(out.width, out.height, [0.0; 3]);
        for (dst, p) in noisy.data.iter_mut().zip(&out.data) {
            let std = sigma * luminance(*p).max(0.0).sqrt();
            let mut q = *p;
            for v in q.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std * z;
            }
            *dst = clamp01(q);
        }
        out = noisy;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> RgbImage {
        Image::from_vec(
            5,
            4,
            (0..20).map(|i| [i as f64 / 19.0, 0.25, 1.0 - i as f64 / 19.0]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn neutral_recipe_is_identity() {
        let r = AugmentRecipe {
            color_jitter: Some(ColorJitter {
                gain: (1.0, 1.0),
                bias: (0.0, 0.0),
            }),
            gamma: Some((1.0, 1.0)),
            motion_blur: Some((1, 1)),
            iso_noise: Some((0.0, 0.0)),
        };
        let img = ramp();
        assert_eq!(augment_image(&img, &r, 9).unwrap(), img);
    }

    #[test]
    fn gamma_value() {
        let img = Image::filled(1, 1, [0.25; 3]);
        let r = AugmentRecipe {
            gamma: Some((2.0, 2.0)),
            ..Default::default()
        };
        assert_eq!(augment_image(&img, &r, 0).unwrap().data[0], [0.0625; 3]);
    }

    #[test]
    fn seeded_and_clamped() {
        let r = AugmentRecipe {
            color_jitter: Some(ColorJitter {
                gain: (0.5, 1.5),
                bias: (-0.2, 0.2),
            }),
            gamma: Some((0.5, 2.0)),
            motion_blur: Some((1, 7)),
            iso_noise: Some((0.0, 0.3)),
        };
        let img = ramp();
        let a = augment_image(&img, &r, 5).unwrap();
        assert_eq!(a, augment_image(&img, &r, 5).unwrap());
        assert_ne!(a, augment_image(&img, &r, 6).unwrap());
        assert!(a.data.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_preserves_constant_and_rejects_bad_ranges() {
        let flat = Image::filled(6, 6, [0.3, 0.6, 0.9]);
        let b = motion_blur(&flat, 5, 0.7);
        for p in &b.data {
            for (x, y) in p.iter().zip([0.3, 0.6, 0.9]) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        let bad = AugmentRecipe {
            gamma: Some((2.0, 1.0)),
            ..Default::default()
        };
        assert!(matches!(augment_image(&flat, &bad, 0), Err(Error::Config(_))));
        let bad = AugmentRecipe {
            motion_blur: Some((0, 3)),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
