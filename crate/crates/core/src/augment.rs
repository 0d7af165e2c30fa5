//! Online geometric augmentation.
//!
//! A sampled [`AugmentationParams`] describes one affine map about the image
//! center, built as reflect, then scale, then rotate, then shear along x, then
//! translate. [`apply_augmentation`] pulls every output pixel back through the
//! inverse map and samples the source bilinearly, reading zero outside.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbcit_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::AugmentRanges;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub scale: f64,
    /// `(dx, dy)` in pixels; positive values move content right and down.
    pub translate_px: (f64, f64),
    pub reflect_x: bool,
    pub reflect_y: bool,
}

impl AugmentationParams {
    pub const IDENTITY: AugmentationParams = AugmentationParams {
        rotation_deg: 0.0,
        shear_deg: 0.0,
        scale: 1.0,
        translate_px: (0.0, 0.0),
        reflect_x: false,
        reflect_y: false,
    };

    /// True when every field lies inside `ranges`.
    pub fn within(&self, ranges: &AugmentRanges) -> bool {
        let r = ranges;
        self.rotation_deg.abs() <= r.rotation_deg
            && (0.0..=r.shear_max_deg).contains(&self.shear_deg)
            && (r.scale_min..=r.scale_max).contains(&self.scale)
            && self.translate_px.0.abs() <= r.translate_px
            && self.translate_px.1.abs() <= r.translate_px
            && (r.reflect || !(self.reflect_x || self.reflect_y))
    }

    /// Forward 2×2 linear part acting on centered `(x, y)` coordinates.
    fn linear(&self) -> [[f64; 2]; 2] {
        let fx = if self.reflect_x { -1.0 } else { 1.0 };
        let fy = if self.reflect_y { -1.0 } else { 1.0 };
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let shear = self.shear_deg.to_radians().tan();
        let s = self.scale;
        // rotation · diag(s·fx, s·fy)
        let rs = [[cos * s * fx, -sin * s * fy], [sin * s * fx, cos * s * fy]];
        // shear along x: [[1, k], [0, 1]] · rs
        [
            [rs[0][0] + shear * rs[1][0], rs[0][1] + shear * rs[1][1]],
            [rs[1][0], rs[1][1]],
        ]
    }
}

/// Draws parameters uniformly from `ranges`; each reflection is an
/// independent fair coin when reflection is enabled.
pub fn sample_augmentation<R: Rng + ?Sized>(rng: &mut R, ranges: &AugmentRanges) -> AugmentationParams {
    let mut sym = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let rotation_deg = sym(ranges.rotation_deg);
    let tx = sym(ranges.translate_px);
    let ty = sym(ranges.translate_px);
    let shear_deg = if ranges.shear_max_deg > 0.0 {
        rng.random_range(0.0..=ranges.shear_max_deg)
    } else {
        0.0
    };
    let scale = if ranges.scale_max > ranges.scale_min {
        rng.random_range(ranges.scale_min..=ranges.scale_max)
    } else {
        ranges.scale_min
    };
    let (reflect_x, reflect_y) = if ranges.reflect {
        (rng.random::<bool>(), rng.random::<bool>())
    } else {
        (false, false)
    };
    AugmentationParams {
        rotation_deg,
        shear_deg,
        scale,
        translate_px: (tx, ty),
        reflect_x,
        reflect_y,
    }
}

/// Warps every channel of a `[C, H, W]` image with `params`.
pub fn apply_augmentation(image: &Tensor<f32>, params: &AugmentationParams) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[1] < 8 || s[2] < 8 {
        return Err(Error::Data(format!("augmentation needs a [C, H, W] image with H, W ≥ 8, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let m = params.linear();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-12 {
        return Err(Error::Data("augmentation map is singular".into()));
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = params.translate_px;
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for oy in 0..h {
        for ox in 0..w {
            let u = ox as f64 - cx - tx;
            let v = oy as f64 - cy - ty;
            let sx = inv[0][0] * u + inv[0][1] * v + cx;
            let sy = inv[1][0] * u + inv[1][1] * v + cy;
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                out[(ch * h + oy) * w + ox] = bilinear(plane, h, w, sx, sy) as f32;
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

/// `count` independently augmented copies of `image`, drawn from a
/// generator seeded with `seed`.
pub fn augment_variants(
    image: &Tensor<f32>,
    ranges: &AugmentRanges,
    count: usize,
    seed: u64,
) -> Result<Vec<(AugmentationParams, Tensor<f32>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let p = sample_augmentation(&mut rng, ranges);
            Ok((p, apply_augmentation(image, &p)?))
        })
        .collect()
}

/// Bilinear sample of a single plane at `(x, y)`, zero outside.
pub(crate) fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let mut acc = (1.0 - fx) * (1.0 - fy) * at(y0, x0);
    if fx != 0.0 {
        acc += fx * (1.0 - fy) * at(y0, x0 + 1.0);
    }
    if fy != 0.0 {
        acc += (1.0 - fx) * fy * at(y0 + 1.0, x0);
        if fx != 0.0 {
            acc += fx * fy * at(y0 + 1.0, x0 + 1.0);
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![c, h, w], |i| ((i * 31 % 97) as f32) / 97.0)
    }

    fn max_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn identity_reproduces_input() {
        let x = ramp(2, 12, 9);
        let y = apply_augmentation(&x, &AugmentationParams::IDENTITY).unwrap();
        assert!(max_diff(&x, &y) <= 1e-6);
    }

    #[test]
    fn translation_moves_an_impulse() {
        let mut data = vec![0.0f32; 16 * 16];
        data[5 * 16 + 4] = 1.0;
        let x = Tensor::new(vec![1, 16, 16], data).unwrap();
        let p = AugmentationParams {
            translate_px: (2.0, 0.0),
            ..AugmentationParams::IDENTITY
        };
        let y = apply_augmentation(&x, &p).unwrap();
        assert_eq!(y.data()[5 * 16 + 6], 1.0);
        assert_eq!(y.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn reflections_are_involutions() {
        let x = ramp(1, 10, 13);
        for (rx, ry) in [(true, false), (false, true), (true, true)] {
            let p = AugmentationParams {
                reflect_x: rx,
                reflect_y: ry,
                ..AugmentationParams::IDENTITY
            };
            let once = apply_augmentation(&x, &p).unwrap();
            assert!(max_diff(&x, &once) > 0.01);
            let twice = apply_augmentation(&once, &p).unwrap();
            assert!(max_diff(&x, &twice) <= 1e-6);
        }
    }

    #[test]
    fn horizontal_reflection_mirrors_columns() {
        let x = ramp(1, 8, 8);
        let p = AugmentationParams {
            reflect_x: true,
            ..AugmentationParams::IDENTITY
        };
        let y = apply_augmentation(&x, &p).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(y.data()[r * 8 + c], x.data()[r * 8 + 7 - c]);
            }
        }
    }

    #[test]
    fn samples_stay_in_range_and_repeat_under_a_seed() {
        let ranges = AugmentRanges::default();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = sample_augmentation(&mut a, &ranges);
            assert!(p.within(&ranges), "{p:?}");
            assert_eq!(p, sample_augmentation(&mut b, &ranges));
        }
    }

    #[test]
    fn variants_repeat_under_a_seed() {
        let x = ramp(1, 16, 16);
        let ranges = AugmentRanges::default();
        let a = augment_variants(&x, &ranges, 3, 5).unwrap();
        let b = augment_variants(&x, &ranges, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].0, a[1].0);
    }

    #[test]
    fn small_images_are_rejected() {
        let x = Tensor::zeros(vec![1, 7, 8]);
        assert!(apply_augmentation(&x, &AugmentationParams::IDENTITY).is_err());
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ramp(3, 20, 16);
        let p = sample_augmentation(&mut rng, &AugmentRanges::default());
        assert_eq!(apply_augmentation(&x, &p).unwrap().shape(), x.shape());
    }
}
