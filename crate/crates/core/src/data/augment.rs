//! Random affine augmentation: rotation about the center, translation and
//! zoom, resampled with nearest neighbour. There is deliberately no mirroring:
//! glyphs are chiral and dot placement carries meaning.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub max_rotation_deg: f64,
    /// Maximum shift per axis as a fraction of that axis' extent.
    pub max_translate_frac: f64,
    /// `(lo, hi)` with `lo <= 1 <= hi`.
    pub zoom_range: (f64, f64),
    pub enabled: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            max_rotation_deg: 10.0,
            max_translate_frac: 0.1,
            zoom_range: (0.9, 1.1),
            enabled: true,
        }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        AugmentParams {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom_range;
        if !(self.max_rotation_deg >= 0.0) || !(self.max_translate_frac >= 0.0) {
            return Err(Error::InvalidArgument("augmentation magnitudes must be >= 0".into()));
        }
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("zoom range ({lo}, {hi}) must bracket 1")));
        }
        Ok(())
    }
}

/// Median of the four corner pixels, per channel.
fn corner_background(img: &Tensor<f32>) -> Vec<f32> {
    let d = img.dims();
    let (h, w, c) = (d[0], d[1], d[2]);
    let px = img.data();
    (0..c)
        .map(|ch| {
            let mut v = [
                px[ch],
                px[(w - 1) * c + ch],
                px[((h - 1) * w) * c + ch],
                px[((h - 1) * w + w - 1) * c + ch],
            ];
            v.sort_by(f32::total_cmp);
            (v[1] + v[2]) / 2.0
        })
        .collect()
}

/// Applies one random affine transform to an `[H, W, C]` image.
pub fn augment(img: &Tensor<f32>, p: &AugmentParams, rng: &mut Rng) -> Result<Tensor<f32>> {
    let &[h, w, c] = img.dims() else {
        return Err(Error::Shape(format!("augment expects [H, W, C], got {}", img.shape())));
    };
    if !p.enabled {
        return Ok(img.clone());
    }
    let max_rot = p.max_rotation_deg.to_radians();
    let theta = rng.uniform_range(-max_rot, max_rot);
    let tx = rng.uniform_range(-p.max_translate_frac, p.max_translate_frac) * w as f64;
    let ty = rng.uniform_range(-p.max_translate_frac, p.max_translate_frac) * h as f64;
    let zoom = rng.uniform_range(p.zoom_range.0, p.zoom_range.1);

    let background = corner_background(img);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = theta.sin_cos();
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            // Invert output = center + zoom * R * (input - center) + shift.
            let dx = (x as f64 + 0.5 - cx - tx) / zoom;
            let dy = (y as f64 + 0.5 - cy - ty) / zoom;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let (ix, iy) = (sx.floor(), sy.floor());
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                let base = (iy as usize * w + ix as usize) * c;
                out.extend_from_slice(&src[base..base + c]);
            } else {
                out.extend_from_slice(&background);
            }
        }
    }
    Tensor::new(img.dims().to_vec(), out)
}
