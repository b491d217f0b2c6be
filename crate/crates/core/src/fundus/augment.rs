use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rng_from_seed, FundusImage};

/// One concrete draw of the training-time geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Counter-clockwise rotation about the image centre, degrees.
    pub rotation_deg: f64,
    pub flip: bool,
    /// Uniform scale factor.
    pub scale: f64,
    /// Horizontal shift as a fraction of the width.
    pub shift_frac: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        flip: false,
        scale: 1.0,
        shift_frac: 0.0,
    };

    /// Rotation in `[0, 360)`, flip with probability 0.5, scale in
    /// `[0.9, 1.1]`, width shift in `[-10%, +10%]`, drawn in that order.
    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentParams {
            rotation_deg: rng.random_range(0.0..360.0),
            flip: rng.random_bool(0.5),
            scale: rng.random_range(0.9..=1.1),
            shift_frac: rng.random_range(-0.1..=0.1),
        }
    }
}

/// Applies a seed-derived random augmentation.
pub fn augment(img: &FundusImage, seed: u64) -> FundusImage {
    let params = AugmentParams::sample(&mut rng_from_seed(seed));
    augment_with(img, &params)
}

/// Warps `img` by flip, scale and rotation about the centre followed by a
/// horizontal shift. Sampling is bilinear; pixels mapping outside the source
/// are black.
pub fn augment_with(img: &FundusImage, params: &AugmentParams) -> FundusImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let shift = params.shift_frac * w as f64;
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let src = img.pixels();
    let mut out = vec![0u8; w * h * 3];

    for y in 0..h {
        for x in 0..w {
            // inverse map of the pixel centre, in continuous area coordinates
            let dx = x as f64 + 0.5 - cx - shift;
            let dy = y as f64 + 0.5 - cy;
            let rx = (cos * dx + sin * dy) / params.scale;
            let ry = (-sin * dx + cos * dy) / params.scale;
            let sx = if params.flip { -rx } else { rx } + cx;
            let sy = ry + cy;
            if !(0.0..w as f64).contains(&sx) || !(0.0..h as f64).contains(&sy) {
                continue;
            }
            let (x0, x1, fx) = neighbours(sx - 0.5, w);
            let (y0, y1, fy) = neighbours(sy - 0.5, h);
            let dst = &mut out[(y * w + x) * 3..(y * w + x) * 3 + 3];
            for (c, d) in dst.iter_mut().enumerate() {
                let p = |xx: usize, yy: usize| f64::from(src[(yy * w + xx) * 3 + c]);
                let top = p(x0, y0) + fx * (p(x1, y0) - p(x0, y0));
                let bottom = p(x0, y1) + fx * (p(x1, y1) - p(x0, y1));
                *d = (top + fy * (bottom - top)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    FundusImage::new(img.width(), img.height(), out, img.source_id()).expect("same dimensions")
}

fn neighbours(pos: f64, extent: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (extent - 1) as f64);
    let i0 = pos.floor() as usize;
    (i0, (i0 + 1).min(extent - 1), pos - i0 as f64)
}
