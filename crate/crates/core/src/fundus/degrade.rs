//! Capture-defect simulation: light transmission disturbance, blur and
//! retinal artifacts, and the 2^3 on/off expansion of a corpus.
//!
//! Every operator is a pure function of `(image, seed, params)`. Ranges in
//! the parameter structs are closed intervals sampled uniformly; a range with
//! equal ends pins the value.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, rng_from_seed, FundusImage};
use crate::error::{Error, Result};

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Radial gain field `clamp(a + b * exp(-r^2 / 2 sigma^2), 0.2, 1.8)` plus a global offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightParams {
    /// Base gain `a`.
    pub base_gain: (f64, f64),
    /// Peak gain `b` at the field centre; negative darkens.
    pub peak_gain: (f64, f64),
    /// `sigma` as a fraction of the smaller image side.
    pub sigma_frac: (f64, f64),
    /// Additive intensity offset.
    pub offset: (f64, f64),
    /// Range for the field centre, as fractions of width/height.
    pub center_frac: (f64, f64),
}

impl Default for LightParams {
    fn default() -> Self {
        LightParams {
            base_gain: (0.75, 1.05),
            peak_gain: (-0.45, 0.35),
            sigma_frac: (0.2, 0.6),
            offset: (-25.0, 15.0),
            center_frac: (0.15, 0.85),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    /// Gaussian standard deviation in pixels.
    pub sigma: (f64, f64),
}

impl Default for BlurParams {
    fn default() -> Self {
        BlurParams { sigma: (1.0, 3.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactParams {
    /// Inclusive range for the number of blobs.
    pub count: (u32, u32),
    /// Blob radius as a fraction of the smaller image side.
    pub radius_frac: (f64, f64),
    /// Minor/major axis ratio of the ellipse.
    pub aspect: (f64, f64),
    /// Peak opacity; capped at 0.7.
    pub alpha: (f64, f64),
}

impl Default for ArtifactParams {
    fn default() -> Self {
        ArtifactParams {
            count: (2, 6),
            radius_frac: (0.02, 0.08),
            aspect: (0.5, 1.0),
            alpha: (0.3, 0.7),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub light: LightParams,
    pub blur: BlurParams,
    pub artifacts: ArtifactParams,
}

/// Three-bit code of which degradations were applied: `light*4 + blur*2 + artifacts`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DegradationCode(u8);

impl DegradationCode {
    pub const NONE: DegradationCode = DegradationCode(0);

    pub fn new(code: u8) -> Result<Self> {
        if code < 8 {
            Ok(DegradationCode(code))
        } else {
            Err(Error::Manifest(format!("degradation code {code} outside 0..=7")))
        }
    }

    pub fn from_flags(light: bool, blur: bool, artifacts: bool) -> Self {
        DegradationCode(u8::from(light) * 4 + u8::from(blur) * 2 + u8::from(artifacts))
    }

    pub fn all() -> impl Iterator<Item = DegradationCode> {
        (0..8).map(DegradationCode)
    }

    pub fn value(self) -> u8 {
        self.0
    }
    pub fn light(self) -> bool {
        self.0 & 4 != 0
    }
    pub fn blur(self) -> bool {
        self.0 & 2 != 0
    }
    pub fn artifacts(self) -> bool {
        self.0 & 1 != 0
    }
}

impl TryFrom<u8> for DegradationCode {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        DegradationCode::new(v)
    }
}

impl From<DegradationCode> for u8 {
    fn from(c: DegradationCode) -> u8 {
        c.0
    }
}

fn map_pixels(img: &FundusImage, pixels: Vec<u8>) -> FundusImage {
    FundusImage::new(img.width(), img.height(), pixels, img.source_id()).expect("same dimensions")
}

/// Multiplies intensities by a smooth radial gain field, adds an offset and clamps.
pub fn degrade_light(img: &FundusImage, seed: u64, params: &LightParams) -> FundusImage {
    let mut rng = rng_from_seed(seed);
    let (w, h) = (img.width() as f64, img.height() as f64);
    let a = uniform(&mut rng, params.base_gain);
    let b = uniform(&mut rng, params.peak_gain);
    let sigma = uniform(&mut rng, params.sigma_frac) * w.min(h);
    let offset = uniform(&mut rng, params.offset);
    let cx = uniform(&mut rng, params.center_frac) * w;
    let cy = uniform(&mut rng, params.center_frac) * h;
    let two_sigma_sq = 2.0 * sigma * sigma;

    let width = img.width() as usize;
    let mut out = img.pixels().to_vec();
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        let x = (i % width) as f64 + 0.5 - cx;
        let y = (i / width) as f64 + 0.5 - cy;
        let gain = (a + b * (-(x * x + y * y) / two_sigma_sq).exp()).clamp(0.2, 1.8);
        for v in px {
            *v = (f64::from(*v) * gain + offset).round().clamp(0.0, 255.0) as u8;
        }
    }
    map_pixels(img, out)
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with edge-replicate padding.
pub fn degrade_blur(img: &FundusImage, seed: u64, params: &BlurParams) -> FundusImage {
    let sigma = uniform(&mut rng_from_seed(seed), params.sigma);
    gaussian_blur(img, sigma)
}

pub(crate) fn gaussian_blur(img: &FundusImage, sigma: f64) -> FundusImage {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let src = img.pixels();
    let idx = |x: i64, y: i64, c: usize| ((y * w + x) * 3) as usize + c;

    let mut horizontal = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                horizontal[idx(x, y, c)] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * f64::from(src[idx((x + k as i64 - radius).clamp(0, w - 1), y, c)]))
                    .sum();
            }
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &wt)| wt * horizontal[idx(x, (y + k as i64 - radius).clamp(0, h - 1), c)])
                    .sum();
                out[idx(x, y, c)] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    map_pixels(img, out)
}

/// One soft elliptical dust/reflection blob.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactBlob {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes of the opaque core, pixels.
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub alpha: f64,
    pub color: [u8; 3],
}

impl ArtifactBlob {
    /// The blob's opacity falls off as a Gaussian of the normalized elliptical
    /// distance and is cut to zero beyond this many radii.
    pub const SUPPORT: f64 = 2.0;

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the blob's support, clipped to the image.
    pub fn bounding_box(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let (sin, cos) = self.angle.sin_cos();
        let (ax, ay) = (self.rx * Self::SUPPORT, self.ry * Self::SUPPORT);
        let hx = ((ax * cos).powi(2) + (ay * sin).powi(2)).sqrt();
        let hy = ((ax * sin).powi(2) + (ay * cos).powi(2)).sqrt();
        let clip = |v: f64, extent: u32| v.clamp(0.0, f64::from(extent - 1)) as u32;
        (
            clip((self.cx - hx - 0.5).floor(), width),
            clip((self.cy - hy - 0.5).floor(), height),
            clip((self.cx + hx - 0.5).ceil(), width),
            clip((self.cy + hy - 0.5).ceil(), height),
        )
    }

    fn opacity(&self, px: f64, py: f64) -> f64 {
        let (sin, cos) = self.angle.sin_cos();
        let (dx, dy) = (px - self.cx, py - self.cy);
        let u = (cos * dx + sin * dy) / self.rx;
        let v = (-sin * dx + cos * dy) / self.ry;
        let d2 = u * u + v * v;
        if d2 > Self::SUPPORT * Self::SUPPORT {
            0.0
        } else {
            // sigma of half a radius: near-opaque core, soft rim
            self.alpha * (-d2 * 2.0).exp()
        }
    }
}

/// Draws the blob layout `degrade_artifacts` would composite for this seed.
pub fn plan_artifacts(width: u32, height: u32, seed: u64, params: &ArtifactParams) -> Vec<ArtifactBlob> {
    let mut rng = rng_from_seed(seed);
    let count = rng.random_range(params.count.0..=params.count.1);
    let side = f64::from(width.min(height));
    (0..count)
        .map(|_| {
            let cx = rng.random::<f64>() * f64::from(width);
            let cy = rng.random::<f64>() * f64::from(height);
            let r = uniform(&mut rng, params.radius_frac) * side;
            let aspect = uniform(&mut rng, params.aspect);
            let angle = rng.random::<f64>() * std::f64::consts::PI;
            let alpha = uniform(&mut rng, params.alpha).min(0.7);
            let color = if rng.random_bool(0.5) { [18, 10, 6] } else { [255, 248, 232] };
            ArtifactBlob {
                cx,
                cy,
                rx: r.max(0.5),
                ry: (r * aspect).max(0.5),
                angle,
                alpha,
                color,
            }
        })
        .collect()
}

/// Composites soft elliptical blobs over the image.
pub fn degrade_artifacts(img: &FundusImage, seed: u64, params: &ArtifactParams) -> FundusImage {
    let blobs = plan_artifacts(img.width(), img.height(), seed, params);
    let width = img.width() as usize;
    let mut out = img.pixels().to_vec();
    for blob in &blobs {
        let (x0, y0, x1, y1) = blob.bounding_box(img.width(), img.height());
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = blob.opacity(f64::from(x) + 0.5, f64::from(y) + 0.5);
                if a <= 0.0 {
                    continue;
                }
                let i = (y as usize * width + x as usize) * 3;
                for c in 0..3 {
                    let v = (1.0 - a) * f64::from(out[i + c]) + a * f64::from(blob.color[c]);
                    out[i + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    map_pixels(img, out)
}

/// Per-image seeds of the three degradations, shared by all eight variants
/// so that e.g. code 7 applies the same light field as code 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegradationSeeds {
    pub light: u64,
    pub blur: u64,
    pub artifacts: u64,
}

impl DegradationSeeds {
    /// Seeds for image `index` under `base_seed`: three consecutive draws from
    /// `derive_seed(base_seed, index)`.
    pub fn for_image(base_seed: u64, index: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(base_seed, index));
        DegradationSeeds {
            light: rng.random(),
            blur: rng.random(),
            artifacts: rng.random(),
        }
    }
}

/// Applies the degradations selected by `code` in the fixed order light, blur, artifacts.
pub fn degrade(img: &FundusImage, code: DegradationCode, seeds: &DegradationSeeds, params: &DegradationParams) -> FundusImage {
    let mut out = img.clone();
    if code.light() {
        out = degrade_light(&out, seeds.light, &params.light);
    }
    if code.blur() {
        out = degrade_blur(&out, seeds.blur, &params.blur);
    }
    if code.artifacts() {
        out = degrade_artifacts(&out, seeds.artifacts, &params.artifacts);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradedVariant {
    pub image: FundusImage,
    pub code: DegradationCode,
    /// Position of the source image in the input list.
    pub source_index: usize,
}

/// Emits all eight degradation combinations of every image, grouped by
/// source image and ordered by code within a group.
pub fn expand_degraded(images: &[FundusImage], base_seed: u64, params: &DegradationParams) -> Result<Vec<DegradedVariant>> {
    if images.is_empty() {
        return Err(Error::invalid("expand_degraded", "empty image list"));
    }
    let groups: Vec<Vec<DegradedVariant>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let seeds = DegradationSeeds::for_image(base_seed, i as u64);
            DegradationCode::all()
                .map(|code| DegradedVariant {
                    image: degrade(img, code, &seeds, params),
                    code,
                    source_index: i,
                })
                .collect()
        })
        .collect();
    Ok(groups.into_iter().flatten().collect())
}
