//! Fundus image ingestion, preprocessing, augmentation and degradation, plus
//! dataset manifests.

mod augment;
mod degrade;
mod manifest;

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, AugmentParams};
pub use degrade::{
    degrade, degrade_artifacts, degrade_blur, degrade_light, expand_degraded, plan_artifacts, ArtifactBlob,
    ArtifactParams, BlurParams, DegradationCode, DegradationParams, DegradationSeeds, DegradedVariant, LightParams,
};
pub use manifest::{build_balanced, DatasetManifest, ManifestEntry};

/// Side length of the square model input.
pub const MODEL_INPUT_SIZE: usize = 128;

/// Smallest accepted image side before preprocessing.
pub const MIN_IMAGE_SIDE: u32 = 16;

/// Ordinal diabetic-retinopathy severity, 0 (none) to 4 (proliferative).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct GradeLabel(u8);

impl GradeLabel {
    pub const COUNT: usize = 5;

    pub fn new(value: i64) -> Result<Self> {
        if (0..Self::COUNT as i64).contains(&value) {
            Ok(GradeLabel(value as u8))
        } else {
            Err(Error::InvalidGrade(value))
        }
    }

    pub fn all() -> impl Iterator<Item = GradeLabel> {
        (0..Self::COUNT as u8).map(GradeLabel)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "No DR",
            1 => "Mild DR",
            2 => "Moderate DR",
            3 => "Severe DR",
            _ => "Proliferative DR",
        }
    }
}

impl TryFrom<i64> for GradeLabel {
    type Error = Error;
    fn try_from(v: i64) -> Result<Self> {
        GradeLabel::new(v)
    }
}

impl From<GradeLabel> for u8 {
    fn from(g: GradeLabel) -> u8 {
        g.0
    }
}

impl fmt::Display for GradeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An 8-bit RGB raster, row-major, with the identifier of where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FundusImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    source_id: String,
}

impl FundusImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, source_id: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("degenerate {width}x{height} image")));
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(Error::Image(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width as usize * height as usize * 3,
                pixels.len()
            )));
        }
        Ok(FundusImage {
            width,
            height,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn from_fn(width: u32, height: u32, source_id: impl Into<String>, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        FundusImage::new(width, height, pixels, source_id).expect("from_fn: positive extents")
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8], source_id: impl Into<String>) -> Result<Self> {
        let reader = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::Image(e.to_string()))?;
        match reader.format() {
            Some(image::ImageFormat::Png | image::ImageFormat::Jpeg) => {}
            Some(other) => return Err(Error::Image(format!("unsupported format {other:?}"))),
            None => return Err(Error::Image("unrecognized image format".into())),
        }
        let decoded = reader.decode().map_err(|e| Error::Image(e.to_string()))?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        FundusImage::new(w, h, rgb.into_raw(), source_id)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::ImageLoad {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        FundusImage::decode(&bytes, path.to_string_lossy()).map_err(|e| Error::ImageLoad {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image_rgb(&self.pixels, self.width, self.height)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
    }
}

trait PngWrite {
    fn write_image_rgb(self, buf: &[u8], w: u32, h: u32) -> image::ImageResult<()>;
}

impl<W: std::io::Write> PngWrite for image::codecs::png::PngEncoder<W> {
    fn write_image_rgb(self, buf: &[u8], w: u32, h: u32) -> image::ImageResult<()> {
        use image::ImageEncoder;
        self.write_image(buf, w, h, image::ExtendedColorType::Rgb8)
    }
}

/// Bilinear resampling to `out_w x out_h` with pixel-centre alignment.
///
/// Returns planar (channel-major) unrounded intensities in `[0, 255]`.
pub fn resize_bilinear(img: &FundusImage, out_w: usize, out_h: usize) -> Vec<f32> {
    let (w, h) = (img.width as usize, img.height as usize);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let taps = |o: usize, scale: f64, extent: usize| {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(extent - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let xt: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    let yt: Vec<_> = (0..out_h).map(|y| taps(y, sy, h)).collect();
    let px = |x: usize, y: usize, c: usize| f32::from(img.pixels[(y * w + x) * 3 + c]);
    let mut out = vec![0.0f32; 3 * out_w * out_h];
    for c in 0..3 {
        for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let top = lerp(px(x0, y0, c), px(x1, y0, c), fx);
                let bottom = lerp(px(x0, y1, c), px(x1, y1, c), fx);
                out[(c * out_h + oy) * out_w + ox] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Resizes to the model's square input and scales channels to `[0, 1]`.
pub fn preprocess(img: &FundusImage) -> Result<Tensor> {
    preprocess_to(img, MODEL_INPUT_SIZE)
}

/// As [`preprocess`], for an arbitrary square side. Output shape is `3 x size x size`.
pub fn preprocess_to(img: &FundusImage, size: usize) -> Result<Tensor> {
    if img.width.min(img.height) < MIN_IMAGE_SIDE {
        return Err(Error::Image(format!(
            "image {}x{} is smaller than the {MIN_IMAGE_SIDE}px minimum",
            img.width, img.height
        )));
    }
    let data = resize_bilinear(img, size, size)
        .into_iter()
        .map(|v| v / 255.0)
        .collect();
    Tensor::new(&[3, size, size], data)
}

/// Resamples an image to new dimensions, rounding back to 8 bits.
pub fn resize_image(img: &FundusImage, out_w: u32, out_h: u32) -> FundusImage {
    if img.width == out_w && img.height == out_h {
        return img.clone();
    }
    let planar = resize_bilinear(img, out_w as usize, out_h as usize);
    let plane = out_w as usize * out_h as usize;
    FundusImage::from_fn(out_w, out_h, img.source_id.clone(), |x, y| {
        let i = y as usize * out_w as usize + x as usize;
        std::array::from_fn(|c| planar[c * plane + i].round().clamp(0.0, 255.0) as u8)
    })
}

/// Deterministic generator for a 64-bit seed.
///
/// All randomness in the toolkit comes from ChaCha8 seeded through
/// `rand_core`'s documented `seed_from_u64` expansion, so the streams are
/// portable across platforms and languages.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Splits a base seed into an independent per-item seed: ChaCha8 keyed by
/// `base_seed` on stream `index`, first 64-bit output.
pub fn derive_seed(base_seed: u64, index: u64) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng.next_u64()
}
