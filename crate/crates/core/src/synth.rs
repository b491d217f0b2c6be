//! Procedurally generated fundus-like images with grade-specific lesions.
//!
//! Every image is an orange retinal disc on black with an optic disc and a
//! few vessels. Grade 0 has no lesions, 1 small dark dots, 2 medium blobs,
//! 3 large pale blobs and 4 tangled vessel tufts.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fundus::{derive_seed, rng_from_seed, DatasetManifest, DegradationCode, FundusImage, GradeLabel, ManifestEntry};

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            px: vec![[0.0; 3]; size * size],
        }
    }

    /// Blends `color` with the given opacity wherever `coverage(x, y)` is positive.
    fn paint(&mut self, bbox: (f32, f32, f32, f32), color: [f32; 3], coverage: impl Fn(f32, f32) -> f32) {
        let s = self.size as f32;
        let x0 = bbox.0.floor().clamp(0.0, s) as usize;
        let y0 = bbox.1.floor().clamp(0.0, s) as usize;
        let x1 = bbox.2.ceil().clamp(0.0, s) as usize;
        let y1 = bbox.3.ceil().clamp(0.0, s) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let a = coverage(x as f32 + 0.5, y as f32 + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    for c in 0..3 {
                        p[c] += a * (color[c] - p[c]);
                    }
                }
            }
        }
    }

    fn disc(&mut self, cx: f32, cy: f32, r: f32, color: [f32; 3], opacity: f32) {
        self.paint((cx - r - 1.0, cy - r - 1.0, cx + r + 1.0, cy + r + 1.0), color, |x, y| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            opacity * (r + 0.5 - d)
        });
    }

    fn segment(&mut self, a: (f32, f32), b: (f32, f32), width: f32, color: [f32; 3], opacity: f32) {
        let h = width / 2.0 + 1.0;
        let bbox = (a.0.min(b.0) - h, a.1.min(b.1) - h, a.0.max(b.0) + h, a.1.max(b.1) + h);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        self.paint(bbox, color, |x, y| {
            let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
            let d = ((x - a.0 - t * dx).powi(2) + (y - a.1 - t * dy).powi(2)).sqrt();
            opacity * (width / 2.0 + 0.5 - d)
        });
    }

    /// A wandering polyline starting at `start` with the given heading.
    #[allow(clippy::too_many_arguments)]
    fn vessel(
        &mut self,
        rng: &mut ChaCha8Rng,
        start: (f32, f32),
        heading: f32,
        steps: usize,
        step_len: f32,
        curl: f32,
        width: f32,
        color: [f32; 3],
    ) {
        let (mut p, mut theta) = (start, heading);
        for _ in 0..steps {
            theta += rng.random_range(-curl..=curl);
            let q = (p.0 + step_len * theta.cos(), p.1 + step_len * theta.sin());
            self.segment(p, q, width, color, 0.9);
            p = q;
        }
    }

    fn into_image(self, source_id: &str, fundus: (f32, f32, f32)) -> FundusImage {
        let size = self.size as u32;
        let (cx, cy, r) = fundus;
        let px = self.px;
        FundusImage::from_fn(size, size, source_id, |x, y| {
            let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
            let mask = (r + 0.5 - d).clamp(0.0, 1.0);
            let p = px[y as usize * size as usize + x as usize];
            p.map(|v| (v * mask).round().clamp(0.0, 255.0) as u8)
        })
    }
}

/// One synthetic image of the given grade, fully determined by `seed`.
pub fn generate(label: GradeLabel, size: u32, seed: u64) -> FundusImage {
    let mut rng = rng_from_seed(seed);
    let n = size as usize;
    let s = size as f32;
    let mut canvas = Canvas::new(n);
    let (cx, cy) = (s / 2.0 + rng.random_range(-0.03..0.03) * s, s / 2.0 + rng.random_range(-0.03..0.03) * s);
    let radius = s * rng.random_range(0.44..0.48);

    // background: orange with a radial falloff and mild brightness jitter
    let gain = rng.random_range(0.85..1.1f32);
    let base = [rng.random_range(175.0..205.0f32), rng.random_range(80.0..105.0), rng.random_range(25.0..45.0)];
    for y in 0..n {
        for x in 0..n {
            let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt() / radius;
            let shade = gain * (1.0 - 0.35 * d * d);
            canvas.px[y * n + x] = base.map(|c| c * shade);
        }
    }

    // optic disc on the left or right of centre
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let od = (cx + side * radius * rng.random_range(0.45..0.6), cy + radius * rng.random_range(-0.1..0.1));
    canvas.disc(od.0, od.1, s * 0.07, [250.0, 235.0, 200.0], 0.9);

    // major vessels leaving the optic disc
    let vessel_color = [115.0, 25.0, 20.0];
    for _ in 0..rng.random_range(4..=6) {
        let heading = if side > 0.0 { std::f32::consts::PI } else { 0.0 } + rng.random_range(-1.4..1.4f32);
        let width = s * rng.random_range(0.012..0.02);
        canvas.vessel(&mut rng, od, heading, 12, s * 0.05, 0.25, width, vessel_color);
    }

    let lesion_point = |rng: &mut ChaCha8Rng| loop {
        let p = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let dc = ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt();
        let dod = ((p.0 - od.0).powi(2) + (p.1 - od.1).powi(2)).sqrt();
        if dc < radius * 0.8 && dod > s * 0.12 {
            return p;
        }
    };

    match label.value() {
        0 => {}
        1 => {
            for _ in 0..rng.random_range(18..=26) {
                let p = lesion_point(&mut rng);
                canvas.disc(p.0, p.1, s * rng.random_range(0.009..0.014), [40.0, 0.0, 0.0], 1.0);
            }
        }
        2 => {
            for _ in 0..rng.random_range(5..=8) {
                let p = lesion_point(&mut rng);
                canvas.disc(p.0, p.1, s * rng.random_range(0.03..0.045), [60.0, 5.0, 5.0], 1.0);
            }
        }
        3 => {
            for _ in 0..rng.random_range(2..=3) {
                let p = lesion_point(&mut rng);
                canvas.disc(p.0, p.1, s * rng.random_range(0.07..0.095), [240.0, 215.0, 40.0], 1.0);
            }
        }
        _ => {
            for _ in 0..rng.random_range(3..=4) {
                let p = lesion_point(&mut rng);
                for _ in 0..8 {
                    let heading = rng.random_range(0.0..std::f32::consts::TAU);
                    canvas.vessel(&mut rng, p, heading, 6, s * 0.02, 1.2, s * 0.01, [235.0, 30.0, 130.0]);
                }
            }
        }
    }

    // sensor noise
    for p in &mut canvas.px {
        let noise = rng.random_range(-4.0..4.0f32);
        p.iter_mut().for_each(|c| *c += noise);
    }
    canvas.into_image(&format!("synth-{}-{seed}", label.value()), (cx, cy, radius))
}

/// `per_class` images of every grade, interleaved by grade.
pub fn corpus(per_class: usize, size: u32, seed: u64) -> Vec<(FundusImage, GradeLabel)> {
    let mut out = Vec::with_capacity(per_class * GradeLabel::COUNT);
    for i in 0..per_class {
        for label in GradeLabel::all() {
            let index = (i * GradeLabel::COUNT + label.index()) as u64;
            out.push((generate(label, size, derive_seed(seed, index)), label));
        }
    }
    out
}

/// Writes a corpus as PNGs under `dir` together with `dir/manifest.csv`.
pub fn write_corpus(dir: &Path, per_class: usize, size: u32, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::new(std::path::absolute(dir)?, Vec::new());
    for (i, (img, label)) in corpus(per_class, size, seed).into_iter().enumerate() {
        let name = format!("img_{i:05}_g{}.png", label.value());
        img.save_png(&dir.join(&name))?;
        manifest.push(ManifestEntry {
            path: name.into(),
            label,
            origin: "synthetic".into(),
            degradation_code: DegradationCode::NONE,
        });
    }
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
