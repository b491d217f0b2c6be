//! Integrated Gradients over the grading network, plus overlay rendering.
//!
//! Attributions use the right-endpoint Riemann sum
//! `IG_i = (x_i - x'_i) / m * sum_{k=1..m} dF/dx_i (x' + k/m (x - x'))`
//! where `F` is the pre-softmax logit of the target grade.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundus::{preprocess_to, resize_image, FundusImage, GradeLabel};
use crate::model::{argmax, Model, NUM_CLASSES};
use crate::tensor::{Graph, Tensor};

/// Path points evaluated per forward/backward pass.
const PATH_CHUNK: usize = 8;

/// A differentiable multi-class scorer over a flat input vector.
pub trait ScoreModel: Sync {
    fn input_len(&self) -> usize;

    /// All class scores for one input.
    fn scores(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Scores of class `target` for each of `rows` stacked inputs, with the
    /// gradient of each score with respect to its own row.
    fn target_gradients(&self, points: &[f64], rows: usize, target: usize) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl ScoreModel for Model {
    fn input_len(&self) -> usize {
        let s = self.config().input_size;
        3 * s * s
    }

    fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let (logits, _) = self.infer(&input, 1)?;
        Ok(logits.into_iter().map(f64::from).collect())
    }

    fn target_gradients(&self, points: &[f64], rows: usize, target: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let input = Tensor::new(&self.input_shape(rows), points.iter().map(|&v| v as f32).collect())?;
        let x = g.leaf(input.with_requires_grad(true));
        let out = self.forward(&mut g, &params, x)?;
        let total = g.pick_sum(out.logits, &vec![target; rows])?;
        g.backward(total)?;
        let logits = g.value(out.logits).data();
        let scores = (0..rows).map(|r| f64::from(logits[r * NUM_CLASSES + target])).collect();
        let grads = g.grad(x).expect("input requires grad").iter().map(|&v| f64::from(v)).collect();
        Ok((scores, grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    /// All-zero input.
    Black,
    /// A preprocessed `3 x S x S` input matching the model's input size.
    Custom(Tensor),
}

impl Baseline {
    /// Preprocesses an image into a custom baseline for a model of input side `size`.
    pub fn from_image(img: &FundusImage, size: usize) -> Result<Self> {
        Ok(Baseline::Custom(preprocess_to(img, size)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The grade the model predicts for the input.
    Predicted,
    Grade(GradeLabel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgConfig {
    pub baseline: Baseline,
    pub steps: usize,
    pub target: Target,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            baseline: Baseline::Black,
            steps: 50,
            target: Target::Predicted,
        }
    }
}

/// Per-feature attributions with the completeness bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct RawAttribution {
    pub values: Vec<f64>,
    pub score_input: f64,
    pub score_baseline: f64,
    /// `|sum(values) - (score_input - score_baseline)|`.
    pub completeness_gap: f64,
}

/// Integrated Gradients for any [`ScoreModel`]; gradients along the path
/// are evaluated in parallel chunks and summed in step order.
pub fn integrated_gradients_raw(
    model: &impl ScoreModel,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
    target: usize,
) -> Result<RawAttribution> {
    let d = model.input_len();
    if x.len() != d || baseline.len() != d {
        return Err(Error::shape(
            "integrated_gradients",
            format!("input {} and baseline {} must both have length {d}", x.len(), baseline.len()),
        ));
    }
    if steps == 0 {
        return Err(Error::invalid("integrated_gradients", "steps must be at least 1"));
    }
    if target >= model.scores(x)?.len() {
        return Err(Error::invalid("integrated_gradients", format!("target class {target} out of range")));
    }
    let ks: Vec<usize> = (1..=steps).collect();
    let partials: Vec<Vec<f64>> = ks
        .par_chunks(PATH_CHUNK)
        .map(|chunk| {
            let mut points = Vec::with_capacity(chunk.len() * d);
            for &k in chunk {
                let t = k as f64 / steps as f64;
                points.extend(x.iter().zip(baseline).map(|(&xi, &bi)| bi + t * (xi - bi)));
            }
            let (_, grads) = model.target_gradients(&points, chunk.len(), target)?;
            let mut sum = vec![0.0; d];
            for row in grads.chunks_exact(d) {
                sum.iter_mut().zip(row).for_each(|(s, g)| *s += g);
            }
            Ok(sum)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; d];
    for part in &partials {
        total.iter_mut().zip(part).for_each(|(t, p)| *t += p);
    }
    let values: Vec<f64> = total
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(&g, (&xi, &bi))| (xi - bi) * g / steps as f64)
        .collect();
    let score_input = model.scores(x)?[target];
    let score_baseline = model.scores(baseline)?[target];
    let completeness_gap = (values.iter().sum::<f64>() - (score_input - score_baseline)).abs();
    Ok(RawAttribution {
        values,
        score_input,
        score_baseline,
        completeness_gap,
    })
}

/// Channel-summed attributions at model input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMask {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width`.
    pub values: Vec<f64>,
    pub target: GradeLabel,
    pub steps: usize,
    pub score_input: f64,
    pub score_baseline: f64,
    pub completeness_gap: f64,
}

impl AttributionMask {
    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Row-major CSV, one image row per line, 6 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 12);
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|&v| format_significant(v, 6)).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Formats like C's `%.{digits}g` but with Rust exponent notation (`1.5e-7`).
pub fn format_significant(v: f64, digits: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Integrated Gradients of `model` on `img`.
pub fn integrated_gradients(model: &Model, img: &FundusImage, config: &IgConfig) -> Result<AttributionMask> {
    let size = model.config().input_size;
    let x: Vec<f64> = preprocess_to(img, size)?.data().iter().map(|&v| f64::from(v)).collect();
    let baseline = match &config.baseline {
        Baseline::Black => vec![0.0; x.len()],
        Baseline::Custom(t) => {
            if t.shape() != [3, size, size] {
                return Err(Error::shape(
                    "integrated_gradients",
                    format!("baseline shape {:?} does not match model input [3, {size}, {size}]", t.shape()),
                ));
            }
            t.data().iter().map(|&v| f64::from(v)).collect()
        }
    };
    let target = match config.target {
        Target::Predicted => GradeLabel::new(argmax(&model.scores(&x)?) as i64)?,
        Target::Grade(g) => g,
    };
    let raw = integrated_gradients_raw(model, &x, &baseline, config.steps, target.index())?;
    let plane = size * size;
    let values = (0..plane)
        .map(|i| raw.values[i] + raw.values[plane + i] + raw.values[2 * plane + i])
        .collect();
    Ok(AttributionMask {
        width: size,
        height: size,
        values,
        target,
        steps: config.steps,
        score_input: raw.score_input,
        score_baseline: raw.score_baseline,
        completeness_gap: raw.completeness_gap,
    })
}

/// Black-red-yellow-white ramp: `(3t, 3t - 1, 3t - 2)` clamped to `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// Nearest-rank 99th percentile of the absolute values.
fn clip_value(abs: &[f64]) -> f64 {
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let p99 = sorted[rank - 1];
    if p99 > 0.0 {
        p99
    } else {
        sorted.last().copied().unwrap_or(0.0)
    }
}

/// Renders `|mask|`, clipped at its 99th percentile (or its maximum when that
/// percentile is zero) and scaled to `[0, 1]`, through [`colormap`], blended
/// half-and-half over the grayscale input resized to the mask resolution.
pub fn render_overlay(mask: &AttributionMask, img: &FundusImage) -> FundusImage {
    let base = resize_image(img, mask.width as u32, mask.height as u32);
    let abs: Vec<f64> = mask.values.iter().map(|v| v.abs()).collect();
    let clip = clip_value(&abs);
    FundusImage::from_fn(mask.width as u32, mask.height as u32, img.source_id(), |x, y| {
        let [r, g, b] = base.pixel(x, y);
        let gray = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
        let a = abs[y as usize * mask.width + x as usize];
        let t = if clip > 0.0 { a.min(clip) / clip } else { 0.0 };
        colormap(t).map(|c| (0.5 * gray + 0.5 * 255.0 * c).round().clamp(0.0, 255.0) as u8)
    })
}
