mod common;

use common::oracles::Linear;

use drgrade::attribution::{
    integrated_gradients, integrated_gradients_raw, render_overlay, AttributionMask, Baseline, IgConfig, ScoreModel,
    Target,
};
use drgrade::fundus::{FundusImage, GradeLabel};
use drgrade::model::Model;
use drgrade::Result;
use rand::Rng;

/// `F_0(x) = sum a_i x_i^2`; a single class.
struct Quadratic {
    a: Vec<f64>,
}

impl ScoreModel for Quadratic {
    fn input_len(&self) -> usize {
        self.a.len()
    }

    fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.a.iter().zip(x).map(|(a, x)| a * x * x).sum()])
    }

    fn target_gradients(&self, points: &[f64], _rows: usize, _target: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.a.len();
        let scores = points.chunks(d).map(|p| self.scores(p).map(|s| s[0])).collect::<Result<_>>()?;
        let grads = points.iter().enumerate().map(|(i, x)| 2.0 * self.a[i % d] * x).collect();
        Ok((scores, grads))
    }
}

fn random_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

#[test]
fn linear_model_matches_closed_form() {
    let mut r = common::rng(1);
    let d = 37;
    let model = Linear {
        w: (0..5).map(|_| random_vec(&mut r, d)).collect(),
        b: random_vec(&mut r, 5),
    };
    let x = random_vec(&mut r, d);
    let base = random_vec(&mut r, d);
    for steps in [1, 10, 50] {
        for target in 0..5 {
            let ig = integrated_gradients_raw(&model, &x, &base, steps, target).unwrap();
            for i in 0..d {
                let expected = model.w[target][i] * (x[i] - base[i]);
                assert!((ig.values[i] - expected).abs() < 1e-6, "m={steps} i={i}");
            }
            assert!(ig.completeness_gap < 1e-6);
        }
    }
}

#[test]
fn quadratic_model_matches_right_riemann_sum() {
    let mut r = common::rng(2);
    let d = 12;
    let model = Quadratic { a: random_vec(&mut r, d) };
    let x = random_vec(&mut r, d);
    let base = random_vec(&mut r, d);
    for steps in [1, 7, 64] {
        let ig = integrated_gradients_raw(&model, &x, &base, steps, 0).unwrap();
        let m = steps as f64;
        for i in 0..d {
            let delta = x[i] - base[i];
            let expected = 2.0 * model.a[i] * delta * (base[i] + delta * (m + 1.0) / (2.0 * m));
            assert!((ig.values[i] - expected).abs() < 1e-9, "m={steps} i={i}");
        }
    }
    // the right-endpoint bias shrinks like 1/m
    let gap = |m| integrated_gradients_raw(&model, &x, &base, m, 0).unwrap().completeness_gap;
    assert!(gap(100) < gap(10));
}

#[test]
fn invalid_arguments_are_rejected() {
    let model = Linear {
        w: vec![vec![1.0; 4]; 5],
        b: vec![0.0; 5],
    };
    let x = [1.0; 4];
    assert!(integrated_gradients_raw(&model, &x, &x, 10, 5).is_err());
    assert!(integrated_gradients_raw(&model, &x, &x, 0, 1).is_err());
    assert!(integrated_gradients_raw(&model, &x, &[0.0; 3], 10, 1).is_err());
}

fn tiny_model() -> Model {
    Model::build(common::tiny_config(21)).unwrap()
}

fn random_image(seed: u64, side: u32) -> FundusImage {
    let mut r = common::rng(seed);
    FundusImage::from_fn(side, side, "img", |_, _| [r.random(), r.random(), r.random()])
}

#[test]
fn input_equal_to_baseline_gives_zero_mask() {
    let model = tiny_model();
    let img = random_image(3, 16);
    for steps in [1, 20] {
        let config = IgConfig {
            baseline: Baseline::from_image(&img, 16).unwrap(),
            steps,
            target: Target::Predicted,
        };
        let mask = integrated_gradients(&model, &img, &config).unwrap();
        assert!(mask.values.iter().all(|&v| v == 0.0));
        assert_eq!(mask.completeness_gap, 0.0);
    }
}

#[test]
fn single_changed_pixel_is_the_only_attribution() {
    let model = tiny_model();
    let base_img = random_image(4, 16);
    let mut pixels = base_img.pixels().to_vec();
    let (px, py) = (9usize, 5usize);
    pixels[(py * 16 + px) * 3] = pixels[(py * 16 + px) * 3].wrapping_add(90);
    let img = FundusImage::new(16, 16, pixels, "img").unwrap();
    let config = IgConfig {
        baseline: Baseline::from_image(&base_img, 16).unwrap(),
        steps: 30,
        target: Target::Grade(GradeLabel::new(2).unwrap()),
    };
    let mask = integrated_gradients(&model, &img, &config).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            if (x, y) != (px, py) {
                assert_eq!(mask.value(x, y), 0.0);
            }
        }
    }
    assert_eq!(mask.target.value(), 2);
}

#[test]
fn attribution_is_deterministic() {
    let model = tiny_model();
    let img = random_image(5, 40);
    let config = IgConfig::default();
    let a = integrated_gradients(&model, &img, &config).unwrap();
    let b = integrated_gradients(&model, &img, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.width, 16);
    assert_eq!(a.values.len(), 256);
}

#[test]
fn predicted_target_is_the_argmax_grade() {
    let model = tiny_model();
    let img = random_image(6, 16);
    let mask = integrated_gradients(&model, &img, &IgConfig::default()).unwrap();
    assert_eq!(mask.target, model.predict(&img).unwrap().grade);
}

fn mask_with(values: Vec<f64>, side: usize) -> AttributionMask {
    AttributionMask {
        width: side,
        height: side,
        values,
        target: GradeLabel::new(0).unwrap(),
        steps: 1,
        score_input: 0.0,
        score_baseline: 0.0,
        completeness_gap: 0.0,
    }
}

#[test]
fn zero_mask_overlay_is_half_gray() {
    let img = random_image(7, 16);
    let overlay = render_overlay(&mask_with(vec![0.0; 256], 16), &img);
    for y in 0..16 {
        for x in 0..16 {
            let [r, g, b] = img.pixel(x, y);
            let gray = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
            let expected = (gray / 2.0).round() as u8;
            assert_eq!(overlay.pixel(x, y), [expected; 3]);
        }
    }
}

#[test]
fn values_above_the_clip_do_not_change_the_overlay() {
    let img = random_image(8, 20);
    let mut r = common::rng(8);
    let values: Vec<f64> = (0..400).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut sorted: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    sorted.sort_by(f64::total_cmp);
    // nearest rank 396 of 400
    let clip = sorted[395];
    let inflated: Vec<f64> = values.iter().map(|&v| if v.abs() > clip { v * 50.0 } else { v }).collect();
    let a = render_overlay(&mask_with(values, 20), &img);
    let b = render_overlay(&mask_with(inflated, 20), &img);
    assert_eq!(a, b);
    assert_ne!(a, render_overlay(&mask_with(vec![0.0; 400], 20), &img));
}

#[test]
fn csv_round_trips_to_six_significant_digits() {
    let model = tiny_model();
    let mask = integrated_gradients(&model, &random_image(9, 16), &IgConfig::default()).unwrap();
    let csv = mask.to_csv();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 16);
    for (y, row) in rows.iter().enumerate() {
        let fields: Vec<f64> = row.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 16);
        for (x, v) in fields.iter().enumerate() {
            let truth = mask.value(x, y);
            assert!((v - truth).abs() <= 5e-6 * truth.abs(), "{v} vs {truth}");
        }
    }
}
