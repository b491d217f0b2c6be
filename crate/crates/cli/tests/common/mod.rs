#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drgrade::fundus::{DatasetManifest, DegradationCode, FundusImage, GradeLabel, ManifestEntry};
use drgrade::model::{save, ConvBlock, Model, ModelConfig, TrainingMeta};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drgrade"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn drgrade")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// The single JSON error line a failing command writes to stderr.
pub fn error_line(out: &Output) -> serde_json::Value {
    let err = stderr(out);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one stderr line, got {err:?}");
    serde_json::from_str(lines[0]).unwrap()
}

pub fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    stdout(out).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn grade(g: usize) -> GradeLabel {
    GradeLabel::new(g as i64).unwrap()
}

/// Writes `images` as PNGs into `dir` with a manifest; returns the manifest path.
pub fn write_manifest(dir: &Path, images: &[(FundusImage, GradeLabel)]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let entries = images
        .iter()
        .enumerate()
        .map(|(i, (img, label))| {
            let name = format!("img_{i:03}.png");
            img.save_png(&dir.join(&name)).unwrap();
            ManifestEntry {
                path: name.into(),
                label: *label,
                origin: "test".into(),
                degradation_code: DegradationCode::NONE,
            }
        })
        .collect();
    let path = dir.join("manifest.csv");
    DatasetManifest::new(dir, entries).save(&path).unwrap();
    path
}

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        conv_blocks: vec![ConvBlock::new(4), ConvBlock::new(6)],
        attention_channels: 3,
        hidden_units: 5,
        classes: 5,
        seed,
    }
}

fn zeroed(id: &str) -> Model {
    let mut model = Model::build(small_config(0)).unwrap().with_id(id);
    for name in model.param_names().to_vec() {
        model.param_mut(&name).unwrap().data_mut().fill(0.0);
    }
    model
}

/// All weights zero, so every image gets softmax(fc2.bias) and grade 0.
pub fn majority_checkpoint(path: &Path) {
    let mut model = zeroed("majority");
    model
        .param_mut("fc2.bias")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.8, 0.2, 0.1, 0.0, -0.1]);
    save(&model, &TrainingMeta::default(), path).unwrap();
}

/// Labels of the majority golden fixture.
pub const MAJORITY_LABELS: [usize; 10] = [0, 0, 1, 0, 2, 0, 3, 0, 1, 0];

/// Uniform image whose red level encodes the grade; read back exactly by
/// [`oracle_checkpoint`].
pub fn oracle_image(g: usize, side: u32) -> FundusImage {
    let red = ORACLE_OFFSET + ORACLE_STEP * g as u8;
    FundusImage::from_fn(side, side, format!("oracle_{g}"), |_, _| [red, 90, 30])
}

const ORACLE_OFFSET: u8 = 40;
const ORACLE_STEP: u8 = 40;

/// A hand-set network that passes the red level straight through the trunk
/// (centre taps of 1), pools it uniformly and scores grade k by
/// `c * (k * (s - a) - k^2 * t / 2)`, which peaks at the k nearest `(s - a) / t`.
pub fn oracle_checkpoint(path: &Path) {
    let mut model = zeroed("oracle");
    let config = model.config().clone();
    for (i, b) in config.conv_blocks.iter().enumerate() {
        let k = b.kernel;
        let centre = (k / 2) * k + k / 2;
        let w = model.param_mut(&format!("conv{i}.weight")).unwrap().data_mut();
        // output channel 0 from input channel 0
        w[centre] = 1.0;
    }
    // fc1.weight is [in, hidden]: hidden unit 0 copies feature channel 0
    model.param_mut("fc1.weight").unwrap().data_mut()[0] = 1.0;
    let a = f32::from(ORACLE_OFFSET) / 255.0;
    let t = f32::from(ORACLE_STEP) / 255.0;
    let c = 40.0;
    let w2 = model.param_mut("fc2.weight").unwrap().data_mut();
    for (k, w) in w2.iter_mut().take(5).enumerate() {
        *w = c * k as f32;
    }
    let b2 = model.param_mut("fc2.bias").unwrap().data_mut();
    for (k, b) in b2.iter_mut().enumerate() {
        let k = k as f32;
        *b = -c * (k * a + k * k * t / 2.0);
    }
    save(&model, &TrainingMeta::default(), path).unwrap();
}

pub fn random_checkpoint(path: &Path, seed: u64) {
    let model = Model::build(small_config(seed)).unwrap().with_id("random");
    save(&model, &TrainingMeta::default(), path).unwrap();
}

pub fn synth_image(g: usize, side: u32, seed: u64) -> FundusImage {
    drgrade::synth::generate(grade(g), side, seed)
}

/// Untrained network at the default 128-pixel input size.
pub fn default_checkpoint(path: &Path, seed: u64) {
    let model = Model::build(ModelConfig { seed, ..ModelConfig::default() }).unwrap().with_id("default");
    save(&model, &TrainingMeta::default(), path).unwrap();
}
