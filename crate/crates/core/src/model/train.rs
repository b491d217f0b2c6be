use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, Model, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::fundus::{augment, derive_seed, preprocess_to, rng_from_seed, DatasetManifest, FundusImage, GradeLabel};
use crate::tensor::{Graph, Tensor};

/// Samples per gradient chunk. Chunks are evaluated in parallel and reduced
/// in index order, so results do not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Re-draw a random geometric augmentation of every image each epoch.
    pub augment: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean cross-entropy over the epoch.
    pub loss: f64,
    /// Fraction of samples classified correctly during the epoch's forward passes.
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
}

/// A preprocessed training example. `image` is kept only when augmenting.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Vec<f32>,
    pub label: GradeLabel,
    pub image: Option<FundusImage>,
}

impl Sample {
    pub fn new(input: Vec<f32>, label: GradeLabel) -> Self {
        Sample {
            input,
            label,
            image: None,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every parameter that holds a gradient.
    pub fn step(&mut self, model: &mut Model) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in model.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = f64::from(g);
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (f64::from(*w) - update) as f32;
            }
        }
    }
}

fn one_hot(labels: &[GradeLabel]) -> Tensor {
    Tensor::from_fn(&[labels.len(), NUM_CLASSES], |i| {
        if labels[i / NUM_CLASSES].index() == i % NUM_CLASSES {
            1.0
        } else {
            0.0
        }
    })
}

struct ChunkResult {
    grads: Vec<Vec<f32>>,
    loss_sum: f64,
    correct: usize,
}

impl Model {
    fn chunk_gradients(&self, inputs: &[&[f32]], labels: &[GradeLabel]) -> Result<ChunkResult> {
        let n = labels.len();
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, true);
        let flat: Vec<f32> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
        let x = g.leaf(Tensor::new(&self.input_shape(n), flat)?);
        let out = self.forward(&mut g, &params, x)?;
        let loss = g.cross_entropy(out.probs, &one_hot(labels))?;
        g.backward(loss)?;
        let probs = g.value(out.probs).data();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, l)| {
                let row: Vec<f64> = probs[i * NUM_CLASSES..(i + 1) * NUM_CLASSES].iter().map(|&p| f64::from(p)).collect();
                argmax(&row) == l.index()
            })
            .count();
        Ok(ChunkResult {
            grads: params.iter().map(|&p| g.grad(p).expect("parameter reached").to_vec()).collect(),
            loss_sum: f64::from(g.value(loss).data()[0]) * n as f64,
            correct,
        })
    }

    /// Mean cross-entropy loss and accuracy of a batch, with the averaged
    /// parameter gradients added to the model's accumulated gradients.
    pub fn accumulate_batch_gradients(&mut self, inputs: &[&[f32]], labels: &[GradeLabel]) -> Result<(f64, usize)> {
        let n = labels.len();
        let chunks: Vec<ChunkResult> = inputs
            .par_chunks(CHUNK)
            .zip(labels.par_chunks(CHUNK))
            .map(|(x, y)| self.chunk_gradients(x, y))
            .collect::<Result<_>>()?;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in &chunks {
            loss_sum += chunk.loss_sum;
            correct += chunk.correct;
        }
        for (k, p) in self.params_mut().iter_mut().enumerate() {
            let mut total = p.grad().map_or_else(|| vec![0.0f32; p.numel()], <[f32]>::to_vec);
            for (chunk, chunk_len) in chunks.iter().zip(labels.chunks(CHUNK).map(<[_]>::len)) {
                let scale = chunk_len as f32 / n as f32;
                for (t, g) in total.iter_mut().zip(&chunk.grads[k]) {
                    *t += g * scale;
                }
            }
            p.set_grad(Some(total));
        }
        Ok((loss_sum / n as f64, correct))
    }

    /// Mean cross-entropy of a batch without touching gradients.
    pub fn batch_loss(&self, inputs: &[&[f32]], labels: &[GradeLabel]) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let flat: Vec<f32> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
        let x = g.leaf(Tensor::new(&self.input_shape(labels.len()), flat)?);
        let out = self.forward(&mut g, &params, x)?;
        let loss = g.cross_entropy(out.probs, &one_hot(labels))?;
        Ok(f64::from(g.value(loss).data()[0]))
    }
}

/// Mini-batch Adam training on preprocessed samples.
///
/// Shuffling uses one ChaCha8 stream seeded with `opts.seed`; augmentation
/// draws per (epoch, sample) seeds from `derive_seed`.
pub fn train_on_samples(
    model: &mut Model,
    samples: &[Sample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::invalid("train", "no training samples"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be positive"));
    }
    let size = model.config().input_size;
    let mut adam = Adam::new(model, opts.lr);
    let mut rng = rng_from_seed(opts.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let augmented: Option<Vec<Vec<f32>>> = if opts.augment {
            let epoch_seed = derive_seed(opts.seed, epoch as u64);
            Some(
                samples
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| match &s.image {
                        Some(img) => {
                            let aug = augment(img, derive_seed(epoch_seed, i as u64));
                            preprocess_to(&aug, size).map(Tensor::into_data)
                        }
                        None => Ok(s.input.clone()),
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let input_of = |i: usize| -> &[f32] {
            match &augmented {
                Some(a) => &a[i],
                None => &samples[i].input,
            }
        };

        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(opts.batch_size) {
            let inputs: Vec<&[f32]> = batch.iter().map(|&i| input_of(i)).collect();
            let labels: Vec<GradeLabel> = batch.iter().map(|&i| samples[i].label).collect();
            model.zero_grad();
            let (loss, ok) = model.accumulate_batch_gradients(&inputs, &labels)?;
            adam.step(model);
            report.steps += 1;
            loss_sum += loss * batch.len() as f64;
            correct += ok;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        on_epoch(&stats);
        report.final_loss = Some(stats.loss);
        report.final_accuracy = Some(stats.accuracy);
        report.epochs.push(stats);
    }
    model.zero_grad();
    Ok(report)
}

/// Loads and preprocesses every manifest image, then trains.
pub fn train(
    model: &mut Model,
    manifest: &DatasetManifest,
    opts: &TrainOptions,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    if manifest.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    let size = model.config().input_size;
    let samples: Vec<Sample> = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let img = manifest.load_image(e)?;
            let input = preprocess_to(&img, size)
                .map_err(|err| Error::ImageLoad {
                    path: manifest.resolve(e),
                    reason: err.to_string(),
                })?
                .into_data();
            Ok(Sample {
                input,
                label: e.label,
                image: opts.augment.then_some(img),
            })
        })
        .collect::<Result<_>>()?;
    train_on_samples(model, &samples, opts, on_epoch)
}
