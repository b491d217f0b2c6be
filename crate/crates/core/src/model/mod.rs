//! The grading network: a conv-relu-pool trunk, a spatial soft-attention
//! pooling head, two dense layers and a 5-way softmax.

mod checkpoint;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundus::{preprocess_to, rng_from_seed, FundusImage, GradeLabel};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use checkpoint::{load, load_bytes, save, to_bytes, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, train_on_samples, Adam, EpochStats, Sample, TrainOptions, TrainReport};

/// Number of severity grades the head predicts.
pub const NUM_CLASSES: usize = GradeLabel::COUNT;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    /// Square kernel side; padding is `kernel / 2`.
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window (and stride); 1 disables pooling.
    pub pool: usize,
}

impl ConvBlock {
    pub fn new(out_channels: usize) -> Self {
        ConvBlock {
            out_channels,
            kernel: 3,
            stride: 1,
            pool: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Width of the per-location scoring layer in the attention head.
    pub attention_channels: usize,
    pub hidden_units: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            conv_blocks: [16, 32, 64, 64].into_iter().map(ConvBlock::new).collect(),
            attention_channels: 16,
            hidden_units: 32,
            classes: NUM_CLASSES,
            seed: 0,
        }
    }
}

/// Smallest spatial extent allowed to reach the attention head.
pub const MIN_ATTENTION_EXTENT: usize = 4;

impl ModelConfig {
    /// Spatial side of the trunk output, or an error naming the block that collapses it.
    pub fn feature_extent(&self) -> Result<usize> {
        let mut side = self.input_size;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel == 0 || b.stride == 0 || b.pool == 0 || b.out_channels == 0 {
                return Err(Error::Config(format!("block {i} has a zero extent")));
            }
            let padded = side + 2 * (b.kernel / 2);
            if padded < b.kernel {
                return Err(Error::Config(format!("block {i}: input side {side} smaller than kernel")));
            }
            side = (padded - b.kernel) / b.stride + 1;
            if b.pool > 1 {
                if side < b.pool {
                    return Err(Error::Config(format!("block {i}: side {side} smaller than pool {}", b.pool)));
                }
                side = (side - b.pool) / b.pool + 1;
            }
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != NUM_CLASSES {
            return Err(Error::Config(format!("classes must be {NUM_CLASSES}, got {}", self.classes)));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("at least one conv block is required".into()));
        }
        if self.attention_channels == 0 || self.hidden_units == 0 {
            return Err(Error::Config("attention_channels and hidden_units must be positive".into()));
        }
        let side = self.feature_extent()?;
        if side < MIN_ATTENTION_EXTENT {
            return Err(Error::Config(format!(
                "trunk output is {side}x{side}; at least {MIN_ATTENTION_EXTENT}x{MIN_ATTENTION_EXTENT} is required"
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.conv_blocks.last().map_or(3, |b| b.out_channels)
    }

    /// Parameter names, shapes and fan-in, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut specs = Vec::new();
        let mut in_ch = 3;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let fan_in = in_ch * b.kernel * b.kernel;
            specs.push((format!("conv{i}.weight"), vec![b.out_channels, in_ch, b.kernel, b.kernel], fan_in));
            specs.push((format!("conv{i}.bias"), vec![b.out_channels], fan_in));
            in_ch = b.out_channels;
        }
        let a = self.attention_channels;
        specs.push(("attention.score1.weight".into(), vec![a, in_ch, 1, 1], in_ch));
        specs.push(("attention.score1.bias".into(), vec![a], in_ch));
        specs.push(("attention.score2.weight".into(), vec![1, a, 1, 1], a));
        specs.push(("attention.score2.bias".into(), vec![1], a));
        specs.push(("fc1.weight".into(), vec![in_ch, self.hidden_units], in_ch));
        specs.push(("fc1.bias".into(), vec![self.hidden_units], in_ch));
        specs.push(("fc2.weight".into(), vec![self.hidden_units, self.classes], self.hidden_units));
        specs.push(("fc2.bias".into(), vec![self.classes], self.hidden_units));
        specs
    }
}

/// Graph handles of the attention head parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub score1_weight: Var,
    pub score1_bias: Var,
    pub score2_weight: Var,
    pub score2_bias: Var,
}

/// Spatial soft-attention pooling of `N x C x H x W` features.
///
/// A per-location scorer made of 1x1 convolutions produces one score per
/// location; a softmax over the `H*W` locations gives weights `alpha`, and
/// the output is the `alpha`-weighted sum of the feature vectors. Returns
/// `(pooled N x C, alpha N x HW)`.
pub fn attention_pool<T: Scalar>(g: &mut Graph<T>, features: Var, head: &AttentionHead) -> Result<(Var, Var)> {
    let shape = g.shape(features).to_vec();
    let s1 = g.conv2d(features, head.score1_weight, 1, 0)?;
    let s1 = g.channel_bias(s1, head.score1_bias)?;
    let s1 = g.relu(s1)?;
    let s2 = g.conv2d(s1, head.score2_weight, 1, 0)?;
    let s2 = g.channel_bias(s2, head.score2_bias)?;
    let scores = g.reshape(s2, &[shape[0], shape[2] * shape[3]])?;
    let alpha = g.softmax(scores)?;
    let pooled = g.spatial_weighted_sum(features, alpha)?;
    Ok((pooled, alpha))
}

/// Handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    pub attention: Var,
}

/// Probabilities, their argmax grade and the model that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub probabilities: [f64; NUM_CLASSES],
    pub grade: GradeLabel,
    pub model_id: String,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl PredictionResult {
    pub fn from_probabilities(probabilities: [f64; NUM_CLASSES], model_id: impl Into<String>) -> Self {
        let grade = GradeLabel::new(argmax(&probabilities) as i64).expect("argmax is a valid grade");
        PredictionResult {
            probabilities,
            grade,
            model_id: model_id.into(),
        }
    }
}

/// Anything that maps a fundus image to a grade distribution.
pub trait Grader: Sync {
    fn model_id(&self) -> &str;
    fn predict(&self, img: &FundusImage) -> Result<PredictionResult>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    id: String,
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Builds a network with He-uniform weights drawn from `config.seed` and zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, fan_in) in config.param_specs() {
            let tensor = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound) as f32)
            };
            names.push(name);
            params.push(tensor);
        }
        Ok(Model {
            id: "model".into(),
            config,
            names,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Config("parameter list does not match config".into()));
        }
        for ((name, shape, _), p) in specs.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Config(format!("{name}: shape {:?} expected {shape:?}", p.shape())));
            }
        }
        Ok(Model {
            id: "model".into(),
            names: specs.into_iter().map(|(n, _, _)| n).collect(),
            config,
            params,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Parameters converted to another precision.
    pub fn params_as<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(Tensor::cast).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Registers the model's own weights as graph leaves.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.cast::<T>().with_requires_grad(requires_grad)))
            .collect()
    }

    /// Forward pass over `N x 3 x S x S` input using already bound parameter handles.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var], input: Var) -> Result<Forward> {
        let mut x = input;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("bound parameter list matches config");
        for block in &self.config.conv_blocks {
            let (w, b) = (next(), next());
            x = g.conv2d(x, w, block.stride, block.kernel / 2)?;
            x = g.channel_bias(x, b)?;
            x = g.relu(x)?;
            if block.pool > 1 {
                x = g.maxpool(x, block.pool, block.pool)?;
            }
        }
        let head = AttentionHead {
            score1_weight: next(),
            score1_bias: next(),
            score2_weight: next(),
            score2_bias: next(),
        };
        let (pooled, attention) = attention_pool(g, x, &head)?;
        let (w1, b1, w2, b2) = (next(), next(), next(), next());
        let h = g.dense(pooled, w1, b1)?;
        let h = g.relu(h)?;
        let logits = g.dense(h, w2, b2)?;
        let probs = g.softmax(logits)?;
        Ok(Forward {
            logits,
            probs,
            attention,
        })
    }

    /// Forward pass with explicitly supplied parameter values.
    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<T>, params: &[Tensor<T>], input: Var) -> Result<Forward> {
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        self.forward(g, &vars, input)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 3, self.config.input_size, self.config.input_size]
    }

    /// Logits and probabilities for a batch of preprocessed inputs.
    pub fn infer(&self, inputs: &[f32], batch: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut g = Graph::<f32>::new();
        let params = self.bind(&mut g, false);
        let x = g.leaf(Tensor::new(&self.input_shape(batch), inputs.to_vec())?);
        let out = self.forward(&mut g, &params, x)?;
        Ok((g.value(out.logits).data().to_vec(), g.value(out.probs).data().to_vec()))
    }

    /// Preprocesses and grades one image.
    pub fn predict(&self, img: &FundusImage) -> Result<PredictionResult> {
        let x = preprocess_to(img, self.config.input_size)?;
        let (_, probs) = self.infer(x.data(), 1)?;
        let probabilities = std::array::from_fn(|i| f64::from(probs[i]));
        Ok(PredictionResult::from_probabilities(probabilities, self.id.clone()))
    }
}

impl Grader for Model {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn predict(&self, img: &FundusImage) -> Result<PredictionResult> {
        Model::predict(self, img)
    }
}
