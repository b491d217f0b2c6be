#![allow(dead_code)]

use drgrade::fundus::rng_from_seed;
use drgrade::model::{ConvBlock, ModelConfig};
use drgrade::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rng_from_seed(seed)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        conv_blocks: vec![ConvBlock::new(4), ConvBlock::new(6)],
        attention_channels: 3,
        hidden_units: 5,
        classes: 5,
        seed,
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max |numeric|` over all checked coordinates.
    pub rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Checks every leaf gradient of the scalar built by `build` against a
/// central difference with step `h`, replayed in double precision.
///
/// Coordinates whose `+h` and `-h` replays take different ReLU or max-pool
/// branches than the unperturbed pass are skipped: the function is not
/// differentiable across them.
pub fn grad_check(leaves: &[Tensor<f64>], h: f64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> GradCheck {
    let eval = |values: &[Tensor<f64>]| -> (f64, u64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &vars);
        (g.value(root).data()[0], g.branch_signature())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let root = build(&mut g, &vars);
    g.backward(root).expect("scalar root");
    let base_signature = g.branch_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut max_diff: f64 = 0.0;
    let mut max_numeric: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    let mut work = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for (i, (&orig, &grad)) in leaf.data().iter().zip(&analytic[li]).enumerate() {
            work[li].data_mut()[i] = orig + h;
            let (plus, sp) = eval(&work);
            work[li].data_mut()[i] = orig - h;
            let (minus, sm) = eval(&work);
            work[li].data_mut()[i] = orig;
            if sp != base_signature || sm != base_signature {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            max_diff = max_diff.max((grad - numeric).abs());
            max_numeric = max_numeric.max(numeric.abs());
            checked += 1;
        }
    }
    GradCheck {
        rel_error: if max_numeric > 0.0 { max_diff / max_numeric } else { max_diff },
        checked,
        skipped,
    }
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights so
/// every output element gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5eed);
    let shape = g.shape(v).to_vec();
    let w = g.leaf(normal_tensor(&mut r, &shape));
    let prod = g.mul(v, w).unwrap();
    g.sum(prod).unwrap()
}

pub mod cases;
pub mod oracles;
