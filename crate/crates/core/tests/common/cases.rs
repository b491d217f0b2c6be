//! Differentiable operator fixtures for the finite-difference oracle.

use drgrade::model::Model;
use drgrade::tensor::{Graph, Tensor, Var};
use rand::Rng;

use super::{normal_tensor, rng, tiny_config, weighted_sum};

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub leaves: Vec<Tensor<f64>>,
    pub build: Build,
}

fn case(name: &'static str, leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> Case {
    Case {
        name,
        leaves,
        build: Box::new(build),
    }
}

fn one_hot(rows: usize, classes: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..classes)).collect();
    Tensor::from_fn(&[rows, classes], |i| if labels[i / classes] == i % classes { 1.0 } else { 0.0 })
}

/// One instance of every differentiable operator, drawn from `seed`.
pub fn operator_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let s = seed;
    let mut cases = Vec::new();

    let x = normal_tensor(&mut r, &[2, 3, 6, 5]);
    let k = normal_tensor(&mut r, &[4, 3, 3, 3]);
    cases.push(case("conv2d", vec![x, k], move |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1).unwrap();
        weighted_sum(g, y, s)
    }));

    let x = normal_tensor(&mut r, &[2, 2, 7, 7]);
    let k = normal_tensor(&mut r, &[3, 2, 3, 3]);
    cases.push(case("conv2d_strided", vec![x, k], move |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 0).unwrap();
        weighted_sum(g, y, s)
    }));

    let x = normal_tensor(&mut r, &[2, 3, 4, 4]);
    let b = normal_tensor(&mut r, &[3]);
    cases.push(case("channel_bias", vec![x, b], move |g, v| {
        let y = g.channel_bias(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    }));

    let x = normal_tensor(&mut r, &[3, 4]);
    let w = normal_tensor(&mut r, &[4, 5]);
    let b = normal_tensor(&mut r, &[5]);
    cases.push(case("dense", vec![x, w, b], move |g, v| {
        let y = g.dense(v[0], v[1], v[2]).unwrap();
        weighted_sum(g, y, s)
    }));

    let x = normal_tensor(&mut r, &[2, 2, 6, 6]);
    cases.push(case("maxpool", vec![x], move |g, v| {
        let y = g.maxpool(v[0], 2, 2).unwrap();
        weighted_sum(g, y, s)
    }));

    let x = normal_tensor(&mut r, &[3, 7]);
    cases.push(case("relu", vec![x], move |g, v| {
        let y = g.relu(v[0]).unwrap();
        weighted_sum(g, y, s)
    }));

    let x = normal_tensor(&mut r, &[4, 5]);
    cases.push(case("softmax", vec![x], move |g, v| {
        let y = g.softmax(v[0]).unwrap();
        weighted_sum(g, y, s)
    }));

    let p = Tensor::from_fn(&[4, 5], |_| r.random_range(0.1..1.0));
    let labels = one_hot(4, 5, s);
    cases.push(case("cross_entropy", vec![p], move |g, v| g.cross_entropy(v[0], &labels).unwrap()));

    let x = normal_tensor(&mut r, &[2, 3, 2, 2]);
    cases.push(case("reshape", vec![x], move |g, v| {
        let y = g.reshape(v[0], &[2, 12]).unwrap();
        weighted_sum(g, y, s)
    }));

    let f = normal_tensor(&mut r, &[2, 3, 3, 2]);
    let w = normal_tensor(&mut r, &[2, 6]);
    cases.push(case("spatial_weighted_sum", vec![f, w], move |g, v| {
        let y = g.spatial_weighted_sum(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    }));

    let a = normal_tensor(&mut r, &[3, 4]);
    let b = normal_tensor(&mut r, &[3, 4]);
    cases.push(case("add", vec![a.clone(), b.clone()], move |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    }));
    cases.push(case("mul", vec![a, b], move |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, y, s)
    }));

    let x = normal_tensor(&mut r, &[5, 3]);
    cases.push(case("sum", vec![x], |g, v| g.sum(v[0]).unwrap()));

    let x = normal_tensor(&mut r, &[4, 5]);
    let picks: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    cases.push(case("pick_sum", vec![x], move |g, v| g.pick_sum(v[0], &picks).unwrap()));

    let f = normal_tensor(&mut r, &[2, 4, 3, 3]);
    let w1 = normal_tensor(&mut r, &[3, 4, 1, 1]);
    let b1 = normal_tensor(&mut r, &[3]);
    let w2 = normal_tensor(&mut r, &[1, 3, 1, 1]);
    let b2 = normal_tensor(&mut r, &[1]);
    cases.push(case("attention_pool", vec![f, w1, b1, w2, b2], move |g, v| {
        let head = drgrade::model::AttentionHead {
            score1_weight: v[1],
            score1_bias: v[2],
            score2_weight: v[3],
            score2_bias: v[4],
        };
        let (y, _) = drgrade::model::attention_pool(g, v[0], &head).unwrap();
        weighted_sum(g, y, s)
    }));

    cases
}

/// Full network cross-entropy over a small batch; leaves are all parameters
/// followed by the input batch.
pub fn model_loss_case(seed: u64) -> Case {
    let model = Model::build(tiny_config(seed)).unwrap();
    let mut r = rng(seed.wrapping_add(1000));
    let mut leaves = model.params_as::<f64>();
    let batch = 2;
    leaves.push(Tensor::from_fn(&model.input_shape(batch), |_| r.random_range(0.0..1.0)));
    let labels = one_hot(batch, 5, seed);
    case("model_loss", leaves, move |g, v| {
        let (params, input) = v.split_at(v.len() - 1);
        let out = model.forward(g, params, input[0]).unwrap();
        g.cross_entropy(out.probs, &labels).unwrap()
    })
}
