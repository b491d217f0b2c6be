use super::kernels::{self, ConvGeom, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability floor applied before taking logs in [`Graph::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    ChannelBias {
        input: usize,
        bias: usize,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu {
        input: usize,
    },
    Softmax {
        input: usize,
    },
    CrossEntropy {
        probs: usize,
        targets: Vec<usize>,
    },
    Reshape {
        input: usize,
    },
    SpatialWeightedSum {
        features: usize,
        weights: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        input: usize,
    },
    PickSum {
        input: usize,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
}

/// A tape of operations recorded in execution order.
///
/// Inputs always precede their consumers, so the recording order is a
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(Op::Leaf, tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears every accumulated gradient in the graph.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].value.requires_grad())
    }

    fn derived(&mut self, op: Op, inputs: &[usize], shape: &[usize], data: Vec<T>) -> Result<Var> {
        let requires_grad = self.needs_grad(inputs);
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        Ok(self.push(op, value))
    }

    /// 2-D cross-correlation of an `N x C x H x W` input with an
    /// `O x C x kh x kw` kernel, zero padding on all four sides.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW kernel, got {xs:?} and {ks:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if c != kc {
            return Err(Error::shape(
                "conv2d",
                format!("input channel axis (1) has extent {c} but kernel in-channel axis (1) has {kc}"),
            ));
        }
        if h + 2 * padding < kh {
            return Err(Error::shape(
                "conv2d",
                format!("padded input height axis (2) is {} but kernel height axis (2) is {kh}", h + 2 * padding),
            ));
        }
        if w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("padded input width axis (3) is {} but kernel width axis (3) is {kw}", w + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(kernel).data(),
            o,
        );
        self.derived(
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
                batch: n,
                out_channels: o,
            },
            &[input.0, kernel.0],
            &[n, o, geom.out_h, geom.out_w],
            out,
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of an NCHW tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(Error::shape(
                "channel_bias",
                format!("bias shape {bs:?} does not match channel axis of {xs:?}"),
            ));
        }
        let plane = xs[2] * xs[3];
        let b = self.value(bias).data();
        let out: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / plane) % xs[1]])
            .collect();
        self.derived(
            Op::ChannelBias {
                input: input.0,
                bias: bias.0,
            },
            &[input.0, bias.0],
            &xs,
            out,
        )
    }

    /// Affine map `input (N x F) * weight (F x C) + bias (C)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?} and weight {ws:?} inner extents disagree"),
            ));
        }
        if bs != [ws[1]] {
            return Err(Error::shape(
                "dense",
                format!("bias {bs:?} does not match output features {}", ws[1]),
            ));
        }
        let (n, c) = (xs[0], ws[1]);
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n * c).map(|i| b[i % c]).collect();
        kernels::gemm(
            MatRef::new(self.value(input).data(), n, xs[1]),
            MatRef::new(self.value(weight).data(), ws[0], c),
            T::one(),
            &mut out,
        );
        self.derived(
            Op::Dense {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            &[input.0, weight.0, bias.0],
            &[n, c],
            out,
        )
    }

    /// Max pooling over the two trailing axes.
    pub fn maxpool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("maxpool", format!("need spatial axes, got {xs:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::invalid("maxpool", "window and stride must be positive"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if window > h || window > w {
            return Err(Error::invalid(
                "maxpool",
                format!("window {window} larger than input spatial extents {h}x{w}"),
            ));
        }
        let planes = xs[..xs.len() - 2].iter().product();
        let (out, argmax, oh, ow) =
            kernels::maxpool_forward(self.value(input).data(), planes, h, w, window, stride);
        let mut shape = xs.clone();
        let len = shape.len();
        shape[len - 2] = oh;
        shape[len - 1] = ow;
        self.derived(
            Op::MaxPool {
                input: input.0,
                argmax,
            },
            &[input.0],
            &shape,
            out,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let out = self
            .value(input)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.derived(Op::Relu { input: input.0 }, &[input.0], &shape, out)
    }

    /// Row-wise softmax of an `N x C` tensor.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("softmax", format!("expected N x C, got {shape:?}")));
        }
        let out = kernels::softmax_rows(self.value(logits).data(), shape[1]);
        self.derived(Op::Softmax { input: logits.0 }, &[logits.0], &shape, out)
    }

    /// Mean negative log-probability of the true class; `labels` must be one-hot rows.
    pub fn cross_entropy(&mut self, probs: Var, labels: &Tensor<T>) -> Result<Var> {
        let ps = self.shape(probs).to_vec();
        if ps.len() != 2 || labels.shape() != ps.as_slice() {
            return Err(Error::shape(
                "cross_entropy",
                format!("probs {ps:?} and labels {:?} must both be N x C", labels.shape()),
            ));
        }
        let c = ps[1];
        let mut targets = Vec::with_capacity(ps[0]);
        for (row, values) in labels.data().chunks_exact(c).enumerate() {
            let ones: Vec<usize> = values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == T::one())
                .map(|(i, _)| i)
                .collect();
            let zeros = values.iter().filter(|&&v| v == T::zero()).count();
            if ones.len() != 1 || zeros != c - 1 {
                return Err(Error::NotOneHot { row });
            }
            targets.push(ones[0]);
        }
        let floor = T::of_f64(PROB_FLOOR);
        let p = self.value(probs).data();
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(row, &t)| -p[row * c + t].max(floor).ln())
            .sum();
        let loss = total / T::of_f64(ps[0] as f64);
        self.derived(
            Op::CrossEntropy {
                probs: probs.0,
                targets,
            },
            &[probs.0],
            &[1],
            vec![loss],
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(input).numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let data = self.value(input).data().to_vec();
        self.derived(Op::Reshape { input: input.0 }, &[input.0], shape, data)
    }

    /// `out[n, c] = sum_s weights[n, s] * features[n, c, s]` over the
    /// flattened spatial locations `s` of an NCHW feature map.
    pub fn spatial_weighted_sum(&mut self, features: Var, weights: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        if fs.len() != 4 {
            return Err(Error::shape(
                "spatial_weighted_sum",
                format!("features must be NCHW, got {fs:?}"),
            ));
        }
        let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
        if self.value(weights).numel() != n * hw || self.shape(weights)[0] != n {
            return Err(Error::shape(
                "spatial_weighted_sum",
                format!("weights {:?} do not cover {n} x {hw} locations", self.shape(weights)),
            ));
        }
        let f = self.value(features).data();
        let a = self.value(weights).data();
        let mut out = vec![T::zero(); n * c];
        for s in 0..n {
            let alpha = &a[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let plane = &f[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                out[s * c + ch] = plane.iter().zip(alpha).map(|(&v, &w)| v * w).sum();
            }
        }
        self.derived(
            Op::SpatialWeightedSum {
                features: features.0,
                weights: weights.0,
            },
            &[features.0, weights.0],
            &[n, c],
            out,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y)
            .and_then(|(shape, out)| self.derived(Op::Add { a: a.0, b: b.0 }, &[a.0, b.0], &shape, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y)
            .and_then(|(shape, out)| self.derived(Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0], &shape, out))
    }

    fn elementwise(&self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().copied().sum();
        self.derived(Op::Sum { input: input.0 }, &[input.0], &[1], vec![total])
    }

    /// `sum_n input[n, indices[n]]` over the rows of an `N x C` tensor.
    pub fn pick_sum(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || indices.len() != shape[0] {
            return Err(Error::shape(
                "pick_sum",
                format!("need one index per row of {shape:?}, got {}", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[1]) {
            return Err(Error::invalid("pick_sum", format!("index {bad} out of range 0..{}", shape[1])));
        }
        let data = self.value(input).data();
        let total = indices
            .iter()
            .enumerate()
            .map(|(row, &col)| data[row * shape[1] + col])
            .sum();
        self.derived(
            Op::PickSum {
                input: input.0,
                indices: indices.to_vec(),
            },
            &[input.0],
            &[1],
            vec![total],
        )
    }

    /// Fingerprint of every non-smooth branch taken in the forward pass
    /// (ReLU signs and max-pool winners). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.nodes[*input].value.data() {
                        mix(u64::from(v > T::zero()));
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| mix(i as u64)),
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar root. Leaf gradients are added to whatever
    /// they already hold; call [`Graph::zero_grad`] first for a fresh pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].value.shape().to_vec()));
        }
        if !self.nodes[root.0].value.requires_grad() {
            return Ok(());
        }
        // intermediate gradients are per-pass; only leaves accumulate
        for node in &mut self.nodes[..=root.0] {
            if !matches!(node.op, Op::Leaf) {
                node.value.zero_grad();
            }
        }
        accumulate(&mut self.nodes[root.0].value, vec![T::one()]);

        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(gout) = node.value.grad() else {
                continue;
            };
            let contributions = local_gradients(&node.op, &node.value, gout, before);
            for (target, grad) in contributions {
                accumulate(&mut before[target].value, grad);
            }
        }
        Ok(())
    }

    /// Copy of a node's tensor, including its gradient if one was accumulated.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }
}

fn accumulate<T: Scalar>(target: &mut Tensor<T>, contribution: Vec<T>) {
    if !target.requires_grad() {
        return;
    }
    match target.grad.as_mut() {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a = *a + b;
            }
        }
        None => target.set_grad(Some(contribution)),
    }
}

fn wants<T: Scalar>(nodes: &[Node<T>], i: usize) -> bool {
    nodes[i].value.requires_grad()
}

/// Computes the vector-Jacobian product of one node for each input that needs it.
fn local_gradients<T: Scalar>(op: &Op, out: &Tensor<T>, gout: &[T], nodes: &[Node<T>]) -> Vec<(usize, Vec<T>)> {
    let val = |i: usize| nodes[i].value.data();
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            geom,
            batch,
            out_channels,
        } => {
            let mut dx = wants(nodes, *input).then(|| vec![T::zero(); nodes[*input].value.numel()]);
            let mut dk = wants(nodes, *kernel).then(|| vec![T::zero(); nodes[*kernel].value.numel()]);
            kernels::conv2d_backward(
                val(*input),
                *batch,
                geom,
                val(*kernel),
                *out_channels,
                gout,
                dx.as_deref_mut(),
                dk.as_deref_mut(),
            );
            res.extend(dx.map(|g| (*input, g)));
            res.extend(dk.map(|g| (*kernel, g)));
        }
        Op::ChannelBias { input, bias } => {
            let s = out.shape();
            let plane = s[2] * s[3];
            if wants(nodes, *bias) {
                let mut db = vec![T::zero(); s[1]];
                for (i, &g) in gout.iter().enumerate() {
                    let c = (i / plane) % s[1];
                    db[c] = db[c] + g;
                }
                res.push((*bias, db));
            }
            if wants(nodes, *input) {
                res.push((*input, gout.to_vec()));
            }
        }
        Op::Dense { input, weight, bias } => {
            let xs = nodes[*input].value.shape();
            let (n, f) = (xs[0], xs[1]);
            let c = out.shape()[1];
            if wants(nodes, *input) {
                let mut dx = vec![T::zero(); n * f];
                kernels::gemm(MatRef::new(gout, n, c), MatRef::t(val(*weight), c, f), T::zero(), &mut dx);
                res.push((*input, dx));
            }
            if wants(nodes, *weight) {
                let mut dw = vec![T::zero(); f * c];
                kernels::gemm(MatRef::t(val(*input), f, n), MatRef::new(gout, n, c), T::zero(), &mut dw);
                res.push((*weight, dw));
            }
            if wants(nodes, *bias) {
                let mut db = vec![T::zero(); c];
                for row in gout.chunks_exact(c) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                res.push((*bias, db));
            }
        }
        Op::MaxPool { input, argmax } => {
            if wants(nodes, *input) {
                let mut dx = vec![T::zero(); nodes[*input].value.numel()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    dx[src] = dx[src] + g;
                }
                res.push((*input, dx));
            }
        }
        Op::Relu { input } => {
            let dx = val(*input)
                .iter()
                .zip(gout)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect();
            res.push((*input, dx));
        }
        Op::Softmax { input } => {
            let c = out.shape()[1];
            let mut dx = vec![T::zero(); out.numel()];
            for ((y, g), d) in out
                .data()
                .chunks_exact(c)
                .zip(gout.chunks_exact(c))
                .zip(dx.chunks_exact_mut(c))
            {
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    d[j] = y[j] * (g[j] - dot);
                }
            }
            res.push((*input, dx));
        }
        Op::CrossEntropy { probs, targets } => {
            let p = val(*probs);
            let c = nodes[*probs].value.shape()[1];
            let scale = gout[0] / T::of_f64(targets.len() as f64);
            let floor = T::of_f64(PROB_FLOOR);
            let mut dp = vec![T::zero(); p.len()];
            for (row, &t) in targets.iter().enumerate() {
                let v = p[row * c + t];
                if v > floor {
                    dp[row * c + t] = -scale / v;
                }
            }
            res.push((*probs, dp));
        }
        Op::Reshape { input } => res.push((*input, gout.to_vec())),
        Op::SpatialWeightedSum { features, weights } => {
            let fs = nodes[*features].value.shape();
            let (n, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
            let f = val(*features);
            let a = val(*weights);
            if wants(nodes, *features) {
                let mut df = vec![T::zero(); f.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let g = gout[s * c + ch];
                        let base = (s * c + ch) * hw;
                        for l in 0..hw {
                            df[base + l] = g * a[s * hw + l];
                        }
                    }
                }
                res.push((*features, df));
            }
            if wants(nodes, *weights) {
                let mut da = vec![T::zero(); a.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let g = gout[s * c + ch];
                        let base = (s * c + ch) * hw;
                        for l in 0..hw {
                            da[s * hw + l] = da[s * hw + l] + g * f[base + l];
                        }
                    }
                }
                res.push((*weights, da));
            }
        }
        Op::Add { a, b } => {
            res.push((*a, gout.to_vec()));
            res.push((*b, gout.to_vec()));
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            res.push((*a, gout.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
            res.push((*b, gout.iter().zip(va).map(|(&g, &x)| g * x).collect()));
        }
        Op::Sum { input } => {
            res.push((*input, vec![gout[0]; nodes[*input].value.numel()]));
        }
        Op::PickSum { input, indices } => {
            let c = nodes[*input].value.shape()[1];
            let mut dx = vec![T::zero(); nodes[*input].value.numel()];
            for (row, &col) in indices.iter().enumerate() {
                dx[row * c + col] = gout[0];
            }
            res.push((*input, dx));
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph<f32>, shape: &[usize], data: Vec<f32>, rg: bool) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(rg))
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let k = leaf(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn same_padding_keeps_extent() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 4, 4], vec![0.5; 16], false);
        let k = leaf(&mut g, &[1, 1, 3, 3], vec![1.0; 9], false);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 4, 4], vec![0.0; 32], false);
        let k = leaf(&mut g, &[1, 3, 3, 3], vec![0.0; 27], false);
        let err = g.conv2d(x, k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channel axis"), "{err}");
        let x = leaf(&mut g, &[1, 1, 2, 2], vec![0.0; 4], false);
        let k = leaf(&mut g, &[1, 1, 3, 3], vec![0.0; 9], false);
        let err = g.conv2d(x, k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("height axis"), "{err}");
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0], false);
        let eye = leaf(&mut g, &[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], false);
        let zero_b = leaf(&mut g, &[3], vec![0.0; 3], false);
        let y = g.dense(x, eye, zero_b).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let zero_w = leaf(&mut g, &[3, 2], vec![0.0; 6], false);
        let b = leaf(&mut g, &[2], vec![0.25, -1.5], false);
        let y = g.dense(x, zero_w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn dense_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], vec![0.0; 6], false);
        let w = leaf(&mut g, &[4, 2], vec![0.0; 8], false);
        let b = leaf(&mut g, &[2], vec![0.0; 2], false);
        assert!(matches!(g.dense(x, w, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        let y = g.maxpool(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);

        let c = leaf(&mut g, &[1, 2, 4, 4], vec![0.7; 32], false);
        let y = g.maxpool(c, 2, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));

        let small = leaf(&mut g, &[1, 1, 2, 2], vec![0.0; 4], false);
        assert!(g.maxpool(small, 3, 1).is_err());
    }

    #[test]
    fn relu_cases() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[4], vec![-1.0, -0.5, -3.0, -0.0], false);
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let x = leaf(&mut g, &[3], vec![0.0, 1.5, 2.0], true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.5, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // subgradient at zero is zero
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 5], vec![3.0; 5], false);
        let p = g.softmax(x).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 0.2).abs() < 1e-7);
        }
        let x = leaf(&mut g, &[1, 2], vec![1000.0, 0.0], false);
        let p = g.softmax(x).unwrap();
        let d = g.value(p).data();
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1] >= 0.0 && d[1] < 1e-6);
        assert!(g.value(p).all_finite());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0], false);
        let labels = Tensor::new(&[1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let l = g.cross_entropy(p, &labels).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-6);

        let p = leaf(&mut g, &[2, 5], vec![0.2; 10], false);
        let labels = Tensor::new(&[2, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let l = g.cross_entropy(p, &labels).unwrap();
        assert!((g.value(l).data()[0] - 5f32.ln()).abs() < 1e-6);
        assert!((5f64.ln() - 1.60944).abs() < 1e-5);

        let bad = Tensor::new(&[2, 5], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(g.cross_entropy(p, &bad), Err(Error::NotOneHot { row: 0 })));
        let soft = Tensor::new(&[2, 5], vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(g.cross_entropy(p, &soft), Err(Error::NotOneHot { row: 0 })));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1], vec![3.0], true);
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);

        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], vec![1.0, 2.0, 3.0], true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn fan_out_scales_gradient() {
        let single = {
            let mut g = Graph::new();
            let x = leaf(&mut g, &[3], vec![0.25, -1.5, 2.0], true);
            let sq = g.mul(x, x).unwrap();
            let s = g.sum(sq).unwrap();
            g.backward(s).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        for k in 2..6 {
            let mut g = Graph::new();
            let x = leaf(&mut g, &[3], vec![0.25, -1.5, 2.0], true);
            let mut acc = None;
            for _ in 0..k {
                let sq = g.mul(x, x).unwrap();
                let s = g.sum(sq).unwrap();
                acc = Some(match acc {
                    None => s,
                    Some(prev) => g.add(prev, s).unwrap(),
                });
            }
            g.backward(acc.unwrap()).unwrap();
            let expect: Vec<f32> = single.iter().map(|v| v * k as f32).collect();
            assert_eq!(g.grad(x).unwrap(), expect.as_slice());
        }
    }

    #[test]
    fn zero_grad_resets_accumulation() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0], true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], vec![1.0, 2.0], false);
        let w = leaf(&mut g, &[2], vec![3.0, 4.0], true);
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }
}
