//! A small reverse-mode tape over the kernels in [`crate::ops`].
//!
//! A [`Graph`] is built per forward pass. Nodes are appended in evaluation
//! order, so the tape is already topologically sorted and `backward` walks it
//! in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::state::{ModelState, ParamId};
use crate::tensor::{BinaryMask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Resize {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Var, Var),
    Softmax {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    WeightedPool {
        input: Var,
        weights: Vec<f64>,
        denom: f64,
    },
    Tile {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Stack {
        inputs: Vec<Var>,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    Mean {
        inputs: Vec<Var>,
    },
    CrossEntropy {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Adds `scale * grad` into the gradient buffer of every parameter leaf of `graph`.
    pub fn accumulate_into(&self, graph: &Graph, state: &mut ModelState, scale: f64) {
        let mut ids: Vec<_> = graph.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (&id, &var) in ids {
            let Some(g) = self.wrt(var) else { continue };
            let p = state.param_mut(id);
            if p.frozen {
                continue;
            }
            let buf = p.tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += scale * v;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never records gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that gradients are tracked for.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a model parameter. Repeated calls return the same node, so
    /// every use of a parameter shares one gradient.
    pub fn param(&mut self, state: &ModelState, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = state.param(id);
        let mut value = p.tensor.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (out, cols) = ops::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d_forward(self.value(input), window, stride)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::bilinear_resize(self.value(input), out_h, out_w)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Resize { input }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.rg(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise_mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Softmax { input }, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    /// Weighted spatial average with constant weights; `[D,h,w] -> [D]`.
    pub fn weighted_pool(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let (out, denom) = ops::weighted_spatial_pool(self.value(input), &weights)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::WeightedPool {
                input,
                weights,
                denom,
            },
            rg,
        ))
    }

    /// `[D] -> [D,h,w]`
    pub fn tile(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::tile(self.value(input), h, w)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Tile { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Stacks single-element tensors into a `[k,1,1]` tensor.
    pub fn stack_scalars(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptySupport);
        }
        let mut data = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape(format!("stack expects scalars, got {:?}", t.shape())));
            }
            data.push(t.data()[0]);
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(&[inputs.len(), 1, 1], data)?;
        Ok(self.push(
            out,
            Op::Stack {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_i weights[i] * inputs[i]`, accumulated in index order starting from the first term.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let k = inputs.len();
        if k == 0 {
            return Err(Error::EmptySupport);
        }
        if self.value(weights).len() != k {
            return Err(Error::shape(format!(
                "{} weights for {k} inputs",
                self.value(weights).len()
            )));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for &v in inputs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::shape("weighted sum inputs differ in shape"));
            }
        }
        let w = self.value(weights).data().to_vec();
        let mut out: Vec<f64> = self.value(inputs[0]).data().iter().map(|x| w[0] * x).collect();
        for (i, &v) in inputs.iter().enumerate().skip(1) {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += w[i] * x;
            }
        }
        let rg = self.rg(weights) || inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Elementwise mean: running sum in index order, divided by `k`.
    pub fn mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let k = inputs.len();
        if k == 0 {
            return Err(Error::EmptySupport);
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = self.value(inputs[0]).data().to_vec();
        for &v in &inputs[1..] {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::shape("mean inputs differ in shape"));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        let kf = k as f64;
        for o in &mut out {
            *o /= kf;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::Mean {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Spatial cross-entropy of a `[2,h,w]` probability map against a mask; a `[1]` scalar.
    pub fn cross_entropy(&mut self, probs: Var, target: &BinaryMask) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy_spatial_with_grad(self.value(probs), target)?;
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { input: probs, grad }, rg))
    }

    /// Multi-class spatial cross-entropy against one label per location.
    pub fn cross_entropy_labels(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy_labels_with_grad(self.value(probs), labels)?;
        let rg = self.rg(probs);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { input: probs, grad }, rg))
    }

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = vec![1.0; self.value(output).len()];
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let cg = ops::conv2d_backward(
                    g,
                    self.value(*input),
                    self.value(*weight),
                    cols,
                    *geom,
                    self.rg(*input),
                )
                .expect("shapes validated in forward");
                if self.rg(*input) {
                    self.acc(grads, *input, &cg.input);
                }
                self.acc(grads, *weight, &cg.weight);
                if let Some(b) = bias {
                    self.acc(grads, *b, &cg.bias);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    gi[a] += gv;
                }
                self.acc(grads, *input, &gi);
            }
            Op::Resize { input } => {
                let s = node.value.shape();
                let gi = ops::bilinear_resize_backward(g, self.value(*input).shape(), s[1], s[2]);
                self.acc(grads, *input, &gi);
            }
            Op::Relu { input } => {
                let gi: Vec<f64> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.acc(grads, *input, &gi);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let gi: Vec<f64> = self.value(*b).data().iter().zip(g).map(|(y, gv)| y * gv).collect();
                    self.acc(grads, *a, &gi);
                }
                if self.rg(*b) {
                    let gi: Vec<f64> = self.value(*a).data().iter().zip(g).map(|(x, gv)| x * gv).collect();
                    self.acc(grads, *b, &gi);
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.acc(grads, *a, &g[..na]);
                self.acc(grads, *b, &g[na..]);
            }
            Op::Softmax { input } => {
                let gi = ops::softmax_channels_backward(&node.value, g);
                self.acc(grads, *input, &gi);
            }
            Op::GlobalAvgPool { input } => {
                let (c, h, w) = self.value(*input).chw().expect("validated");
                let n = (h * w) as f64;
                let mut gi = Vec::with_capacity(c * h * w);
                for &gv in g.iter().take(c) {
                    gi.extend(std::iter::repeat_n(gv / n, h * w));
                }
                self.acc(grads, *input, &gi);
            }
            Op::WeightedPool {
                input,
                weights,
                denom,
            } => {
                let mut gi = Vec::with_capacity(self.value(*input).len());
                for &gv in g {
                    gi.extend(weights.iter().map(|m| gv * m / denom));
                }
                self.acc(grads, *input, &gi);
            }
            Op::Tile { input } => {
                let hw = node.value.shape()[1] * node.value.shape()[2];
                let gi: Vec<f64> = g.chunks(hw).map(|c| c.iter().sum()).collect();
                self.acc(grads, *input, &gi);
            }
            Op::Reshape { input } => self.acc(grads, *input, g),
            Op::Stack { inputs } => {
                for (i, &v) in inputs.iter().enumerate() {
                    self.acc(grads, v, &g[i..i + 1]);
                }
            }
            Op::WeightedSum { inputs, weights } => {
                let w = self.value(*weights).data().to_vec();
                for (i, &v) in inputs.iter().enumerate() {
                    if self.rg(v) {
                        let gi: Vec<f64> = g.iter().map(|gv| gv * w[i]).collect();
                        self.acc(grads, v, &gi);
                    }
                }
                if self.rg(*weights) {
                    let gw: Vec<f64> = inputs
                        .iter()
                        .map(|&v| self.value(v).data().iter().zip(g).map(|(x, gv)| x * gv).sum())
                        .collect();
                    self.acc(grads, *weights, &gw);
                }
            }
            Op::Mean { inputs } => {
                let k = inputs.len() as f64;
                let gi: Vec<f64> = g.iter().map(|gv| gv / k).collect();
                for &v in inputs {
                    self.acc(grads, v, &gi);
                }
            }
            Op::CrossEntropy { input, grad } => {
                let gi: Vec<f64> = grad.iter().map(|d| d * g[0]).collect();
                self.acc(grads, *input, &gi);
            }
        }
    }
}
