//! Reverse-mode differentiation over a recorded tape of NCHW operations.
//!
//! Network forward passes are written once against [`Exec`] and run either
//! on [`Eager`] (values only, intermediates freed as they go out of scope) or
//! on a [`Graph`] (every value kept for the backward sweep). A `Graph`
//! decides trainability by parameter-name prefix: leaves whose key starts
//! with a registered prefix require gradients, everything else is frozen.

use std::collections::HashMap;
use std::sync::Arc;

use crate::nn::Conv2d;
use crate::ops;
use crate::tensor::Tensor;

/// Operations a network forward pass may use.
pub trait Exec {
    type V;

    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn conv2d(&mut self, x: &Self::V, layer: &Conv2d) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn leaky_relu(&mut self, x: &Self::V, slope: f32) -> Self::V;
    fn max_pool2(&mut self, x: &Self::V) -> Self::V;
    fn upsample_nearest2(&mut self, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn affine_channels(&mut self, x: &Self::V, scale: &[f32], shift: &[f32]) -> Self::V;
    fn concat_channels(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Exec for Eager {
    type V = Tensor;

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn conv2d(&mut self, x: &Tensor, layer: &Conv2d) -> Tensor {
        ops::conv2d(x, &layer.weight, Some(&layer.bias), layer.stride)
    }
    fn relu(&mut self, x: &Tensor) -> Tensor {
        ops::relu(x)
    }
    fn leaky_relu(&mut self, x: &Tensor, slope: f32) -> Tensor {
        ops::leaky_relu(x, slope)
    }
    fn max_pool2(&mut self, x: &Tensor) -> Tensor {
        ops::max_pool2(x).0
    }
    fn upsample_nearest2(&mut self, x: &Tensor) -> Tensor {
        ops::upsample_nearest2(x)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = a.clone();
        out.add_assign(b);
        out
    }
    fn affine_channels(&mut self, x: &Tensor, scale: &[f32], shift: &[f32]) -> Tensor {
        ops::affine_channels(x, scale, shift)
    }
    fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        ops::concat_channels(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    MaxPool {
        x: Var,
        arg: Vec<u8>,
    },
    Upsample {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: Vec<f32>,
    },
    Concat {
        a: Var,
        b: Var,
        ca: usize,
    },
    /// Scalar function of `x` whose local gradient was computed at forward time.
    Scalar {
        x: Var,
        grad: Tensor,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: Vec<String>,
    params: HashMap<String, Var>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter key such as `drafting/d4.conv.weight`.
    pub fn param(&self, key: &str) -> Option<&Tensor> {
        self.params.get(key).and_then(|v| self.get(*v))
    }

    pub fn param_keys(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }
}

impl Graph {
    /// A graph in which parameters under any of `prefixes` are trainable.
    pub fn new<S: AsRef<str>>(prefixes: &[S]) -> Self {
        Graph {
            nodes: Vec::new(),
            trainable: prefixes.iter().map(|s| s.as_ref().to_string()).collect(),
            params: HashMap::new(),
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
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients (e.g. an image being optimised).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn param_leaf(&mut self, key: String, t: &Arc<Tensor>) -> Var {
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let trainable = self.trainable.iter().any(|p| key.starts_with(p.as_str()));
        self.nodes.push(Node {
            value: Arc::clone(t),
            requires_grad: trainable,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    pub fn is_trainable(&self, key: &str) -> bool {
        self.trainable.iter().any(|p| key.starts_with(p.as_str()))
    }

    /// Records a scalar `value` that depends on `x` with local gradient `grad`
    /// (same shape as `x`).
    pub fn scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.nodes[x.0].value.shape(), "scalar grad shape");
        let rg = self.rg(x);
        self.push(Tensor::scalar(value as f32), Op::Scalar { x, grad }, rg)
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|(t, w)| self.nodes[t.0].value.item() as f64 * w).sum();
        let rg = terms.iter().any(|(t, _)| self.rg(*t));
        self.push(Tensor::scalar(v as f32), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, stride } => {
                    let xv = &self.nodes[x.0].value;
                    if self.rg(*x) {
                        let (_, _, h, wd) = xv.dims4();
                        acc(
                            *x,
                            ops::conv2d_grad_input(&g, &self.nodes[w.0].value, *stride, (h, wd)),
                            &mut grads,
                        );
                    }
                    if self.rg(*w) || self.rg(*b) {
                        let (gw, gb) = ops::conv2d_grad_params(xv, &g, self.nodes[w.0].value.shape(), *stride);
                        acc(*w, gw, &mut grads);
                        acc(*b, gb, &mut grads);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    acc(*x, ops::leaky_relu_backward(&node.value, &g, *slope), &mut grads);
                }
                Op::MaxPool { x, arg } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    acc(*x, ops::max_pool2_backward(&g, arg, &shape), &mut grads);
                }
                Op::Upsample { x } => acc(*x, ops::upsample_nearest2_backward(&g), &mut grads),
                Op::Add { a, b } => {
                    if self.rg(*b) {
                        acc(*b, g.clone(), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Affine { x, scale } => {
                    let zero = vec![0.0; scale.len()];
                    acc(*x, ops::affine_channels(&g, scale, &zero), &mut grads);
                }
                Op::Concat { a, b, ca } => {
                    let (ga, gb) = ops::split_channels(&g, *ca);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scalar { x, grad } => {
                    acc(*x, grad.scaled(g.item()), &mut grads);
                }
                Op::WeightedSum { terms } => {
                    for (t, w) in terms {
                        acc(*t, Tensor::scalar(g.item() * *w as f32), &mut grads);
                    }
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

impl Exec for Graph {
    type V = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn conv2d(&mut self, x: &Var, layer: &Conv2d) -> Var {
        let w = self.param_leaf(layer.weight_key(), &layer.weight);
        let b = self.param_leaf(layer.bias_key(), &layer.bias);
        let y = ops::conv2d(&self.nodes[x.0].value, &layer.weight, Some(&layer.bias), layer.stride);
        let rg = self.rg(*x) || self.rg(w) || self.rg(b);
        self.push(
            y,
            Op::Conv {
                x: *x,
                w,
                b,
                stride: layer.stride,
            },
            rg,
        )
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    fn leaky_relu(&mut self, x: &Var, slope: f32) -> Var {
        let y = ops::leaky_relu(&self.nodes[x.0].value, slope);
        let rg = self.rg(*x);
        self.push(y, Op::LeakyRelu { x: *x, slope }, rg)
    }

    fn max_pool2(&mut self, x: &Var) -> Var {
        let (y, arg) = ops::max_pool2(&self.nodes[x.0].value);
        let rg = self.rg(*x);
        self.push(y, Op::MaxPool { x: *x, arg }, rg)
    }

    fn upsample_nearest2(&mut self, x: &Var) -> Var {
        let y = ops::upsample_nearest2(&self.nodes[x.0].value);
        let rg = self.rg(*x);
        self.push(y, Op::Upsample { x: *x }, rg)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let mut y = (*self.nodes[a.0].value).clone();
        y.add_assign(&self.nodes[b.0].value);
        let rg = self.rg(*a) || self.rg(*b);
        self.push(y, Op::Add { a: *a, b: *b }, rg)
    }

    fn affine_channels(&mut self, x: &Var, scale: &[f32], shift: &[f32]) -> Var {
        let y = ops::affine_channels(&self.nodes[x.0].value, scale, shift);
        let rg = self.rg(*x);
        self.push(
            y,
            Op::Affine {
                x: *x,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Var {
        let ca = self.nodes[a.0].value.dims4().1;
        let y = ops::concat_channels(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(*a) || self.rg(*b);
        self.push(y, Op::Concat { a: *a, b: *b, ca }, rg)
    }
}
