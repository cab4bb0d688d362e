//! Tape of executed operations and the reverse sweep over it.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::norm::{BatchNormState, NormMode};
use super::ops;
use super::storage::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{compensated_sum, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation defined outside this module, e.g. the mean-field CRF layer.
pub trait CustomOp<S: Scalar> {
    fn name(&self) -> &'static str;

    /// Computes the output and caches whatever the backward pass needs.
    fn forward(&mut self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>>;

    /// One gradient per input, `None` when the input receives nothing.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad_output: &[S]) -> Vec<Option<Vec<S>>>;

    /// Feeds the op's non-smooth decisions (clamps, branches) into `state`.
    fn hash_decisions(&self, _state: &mut DefaultHasher) {}
}

enum Op<S: Scalar> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        patches: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        cache: ops::BnCache<S>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Gap(Var),
    Resize(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    ChannelScale {
        scale: Var,
        map: Var,
    },
    SpatialScale {
        gate: Var,
        map: Var,
    },
    Sum(Var),
    Scale(Var, S),
    Reshape(Var),
    WeightedBce {
        probs: Var,
        targets: Vec<S>,
        weights: Vec<S>,
        clamped: Vec<bool>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<S>>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations in execution order; `backward` walks them in reverse.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// 3x3 convolution, stride 1, zero padding 1. Weight `[3, 3, cin, cout]`, bias `[cout]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.patch_conv3x3(input, weight, bias, 1)
    }

    /// 3x3 convolution applied independently on each tile of a `k x k` partition.
    ///
    /// Every tile has its own filters (weight `[k*k, 3, 3, cin, cout]`, bias `[k*k, cout]`)
    /// and is zero padded at its own border. `k = 1` is an ordinary convolution and
    /// also accepts the unbatched `[3, 3, cin, cout]` / `[cout]` layouts.
    pub fn patch_conv3x3(&mut self, input: Var, weight: Var, bias: Option<Var>, k: usize) -> Result<Var> {
        let out = ops::conv_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), k)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                patches: k,
            },
            rg,
        ))
    }

    /// `out[.., m] = bias[m] + sum_k input[.., k] * weight[k, m]` for `[k]` or `[batch, k]` input.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| ops::sigmoid(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(out, Op::Sigmoid(input), rg)
    }

    /// Per-channel normalisation over every position of the last axis.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        state: &mut BatchNormState<S>,
        mode: NormMode,
    ) -> Result<Var> {
        let (out, cache) = ops::bn_forward(self.value(input), self.value(scale), self.value(shift), state, mode)?;
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                cache,
            },
            rg,
        ))
    }

    pub fn max_pool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::max_pool_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// `[b, h, w, c] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::gap_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Gap(input), rg))
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resize_forward(self.value(input), out_h, out_w)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Resize(input), rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_forward(&values)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_same(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::zip_same(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies channel `k` of every image's map by `scale[b, k]`.
    pub fn channel_scale(&mut self, scale: Var, map: Var) -> Result<Var> {
        let out = ops::channel_scale_forward(self.value(scale), self.value(map))?;
        let rg = self.rg(scale) || self.rg(map);
        Ok(self.push(out, Op::ChannelScale { scale, map }, rg))
    }

    /// Multiplies every channel of `map` elementwise by the one-channel `gate`.
    pub fn spatial_scale(&mut self, gate: Var, map: Var) -> Result<Var> {
        let out = ops::spatial_scale_forward(self.value(gate), self.value(map))?;
        let rg = self.rg(gate) || self.rg(map);
        Ok(self.push(out, Op::SpatialScale { gate, map }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = compensated_sum(self.value(input).data().iter().copied());
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(out, Op::Scale(input, factor), rg)
    }

    /// Batch-mean weighted binary cross entropy over `[batch, n]` probabilities.
    pub fn weighted_bce(&mut self, probs: Var, targets: &[S], weights: &[S]) -> Result<Var> {
        let (loss, clamped) = ops::bce_forward(self.value(probs), targets, weights)?;
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                clamped,
            },
            rg,
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp<S>>) -> Result<Var> {
        let values: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Gradients of earlier runs are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::structure(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; `None` if unreachable.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when `v` was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<S> {
        self.grad(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); self.value(v).len()])
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        let mut contribs: Vec<(Var, Vec<S>)> = Vec::new();
        {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let need = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    patches,
                } => {
                    let (gi, gw, gb) = ops::conv_backward(
                        val(*input),
                        val(*weight),
                        g,
                        *patches,
                        need(*input),
                        need(*weight),
                        bias.is_some_and(need),
                    );
                    if let Some(gi) = gi {
                        contribs.push((*input, gi));
                    }
                    if let Some(gw) = gw {
                        contribs.push((*weight, gw));
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        contribs.push((*b, gb));
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (gi, gw, gb) = ops::linear_backward(val(*input), val(*weight), g);
                    contribs.push((*input, gi));
                    contribs.push((*weight, gw));
                    if let Some(b) = bias {
                        contribs.push((*b, gb));
                    }
                }
                Op::Relu(x) => {
                    let gi = val(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                        .collect();
                    contribs.push((*x, gi));
                }
                Op::Sigmoid(x) => {
                    let gi = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (S::one() - s))
                        .collect();
                    contribs.push((*x, gi));
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    cache,
                } => {
                    let (gi, gs, gb) = ops::bn_backward(cache, val(*scale), g);
                    contribs.push((*input, gi));
                    contribs.push((*scale, gs));
                    contribs.push((*shift, gb));
                }
                Op::MaxPool { input, argmax } => {
                    let mut gi = vec![S::zero(); val(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gi[src] += gv;
                    }
                    contribs.push((*input, gi));
                }
                Op::Gap(x) => contribs.push((*x, ops::gap_backward(val(*x), g))),
                Op::Resize(x) => contribs.push((*x, ops::resize_backward(val(*x), &node.value, g))),
                Op::Concat(inputs) => {
                    let values: Vec<&Tensor<S>> = inputs.iter().map(|&v| val(v)).collect();
                    for (v, gi) in inputs.iter().zip(ops::concat_backward(&values, g)) {
                        contribs.push((*v, gi));
                    }
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.to_vec()));
                    contribs.push((*b, g.to_vec()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    contribs.push((*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()));
                    contribs.push((*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()));
                }
                Op::ChannelScale { scale, map } => {
                    let (gs, gm) = ops::channel_scale_backward(val(*scale), val(*map), g);
                    contribs.push((*scale, gs));
                    contribs.push((*map, gm));
                }
                Op::SpatialScale { gate, map } => {
                    let (gg, gm) = ops::spatial_scale_backward(val(*gate), val(*map), g);
                    contribs.push((*gate, gg));
                    contribs.push((*map, gm));
                }
                Op::Sum(x) => contribs.push((*x, vec![g[0]; val(*x).len()])),
                Op::Scale(x, f) => contribs.push((*x, g.iter().map(|&gv| gv * *f).collect())),
                Op::Reshape(x) => contribs.push((*x, g.to_vec())),
                Op::WeightedBce {
                    probs,
                    targets,
                    weights,
                    clamped,
                } => {
                    let gi = ops::bce_backward(val(*probs), targets, weights, clamped, g[0]);
                    contribs.push((*probs, gi));
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor<S>> = inputs.iter().map(|&v| val(v)).collect();
                    for (v, gi) in inputs.iter().zip(op.backward(&values, &node.value, g)) {
                        if let Some(gi) = gi {
                            contribs.push((*v, gi));
                        }
                    }
                }
            }
        }
        for (v, c) in contribs {
            self.accumulate(v, c);
        }
    }

    /// Hash of every non-smooth decision taken in the forward pass: ReLU signs,
    /// max-pool argmax positions and clamps. Two passes with equal signatures
    /// lie on the same smooth piece of the computation.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.nodes[x.0].value.data() {
                        (v > S::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::WeightedBce { clamped, .. } => {
                    i.hash(&mut h);
                    clamped.hash(&mut h);
                }
                Op::Custom { op, .. } => {
                    i.hash(&mut h);
                    op.hash_decisions(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }
}
