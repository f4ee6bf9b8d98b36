//! Reverse-mode gradient tape.
//!
//! Every op appends one node holding its forward value. Inputs always precede
//! their consumers, so a single reverse sweep over the node list visits each
//! node once, after all of its consumers.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels::{self, BatchStats, ReduceMode, ReduceSaved};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: `(inputs, output, grad_out) -> grads per input`.
pub type CustomBackward<S> = Box<dyn Fn(&[&Tensor<S>], &Tensor<S>, &Tensor<S>) -> Vec<Tensor<S>>>;

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        pad: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<S>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    LeakyRelu {
        x: Var,
        slope: S,
    },
    Reduce {
        x: Var,
        axes: Vec<usize>,
        mode: ReduceMode,
        saved: ReduceSaved,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    SumAll(Var),
    MeanAll(Var),
    PairwiseDistance(Var),
    /// Scalar whose gradient w.r.t. `x` was computed during the forward pass.
    ScalarWithGrad {
        x: Var,
        local_grad: Tensor<S>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward<S>,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::ChannelAffine { .. } => "batchnorm_eval",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Reduce { .. } => "reduce",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::PairwiseDistance(..) => "pairwise_distance",
            Op::ScalarWithGrad { .. } => "scalar_loss",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered op record plus forward values.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> fmt::Debug for Tape<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients of a scalar w.r.t. every leaf that requires them.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        pad: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.value(x),
            self.value(k),
            b.map(|b| self.value(b)),
            pad,
            stride,
        )?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                k,
                b,
                pad,
                stride,
            },
            &inputs,
        )
    }

    pub fn maxpool2d(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d(self.value(x), kernel, stride)?;
        self.push(out, Op::MaxPool2d { x, argmax }, &[x])
    }

    /// Training-mode batch norm over every axis except 1. Returns the output
    /// and the batch statistics (biased variance) for running-stat updates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<S>)> {
        let (out, stats) =
            kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats: stats.clone(),
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(gamma).numel();
        if running_mean.len() != c || running_var.len() != c || self.value(beta).numel() != c {
            return Err(TensorError::shape(
                "batchnorm",
                "running statistics do not match channel count",
            ));
        }
        let eps_s = S::lit(eps);
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| S::one() / (v + eps_s).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let scale: Vec<S> = (0..c).map(|i| g[i] * inv_std[i]).collect();
        let shift: Vec<S> = (0..c)
            .map(|i| bt[i] - g[i] * inv_std[i] * running_mean[i])
            .collect();
        let out = kernels::channel_affine(self.value(x), &scale, &shift)?;
        self.push(
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = S::lit(slope);
        let out = self.value(x).map(|v| if v > S::zero() { v } else { s * v });
        self.push(out, Op::LeakyRelu { x, slope: s }, &[x])
    }

    pub fn reduce(&mut self, x: Var, axes: &[usize], mode: ReduceMode) -> Result<Var> {
        let (out, saved) = kernels::reduce(self.value(x), axes, mode)?;
        self.push(
            out,
            Op::Reduce {
                x,
                axes: axes.to_vec(),
                mode,
                saved,
            },
            &[x],
        )
    }

    /// Grouped linear map `x[G,N,Din] -> [G,N,Dout]` with weight `[G,Dout,Din]`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::batched_linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    /// `x[N,Din] -> [N,Dout]` with weight `[Dout,Din]` and bias `[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(TensorError::shape(
                "linear",
                format!("expected x [N,Din] and weight [Dout,Din], got {xs:?} and {ws:?}"),
            ));
        }
        let x3 = self.reshape(x, &[1, xs[0], xs[1]])?;
        let w3 = self.reshape(w, &[1, ws[0], ws[1]])?;
        let b2 = match b {
            Some(b) => {
                let bs = self.shape(b).to_vec();
                Some(self.reshape(b, &[1, bs.iter().product()])?)
            }
            None => None,
        };
        let y = self.grouped_linear(x3, w3, b2)?;
        self.reshape(y, &[xs[0], ws[0]])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::lit(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&vals, axis)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        self.push(out, Op::Slice { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.value(x).rank();
        if a >= rank || b >= rank {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::log_softmax(self.value(x))?;
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::log_softmax(self.value(x))?.map(|v| v.exp());
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / S::lit(v.numel() as f64));
        self.push(out, Op::MeanAll(x), &[x])
    }

    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        let out = kernels::pairwise_distance(self.value(x))?;
        self.push(out, Op::PairwiseDistance(x), &[x])
    }

    /// Record a scalar computed outside the tape together with its gradient
    /// w.r.t. `x` (for upstream gradient 1).
    pub fn scalar_with_grad(&mut self, x: Var, value: S, local_grad: Tensor<S>) -> Result<Var> {
        if local_grad.shape() != self.shape(x) {
            return Err(TensorError::shape(
                "scalar_loss",
                format!(
                    "gradient shape {:?} vs input {:?}",
                    local_grad.shape(),
                    self.shape(x)
                ),
            ));
        }
        local_grad.check_finite("scalar_loss")?;
        self.push(
            Tensor::scalar(value),
            Op::ScalarWithGrad { x, local_grad },
            &[x],
        )
    }

    /// Record an op whose forward value is `value` and whose backward rule is
    /// supplied by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<S>,
        backward: CustomBackward<S>,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!(
                    "loss must be a single element, got shape {:?}",
                    self.shape(loss)
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, grad) in self.input_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        // keep leaf gradients only
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, node: &Node<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                k,
                b,
                pad,
                stride,
            } => {
                let need = (
                    self.rg(*x),
                    self.rg(*k),
                    b.map(|b| self.rg(b)).unwrap_or(false),
                );
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    g,
                    *pad,
                    *stride,
                    need,
                )?;
                if let Some(d) = cg.input {
                    res.push((*x, d));
                }
                if let Some(d) = cg.kernel {
                    res.push((*k, d));
                }
                if let (Some(b), Some(d)) = (b, cg.bias) {
                    res.push((*b, d));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                res.push((*x, kernels::scatter_argmax(self.shape(*x), argmax, g)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (dx, dg, db) =
                    kernels::batchnorm_train_backward(self.value(*x), self.value(*gamma), stats, g);
                res.push((*x, dx));
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let scale: Vec<S> = (0..c).map(|i| gm[i] * inv_std[i]).collect();
                let dx = kernels::channel_affine(g, &scale, &vec![S::zero(); c])?;
                let xs = self.value(*x);
                let n = xs.dim(0);
                let inner = xs.numel() / (n * c);
                let mut dgam = vec![S::zero(); c];
                let mut dbet = vec![S::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for i in base..base + inner {
                            dbet[ch] += g.data()[i];
                            dgam[ch] += g.data()[i] * (xs.data()[i] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                res.push((*x, dx));
                res.push((*gamma, Tensor::from_vec(vec![c], dgam)?));
                res.push((*beta, Tensor::from_vec(vec![c], dbet)?));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let d = xv.zip_map(g, |v, gv| if v > S::zero() { gv } else { *slope * gv })?;
                res.push((*x, d));
            }
            Op::Reduce {
                x,
                axes,
                mode,
                saved,
            } => {
                let d = kernels::reduce_backward(self.value(*x), axes, *mode, saved, out, g)?;
                res.push((*x, d));
            }
            Op::Linear { x, w, b } => {
                let need = (
                    self.rg(*x),
                    self.rg(*w),
                    b.map(|b| self.rg(b)).unwrap_or(false),
                );
                let (dx, dw, db) =
                    kernels::batched_linear_backward(self.value(*x), self.value(*w), g, need);
                if let Some(d) = dx {
                    res.push((*x, d));
                }
                if let Some(d) = dw {
                    res.push((*w, d));
                }
                if let (Some(b), Some(d)) = (b, db) {
                    let shape = self.shape(*b).to_vec();
                    res.push((*b, d.reshape(&shape)?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.zip_map(self.value(*b), |p, q| p * q)?));
                res.push((*b, g.zip_map(self.value(*a), |p, q| p * q)?));
            }
            Op::Scale(x, c) => res.push((*x, g.map(|v| v * *c))),
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    res.push((v, g.narrow(*axis, start, len)?));
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let len = out.shape()[*axis];
                let mut parts: Vec<Tensor<S>> = Vec::new();
                if *start > 0 {
                    let mut s = xs.to_vec();
                    s[*axis] = *start;
                    parts.push(Tensor::zeros(&s));
                }
                parts.push(g.clone());
                let tail = xs[*axis] - start - len;
                if tail > 0 {
                    let mut s = xs.to_vec();
                    s[*axis] = tail;
                    parts.push(Tensor::zeros(&s));
                }
                let refs: Vec<&Tensor<S>> = parts.iter().collect();
                res.push((*x, Tensor::concat(&refs, *axis)?));
            }
            Op::Reshape(x) => res.push((*x, g.reshape(self.shape(*x))?)),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*x, g.permute(&inv)?));
            }
            Op::LogSoftmax(x) => {
                let last = *out.shape().last().expect("rank >= 1");
                let mut d = g.data().to_vec();
                for (row, orow) in d.chunks_mut(last).zip(out.data().chunks(last)) {
                    let s: S = row.iter().copied().sum();
                    for (dv, &o) in row.iter_mut().zip(orow) {
                        *dv -= o.exp() * s;
                    }
                }
                res.push((*x, Tensor::from_vec(out.shape().to_vec(), d)?));
            }
            Op::Softmax(x) => {
                let last = *out.shape().last().expect("rank >= 1");
                let mut d = vec![S::zero(); out.numel()];
                for ((drow, grow), orow) in d
                    .chunks_mut(last)
                    .zip(g.data().chunks(last))
                    .zip(out.data().chunks(last))
                {
                    let dot: S = grow.iter().zip(orow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &gv), &o) in drow.iter_mut().zip(grow).zip(orow) {
                        *dv = o * (gv - dot);
                    }
                }
                res.push((*x, Tensor::from_vec(out.shape().to_vec(), d)?));
            }
            Op::Log(x) => res.push((*x, g.zip_map(self.value(*x), |gv, v| gv / v)?)),
            Op::Exp(x) => res.push((*x, g.zip_map(out, |gv, o| gv * o)?)),
            Op::SumAll(x) => res.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::MeanAll(x) => {
                let n = S::lit(self.value(*x).numel() as f64);
                res.push((*x, Tensor::full(self.shape(*x), g.item() / n)));
            }
            Op::PairwiseDistance(x) => {
                res.push((
                    *x,
                    kernels::pairwise_distance_backward(self.value(*x), out, g),
                ));
            }
            Op::ScalarWithGrad { x, local_grad } => {
                let gv = g.item();
                res.push((*x, local_grad.map(|v| v * gv)));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<S>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = backward(&vals, out, g);
                if grads.len() != inputs.len() {
                    return Err(TensorError::invalid(
                        "custom",
                        "backward returned wrong number of gradients",
                    ));
                }
                for (&v, d) in inputs.iter().zip(grads) {
                    if d.shape() != self.shape(v) {
                        return Err(TensorError::shape(
                            "custom",
                            "backward gradient shape mismatch",
                        ));
                    }
                    res.push((v, d));
                }
            }
        }
        Ok(res)
    }
}
