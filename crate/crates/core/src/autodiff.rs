//! Reverse-mode differentiation over the kernel set.
//!
//! A [`Tape`] records every operation in execution order together with the
//! values its adjoint needs. [`Tape::backward`] replays the records in
//! reverse, visiting each node once and summing gradients when a value feeds
//! several consumers.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGradMask, ConvParams};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: ConvParams,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: T,
    },
    Relu6(Var),
    Sigmoid(Var),
    Softmax(Var),
    MinMax(Var),
    Resize(Var),
    AvgPool(Var),
    PixelShuffle(Var, usize),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    /// Scalar-valued node whose input gradients were computed in the forward pass.
    Fused { inputs: Vec<Var>, grads: Vec<Tensor<T>> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Relu6(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::MinMax(x)
            | Op::Resize(x)
            | Op::AvgPool(x)
            | Op::PixelShuffle(x, _)
            | Op::Scale(x, _)
            | Op::Sum(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Fused { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], one per leaf.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` if it does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, with zeros for leaves the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: ConvParams) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), params)?;
        Ok(self.push(y, Op::Conv { x, w, b, params }))
    }

    /// Training-mode batch norm; returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, ops::BatchNormTrain<T>)> {
        let mut out = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let value = std::mem::replace(&mut out.output, Tensor::zeros(Shape::scalar()));
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized: out.normalized.clone(),
                inv_std: out.inv_std.clone(),
            },
        );
        Ok((v, out))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor<T>, var: &Tensor<T>, eps: T) -> Result<Var> {
        let y = ops::batch_norm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
        ))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let y = ops::relu6(self.value(x));
        self.push(y, Op::Relu6(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_spatial(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn minmax_normalize(&mut self, x: Var) -> Var {
        let y = ops::minmax_normalize(self.value(x));
        self.push(y, Op::MinMax(x))
    }

    pub fn bilinear_resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), h, w)?;
        Ok(self.push(y, Op::Resize(x)))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool(x)))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = ops::pixel_shuffle(self.value(x), r)?;
        Ok(self.push(y, Op::PixelShuffle(x, r)))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, k))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    /// Records a scalar whose gradients with respect to `inputs` are already known.
    pub fn fused(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(Error::contract("fused: one gradient per input required"));
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::contract(format!(
                    "fused: gradient shape {} does not match input {}",
                    g.shape(),
                    self.value(*v).shape()
                )));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                grads,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.adjoint(node, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi)?;
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !(n.requires_grad && matches!(n.op, Op::Leaf)) {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, params } => {
                let mask = ConvGradMask {
                    input: self.wants(*x),
                    weight: self.wants(*w),
                    bias: b.is_some_and(|b| self.wants(b)),
                };
                let grads = ops::conv2d_backward(self.value(*x), self.value(*w), g, *params, mask)?;
                out.extend(grads.input.map(|t| (*x, t)));
                out.extend(grads.weight.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (gx, gg, gb) = ops::batch_norm_train_backward(g, normalized, inv_std, self.value(*gamma));
                out.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (gx, gg, gb) = ops::batch_norm_eval_backward(g, self.value(*x), self.value(*gamma), mean, var, *eps)?;
                out.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
            }
            Op::Relu6(x) => out.push((*x, ops::relu6_backward(self.value(*x), g))),
            Op::Sigmoid(x) => out.push((*x, ops::sigmoid_backward(&node.value, g))),
            Op::Softmax(x) => out.push((*x, ops::softmax_spatial_backward(&node.value, g))),
            Op::MinMax(x) => out.push((*x, ops::minmax_normalize_backward(self.value(*x), g))),
            Op::Resize(x) => out.push((*x, ops::bilinear_resize_backward(self.value(*x).shape(), g))),
            Op::AvgPool(x) => out.push((*x, ops::avg_pool2_backward(self.value(*x).shape(), g))),
            Op::PixelShuffle(x, r) => out.push((*x, ops::space_to_depth(g, *r)?)),
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|v| self.value(*v).shape().c).collect();
                out.extend(xs.iter().copied().zip(ops::split_channels(g, &widths)?));
            }
            Op::Add(a, b) => out.extend([(*a, g.clone()), (*b, g.clone())]),
            Op::Mul(a, b) => {
                out.push((*a, ops::mul(g, self.value(*b))?));
                out.push((*b, ops::mul(g, self.value(*a))?));
            }
            Op::Scale(x, k) => out.push((*x, g.map(|v| v * *k))),
            Op::Sum(x) => {
                let s = g.value()?;
                out.push((*x, Tensor::full(self.value(*x).shape(), s)));
            }
            Op::Fused { inputs, grads } => {
                let s = g.value()?;
                out.extend(inputs.iter().zip(grads).map(|(v, t)| (*v, t.map(|e| e * s))));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => *acc = ops::add(acc, &g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central differences.
///
/// The relative error of element `i` is `|a - n| / max(|a|, |n|, 1e-6 * s)`
/// with `s = max(1, max_j |a_j|)`, so entries that are numerically zero
/// compare in absolute terms.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let out = f(&mut tape, v)?;
        let y = tape.value(out).value()?;
        if !y.is_finite() {
            return Err(Error::numeric(format!("grad_check: function value {y} is not finite")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let out = f(&mut tape, x)?;
    let y = tape.value(out).value()?;
    if !y.is_finite() {
        return Err(Error::numeric(format!("grad_check: function value {y} is not finite")));
    }
    let analytic = tape.backward(out)?.wrt(x);
    let scale = analytic.max_abs().max(1.0);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        tolerance,
        passed: true,
    };
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-6 * scale);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
