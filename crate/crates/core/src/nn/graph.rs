//! Execution backends for network code.
//!
//! [`Graph`] records every operation on a tape and replays it in reverse to
//! compute gradients. [`Eager`] evaluates the same operations without keeping
//! intermediates, for inference.

use super::kernels::{self, NormCache};
use super::{NnError, Scalar, Tensor};

/// Operations a network can be expressed in.
pub trait Backend<T: Scalar> {
    type Value;

    /// An input that never receives a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    /// A trainable tensor.
    fn parameter(&mut self, t: &Tensor<T>) -> Self::Value;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv3x3(&mut self, x: &Self::Value, kernel: &Self::Value) -> Result<Self::Value, NnError>;
    /// Batch-statistics normalization; also returns the batch mean and
    /// biased variance per channel.
    #[allow(clippy::type_complexity)]
    fn batch_norm_train(
        &mut self,
        x: &Self::Value,
        scale: &Self::Value,
        shift: &Self::Value,
    ) -> Result<(Self::Value, Vec<f64>, Vec<f64>), NnError>;
    fn batch_norm_eval(
        &mut self,
        x: &Self::Value,
        scale: &Self::Value,
        shift: &Self::Value,
        mean: &[T],
        var: &[T],
    ) -> Result<Self::Value, NnError>;
    fn relu(&mut self, x: &Self::Value) -> Self::Value;
    fn avg_pool2(&mut self, x: &Self::Value) -> Result<Self::Value, NnError>;
    fn global_avg_pool(&mut self, x: &Self::Value) -> Result<Self::Value, NnError>;
    fn concat(&mut self, xs: &[&Self::Value]) -> Result<Self::Value, NnError>;
    /// Multiplies by a precomputed mask (zeros and `1 / (1 - p)`).
    fn dropout(&mut self, x: &Self::Value, mask: Vec<T>) -> Result<Self::Value, NnError>;
    fn linear(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value, NnError>;
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv3x3 {
        input: Var,
        kernel: Var,
    },
    NormTrain {
        input: Var,
        scale: Var,
        shift: Var,
        cache: NormCache<T>,
    },
    NormEval {
        input: Var,
        scale: Var,
        shift: Var,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LogCosh {
        pred: Var,
        target: Var,
    },
    L2 {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Scalar log-cosh loss node; `target` receives no gradient.
    pub fn log_cosh_loss(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let l = kernels::log_cosh_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(T::lit(l)), Op::LogCosh { pred, target }, &[pred]))
    }

    /// Scalar mean-squared-error loss node; `target` receives no gradient.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let l = kernels::l2_loss(self.value(pred), self.value(target))?;
        Ok(self.push(Tensor::scalar(T::lit(l)), Op::L2 { pred, target }, &[pred]))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>, NnError> {
        if self.value(out).len() != 1 {
            return Err(NnError::Shape(format!(
                "backward() needs a scalar, got {:?}; use backward_with",
                self.value(out).shape()
            )));
        }
        self.backward_with(out, Tensor::scalar(T::one()))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>, NnError> {
        if seed.shape() != self.value(out).shape() {
            return Err(NnError::Shape("seed gradient shape mismatch".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Conv3x3 { input, kernel } => {
                    let need = self.nodes[input.0].requires_grad;
                    let (gx, gk) = kernels::conv3x3_backward(
                        self.value(*input),
                        self.value(*kernel),
                        &g,
                        need,
                    )?;
                    if let Some(gx) = gx {
                        self.accumulate(&mut grads, *input, gx);
                    }
                    self.accumulate(&mut grads, *kernel, gk);
                }
                Op::NormTrain {
                    input,
                    scale,
                    shift,
                    cache,
                } => {
                    let (gx, gs, gb) =
                        kernels::batch_norm_train_backward(&g, self.value(*scale), cache)?;
                    self.accumulate(&mut grads, *input, gx);
                    self.accumulate(&mut grads, *scale, gs);
                    self.accumulate(&mut grads, *shift, gb);
                }
                Op::NormEval {
                    input,
                    scale,
                    shift,
                    mean,
                    var,
                } => {
                    let (gx, gs, gb) = kernels::batch_norm_eval_backward(
                        &g,
                        self.value(*input),
                        self.value(*scale),
                        mean,
                        var,
                    )?;
                    self.accumulate(&mut grads, *input, gx);
                    self.accumulate(&mut grads, *scale, gs);
                    self.accumulate(&mut grads, *shift, gb);
                }
                Op::Relu(input) => {
                    let gx = kernels::relu_backward(self.value(*input), &g);
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::AvgPool2(input) => {
                    let gx = kernels::avg_pool2_backward(&g, self.value(*input).shape())?;
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::GlobalAvgPool(input) => {
                    let gx = kernels::global_avg_pool_backward(&g, self.value(*input).shape())?;
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::Concat(inputs) => {
                    let widths: Vec<usize> =
                        inputs.iter().map(|v| self.value(*v).shape()[1]).collect();
                    let parts = kernels::split_channels(&g, &widths)?;
                    for (v, part) in inputs.iter().zip(parts) {
                        self.accumulate(&mut grads, *v, part);
                    }
                }
                Op::Dropout { input, mask } => {
                    let mut gx = g;
                    for (a, &m) in gx.data_mut().iter_mut().zip(mask) {
                        *a = *a * m;
                    }
                    self.accumulate(&mut grads, *input, gx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (gx, gw, gb) =
                        kernels::linear_backward(self.value(*input), self.value(*weight), &g)?;
                    self.accumulate(&mut grads, *input, gx);
                    self.accumulate(&mut grads, *weight, gw);
                    self.accumulate(&mut grads, *bias, gb);
                }
                Op::LogCosh { pred, target } | Op::L2 { pred, target } => {
                    let local = match node.op {
                        Op::LogCosh { .. } => {
                            kernels::log_cosh_grad(self.value(*pred), self.value(*target))?
                        }
                        _ => kernels::l2_grad(self.value(*pred), self.value(*target))?,
                    };
                    let upstream = g.data()[0];
                    let gp = local.map(|v| v * upstream);
                    self.accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

impl<T: Scalar> Backend<T> for Graph<T> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn parameter(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), true)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.value(*v)
    }

    fn conv3x3(&mut self, x: &Var, kernel: &Var) -> Result<Var, NnError> {
        let y = kernels::conv3x3_forward(self.value(*x), self.value(*kernel))?;
        Ok(self.push(
            y,
            Op::Conv3x3 {
                input: *x,
                kernel: *kernel,
            },
            &[*x, *kernel],
        ))
    }

    fn batch_norm_train(
        &mut self,
        x: &Var,
        scale: &Var,
        shift: &Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>), NnError> {
        let (y, mean, var, cache) =
            kernels::batch_norm_train(self.value(*x), self.value(*scale), self.value(*shift))?;
        let v = self.push(
            y,
            Op::NormTrain {
                input: *x,
                scale: *scale,
                shift: *shift,
                cache,
            },
            &[*x, *scale, *shift],
        );
        Ok((v, mean, var))
    }

    fn batch_norm_eval(
        &mut self,
        x: &Var,
        scale: &Var,
        shift: &Var,
        mean: &[T],
        var: &[T],
    ) -> Result<Var, NnError> {
        let y = kernels::batch_norm_eval(
            self.value(*x),
            self.value(*scale),
            self.value(*shift),
            mean,
            var,
        )?;
        Ok(self.push(
            y,
            Op::NormEval {
                input: *x,
                scale: *scale,
                shift: *shift,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
            &[*x, *scale, *shift],
        ))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = kernels::relu_forward(self.value(*x));
        self.push(y, Op::Relu(*x), &[*x])
    }

    fn avg_pool2(&mut self, x: &Var) -> Result<Var, NnError> {
        let y = kernels::avg_pool2_forward(self.value(*x))?;
        Ok(self.push(y, Op::AvgPool2(*x), &[*x]))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var, NnError> {
        let y = kernels::global_avg_pool_forward(self.value(*x))?;
        Ok(self.push(y, Op::GlobalAvgPool(*x), &[*x]))
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var, NnError> {
        let tensors: Vec<&Tensor<T>> = xs.iter().map(|v| self.value(**v)).collect();
        let y = kernels::concat_channels(&tensors)?;
        let inputs: Vec<Var> = xs.iter().map(|v| **v).collect();
        Ok(self.push(y, Op::Concat(inputs.clone()), &inputs))
    }

    fn dropout(&mut self, x: &Var, mask: Vec<T>) -> Result<Var, NnError> {
        let mut y = self.value(*x).clone();
        if mask.len() != y.len() {
            return Err(NnError::Shape("dropout mask length mismatch".into()));
        }
        for (a, &m) in y.data_mut().iter_mut().zip(&mask) {
            *a = *a * m;
        }
        Ok(self.push(y, Op::Dropout { input: *x, mask }, &[*x]))
    }

    fn linear(&mut self, x: &Var, weight: &Var, bias: &Var) -> Result<Var, NnError> {
        let y = kernels::linear_forward(self.value(*x), self.value(*weight), self.value(*bias))?;
        Ok(self.push(
            y,
            Op::Linear {
                input: *x,
                weight: *weight,
                bias: *bias,
            },
            &[*x, *weight, *bias],
        ))
    }
}

/// Tape-free evaluation; intermediates are dropped as soon as they are unused.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Scalar> Backend<T> for Eager {
    type Value = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn parameter(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn tensor<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn conv3x3(&mut self, x: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        kernels::conv3x3_forward(x, kernel)
    }

    fn batch_norm_train(
        &mut self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>), NnError> {
        let (y, mean, var, _) = kernels::batch_norm_train(x, scale, shift)?;
        Ok((y, mean, var))
    }

    fn batch_norm_eval(
        &mut self,
        x: &Tensor<T>,
        scale: &Tensor<T>,
        shift: &Tensor<T>,
        mean: &[T],
        var: &[T],
    ) -> Result<Tensor<T>, NnError> {
        kernels::batch_norm_eval(x, scale, shift, mean, var)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        kernels::relu_forward(x)
    }

    fn avg_pool2(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        kernels::avg_pool2_forward(x)
    }

    fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        kernels::global_avg_pool_forward(x)
    }

    fn concat(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>, NnError> {
        kernels::concat_channels(xs)
    }

    fn dropout(&mut self, x: &Tensor<T>, mask: Vec<T>) -> Result<Tensor<T>, NnError> {
        if mask.len() != x.len() {
            return Err(NnError::Shape("dropout mask length mismatch".into()));
        }
        let mut y = x.clone();
        for (a, &m) in y.data_mut().iter_mut().zip(&mask) {
            *a = *a * m;
        }
        Ok(y)
    }

    fn linear(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>, NnError> {
        kernels::linear_forward(x, weight, bias)
    }
}
