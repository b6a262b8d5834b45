//! The recorded op tape and its backward walk.
//!
//! Recording order is already a topological order, so backward is a single
//! reverse sweep. A tape is single-use: `backward` consumes it, and both
//! further recording and a second backward are rejected — re-running forward
//! is the only way to differentiate again, which keeps saved activations and
//! gradients trivially consistent.

use crate::error::{Error, Result};

use super::ops::{self, ConvDims};
use super::{relu_backward, GradMode, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv2d { input: ValueId, kernel: ValueId, dims: ConvDims },
    BiasAddChannel { input: ValueId, bias: ValueId, channels: usize, plane: usize },
    Relu { input: ValueId },
    MaxPool2x2 { input: ValueId, argmax: Vec<u32> },
    GlobalAvgPool { input: ValueId, plane: usize },
    Dense { input: ValueId, weight: ValueId, bias: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { input: ValueId, factor: T },
    Sum { input: ValueId },
    Pick { input: ValueId, index: usize },
    DotConst { input: ValueId, coeffs: Vec<T> },
    ClassLogitSum { logits: ValueId, class: usize },
    WeightedCrossEntropy { logits: ValueId, labels: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAddChannel { .. } => "bias_add_channel",
            Op::Relu { .. } => "relu",
            Op::MaxPool2x2 { .. } => "maxpool2x2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Pick { .. } => "pick",
            Op::DotConst { .. } => "dot_const",
            Op::ClassLogitSum { .. } => "class_logit_sum",
            Op::WeightedCrossEntropy { .. } => "weighted_cross_entropy",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// Whether this value depends on a gradient-tracked leaf. Backward skips
    /// everything untracked (e.g. input batches during training).
    tracked: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn value(&self, id: ValueId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::InvalidValueId(id.0))
    }

    /// Smallest |x| over the inputs of every recorded ReLU, or `None` if the
    /// tape holds no ReLU. Finite-difference checks use this to reject
    /// instances whose activations sit close enough to zero for a probe step
    /// to flip them.
    pub fn min_relu_input_abs(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu { input } = &node.op {
                for &x in self.nodes[input.0].value.data() {
                    let a = x.as_f64().abs();
                    min = Some(min.map_or(a, |m: f64| m.min(a)));
                }
            }
        }
        min
    }

    /// Smallest gap between the best and second-best value over every 2x2
    /// pool window recorded on the tape, or `None` if there is no pooling.
    /// Windows whose top two values are both exactly zero are skipped: those
    /// arise from ReLU-clamped activations, which a probe step cannot move.
    pub fn min_pool_gap(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            let Op::MaxPool2x2 { input, .. } = &node.op else {
                continue;
            };
            let value = &self.nodes[input.0].value;
            let (h, w) = (value.shape()[2], value.shape()[3]);
            let planes = value.numel() / (h * w);
            let data = value.data();
            for p in 0..planes {
                let base = p * h * w;
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        let mut vals = [0.0f64; 4];
                        for (k, v) in vals.iter_mut().enumerate() {
                            let y = oy * 2 + k / 2;
                            let x = ox * 2 + k % 2;
                            *v = data[base + y * w + x].as_f64();
                        }
                        vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                        if vals[0] == 0.0 && vals[1] == 0.0 {
                            continue;
                        }
                        let gap = vals[0] - vals[1];
                        min = Some(min.map_or(gap, |m: f64| m.min(gap)));
                    }
                }
            }
        }
        min
    }

    fn tracked(&self, id: ValueId) -> bool {
        self.nodes[id.0].tracked
    }

    fn check_ids(&self, op: &'static str, ids: &[ValueId]) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        for id in ids {
            if id.0 >= self.nodes.len() {
                return Err(Error::InvalidValueId(id.0));
            }
        }
        let _ = op;
        Ok(())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, tracked: bool) -> Result<ValueId> {
        value.check_finite(op.name())?;
        self.nodes.push(Node { op, value, tracked });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Records an input value. `requires_grad` marks it as a gradient target;
    /// anything not downstream of such a leaf is skipped in backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<ValueId> {
        self.check_ids("leaf", &[])?;
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Convolution: input `[N,C,H,W]`, kernel `[K,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        self.check_ids("conv2d", &[input, kernel])?;
        let (ishape, kshape) =
            (self.value(input)?.shape().to_vec(), self.value(kernel)?.shape().to_vec());
        if ishape.len() != 4 || kshape.len() != 4 || ishape[1] != kshape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                details: format!("input {ishape:?} vs kernel {kshape:?}"),
            });
        }
        let (h_out, w_out) =
            ops::conv2d_output_dims(ishape[2], ishape[3], kshape[2], kshape[3], stride, padding)
                .ok_or_else(|| Error::ShapeMismatch {
                    op: "conv2d",
                    details: format!(
                        "kernel {kshape:?} stride {stride} padding {padding} does not fit input {ishape:?}"
                    ),
                })?;
        let dims = ConvDims {
            n: ishape[0],
            c_in: ishape[1],
            h: ishape[2],
            w: ishape[3],
            c_out: kshape[0],
            kh: kshape[2],
            kw: kshape[3],
            stride,
            padding,
            h_out,
            w_out,
        };
        let out = ops::conv2d_forward(self.value(input)?.data(), self.value(kernel)?.data(), &dims);
        let tracked = self.tracked(input) || self.tracked(kernel);
        let value = Tensor::new(vec![dims.n, dims.c_out, h_out, w_out], out)?;
        self.push(Op::Conv2d { input, kernel, dims }, value, tracked)
    }

    /// Adds a per-channel bias `[C]` to `[N,C,H,W]`.
    pub fn bias_add_channel(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check_ids("bias_add_channel", &[input, bias])?;
        let ishape = self.value(input)?.shape().to_vec();
        let bshape = self.value(bias)?.shape().to_vec();
        if ishape.len() != 4 || bshape != [ishape[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_channel",
                details: format!("input {ishape:?} vs bias {bshape:?}"),
            });
        }
        let (channels, plane) = (ishape[1], ishape[2] * ishape[3]);
        let bias_data = self.value(bias)?.data().to_vec();
        let mut out = self.value(input)?.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bias_data[(i / plane) % channels];
        }
        let tracked = self.tracked(input) || self.tracked(bias);
        let value = Tensor::new(ishape, out)?;
        self.push(Op::BiasAddChannel { input, bias, channels, plane }, value, tracked)
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_ids("relu", &[input])?;
        let value = super::relu_forward(self.value(input)?);
        let tracked = self.tracked(input);
        self.push(Op::Relu { input }, value, tracked)
    }

    pub fn maxpool2x2(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_ids("maxpool2x2", &[input])?;
        let shape = self.value(input)?.shape().to_vec();
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2x2",
                details: format!("expected [N,C,H,W] with even H and W, got {shape:?}"),
            });
        }
        let (out, argmax) =
            ops::maxpool2x2_forward(self.value(input)?.data(), shape[0], shape[1], shape[2], shape[3]);
        let tracked = self.tracked(input);
        let value = Tensor::new(vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2], out)?;
        self.push(Op::MaxPool2x2 { input, argmax }, value, tracked)
    }

    pub fn global_avg_pool(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_ids("global_avg_pool", &[input])?;
        let shape = self.value(input)?.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                details: format!("expected [N,C,H,W], got {shape:?}"),
            });
        }
        let plane = shape[2] * shape[3];
        let out = ops::global_avg_pool_forward(self.value(input)?.data(), shape[0], shape[1], plane);
        let tracked = self.tracked(input);
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        self.push(Op::GlobalAvgPool { input, plane }, value, tracked)
    }

    /// Fully connected layer: input `[N,F]`, weight `[O,F]`, bias `[O]`.
    pub fn dense(&mut self, input: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check_ids("dense", &[input, weight, bias])?;
        let ishape = self.value(input)?.shape().to_vec();
        let wshape = self.value(weight)?.shape().to_vec();
        let bshape = self.value(bias)?.shape().to_vec();
        if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[1] || bshape != [wshape[0]]
        {
            return Err(Error::ShapeMismatch {
                op: "dense",
                details: format!("input {ishape:?}, weight {wshape:?}, bias {bshape:?}"),
            });
        }
        let (n, f, o) = (ishape[0], ishape[1], wshape[0]);
        let mut out = vec![T::zero(); n * o];
        ops::matmul_abt_acc(&mut out, self.value(input)?.data(), self.value(weight)?.data(), n, f, o);
        let bias_data = self.value(bias)?.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bias_data[i % o];
        }
        let tracked = self.tracked(input) || self.tracked(weight) || self.tracked(bias);
        let value = Tensor::new(vec![n, o], out)?;
        self.push(Op::Dense { input, weight, bias }, value, tracked)
    }

    /// Elementwise residual add of two same-shape values.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_ids("add", &[a, b])?;
        if self.value(a)?.shape() != self.value(b)?.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                details: format!("{:?} vs {:?}", self.value(a)?.shape(), self.value(b)?.shape()),
            });
        }
        let data: Vec<T> = self
            .value(a)?
            .data()
            .iter()
            .zip(self.value(b)?.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let value = Tensor::new(self.value(a)?.shape().to_vec(), data)?;
        self.push(Op::Add { a, b }, value, tracked)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_ids("mul", &[a, b])?;
        if self.value(a)?.shape() != self.value(b)?.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                details: format!("{:?} vs {:?}", self.value(a)?.shape(), self.value(b)?.shape()),
            });
        }
        let data: Vec<T> = self
            .value(a)?
            .data()
            .iter()
            .zip(self.value(b)?.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let value = Tensor::new(self.value(a)?.shape().to_vec(), data)?;
        self.push(Op::Mul { a, b }, value, tracked)
    }

    pub fn scale(&mut self, input: ValueId, factor: T) -> Result<ValueId> {
        self.check_ids("scale", &[input])?;
        let data: Vec<T> = self.value(input)?.data().iter().map(|&x| x * factor).collect();
        let tracked = self.tracked(input);
        let value = Tensor::new(self.value(input)?.shape().to_vec(), data)?;
        self.push(Op::Scale { input, factor }, value, tracked)
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, input: ValueId) -> Result<ValueId> {
        self.check_ids("sum", &[input])?;
        let mut acc = T::zero();
        for &v in self.value(input)?.data() {
            acc = acc + v;
        }
        let tracked = self.tracked(input);
        self.push(Op::Sum { input }, Tensor::scalar(acc), tracked)
    }

    /// Selects one element by flat index as a scalar.
    pub fn pick(&mut self, input: ValueId, index: usize) -> Result<ValueId> {
        self.check_ids("pick", &[input])?;
        let t = self.value(input)?;
        if index >= t.numel() {
            return Err(Error::InvalidArgument(format!(
                "pick index {index} out of range for {} elements",
                t.numel()
            )));
        }
        let v = t.data()[index];
        let tracked = self.tracked(input);
        self.push(Op::Pick { input, index }, Tensor::scalar(v), tracked)
    }

    /// Scalar dot product with fixed coefficients (used to exercise full
    /// Jacobians in gradient checks).
    pub fn dot_const(&mut self, input: ValueId, coeffs: &[T]) -> Result<ValueId> {
        self.check_ids("dot_const", &[input])?;
        let t = self.value(input)?;
        if coeffs.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                details: format!("{} coefficients for {} elements", coeffs.len(), t.numel()),
            });
        }
        let mut acc = T::zero();
        for (&x, &c) in t.data().iter().zip(coeffs) {
            acc = acc + x * c;
        }
        let tracked = self.tracked(input);
        self.push(Op::DotConst { input, coeffs: coeffs.to_vec() }, Tensor::scalar(acc), tracked)
    }

    /// Sum of one logit column over the batch: `sum_n logits[n, class]`.
    /// Batched saliency differentiates this; per-sample input gradients are
    /// independent, so it equals running each sample separately.
    pub fn class_logit_sum(&mut self, logits: ValueId, class: usize) -> Result<ValueId> {
        self.check_ids("class_logit_sum", &[logits])?;
        let shape = self.value(logits)?.shape().to_vec();
        if shape.len() != 2 || class >= shape[1] {
            return Err(Error::ShapeMismatch {
                op: "class_logit_sum",
                details: format!("logits {shape:?}, class {class}"),
            });
        }
        let mut acc = T::zero();
        for row in 0..shape[0] {
            acc = acc + self.value(logits)?.data()[row * shape[1] + class];
        }
        let tracked = self.tracked(logits);
        self.push(Op::ClassLogitSum { logits, class }, Tensor::scalar(acc), tracked)
    }

    /// Class-weighted cross entropy over `[N, C]` logits:
    /// `mean_n( weights[labels[n]] * -log softmax(logits[n])[labels[n]] )`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[usize],
        weights: &[T],
    ) -> Result<ValueId> {
        self.check_ids("weighted_cross_entropy", &[logits])?;
        let shape = self.value(logits)?.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "weighted_cross_entropy",
                details: format!("expected [N,C] logits, got {shape:?}"),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if labels.len() != n || weights.len() != c {
            return Err(Error::ShapeMismatch {
                op: "weighted_cross_entropy",
                details: format!("{} labels / {} weights for [{n},{c}] logits", labels.len(), weights.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let probs = ops::softmax_rows(self.value(logits)?.data(), n, c);
        let mut acc = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            // Softmax of finite logits is strictly positive, so ln is safe.
            acc = acc - weights[label] * probs[i * c + label].ln();
        }
        let loss = acc / T::from_f64(n as f64);
        let tracked = self.tracked(logits);
        self.push(
            Op::WeightedCrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs },
            Tensor::scalar(loss),
            tracked,
        )
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients are
    /// produced for every recorded value that depends on a tracked leaf.
    pub fn backward(&mut self, loss: ValueId, mode: GradMode) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidValueId(loss.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(grad_out) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let op_name = node.op.name();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(grad_out);
                    continue;
                }
                Op::Conv2d { input, kernel, dims } => {
                    let need_input = self.nodes[input.0].tracked;
                    let need_kernel = self.nodes[kernel.0].tracked;
                    let (gi, gk) = ops::conv2d_backward(
                        self.nodes[input.0].value.data(),
                        self.nodes[kernel.0].value.data(),
                        grad_out.data(),
                        dims,
                        need_input,
                        need_kernel,
                    );
                    let input = *input;
                    let kernel = *kernel;
                    if let Some(gi) = gi {
                        let shape = self.nodes[input.0].value.shape().to_vec();
                        accumulate(&mut grads, input, Tensor::new(shape, gi)?, op_name)?;
                    }
                    if let Some(gk) = gk {
                        let shape = self.nodes[kernel.0].value.shape().to_vec();
                        accumulate(&mut grads, kernel, Tensor::new(shape, gk)?, op_name)?;
                    }
                }
                Op::BiasAddChannel { input, bias, channels, plane } => {
                    let (input, bias, channels, plane) = (*input, *bias, *channels, *plane);
                    if self.nodes[input.0].tracked {
                        accumulate(&mut grads, input, grad_out.clone(), op_name)?;
                    }
                    if self.nodes[bias.0].tracked {
                        let mut gb = vec![T::zero(); channels];
                        for (j, &g) in grad_out.data().iter().enumerate() {
                            let ch = (j / plane) % channels;
                            gb[ch] = gb[ch] + g;
                        }
                        accumulate(&mut grads, bias, Tensor::new(vec![channels], gb)?, op_name)?;
                    }
                }
                Op::Relu { input } => {
                    let input = *input;
                    if self.nodes[input.0].tracked {
                        let gi = relu_backward(&grad_out, &self.nodes[input.0].value, mode)?;
                        accumulate(&mut grads, input, gi, op_name)?;
                    }
                }
                Op::MaxPool2x2 { input, argmax } => {
                    let input_id = *input;
                    if self.nodes[input_id.0].tracked {
                        let gi = ops::maxpool2x2_backward(
                            grad_out.data(),
                            argmax,
                            self.nodes[input_id.0].value.numel(),
                        );
                        let shape = self.nodes[input_id.0].value.shape().to_vec();
                        accumulate(&mut grads, input_id, Tensor::new(shape, gi)?, op_name)?;
                    }
                }
                Op::GlobalAvgPool { input, plane } => {
                    let (input, plane) = (*input, *plane);
                    if self.nodes[input.0].tracked {
                        let gi = ops::global_avg_pool_backward(grad_out.data(), plane);
                        let shape = self.nodes[input.0].value.shape().to_vec();
                        accumulate(&mut grads, input, Tensor::new(shape, gi)?, op_name)?;
                    }
                }
                Op::Dense { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let ishape = self.nodes[input.0].value.shape().to_vec();
                    let wshape = self.nodes[weight.0].value.shape().to_vec();
                    let (n, f, o) = (ishape[0], ishape[1], wshape[0]);
                    if self.nodes[input.0].tracked {
                        let mut gi = vec![T::zero(); n * f];
                        ops::matmul_acc(&mut gi, grad_out.data(), self.nodes[weight.0].value.data(), n, o, f);
                        accumulate(&mut grads, input, Tensor::new(ishape.clone(), gi)?, op_name)?;
                    }
                    if self.nodes[weight.0].tracked {
                        let mut gw = vec![T::zero(); o * f];
                        ops::matmul_atb_acc(&mut gw, grad_out.data(), self.nodes[input.0].value.data(), n, o, f);
                        accumulate(&mut grads, weight, Tensor::new(wshape, gw)?, op_name)?;
                    }
                    if self.nodes[bias.0].tracked {
                        let mut gb = vec![T::zero(); o];
                        for (j, &g) in grad_out.data().iter().enumerate() {
                            gb[j % o] = gb[j % o] + g;
                        }
                        accumulate(&mut grads, bias, Tensor::new(vec![o], gb)?, op_name)?;
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].tracked {
                        accumulate(&mut grads, a, grad_out.clone(), op_name)?;
                    }
                    if self.nodes[b.0].tracked {
                        accumulate(&mut grads, b, grad_out.clone(), op_name)?;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].tracked {
                        let data: Vec<T> = grad_out
                            .data()
                            .iter()
                            .zip(self.nodes[b.0].value.data())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        let shape = grad_out.shape().to_vec();
                        accumulate(&mut grads, a, Tensor::new(shape, data)?, op_name)?;
                    }
                    if self.nodes[b.0].tracked {
                        let data: Vec<T> = grad_out
                            .data()
                            .iter()
                            .zip(self.nodes[a.0].value.data())
                            .map(|(&g, &v)| g * v)
                            .collect();
                        let shape = grad_out.shape().to_vec();
                        accumulate(&mut grads, b, Tensor::new(shape, data)?, op_name)?;
                    }
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    if self.nodes[input.0].tracked {
                        let data: Vec<T> = grad_out.data().iter().map(|&g| g * factor).collect();
                        let shape = grad_out.shape().to_vec();
                        accumulate(&mut grads, input, Tensor::new(shape, data)?, op_name)?;
                    }
                }
                Op::Sum { input } => {
                    let input = *input;
                    if self.nodes[input.0].tracked {
                        let g = grad_out.item()?;
                        let shape = self.nodes[input.0].value.shape().to_vec();
                        accumulate(&mut grads, input, Tensor::filled(shape, g), op_name)?;
                    }
                }
                Op::Pick { input, index } => {
                    let (input, index) = (*input, *index);
                    if self.nodes[input.0].tracked {
                        let mut gi = Tensor::zeros(self.nodes[input.0].value.shape().to_vec());
                        gi.data_mut()[index] = grad_out.item()?;
                        accumulate(&mut grads, input, gi, op_name)?;
                    }
                }
                Op::DotConst { input, coeffs } => {
                    let input = *input;
                    if self.nodes[input.0].tracked {
                        let g = grad_out.item()?;
                        let data: Vec<T> = coeffs.iter().map(|&c| c * g).collect();
                        let shape = self.nodes[input.0].value.shape().to_vec();
                        accumulate(&mut grads, input, Tensor::new(shape, data)?, op_name)?;
                    }
                }
                Op::ClassLogitSum { logits, class } => {
                    let (logits, class) = (*logits, *class);
                    if self.nodes[logits.0].tracked {
                        let g = grad_out.item()?;
                        let shape = self.nodes[logits.0].value.shape().to_vec();
                        let c = shape[1];
                        let mut gi = Tensor::zeros(shape);
                        for row_start in (0..gi.numel()).step_by(c) {
                            gi.data_mut()[row_start + class] = g;
                        }
                        accumulate(&mut grads, logits, gi, op_name)?;
                    }
                }
                Op::WeightedCrossEntropy { logits, labels, weights, probs } => {
                    let logits_id = *logits;
                    if self.nodes[logits_id.0].tracked {
                        let g = grad_out.item()?;
                        let shape = self.nodes[logits_id.0].value.shape().to_vec();
                        let (n, c) = (shape[0], shape[1]);
                        let inv_n = T::from_f64(1.0 / n as f64);
                        let mut gi = vec![T::zero(); n * c];
                        for (row, &label) in labels.iter().enumerate() {
                            let w = weights[label] * inv_n * g;
                            for col in 0..c {
                                let p = probs[row * c + col];
                                let indicator = if col == label { T::one() } else { T::zero() };
                                gi[row * c + col] = w * (p - indicator);
                            }
                        }
                        accumulate(&mut grads, logits_id, Tensor::new(shape, gi)?, op_name)?;
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Adds `delta` into the gradient slot for `id`, checking finiteness so a NaN
/// is reported at the op that produced it.
fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: ValueId,
    delta: Tensor<T>,
    op: &'static str,
) -> crate::error::Result<()> {
    if !delta.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteGrad { op });
    }
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, &d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}
