//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward pass; operations
//! append nodes and return [`Var`] handles. [`Tape::backward`] walks the
//! recording in reverse and accumulates gradients by the chain rule. The
//! operator set is exactly what the classifier and its losses need: no
//! general broadcasting beyond bias adds and scalar ops, so shape bugs
//! surface as errors instead of silent expansion.

mod gradcheck;
mod ops;
#[cfg(test)]
mod tests;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport, ParamReport};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Forward-pass mode. Dropout and batch-norm statistics differ between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffers {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnBuffers {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// `lhs + rhs` where `rhs.shape == lhs.shape[1..]` (broadcast over axis 0).
    AddBcast0(Var, Var),
    /// `[B,C,L] + [C]` channel bias.
    BiasAddChan(Var, Var),
    Matmul { a: Var, b: Var, transpose_b: bool },
    Conv1d { x: Var, w: Var, stride: usize, pad: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    /// `[B,C,L] -> [B,C]` global average over the temporal axis.
    AvgPoolAll { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    /// Softmax along the last axis.
    Softmax(Var),
    /// Concatenate 2-D tensors along axis 1.
    Concat2 { parts: Vec<Var> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    /// Mean over axis 1 of a 3-D tensor.
    MeanAxis1(Var),
    MeanAll(Var),
    SumAll(Var),
    Dropout { x: Var, keep_scale: f64, mask: Vec<bool> },
    /// Row-wise `x / (||x|| + eps)` on `[N,D]`.
    L2NormRows { x: Var, eps: f64 },
    /// Row-wise cosine similarity of two `[N,D]` tensors -> `[N]`.
    CosineSim { a: Var, b: Var, eps: f64 },
    /// Batched scaled dot-product attention over `[N,L,Dh]` q/k/v.
    Attention { q: Var, k: Var, v: Var, weights: Tensor },
    FocalLoss { logits: Var, labels: Vec<usize>, gamma: f64 },
    /// Per-anchor prototype alignment term -> `[N]`.
    IntraTerm { z: Var, protos: Var, labels: Vec<usize>, align: Vec<f64>, eps: f64 },
    /// Per-anchor weighted log-sum-exp repulsion term -> `[N]`.
    InterTerm { z: Var, labels: Vec<usize>, repel: Tensor, tau: f64, eps: f64 },
    /// `(1/N) * sum_i w_i x_i` -> scalar.
    WeightedMean { x: Var, weights: Vec<f64> },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
}

/// Gradients of one scalar loss with respect to every reachable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; zeros if the loss does not reach it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Recording of one forward pass, topologically ordered by construction.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    // ----- elementwise and scalar ops -------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    /// `a + b` with `b` broadcast over axis 0 (`b.shape == a.shape[1..]`).
    pub fn add_bcast0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() < 2 || bv.shape() != &av.shape()[1..] {
            return Err(Error::ShapeMismatch { expected: av.shape()[1..].to_vec(), got: bv.shape().to_vec() });
        }
        let inner = bv.numel();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += bv.data()[i % inner];
        }
        Ok(self.push(out, Op::AddBcast0(a, b)))
    }

    /// `[B,C,L] + [C]` channel bias.
    pub fn bias_add_chan(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.ndim() != 3 || bv.ndim() != 1 || bv.shape()[0] != xv.shape()[1] {
            return Err(Error::ShapeMismatch { expected: vec![xv.shape()[1]], got: bv.shape().to_vec() });
        }
        let (b, c, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = xv.clone();
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * l;
                let add = bv.data()[ci];
                for t in 0..l {
                    out.data_mut()[off + t] += add;
                }
            }
        }
        Ok(self.push(out, Op::BiasAddChan(x, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::gelu_fwd);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::sigmoid_fwd);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::log);
        self.push(v, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax_fwd(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    // ----- structural ops ---------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = ops::permute_fwd(self.value(a), perm)?;
        Ok(self.push(v, Op::Permute { x: a, perm: perm.to_vec() }))
    }

    pub fn concat2(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat2_fwd(&tensors)?;
        Ok(self.push(v, Op::Concat2 { parts: parts.to_vec() }))
    }

    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        let v = ops::mean_axis1_fwd(self.value(a))?;
        Ok(self.push(v, Op::MeanAxis1(a)))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    // ----- linear algebra / conv -------------------------------------------

    /// `a @ b`, or `a @ b^T` when `transpose_b`. Both operands 2-D.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let v = ops::matmul_fwd(self.value(a), self.value(b), transpose_b)?;
        Ok(self.push(v, Op::Matmul { a, b, transpose_b }))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = ops::conv1d_fwd(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(v, Op::Conv1d { x, w, stride, pad }))
    }

    pub fn maxpool1d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (v, argmax) = ops::maxpool1d_fwd(self.value(x), k, stride, pad)?;
        Ok(self.push(v, Op::MaxPool1d { x, argmax }))
    }

    /// Adaptive average pooling to one output step: `[B,C,L] -> [B,C]`.
    pub fn adaptive_avgpool1(&mut self, x: Var) -> Result<Var> {
        let v = ops::avgpool_all_fwd(self.value(x))?;
        Ok(self.push(v, Op::AvgPoolAll { x }))
    }

    // ----- normalization -----------------------------------------------------

    /// 1-D batch norm over `[B,C,L]`. Batch statistics in train mode (and the
    /// running buffers are updated in place); running statistics in eval mode.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        buffers: &mut BnBuffers,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (value, mean, inv_std) =
            ops::batchnorm_fwd(self.value(x), self.value(gamma), self.value(beta), buffers, mode, momentum, eps)?;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, mean, inv_std, train: mode == Mode::Train }))
    }

    /// Layer norm along the last axis with affine parameters.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, mean, inv_std) = ops::layernorm_fwd(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, mean, inv_std }))
    }

    // ----- stochastic --------------------------------------------------------

    /// Inverted dropout. Identity in eval mode (no node is recorded).
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut DetRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(alloc::format!("dropout p={p} outside [0,1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<bool> = (0..xv.numel()).map(|_| rng.gen::<f64>() >= p).collect();
        let mut out = xv.clone();
        for (v, &keep) in out.data_mut().iter_mut().zip(&mask) {
            *v = if keep { *v * keep_scale } else { 0.0 };
        }
        Ok(self.push(out, Op::Dropout { x, keep_scale, mask }))
    }

    // ----- similarity / attention / losses -----------------------------------

    /// Row-wise `x / (||x||_2 + eps)` on `[N,D]`.
    pub fn l2norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = ops::l2norm_rows_fwd(self.value(x), eps)?;
        Ok(self.push(v, Op::L2NormRows { x, eps }))
    }

    /// Row-wise cosine similarity of `[N,D]` pairs -> `[N]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let v = ops::cosine_sim_fwd(self.value(a), self.value(b), eps)?;
        Ok(self.push(v, Op::CosineSim { a, b, eps }))
    }

    /// Scaled dot-product attention on `[N,L,Dh]` q/k/v.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (value, weights) = ops::attention_fwd(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(value, Op::Attention { q, k, v, weights }))
    }

    /// Mean focal loss over the batch: `-(1 - p_t)^gamma * log(p_t)`.
    pub fn focal_loss(&mut self, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
        let v = ops::focal_fwd(self.value(logits), labels, gamma)?;
        Ok(self.push(v, Op::FocalLoss { logits, labels: labels.to_vec(), gamma }))
    }

    /// Per-anchor prototype alignment: `align[y_i] * (1 - cos(z_i, protos[y_i]))`.
    pub fn intra_term(&mut self, z: Var, protos: Var, labels: &[usize], align: &[f64], eps: f64) -> Result<Var> {
        let v = ops::intra_fwd(self.value(z), self.value(protos), labels, align, eps)?;
        Ok(self.push(v, Op::IntraTerm { z, protos, labels: labels.to_vec(), align: align.to_vec(), eps }))
    }

    /// Per-anchor weighted log-sum-exp repulsion. Returns the `[N]` values and
    /// the number of anchors skipped for lack of any positively weighted pair.
    pub fn inter_term(&mut self, z: Var, labels: &[usize], repel: &Tensor, tau: f64, eps: f64) -> Result<(Var, usize)> {
        let (v, skipped) = ops::inter_fwd(self.value(z), labels, repel, tau, eps)?;
        let var = self.push(v, Op::InterTerm { z, labels: labels.to_vec(), repel: repel.clone(), tau, eps });
        Ok((var, skipped))
    }

    /// `(1/N) * sum_i w_i x_i` over an `[N]` vector.
    pub fn weighted_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 1 || xv.numel() != weights.len() {
            return Err(Error::ShapeMismatch { expected: vec![weights.len()], got: xv.shape().to_vec() });
        }
        let n = weights.len() as f64;
        let s = xv.data().iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Op::WeightedMean { x, weights: weights.to_vec() }))
    }

    // ----- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Leaves unreachable from the loss get
    /// no gradient entry (reported as zeros by [`Gradients::wrt`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss { got: self.value(loss).shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            ops::backward_node(self, idx, &grad, &mut grads)?;
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip preserves shape")
}

pub(crate) fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                *gi += di;
            }
        }
        slot => *slot = Some(delta),
    }
}
