//! Reverse-mode differentiation over the operations the network uses.
//!
//! Forward code runs through an [`Exec`] context. Without a tape it is a
//! plain inference pass. With a tape every operation appends a record
//! holding the values its adjoint needs, and [`GradTape::backward`] replays
//! the records in reverse, accumulating gradients per value and per
//! parameter. Fan-out (one value feeding several consumers) is handled by
//! summing incoming gradients.

use log::warn;

use crate::conv::{self, Orientation};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Scalar, Shape, Tensor};
use crate::Rng;

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle of a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A value flowing through [`Exec`]; carries its tape handle when recording.
#[derive(Clone, Debug)]
pub struct Node<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub(crate) var: Option<Var>,
}

impl<T: Scalar> Node<T> {
    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn var(&self) -> Option<Var> {
        self.var
    }
}

/// Parameter handles of one batch-normalization layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Batch statistics observed in a training pass, to be folded into the
/// running averages once the pass is complete.
#[derive(Clone, Debug)]
pub struct BnUpdate<T: Scalar> {
    pub params: BnParams,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

impl<T: Scalar> BnUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, b) in store.values_mut(self.params.running_mean).iter_mut().zip(&self.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in store.values_mut(self.params.running_var).iter_mut().zip(&self.var) {
            *r = keep * *r + m * *b;
        }
    }
}

#[derive(Debug)]
enum Record<T: Scalar> {
    Conv {
        x: Var,
        y: Var,
        input: Tensor<T>,
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        dilation: usize,
        groups: usize,
    },
    Pointwise {
        x: Var,
        y: Var,
        input: Tensor<T>,
        kernel: ParamId,
    },
    Transposed {
        x: Var,
        y: Var,
        input: Tensor<T>,
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        dilation: usize,
    },
    /// Batch norm with batch statistics.
    BatchNorm {
        x: Var,
        y: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        gamma: ParamId,
        beta: ParamId,
    },
    /// Batch norm with frozen running statistics.
    Affine {
        x: Var,
        y: Var,
        xhat: Tensor<T>,
        scale: Vec<T>,
        gamma: ParamId,
        beta: ParamId,
    },
    Relu {
        x: Var,
        y: Var,
        output: Tensor<T>,
    },
    Add {
        a: Var,
        b: Var,
        y: Var,
    },
    Concat {
        a: Var,
        b: Var,
        y: Var,
        split: usize,
    },
    MaxPool {
        x: Var,
        y: Var,
        input_shape: Shape,
        argmax: Vec<u32>,
    },
    Dropout {
        x: Var,
        y: Var,
        mask: Vec<T>,
    },
}

/// Recorded operation sequence of one forward pass.
#[derive(Debug)]
pub struct GradTape<T: Scalar = f32> {
    shapes: Vec<Shape>,
    records: Vec<Record<T>>,
    param_count: usize,
}

/// Result of [`GradTape::backward`]: one gradient buffer per parameter
/// (zeros for parameters the pass did not touch or that are not trainable)
/// and the gradient with respect to the recorded input.
#[derive(Clone, Debug)]
pub struct Grads<T: Scalar = f32> {
    pub params: Vec<Tensor<T>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> GradTape<T> {
    fn new(param_count: usize) -> Self {
        GradTape {
            shapes: Vec::new(),
            records: Vec::new(),
            param_count,
        }
    }

    fn fresh(&mut self, shape: Shape) -> Var {
        self.shapes.push(shape);
        Var(self.shapes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Which ReLUs pass their input and which window element each max pool
    /// selects. Two passes with equal patterns lie on the same smooth piece
    /// of the network function.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for rec in &self.records {
            match rec {
                Record::Relu { output, .. } => out.extend(output.data().iter().map(|v| (*v > T::zero()) as u32)),
                Record::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Propagates `loss_grad` (the gradient of the loss with respect to
    /// `output`) back through every record.
    pub fn backward(&self, store: &ParamStore<T>, output: &Node<T>, loss_grad: &Tensor<T>) -> Result<Grads<T>> {
        let out = output
            .var
            .ok_or_else(|| Error::shape("output was not recorded on a tape"))?;
        let expected = self.shapes[out.0];
        if loss_grad.shape() != expected {
            return Err(Error::TapeMismatch {
                expected,
                got: loss_grad.shape(),
            });
        }
        if store.len() != self.param_count {
            return Err(Error::shape("parameter store differs from the recorded one"));
        }
        let mut vgrad: Vec<Option<Tensor<T>>> = vec![None; self.shapes.len()];
        vgrad[out.0] = Some(loss_grad.clone());
        let mut pgrad: Vec<Option<Tensor<T>>> = vec![None; self.param_count];

        fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(s) => s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }
        fn acc_vec<T: Scalar>(store: &ParamStore<T>, slot: &mut Option<Tensor<T>>, id: ParamId, g: Vec<T>) {
            let shape = store.tensor(id).shape();
            acc(slot, Tensor::from_vec(shape, g).expect("gradient length"));
        }

        for rec in self.records.iter().rev() {
            match rec {
                Record::Conv {
                    x,
                    y,
                    input,
                    kernel,
                    bias,
                    stride,
                    dilation,
                    groups,
                } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    let (dx, dk, db) =
                        conv::conv2d_backward(input, store.tensor(*kernel), &dy, *stride, *dilation, *groups)?;
                    acc(&mut vgrad[x.0], dx);
                    acc(&mut pgrad[kernel.0], dk);
                    if let Some(b) = bias {
                        acc_vec(store, &mut pgrad[b.0], *b, db);
                    }
                }
                Record::Pointwise { x, y, input, kernel } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    let (dx, dk) = conv::pointwise_backward(input, store.tensor(*kernel), &dy)?;
                    acc(&mut vgrad[x.0], dx);
                    acc(&mut pgrad[kernel.0], dk);
                }
                Record::Transposed {
                    x,
                    y,
                    input,
                    kernel,
                    bias,
                    stride,
                    dilation,
                } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    let (dx, dk, db) =
                        conv::conv_transposed2d_backward(input, store.tensor(*kernel), &dy, *stride, *dilation)?;
                    acc(&mut vgrad[x.0], dx);
                    acc(&mut pgrad[kernel.0], dk);
                    if let Some(b) = bias {
                        acc_vec(store, &mut pgrad[b.0], *b, db);
                    }
                }
                Record::BatchNorm {
                    x,
                    y,
                    xhat,
                    inv_std,
                    gamma,
                    beta,
                } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    let (dgamma, dbeta) = gamma_beta_grads(xhat, &dy);
                    let s = dy.shape();
                    let count = T::lit((s.batch * s.plane()) as f64);
                    let g = store.values(*gamma);
                    let mut dx = Tensor::zeros(s);
                    let plane = s.plane();
                    for (p, ((d, gy), xh)) in dx
                        .data_mut()
                        .chunks_mut(plane)
                        .zip(dy.data().chunks(plane))
                        .zip(xhat.data().chunks(plane))
                        .enumerate()
                    {
                        let c = p % s.channels;
                        let k = g[c] * inv_std[c] / count;
                        for ((dv, gv), xv) in d.iter_mut().zip(gy).zip(xh) {
                            *dv = k * (count * *gv - dbeta[c] - *xv * dgamma[c]);
                        }
                    }
                    acc(&mut vgrad[x.0], dx);
                    acc_vec(store, &mut pgrad[gamma.0], *gamma, dgamma);
                    acc_vec(store, &mut pgrad[beta.0], *beta, dbeta);
                }
                Record::Affine {
                    x,
                    y,
                    xhat,
                    scale,
                    gamma,
                    beta,
                } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    let (dgamma, dbeta) = gamma_beta_grads(xhat, &dy);
                    let zero = vec![T::zero(); scale.len()];
                    acc(&mut vgrad[x.0], tensor::channel_affine(&dy, scale, &zero));
                    acc_vec(store, &mut pgrad[gamma.0], *gamma, dgamma);
                    acc_vec(store, &mut pgrad[beta.0], *beta, dbeta);
                }
                Record::Relu { x, y, output } => {
                    let Some(mut dy) = vgrad[y.0].take() else { continue };
                    dy.data_mut().iter_mut().zip(output.data()).for_each(|(g, o)| {
                        if *o <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    acc(&mut vgrad[x.0], dy);
                }
                Record::Add { a, b, y } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    acc(&mut vgrad[a.0], dy.clone());
                    acc(&mut vgrad[b.0], dy);
                }
                Record::Concat { a, b, y, split } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    let (da, db) = tensor::split_channels(&dy, *split)?;
                    acc(&mut vgrad[a.0], da);
                    acc(&mut vgrad[b.0], db);
                }
                Record::MaxPool {
                    x,
                    y,
                    input_shape,
                    argmax,
                } => {
                    let Some(dy) = vgrad[y.0].take() else { continue };
                    let mut dx = Tensor::zeros(*input_shape);
                    let d = dx.data_mut();
                    for (g, &i) in dy.data().iter().zip(argmax) {
                        d[i as usize] += *g;
                    }
                    acc(&mut vgrad[x.0], dx);
                }
                Record::Dropout { x, y, mask } => {
                    let Some(mut dy) = vgrad[y.0].take() else { continue };
                    dy.data_mut().iter_mut().zip(mask).for_each(|(g, m)| *g *= *m);
                    acc(&mut vgrad[x.0], dy);
                }
            }
        }

        let params = pgrad
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let p = store.get(ParamId(i));
                match g {
                    Some(g) if p.role.trainable() => g,
                    _ => Tensor::zeros(p.value.shape()),
                }
            })
            .collect();
        Ok(Grads {
            params,
            input: vgrad.first_mut().and_then(Option::take),
        })
    }
}

fn gamma_beta_grads<T: Scalar>(xhat: &Tensor<T>, dy: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = dy.shape();
    let plane = s.plane().max(1);
    let mut dgamma = vec![T::zero(); s.channels];
    let mut dbeta = vec![T::zero(); s.channels];
    for (p, (gy, xh)) in dy.data().chunks(plane).zip(xhat.data().chunks(plane)).enumerate() {
        let c = p % s.channels;
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for (g, x) in gy.iter().zip(xh) {
            sg += *g * *x;
            sb += *g;
        }
        dgamma[c] += sg;
        dbeta[c] += sb;
    }
    (dgamma, dbeta)
}

/// Execution context for one forward pass.
pub struct Exec<'a, T: Scalar = f32> {
    store: &'a ParamStore<T>,
    tape: Option<GradTape<T>>,
    training: bool,
    rng: Option<&'a mut Rng>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar> Exec<'a, T> {
    /// Inference: running batch-norm statistics, no dropout, no tape.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Exec {
            store,
            tape: None,
            training: false,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    /// Training: batch statistics, dropout drawn from `rng`, recording.
    pub fn training(store: &'a ParamStore<T>, rng: &'a mut Rng) -> Self {
        Exec {
            store,
            tape: Some(GradTape::new(store.len())),
            training: true,
            rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    /// Inference semantics but recorded, for differentiating the frozen
    /// network.
    pub fn recording(store: &'a ParamStore<T>) -> Self {
        Exec {
            tape: Some(GradTape::new(store.len())),
            ..Self::inference(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Consumes the context, returning the tape (if recording) and the
    /// batch-norm statistics gathered in training mode.
    pub fn finish(self) -> (Option<GradTape<T>>, Vec<BnUpdate<T>>) {
        (self.tape, self.bn_updates)
    }

    fn var(&mut self, shape: Shape) -> Option<Var> {
        self.tape.as_mut().map(|t| t.fresh(shape))
    }

    fn record(&mut self, f: impl FnOnce() -> Record<T>) {
        if let Some(t) = self.tape.as_mut() {
            t.records.push(f());
        }
    }

    fn node(&mut self, value: Tensor<T>) -> Node<T> {
        let var = self.var(value.shape());
        Node { value, var }
    }

    /// Registers the pass input. Must be the first value created so that
    /// [`Grads::input`] refers to it.
    pub fn input(&mut self, x: Tensor<T>) -> Node<T> {
        self.node(x)
    }

    pub fn conv2d(
        &mut self,
        x: &Node<T>,
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Node<T>> {
        let b = bias.map(|b| self.store.values(b));
        let y = conv::conv2d(&x.value, self.store.tensor(kernel), b, stride, dilation, groups)?;
        let y = self.node(y);
        if let (Some(xv), Some(yv)) = (x.var, y.var) {
            self.record(|| Record::Conv {
                x: xv,
                y: yv,
                input: x.value.clone(),
                kernel,
                bias,
                stride,
                dilation,
                groups,
            });
        }
        Ok(y)
    }

    /// Per-channel 1D depthwise convolution; `kernel` is shaped
    /// `(c, 1, 1, n)` or `(c, 1, n, 1)`.
    pub fn depthwise_1d(
        &mut self,
        x: &Node<T>,
        orientation: Orientation,
        kernel: ParamId,
        dilation: usize,
    ) -> Result<Node<T>> {
        let k = self.store.tensor(kernel).shape();
        let n = match orientation {
            Orientation::Horizontal => k.width,
            Orientation::Vertical => k.height,
        };
        if k != orientation.kernel_shape(x.shape().channels, n) {
            return Err(Error::shape(format!(
                "{orientation:?} depthwise kernel {k} does not fit input {}",
                x.shape()
            )));
        }
        let c = x.shape().channels;
        self.conv2d(x, kernel, None, 1, dilation, c)
    }

    pub fn pointwise(&mut self, x: &Node<T>, kernel: ParamId) -> Result<Node<T>> {
        let y = conv::conv_pointwise(&x.value, self.store.tensor(kernel))?;
        let y = self.node(y);
        if let (Some(xv), Some(yv)) = (x.var, y.var) {
            self.record(|| Record::Pointwise {
                x: xv,
                y: yv,
                input: x.value.clone(),
                kernel,
            });
        }
        Ok(y)
    }

    pub fn conv_transposed(
        &mut self,
        x: &Node<T>,
        kernel: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        dilation: usize,
    ) -> Result<Node<T>> {
        let b = bias.map(|b| self.store.values(b));
        let y = conv::conv_transposed2d(&x.value, self.store.tensor(kernel), b, stride, dilation)?;
        let y = self.node(y);
        if let (Some(xv), Some(yv)) = (x.var, y.var) {
            self.record(|| Record::Transposed {
                x: xv,
                y: yv,
                input: x.value.clone(),
                kernel,
                bias,
                stride,
                dilation,
            });
        }
        Ok(y)
    }

    pub fn batch_norm(&mut self, x: &Node<T>, bn: BnParams) -> Result<Node<T>> {
        let s = x.shape();
        let c = s.channels;
        let gamma = self.store.values(bn.gamma);
        let beta = self.store.values(bn.beta);
        if gamma.len() != c || beta.len() != c {
            return Err(Error::shape(format!("batch norm over {c} channels")));
        }
        let eps = T::lit(BN_EPS);
        if self.training {
            let count = s.batch * s.plane();
            if count == 0 {
                return Err(Error::shape("batch norm over an empty batch"));
            }
            let plane = s.plane();
            let mut mean = vec![T::zero(); c];
            for (p, chunk) in x.value.data().chunks(plane).enumerate() {
                mean[p % c] += chunk.iter().copied().fold(T::zero(), |a, v| a + v);
            }
            let n = T::lit(count as f64);
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); c];
            for (p, chunk) in x.value.data().chunks(plane).enumerate() {
                let m = mean[p % c];
                var[p % c] += chunk.iter().fold(T::zero(), |a, v| a + (*v - m) * (*v - m));
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(m, k)| -*m * *k).collect();
            let xhat = tensor::channel_affine(&x.value, &inv_std, &shift);
            let y = tensor::channel_affine(&xhat, gamma, beta);
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            self.bn_updates.push(BnUpdate {
                params: bn,
                mean,
                var: var.iter().map(|v| *v * unbias).collect(),
            });
            let y = self.node(y);
            if let (Some(xv), Some(yv)) = (x.var, y.var) {
                self.record(|| Record::BatchNorm {
                    x: xv,
                    y: yv,
                    xhat,
                    inv_std,
                    gamma: bn.gamma,
                    beta: bn.beta,
                });
            }
            Ok(y)
        } else {
            let mean = self.store.values(bn.running_mean);
            let var = self.store.values(bn.running_var);
            let y = tensor::batch_norm(&x.value, mean, var, gamma, beta, eps)?;
            let y = self.node(y);
            if let (Some(xv), Some(yv)) = (x.var, y.var) {
                let scale: Vec<T> = (0..c).map(|i| gamma[i] / (var[i] + eps).sqrt()).collect();
                let inv: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
                let shift: Vec<T> = mean.iter().zip(&inv).map(|(m, k)| -*m * *k).collect();
                let xhat = tensor::channel_affine(&x.value, &inv, &shift);
                self.record(|| Record::Affine {
                    x: xv,
                    y: yv,
                    xhat,
                    scale,
                    gamma: bn.gamma,
                    beta: bn.beta,
                });
            }
            Ok(y)
        }
    }

    pub fn relu(&mut self, x: &Node<T>) -> Node<T> {
        let y = self.node(tensor::relu(&x.value));
        if let (Some(xv), Some(yv)) = (x.var, y.var) {
            self.record(|| Record::Relu {
                x: xv,
                y: yv,
                output: y.value.clone(),
            });
        }
        y
    }

    pub fn add(&mut self, a: &Node<T>, b: &Node<T>) -> Result<Node<T>> {
        let y = self.node(tensor::add(&a.value, &b.value)?);
        if let (Some(av), Some(bv), Some(yv)) = (a.var, b.var, y.var) {
            self.record(|| Record::Add { a: av, b: bv, y: yv });
        }
        Ok(y)
    }

    pub fn concat(&mut self, a: &Node<T>, b: &Node<T>) -> Result<Node<T>> {
        let y = self.node(tensor::concat_channels(&a.value, &b.value)?);
        if let (Some(av), Some(bv), Some(yv)) = (a.var, b.var, y.var) {
            let split = a.shape().channels;
            self.record(|| Record::Concat {
                a: av,
                b: bv,
                y: yv,
                split,
            });
        }
        Ok(y)
    }

    pub fn max_pool(&mut self, x: &Node<T>) -> Result<Node<T>> {
        let (out, argmax) = tensor::max_pool_2x2_with_argmax(&x.value)?;
        let y = self.node(out);
        if let (Some(xv), Some(yv)) = (x.var, y.var) {
            let input_shape = x.shape();
            self.record(|| Record::MaxPool {
                x: xv,
                y: yv,
                input_shape,
                argmax,
            });
        }
        Ok(y)
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: &Node<T>, p: f64) -> Node<T> {
        if !self.training || p <= 0.0 {
            return x.clone();
        }
        let rng = self.rng.as_deref_mut().expect("training context owns an rng");
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.value.data().len())
            .map(|_| if rng.uniform() >= p { keep } else { T::zero() })
            .collect();
        let out: Vec<T> = x.value.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let y = self.node(Tensor::from_vec(x.shape(), out).expect("same shape"));
        if let (Some(xv), Some(yv)) = (x.var, y.var) {
            self.record(|| Record::Dropout { x: xv, y: yv, mask });
        }
        y
    }
}

/// Mean per-pixel softmax cross-entropy over pixels whose label is not
/// `ignore`, and its gradient with respect to `logits`.
///
/// `labels` is `B x H x W` row-major. When every pixel is ignored the loss
/// and gradient are zero and a warning is logged.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u32], ignore: u32) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let plane = s.plane();
    if labels.len() != s.batch * plane {
        return Err(Error::shape(format!("{} labels for logits {s}", labels.len())));
    }
    for &l in labels {
        if l != ignore && l as usize >= s.channels {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: s.channels,
            });
        }
    }
    let scored = labels.iter().filter(|&&l| l != ignore).count();
    let mut grad = Tensor::zeros(s);
    if scored == 0 {
        warn!("softmax cross-entropy: every pixel carries the ignore label");
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::lit(scored as f64);
    let mut loss = T::zero();
    let x = logits.data();
    let g = grad.data_mut();
    let mut probs = vec![T::zero(); s.channels];
    for b in 0..s.batch {
        for p in 0..plane {
            let label = labels[b * plane + p];
            if label == ignore {
                continue;
            }
            let idx = |c: usize| (b * s.channels + c) * plane + p;
            let max = (0..s.channels).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (x[idx(c)] - max).exp();
                sum += *pr;
            }
            loss += sum.ln() + max - x[idx(label as usize)];
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == label as usize { T::one() } else { T::zero() };
                g[idx(c)] = (*pr / sum - onehot) * inv;
            }
        }
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(Shape::new(2, 5, 3, 3));
        let labels = vec![1u32; 18];
        let (loss, _) = softmax_cross_entropy(&logits, &labels, 255).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Tensor::<f64>::from_fn(Shape::new(1, 3, 1, 2), |_, c, _, _| if c == 2 { margin } else { 0.0 });
            let (loss, _) = softmax_cross_entropy(&logits, &[2, 2], 255).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn all_ignored_is_zero() {
        let logits = Tensor::<f32>::full(Shape::new(1, 3, 2, 2), 0.3);
        let (loss, grad) = softmax_cross_entropy(&logits, &[255; 4], 255).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn label_range_checked() {
        let logits = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3], 255),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn relu_gradient_zero_on_negatives() {
        let store = ParamStore::<f64>::new();
        let mut ex = Exec::recording(&store);
        let x = ex.input(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-2.0, -0.5, 1.5]).unwrap());
        let y = ex.relu(&x);
        let (tape, _) = ex.finish();
        let dy = Tensor::full(y.shape(), 3.0);
        let g = tape.unwrap().backward(&store, &y, &dy).unwrap();
        assert_eq!(g.input.unwrap().data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn add_passes_gradient_to_both() {
        let store = ParamStore::<f64>::new();
        let mut ex = Exec::recording(&store);
        let a = ex.input(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let b = ex.relu(&a);
        let y = ex.add(&a, &b).unwrap();
        let (tape, _) = ex.finish();
        let dy = Tensor::from_vec(y.shape(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = tape.unwrap().backward(&store, &y, &dy).unwrap();
        // a receives dy directly and again through the relu (a > 0).
        assert_eq!(g.input.unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn backward_rejects_wrong_gradient_shape() {
        let store = ParamStore::<f32>::new();
        let mut ex = Exec::recording(&store);
        let x = ex.input(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let y = ex.relu(&x);
        let (tape, _) = ex.finish();
        let err = tape
            .unwrap()
            .backward(&store, &y, &Tensor::zeros(Shape::new(1, 2, 2, 1)))
            .unwrap_err();
        assert!(matches!(err, Error::TapeMismatch { .. }));
    }

    #[test]
    fn non_trainable_grads_are_zero_buffers() {
        let mut store = ParamStore::<f64>::new();
        let bn = BnParams {
            gamma: store.vector("g", ParamRole::Gamma, vec![1.5, 0.5]),
            beta: store.vector("b", ParamRole::Beta, vec![0.0, 0.1]),
            running_mean: store.vector("m", ParamRole::RunningMean, vec![0.0; 2]),
            running_var: store.vector("v", ParamRole::RunningVar, vec![1.0; 2]),
        };
        let mut rng = Rng::new(1);
        let x0 = Tensor::random(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut rng);
        let mut ex = Exec::training(&store, &mut rng);
        let x = ex.input(x0);
        let y = ex.batch_norm(&x, bn).unwrap();
        let (tape, updates) = ex.finish();
        assert_eq!(updates.len(), 1);
        let g = tape
            .unwrap()
            .backward(&store, &y, &Tensor::full(y.shape(), 1.0))
            .unwrap();
        assert_eq!(g.params.len(), store.len());
        for (grad, (_, p)) in g.params.iter().zip(store.iter()) {
            assert_eq!(grad.shape(), p.value.shape());
        }
        assert!(g.params[2].data().iter().all(|&v| v == 0.0));
        // Sum of a normalized batch does not depend on the input.
        assert!(g.input.unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }
}
