//! Central finite-difference checks of the tape's analytic gradients, run in
//! `f64` through the same generic code as the `f32` network.

use crate::autograd::{softmax_cross_entropy, BnParams, Exec, Node};
use crate::conv::Orientation;
use crate::error::{Error, Result};
use crate::graph::{DownsampleUnit, EermUnit, NetworkGraph, UpsampleUnit};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::Rng;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Coordinates sampled from the input, and at least as many again from the
/// parameters when there are any.
pub const MIN_COORDS: usize = 10;
const MAX_RESAMPLES: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates >= MIN_COORDS && self.max_rel_error < GRAD_TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; masks are replayed from a fixed seed.
    Training,
    /// Running statistics, no dropout.
    Inference,
}

enum Coord {
    Input(usize),
    Param(usize, usize),
}

/// Checks `f` under the scalar loss `sum(w * f(x))` with a fixed random `w`.
/// Coordinates whose `+-h` stencil changes a ReLU or max-pool decision are
/// not differentiable there at step `h` and are replaced by fresh samples.
pub fn check_op<F>(
    name: &str,
    mut store: ParamStore<f64>,
    input: Tensor<f64>,
    mode: Mode,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Exec<'_, f64>, &Node<f64>) -> Result<Node<f64>>,
{
    let dropout_seed = seed ^ 0x5eed;
    let run =
        |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<(Node<f64>, Option<crate::autograd::GradTape<f64>>)> {
            let mut rng = Rng::new(dropout_seed);
            let mut ex = match mode {
                Mode::Training => Exec::training(store, &mut rng),
                Mode::Inference => Exec::recording(store),
            };
            let xn = ex.input(x.clone());
            let y = f(&mut ex, &xn)?;
            Ok((y, ex.finish().0))
        };
    let (y, tape) = run(&store, &input)?;
    let tape = tape.ok_or_else(|| Error::shape("gradient check needs a recording context"))?;
    let mut rng = Rng::new(seed);
    let w = Tensor::<f64>::random(y.shape(), -1.0, 1.0, &mut rng);
    let grads = tape.backward(&store, &y, &w)?;
    let gx = grads.input.ok_or_else(|| Error::shape("input gradient missing"))?;

    let mut coords: Vec<Coord> = (0..MIN_COORDS)
        .map(|_| Coord::Input(rng.below(0, input.shape().len())))
        .collect();
    let trainable: Vec<(usize, usize)> = store
        .iter()
        .filter(|(_, p)| p.role.trainable() && !p.is_empty())
        .map(|(id, p)| (id.index(), p.len()))
        .collect();
    if !trainable.is_empty() {
        let mut picked = 0;
        for &(id, len) in &trainable {
            for _ in 0..len.min(2) {
                coords.push(Coord::Param(id, rng.below(0, len)));
                picked += 1;
            }
        }
        while picked < MIN_COORDS {
            let (id, len) = trainable[rng.below(0, trainable.len())];
            coords.push(Coord::Param(id, rng.below(0, len)));
            picked += 1;
        }
    }

    let loss = |y: &Node<f64>| -> f64 { y.value.data().iter().zip(w.data()).map(|(a, b)| a * b).sum() };
    let base_pattern = tape.activation_pattern();
    // Loss at a perturbed point, or `None` if a ReLU or max pool switched.
    let probe = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<Option<f64>> {
        let (y, t) = run(store, x)?;
        let same = t.is_some_and(|t| t.activation_pattern() == base_pattern);
        Ok(same.then(|| loss(&y)))
    };
    let mut x = input;
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut resampled = 0;
    let mut queue: std::collections::VecDeque<Coord> = coords.into();
    while let Some(c) = queue.pop_front() {
        let (analytic, lp, lm) = match c {
            Coord::Input(i) => {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + FD_STEP;
                let lp = probe(&store, &x)?;
                x.data_mut()[i] = orig - FD_STEP;
                let lm = probe(&store, &x)?;
                x.data_mut()[i] = orig;
                (gx.data()[i], lp, lm)
            }
            Coord::Param(id, j) => {
                let pid = store.iter().nth(id).map(|(pid, _)| pid).expect("param id");
                let orig = store.values(pid)[j];
                store.values_mut(pid)[j] = orig + FD_STEP;
                let lp = probe(&store, &x)?;
                store.values_mut(pid)[j] = orig - FD_STEP;
                let lm = probe(&store, &x)?;
                store.values_mut(pid)[j] = orig;
                (grads.params[id].data()[j], lp, lm)
            }
        };
        let (Some(lp), Some(lm)) = (lp, lm) else {
            resampled += 1;
            if resampled > MAX_RESAMPLES {
                return Err(Error::shape(format!(
                    "{name}: no smooth coordinates near the sample point"
                )));
            }
            queue.push_back(match c {
                Coord::Input(_) => Coord::Input(rng.below(0, x.shape().len())),
                Coord::Param(id, _) => Coord::Param(id, rng.below(0, grads.params[id].shape().len())),
            });
            continue;
        };
        checked += 1;
        max_rel_error = max_rel_error.max(rel_error(analytic, (lp - lm) / (2.0 * FD_STEP)));
    }
    if resampled > 0 {
        log::debug!("{name}: resampled {resampled} coordinates whose stencil crossed a kink");
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        coordinates: checked,
        max_rel_error,
    })
}

/// Checks the softmax cross-entropy gradient, with some pixels ignored.
pub fn check_softmax_ce(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let shape = Shape::new(2, 4, 3, 3);
    let mut logits = Tensor::<f64>::random(shape, -2.0, 2.0, &mut rng);
    let labels: Vec<u32> = (0..shape.batch * shape.plane())
        .map(|i| if i % 7 == 3 { 255 } else { rng.below(0, 4) as u32 })
        .collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels, 255)?;
    let mut max_rel_error: f64 = 0.0;
    for _ in 0..2 * MIN_COORDS {
        let i = rng.below(0, shape.len());
        let orig = logits.data()[i];
        logits.data_mut()[i] = orig + FD_STEP;
        let lp = softmax_cross_entropy(&logits, &labels, 255)?.0;
        logits.data_mut()[i] = orig - FD_STEP;
        let lm = softmax_cross_entropy(&logits, &labels, 255)?.0;
        logits.data_mut()[i] = orig;
        max_rel_error = max_rel_error.max(rel_error(grad.data()[i], (lp - lm) / (2.0 * FD_STEP)));
    }
    Ok(GradCheckReport {
        name: "softmax cross-entropy".into(),
        coordinates: 2 * MIN_COORDS,
        max_rel_error,
    })
}

/// Moves batch-norm affine parameters and running statistics away from
/// their identity initialization.
fn jitter_norms(store: &mut ParamStore<f64>, rng: &mut Rng) {
    for p in store.iter_mut() {
        let (lo, hi) = match p.role {
            ParamRole::Gamma | ParamRole::RunningVar => (0.5, 1.5),
            ParamRole::Beta | ParamRole::Bias | ParamRole::RunningMean => (-0.5, 0.5),
            ParamRole::Kernel => continue,
        };
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.uniform_in(lo, hi));
    }
}

fn bn(store: &mut ParamStore<f64>, c: usize, rng: &mut Rng) -> BnParams {
    let v = |rng: &mut Rng, lo, hi| (0..c).map(|_| rng.uniform_in(lo, hi)).collect::<Vec<_>>();
    let gamma = v(rng, 0.5, 1.5);
    let beta = v(rng, -0.5, 0.5);
    let mean = v(rng, -0.2, 0.2);
    let var = v(rng, 0.5, 1.5);
    BnParams {
        gamma: store.vector("bn.gamma", ParamRole::Gamma, gamma),
        beta: store.vector("bn.beta", ParamRole::Beta, beta),
        running_mean: store.vector("bn.running_mean", ParamRole::RunningMean, mean),
        running_var: store.vector("bn.running_var", ParamRole::RunningVar, var),
    }
}

fn input(shape: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::random(shape, -1.0, 1.0, rng)
}

fn kernel(store: &mut ParamStore<f64>, name: &str, shape: Shape, rng: &mut Rng) -> crate::params::ParamId {
    store.kernel(name, Tensor::random(shape, -0.5, 0.5, rng))
}

fn bias(store: &mut ParamStore<f64>, n: usize, rng: &mut Rng) -> crate::params::ParamId {
    store.vector(
        "bias",
        ParamRole::Bias,
        (0..n).map(|_| rng.uniform_in(-0.5, 0.5)).collect(),
    )
}

/// Every differentiable op and unit, each with its own seeded instance.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    use Mode::{Inference, Training};
    let mut out = Vec::new();
    let mut rng = Rng::new(seed);
    let next = |rng: &mut Rng| rng.next_u64();

    {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", Shape::new(4, 3, 3, 3), &mut rng);
        let b = bias(&mut s, 4, &mut rng);
        let x = input(Shape::new(2, 3, 6, 6), &mut rng);
        out.push(check_op(
            "conv2d 3x3 + bias",
            s,
            x,
            Inference,
            next(&mut rng),
            |ex, x| ex.conv2d(x, k, Some(b), 1, 1, 1),
        )?);
    }
    {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", Shape::new(3, 2, 3, 3), &mut rng);
        let x = input(Shape::new(1, 2, 9, 7), &mut rng);
        out.push(check_op(
            "conv2d stride 2 dilation 2",
            s,
            x,
            Inference,
            next(&mut rng),
            |ex, x| ex.conv2d(x, k, None, 2, 2, 1),
        )?);
    }
    {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", Shape::new(6, 2, 3, 3), &mut rng);
        let x = input(Shape::new(1, 4, 5, 5), &mut rng);
        out.push(check_op(
            "grouped conv2d g=2",
            s,
            x,
            Inference,
            next(&mut rng),
            |ex, x| ex.conv2d(x, k, None, 1, 1, 2),
        )?);
    }
    for (orientation, r) in [(Orientation::Horizontal, 2), (Orientation::Vertical, 3)] {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", orientation.kernel_shape(3, 3), &mut rng);
        let x = input(Shape::new(2, 3, 7, 7), &mut rng);
        let name = format!("{orientation:?} depthwise 1x3 r={r}").to_lowercase();
        out.push(check_op(&name, s, x, Inference, next(&mut rng), move |ex, x| {
            ex.depthwise_1d(x, orientation, k, r)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", Shape::new(5, 3, 1, 1), &mut rng);
        let x = input(Shape::new(2, 3, 4, 4), &mut rng);
        out.push(check_op("pointwise", s, x, Inference, next(&mut rng), |ex, x| {
            ex.pointwise(x, k)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", Shape::new(3, 2, 3, 3), &mut rng);
        let b = bias(&mut s, 2, &mut rng);
        let x = input(Shape::new(2, 3, 3, 4), &mut rng);
        out.push(check_op(
            "transposed conv stride 2 + bias",
            s,
            x,
            Inference,
            next(&mut rng),
            |ex, x| ex.conv_transposed(x, k, Some(b), 2, 1),
        )?);
    }
    for mode in [Training, Inference] {
        let mut s = ParamStore::new();
        let p = bn(&mut s, 3, &mut rng);
        let x = input(Shape::new(2, 3, 4, 4), &mut rng);
        let name = format!("batch norm ({mode:?})").to_lowercase();
        out.push(check_op(&name, s, x, mode, next(&mut rng), move |ex, x| {
            ex.batch_norm(x, p)
        })?);
    }
    {
        let x = input(Shape::new(2, 3, 4, 4), &mut rng);
        out.push(check_op(
            "relu",
            ParamStore::new(),
            x,
            Inference,
            next(&mut rng),
            |ex, x| Ok(ex.relu(x)),
        )?);
    }
    {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", Shape::new(3, 3, 1, 1), &mut rng);
        let x = input(Shape::new(1, 3, 4, 4), &mut rng);
        out.push(check_op("add (fan-out)", s, x, Inference, next(&mut rng), |ex, x| {
            let y = ex.pointwise(x, k)?;
            ex.add(x, &y)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let k = kernel(&mut s, "k", Shape::new(2, 3, 3, 3), &mut rng);
        let x = input(Shape::new(2, 3, 4, 4), &mut rng);
        out.push(check_op("concat", s, x, Inference, next(&mut rng), |ex, x| {
            let y = ex.conv2d(x, k, None, 1, 1, 1)?;
            ex.concat(&y, x)
        })?);
    }
    {
        let x = input(Shape::new(2, 3, 6, 4), &mut rng);
        out.push(check_op(
            "max pool 2x2",
            ParamStore::new(),
            x,
            Inference,
            next(&mut rng),
            |ex, x| ex.max_pool(x),
        )?);
    }
    {
        let x = input(Shape::new(2, 3, 4, 4), &mut rng);
        out.push(check_op(
            "dropout p=0.3",
            ParamStore::new(),
            x,
            Training,
            next(&mut rng),
            |ex, x| Ok(ex.dropout(x, 0.3)),
        )?);
    }
    for mode in [Training, Inference] {
        let mut s = ParamStore::new();
        let unit = EermUnit::new(&mut s, "eerm", 4, 2, 0.3, &mut rng);
        jitter_norms(&mut s, &mut rng);
        let x = input(Shape::new(2, 4, 6, 6), &mut rng);
        let name = format!("eerm r=2 ({mode:?})").to_lowercase();
        out.push(check_op(&name, s, x, mode, next(&mut rng), move |ex, x| {
            unit.forward(ex, x)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let unit = DownsampleUnit::new(&mut s, "down", 3, 5, &mut rng)?;
        jitter_norms(&mut s, &mut rng);
        let x = input(Shape::new(2, 3, 6, 6), &mut rng);
        out.push(check_op(
            "downsampling unit",
            s,
            x,
            Training,
            next(&mut rng),
            move |ex, x| unit.forward(ex, x),
        )?);
    }
    {
        let mut s = ParamStore::new();
        let unit = UpsampleUnit::new(&mut s, "up", 4, 3, &mut rng);
        let side = kernel(&mut s, "side", Shape::new(4, 3, 3, 3), &mut rng);
        jitter_norms(&mut s, &mut rng);
        let x = input(Shape::new(2, 4, 3, 3), &mut rng);
        out.push(check_op(
            "upsampling unit + skip",
            s,
            x,
            Training,
            next(&mut rng),
            move |ex, x| {
                let skip = ex.conv_transposed(x, side, None, 2, 1)?;
                unit.forward(ex, x, Some(&skip))
            },
        )?);
    }
    {
        let mut s = ParamStore::new();
        let unit = UpsampleUnit::classifier(&mut s, "cls", 4, 3, &mut rng);
        jitter_norms(&mut s, &mut rng);
        let x = input(Shape::new(1, 4, 3, 3), &mut rng);
        out.push(check_op(
            "classifier unit",
            s,
            x,
            Inference,
            next(&mut rng),
            move |ex, x| unit.forward(ex, x, None),
        )?);
    }
    {
        let net = NetworkGraph::<f64>::build(3, &mut rng)?;
        let mut s = net.params.clone();
        jitter_norms(&mut s, &mut rng);
        let x = input(Shape::new(1, 3, 8, 8), &mut rng);
        out.push(check_op(
            "full network (inference)",
            s,
            x,
            Inference,
            next(&mut rng),
            move |ex, x| net.forward_node(ex, x.clone(), None),
        )?);
    }
    out.push(check_softmax_ce(next(&mut rng))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu's tape gradient checked against doubled outputs must fail.
        let mut rng = Rng::new(4);
        let x = input(Shape::new(1, 2, 3, 3), &mut rng);
        let r = check_op("scaled", ParamStore::new(), x, Mode::Inference, 1, |ex, x| {
            let y = ex.relu(x);
            Ok(Node {
                value: y.value.scale(2.0),
                ..y
            })
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 0.5) - 1.0 / 3.0).abs() < 1e-15);
    }
}
