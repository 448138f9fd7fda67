//! The FDDWNet encoder-decoder: EERM residual units, downsampling and
//! upsampling units, and the 31-layer graph with its layer-7 skip branch.
//!
//! Layer schedule (output size relative to an `H x W` input):
//!
//! | layers | unit                         | channels | size  |
//! |--------|------------------------------|----------|-------|
//! | 1      | downsampling 3 -> 16         | 16       | 1/2   |
//! | 2      | downsampling 16 -> 64        | 64       | 1/4   |
//! | 3-7    | EERM r = 1                   | 64       | 1/4   |
//! | 8      | downsampling 64 -> 128       | 128      | 1/8   |
//! | 9-16   | EERM r = 1, 2, 5, 9 (twice)  | 128      | 1/8   |
//! | 17-24  | EERM r = 2, 5, 9, 17 (twice) | 128      | 1/8   |
//! | 25     | upsampling 128 -> 64, + skip A | 64     | 1/4   |
//! | 26-27  | EERM r = 1                   | 64       | 1/4   |
//! | 28     | upsampling 64 -> 16, + skip B | 16      | 1/2   |
//! | 29-30  | EERM r = 1                   | 16       | 1/2   |
//! | 31     | upsampling 16 -> C (logits)  | C        | 1     |
//!
//! The skip branch taps layer 7: skip A is an extra 64-channel EERM on the
//! tapped features; skip B upsamples skip A 2x to 16 channels with a
//! transposed convolution and applies a 16-channel EERM. Each is added to
//! the receiving upsampling unit's normalized output before its ReLU.

use crate::autograd::{BnParams, BnUpdate, Exec, GradTape, Node};
use crate::conv::{self, ConvSpec, Orientation};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};
use crate::Rng;

/// Kernel size used throughout the shipped graph.
pub const KERNEL: usize = 3;

const ENCODER_MID: [usize; 4] = [1, 2, 5, 9];
const ENCODER_DEEP: [usize; 4] = [2, 5, 9, 17];

fn kaiming<T: Scalar>(shape: Shape, fan_in: f64, gain: f64, rng: &mut Rng) -> Tensor<T> {
    let bound = (gain / fan_in).sqrt();
    Tensor::random(shape, -bound, bound, rng)
}

fn add_bn<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> BnParams {
    BnParams {
        gamma: store.vector(format!("{prefix}.gamma"), ParamRole::Gamma, vec![T::one(); c]),
        beta: store.vector(format!("{prefix}.beta"), ParamRole::Beta, vec![T::zero(); c]),
        running_mean: store.vector(
            format!("{prefix}.running_mean"),
            ParamRole::RunningMean,
            vec![T::zero(); c],
        ),
        running_var: store.vector(
            format!("{prefix}.running_var"),
            ParamRole::RunningVar,
            vec![T::one(); c],
        ),
    }
}

/// Kernels of one FDDWC pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FddwcParams {
    pub horizontal: ParamId,
    pub vertical: ParamId,
    pub pointwise: ParamId,
}

impl FddwcParams {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut Rng) -> Self {
        let n = KERNEL;
        FddwcParams {
            horizontal: store.kernel(
                format!("{prefix}.dw_h"),
                kaiming(Orientation::Horizontal.kernel_shape(c, n), n as f64, 6.0, rng),
            ),
            vertical: store.kernel(
                format!("{prefix}.dw_v"),
                kaiming(Orientation::Vertical.kernel_shape(c, n), n as f64, 6.0, rng),
            ),
            pointwise: store.kernel(
                format!("{prefix}.pw"),
                kaiming(Shape::new(c, c, 1, 1), c as f64, 6.0, rng),
            ),
        }
    }
}

/// Residual unit `y = relu(x + T(x))` where `T` is two FDDWC passes (the
/// first at dilation 1, the second at dilation `r`), each followed by batch
/// norm, with ReLU between the 1D depthwise steps and after the first
/// normalization, and dropout at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct EermUnit {
    pub channels: usize,
    pub dilation: usize,
    pub dropout: f64,
    pub pass1: FddwcParams,
    pub bn1: BnParams,
    pub pass2: FddwcParams,
    pub bn2: BnParams,
}

impl EermUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        dilation: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let pass1 = FddwcParams::new(store, &format!("{prefix}.pass1"), channels, rng);
        let bn1 = add_bn(store, &format!("{prefix}.bn1"), channels);
        let pass2 = FddwcParams::new(store, &format!("{prefix}.pass2"), channels, rng);
        let bn2 = add_bn(store, &format!("{prefix}.bn2"), channels);
        EermUnit {
            channels,
            dilation,
            dropout,
            pass1,
            bn1,
            pass2,
            bn2,
        }
    }

    pub fn fddwc_spec(&self) -> ConvSpec {
        ConvSpec::fddwc(KERNEL, self.dilation, self.channels, self.channels)
    }

    /// Trainable parameters: two FDDWC passes plus gamma/beta of both
    /// normalizations.
    pub fn param_count(&self) -> usize {
        let pass = conv::param_count(&ConvSpec::fddwc(KERNEL, 1, self.channels, self.channels));
        2 * pass + 2 * 2 * self.channels
    }

    pub fn forward<T: Scalar>(&self, ex: &mut Exec<'_, T>, x: &Node<T>) -> Result<Node<T>> {
        if x.shape().channels != self.channels {
            return Err(Error::shape(format!(
                "EERM over {} channels got input {}",
                self.channels,
                x.shape()
            )));
        }
        let t = ex.depthwise_1d(x, Orientation::Horizontal, self.pass1.horizontal, 1)?;
        let t = ex.relu(&t);
        let t = ex.depthwise_1d(&t, Orientation::Vertical, self.pass1.vertical, 1)?;
        let t = ex.pointwise(&t, self.pass1.pointwise)?;
        let t = ex.batch_norm(&t, self.bn1)?;
        let t = ex.relu(&t);
        let t = ex.depthwise_1d(&t, Orientation::Horizontal, self.pass2.horizontal, self.dilation)?;
        let t = ex.relu(&t);
        let t = ex.depthwise_1d(&t, Orientation::Vertical, self.pass2.vertical, self.dilation)?;
        let t = ex.pointwise(&t, self.pass2.pointwise)?;
        let t = ex.batch_norm(&t, self.bn2)?;
        let t = ex.dropout(&t, self.dropout);
        let y = ex.add(x, &t)?;
        Ok(ex.relu(&y))
    }
}

/// `relu(bn(concat(conv3x3/2(x) -> c_out - c_in channels, maxpool(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleUnit {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: ParamId,
    pub bn: BnParams,
}

impl DownsampleUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if out_channels <= in_channels {
            return Err(Error::shape(format!(
                "downsampling must widen: {in_channels} -> {out_channels}"
            )));
        }
        let shape = Shape::new(out_channels - in_channels, in_channels, KERNEL, KERNEL);
        let fan_in = (in_channels * KERNEL * KERNEL) as f64;
        let conv = store.kernel(format!("{prefix}.conv"), kaiming(shape, fan_in, 6.0, rng));
        let bn = add_bn(store, &format!("{prefix}.bn"), out_channels);
        Ok(DownsampleUnit {
            in_channels,
            out_channels,
            conv,
            bn,
        })
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::standard(KERNEL, self.in_channels, self.out_channels - self.in_channels).with_stride(2)
    }

    pub fn param_count(&self) -> usize {
        conv::param_count(&self.conv_spec()) + 2 * self.out_channels
    }

    pub fn forward<T: Scalar>(&self, ex: &mut Exec<'_, T>, x: &Node<T>) -> Result<Node<T>> {
        let s = x.shape();
        if s.channels != self.in_channels {
            return Err(Error::shape(format!(
                "downsampling from {} channels got input {s}",
                self.in_channels
            )));
        }
        if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
            return Err(Error::OddSpatialDim {
                height: s.height,
                width: s.width,
            });
        }
        let c = ex.conv2d(x, self.conv, None, 2, 1, 1)?;
        let p = ex.max_pool(x)?;
        let y = ex.concat(&c, &p)?;
        let y = ex.batch_norm(&y, self.bn)?;
        Ok(ex.relu(&y))
    }
}

/// 3x3 stride-2 transposed convolution; `relu(bn(.) + skip)` for inner
/// units, plain biased logits for the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleUnit {
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BnParams>,
}

impl UpsampleUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let shape = Shape::new(in_channels, out_channels, KERNEL, KERNEL);
        let fan_in = (in_channels * KERNEL * KERNEL) as f64 / 4.0;
        let conv = store.kernel(format!("{prefix}.deconv"), kaiming(shape, fan_in, 6.0, rng));
        let bn = Some(add_bn(store, &format!("{prefix}.bn"), out_channels));
        UpsampleUnit {
            in_channels,
            out_channels,
            conv,
            bias: None,
            bn,
        }
    }

    /// Final unit producing class logits.
    pub fn classifier<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        classes: usize,
        rng: &mut Rng,
    ) -> Self {
        let shape = Shape::new(in_channels, classes, KERNEL, KERNEL);
        let fan_in = (in_channels * KERNEL * KERNEL) as f64 / 4.0;
        let conv = store.kernel(format!("{prefix}.deconv"), kaiming(shape, fan_in, 1.0, rng));
        let bias = Some(store.vector(format!("{prefix}.bias"), ParamRole::Bias, vec![T::zero(); classes]));
        UpsampleUnit {
            in_channels,
            out_channels: classes,
            conv,
            bias,
            bn: None,
        }
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec::transposed(KERNEL, self.in_channels, self.out_channels, 2).with_bias(self.bias.is_some())
    }

    pub fn param_count(&self) -> usize {
        conv::param_count(&self.conv_spec()) + if self.bn.is_some() { 2 * self.out_channels } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, ex: &mut Exec<'_, T>, x: &Node<T>, skip: Option<&Node<T>>) -> Result<Node<T>> {
        if x.shape().channels != self.in_channels {
            return Err(Error::shape(format!(
                "upsampling from {} channels got input {}",
                self.in_channels,
                x.shape()
            )));
        }
        let y = ex.conv_transposed(x, self.conv, self.bias, 2, 1)?;
        let Some(bn) = self.bn else {
            return match skip {
                Some(s) => ex.add(&y, s),
                None => Ok(y),
            };
        };
        let y = ex.batch_norm(&y, bn)?;
        let y = match skip {
            Some(s) => ex.add(&y, s)?,
            None => y,
        };
        Ok(ex.relu(&y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Unit {
    Downsample(DownsampleUnit),
    Eerm(EermUnit),
    Upsample(UpsampleUnit),
}

impl Unit {
    pub fn type_name(&self) -> &'static str {
        match self {
            Unit::Downsample(_) => "Downsampling Unit",
            Unit::Eerm(_) => "EERM",
            Unit::Upsample(_) => "Upsampling Unit",
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Unit::Downsample(u) => u.out_channels,
            Unit::Eerm(u) => u.channels,
            Unit::Upsample(u) => u.out_channels,
        }
    }

    pub fn dilation(&self) -> Option<usize> {
        match self {
            Unit::Eerm(u) => Some(u.dilation),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Unit::Downsample(u) => u.param_count(),
            Unit::Eerm(u) => u.param_count(),
            Unit::Upsample(u) => u.param_count(),
        }
    }
}

/// One row of the layer schedule with its shape contract: the output has
/// `unit.out_channels()` channels at `1 / reduction` of the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub number: usize,
    pub unit: Unit,
    pub reduction: usize,
}

impl LayerNode {
    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(
            input.batch,
            self.unit.out_channels(),
            input.height / self.reduction,
            input.width / self.reduction,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipBranch {
    /// Layer whose output is tapped.
    pub tap: usize,
    pub eerm_a: EermUnit,
    pub projection: UpsampleUnit,
    pub eerm_b: EermUnit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph<T: Scalar = f32> {
    pub params: ParamStore<T>,
    pub layers: Vec<LayerNode>,
    pub skip: SkipBranch,
    pub classes: usize,
}

/// Activations observed during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Output shape of layers 1..=31 in order.
    pub layer_shapes: Vec<Shape>,
    /// Shapes of skip A, the skip projection and skip B.
    pub skip_shapes: Vec<Shape>,
}

/// Outcome of a recorded training pass.
pub struct TrainPass<T: Scalar> {
    pub logits: Node<T>,
    pub tape: GradTape<T>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> NetworkGraph<T> {
    /// Assembles the 31-layer network with freshly initialized weights.
    pub fn build(classes: usize, rng: &mut Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidClassCount(classes));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(31);
        let push = |layers: &mut Vec<LayerNode>, unit: Unit, reduction: usize| {
            let number = layers.len() + 1;
            layers.push(LayerNode {
                number,
                unit,
                reduction,
            });
        };
        let name = |n: usize, kind: &str| format!("layer{n:02}.{kind}");
        let drop = |c: usize| if c == 128 { 0.3 } else { 0.03 };

        let d1 = DownsampleUnit::new(&mut store, &name(1, "down"), 3, 16, rng)?;
        push(&mut layers, Unit::Downsample(d1), 2);
        let d2 = DownsampleUnit::new(&mut store, &name(2, "down"), 16, 64, rng)?;
        push(&mut layers, Unit::Downsample(d2), 4);
        for n in 3..=7 {
            let u = EermUnit::new(&mut store, &name(n, "eerm"), 64, 1, drop(64), rng);
            push(&mut layers, Unit::Eerm(u), 4);
        }
        let d8 = DownsampleUnit::new(&mut store, &name(8, "down"), 64, 128, rng)?;
        push(&mut layers, Unit::Downsample(d8), 8);
        let rates = ENCODER_MID
            .iter()
            .cycle()
            .take(8)
            .chain(ENCODER_DEEP.iter().cycle().take(8));
        for (i, &r) in rates.enumerate() {
            let u = EermUnit::new(&mut store, &name(9 + i, "eerm"), 128, r, drop(128), rng);
            push(&mut layers, Unit::Eerm(u), 8);
        }
        let u25 = UpsampleUnit::new(&mut store, &name(25, "up"), 128, 64, rng);
        push(&mut layers, Unit::Upsample(u25), 4);
        for n in 26..=27 {
            let u = EermUnit::new(&mut store, &name(n, "eerm"), 64, 1, drop(64), rng);
            push(&mut layers, Unit::Eerm(u), 4);
        }
        let u28 = UpsampleUnit::new(&mut store, &name(28, "up"), 64, 16, rng);
        push(&mut layers, Unit::Upsample(u28), 2);
        for n in 29..=30 {
            let u = EermUnit::new(&mut store, &name(n, "eerm"), 16, 1, drop(16), rng);
            push(&mut layers, Unit::Eerm(u), 2);
        }
        let u31 = UpsampleUnit::classifier(&mut store, &name(31, "up"), 16, classes, rng);
        push(&mut layers, Unit::Upsample(u31), 1);

        let skip = SkipBranch {
            tap: 7,
            eerm_a: EermUnit::new(&mut store, "skip.eerm_a", 64, 1, drop(64), rng),
            projection: UpsampleUnit::new(&mut store, "skip.proj", 64, 16, rng),
            eerm_b: EermUnit::new(&mut store, "skip.eerm_b", 16, 1, drop(16), rng),
        };

        let net = NetworkGraph {
            params: store,
            layers,
            skip,
            classes,
        };
        net.check_schedule()?;
        Ok(net)
    }

    /// Verifies the channel chaining of the layer schedule and the skip
    /// branch without running any arithmetic.
    fn check_schedule(&self) -> Result<()> {
        if self.layers.len() != 31 {
            return Err(Error::shape(format!("{} layers, expected 31", self.layers.len())));
        }
        let mut shape = Shape::new(1, 3, 8, 8);
        let probe = Shape::new(1, 3, 8, 8);
        for layer in &self.layers {
            let in_c = match &layer.unit {
                Unit::Downsample(u) => u.in_channels,
                Unit::Eerm(u) => u.channels,
                Unit::Upsample(u) => u.in_channels,
            };
            if in_c != shape.channels {
                return Err(Error::shape(format!(
                    "layer {} expects {in_c} channels, previous layer yields {}",
                    layer.number, shape.channels
                )));
            }
            shape = layer.output_shape(probe);
        }
        let tap = &self.layers[self.skip.tap - 1];
        let s = &self.skip;
        let chain = [
            (tap.unit.out_channels(), s.eerm_a.channels),
            (s.eerm_a.channels, s.projection.in_channels),
            (s.projection.out_channels, s.eerm_b.channels),
            (s.eerm_a.channels, self.layers[24].unit.out_channels()),
            (s.eerm_b.channels, self.layers[27].unit.out_channels()),
        ];
        if chain.iter().any(|(a, b)| a != b) {
            return Err(Error::shape("skip branch channels do not chain"));
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Dilation rates of layers `first..=last`.
    pub fn dilations(&self, first: usize, last: usize) -> Vec<usize> {
        self.layers[first - 1..last]
            .iter()
            .filter_map(|l| l.unit.dilation())
            .collect()
    }

    pub fn check_input(&self, x: Shape) -> Result<()> {
        if x.channels != 3
            || x.batch == 0
            || x.height == 0
            || x.width == 0
            || !x.height.is_multiple_of(8)
            || !x.width.is_multiple_of(8)
        {
            return Err(Error::BadInputShape(x));
        }
        Ok(())
    }

    /// Runs the graph inside `ex`, checking every layer's shape contract.
    pub fn forward_in(&self, ex: &mut Exec<'_, T>, x: Tensor<T>, trace: Option<&mut Trace>) -> Result<Node<T>> {
        self.check_input(x.shape())?;
        let h = ex.input(x);
        self.forward_node(ex, h, trace)
    }

    /// [`Self::forward_in`] on a value already registered with `ex`.
    pub fn forward_node(&self, ex: &mut Exec<'_, T>, x: Node<T>, trace: Option<&mut Trace>) -> Result<Node<T>> {
        let input = x.shape();
        self.check_input(input)?;
        let mut local = Trace::default();
        let trace = trace.unwrap_or(&mut local);
        let contract = |node: &Node<T>, want: Shape, what: &str| -> Result<()> {
            if node.shape() != want {
                return Err(Error::shape(format!(
                    "{what} produced {}, contract says {want}",
                    node.shape()
                )));
            }
            Ok(())
        };

        let mut h = x;
        let mut skip_a = None;
        let mut skip_b = None;
        for layer in &self.layers {
            h = match &layer.unit {
                Unit::Downsample(u) => u.forward(ex, &h)?,
                Unit::Eerm(u) => u.forward(ex, &h)?,
                Unit::Upsample(u) => {
                    let skip = match layer.number {
                        25 => skip_a.as_ref(),
                        28 => skip_b.as_ref(),
                        _ => None,
                    };
                    u.forward(ex, &h, skip)?
                }
            };
            contract(&h, layer.output_shape(input), &format!("layer {}", layer.number))?;
            trace.layer_shapes.push(h.shape());
            if layer.number == self.skip.tap {
                let a = self.skip.eerm_a.forward(ex, &h)?;
                let p = self.skip.projection.forward(ex, &a, None)?;
                let b = self.skip.eerm_b.forward(ex, &p)?;
                trace.skip_shapes.extend([a.shape(), p.shape(), b.shape()]);
                skip_a = Some(a);
                skip_b = Some(b);
            }
        }
        Ok(h)
    }

    /// Inference forward pass producing `B x C x H x W` logits.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ex = Exec::inference(&self.params);
        Ok(self.forward_in(&mut ex, x.clone(), None)?.into_value())
    }

    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace)> {
        let mut ex = Exec::inference(&self.params);
        let mut trace = Trace::default();
        let y = self.forward_in(&mut ex, x.clone(), Some(&mut trace))?;
        Ok((y.into_value(), trace))
    }

    /// Recorded training pass (batch statistics, dropout from `rng`).
    pub fn forward_train(&self, x: &Tensor<T>, rng: &mut Rng) -> Result<TrainPass<T>> {
        let mut ex = Exec::training(&self.params, rng);
        let logits = self.forward_in(&mut ex, x.clone(), None)?;
        let (tape, bn_updates) = ex.finish();
        Ok(TrainPass {
            logits,
            tape: tape.expect("training context records"),
            bn_updates,
        })
    }

    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            params: self.params.cast(),
            layers: self.layers.clone(),
            skip: self.skip.clone(),
            classes: self.classes,
        }
    }

    /// Every EERM in the graph, encoder, decoder and skip branch.
    pub fn eerm_units(&self) -> impl Iterator<Item = &EermUnit> {
        self.layers
            .iter()
            .filter_map(|l| match &l.unit {
                Unit::Eerm(u) => Some(u),
                _ => None,
            })
            .chain([&self.skip.eerm_a, &self.skip.eerm_b])
    }
}

/// Per-pixel argmax over the class axis, `B x H x W` row-major.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<u32> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.batch * plane);
    for b in 0..s.batch {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = T::neg_infinity();
            for c in 0..s.channels {
                let v = logits.data()[(b * s.channels + c) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.push(best as u32);
        }
    }
    out
}
