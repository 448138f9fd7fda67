//! SGD with momentum, weight decay and the poly learning-rate policy, a
//! synthetic segmentation task and the toy training loop.

use std::fmt::Write as _;

use crate::analysis::ConfusionMatrix;
use crate::autograd::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::graph::{argmax_labels, NetworkGraph};
use crate::params::ParamStore;
use crate::tensor::{concat_batch, Scalar, Shape, Tensor};
use crate::Rng;

/// Label excluded from the loss and from metrics.
pub const IGNORE_LABEL: u32 = 255;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 1e-3,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

/// Optimizer state. Velocities are kept in `f64` regardless of the
/// parameter type.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    pub iter: usize,
    pub max_iter: usize,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new<T: Scalar>(config: SgdConfig, max_iter: usize, store: &ParamStore<T>) -> Self {
        SgdState {
            config,
            iter: 0,
            max_iter,
            velocity: store.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    /// `base_lr * (1 - iter / max_iter)^power`, zero from `max_iter` on.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.max_iter == 0 || iter >= self.max_iter {
            return 0.0;
        }
        let frac = 1.0 - iter as f64 / self.max_iter as f64;
        self.config.base_lr * frac.powf(self.config.power)
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.iter)
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocity[index]
    }

    /// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`
    /// for every trainable parameter, then advances the iteration counter.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::shape(format!(
                "{} gradients and {} velocities for {} parameters",
                grads.len(),
                self.velocity.len(),
                store.len()
            )));
        }
        for ((p, g), v) in store.iter().zip(grads).zip(&self.velocity) {
            if g.shape() != p.1.value.shape() || v.len() != p.1.len() {
                return Err(Error::shape(format!("gradient for `{}`", p.1.name)));
            }
        }
        let lr = self.lr();
        let SgdConfig {
            momentum, weight_decay, ..
        } = self.config;
        for ((param, grad), vel) in store.iter_mut().zip(grads).zip(&mut self.velocity) {
            if !param.role.trainable() {
                continue;
            }
            for ((w, g), v) in param.value.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                let wf = w.as_f64();
                *v = momentum * *v + g.as_f64() + weight_decay * wf;
                *w = T::lit(wf - lr * *v);
            }
        }
        self.iter += 1;
        Ok(())
    }
}

/// Images of axis-aligned coloured rectangles on textured noise, with
/// per-pixel labels (0 = background, `k` = rectangle colour `k`).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    /// Normalized `1 x 3 x H x W` inputs.
    pub images: Vec<Tensor<f32>>,
    /// `H x W` labels per image.
    pub labels: Vec<Vec<u32>>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

fn class_colour(k: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 3] = [[0.9, 0.15, 0.15], [0.15, 0.85, 0.2], [0.15, 0.25, 0.9]];
    if k >= 1 && k <= BASE.len() {
        return BASE[k - 1];
    }
    let hue = (k as f64 * 0.618_033_988_75).fract() * std::f64::consts::TAU;
    [
        0.5 + 0.4 * hue.cos(),
        0.5 + 0.4 * (hue + 2.1).cos(),
        0.5 + 0.4 * (hue + 4.2).cos(),
    ]
}

impl ToyDataset {
    pub fn generate(count: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidClassCount(classes));
        }
        if !height.is_multiple_of(8) || !width.is_multiple_of(8) || height == 0 || width == 0 {
            return Err(Error::BadInputShape(Shape::new(1, 3, height, width)));
        }
        let mut rng = Rng::new(seed);
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let plane = height * width;
        for _ in 0..count {
            let mut rgb = vec![0.0f64; 3 * plane];
            let mut label = vec![0u32; plane];
            let (fy, fx) = (rng.uniform_in(0.05, 0.3), rng.uniform_in(0.05, 0.3));
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            for y in 0..height {
                for x in 0..width {
                    let wave = 0.12 * ((fy * y as f64 + fx * x as f64 + phase).sin());
                    let base = 0.5 + wave + 0.1 * rng.normal();
                    for c in 0..3 {
                        rgb[c * plane + y * width + x] = base + 0.04 * rng.normal();
                    }
                }
            }
            let rects = rng.below(2, 5);
            for _ in 0..rects {
                let k = rng.below(1, classes);
                let rh = rng.below(height / 6, height / 2 + 1).max(2);
                let rw = rng.below(width / 6, width / 2 + 1).max(2);
                let y0 = rng.below(0, height - rh + 1);
                let x0 = rng.below(0, width - rw + 1);
                let colour = class_colour(k);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        label[y * width + x] = k as u32;
                        for (c, col) in colour.iter().enumerate() {
                            rgb[c * plane + y * width + x] = col + 0.08 * rng.normal();
                        }
                    }
                }
            }
            let data = rgb.iter().map(|v| ((v.clamp(0.0, 1.0) - 0.5) / 0.5) as f32).collect();
            images.push(Tensor::from_vec(Shape::new(1, 3, height, width), data)?);
            labels.push(label);
        }
        Ok(ToyDataset {
            images,
            labels,
            classes,
            height,
            width,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the selected samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u32>)> {
        let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.images[i]).collect();
        let labels = indices.iter().flat_map(|&i| self.labels[i].iter().copied()).collect();
        Ok((concat_batch(&images)?, labels))
    }
}

/// Base learning rate of the toy task; the other optimizer settings keep
/// their defaults.
pub const TOY_BASE_LR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    /// Training-set pixel accuracy is measured every `eval_every`
    /// iterations and after the last one.
    pub eval_every: usize,
    pub sgd: SgdConfig,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            iters: 600,
            batch: 4,
            seed: 0,
            eval_every: 50,
            sgd: SgdConfig {
                base_lr: TOY_BASE_LR,
                ..SgdConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f32,
    pub lr: f64,
    pub pixel_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,lr,pixel_acc\n");
        for e in &self.entries {
            let acc = e.pixel_acc.map_or_else(String::new, |a| format!("{a:.6}"));
            let _ = writeln!(out, "{},{:.6},{:.6e},{}", e.iter, e.loss, e.lr, acc);
        }
        out
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let slice = self.entries.get(range)?;
        (!slice.is_empty()).then(|| slice.iter().map(|e| e.loss as f64).sum::<f64>() / slice.len() as f64)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.entries.iter().rev().find_map(|e| e.pixel_acc)
    }
}

/// Inference-mode pixel accuracy over the whole dataset.
pub fn pixel_accuracy(net: &NetworkGraph<f32>, data: &ToyDataset) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(net.classes);
    for (image, label) in data.images.iter().zip(&data.labels) {
        let logits = net.forward(image)?;
        cm.accumulate(label, &argmax_labels(&logits), IGNORE_LABEL)?;
    }
    cm.pixel_accuracy().ok_or(Error::EmptyMatrix)
}

/// Trains `net` on `data`; deterministic for a given seed.
pub fn train_toy(net: &mut NetworkGraph<f32>, data: &ToyDataset, cfg: &ToyTrainConfig) -> Result<TrainLog> {
    train_toy_with(net, data, cfg, |_| {})
}

/// [`train_toy`] with a callback invoked after each logged iteration.
pub fn train_toy_with(
    net: &mut NetworkGraph<f32>,
    data: &ToyDataset,
    cfg: &ToyTrainConfig,
    mut on_entry: impl FnMut(&LogEntry),
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if cfg.iters == 0 {
        return Ok(log);
    }
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::shape("training needs a non-empty dataset and batch"));
    }
    if data.classes > net.classes {
        return Err(Error::LabelOutOfRange {
            label: data.classes as u32 - 1,
            classes: net.classes,
        });
    }
    let mut rng = Rng::new(cfg.seed);
    let mut sgd = SgdState::new(cfg.sgd, cfg.iters, &net.params);
    let mut order: Vec<usize> = Vec::new();
    for iter in 0..cfg.iters {
        let mut indices = Vec::with_capacity(cfg.batch);
        while indices.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = rng.below(0, i + 1);
                    order.swap(i, j);
                }
            }
            indices.push(order.pop().expect("refilled"));
        }
        let (x, labels) = data.batch(&indices)?;
        let pass = net.forward_train(&x, &mut rng)?;
        let (loss, grad) = softmax_cross_entropy(&pass.logits.value, &labels, IGNORE_LABEL)?;
        let grads = pass.tape.backward(&net.params, &pass.logits, &grad)?;
        let lr = sgd.lr();
        sgd.step(&mut net.params, &grads.params)?;
        for update in &pass.bn_updates {
            update.apply(&mut net.params);
        }
        let last = iter + 1 == cfg.iters;
        let pixel_acc = if last || (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0) {
            Some(pixel_accuracy(net, data)?)
        } else {
            None
        };
        let entry = LogEntry {
            iter,
            loss,
            lr,
            pixel_acc,
        };
        on_entry(&entry);
        log.entries.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.vector("w", ParamRole::Kernel, vec![0.5, -1.25, 3.0, 1e-3]);
        s.vector("rm", ParamRole::RunningMean, vec![0.7; 2]);
        s
    }

    #[test]
    fn poly_schedule() {
        let s = SgdState::new(SgdConfig::default(), 100, &store());
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(100), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = s.lr_at(i);
            assert!(lr <= prev && lr >= 0.0);
            assert_eq!(lr, 1e-3 * (1.0 - i as f64 / 100.0).powf(0.9));
            prev = lr;
        }
    }

    #[test]
    fn zero_grad_without_decay_keeps_params_and_decays_velocity() {
        let mut st = store();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut sgd = SgdState::new(cfg, 10, &st);
        sgd.velocity[0] = vec![1.0, 2.0, 3.0, 4.0];
        let zeros: Vec<Tensor<f32>> = st.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let before = sgd.velocity(0).to_vec();
        sgd.step(&mut st, &zeros).unwrap();
        for (a, b) in sgd.velocity(0).iter().zip(&before) {
            assert_eq!(*a, 0.9 * b);
        }
        let mut st2 = store();
        let mut sgd2 = SgdState::new(cfg, 10, &st2);
        sgd2.step(&mut st2, &zeros).unwrap();
        assert_eq!(st2, store());
    }

    #[test]
    fn weight_decay_scales_params() {
        let mut st = store();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.1,
            base_lr: 0.5,
            ..SgdConfig::default()
        };
        let mut sgd = SgdState::new(cfg, 10, &st);
        let zeros: Vec<Tensor<f32>> = st.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let before = st.clone();
        sgd.step(&mut st, &zeros).unwrap();
        let k = 1.0 - 0.5 * 0.1;
        for (a, b) in st
            .values(crate::params::ParamId(0))
            .iter()
            .zip(before.values(crate::params::ParamId(0)))
        {
            assert_eq!(*a, (*b as f64 * k) as f32);
        }
        // Running statistics are not optimized.
        assert_eq!(st.values(crate::params::ParamId(1)), &[0.7, 0.7]);
        assert_eq!(sgd.iter, 1);
    }

    #[test]
    fn step_rejects_misaligned_grads() {
        let mut st = store();
        let mut sgd = SgdState::new(SgdConfig::default(), 10, &st);
        assert!(sgd.step(&mut st, &[]).is_err());
    }

    #[test]
    fn toy_dataset_is_reproducible() {
        let a = ToyDataset::generate(3, 32, 16, 4, 9).unwrap();
        let b = ToyDataset::generate(3, 32, 16, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = ToyDataset::generate(3, 32, 16, 4, 10).unwrap();
        assert_ne!(a.images, c.images);
        assert!(a.labels.iter().flatten().all(|&l| l < 4));
        assert!(a.labels.iter().flatten().any(|&l| l > 0));
        assert!(ToyDataset::generate(1, 30, 16, 4, 0).is_err());
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let mut net = NetworkGraph::<f32>::build(4, &mut Rng::new(3)).unwrap();
        let before = net.clone();
        let data = ToyDataset::generate(2, 16, 16, 4, 1).unwrap();
        let cfg = ToyTrainConfig {
            iters: 0,
            ..ToyTrainConfig::default()
        };
        let log = train_toy(&mut net, &data, &cfg).unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn short_runs_repeat_exactly() {
        let data = ToyDataset::generate(4, 16, 16, 4, 5).unwrap();
        let cfg = ToyTrainConfig {
            iters: 3,
            batch: 2,
            seed: 17,
            eval_every: 2,
            sgd: SgdConfig::default(),
        };
        let run = || {
            let mut net = NetworkGraph::<f32>::build(4, &mut Rng::new(1)).unwrap();
            let log = train_toy(&mut net, &data, &cfg).unwrap();
            (log, net)
        };
        let (la, na) = run();
        let (lb, nb) = run();
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(la, lb);
        assert_eq!(na, nb);
        assert_eq!(la.entries.len(), 3);
        assert!(la.entries[1].pixel_acc.is_some() && la.entries[0].pixel_acc.is_none());
        assert!(la.final_accuracy().is_some());
    }
}
