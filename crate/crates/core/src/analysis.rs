//! Static cost analysis (parameters, multiply-accumulates, receptive
//! fields) and the mIoU metric.

use std::fmt::Write as _;

use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::graph::{NetworkGraph, Unit, KERNEL};
use crate::tensor::{Scalar, Shape};

/// Which convolution the EERM units are costed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EermCosting {
    /// The shipped factorized dilated depthwise-separable passes.
    Fddwc,
    /// What-if: every FDDWC pass replaced by a standard `n x n` convolution.
    Standard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// `"1"`..`"31"` for the numbered layers, `skip-a`, `skip-proj`,
    /// `skip-b` for the skip branch.
    pub layer: String,
    pub kind: &'static str,
    pub dilation: Option<usize>,
    pub out_shape: Shape,
    /// Trainable parameters.
    pub params: usize,
    /// Non-trainable running statistics.
    pub buffers: usize,
    pub macs: u64,
    /// Dilated kernel extent of the unit's widest convolution.
    pub receptive_field: usize,
    pub encoder: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelReport {
    pub rows: Vec<ReportRow>,
    pub total_params: usize,
    pub total_buffers: usize,
    pub total_macs: u64,
    pub input_hw: (usize, usize),
    pub classes: usize,
}

/// Multiply-accumulates of one convolution producing `out_hw` (for
/// transposed kinds, `out_hw` is the output size and each input pixel
/// scatters the full kernel).
pub fn conv_macs(spec: &ConvSpec, out_hw: (usize, usize)) -> u64 {
    let out_px = (out_hw.0 * out_hw.1) as u64;
    match spec.kind {
        conv::ConvKind::Transposed => {
            let in_px = out_px / (spec.stride * spec.stride) as u64;
            conv::param_count(&spec.with_bias(false)) as u64 * in_px
        }
        _ => conv::param_count(&spec.with_bias(false)) as u64 * out_px,
    }
}

/// Cost of an FDDWC relative to a standard convolution with the same
/// kernel size and output channels, `(1/n) (2/c_hat + 1/n)`.
pub fn cost_factor(n: usize, c_hat: usize) -> f64 {
    let n = n as f64;
    (1.0 / n) * (2.0 / c_hat as f64 + 1.0 / n)
}

fn unit_cost(unit: &Unit, out: Shape, costing: EermCosting) -> (usize, usize, u64, usize) {
    let hw = (out.height, out.width);
    match unit {
        Unit::Downsample(u) => {
            let spec = u.conv_spec();
            (u.param_count(), 2 * u.out_channels, conv_macs(&spec, hw), spec.extent())
        }
        Unit::Upsample(u) => {
            let spec = u.conv_spec();
            let buffers = if u.bn.is_some() { 2 * u.out_channels } else { 0 };
            (u.param_count(), buffers, conv_macs(&spec, hw), spec.extent())
        }
        Unit::Eerm(u) => {
            let c = u.channels;
            let passes = [1, u.dilation].map(|r| match costing {
                EermCosting::Fddwc => ConvSpec::fddwc(KERNEL, r, c, c),
                EermCosting::Standard => ConvSpec::standard(KERNEL, c, c).with_dilation(r),
            });
            let params: usize = passes.iter().map(conv::param_count).sum::<usize>() + 4 * c;
            let macs = passes.iter().map(|s| conv_macs(s, hw)).sum();
            (params, 4 * c, macs, passes[1].extent())
        }
    }
}

/// Per-layer report for an `input_hw` (height, width) input.
pub fn analyze<T: Scalar>(net: &NetworkGraph<T>, input_hw: (usize, usize)) -> Result<ModelReport> {
    analyze_with(net, input_hw, EermCosting::Fddwc)
}

pub fn analyze_with<T: Scalar>(
    net: &NetworkGraph<T>,
    input_hw: (usize, usize),
    costing: EermCosting,
) -> Result<ModelReport> {
    let input = Shape::new(1, 3, input_hw.0, input_hw.1);
    net.check_input(input)?;
    let mut rows = Vec::new();
    let mut row = |layer: String, unit: &Unit, out: Shape, encoder: bool| {
        let (params, buffers, macs, rf) = unit_cost(unit, out, costing);
        rows.push(ReportRow {
            layer,
            kind: unit.type_name(),
            dilation: unit.dilation(),
            out_shape: out,
            params,
            buffers,
            macs,
            receptive_field: rf,
            encoder,
        });
    };
    for layer in &net.layers {
        let out = layer.output_shape(input);
        row(layer.number.to_string(), &layer.unit, out, layer.number <= 24);
        if layer.number == net.skip.tap {
            let s = &net.skip;
            let proj_out = out
                .with_channels(s.projection.out_channels)
                .with_spatial(out.height * 2, out.width * 2);
            row(
                "skip-a".into(),
                &Unit::Eerm(s.eerm_a.clone()),
                out.with_channels(s.eerm_a.channels),
                false,
            );
            row(
                "skip-proj".into(),
                &Unit::Upsample(s.projection.clone()),
                proj_out,
                false,
            );
            row("skip-b".into(), &Unit::Eerm(s.eerm_b.clone()), proj_out, false);
        }
    }
    Ok(ModelReport {
        total_params: rows.iter().map(|r| r.params).sum(),
        total_buffers: rows.iter().map(|r| r.buffers).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        rows,
        input_hw,
        classes: net.classes,
    })
}

impl ModelReport {
    pub fn encoder_params(&self) -> usize {
        self.rows.iter().filter(|r| r.encoder).map(|r| r.params).sum()
    }

    /// Parameters of the encoder's EERM layers only.
    pub fn encoder_eerm_params(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.encoder && r.kind == "EERM")
            .map(|r| r.params)
            .sum()
    }

    pub fn max_encoder_receptive_field(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.encoder && r.kind == "EERM")
            .map(|r| r.receptive_field)
            .max()
            .unwrap_or(0)
    }

    fn cells(row: &ReportRow) -> [String; 6] {
        [
            row.layer.clone(),
            row.kind.to_string(),
            row.dilation.map_or_else(|| "-".into(), |r| r.to_string()),
            row.out_shape.to_string(),
            row.params.to_string(),
            row.macs.to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,type,r,out_shape,params,macs\n");
        for row in &self.rows {
            out.push_str(&Self::cells(row).join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["layer", "type", "r", "out_shape", "params", "macs"].map(String::from);
        let body: Vec<[String; 6]> = self.rows.iter().map(Self::cells).collect();
        let mut widths = header.clone().map(|h| h.len());
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String; 6]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i >= 4 { format!("{c:>w$}") } else { format!("{c:<w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        for cells in &body {
            line(&mut out, cells);
        }
        let _ = writeln!(
            out,
            "input {}x{}, {} classes, {} layers + skip branch",
            self.input_hw.0,
            self.input_hw.1,
            self.classes,
            self.rows.iter().filter(|r| r.layer.parse::<usize>().is_ok()).count()
        );
        let _ = writeln!(
            out,
            "total MACs: {} ({:.2} G)",
            self.total_macs,
            self.total_macs as f64 / 1e9
        );
        let _ = writeln!(out, "non-trainable buffers: {}", self.total_buffers);
        let _ = writeln!(
            out,
            "total trainable params: {} ({:.2}M)",
            self.total_params,
            self.total_params as f64 / 1e6
        );
        out
    }
}

/// `C x C` pixel counts; entry `(i, j)` counts ground truth `i` predicted
/// as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Accumulates a label map; pixels whose ground truth is `ignore` are
    /// skipped.
    pub fn accumulate(&mut self, truth: &[u32], pred: &[u32], ignore: u32) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape("ground truth and prediction differ in size"));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == ignore {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p) as u32,
                    classes: self.classes,
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|i| self.get(i, i)).sum::<u64>() as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    /// `None` where the class appears in neither ground truth nor
    /// prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MiouResult> {
    if cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let c = cm.classes;
    let row = |i: usize| (0..c).map(|j| cm.get(i, j)).sum::<u64>();
    let col = |j: usize| (0..c).map(|i| cm.get(i, j)).sum::<u64>();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|i| {
            let inter = cm.get(i, i);
            let union = row(i) + col(i) - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = (0..c)
        .filter(|&i| row(i) > 0)
        .map(|i| per_class[i].unwrap_or(0.0))
        .collect();
    Ok(MiouResult {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    #[test]
    fn cost_factor_values() {
        assert!((1.0 / cost_factor(3, 128) - 8.597).abs() < 1e-3);
        assert!((cost_factor(3, 1) - 7.0 / 9.0).abs() < 1e-15);
        assert!((cost_factor(1, 1 << 30) - 1.0).abs() < 1e-8);
        let ratio = conv_macs(&ConvSpec::standard(3, 128, 128), (64, 64)) as f64
            / conv_macs(&ConvSpec::fddwc(3, 1, 128, 128), (64, 64)) as f64;
        assert!((ratio - 1.0 / cost_factor(3, 128)).abs() < 1e-12);
    }

    #[test]
    fn miou_examples() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2], 255).unwrap();
        let r = miou(&cm).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.per_class.iter().all(|v| *v == Some(1.0)));

        // Two 4-pixel regions overlapping on 2 pixels: IoU = 2 / 6.
        let truth = [1, 1, 1, 1, 0, 0, 0, 0];
        let pred = [0, 0, 1, 1, 1, 1, 0, 0];
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&truth, &pred, 255).unwrap();
        assert!((miou(&cm).unwrap().per_class[1].unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1, 255], &[0, 0, 0, 0, 1], 255).unwrap();
        assert_eq!(cm.total(), 4);
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.mean, 0.25);

        assert!(matches!(miou(&ConfusionMatrix::new(4)), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn miou_permutation_equivariant() {
        let mut rng = Rng::new(8);
        let truth: Vec<u32> = (0..500).map(|_| rng.below(0, 4) as u32).collect();
        let pred: Vec<u32> = (0..500).map(|_| rng.below(0, 4) as u32).collect();
        let perm = [2u32, 0, 3, 1];
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&truth, &pred, 255).unwrap();
        let mut b = ConfusionMatrix::new(4);
        let relabel = |v: &[u32]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
        b.accumulate(&relabel(&truth), &relabel(&pred), 255).unwrap();
        let (ra, rb) = (miou(&a).unwrap(), miou(&b).unwrap());
        assert!((ra.mean - rb.mean).abs() < 1e-12);
        for (c, &p) in perm.iter().enumerate() {
            assert_eq!(ra.per_class[c], rb.per_class[p as usize]);
        }
    }

    #[test]
    fn report_totals_and_scaling() {
        let net = NetworkGraph::<f32>::build(19, &mut Rng::new(0)).unwrap();
        let small = analyze(&net, (64, 32)).unwrap();
        let big = analyze(&net, (128, 64)).unwrap();
        assert_eq!(small.total_params, big.total_params);
        assert_eq!(big.total_macs, 4 * small.total_macs);
        assert_eq!(small.total_params, small.rows.iter().map(|r| r.params).sum::<usize>());
        assert_eq!(small.total_params, net.params.trainable_count());
        assert_eq!(small.total_params + small.total_buffers, net.params.total_count());
        assert_eq!(small.rows.len(), 31 + 3);
        assert_eq!(small.max_encoder_receptive_field(), 35);
        let csv = small.to_csv();
        assert!(csv.starts_with("layer,type,r,out_shape,params,macs\n1,Downsampling Unit,-,1x16x32x16,"));
        assert_eq!(csv.lines().count(), 35);
        assert!(small
            .to_text()
            .lines()
            .last()
            .unwrap()
            .starts_with("total trainable params:"));
        assert!(analyze(&net, (60, 32)).is_err());
    }
}
