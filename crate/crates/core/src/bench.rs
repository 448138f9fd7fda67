//! Wall-clock benchmark of single convolution kernels. Timings are
//! reported, never asserted.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::analysis::conv_macs;
use crate::conv::{conv_forward, ConvSpec, ConvWeights};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKernel {
    Fddwc,
    Standard,
    /// Depthwise-separable: `n x n` depthwise then pointwise.
    Dw,
}

impl BenchKernel {
    pub fn spec(self, n: usize, channels: usize) -> ConvSpec {
        match self {
            BenchKernel::Fddwc => ConvSpec::fddwc(n, 1, channels, channels),
            BenchKernel::Standard => ConvSpec::standard(n, channels, channels),
            BenchKernel::Dw => ConvSpec::depthwise(n, channels, channels),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::Fddwc => "fddwc",
            BenchKernel::Standard => "standard",
            BenchKernel::Dw => "dw",
        }
    }
}

impl FromStr for BenchKernel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fddwc" => Ok(BenchKernel::Fddwc),
            "standard" => Ok(BenchKernel::Standard),
            "dw" => Ok(BenchKernel::Dw),
            _ => Err(format!("unknown kernel `{s}` (expected fddwc, standard or dw)")),
        }
    }
}

impl fmt::Display for BenchKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub kernel: BenchKernel,
    pub channels: usize,
    pub size: (usize, usize),
    pub macs: u64,
    /// Seconds per timed repeat.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
    pub macs_per_sec: f64,
    /// Standard-convolution MACs over FDDWC MACs at this width.
    pub mac_ratio: f64,
}

impl BenchReport {
    /// Lines that do not depend on timing.
    pub fn static_lines(&self) -> Vec<String> {
        vec![
            format!(
                "kernel: {} channels: {} size: {}x{}",
                self.kernel, self.channels, self.size.0, self.size.1
            ),
            format!("macs: {}", self.macs),
            format!("mac ratio standard/fddwc: {:.4}", self.mac_ratio),
        ]
    }

    pub fn timing_lines(&self) -> Vec<String> {
        vec![
            format!("repeats: {}", self.samples.len()),
            format!("mean: {:.6} s stddev: {:.6} s", self.mean, self.stddev),
            format!("throughput: {:.3e} MAC/s", self.macs_per_sec),
        ]
    }
}

/// MAC ratio of a standard `n x n` convolution to an FDDWC, both `c -> c`.
pub fn mac_ratio(n: usize, channels: usize) -> f64 {
    let hw = (8, 8);
    conv_macs(&ConvSpec::standard(n, channels, channels), hw) as f64
        / conv_macs(&ConvSpec::fddwc(n, 1, channels, channels), hw) as f64
}

/// One warm-up call, then `repeats >= 3` timed calls on a random input.
pub fn bench_kernels(
    kernel: BenchKernel,
    channels: usize,
    size: (usize, usize),
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::UnsupportedSpec(format!(
            "bench needs at least 3 repeats, got {repeats}"
        )));
    }
    if channels == 0 || size.0 == 0 || size.1 == 0 {
        return Err(Error::UnsupportedSpec("bench needs non-empty input".into()));
    }
    let spec = kernel.spec(3, channels);
    let mut rng = Rng::new(0);
    let w = ConvWeights::<f32>::random(&spec, &mut rng);
    let x = Tensor::<f32>::random(Shape::new(1, channels, size.0, size.1), -1.0, 1.0, &mut rng);
    std::hint::black_box(conv_forward(&x, &spec, &w)?);
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(conv_forward(std::hint::black_box(&x), &spec, &w)?);
        samples.push(t.elapsed().as_secs_f64());
    }
    let mean = samples.iter().sum::<f64>() / repeats as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    let macs = conv_macs(&spec, size);
    Ok(BenchReport {
        kernel,
        channels,
        size,
        macs,
        mean,
        stddev: var.sqrt(),
        macs_per_sec: if mean > 0.0 { macs as f64 / mean } else { f64::INFINITY },
        samples,
        mac_ratio: mac_ratio(3, channels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_at_128_and_64() {
        assert!((mac_ratio(3, 128) - 147_456.0 / 17_152.0).abs() < 1e-12);
        assert!((mac_ratio(3, 64) - 1.0 / ((1.0 / 3.0) * (2.0 / 64.0 + 1.0 / 3.0))).abs() < 1e-9);
    }

    #[test]
    fn minimal_run_has_three_samples() {
        for k in [BenchKernel::Fddwc, BenchKernel::Standard, BenchKernel::Dw] {
            let r = bench_kernels(k, 4, (8, 8), 3).unwrap();
            assert_eq!(r.samples.len(), 3);
            assert!(r.samples.iter().all(|s| *s >= 0.0));
        }
        assert!(bench_kernels(BenchKernel::Dw, 4, (8, 8), 2).is_err());
    }

    #[test]
    fn kernel_names_parse() {
        for k in [BenchKernel::Fddwc, BenchKernel::Standard, BenchKernel::Dw] {
            assert_eq!(k.name().parse::<BenchKernel>().unwrap(), k);
        }
        assert!("winograd".parse::<BenchKernel>().is_err());
    }
}
