//! Oracle-equivalence suites for the production kernels and the combined
//! self-test behind the `selftest` command.

use crate::conv::{
    conv2d, conv2d_reference, conv_depthwise_1d, conv_forward, conv_pointwise, conv_transposed, fddwc, ConvKind,
    ConvSpec, ConvWeights, FddwcWeights, Orientation,
};
use crate::error::Result;
use crate::gradcheck::{gradient_suite, GRAD_TOLERANCE};
use crate::tensor::{Shape, Tensor};
use crate::Rng;

pub const ORACLE_INSTANCES: usize = 50;
pub const ORACLE_TOLERANCE: f64 = 1e-5;
pub const LINEARITY_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} instances, max error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_error,
            self.tolerance
        )
    }
}

fn max_abs(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.max_abs_diff(b).unwrap_or(f64::INFINITY)
}

struct Instance {
    rng: Rng,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    n: usize,
    r: usize,
}

impl Instance {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let n = [3, 3, 5][rng.below(0, 3)];
        Instance {
            batch: rng.below(1, 3),
            channels: rng.below(1, 5),
            height: rng.below(4, 13),
            width: rng.below(4, 13),
            n,
            r: [1, 2, 3, 5][rng.below(0, 4)],
            rng,
        }
    }

    fn input(&mut self) -> Tensor<f32> {
        let s = Shape::new(self.batch, self.channels, self.height, self.width);
        Tensor::random(s, -1.0, 1.0, &mut self.rng)
    }

    fn vector(&mut self, len: usize) -> Vec<f32> {
        (0..len).map(|_| self.rng.uniform_in(-1.0, 1.0) as f32).collect()
    }
}

fn suite(
    name: &str,
    tolerance: f64,
    seed: u64,
    mut case: impl FnMut(&mut Instance) -> Result<f64>,
) -> Result<SuiteResult> {
    let mut max_error: f64 = 0.0;
    for i in 0..ORACLE_INSTANCES {
        let mut inst = Instance::new(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        max_error = max_error.max(case(&mut inst)?);
    }
    Ok(SuiteResult {
        name: name.to_string(),
        instances: ORACLE_INSTANCES,
        max_error,
        tolerance,
    })
}

/// Rank-1 depthwise `v u^T` against sequential `1 x n` then `n x 1`.
pub fn separability(seed: u64) -> Result<SuiteResult> {
    suite(
        "separability: rank-1 depthwise = 1xn then nx1",
        ORACLE_TOLERANCE,
        seed,
        |t| {
            let x = t.input();
            let (c, n, r) = (t.channels, t.n, t.r);
            let u = t.vector(c * n);
            let v = t.vector(c * n);
            let k = Tensor::from_fn(Shape::new(c, 1, n, n), |ch, _, ky, kx| v[ch * n + ky] * u[ch * n + kx]);
            let spec = ConvSpec::grouped(n, c, c, c).with_dilation(r);
            let want = conv2d_reference(
                &x,
                &spec,
                &ConvWeights {
                    kernels: vec![k],
                    bias: None,
                },
            )?;
            let h = conv_depthwise_1d(&x, Orientation::Horizontal, n, r, &u)?;
            let got = conv_depthwise_1d(&h, Orientation::Vertical, n, r, &v)?;
            Ok(max_abs(&got, &want))
        },
    )
}

/// Rank-1 FDDWC against depthwise `v u^T` then the same pointwise.
pub fn fddwc_composition(seed: u64) -> Result<SuiteResult> {
    suite("fddwc = rank-1 depthwise then pointwise", ORACLE_TOLERANCE, seed, |t| {
        let x = t.input();
        let (c, n, r) = (t.channels, t.n, t.r);
        let c_hat = t.rng.below(1, 6);
        let u = t.vector(c * n);
        let v = t.vector(c * n);
        let pw = Tensor::random(Shape::new(c_hat, c, 1, 1), -1.0, 1.0, &mut t.rng);
        let k = Tensor::from_fn(Shape::new(c, 1, n, n), |ch, _, ky, kx| v[ch * n + ky] * u[ch * n + kx]);
        let spec = ConvSpec::dilated_depthwise(n, r, c, c_hat);
        let want = conv2d_reference(
            &x,
            &spec,
            &ConvWeights {
                kernels: vec![k, pw.clone()],
                bias: None,
            },
        )?;
        let got = fddwc(
            &x,
            n,
            r,
            &FddwcWeights {
                horizontal: u,
                vertical: v,
                pointwise: pw,
            },
        )?;
        Ok(max_abs(&got, &want))
    })
}

/// Dilated depthwise against the zero-inflated kernel at rate 1.
pub fn dilation_inflation(seed: u64) -> Result<SuiteResult> {
    suite(
        "dilated conv = zero-inflated kernel conv",
        ORACLE_TOLERANCE,
        seed,
        |t| {
            let x = t.input();
            let (c, n, r) = (t.channels, t.n, t.r);
            let k = Tensor::random(Shape::new(c, 1, n, n), -1.0, 1.0, &mut t.rng);
            let nr = (n - 1) * r + 1;
            let inflated = Tensor::from_fn(Shape::new(c, 1, nr, nr), |o, i, ky, kx| {
                if ky % r == 0 && kx % r == 0 {
                    k.at(o, i, ky / r, kx / r)
                } else {
                    0.0
                }
            });
            let got = conv2d(&x, &k, None, 1, r, c)?;
            let spec = ConvSpec::grouped(nr, c, c, c);
            let want = conv2d_reference(
                &x,
                &spec,
                &ConvWeights {
                    kernels: vec![inflated],
                    bias: None,
                },
            )?;
            Ok(max_abs(&got, &want))
        },
    )
}

/// Pointwise against a hand-written per-pixel matrix-vector product.
pub fn pointwise_matmul(seed: u64) -> Result<SuiteResult> {
    suite("pointwise = per-pixel matmul", ORACLE_TOLERANCE, seed, |t| {
        let x = t.input();
        let c = t.channels;
        let c_hat = t.rng.below(1, 7);
        let w = Tensor::random(Shape::new(c_hat, c, 1, 1), -1.0, 1.0, &mut t.rng);
        let got = conv_pointwise(&x, &w)?;
        let s = x.shape();
        let mut want = Tensor::zeros(s.with_channels(c_hat));
        for b in 0..s.batch {
            for y in 0..s.height {
                for xx in 0..s.width {
                    for o in 0..c_hat {
                        let mut acc = 0.0f64;
                        for i in 0..c {
                            acc += w.at(o, i, 0, 0) as f64 * x.at(b, i, y, xx) as f64;
                        }
                        want.data_mut()[((b * c_hat + o) * s.height + y) * s.width + xx] = acc as f32;
                    }
                }
            }
        }
        Ok(max_abs(&got, &want))
    })
}

/// Grouped with `g = 1` against the standard reference.
pub fn grouped_g1_standard(seed: u64) -> Result<SuiteResult> {
    suite("grouped g=1 = standard", ORACLE_TOLERANCE, seed, |t| {
        let x = t.input();
        let c_hat = t.rng.below(1, 5);
        let stride = t.rng.below(1, 3);
        let g1 = ConvSpec::grouped(t.n, t.channels, c_hat, 1)
            .with_dilation(t.r)
            .with_stride(stride);
        let std = ConvSpec::standard(t.n, t.channels, c_hat)
            .with_dilation(t.r)
            .with_stride(stride);
        let w = ConvWeights::<f32>::random(&g1, &mut t.rng);
        let got = conv_forward(&x, &g1, &w)?;
        let want = conv2d_reference(&x, &std, &w)?;
        Ok(max_abs(&got, &want))
    })
}

/// Grouped with `g = c`, `c_hat = c` against depthwise with an identity
/// pointwise.
pub fn grouped_gc_depthwise(seed: u64) -> Result<SuiteResult> {
    suite("grouped g=c = depthwise", ORACLE_TOLERANCE, seed, |t| {
        let x = t.input();
        let c = t.channels;
        let gc = ConvSpec::grouped(t.n, c, c, c).with_dilation(t.r);
        let w = ConvWeights::<f32>::random(&gc, &mut t.rng);
        let eye = Tensor::from_fn(Shape::new(c, c, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        let dw = ConvSpec::dilated_depthwise(t.n, t.r, c, c);
        let dw_w = ConvWeights {
            kernels: vec![w.kernels[0].clone(), eye],
            bias: None,
        };
        let got = conv_forward(&x, &gc, &w)?;
        let want = conv2d_reference(&x, &dw, &dw_w)?;
        Ok(max_abs(&got, &want))
    })
}

fn random_spec(t: &mut Instance, with_transposed: bool) -> ConvSpec {
    let (n, r, c) = (t.n, t.r, t.channels);
    let c_hat = if t.rng.below(0, 2) == 0 { c } else { t.rng.below(1, 5) };
    let kinds = if with_transposed { 8 } else { 7 };
    match t.rng.below(0, kinds) {
        0 => ConvSpec::standard(n, c, c_hat)
            .with_dilation(r)
            .with_stride(t.rng.below(1, 3)),
        1 => {
            let g = [1, c][t.rng.below(0, 2)];
            ConvSpec::grouped(n, c, g * t.rng.below(1, 3), g).with_dilation(r)
        }
        2 => ConvSpec::factorized1d(n, c).with_dilation(r),
        3 => ConvSpec::depthwise(n, c, c_hat),
        4 => ConvSpec::dilated_depthwise(n, r, c, c_hat),
        5 => ConvSpec::fddwc(n, r, c, c_hat),
        6 => ConvSpec::pointwise(c, c_hat),
        _ => ConvSpec::transposed(3, c, c_hat, 2),
    }
}

/// Production dispatch against the reference for every non-transposed kind,
/// with and without bias.
pub fn production_matches_reference(seed: u64) -> Result<SuiteResult> {
    suite(
        "production kernels = reference (all kinds)",
        ORACLE_TOLERANCE,
        seed,
        |t| {
            let x = t.input();
            let bias = t.rng.below(0, 2) == 1;
            let spec = random_spec(t, false).with_bias(bias);
            let w = ConvWeights::<f32>::random(&spec, &mut t.rng);
            Ok(max_abs(
                &conv_forward(&x, &spec, &w)?,
                &conv2d_reference(&x, &spec, &w)?,
            ))
        },
    )
}

/// `conv(a x + b y) = a conv(x) + b conv(y)` for every kind without bias,
/// as error relative to the largest output magnitude.
pub fn linearity(seed: u64) -> Result<SuiteResult> {
    suite("linearity (all kinds, no bias)", LINEARITY_TOLERANCE, seed, |t| {
        let x = t.input();
        let y = t.input();
        let (a, b) = (t.rng.uniform_in(-2.0, 2.0) as f32, t.rng.uniform_in(-2.0, 2.0) as f32);
        let spec = random_spec(t, true);
        let w = ConvWeights::<f32>::random(&spec, &mut t.rng);
        let run = |v: &Tensor<f32>| {
            if spec.kind == ConvKind::Transposed {
                conv_transposed(v, &spec, &w)
            } else {
                conv_forward(v, &spec, &w)
            }
        };
        let mix = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        )?;
        let lhs = run(&mix)?;
        let (cx, cy) = (run(&x)?, run(&y)?);
        let rhs = Tensor::from_vec(
            cx.shape(),
            cx.data().iter().zip(cy.data()).map(|(p, q)| a * p + b * q).collect(),
        )?;
        let scale = rhs.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)).max(1.0);
        Ok(max_abs(&lhs, &rhs) / scale)
    })
}

/// The four headline oracle suites.
pub fn core_oracles(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        separability(seed)?,
        dilation_inflation(seed + 1)?,
        pointwise_matmul(seed + 2)?,
        grouped_g1_standard(seed + 3)?,
    ])
}

/// Every oracle suite followed by every gradient check.
pub fn run_selftest(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = core_oracles(seed)?;
    out.push(grouped_gc_depthwise(seed + 4)?);
    out.push(fddwc_composition(seed + 5)?);
    out.push(production_matches_reference(seed + 6)?);
    out.push(linearity(seed + 7)?);
    for g in gradient_suite(seed + 8)? {
        out.push(SuiteResult {
            name: format!("gradient: {}", g.name),
            instances: g.coordinates,
            max_error: g.max_rel_error,
            tolerance: GRAD_TOLERANCE,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extra_oracles_pass() {
        for r in [
            grouped_gc_depthwise(11).unwrap(),
            fddwc_composition(12).unwrap(),
            production_matches_reference(13).unwrap(),
            linearity(14).unwrap(),
        ] {
            assert!(r.passed(), "{}", r.line());
        }
    }

    #[test]
    fn result_lines() {
        let r = SuiteResult {
            name: "x".into(),
            instances: 3,
            max_error: 2.0,
            tolerance: 1.0,
        };
        assert!(r.line().starts_with("FAIL x: 3 instances"));
    }
}
