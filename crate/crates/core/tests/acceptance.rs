//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use fddwnet::analysis::{conv_macs, cost_factor};
use fddwnet::archive::{load_weights, save_weights};
use fddwnet::conv::{receptive_field, ConvSpec};
use fddwnet::gradcheck::{gradient_suite, GRAD_TOLERANCE, MIN_COORDS};
use fddwnet::parallel::with_threads;
use fddwnet::selftest::{core_oracles, ORACLE_INSTANCES, ORACLE_TOLERANCE};
use fddwnet::train::{train_toy, ToyDataset, ToyTrainConfig, TrainLog};
use fddwnet::{Error, NetworkGraph, Rng, Shape, Tensor};

const TOY_ACCURACY: f64 = 0.95;
const TOY_ITERS: usize = 600;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Check = fn(&mut Shared) -> fddwnet::Result<Outcome>;

/// State reused across criteria so the toy run is only paid for once.
#[derive(Default)]
struct Shared {
    toy: Option<(TrainLog, Vec<u8>)>,
}

fn toy_run(threads: Option<usize>) -> fddwnet::Result<(TrainLog, Vec<u8>)> {
    with_threads(threads, || {
        let data = ToyDataset::generate(8, 128, 64, 4, 0)?;
        let mut net = NetworkGraph::<f32>::build(4, &mut Rng::new(0))?;
        let cfg = ToyTrainConfig {
            iters: TOY_ITERS,
            ..ToyTrainConfig::default()
        };
        let log = train_toy(&mut net, &data, &cfg)?;
        Ok((log, save_weights(&net)?))
    })
}

fn parameter_count(_: &mut Shared) -> fddwnet::Result<Outcome> {
    let net = NetworkGraph::<f32>::build(19, &mut Rng::new(0))?;
    let n = net.params.trainable_count();
    Ok(outcome(
        (750_000..=850_000).contains(&n),
        format!("{n} trainable parameters for C=19, band [750000, 850000]"),
    ))
}

fn flops_saving(_: &mut Shared) -> fddwnet::Result<Outcome> {
    let hw = (64, 128);
    let ratio =
        conv_macs(&ConvSpec::standard(3, 128, 128), hw) as f64 / conv_macs(&ConvSpec::fddwc(3, 1, 128, 128), hw) as f64;
    let inv = 1.0 / cost_factor(3, 128);
    Ok(outcome(
        (8.4..=8.8).contains(&ratio) && (8.55..=8.65).contains(&inv),
        format!("MAC ratio {ratio:.4} in [8.4, 8.8], 1/cost_factor {inv:.4} in [8.55, 8.65]"),
    ))
}

fn shape_contract(_: &mut Shared) -> fddwnet::Result<Outcome> {
    let net = NetworkGraph::<f32>::build(19, &mut Rng::new(0))?;
    let x = Tensor::<f32>::random(Shape::new(1, 3, 1024, 512), -1.0, 1.0, &mut Rng::new(1));
    let (logits, trace) = net.forward_traced(&x)?;
    let s = |c, h, w| Shape::new(1, c, h, w);
    // (first layer, last layer, expected output) per table block.
    let blocks = [
        (1, 1, s(16, 512, 256)),
        (2, 2, s(64, 256, 128)),
        (3, 7, s(64, 256, 128)),
        (8, 8, s(128, 128, 64)),
        (9, 12, s(128, 128, 64)),
        (13, 16, s(128, 128, 64)),
        (17, 20, s(128, 128, 64)),
        (21, 24, s(128, 128, 64)),
        (25, 25, s(64, 256, 128)),
        (26, 27, s(64, 256, 128)),
        (28, 28, s(16, 512, 256)),
        (29, 30, s(16, 512, 256)),
        (31, 31, s(19, 1024, 512)),
    ];
    let mut failures = Vec::new();
    let mut assertions = 0;
    for (first, last, want) in blocks {
        assertions += 1;
        if trace.layer_shapes.len() < last || trace.layer_shapes[first - 1..last].iter().any(|&got| got != want) {
            failures.push(format!("layers {first}-{last}"));
        }
    }
    let skip = [s(64, 256, 128), s(16, 512, 256), s(16, 512, 256)];
    for (i, want) in skip.iter().enumerate() {
        assertions += 1;
        if trace.skip_shapes.get(i) != Some(want) {
            failures.push(format!("skip shape {i}"));
        }
    }
    let logits_ok = logits.shape() == s(19, 1024, 512);
    if !logits_ok {
        failures.push(format!("logits {}", logits.shape()));
    }
    Ok(outcome(
        failures.is_empty() && assertions == 16,
        format!(
            "{} of {assertions} shape assertions hold, logits {}{}",
            assertions - failures.len().min(assertions),
            logits.shape(),
            if failures.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {}", failures.join(", "))
            }
        ),
    ))
}

fn oracle_equivalence(_: &mut Shared) -> fddwnet::Result<Outcome> {
    let suites = core_oracles(0)?;
    let ok = suites.len() == 4
        && suites
            .iter()
            .all(|r| r.passed() && r.instances >= ORACLE_INSTANCES && r.tolerance <= ORACLE_TOLERANCE);
    let worst = suites.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let names: Vec<&str> = suites.iter().map(|r| r.name.as_str()).collect();
    Ok(outcome(
        ok,
        format!(
            "{} ({} instances each), max abs error {worst:.2e} < {ORACLE_TOLERANCE:.0e}",
            names.join(", "),
            ORACLE_INSTANCES
        ),
    ))
}

fn gradient_checks(_: &mut Shared) -> fddwnet::Result<Outcome> {
    let reports = gradient_suite(0)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed() || r.coordinates < MIN_COORDS)
        .map(|r| r.name.as_str())
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let fewest = reports.iter().map(|r| r.coordinates).min().unwrap_or(0);
    Ok(outcome(
        failed.is_empty() && !reports.is_empty(),
        format!(
            "{} ops, >= {fewest} coordinates each, max relative error {worst:.2e} < {GRAD_TOLERANCE:.0e}{}",
            reports.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            }
        ),
    ))
}

fn receptive_fields(_: &mut Shared) -> fddwnet::Result<Outcome> {
    let got: Vec<usize> = [1, 2, 5, 9, 17].iter().map(|&r| receptive_field(3, r)).collect();
    Ok(outcome(
        got == [3, 5, 11, 19, 35],
        format!("receptive_field(3, r) for r = 1,2,5,9,17: {got:?}"),
    ))
}

fn toy_trainability(shared: &mut Shared) -> fddwnet::Result<Outcome> {
    let (log, weights) = toy_run(Some(1))?;
    let acc = log.final_accuracy().unwrap_or(0.0);
    let first = log.mean_loss(0..100).unwrap_or(f64::NAN);
    let last = log.mean_loss(TOY_ITERS - 100..TOY_ITERS).unwrap_or(f64::NAN);
    shared.toy = Some((log, weights));
    Ok(outcome(
        acc >= TOY_ACCURACY && last < first,
        format!(
            "{TOY_ITERS} iterations: pixel accuracy {acc:.4} (>= {TOY_ACCURACY}), mean loss {first:.4} -> {last:.4}"
        ),
    ))
}

fn serialization(_: &mut Shared) -> fddwnet::Result<Outcome> {
    let net = NetworkGraph::<f32>::build(19, &mut Rng::new(5))?;
    let bytes = save_weights(&net)?;
    let mut loaded = NetworkGraph::<f32>::build(19, &mut Rng::new(6))?;
    load_weights(&bytes, &mut loaded)?;
    let round_trip = save_weights(&loaded)? == bytes;

    let x = Tensor::<f32>::random(Shape::new(1, 3, 64, 32), -1.0, 1.0, &mut Rng::new(7));
    let same_forward = net.forward(&x)?.data() == loaded.forward(&x)?.data();

    let mut rng = Rng::new(8);
    let mut rejected = 0;
    for _ in 0..100 {
        let mut corrupt = bytes.clone();
        let byte = rng.below(4, corrupt.len());
        corrupt[byte] ^= 1 << rng.below(0, 8);
        if matches!(load_weights(&corrupt, &mut loaded), Err(Error::ChecksumMismatch { .. })) {
            rejected += 1;
        }
    }
    Ok(outcome(
        round_trip && same_forward && rejected == 100 && bytes.len() >= 1 << 20,
        format!(
            "{} byte archive: byte round trip {round_trip}, bit-identical forward {same_forward}, {rejected}/100 bit flips rejected",
            bytes.len()
        ),
    ))
}

fn determinism(shared: &mut Shared) -> fddwnet::Result<Outcome> {
    let net = NetworkGraph::<f32>::build(19, &mut Rng::new(0))?;
    let x = Tensor::<f32>::random(Shape::new(2, 3, 256, 128), -1.0, 1.0, &mut Rng::new(3));
    let reference = with_threads(Some(1), || net.forward(&x))?;
    let mut inference_ok = true;
    for threads in [1, 2, 4, 8] {
        let y = with_threads(Some(threads), || net.forward(&x))?;
        inference_ok &= y.data() == reference.data();
    }

    let first = match shared.toy.take() {
        Some(run) => run,
        None => toy_run(Some(1))?,
    };
    let second = toy_run(Some(4))?;
    let logs_ok = first.0 == second.0;
    let weights_ok = first.1 == second.1;
    Ok(outcome(
        inference_ok && logs_ok && weights_ok,
        format!(
            "inference identical across 1/2/4/8 threads: {inference_ok}; toy runs (1 vs 4 threads) identical logs: {logs_ok}, weights: {weights_ok}"
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("parameter count", parameter_count),
        ("FLOPs saving", flops_saving),
        ("shape contract", shape_contract),
        ("oracle equivalence", oracle_equivalence),
        ("gradient checks", gradient_checks),
        ("receptive field", receptive_fields),
        ("toy trainability", toy_trainability),
        ("serialization", serialization),
        ("determinism", determinism),
    ];
    let mut shared = Shared::default();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = check(&mut shared).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        if !result.passed {
            failures += 1;
        }
        println!(
            "{} criterion {}: {name}: {} [{secs:.2} s]",
            if result.passed { "PASS" } else { "FAIL" },
            i + 1,
            result.detail
        );
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
