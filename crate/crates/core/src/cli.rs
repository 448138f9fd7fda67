//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on runtime failures, 2 on argument errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::analysis::analyze;
use crate::archive::{load_weights_file, save_weights_file};
use crate::bench::{bench_kernels, BenchKernel};
use crate::conv::receptive_field;
use crate::error::{Error, Result};
use crate::graph::{argmax_labels, NetworkGraph};
use crate::image::{read_palette, read_ppm, write_label_map, LabelImage};
use crate::selftest::run_selftest;
use crate::train::{train_toy_with, ToyDataset, ToyTrainConfig};
use crate::Rng;

/// Toy task geometry used by `train-toy`.
pub const TOY_IMAGES: usize = 8;
pub const TOY_CLASSES: usize = 4;
pub const TOY_HEIGHT: usize = 128;
pub const TOY_WIDTH: usize = 64;
/// Iteration budget at which the toy task is known to converge.
pub const TOY_ITERS: usize = 600;

#[derive(Debug, Parser)]
#[command(name = "fddwnet", version, about = "FDDWNet segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the per-layer parameter and MAC report.
    Summary {
        #[arg(long, default_value_t = 19)]
        classes: usize,
        /// Input size as HxW.
        #[arg(long, default_value = "1024x512", value_parser = parse_size)]
        input_size: (usize, usize),
    },
    /// Run every oracle-equivalence and gradient-check suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Receptive field of an n-tap kernel at dilation r.
    Rf {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        r: usize,
    },
    /// Segment a P6 image with saved weights.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 19)]
        classes: usize,
        /// Lines of `class_index R G B`; without it a P5 index map is written.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Train on the synthetic rectangles task and save the weights.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TOY_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time one convolution kernel.
    Bench {
        #[arg(long)]
        kernel: BenchKernel,
        #[arg(long)]
        channels: usize,
        /// Input size as HxW.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 3)]
        repeat: usize,
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad dimension `{v}` in `{s}`"))
    };
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err(format!("dimensions must be positive in `{s}`"));
    }
    Ok((h, w))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else if rendered.contains("Usage:") {
                write!(err, "{rendered}")
            } else {
                let usage = <Cli as clap::CommandFactory>::command().render_usage();
                write!(err, "{rendered}\n{usage}\n")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Summary { classes, input_size } => {
            let net = NetworkGraph::<f32>::build(classes, &mut Rng::new(0))?;
            write!(out, "{}", analyze(&net, input_size)?.to_text()).map_err(io_err)?;
        }
        Command::Selftest { seed } => {
            let results = run_selftest(seed)?;
            for r in &results {
                writeln!(out, "{}", r.line()).map_err(io_err)?;
            }
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name.as_str())
                .collect();
            if !failed.is_empty() {
                writeln!(out, "{} suite(s) failed: {}", failed.len(), failed.join(", ")).map_err(io_err)?;
                return Ok(1);
            }
            writeln!(out, "all {} suites passed", results.len()).map_err(io_err)?;
        }
        Command::Rf { n, r } => {
            if n == 0 || n % 2 == 0 || r == 0 {
                return Err(Error::UnsupportedSpec(format!(
                    "need odd n >= 1 and r >= 1, got n={n} r={r}"
                )));
            }
            writeln!(out, "{}", receptive_field(n, r)).map_err(io_err)?;
        }
        Command::Infer {
            weights,
            input,
            output,
            classes,
            palette,
        } => {
            let mut net = NetworkGraph::<f32>::build(classes, &mut Rng::new(0))?;
            load_weights_file(&weights, &mut net)?;
            let x = read_ppm(&input)?;
            let palette = palette.map(|p| read_palette(&p)).transpose()?;
            let logits = crate::parallel::with_threads(crate::parallel::threads_from_env(), || net.forward(&x))?;
            let s = logits.shape();
            let labels = LabelImage::new(s.height, s.width, argmax_labels(&logits), classes)?;
            write_label_map(&labels, palette.as_ref(), &output)?;
            writeln!(out, "wrote {}x{} label map to {}", s.height, s.width, output.display()).map_err(io_err)?;
        }
        Command::TrainToy {
            out: path,
            iters,
            batch,
            seed,
        } => {
            let data = ToyDataset::generate(TOY_IMAGES, TOY_HEIGHT, TOY_WIDTH, TOY_CLASSES, seed)?;
            let mut net = NetworkGraph::<f32>::build(TOY_CLASSES, &mut Rng::new(seed))?;
            let cfg = ToyTrainConfig {
                iters,
                batch,
                seed,
                ..ToyTrainConfig::default()
            };
            writeln!(out, "iter,loss,lr,pixel_acc").map_err(io_err)?;
            let mut write_err = None;
            let log = train_toy_with(&mut net, &data, &cfg, |e| {
                let acc = e.pixel_acc.map_or_else(String::new, |a| format!("{a:.6}"));
                if let Err(e) = writeln!(out, "{},{:.6},{:.6e},{}", e.iter, e.loss, e.lr, acc) {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(io_err(e));
            }
            save_weights_file(&net, &path)?;
            if let Some(acc) = log.final_accuracy() {
                writeln!(out, "final pixel accuracy: {acc:.6}").map_err(io_err)?;
            }
            writeln!(out, "saved weights to {}", path.display()).map_err(io_err)?;
        }
        Command::Bench {
            kernel,
            channels,
            size,
            repeat,
        } => {
            let report = bench_kernels(kernel, channels, size, repeat)?;
            for line in report.static_lines().into_iter().chain(report.timing_lines()) {
                writeln!(out, "{line}").map_err(io_err)?;
            }
        }
    }
    Ok(0)
}
