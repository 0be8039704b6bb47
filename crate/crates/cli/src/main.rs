//! `ternkit` command line: quantize, infer, train, flops, bench.
//!
//! Exit codes: 0 success, 2 usage/file errors, 3 semantic errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use ternkit_core::bench::{default_shapes, report_csv, run_gemm_bench, with_thread_count, BenchShape};
use ternkit_core::io::{read_pgm, read_tensor, write_pgm, GrayImage};
use ternkit_core::network::{
    build_table1, build_toy, count_flops, count_params_memory, deserialize, forward, serialize,
    total_mflops, ConvEngine, ForwardOptions, Mode, Precision,
};
use ternkit_core::training::{metrics_csv, scores_to_mask, sparsity_csv, train, TrainConfig};
use ternkit_core::{DenseTensor, Error};

#[derive(Parser)]
#[command(name = "ternkit", version, about = "Ternary neural networks without multiplications")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantise a full-precision model file to ternary or binary weights.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ternary | binary
        #[arg(long, default_value = "ternary")]
        mode: String,
        /// Exact per-filter zero fraction instead of the threshold rule.
        #[arg(long)]
        sparsity: Option<f32>,
    },
    /// Run a model on an input stack and write the predicted mask as PGM.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Raw tensor stack (.tns) or a grayscale PGM slice.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Override the model's stored mode (float|ternary-weights|ternary|binary).
        #[arg(long)]
        mode: Option<String>,
        /// Slope for soft activations in ternary-weights mode.
        #[arg(long)]
        beta: Option<f32>,
        /// packed | reference
        #[arg(long, default_value = "packed")]
        engine: String,
        /// Hard-ternarise the input so the first conv runs packed too.
        #[arg(long)]
        ternarize_input: bool,
    },
    /// Train on the synthetic segmentation task and write metrics + model.
    Train {
        /// key=value config file; defaults to the desk-scale toy config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
    },
    /// Print the per-layer MFlops table and memory figures.
    Flops {
        /// table1 | toy
        #[arg(long, default_value = "table1")]
        arch: String,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 3)]
        slices: usize,
        #[arg(long, default_value_t = 64)]
        image: usize,
    },
    /// Benchmark packed ternary GEMM against the crate's float GEMM.
    Bench {
        /// rows,c,filters (repeatable); defaults to a standard shape list.
        #[arg(long)]
        shape: Vec<String>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Worker threads; 1 pins the benchmark to a single thread.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Usage and file problems exit 2, semantic problems exit 3.
enum CliError {
    Usage(String),
    Semantic(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Semantic(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Semantic(m) => m,
        }
    }
}

/// Core errors split by origin: broken files and IO are usage-class, bad
/// values and mismatched semantics are semantic-class.
fn classify(err: Error) -> CliError {
    match err {
        Error::Io(_)
        | Error::BadMagic
        | Error::Truncated(_)
        | Error::ChecksumMismatch { .. }
        | Error::Format(_) => CliError::Usage(err.to_string()),
        _ => CliError::Semantic(err.to_string()),
    }
}

fn usage(err: Error) -> CliError {
    CliError::Usage(err.to_string())
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("no such file: {}", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ternkit: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Quantize { model, out, mode, sparsity } => cmd_quantize(&model, &out, &mode, sparsity),
        Cmd::Infer { model, input, output, mode, beta, engine, ternarize_input } => {
            cmd_infer(&model, &input, &output, mode.as_deref(), beta, &engine, ternarize_input)
        }
        Cmd::Train { config, out } => cmd_train(config.as_deref(), &out),
        Cmd::Flops { arch, width, levels, slices, image } => {
            cmd_flops(&arch, width, levels, slices, image)
        }
        Cmd::Bench { shape, reps, threads, csv } => cmd_bench(&shape, reps, threads, csv.as_deref()),
    }
}

fn cmd_quantize(
    model_path: &Path,
    out: &Path,
    mode: &str,
    sparsity: Option<f32>,
) -> Result<(), CliError> {
    let mode = match mode {
        "ternary" => Mode::TernaryFull,
        "binary" => Mode::BinaryFull,
        other => return Err(CliError::Usage(format!("bad --mode '{other}' (ternary|binary)"))),
    };
    require_file(model_path)?;
    let model = deserialize(model_path).map_err(classify)?;
    let quantized = model.quantized(mode, sparsity).map_err(classify)?;
    serialize(&quantized, out).map_err(classify)?;
    let bytes = std::fs::metadata(out).map(|m| m.len()).unwrap_or(0);
    let payload: usize = quantized
        .spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, _)| quantized.params.conv[i].as_ref())
        .map(|w| match w {
            ternkit_core::network::LayerWeights::Packed(p) => {
                p.payload_bytes() + 4 * p.rows()
            }
            ternkit_core::network::LayerWeights::Dense(t) => 4 * t.len(),
        })
        .sum();
    println!(
        "wrote {} ({} mode): file {:.3} MB, weight payload {:.3} MB",
        out.display(),
        quantized.spec.mode.as_str(),
        bytes as f64 / 1e6,
        payload as f64 / 1e6
    );
    Ok(())
}

fn read_input_stack(path: &Path, slices: usize) -> Result<DenseTensor, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext.eq_ignore_ascii_case("pgm") {
        let img: GrayImage = read_pgm(path).map_err(usage)?;
        // replicate one slice across the stack and normalise like training data
        let max = img.max_value as f64;
        let plane: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / max).collect();
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane.len() as f64;
        let inv = 1.0 / var.sqrt().max(1e-9);
        let norm: Vec<f32> = plane.iter().map(|v| ((v - mean) * inv) as f32).collect();
        let mut data = Vec::with_capacity(slices * norm.len());
        for _ in 0..slices {
            data.extend_from_slice(&norm);
        }
        DenseTensor::from_vec(&[slices, img.height, img.width], data)
            .map_err(|e| CliError::Semantic(e.to_string()))
    } else {
        read_tensor(path).map_err(usage)
    }
}

fn cmd_infer(
    model_path: &Path,
    input_path: &Path,
    output: &Path,
    mode: Option<&str>,
    beta: Option<f32>,
    engine: &str,
    ternarize_input: bool,
) -> Result<(), CliError> {
    require_file(model_path)?;
    require_file(input_path)?;
    let engine = match engine {
        "packed" => ConvEngine::Packed,
        "reference" => ConvEngine::Reference,
        other => return Err(CliError::Usage(format!("bad --engine '{other}'"))),
    };
    let mode = mode.map(Mode::parse).transpose().map_err(usage)?;
    let mut model = deserialize(model_path).map_err(classify)?;
    if ternarize_input {
        model.spec.ternarize_input = true;
    }
    let input = read_input_stack(input_path, model.spec.input.slices)?;
    let opts = ForwardOptions { mode, beta, engine };
    let start = Instant::now();
    let scores = forward(&model, &input, &opts).map_err(classify)?;
    let elapsed = start.elapsed();
    let mask = scores_to_mask(&scores).map_err(classify)?;
    let (h, w) = (scores.shape()[1], scores.shape()[2]);
    write_pgm(
        output,
        &GrayImage {
            width: w,
            height: h,
            pixels: mask.iter().map(|&m| if m != 0 { 255u16 } else { 0 }).collect(),
            max_value: 255,
        },
    )
    .map_err(classify)?;
    println!(
        "wrote {} ({}x{}); inference took {:.2} ms",
        output.display(),
        w,
        h,
        elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, out_dir: &Path) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            TrainConfig::parse(&text).map_err(usage)?
        }
        None => TrainConfig::toy(),
    };
    if let Ok(seed) = std::env::var("TERNKIT_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| CliError::Usage(format!("bad TERNKIT_SEED '{seed}'")))?;
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Usage(format!("{}: {e}", out_dir.display())))?;

    println!(
        "training: mode {}, {} epochs x {} iters, batch {}, seed {}",
        cfg.mode.as_str(),
        cfg.epochs,
        cfg.iters_per_epoch,
        cfg.batch_size,
        cfg.seed
    );
    let start = Instant::now();
    let outcome = train(&cfg).map_err(classify)?;
    for m in &outcome.metrics {
        println!(
            "epoch {:>3}: beta {:.2}  loss {:.4}  val dice {:.4}  sparsity {:.3}",
            m.epoch, m.beta, m.train_loss, m.val_dice, m.mean_weight_sparsity
        );
    }
    println!("trained in {:.1} s", start.elapsed().as_secs_f64());

    let write = |name: &str, content: &str| -> Result<(), CliError> {
        std::fs::write(out_dir.join(name), content)
            .map_err(|e| CliError::Usage(format!("{name}: {e}")))
    };
    write("metrics.csv", &metrics_csv(&outcome.metrics))?;
    write("sparsity.csv", &sparsity_csv(&outcome.layer_sparsity))?;
    serialize(&outcome.model, &out_dir.join("model.tnn")).map_err(classify)?;
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_flops(
    arch: &str,
    width: usize,
    levels: usize,
    slices: usize,
    image: usize,
) -> Result<(), CliError> {
    let spec = match arch {
        "table1" => build_table1(),
        "toy" => build_toy(width, slices, levels, image).map_err(|e| CliError::Usage(e.to_string()))?,
        other => return Err(CliError::Usage(format!("unknown --arch '{other}' (table1|toy)"))),
    };
    let entries = count_flops(&spec).map_err(classify)?;
    println!("{:<12} {:>10}", "layer", "MFlops");
    for e in &entries {
        println!("{:<12} {:>10.0}", e.label, e.mflops.round());
    }
    println!("{:<12} {:>10.0}", "total", total_mflops(&entries).round());
    let float = count_params_memory(&spec, Precision::Float32);
    let tern = count_params_memory(&spec, Precision::Ternary2Bit);
    let bin = count_params_memory(&spec, Precision::Binary1Bit);
    println!(
        "parameters {} | weight memory: float32 {:.2} MB, ternary {:.2} MB, binary {:.2} MB",
        float.params,
        float.payload_mbytes(),
        tern.payload_mbytes(),
        bin.payload_mbytes()
    );
    Ok(())
}

fn parse_shape(s: &str) -> Result<BenchShape, CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("bad --shape '{s}' (rows,c,filters)")));
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad --shape '{s}'")))?;
    Ok(BenchShape { rows: nums[0], c: nums[1], filters: nums[2] })
}

fn cmd_bench(
    shapes: &[String],
    reps: usize,
    threads: usize,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let shapes: Vec<BenchShape> = if shapes.is_empty() {
        default_shapes()
    } else {
        shapes.iter().map(|s| parse_shape(s)).collect::<Result<_, _>>()?
    };
    println!("{:>6} {:>6} {:>8} {:>12} {:>12} {:>8}", "rows", "c", "filters", "float_ns", "ternary_ns", "speedup");
    let mut reports = Vec::new();
    for shape in shapes {
        let report = with_thread_count(threads, || run_gemm_bench(shape, reps, 7))
            .map_err(classify)?;
        println!(
            "{:>6} {:>6} {:>8} {:>12.0} {:>12.0} {:>7.2}x",
            shape.rows, shape.c, shape.filters, report.float_ns, report.ternary_ns, report.speedup
        );
        reports.push(report);
    }
    if let Some(path) = csv {
        std::fs::write(path, report_csv(&reports))
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
