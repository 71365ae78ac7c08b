//! Command-line driver: quantize tensors, run index-based matmuls with
//! verification, extract top-k extremes, run the toy transformer-block demo,
//! and emit cost reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or container error,
//! 4 verification failure.

mod demo;

use clap::{Parser, Subcommand, ValueEnum};
use kllm_core::container::{read_container, write_container, Container};
use kllm_core::cost::{snapshot_and_report, CostTable, OpCounters};
use kllm_core::matmul::{build_product_table, matmul_full, TableCache};
use kllm_core::oracle;
use kllm_core::orizuru::{top_k_extremes, TwoFoldTree};
use kllm_core::quantizer::{
    calibrate, quantize_token, quantize_weights, OutlierMode, QuantConfig,
};
use kllm_core::{
    dequantize_matrix, dequantize_vector, AttachedTables, DenseMatrix, ProductTable,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kllm", version, about = "Index-based kernels for K-Means-quantized inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Dynamic,
    Static,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random dense matrix container (standard normal entries).
    GenDense {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train activation calibration stats from a token matrix (one token per row).
    Calibrate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value_t = 0.005)]
        outlier_frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a weight matrix (per output channel) or an activation token.
    Quantize {
        #[arg(long, conflicts_with = "activations")]
        weights: bool,
        #[arg(long)]
        activations: bool,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value_t = 0.005)]
        outlier_frac: f64,
        #[arg(long, value_enum, default_value_t = Mode::Dynamic)]
        mode: Mode,
        /// Calibration stats container; required for activations, optional
        /// for weights (attaches offline product tables).
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Index-based matmul of a quantized vector with a quantized matrix.
    Matmul {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also run the dense oracle and fail (exit 4) past the tolerance.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Write the cost report as key: value text.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the cost report as JSON.
        #[arg(long)]
        report_json: Option<PathBuf>,
    },
    /// Pop the k largest and smallest elements of a vector with comparison accounting.
    Topk {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Run one random transformer block in full precision and quantized form.
    DemoLayer {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Defaults to 2*dim.
        #[arg(long)]
        ffn_dim: Option<usize>,
        #[arg(long, default_value_t = 4)]
        bits_w: u8,
        /// 16 bypasses quantization entirely (the quantized path becomes the
        /// FP path).
        #[arg(long, default_value_t = 4)]
        bits_a: u8,
        #[arg(long, default_value_t = 8)]
        context: usize,
        /// Write the block output vector as a dense container.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Verify(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Verify(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Verify(m) => m,
        }
    }
}

fn classify(e: kllm_core::Error) -> CliError {
    use kllm_core::Error as E;
    match e {
        E::Io(_)
        | E::BadMagic(_)
        | E::UnsupportedVersion(_)
        | E::UnknownTypeTag(_)
        | E::Truncated { .. }
        | E::TrailingBytes(_)
        | E::IndexOutOfRange { .. }
        | E::WrongContainerType { .. } => CliError::Io(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenDense {
            rows,
            cols,
            seed,
            out,
        } => cmd_gen_dense(rows, cols, seed, &out),
        Command::Calibrate {
            input,
            bits,
            outlier_frac,
            out,
        } => cmd_calibrate(&input, bits, outlier_frac, &out),
        Command::Quantize {
            weights,
            activations,
            input,
            out,
            bits,
            outlier_frac,
            mode,
            calib,
        } => {
            if weights == activations {
                return Err(CliError::Config(
                    "pass exactly one of --weights or --activations".into(),
                ));
            }
            if weights {
                cmd_quantize_weights(&input, &out, bits, calib.as_deref())
            } else {
                cmd_quantize_activations(&input, &out, bits, outlier_frac, mode, calib.as_deref())
            }
        }
        Command::Matmul {
            a,
            b,
            out,
            verify,
            tol,
            report,
            report_json,
        } => cmd_matmul(
            &a,
            &b,
            out.as_deref(),
            verify,
            tol,
            report.as_deref(),
            report_json.as_deref(),
        ),
        Command::Topk { input, k } => cmd_topk(&input, k),
        Command::DemoLayer {
            seed,
            dim,
            ffn_dim,
            bits_w,
            bits_a,
            context,
            out,
        } => demo::cmd_demo_layer(demo::DemoConfig {
            seed,
            dim,
            ffn_dim: ffn_dim.unwrap_or(2 * dim),
            bits_w,
            bits_a,
            context,
            out,
        }),
    }
}

fn read(path: &std::path::Path) -> Result<Container, CliError> {
    read_container(path).map_err(classify)
}

fn write(path: &std::path::Path, record: &Container) -> Result<(), CliError> {
    write_container(path, record).map_err(classify)
}

fn cmd_gen_dense(rows: usize, cols: usize, seed: u64, out: &std::path::Path) -> Result<(), CliError> {
    if rows == 0 || cols == 0 {
        return Err(CliError::Config("rows and cols must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let m = DenseMatrix::new(rows, cols, values).map_err(classify)?;
    write(out, &Container::Dense(m))?;
    println!("wrote {} ({rows}x{cols} dense, seed {seed})", out.display());
    Ok(())
}

fn cmd_calibrate(
    input: &std::path::Path,
    bits: u8,
    outlier_frac: f64,
    out: &std::path::Path,
) -> Result<(), CliError> {
    let tokens_matrix = read(input)?.into_dense().map_err(classify)?;
    let tokens: Vec<Vec<f64>> = (0..tokens_matrix.rows())
        .map(|r| tokens_matrix.row(r).to_vec())
        .collect();
    let cfg = QuantConfig {
        act_bits: bits,
        outlier_fraction_each_side: outlier_frac,
        ..QuantConfig::default()
    };
    let mut counters = OpCounters::new();
    let stats = calibrate(&tokens, &cfg, &mut counters).map_err(classify)?;
    println!(
        "calibrated {} tokens: bits={bits} upper={:.6} lower={:.6} scale={:.6}",
        tokens.len(),
        stats.static_upper_threshold,
        stats.static_lower_threshold,
        stats.static_scale
    );
    write(out, &Container::CalibrationStats(stats))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_quantize_weights(
    input: &std::path::Path,
    out: &std::path::Path,
    bits: u8,
    calib: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let w = read(input)?.into_dense().map_err(classify)?;
    let cfg = QuantConfig::default();
    let mut counters = OpCounters::new();
    let mut q = quantize_weights(&w, bits, None, cfg.kmeans_max_iters, cfg.kmeans_tol, &mut counters)
        .map_err(classify)?;

    // with calibration stats known now, the Cartesian products are computed
    // offline and ride along in the container
    if let Some(path) = calib {
        let stats = read(path)?.into_calibration_stats().map_err(classify)?;
        let mut offline = OpCounters::new();
        let mut tables: Vec<ProductTable> = Vec::new();
        let mut keys: Vec<Vec<u64>> = Vec::new();
        let mut channel_map = Vec::with_capacity(q.cols());
        for ch in q.per_channel() {
            let key: Vec<u64> = ch.codebook.centroids().iter().map(|c| c.to_bits()).collect();
            let id = match keys.iter().position(|k| k == &key) {
                Some(id) => id,
                None => {
                    keys.push(key);
                    tables.push(build_product_table(&stats.centroids, &ch.codebook, &mut offline));
                    tables.len() - 1
                }
            };
            channel_map.push(id as u32);
        }
        println!(
            "attached {} product tables (offline multiplications: {})",
            tables.len(),
            offline.fp_mul
        );
        q = q
            .with_tables(AttachedTables::new(channel_map, tables).map_err(classify)?)
            .map_err(classify)?;
    }

    let recon = dequantize_matrix(&q);
    let mut total_se = 0.0;
    let mut worst_channel_mse = 0.0f64;
    for n in 0..w.cols() {
        let se: f64 = (0..w.rows())
            .map(|k| {
                let d = w.get(k, n) - recon.get(k, n);
                d * d
            })
            .sum();
        worst_channel_mse = worst_channel_mse.max(se / w.rows() as f64);
        total_se += se;
    }
    println!(
        "quantized weights {}x{} at {bits} bits: mse={:.6e} worst_channel_mse={:.6e} outliers=0",
        w.rows(),
        w.cols(),
        total_se / (w.rows() * w.cols()) as f64,
        worst_channel_mse
    );
    write(out, &Container::QuantizedMatrix(q))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_quantize_activations(
    input: &std::path::Path,
    out: &std::path::Path,
    bits: u8,
    outlier_frac: f64,
    mode: Mode,
    calib: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let x = read(input)?.into_dense().map_err(classify)?;
    if x.rows() != 1 {
        return Err(CliError::Config(format!(
            "activation input must be a single 1xK token, got {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    let calib = calib.ok_or_else(|| {
        CliError::Config("--calib is required when quantizing activations".into())
    })?;
    let stats = read(calib)?.into_calibration_stats().map_err(classify)?;
    if stats.centroids.precision_bits() != bits {
        return Err(CliError::Config(format!(
            "calibration stats carry {} bits, requested {bits}",
            stats.centroids.precision_bits()
        )));
    }
    let cfg = QuantConfig {
        act_bits: bits,
        outlier_fraction_each_side: outlier_frac,
        outlier_mode: match mode {
            Mode::Dynamic => OutlierMode::Dynamic,
            Mode::Static => OutlierMode::Static,
        },
        ..QuantConfig::default()
    };
    let mut counters = OpCounters::new();
    let q = quantize_token(x.row(0), &stats, &cfg, &mut counters).map_err(classify)?;

    let recon = dequantize_vector(&q);
    let mse: f64 = recon
        .values()
        .iter()
        .zip(x.row(0))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.cols() as f64;
    println!(
        "quantized token K={} at {bits} bits ({:?}): outliers={} scale={:.6} mse={:.6e}",
        x.cols(),
        mode,
        q.outliers().len(),
        q.scale(),
        mse
    );
    write(out, &Container::QuantizedVector(q))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_matmul(
    a_path: &std::path::Path,
    b_path: &std::path::Path,
    out: Option<&std::path::Path>,
    verify: bool,
    tol: f64,
    report: Option<&std::path::Path>,
    report_json: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let a = read(a_path)?.into_quantized_vector().map_err(classify)?;
    let b = read(b_path)?.into_quantized_matrix().map_err(classify)?;
    let mut counters = OpCounters::new();
    let mut cache = TableCache::new();
    let y = matmul_full(&a, &b, &mut cache, &mut counters).map_err(classify)?;
    println!(
        "y: 1x{} (K={}, bits_a={}, bits_b={})",
        y.cols(),
        a.len(),
        a.codebook().precision_bits(),
        b.precision_bits()
    );
    println!("macs_per_column: {}", counters.fp_mac / b.cols() as u64);

    let cost_report = snapshot_and_report(&counters, &CostTable::default());
    if let Some(path) = report {
        std::fs::write(path, cost_report.to_string()).map_err(|e| CliError::Io(e.to_string()))?;
        println!("report: {}", path.display());
    }
    if let Some(path) = report_json {
        let json = serde_json::to_string_pretty(&cost_report)
            .map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| CliError::Io(e.to_string()))?;
        println!("report_json: {}", path.display());
    }

    if verify {
        let want = oracle::dense_matvec(&dequantize_vector(&a), &dequantize_matrix(&b))
            .map_err(classify)?;
        let max_rel = y
            .values()
            .iter()
            .zip(want.values())
            .map(|(g, w)| (g - w).abs() / w.abs().max(1.0))
            .fold(0.0, f64::max);
        println!("verify: max_rel_err={max_rel:.3e} tol={tol:.3e}");
        if !(max_rel <= tol) {
            return Err(CliError::Verify(format!(
                "oracle mismatch: max relative error {max_rel:.3e} exceeds {tol:.3e}"
            )));
        }
    }

    if let Some(path) = out {
        write(path, &Container::Dense(y))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_topk(input: &std::path::Path, k: usize) -> Result<(), CliError> {
    let x = read(input)?.into_dense().map_err(classify)?;
    if x.rows() != 1 {
        return Err(CliError::Config(format!(
            "topk input must be a single 1xN vector, got {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    let result = top_k_extremes(x.row(0), k).map_err(classify)?;
    for (i, &(p, v)) in result.maxima.iter().enumerate() {
        println!("max[{i}]: position={p} value={v:.6}");
    }
    for (i, &(p, v)) in result.minima.iter().enumerate() {
        println!("min[{i}]: position={p} value={v:.6}");
    }
    let n_pad = x.cols().next_power_of_two().max(2);
    let budget = TwoFoldTree::comparison_budget(n_pad, k);
    println!("comparisons_used: {}", result.comparisons_used);
    println!("comparison_budget: <= {budget}");
    Ok(())
}
