//! One-block transformer demo: RMSNorm, QKV projections, dense SoftMax,
//! integer-quantized scores against the V cache, output projection, second
//! RMSNorm, gated FFN with a codebook-rewritten SiLU. The block runs once in
//! full precision and once through the quantized index-based path; the demo
//! prints per-tensor relative errors, the online cost report, and an exact
//! audit of the engine's operation-count identities.
//!
//! Weight and KV-cache quantization is charged to a separate offline counter,
//! matching their quantization-time cost in the modeled flow. With
//! `bits_a = 16` quantization is bypassed and the quantized path degenerates
//! to the FP path exactly.

use crate::{classify, CliError};
use kllm_core::container::{write_container, Container};
use kllm_core::cost::{
    budget_check, snapshot_and_report, BudgetItem, CostTable, OpClass, OpCounters,
};
use kllm_core::matmul::{matmul_full_scaled, matvec_intk, TableCache};
use kllm_core::nonlinear::{codebook_map, rmsnorm_fused, NORM_EPSILON};
use kllm_core::oracle;
use kllm_core::orizuru::TwoFoldTree;
use kllm_core::quantizer::{
    calibrate, integer_quantize, outliers_per_side, quantize_token, quantize_weights, QuantConfig,
};
use kllm_core::{dequantize_vector, DenseMatrix, QuantizedMatrix, QuantizedVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::PathBuf;

pub struct DemoConfig {
    pub seed: u64,
    pub dim: usize,
    pub ffn_dim: usize,
    pub bits_w: u8,
    pub bits_a: u8,
    pub context: usize,
    pub out: Option<PathBuf>,
}

/// Quantization-disabled sentinel for --bits-a.
const BYPASS_BITS: u8 = 16;

pub fn cmd_demo_layer(cfg: DemoConfig) -> Result<(), CliError> {
    if !(4..=512).contains(&cfg.dim) || !(4..=2048).contains(&cfg.ffn_dim) {
        return Err(CliError::Config(
            "dim must be in 4..=512 and ffn_dim in 4..=2048".into(),
        ));
    }
    if !(2..=64).contains(&cfg.context) {
        return Err(CliError::Config("context must be in 2..=64".into()));
    }
    if cfg.bits_w == 0 || cfg.bits_w > 8 {
        return Err(CliError::Config("bits_w must be 1..=8".into()));
    }
    let bypass = cfg.bits_a == BYPASS_BITS;
    if !bypass && (cfg.bits_a == 0 || cfg.bits_a > 8) {
        return Err(CliError::Config("bits_a must be 1..=8, or 16 to bypass".into()));
    }

    let tensors = BlockTensors::generate(&cfg);
    let fp = run_fp_block(&cfg, &tensors);
    let quantized = if bypass {
        println!("quantization bypassed (bits_a=16): quantized path runs the FP block");
        QuantizedRun {
            outputs: fp.clone(),
            counters: OpCounters::new(),
            offline: OpCounters::new(),
            budget: Vec::new(),
        }
    } else {
        run_quantized_block(&cfg, &tensors)?
    };

    println!(
        "demo-layer seed={} dim={} ffn_dim={} context={} W{}A{}",
        cfg.seed, cfg.dim, cfg.ffn_dim, cfg.context, cfg.bits_w, cfg.bits_a
    );
    for (name, got, want) in [
        ("q_proj", &quantized.outputs.q, &fp.q),
        ("attn_scores", &quantized.outputs.probs, &fp.probs),
        ("attn_out", &quantized.outputs.attn, &fp.attn),
        ("ffn_gate", &quantized.outputs.gate, &fp.gate),
        ("block_out", &quantized.outputs.y, &fp.y),
    ] {
        println!("{name}: rel_err={:.6e}", rel_err(got, want));
    }

    println!("-- online cost report --");
    print!(
        "{}",
        snapshot_and_report(&quantized.counters, &CostTable::default())
    );
    println!(
        "offline quantization ops: cluster_distance={} fp_mul={}",
        quantized.offline.cluster_distance, quantized.offline.fp_mul
    );

    if !bypass {
        println!("-- counter identity audit --");
        let report = budget_check(&quantized.counters, &quantized.budget);
        print!("{report}");
        if !report.all_pass {
            return Err(CliError::Verify("counter identities failed".into()));
        }
    }

    if let Some(path) = &cfg.out {
        write_container(path, &Container::Dense(DenseMatrix::from_row(quantized.outputs.y.clone()).map_err(classify)?))
            .map_err(classify)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

struct BlockTensors {
    x: Vec<f64>,
    wq: DenseMatrix,
    wk: DenseMatrix,
    wv: DenseMatrix,
    wo: DenseMatrix,
    w_gate: DenseMatrix,
    w_up: DenseMatrix,
    w_down: DenseMatrix,
    k_cache: DenseMatrix,
    v_cache: DenseMatrix,
}

impl BlockTensors {
    fn generate(cfg: &DemoConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(rng)).collect()
        }
        fn weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
            let scale = 1.0 / (rows as f64).sqrt();
            let values: Vec<f64> = vector(rng, rows * cols).iter().map(|v| v * scale).collect();
            DenseMatrix::new(rows, cols, values).unwrap()
        }
        let dim = cfg.dim;
        let ffn = cfg.ffn_dim;
        let wq = weight(&mut rng, dim, dim);
        let wk = weight(&mut rng, dim, dim);
        let wv = weight(&mut rng, dim, dim);
        let wo = weight(&mut rng, dim, dim);
        let w_gate = weight(&mut rng, dim, ffn);
        let w_up = weight(&mut rng, dim, ffn);
        let w_down = weight(&mut rng, ffn, dim);
        let k_cache =
            DenseMatrix::new(cfg.context, dim, vector(&mut rng, cfg.context * dim)).unwrap();
        let v_cache =
            DenseMatrix::new(cfg.context, dim, vector(&mut rng, cfg.context * dim)).unwrap();
        let x = vector(&mut rng, dim);
        Self {
            x,
            wq,
            wk,
            wv,
            wo,
            w_gate,
            w_up,
            w_down,
            k_cache,
            v_cache,
        }
    }
}

#[derive(Clone)]
struct BlockOutputs {
    q: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    gate: Vec<f64>,
    y: Vec<f64>,
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let peak = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|v| (v - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

fn matvec(a: &[f64], b: &DenseMatrix) -> Vec<f64> {
    oracle::dense_matvec(&DenseMatrix::from_row(a.to_vec()).unwrap(), b)
        .unwrap()
        .values()
        .to_vec()
}

fn vstack(top: &DenseMatrix, row: &[f64]) -> DenseMatrix {
    let mut values = top.values().to_vec();
    values.extend_from_slice(row);
    DenseMatrix::new(top.rows() + 1, top.cols(), values).unwrap()
}

fn run_fp_block(cfg: &DemoConfig, t: &BlockTensors) -> BlockOutputs {
    let xh = oracle::rmsnorm_reference(&t.x, NORM_EPSILON);
    let q = matvec(&xh, &t.wq);
    let k = matvec(&xh, &t.wk);
    let v = matvec(&xh, &t.wv);
    let k_full = vstack(&t.k_cache, &k);
    let v_full = vstack(&t.v_cache, &v);

    let inv_sqrt_d = 1.0 / (cfg.dim as f64).sqrt();
    let raw: Vec<f64> = matvec(&q, &k_full.transposed())
        .iter()
        .map(|s| s * inv_sqrt_d)
        .collect();
    let probs = softmax(&raw);
    let attn = matvec(&probs, &v_full);
    let out = matvec(&attn, &t.wo);
    let h: Vec<f64> = t.x.iter().zip(&out).map(|(a, b)| a + b).collect();

    let hh = oracle::rmsnorm_reference(&h, NORM_EPSILON);
    let gate = matvec(&hh, &t.w_gate);
    let up = matvec(&hh, &t.w_up);
    let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    let ffn = matvec(&act, &t.w_down);
    let y: Vec<f64> = h.iter().zip(&ffn).map(|(a, b)| a + b).collect();

    BlockOutputs {
        q,
        probs,
        attn,
        gate,
        y,
    }
}

struct QuantizedRun {
    outputs: BlockOutputs,
    counters: OpCounters,
    offline: OpCounters,
    budget: Vec<BudgetItem>,
}

/// Tracks the exact expected counts for every engine call alongside the run.
#[derive(Default)]
struct Audit {
    expected: OpCounters,
    comparison_bound: u64,
    cluster_distance_bound: u64,
}

impl Audit {
    fn kk_matmul(&mut self, k: usize, n: usize, bits_a: u8, bits_b: u8, outliers: usize, builds: u64) {
        let table = 1u64 << (bits_a + bits_b);
        self.expected.add(OpClass::Concat, (k * n) as u64);
        self.expected.add(OpClass::HistogramIncrement, (k * n) as u64);
        self.expected.add(OpClass::FpMac, n as u64 * table);
        self.expected.add(OpClass::Lookup, (outliers * n) as u64);
        self.expected.add(OpClass::FpAdd, (outliers * n) as u64);
        self.expected
            .add(OpClass::FpMul, (outliers * n) as u64 + builds * table);
    }

    fn intk_matmul(&mut self, k: usize, n: usize, bits_b: u8) {
        self.expected
            .add(OpClass::HistogramIncrement, (k * n) as u64);
        self.expected.add(OpClass::FpMac, (n as u64) << bits_b);
    }

    fn rmsnorm(&mut self, token_len: usize, bits: u8, outliers: usize) {
        let m = (1u64 << bits) + outliers as u64;
        self.expected.add(OpClass::Square, m);
        self.expected.add(OpClass::FpMac, m);
        self.expected
            .add(OpClass::HistogramIncrement, token_len as u64);
    }

    fn silu_map(&mut self, bits: u8, outliers: usize) {
        self.expected
            .add(OpClass::ExpEval, (1u64 << bits) + outliers as u64);
    }

    fn softmax(&mut self, n: usize) {
        self.expected.add(OpClass::ExpEval, n as u64);
    }

    fn quantize_act(&mut self, token_len: usize, bits: u8, fraction: f64) {
        let k = outliers_per_side(fraction, token_len);
        let n_pad = token_len.next_power_of_two().max(2);
        // calibrate pops once, quantize pops again
        self.comparison_bound += 2 * TwoFoldTree::comparison_budget(n_pad, k);
        self.cluster_distance_bound += (token_len as u64) * (bits as u64 + 2);
    }

    fn into_budget(self) -> Vec<BudgetItem> {
        let mut items: Vec<BudgetItem> = [
            OpClass::Concat,
            OpClass::HistogramIncrement,
            OpClass::FpMac,
            OpClass::FpMul,
            OpClass::FpAdd,
            OpClass::Lookup,
            OpClass::Square,
            OpClass::ExpEval,
        ]
        .into_iter()
        .map(|class| BudgetItem::exact(class, self.expected.get(class)))
        .collect();
        items.push(BudgetItem::at_most(OpClass::Comparison, self.comparison_bound));
        items.push(BudgetItem::at_most(
            OpClass::ClusterDistance,
            self.cluster_distance_bound,
        ));
        items
    }
}

fn run_quantized_block(cfg: &DemoConfig, t: &BlockTensors) -> Result<QuantizedRun, CliError> {
    let qcfg = QuantConfig {
        weight_bits: cfg.bits_w,
        act_bits: cfg.bits_a,
        ..QuantConfig::default()
    };
    let mut online = OpCounters::new();
    let mut offline = OpCounters::new();
    let mut cache = TableCache::new();
    let mut audit = Audit::default();

    let quantize_weight = |w: &DenseMatrix, bits: u8, offline: &mut OpCounters| {
        quantize_weights(w, bits, None, qcfg.kmeans_max_iters, qcfg.kmeans_tol, offline)
            .map_err(classify)
    };
    let wq = quantize_weight(&t.wq, cfg.bits_w, &mut offline)?;
    let wk = quantize_weight(&t.wk, cfg.bits_w, &mut offline)?;
    let wv = quantize_weight(&t.wv, cfg.bits_w, &mut offline)?;
    let wo = quantize_weight(&t.wo, cfg.bits_w, &mut offline)?;
    let w_gate = quantize_weight(&t.w_gate, cfg.bits_w, &mut offline)?;
    let w_up = quantize_weight(&t.w_up, cfg.bits_w, &mut offline)?;
    let w_down = quantize_weight(&t.w_down, cfg.bits_w, &mut offline)?;

    // per-site activation stats from single-token self-calibration
    let mut quantize_act = |x: &[f64],
                            online: &mut OpCounters,
                            audit: &mut Audit|
     -> Result<QuantizedVector, CliError> {
        let stats = calibrate(&[x.to_vec()], &qcfg, online).map_err(classify)?;
        let q = quantize_token(x, &stats, &qcfg, online).map_err(classify)?;
        audit.quantize_act(x.len(), cfg.bits_a, qcfg.outlier_fraction_each_side);
        Ok(q)
    };

    // fused-norm matmul helper with exact audit bookkeeping
    let mut fused_matmul = |a: &QuantizedVector,
                            b: &QuantizedMatrix,
                            extra: f64,
                            cache: &mut TableCache,
                            online: &mut OpCounters,
                            audit: &mut Audit|
     -> Result<Vec<f64>, CliError> {
        let builds_before = cache.builds();
        let y = matmul_full_scaled(a, b, extra, cache, online).map_err(classify)?;
        audit.kk_matmul(
            a.len(),
            b.cols(),
            a.codebook().precision_bits(),
            b.precision_bits(),
            a.outliers().len(),
            cache.builds() - builds_before,
        );
        Ok(y.values().to_vec())
    };

    // attention
    let xq = quantize_act(&t.x, &mut online, &mut audit)?;
    let fs = rmsnorm_fused(&xq, &mut online).map_err(classify)?;
    audit.rmsnorm(xq.len(), cfg.bits_a, xq.outliers().len());
    let q = fused_matmul(&xq, &wq, fs.multiplier, &mut cache, &mut online, &mut audit)?;
    let k = fused_matmul(&xq, &wk, fs.multiplier, &mut cache, &mut online, &mut audit)?;
    let v = fused_matmul(&xq, &wv, fs.multiplier, &mut cache, &mut online, &mut audit)?;

    let k_full = vstack(&t.k_cache, &k);
    let v_full = vstack(&t.v_cache, &v);
    // cache tokens become output channels of the transposed cache
    let k_t = quantize_weight(&k_full.transposed(), cfg.bits_a, &mut offline)?;
    let v_q = quantize_weight(&v_full, cfg.bits_a, &mut offline)?;

    let qq = quantize_act(&q, &mut online, &mut audit)?;
    let inv_sqrt_d = 1.0 / (cfg.dim as f64).sqrt();
    let raw = fused_matmul(&qq, &k_t, inv_sqrt_d, &mut cache, &mut online, &mut audit)?;

    // attention weights stay full precision through SoftMax
    let probs = softmax(&raw);
    online.add(OpClass::ExpEval, probs.len() as u64);
    audit.softmax(probs.len());

    // attention scores take the integer path against the V cache
    let scores = integer_quantize(&probs, 0.0, 1.0, cfg.bits_a).map_err(classify)?;
    let attn = matvec_intk(&scores, &v_q, &mut online).map_err(classify)?;
    audit.intk_matmul(scores.len(), v_q.cols(), cfg.bits_a);
    let attn = attn.values().to_vec();

    let attn_q = quantize_act(&attn, &mut online, &mut audit)?;
    let out = fused_matmul(&attn_q, &wo, 1.0, &mut cache, &mut online, &mut audit)?;
    let h: Vec<f64> = t.x.iter().zip(&out).map(|(a, b)| a + b).collect();

    // FFN
    let hq = quantize_act(&h, &mut online, &mut audit)?;
    let fs2 = rmsnorm_fused(&hq, &mut online).map_err(classify)?;
    audit.rmsnorm(hq.len(), cfg.bits_a, hq.outliers().len());
    let gate = fused_matmul(&hq, &w_gate, fs2.multiplier, &mut cache, &mut online, &mut audit)?;
    let up = fused_matmul(&hq, &w_up, fs2.multiplier, &mut cache, &mut online, &mut audit)?;

    let gate_q = quantize_act(&gate, &mut online, &mut audit)?;
    let gate_silu = codebook_map(&gate_q, silu, OpClass::ExpEval, &mut online).map_err(classify)?;
    audit.silu_map(cfg.bits_a, gate_q.outliers().len());

    // the element-wise gate product runs densely on the dequantized branches
    let act: Vec<f64> = dequantize_vector(&gate_silu)
        .values()
        .iter()
        .zip(&up)
        .map(|(g, u)| g * u)
        .collect();
    let act_q = quantize_act(&act, &mut online, &mut audit)?;
    let ffn = fused_matmul(&act_q, &w_down, 1.0, &mut cache, &mut online, &mut audit)?;
    let y: Vec<f64> = h.iter().zip(&ffn).map(|(a, b)| a + b).collect();

    Ok(QuantizedRun {
        outputs: BlockOutputs {
            q,
            probs,
            attn,
            gate,
            y,
        },
        counters: online,
        offline,
        budget: audit.into_budget(),
    })
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let denom = want.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max)
        / denom
}
