//! Codebook training and quantization.
//!
//! Weights get per-output-channel K-Means codebooks trained offline.
//! Activations get token-wise quantization against offline-calibrated
//! centroids: a single online assignment pass, after the top and bottom
//! fraction of each token is split off as full-precision outliers. Attention
//! scores use plain affine integer quantization.

use crate::cost::{OpClass, OpCounters};
use crate::error::{Error, Result};
use crate::orizuru;
use crate::tensor::{
    ChannelQuant, Codebook, DenseMatrix, IntegerQuantizedVector, OutlierSet, QuantizedMatrix,
    QuantizedVector, FILLER_INDEX,
};

/// How activation outliers are detected online.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlierMode {
    /// Per-token top-k/bottom-k detection through the tournament tree.
    Dynamic,
    /// Reuse thresholds recorded during offline calibration.
    Static,
}

#[derive(Debug, Clone)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Fraction of each token popped as outliers on each side.
    pub outlier_fraction_each_side: f64,
    pub outlier_mode: OutlierMode,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 4,
            outlier_fraction_each_side: 0.005,
            outlier_mode: OutlierMode::Dynamic,
            kmeans_max_iters: 50,
            kmeans_tol: 1e-9,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        for bits in [self.weight_bits, self.act_bits] {
            if bits == 0 || bits > 8 {
                return Err(Error::BadPrecision(bits));
            }
        }
        let f = self.outlier_fraction_each_side;
        if !(f.is_finite() && (0.0..0.5).contains(&f)) {
            return Err(Error::InvalidConfig(format!(
                "outlier fraction per side must lie in [0, 0.5), got {f}"
            )));
        }
        if self.kmeans_max_iters == 0 {
            return Err(Error::InvalidConfig("kmeans_max_iters must be >= 1".into()));
        }
        if !(self.kmeans_tol >= 0.0 && self.kmeans_tol.is_finite()) {
            return Err(Error::InvalidConfig("kmeans_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Offline calibration artifact: activation centroids plus the thresholds and
/// scale reused by static-mode quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    pub centroids: Codebook,
    pub static_upper_threshold: f64,
    pub static_lower_threshold: f64,
    pub static_scale: f64,
}

impl CalibrationStats {
    pub fn new(
        centroids: Codebook,
        static_upper_threshold: f64,
        static_lower_threshold: f64,
        static_scale: f64,
    ) -> Result<Self> {
        if !(static_lower_threshold.is_finite() && static_upper_threshold.is_finite()) {
            return Err(Error::NonFinite(0));
        }
        if static_lower_threshold >= static_upper_threshold {
            return Err(Error::DegenerateCalibration {
                lower: static_lower_threshold,
                upper: static_upper_threshold,
            });
        }
        if !(static_scale > 0.0 && static_scale.is_finite()) {
            return Err(Error::BadScale(static_scale));
        }
        Ok(Self {
            centroids,
            static_upper_threshold,
            static_lower_threshold,
            static_scale,
        })
    }
}

/// Output of weighted Lloyd training.
#[derive(Debug, Clone)]
pub struct TrainedCodebook {
    pub codebook: Codebook,
    /// Weighted within-cluster SSE after the initial assignment and after
    /// each Lloyd iteration; non-increasing.
    pub sse_history: Vec<f64>,
    /// Set when the data had fewer distinct values than centroids.
    pub duplicate_centroids: bool,
}

/// Weighted 1-D Lloyd with deterministic quantile initialization.
///
/// Initial centroids sit at `2^bits` evenly spaced quantiles of the weighted
/// sample distribution. Empty clusters are reseeded at the sample with the
/// largest weighted distance to its centroid (among clusters that can spare a
/// member). Terminates at `max_iters` or when no centroid moves more than
/// `tol`. Centroids are returned sorted ascending.
pub fn weighted_kmeans_train(
    samples: &[f64],
    sample_weights: &[f64],
    bits: u8,
    max_iters: usize,
    tol: f64,
) -> Result<TrainedCodebook> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if samples.len() != sample_weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} samples vs {} weights",
            samples.len(),
            sample_weights.len()
        )));
    }
    if bits == 0 || bits > 8 {
        return Err(Error::BadPrecision(bits));
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    if sample_weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::BadWeights);
    }
    let total_weight: f64 = sample_weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(Error::BadWeights);
    }

    let m = 1usize << bits;
    let mut centroids = quantile_init(samples, sample_weights, total_weight, m);
    let mut assignments = vec![0usize; samples.len()];
    assign_to_centroids(samples, &centroids, &mut assignments);

    let mut sse_history = vec![weighted_sse(samples, sample_weights, &centroids, &assignments)];
    for _ in 0..max_iters {
        let old = centroids.clone();
        update_centroids(samples, sample_weights, &assignments, &mut centroids);
        repair_empty_clusters(samples, sample_weights, &mut centroids, &mut assignments);
        assign_to_centroids(samples, &centroids, &mut assignments);

        let sse = weighted_sse(samples, sample_weights, &centroids, &assignments);
        let prev = *sse_history.last().unwrap();
        debug_assert!(
            sse <= prev + 1e-9 * prev.abs().max(1.0),
            "Lloyd SSE increased: {prev} -> {sse}"
        );
        sse_history.push(sse);

        let movement = centroids
            .iter()
            .zip(&old)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if movement < tol {
            break;
        }
    }

    centroids.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let duplicate_centroids = centroids.windows(2).any(|w| w[0] == w[1]);
    Ok(TrainedCodebook {
        codebook: Codebook::new(bits, centroids)?,
        sse_history,
        duplicate_centroids,
    })
}

fn quantile_init(samples: &[f64], weights: &[f64], total_weight: f64, m: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&i, &j| samples[i].partial_cmp(&samples[j]).unwrap());
    let mut centroids = Vec::with_capacity(m);
    let mut cursor = 0usize;
    let mut cum = weights[order[0]];
    for j in 0..m {
        let target = (j as f64 + 0.5) / m as f64 * total_weight;
        while cum < target && cursor + 1 < order.len() {
            cursor += 1;
            cum += weights[order[cursor]];
        }
        centroids.push(samples[order[cursor]]);
    }
    centroids
}

fn assign_to_centroids(samples: &[f64], centroids: &[f64], assignments: &mut [usize]) {
    for (a, &x) in assignments.iter_mut().zip(samples) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, &c) in centroids.iter().enumerate() {
            let d = (x - c).abs();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        *a = best;
    }
}

fn update_centroids(
    samples: &[f64],
    weights: &[f64],
    assignments: &[usize],
    centroids: &mut [f64],
) {
    let m = centroids.len();
    let mut sums = vec![0.0; m];
    let mut mass = vec![0.0; m];
    for ((&x, &w), &a) in samples.iter().zip(weights).zip(assignments) {
        sums[a] += w * x;
        mass[a] += w;
    }
    for j in 0..m {
        if mass[j] > 0.0 {
            centroids[j] = sums[j] / mass[j];
        }
        // zero-mass clusters keep their position until repaired
    }
}

fn repair_empty_clusters(
    samples: &[f64],
    weights: &[f64],
    centroids: &mut [f64],
    assignments: &mut [usize],
) {
    let m = centroids.len();
    let mut counts = vec![0usize; m];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for j in 0..m {
        if counts[j] > 0 {
            continue;
        }
        // reseed at the sample with the largest weighted distance to its
        // centroid, skipping singleton donor clusters
        let mut best: Option<(f64, usize)> = None;
        for (i, (&x, &w)) in samples.iter().zip(weights).enumerate() {
            if counts[assignments[i]] <= 1 {
                continue;
            }
            let d = x - centroids[assignments[i]];
            let cost = w * d * d;
            if best.map_or(true, |(b, _)| cost > b) {
                best = Some((cost, i));
            }
        }
        if let Some((_, i)) = best {
            counts[assignments[i]] -= 1;
            centroids[j] = samples[i];
            assignments[i] = j;
            counts[j] = 1;
        }
    }
}

fn weighted_sse(samples: &[f64], weights: &[f64], centroids: &[f64], assignments: &[usize]) -> f64 {
    samples
        .iter()
        .zip(weights)
        .zip(assignments)
        .map(|((&x, &w), &a)| {
            let d = x - centroids[a];
            w * d * d
        })
        .sum()
}

/// Nearest-centroid assignment over a sorted codebook, one index per value.
/// Ties break toward the lower index. Each comparison against a centroid is
/// charged as one clustering-distance op.
pub fn assign_nearest(values: &[f64], codebook: &Codebook, counters: &mut OpCounters) -> Vec<u8> {
    debug_assert!(codebook.is_sorted_ascending());
    values
        .iter()
        .map(|&v| assign_one(v, codebook.centroids(), counters))
        .collect()
}

fn assign_one(v: f64, centroids: &[f64], counters: &mut OpCounters) -> u8 {
    let m = centroids.len();
    // uniform binary search: exactly log2(m) probes, then a boundary probe
    let mut first = 0usize;
    let mut step = m / 2;
    while step > 0 {
        counters.add(OpClass::ClusterDistance, 1);
        if centroids[first + step - 1] < v {
            first += step;
        }
        step /= 2;
    }
    counters.add(OpClass::ClusterDistance, 1);
    if centroids[first] < v {
        first += 1;
    }
    // first = lowest index with centroid >= v (or m)
    if first == 0 {
        0
    } else if first == m {
        (m - 1) as u8
    } else {
        counters.add(OpClass::ClusterDistance, 1);
        if v - centroids[first - 1] <= centroids[first] - v {
            (first - 1) as u8
        } else {
            first as u8
        }
    }
}

/// Split one activation token into outliers and quantized inliers.
///
/// Dynamic mode pops `ceil(fraction * K)` elements per side through the
/// tournament tree (clamped so both sides fit) and forms the outlier set from
/// their union. Static mode marks everything outside the calibrated
/// thresholds. Inliers are scaled by the largest inlier magnitude (dynamic) or
/// the calibrated scale (static) and assigned to the calibrated centroids; a
/// token of all-equal values gets scale 1.
pub fn quantize_token(
    x: &[f64],
    stats: &CalibrationStats,
    cfg: &QuantConfig,
    counters: &mut OpCounters,
) -> Result<QuantizedVector> {
    cfg.validate()?;
    let k_len = x.len();
    if k_len < 4 {
        return Err(Error::TokenTooShort { len: k_len, min: 4 });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }

    let outlier_positions: Vec<usize> = match cfg.outlier_mode {
        OutlierMode::Dynamic => {
            let k = outliers_per_side(cfg.outlier_fraction_each_side, k_len);
            if k == 0 {
                Vec::new()
            } else {
                let picked = orizuru::top_k_extremes(x, k)?;
                counters.add(OpClass::Comparison, picked.comparisons_used);
                let mut positions: Vec<usize> = picked
                    .maxima
                    .iter()
                    .chain(picked.minima.iter())
                    .map(|&(p, _)| p)
                    .collect();
                positions.sort_unstable();
                positions.dedup();
                positions
            }
        }
        OutlierMode::Static => (0..k_len)
            .filter(|&i| x[i] > stats.static_upper_threshold || x[i] < stats.static_lower_threshold)
            .collect(),
    };

    let outliers = OutlierSet::new(outlier_positions.iter().map(|&p| (p, x[p])).collect())?;
    let inlier_positions: Vec<usize> = (0..k_len).filter(|p| !outliers.contains(*p)).collect();

    let scale = match cfg.outlier_mode {
        OutlierMode::Dynamic => {
            let max_abs = inlier_positions
                .iter()
                .map(|&p| x[p].abs())
                .fold(0.0, f64::max);
            if max_abs > 0.0 {
                max_abs
            } else {
                1.0
            }
        }
        OutlierMode::Static => stats.static_scale,
    };

    let scaled: Vec<f64> = inlier_positions.iter().map(|&p| x[p] / scale).collect();
    let assigned = assign_nearest(&scaled, &stats.centroids, counters);
    let mut indices = vec![FILLER_INDEX; k_len];
    for (&p, &idx) in inlier_positions.iter().zip(&assigned) {
        indices[p] = idx;
    }
    QuantizedVector::new(indices, stats.centroids.clone(), scale, outliers)
}

/// Outlier count per side: `ceil(fraction * K)`, clamped so the two pops fit.
pub fn outliers_per_side(fraction: f64, token_len: usize) -> usize {
    ((fraction * token_len as f64).ceil() as usize).min(token_len / 2)
}

/// Per-output-channel weight quantization: each column gets its own scale
/// (largest magnitude, 1 for a zero column) and a codebook trained on the
/// scaled column. No outlier protection.
///
/// `sample_weights`, when given, must match `w`'s shape; column `n`'s weights
/// steer the training of channel `n`.
pub fn quantize_weights(
    w: &DenseMatrix,
    bits: u8,
    sample_weights: Option<&DenseMatrix>,
    max_iters: usize,
    tol: f64,
    counters: &mut OpCounters,
) -> Result<QuantizedMatrix> {
    if let Some(sw) = sample_weights {
        if sw.rows() != w.rows() || sw.cols() != w.cols() {
            return Err(Error::ShapeMismatch(format!(
                "sample weights {}x{} vs matrix {}x{}",
                sw.rows(),
                sw.cols(),
                w.rows(),
                w.cols()
            )));
        }
    }
    let rows = w.rows();
    let cols = w.cols();
    let mut indices = vec![0u8; rows * cols];
    let mut per_channel = Vec::with_capacity(cols);
    let uniform = vec![1.0; rows];
    for n in 0..cols {
        let col = w.column(n);
        let weights = match sample_weights {
            Some(sw) => sw.column(n),
            None => uniform.clone(),
        };
        let max_abs = col.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
        let scaled: Vec<f64> = col.iter().map(|v| v / scale).collect();
        let trained = weighted_kmeans_train(&scaled, &weights, bits, max_iters, tol)?;
        let assigned = assign_nearest(&scaled, &trained.codebook, counters);
        indices[n * rows..(n + 1) * rows].copy_from_slice(&assigned);
        per_channel.push(ChannelQuant {
            codebook: trained.codebook,
            scale,
        });
    }
    QuantizedMatrix::new(rows, cols, indices, per_channel)
}

/// Affine integer quantization over a fixed range: `scale = (hi-lo)/(2^bits-1)`,
/// `zero_point = round(-lo/scale)` clamped into range, values rounded to the
/// nearest index with ties to even.
pub fn integer_quantize(
    values: &[f64],
    lo: f64,
    hi: f64,
    bits: u8,
) -> Result<IntegerQuantizedVector> {
    if bits == 0 || bits > 8 {
        return Err(Error::BadPrecision(bits));
    }
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::BadRange { lo, hi });
    }
    let levels = ((1u16 << bits) - 1) as f64;
    let scale = (hi - lo) / levels;
    let zero_point = (-lo / scale).round_ties_even().clamp(0.0, levels) as u8;
    let indices = values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return Err(Error::NonFinite(0));
            }
            let q = (v / scale + zero_point as f64)
                .round_ties_even()
                .clamp(0.0, levels);
            Ok(q as u8)
        })
        .collect::<Result<Vec<u8>>>()?;
    IntegerQuantizedVector::new(indices, bits, scale, zero_point)
}

/// Pool the inliers of every calibration token (after per-token dynamic
/// outlier removal and per-token scaling) and train the shared activation
/// centroids. Records the mean per-token inlier extremes as static thresholds
/// and the mean per-token scale for static mode.
pub fn calibrate(
    tokens: &[Vec<f64>],
    cfg: &QuantConfig,
    counters: &mut OpCounters,
) -> Result<CalibrationStats> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut pooled = Vec::new();
    let mut upper_sum = 0.0;
    let mut lower_sum = 0.0;
    let mut scale_sum = 0.0;
    for token in tokens {
        if token.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = token.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let k = outliers_per_side(cfg.outlier_fraction_each_side, token.len());
        let inliers: Vec<f64> = if k == 0 {
            token.clone()
        } else {
            let picked = orizuru::top_k_extremes(token, k)?;
            counters.add(OpClass::Comparison, picked.comparisons_used);
            let mut popped: Vec<usize> = picked
                .maxima
                .iter()
                .chain(picked.minima.iter())
                .map(|&(p, _)| p)
                .collect();
            popped.sort_unstable();
            popped.dedup();
            let mut cursor = 0usize;
            token
                .iter()
                .enumerate()
                .filter_map(|(i, &v)| {
                    if cursor < popped.len() && popped[cursor] == i {
                        cursor += 1;
                        None
                    } else {
                        Some(v)
                    }
                })
                .collect()
        };
        if inliers.is_empty() {
            return Err(Error::EmptyInput);
        }
        let upper = inliers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lower = inliers.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_abs = inliers.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
        upper_sum += upper;
        lower_sum += lower;
        scale_sum += scale;
        pooled.extend(inliers.iter().map(|v| v / scale));
    }
    let n_tokens = tokens.len() as f64;
    let weights = vec![1.0; pooled.len()];
    let trained = weighted_kmeans_train(
        &pooled,
        &weights,
        cfg.act_bits,
        cfg.kmeans_max_iters,
        cfg.kmeans_tol,
    )?;
    CalibrationStats::new(
        trained.codebook,
        upper_sum / n_tokens,
        lower_sum / n_tokens,
        scale_sum / n_tokens,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::dequantize_vector;

    fn counters() -> OpCounters {
        OpCounters::new()
    }

    #[test]
    fn two_symmetric_clusters() {
        let t = weighted_kmeans_train(&[0.0, 0.0, 10.0, 10.0], &[1.0; 4], 1, 50, 1e-9).unwrap();
        assert_eq!(t.codebook.centroids(), &[0.0, 10.0]);
        assert!(!t.duplicate_centroids);
    }

    #[test]
    fn weighted_two_points() {
        let t = weighted_kmeans_train(&[0.0, 10.0], &[3.0, 1.0], 1, 50, 1e-9).unwrap();
        assert_eq!(t.codebook.centroids(), &[0.0, 10.0]);
        // the one-cluster subproblem has the closed-form weighted mean 2.5
        let (c, _) = oracle::exhaustive_kmeans_1d(&[0.0, 10.0], &[3.0, 1.0], 1).unwrap();
        assert_eq!(c, vec![2.5]);
    }

    #[test]
    fn gaussian_beats_uniform_grid() {
        // deterministic Box-Muller over a fixed LCG
        let mut state = 0x12345u64;
        let mut unit = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        };
        let samples: Vec<f64> = (0..128)
            .map(|_| {
                let (u1, u2) = (unit(), unit());
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let weights = vec![1.0; samples.len()];
        let trained = weighted_kmeans_train(&samples, &weights, 4, 100, 1e-10).unwrap();
        let kmeans_sse =
            oracle::weighted_sse_to_levels(&samples, &weights, trained.codebook.centroids());
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let grid = oracle::uniform_grid_levels(lo, hi, 4);
        let grid_sse = oracle::weighted_sse_to_levels(&samples, &weights, &grid);
        assert!(
            kmeans_sse <= grid_sse,
            "kmeans {kmeans_sse} vs grid {grid_sse}"
        );
    }

    #[test]
    fn sse_history_non_increasing() {
        let samples: Vec<f64> = (0..40).map(|i| ((i * 29) % 17) as f64).collect();
        let weights: Vec<f64> = (0..40).map(|i| 1.0 + (i % 3) as f64).collect();
        let t = weighted_kmeans_train(&samples, &weights, 3, 30, 0.0).unwrap();
        for w in t.sse_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn duplicate_centroids_flagged_when_data_too_coarse() {
        let t = weighted_kmeans_train(&[1.0, 1.0, 2.0], &[1.0; 3], 2, 20, 1e-9).unwrap();
        assert!(t.duplicate_centroids);
        assert_eq!(t.codebook.len(), 4);
    }

    #[test]
    fn training_input_errors() {
        assert!(matches!(
            weighted_kmeans_train(&[], &[], 2, 10, 1e-9),
            Err(Error::EmptyInput)
        ));
        assert!(matches!(
            weighted_kmeans_train(&[1.0], &[0.0], 1, 10, 1e-9),
            Err(Error::BadWeights)
        ));
        assert!(matches!(
            weighted_kmeans_train(&[1.0], &[-1.0], 1, 10, 1e-9),
            Err(Error::BadWeights)
        ));
        assert!(matches!(
            weighted_kmeans_train(&[1.0, 2.0], &[1.0], 1, 10, 1e-9),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn assign_nearest_basics() {
        let cb = Codebook::new(1, vec![-1.0, 1.0]).unwrap();
        let mut c = counters();
        assert_eq!(assign_nearest(&[-5.0, 5.0], &cb, &mut c), vec![0, 1]);
        assert!(c.cluster_distance > 0);
        // exact midpoint resolves to the lower index
        assert_eq!(assign_nearest(&[0.0], &cb, &mut c), vec![0]);
    }

    #[test]
    fn assign_nearest_matches_linear_scan() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            ((state >> 33) % 4001) as f64 / 200.0 - 10.0
        };
        let mut cents: Vec<f64> = (0..16).map(|_| next()).collect();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cb = Codebook::new(4, cents.clone()).unwrap();
        let values: Vec<f64> = (0..500).map(|_| next()).collect();
        let got = assign_nearest(&values, &cb, &mut counters());
        for (v, &g) in values.iter().zip(&got) {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, &c) in cents.iter().enumerate() {
                let d = (v - c).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(g as usize, best);
        }
    }

    #[test]
    fn assign_nearest_idempotent_on_dequantized_inliers() {
        let cb = Codebook::new(2, vec![-0.9, -0.2, 0.3, 0.8]).unwrap();
        let mut c = counters();
        let values = [-1.0, -0.5, 0.0, 0.25, 0.31, 0.9];
        let first = assign_nearest(&values, &cb, &mut c);
        let dequant: Vec<f64> = first.iter().map(|&i| cb.centroid(i)).collect();
        let second = assign_nearest(&dequant, &cb, &mut c);
        assert_eq!(first, second);
    }

    fn simple_stats() -> CalibrationStats {
        let cb = Codebook::new(
            2,
            vec![-0.75, -0.25, 0.25, 0.75],
        )
        .unwrap();
        CalibrationStats::new(cb, 1.0, -1.0, 1.0).unwrap()
    }

    #[test]
    fn dynamic_split_pops_exact_fraction() {
        let mut state = 5u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64) / (1u64 << 31) as f64 - 0.5
        };
        let x: Vec<f64> = (0..1000).map(|_| next()).collect();
        let cfg = QuantConfig::default();
        let q = quantize_token(&x, &simple_stats(), &cfg, &mut counters()).unwrap();
        // 0.5% of 1000 = 5 per side, distinct values so the union is 10
        assert_eq!(q.outliers().len(), 10);
        // every outlier is at least as extreme as every inlier
        let dense = dequantize_vector(&q);
        let max_inlier = (0..x.len())
            .filter(|p| !q.outliers().contains(*p))
            .map(|p| x[p])
            .fold(f64::NEG_INFINITY, f64::max);
        let min_inlier = (0..x.len())
            .filter(|p| !q.outliers().contains(*p))
            .map(|p| x[p])
            .fold(f64::INFINITY, f64::min);
        for &(_, v) in q.outliers().entries() {
            assert!(v >= max_inlier || v <= min_inlier);
        }
        assert_eq!(dense.cols(), 1000);
    }

    #[test]
    fn spike_lands_in_outliers_and_leaves_scale_alone() {
        let mut x = vec![0.5; 16];
        x[3] = 1000.0;
        x[7] = -0.25;
        let cfg = QuantConfig {
            outlier_fraction_each_side: 0.05, // ceil(0.8) = 1 per side
            ..QuantConfig::default()
        };
        let q = quantize_token(&x, &simple_stats(), &cfg, &mut counters()).unwrap();
        assert!(q.outliers().contains(3));
        assert!(q.scale() <= 0.5 + 1e-12);
        // outlier positions dequantize exactly
        let dense = dequantize_vector(&q);
        assert_eq!(dense.values()[3], 1000.0);
    }

    #[test]
    fn degenerate_token_gets_unit_scale() {
        let x = vec![0.0; 8];
        let cfg = QuantConfig {
            outlier_fraction_each_side: 0.0,
            ..QuantConfig::default()
        };
        let q = quantize_token(&x, &simple_stats(), &cfg, &mut counters()).unwrap();
        assert_eq!(q.scale(), 1.0);
        // zero is midway between centroids 1 and 2; the tie lands on 1
        assert!(q.indices().iter().all(|&i| i == 1));
    }

    #[test]
    fn reconstruction_error_within_codebook_gap_bound() {
        // bound derived from the trained codebook: half the widest gap between
        // adjacent centroids, or the slack past the extreme centroids for
        // boundary elements, whichever is larger, times the token scale
        let mut state = 0x5eedu64;
        let mut unit = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        };
        let x: Vec<f64> = (0..400)
            .map(|_| {
                let (u1, u2) = (unit(), unit());
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let cfg = QuantConfig::default();
        let stats = calibrate(&[x.clone()], &cfg, &mut counters()).unwrap();
        let q = quantize_token(&x, &stats, &cfg, &mut counters()).unwrap();
        let dense = dequantize_vector(&q);

        let cents = stats.centroids.centroids();
        let half_gap = cents.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max) / 2.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &v) in x.iter().enumerate() {
            if !q.outliers().contains(i) {
                lo = lo.min(v / q.scale());
                hi = hi.max(v / q.scale());
            }
        }
        let boundary = (cents[0] - lo).max(hi - cents[cents.len() - 1]).max(0.0);
        let bound = q.scale() * half_gap.max(boundary);

        for (i, (&got, &want)) in dense.values().iter().zip(&x).enumerate() {
            let err = (got - want).abs();
            if q.outliers().contains(i) {
                assert_eq!(err, 0.0, "outlier position {i} must be exact");
            } else {
                assert!(err <= bound * (1.0 + 1e-12), "position {i}: {err} > {bound}");
            }
        }
    }

    #[test]
    fn static_mode_uses_thresholds_and_calibrated_scale() {
        let stats = simple_stats(); // thresholds [-1, 1], scale 1
        let x = vec![0.3, -2.0, 0.9, 1.5, 0.0, -0.4, 0.2, 0.1];
        let cfg = QuantConfig {
            outlier_mode: OutlierMode::Static,
            ..QuantConfig::default()
        };
        let q = quantize_token(&x, &stats, &cfg, &mut counters()).unwrap();
        let popped: Vec<usize> = q.outliers().entries().iter().map(|e| e.0).collect();
        assert_eq!(popped, vec![1, 3]);
        assert_eq!(q.scale(), 1.0);
    }

    #[test]
    fn token_too_short_rejected() {
        let cfg = QuantConfig::default();
        assert!(matches!(
            quantize_token(&[1.0, 2.0, 3.0], &simple_stats(), &cfg, &mut counters()),
            Err(Error::TokenTooShort { len: 3, .. })
        ));
    }

    #[test]
    fn quantize_weights_one_bit_column() {
        let w = DenseMatrix::new(2, 1, vec![-2.0, 2.0]).unwrap();
        let q = quantize_weights(&w, 1, None, 50, 1e-9, &mut counters()).unwrap();
        assert_eq!(q.channel(0).scale, 2.0);
        assert_eq!(q.channel(0).codebook.centroids(), &[-1.0, 1.0]);
        assert_eq!(q.column_indices(0), &[0, 1]);
    }

    #[test]
    fn identical_columns_identical_records() {
        let w = DenseMatrix::new(3, 2, vec![0.5, 0.5, -1.5, -1.5, 2.5, 2.5]).unwrap();
        let q = quantize_weights(&w, 2, None, 50, 1e-9, &mut counters()).unwrap();
        assert_eq!(q.channel(0), q.channel(1));
        assert_eq!(q.column_indices(0), q.column_indices(1));
    }

    #[test]
    fn zero_column_gets_unit_scale() {
        let w = DenseMatrix::new(2, 1, vec![0.0, 0.0]).unwrap();
        let q = quantize_weights(&w, 2, None, 50, 1e-9, &mut counters()).unwrap();
        assert_eq!(q.channel(0).scale, 1.0);
        assert!(q.channel(0).codebook.centroids().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn per_channel_mse_beats_uniform_grid() {
        let mut state = 31u64;
        let mut unit = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        };
        let mut values = Vec::with_capacity(16 * 4);
        for _ in 0..16 * 4 {
            let (u1, u2) = (unit(), unit());
            values.push((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos());
        }
        let w = DenseMatrix::new(16, 4, values).unwrap();
        let q = quantize_weights(&w, 4, None, 100, 1e-10, &mut counters()).unwrap();
        let dq = crate::tensor::dequantize_matrix(&q);
        for n in 0..4 {
            let col = w.column(n);
            let rec = dq.column(n);
            let kmeans_mse: f64 = col
                .iter()
                .zip(&rec)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 16.0;
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let grid = oracle::uniform_grid_levels(lo, hi, 4);
            let uniform_mse =
                oracle::weighted_sse_to_levels(&col, &vec![1.0; 16], &grid) / 16.0;
            assert!(kmeans_mse <= uniform_mse + 1e-15);
        }
    }

    #[test]
    fn integer_quantize_endpoints_and_rounding() {
        let q = integer_quantize(&[0.0, 1.0], 0.0, 1.0, 4).unwrap();
        assert_eq!(q.indices(), &[0, 15]);
        assert_eq!(q.scale(), 1.0 / 15.0);
        assert_eq!(q.zero_point(), 0);
        // 0.5 / (1/15) = 7.5, ties to even -> 8
        let q = integer_quantize(&[0.5], 0.0, 1.0, 4).unwrap();
        assert_eq!(q.indices(), &[8]);
    }

    #[test]
    fn integer_quantize_error_bound_on_grid() {
        // exhaustive over a fine grid of the range
        let (lo, hi) = (-2.0, 3.0);
        for bits in [3u8, 4, 8] {
            let values: Vec<f64> = (0..=1000).map(|i| lo + (hi - lo) * i as f64 / 1000.0).collect();
            let q = integer_quantize(&values, lo, hi, bits).unwrap();
            for (i, &v) in values.iter().enumerate() {
                let err = (q.dequantized(i) - v).abs();
                assert!(
                    err <= q.scale() / 2.0 + 1e-12,
                    "bits={bits} v={v} err={err}"
                );
            }
        }
    }

    #[test]
    fn integer_quantize_rejects_bad_range() {
        assert!(matches!(
            integer_quantize(&[0.0], 1.0, 1.0, 4),
            Err(Error::BadRange { .. })
        ));
    }

    #[test]
    fn calibrate_single_token_reduces_to_plain_training() {
        let mut state = 77u64;
        let mut unit = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        };
        let token: Vec<f64> = (0..200)
            .map(|_| {
                let (u1, u2) = (unit(), unit());
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let cfg = QuantConfig::default();
        let stats = calibrate(&[token.clone()], &cfg, &mut counters()).unwrap();

        // recompute by hand: drop ceil(0.005*200)=1 top and 1 bottom, rescale, train
        let (maxima, minima) = oracle::sort_topk(&token, 1).unwrap();
        let drop = [maxima[0].0, minima[0].0];
        let inliers: Vec<f64> = token
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, &v)| v)
            .collect();
        let scale = inliers.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let scaled: Vec<f64> = inliers.iter().map(|v| v / scale).collect();
        let expect = weighted_kmeans_train(
            &scaled,
            &vec![1.0; scaled.len()],
            cfg.act_bits,
            cfg.kmeans_max_iters,
            cfg.kmeans_tol,
        )
        .unwrap();
        assert_eq!(stats.centroids, expect.codebook);
        assert_eq!(stats.static_scale, scale);
    }

    #[test]
    fn calibrate_thresholds_inside_pooled_range() {
        let tokens: Vec<Vec<f64>> = (0..4)
            .map(|t| (0..64).map(|i| ((i * 7 + t * 13) % 32) as f64 - 16.0).collect())
            .collect();
        let cfg = QuantConfig::default();
        let stats = calibrate(&tokens, &cfg, &mut counters()).unwrap();
        let global_min = tokens
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let global_max = tokens
            .iter()
            .flatten()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(stats.static_lower_threshold >= global_min);
        assert!(stats.static_upper_threshold <= global_max);
        assert!(stats.static_lower_threshold < stats.static_upper_threshold);
    }

    #[test]
    fn calibrate_empty_rejected() {
        assert!(matches!(
            calibrate(&[], &QuantConfig::default(), &mut counters()),
            Err(Error::EmptyInput)
        ));
    }
}
