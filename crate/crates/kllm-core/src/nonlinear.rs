//! Index-based nonlinear operators.
//!
//! A quantized token carries at most `2^n` distinct represented values, so an
//! element-wise function only needs `2^n` evaluations: rewrite the codebook,
//! keep the index payload untouched. Normalizations ride the same trick: the
//! squared codebook plus one index histogram turn the reduction into `2^n`
//! MACs regardless of token length, and the division by the denominator is
//! delayed into the scaling factor of the consuming MatMul. Outlier entries
//! stay full precision throughout and are handled element by element.

use crate::cost::{OpClass, OpCounters};
use crate::error::{Error, Result};
use crate::matmul::{count_distribution, reduce_weighted_sum};
use crate::oracle::guarded_sqrt;
use crate::tensor::{Codebook, OutlierSet, QuantizedVector};

/// Guard added inside the square root for zero/near-zero denominators.
pub const NORM_EPSILON: f64 = 1e-6;

/// A normalization denominator folded into downstream scaling factors instead
/// of divided into each element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedScale {
    /// Multiplier for the consuming MatMul's output scale, e.g. `1/RMS`.
    pub multiplier: f64,
    /// Token this scale belongs to.
    pub token: u64,
}

impl FusedScale {
    pub fn new(multiplier: f64) -> Result<Self> {
        if !multiplier.is_finite() || multiplier == 0.0 {
            return Err(Error::BadScale(multiplier));
        }
        Ok(Self {
            multiplier,
            token: 0,
        })
    }

    pub fn for_token(mut self, token: u64) -> Self {
        self.token = token;
        self
    }
}

/// Rewrite a quantized token through an element-wise function: the output
/// shares the input's index payload bit-for-bit, its codebook holds
/// `f(scale * centroid)` with scale 1, and outlier entries are mapped one by
/// one. Charges `eval_class` once per centroid and once per outlier.
pub fn codebook_map(
    q: &QuantizedVector,
    f: impl Fn(f64) -> f64,
    eval_class: OpClass,
    counters: &mut OpCounters,
) -> Result<QuantizedVector> {
    let mapped: Vec<f64> = q
        .codebook()
        .centroids()
        .iter()
        .map(|&c| {
            let v = f(q.scale() * c);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteMap {
                    centroid: q.scale() * c,
                })
            }
        })
        .collect::<Result<_>>()?;
    counters.add(eval_class, q.codebook().len() as u64);

    let outliers: Vec<(usize, f64)> = q
        .outliers()
        .entries()
        .iter()
        .map(|&(p, v)| {
            let fv = f(v);
            if fv.is_finite() {
                Ok((p, fv))
            } else {
                Err(Error::NonFiniteMap { centroid: v })
            }
        })
        .collect::<Result<_>>()?;
    counters.add(eval_class, q.outliers().len() as u64);

    QuantizedVector::new(
        q.indices().to_vec(),
        Codebook::from_values(q.codebook().precision_bits(), mapped)?,
        1.0,
        OutlierSet::new(outliers)?,
    )
}

/// Mean of squares over the represented token, computed through the index
/// path: square the scaled codebook (`2^n` squares), histogram the indices,
/// one weighted sum (`2^n` MACs), exact per-element squares and accumulates
/// for the outliers.
fn mean_square(q: &QuantizedVector, counters: &mut OpCounters) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::EmptyInput);
    }
    let squared: Vec<f64> = q
        .codebook()
        .centroids()
        .iter()
        .map(|&c| {
            let v = q.scale() * c;
            v * v
        })
        .collect();
    counters.add(OpClass::Square, squared.len() as u64);

    let hist = masked_histogram(q, counters)?;
    let inlier_sum = reduce_weighted_sum(&hist, &squared, 1.0, counters)?;

    let mut outlier_sum = 0.0;
    for &(_, v) in q.outliers().entries() {
        outlier_sum += v * v;
    }
    counters.add(OpClass::Square, q.outliers().len() as u64);
    counters.add(OpClass::FpMac, q.outliers().len() as u64);

    Ok((inlier_sum + outlier_sum) / q.len() as f64)
}

/// Index histogram of the token with the filler entries of outlier positions
/// subtracted back out.
fn masked_histogram(
    q: &QuantizedVector,
    counters: &mut OpCounters,
) -> Result<crate::matmul::IndexHistogram> {
    let wide: Vec<u16> = q.indices().iter().map(|&i| i as u16).collect();
    let mut hist = count_distribution(&wide, q.codebook().precision_bits(), counters)?;
    for &(p, _) in q.outliers().entries() {
        hist.subtract_one(q.indices()[p] as usize);
    }
    Ok(hist)
}

/// Root mean square of the represented token. Returns 0 for a zero token; the
/// caller substitutes the epsilon guard.
pub fn rms_denominator(q: &QuantizedVector, counters: &mut OpCounters) -> Result<f64> {
    Ok(mean_square(q, counters)?.sqrt())
}

/// RMS normalization with the division delayed: the token itself is left
/// untouched and the consuming MatMul multiplies its output scale by the
/// returned `1/RMS`.
pub fn rmsnorm_fused(q: &QuantizedVector, counters: &mut OpCounters) -> Result<FusedScale> {
    let ms = mean_square(q, counters)?;
    FusedScale::new(1.0 / guarded_sqrt(ms, NORM_EPSILON))
}

/// LayerNorm through the index path: mean and variance from two weighted sums
/// over the (squared) codebook, the mean subtraction folded into a codebook
/// shift, and `1/std` returned as the fused scale.
pub fn layernorm_fused(
    q: &QuantizedVector,
    counters: &mut OpCounters,
) -> Result<(QuantizedVector, FusedScale)> {
    if q.len() < 2 {
        return Err(Error::TokenTooShort {
            len: q.len(),
            min: 2,
        });
    }
    let n = q.len() as f64;

    let scaled: Vec<f64> = q
        .codebook()
        .centroids()
        .iter()
        .map(|&c| q.scale() * c)
        .collect();
    let squared: Vec<f64> = scaled.iter().map(|&v| v * v).collect();
    counters.add(OpClass::Square, squared.len() as u64);

    let hist = masked_histogram(q, counters)?;
    let inlier_sum = reduce_weighted_sum(&hist, &scaled, 1.0, counters)?;
    let inlier_sq = reduce_weighted_sum(&hist, &squared, 1.0, counters)?;

    let mut outlier_sum = 0.0;
    let mut outlier_sq = 0.0;
    for &(_, v) in q.outliers().entries() {
        outlier_sum += v;
        outlier_sq += v * v;
    }
    counters.add(OpClass::Square, q.outliers().len() as u64);
    counters.add(OpClass::FpMac, 2 * q.outliers().len() as u64);

    let mean = (inlier_sum + outlier_sum) / n;
    let variance = ((inlier_sq + outlier_sq) / n - mean * mean).max(0.0);
    let denom = guarded_sqrt(variance, NORM_EPSILON);

    let shifted = codebook_map(q, |v| v - mean, OpClass::FpAdd, counters)?;
    Ok((shifted, FusedScale::new(1.0 / denom)?))
}

/// Fold a per-input-channel gain into the weight matrix rows before
/// quantization: row `k` of the result is `gamma[k]` times row `k` of `w`.
/// Offline preprocessing, not a modeled kernel.
pub fn fold_gain_into_weights(
    gamma: &[f64],
    w: &crate::DenseMatrix,
) -> Result<crate::DenseMatrix> {
    if gamma.len() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "gain length {} vs {} rows",
            gamma.len(),
            w.rows()
        )));
    }
    let mut values = Vec::with_capacity(w.rows() * w.cols());
    for k in 0..w.rows() {
        for c in 0..w.cols() {
            values.push(gamma[k] * w.get(k, c));
        }
    }
    crate::DenseMatrix::new(w.rows(), w.cols(), values)
}

/// Constant output row contributed by a normalization shift `beta` through
/// the weights: `beta . w`. Offline preprocessing for the bias path.
pub fn bias_output_row(beta: &[f64], w: &crate::DenseMatrix) -> Result<crate::DenseMatrix> {
    if beta.len() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "bias length {} vs {} rows",
            beta.len(),
            w.rows()
        )));
    }
    let mut out = vec![0.0; w.cols()];
    for (n, slot) in out.iter_mut().enumerate() {
        *slot = (0..w.rows()).map(|k| beta[k] * w.get(k, n)).sum();
    }
    crate::DenseMatrix::from_row(out)
}
