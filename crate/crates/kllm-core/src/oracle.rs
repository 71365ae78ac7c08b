//! Independent dense reference implementations.
//!
//! Everything here exists to check the index-based engine from the outside:
//! naive sequential accumulation, sort-based selection, enumeration. None of
//! these functions share code or data walks with the engine they verify.

use crate::error::{Error, Result};

/// Plain dense matvec: `y[n] = sum_k a[k] * b[k][n]`, accumulated in input
/// order, one column at a time.
pub fn dense_matvec(a: &crate::DenseMatrix, b: &crate::DenseMatrix) -> Result<crate::DenseMatrix> {
    if a.rows() != 1 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} . {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = vec![0.0; b.cols()];
    for (n, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..b.rows() {
            acc += a.values()[k] * b.get(k, n);
        }
        *slot = acc;
    }
    crate::DenseMatrix::from_row(out)
}

/// The k largest and k smallest entries of `x` with their positions, stable
/// under ties (lower position first).
pub fn sort_topk(x: &[f64], k: usize) -> Result<(Vec<(usize, f64)>, Vec<(usize, f64)>)> {
    if 2 * k > x.len() {
        return Err(Error::KTooLarge { k, n: x.len() });
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    // descending by value, ascending by position on ties
    order.sort_by(|&i, &j| {
        x[j].partial_cmp(&x[i])
            .expect("finite input")
            .then(i.cmp(&j))
    });
    let maxima = order[..k].iter().map(|&i| (i, x[i])).collect();
    let mut asc: Vec<usize> = (0..x.len()).collect();
    asc.sort_by(|&i, &j| {
        x[i].partial_cmp(&x[j])
            .expect("finite input")
            .then(i.cmp(&j))
    });
    let minima = asc[..k].iter().map(|&i| (i, x[i])).collect();
    Ok((maxima, minima))
}

/// Tally of each index value in `0..2^bits`.
pub fn naive_histogram(indices: &[u16], bits: u8) -> Vec<i64> {
    let mut bins = vec![0i64; 1 << bits];
    for &i in indices {
        bins[i as usize] += 1;
    }
    bins
}

/// RMS normalization computed directly from the definition, with the shared
/// near-zero guard on the denominator.
pub fn rmsnorm_reference(x: &[f64], epsilon: f64) -> Vec<f64> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = guarded_sqrt(mean_sq, epsilon);
    x.iter().map(|v| v / denom).collect()
}

/// LayerNorm computed directly from the definition.
pub fn layernorm_reference(x: &[f64], epsilon: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = guarded_sqrt(var, epsilon);
    x.iter().map(|v| (v - mean) / denom).collect()
}

/// `sqrt(v)`, switching to `sqrt(v + epsilon)` only for zero/near-zero `v`.
pub fn guarded_sqrt(v: f64, epsilon: f64) -> f64 {
    if v > epsilon {
        v.sqrt()
    } else {
        (v + epsilon).sqrt()
    }
}

/// `2^bits` evenly spaced levels over `[lo, hi]`, endpoints included. The
/// uniform-grid comparator for quantizer-quality checks.
pub fn uniform_grid_levels(lo: f64, hi: f64, bits: u8) -> Vec<f64> {
    let m = 1usize << bits;
    if m == 1 || hi == lo {
        return vec![lo; m];
    }
    (0..m)
        .map(|i| lo + i as f64 * (hi - lo) / (m - 1) as f64)
        .collect()
}

/// Weighted sum of squared distances to each sample's nearest level.
pub fn weighted_sse_to_levels(samples: &[f64], weights: &[f64], levels: &[f64]) -> f64 {
    samples
        .iter()
        .zip(weights)
        .map(|(&x, &w)| {
            let d = levels
                .iter()
                .map(|&c| (x - c) * (x - c))
                .fold(f64::INFINITY, f64::min);
            w * d
        })
        .sum()
}

/// Globally optimal weighted 1-D k-means by enumeration of contiguous
/// partitions of the sorted samples. Only for tiny instances.
pub fn exhaustive_kmeans_1d(
    samples: &[f64],
    weights: &[f64],
    clusters: usize,
) -> Result<(Vec<f64>, f64)> {
    const MAX_SAMPLES: usize = 12;
    const MAX_CLUSTERS: usize = 4;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if samples.len() != weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} samples vs {} weights",
            samples.len(),
            weights.len()
        )));
    }
    if samples.len() > MAX_SAMPLES || clusters == 0 || clusters > MAX_CLUSTERS {
        return Err(Error::InvalidConfig(format!(
            "exhaustive search limited to {MAX_SAMPLES} samples and {MAX_CLUSTERS} clusters"
        )));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&i, &j| samples[i].partial_cmp(&samples[j]).unwrap());
    let xs: Vec<f64> = order.iter().map(|&i| samples[i]).collect();
    let ws: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    let m = xs.len();

    // weighted mean and SSE of the segment [i, j)
    let segment = |i: usize, j: usize| -> (f64, f64) {
        let w_total: f64 = ws[i..j].iter().sum();
        if w_total == 0.0 {
            return (xs[i], 0.0);
        }
        let mean = xs[i..j]
            .iter()
            .zip(&ws[i..j])
            .map(|(&x, &w)| w * x)
            .sum::<f64>()
            / w_total;
        let sse = xs[i..j]
            .iter()
            .zip(&ws[i..j])
            .map(|(&x, &w)| w * (x - mean) * (x - mean))
            .sum::<f64>();
        (mean, sse)
    };

    let mut best_sse = f64::INFINITY;
    let mut best: Vec<f64> = Vec::new();
    let k = clusters.min(m);
    // choose k-1 cut points among the m-1 gaps
    let mut cuts = vec![0usize; k - 1];
    fn walk(
        cuts: &mut Vec<usize>,
        depth: usize,
        start: usize,
        m: usize,
        segment: &dyn Fn(usize, usize) -> (f64, f64),
        best_sse: &mut f64,
        best: &mut Vec<f64>,
    ) {
        if depth == cuts.len() {
            let mut sse = 0.0;
            let mut centroids = Vec::with_capacity(cuts.len() + 1);
            let mut lo = 0usize;
            for &c in cuts.iter() {
                let (mean, s) = segment(lo, c);
                sse += s;
                centroids.push(mean);
                lo = c;
            }
            let (mean, s) = segment(lo, m);
            sse += s;
            centroids.push(mean);
            if sse < *best_sse {
                *best_sse = sse;
                *best = centroids;
            }
            return;
        }
        for c in start..m {
            cuts[depth] = c;
            walk(cuts, depth + 1, c + 1, m, segment, best_sse, best);
        }
    }
    if k == 1 {
        let (mean, sse) = segment(0, m);
        return Ok((vec![mean], sse));
    }
    walk(&mut cuts, 0, 1, m, &segment, &mut best_sse, &mut best);
    best.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((best, best_sse))
}
