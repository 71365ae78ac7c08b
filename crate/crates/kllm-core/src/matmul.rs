//! Index-based MatMul kernels.
//!
//! A dot product over quantized operands is computed without dequantizing the
//! payloads: concatenate the operand indices position by position, tally the
//! distribution of the concatenated indices, then take one weighted sum of
//! the tallies against the precomputed Cartesian product of the two
//! codebooks. The reduction cost per output column drops from K MACs to
//! `2^(bits_a + bits_b)`; with an integer-quantized operand the histogram is
//! keyed by the K-Means side alone and the reduction needs only `2^bits` MACs.
//! Activation outliers bypass the index path entirely through a sparse
//! full-precision multiply whose result is summed into the dense partial.

use crate::cost::{OpClass, OpCounters};
use crate::error::{Error, Result};
use crate::tensor::{
    Codebook, DenseMatrix, IntegerQuantizedVector, OutlierSet, ProductTable, QuantizedMatrix,
    QuantizedVector,
};
use std::collections::HashMap;

/// Tally of index occurrences. Plain counting keeps non-negative bins summing
/// to the reduction length; integer-weighted counting can carry negative bins
/// when the integer operand has a nonzero zero point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexHistogram {
    bins: Vec<i64>,
}

impl IndexHistogram {
    pub fn bins(&self) -> &[i64] {
        &self.bins
    }

    pub fn mass(&self) -> i64 {
        self.bins.iter().sum()
    }

    /// Remove one previously counted occurrence of `index`. Bookkeeping for
    /// masked positions, not a charged operation.
    pub fn subtract_one(&mut self, index: usize) {
        self.bins[index] -= 1;
    }
}

/// Multiply out the Cartesian product of two codebooks. Charges exactly
/// `2^(bits_a + bits_b)` multiplications; entry `(a << bits_b) | b` holds
/// `ca[a] * cb[b]`.
pub fn build_product_table(ca: &Codebook, cb: &Codebook, counters: &mut OpCounters) -> ProductTable {
    let bits_a = ca.precision_bits();
    let bits_b = cb.precision_bits();
    let mut values = Vec::with_capacity(1 << (bits_a + bits_b));
    for &a in ca.centroids() {
        for &b in cb.centroids() {
            values.push(a * b);
        }
    }
    counters.add(OpClass::FpMul, 1 << (bits_a + bits_b));
    ProductTable::new(bits_a, bits_b, values).expect("sizes are consistent by construction")
}

/// Element-wise index concatenation: entry k is `a[k] * 2^bits_b + b[k]`.
/// Charges one concat op per position.
pub fn concat_indices(
    a_idx: &[u8],
    b_idx: &[u8],
    bits_b: u8,
    counters: &mut OpCounters,
) -> Result<Vec<u16>> {
    if a_idx.len() != b_idx.len() {
        return Err(Error::LengthMismatch(format!(
            "{} vs {} indices",
            a_idx.len(),
            b_idx.len()
        )));
    }
    let out = a_idx
        .iter()
        .zip(b_idx)
        .map(|(&a, &b)| ((a as u16) << bits_b) | b as u16)
        .collect();
    counters.add(OpClass::Concat, a_idx.len() as u64);
    Ok(out)
}

/// Index-distribution count over `2^bits` bins, one histogram increment per
/// position. Emulates the 16-input one-hot counter by tallying in chunks of
/// 16; the result is the plain multiplicity of each index.
pub fn count_distribution(
    concatenated: &[u16],
    bits: u8,
    counters: &mut OpCounters,
) -> Result<IndexHistogram> {
    let limit = 1u32 << bits;
    let mut bins = vec![0i64; limit as usize];
    for chunk in concatenated.chunks(16) {
        for &idx in chunk {
            if (idx as u32) >= limit {
                return Err(Error::IndexOutOfRange { index: idx, bits });
            }
            bins[idx as usize] += 1;
        }
    }
    counters.add(OpClass::HistogramIncrement, concatenated.len() as u64);
    Ok(IndexHistogram { bins })
}

/// Integer-weighted index distribution: `bins[indices[k]] += weights[k]`.
/// One histogram increment per position; bins may go negative when weights
/// carry a zero-point offset.
pub fn count_weighted_distribution(
    indices: &[u8],
    bits: u8,
    weights: &[i64],
    counters: &mut OpCounters,
) -> Result<IndexHistogram> {
    if indices.len() != weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} indices vs {} weights",
            indices.len(),
            weights.len()
        )));
    }
    let limit = 1u16 << bits;
    let mut bins = vec![0i64; limit as usize];
    for chunk in indices.chunks(16).zip(weights.chunks(16)) {
        for (&idx, &w) in chunk.0.iter().zip(chunk.1) {
            if (idx as u16) >= limit {
                return Err(Error::IndexOutOfRange {
                    index: idx as u16,
                    bits,
                });
            }
            bins[idx as usize] += w;
        }
    }
    counters.add(OpClass::HistogramIncrement, indices.len() as u64);
    Ok(IndexHistogram { bins })
}

/// Weighted sum of the histogram against the table (or codebook) values,
/// scaled. Charges one MAC per bin.
pub fn reduce_weighted_sum(
    hist: &IndexHistogram,
    values: &[f64],
    scale: f64,
    counters: &mut OpCounters,
) -> Result<f64> {
    if hist.bins.len() != values.len() {
        return Err(Error::LengthMismatch(format!(
            "{} bins vs {} values",
            hist.bins.len(),
            values.len()
        )));
    }
    let mut acc = 0.0;
    for (&count, &v) in hist.bins.iter().zip(values) {
        acc += count as f64 * v;
    }
    counters.add(OpClass::FpMac, values.len() as u64);
    Ok(scale * acc)
}

/// Cache of product tables keyed by codebook contents, so channels sharing a
/// codebook share one table and its one-time build cost.
#[derive(Debug, Default)]
pub struct TableCache {
    map: HashMap<(CodebookKey, CodebookKey), ProductTable>,
    builds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CodebookKey {
    bits: u8,
    centroid_bits: Vec<u64>,
}

impl CodebookKey {
    fn of(cb: &Codebook) -> Self {
        Self {
            bits: cb.precision_bits(),
            centroid_bits: cb.centroids().iter().map(|c| c.to_bits()).collect(),
        }
    }
}

impl TableCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tables built (not adopted) through this cache.
    pub fn builds(&self) -> u64 {
        self.builds
    }

    pub fn get_or_build(
        &mut self,
        ca: &Codebook,
        cb: &Codebook,
        counters: &mut OpCounters,
    ) -> &ProductTable {
        let key = (CodebookKey::of(ca), CodebookKey::of(cb));
        if !self.map.contains_key(&key) {
            let table = build_product_table(ca, cb, counters);
            self.builds += 1;
            self.map.insert(key.clone(), table);
        }
        &self.map[&key]
    }

    /// Adopt an offline-built table after checking it regenerates bit-exactly
    /// from the two codebooks. The integrity check is not a modeled
    /// computation and charges nothing.
    pub fn adopt(&mut self, ca: &Codebook, cb: &Codebook, table: &ProductTable) -> Result<()> {
        if table.bits_a() != ca.precision_bits() || table.bits_b() != cb.precision_bits() {
            return Err(Error::TableMismatch);
        }
        let mut scratch = OpCounters::new();
        let rebuilt = build_product_table(ca, cb, &mut scratch);
        if rebuilt.values().iter().zip(table.values()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::TableMismatch);
        }
        self.map
            .insert((CodebookKey::of(ca), CodebookKey::of(cb)), table.clone());
        Ok(())
    }
}

fn check_dims(a_len: usize, b: &QuantizedMatrix) -> Result<()> {
    if a_len != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "vector length {} vs matrix rows {}",
            a_len,
            b.rows()
        )));
    }
    Ok(())
}

/// Index-based matvec over two K-Means-quantized operands. Every position is
/// treated as an inlier; outlier handling belongs to [`matmul_full`].
pub fn matvec_kk(
    a: &QuantizedVector,
    b: &QuantizedMatrix,
    cache: &mut TableCache,
    counters: &mut OpCounters,
) -> Result<DenseMatrix> {
    matvec_kk_masked(a, b, &OutlierSet::empty(), 1.0, cache, counters)
}

/// The dense-path kernel behind [`matvec_kk`] and [`matmul_full`]: positions
/// listed in `skip` keep their filler index in the branch-free counting pass
/// and have their contribution subtracted from the histogram afterwards.
/// `extra_scale` folds a fused normalization denominator into the output
/// scaling factor.
fn matvec_kk_masked(
    a: &QuantizedVector,
    b: &QuantizedMatrix,
    skip: &OutlierSet,
    extra_scale: f64,
    cache: &mut TableCache,
    counters: &mut OpCounters,
) -> Result<DenseMatrix> {
    check_dims(a.len(), b)?;
    if let Some(attached) = b.attached_tables() {
        for n in 0..b.cols() {
            cache.adopt(
                a.codebook(),
                &b.channel(n).codebook,
                attached.table_for_channel(n),
            )?;
        }
    }
    let bits_total = a.codebook().precision_bits() + b.precision_bits();
    let mut out = Vec::with_capacity(b.cols());
    for n in 0..b.cols() {
        let ch = b.channel(n);
        let concatenated = concat_indices(
            a.indices(),
            b.column_indices(n),
            ch.codebook.precision_bits(),
            counters,
        )?;
        let mut hist = count_distribution(&concatenated, bits_total, counters)?;
        for &(p, _) in skip.entries() {
            hist.bins[concatenated[p] as usize] -= 1;
        }
        let table = cache.get_or_build(a.codebook(), &ch.codebook, counters);
        let scale = a.scale() * ch.scale * extra_scale;
        out.push(reduce_weighted_sum(&hist, table.values(), scale, counters)?);
    }
    DenseMatrix::from_row(out)
}

/// Index-based matvec with an integer-quantized vector against a
/// K-Means-quantized matrix. The histogram is keyed by the matrix column's
/// indices and incremented by the integer operand's zero-point-corrected
/// values, so each column reduces in `2^bits_b` MACs.
pub fn matvec_intk(
    a: &IntegerQuantizedVector,
    b: &QuantizedMatrix,
    counters: &mut OpCounters,
) -> Result<DenseMatrix> {
    check_dims(a.len(), b)?;
    let weights: Vec<i64> = a
        .indices()
        .iter()
        .map(|&i| i as i64 - a.zero_point() as i64)
        .collect();
    let mut out = Vec::with_capacity(b.cols());
    for n in 0..b.cols() {
        let ch = b.channel(n);
        let hist = count_weighted_distribution(
            b.column_indices(n),
            ch.codebook.precision_bits(),
            &weights,
            counters,
        )?;
        let scale = a.scale() * ch.scale;
        out.push(reduce_weighted_sum(
            &hist,
            ch.codebook.centroids(),
            scale,
            counters,
        )?);
    }
    DenseMatrix::from_row(out)
}

/// Sparse full-precision path: multiply the outlier values against the
/// dequantized matrix rows they select. Charges one lookup, one multiply and
/// one add per (outlier, column) pair.
pub fn sparse_outlier_matvec(
    outliers: &OutlierSet,
    b: &QuantizedMatrix,
    counters: &mut OpCounters,
) -> Result<DenseMatrix> {
    sparse_outlier_matvec_scaled(outliers, b, 1.0, counters)
}

fn sparse_outlier_matvec_scaled(
    outliers: &OutlierSet,
    b: &QuantizedMatrix,
    extra_scale: f64,
    counters: &mut OpCounters,
) -> Result<DenseMatrix> {
    for &(p, _) in outliers.entries() {
        if p >= b.rows() {
            return Err(Error::OutlierOutOfRange {
                position: p,
                length: b.rows(),
            });
        }
    }
    let mut out = vec![0.0; b.cols()];
    for (n, slot) in out.iter_mut().enumerate() {
        let ch = b.channel(n);
        let mut acc = 0.0;
        for &(p, v) in outliers.entries() {
            acc += v * (ch.scale * ch.codebook.centroid(b.index(p, n)));
        }
        *slot = acc * extra_scale;
    }
    let pairs = (outliers.len() * b.cols()) as u64;
    counters.add(OpClass::Lookup, pairs);
    counters.add(OpClass::FpMul, pairs);
    counters.add(OpClass::FpAdd, pairs);
    DenseMatrix::from_row(out)
}

/// Full MatMul flow: the quantized inlier component runs through the index
/// path (outlier positions subtracted from the histogram), the outlier
/// component through the sparse path, and the partials sum into the output.
pub fn matmul_full(
    a: &QuantizedVector,
    b: &QuantizedMatrix,
    cache: &mut TableCache,
    counters: &mut OpCounters,
) -> Result<DenseMatrix> {
    matmul_full_scaled(a, b, 1.0, cache, counters)
}

/// [`matmul_full`] with a fused output-scale multiplier (delayed
/// normalization division). The multiplier rides the scaling factors of both
/// paths; no per-element work is added.
pub fn matmul_full_scaled(
    a: &QuantizedVector,
    b: &QuantizedMatrix,
    extra_scale: f64,
    cache: &mut TableCache,
    counters: &mut OpCounters,
) -> Result<DenseMatrix> {
    let dense = matvec_kk_masked(a, b, a.outliers(), extra_scale, cache, counters)?;
    let sparse = sparse_outlier_matvec_scaled(a.outliers(), b, extra_scale, counters)?;
    let values = dense
        .values()
        .iter()
        .zip(sparse.values())
        .map(|(d, s)| d + s)
        .collect();
    DenseMatrix::from_row(values)
}
