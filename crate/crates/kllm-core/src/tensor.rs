//! Dense and quantized tensor types shared by every kernel.
//!
//! All arithmetic is double precision. Quantized types pair an integer index
//! payload with a centroid codebook and a scaling factor; a position's
//! represented value is `scale * centroids[index]`. Activation outliers are
//! kept out of the index payload as full-precision `(position, value)` pairs.
//! Every type is immutable after construction and validated on construction.

use crate::error::{Error, Result};

/// Row-major dense matrix of finite doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::BadShape {
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, values })
    }

    /// 1xK row vector.
    pub fn from_row(values: Vec<f64>) -> Result<Self> {
        let cols = values.len();
        Self::new(1, cols, values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    /// Column `col` gathered into a fresh vector.
    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, col)).collect()
    }

    pub fn transposed(&self) -> DenseMatrix {
        let mut values = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

/// Ordered dictionary of `2^precision_bits` centroid values for one quantized
/// tensor or channel. Centroids are kept sorted ascending; duplicates are only
/// produced when the training data has fewer distinct values than centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    precision_bits: u8,
    centroids: Vec<f64>,
}

impl Codebook {
    /// Canonical constructor: centroids must be sorted ascending. Every
    /// trained codebook is canonical, which makes structural equality and
    /// binary-search assignment valid.
    pub fn new(precision_bits: u8, centroids: Vec<f64>) -> Result<Self> {
        if centroids.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::UnsortedCodebook);
        }
        Self::from_values(precision_bits, centroids)
    }

    /// Constructor without the canonical-order check, for codebooks produced
    /// by rewriting a trained codebook through a (possibly non-monotone)
    /// function while the index payload stays fixed. Not valid as a
    /// nearest-assignment target.
    pub fn from_values(precision_bits: u8, centroids: Vec<f64>) -> Result<Self> {
        if precision_bits == 0 || precision_bits > 8 {
            return Err(Error::BadPrecision(precision_bits));
        }
        let expected = 1usize << precision_bits;
        if centroids.len() != expected {
            return Err(Error::BadCodebookLen {
                expected,
                got: centroids.len(),
            });
        }
        if let Some(i) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            precision_bits,
            centroids,
        })
    }

    pub fn is_sorted_ascending(&self) -> bool {
        self.centroids.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn precision_bits(&self) -> u8 {
        self.precision_bits
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, index: u8) -> f64 {
        self.centroids[index as usize]
    }
}

/// Sparse full-precision component of a quantized token: the activation
/// elements excluded from quantization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutlierSet {
    entries: Vec<(usize, f64)>,
}

impl OutlierSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<(usize, f64)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::UnsortedOutliers);
        }
        if let Some((i, _)) = entries.iter().enumerate().find(|(_, e)| !e.1.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.entries.binary_search_by_key(&position, |e| e.0).is_ok()
    }
}

/// Designated index stored at outlier positions of the index payload. The
/// entry is masked by the [`OutlierSet`] and ignored by compute; it keeps the
/// payload rectangular.
pub const FILLER_INDEX: u8 = 0;

/// One K-Means-quantized activation token.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    indices: Vec<u8>,
    codebook: Codebook,
    scale: f64,
    outliers: OutlierSet,
}

impl QuantizedVector {
    /// Outlier positions in `indices` are normalized to [`FILLER_INDEX`].
    pub fn new(
        mut indices: Vec<u8>,
        codebook: Codebook,
        scale: f64,
        outliers: OutlierSet,
    ) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::BadScale(scale));
        }
        let limit = codebook.len();
        for &idx in &indices {
            if idx as usize >= limit {
                return Err(Error::IndexOutOfRange {
                    index: idx as u16,
                    bits: codebook.precision_bits(),
                });
            }
        }
        for &(p, _) in outliers.entries() {
            if p >= indices.len() {
                return Err(Error::OutlierOutOfRange {
                    position: p,
                    length: indices.len(),
                });
            }
            indices[p] = FILLER_INDEX;
        }
        Ok(Self {
            indices,
            codebook,
            scale,
            outliers,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn outliers(&self) -> &OutlierSet {
        &self.outliers
    }
}

/// Per-output-channel quantization record of a weight matrix column.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQuant {
    pub codebook: Codebook,
    pub scale: f64,
}

/// Cartesian product of two codebooks' centroids: entry `(a << bits_b) | b`
/// holds `centroids_a[a] * centroids_b[b]`. Regenerable bit-exactly from the
/// two codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTable {
    bits_a: u8,
    bits_b: u8,
    values: Vec<f64>,
}

impl ProductTable {
    pub fn new(bits_a: u8, bits_b: u8, values: Vec<f64>) -> Result<Self> {
        if bits_a == 0 || bits_a > 8 {
            return Err(Error::BadPrecision(bits_a));
        }
        if bits_b == 0 || bits_b > 8 {
            return Err(Error::BadPrecision(bits_b));
        }
        let expected = 1usize << (bits_a + bits_b);
        if values.len() != expected {
            return Err(Error::BadShape {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            bits_a,
            bits_b,
            values,
        })
    }

    pub fn bits_a(&self) -> u8 {
        self.bits_a
    }

    pub fn bits_b(&self) -> u8 {
        self.bits_b
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Product tables persisted alongside a quantized weight matrix, computed
/// offline at quantization time against a known activation codebook. Channels
/// sharing a codebook share one table through `channel_map`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachedTables {
    channel_map: Vec<u32>,
    tables: Vec<ProductTable>,
}

impl AttachedTables {
    pub fn new(channel_map: Vec<u32>, tables: Vec<ProductTable>) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::EmptyInput);
        }
        for &t in &channel_map {
            if t as usize >= tables.len() {
                return Err(Error::IndexOutOfRange {
                    index: t as u16,
                    bits: 0,
                });
            }
        }
        Ok(Self {
            channel_map,
            tables,
        })
    }

    pub fn channel_map(&self) -> &[u32] {
        &self.channel_map
    }

    pub fn tables(&self) -> &[ProductTable] {
        &self.tables
    }

    pub fn table_for_channel(&self, channel: usize) -> &ProductTable {
        &self.tables[self.channel_map[channel] as usize]
    }
}

/// K-Means-quantized weight matrix with one codebook and scale per output
/// channel (column). Index payload is column-major; all channels share one
/// precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    indices: Vec<u8>,
    per_channel: Vec<ChannelQuant>,
    tables: Option<AttachedTables>,
}

impl QuantizedMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        indices: Vec<u8>,
        per_channel: Vec<ChannelQuant>,
    ) -> Result<Self> {
        if indices.len() != rows * cols {
            return Err(Error::BadShape {
                expected: rows * cols,
                got: indices.len(),
            });
        }
        if per_channel.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {cols} channel records, got {}",
                per_channel.len()
            )));
        }
        if cols > 0 {
            let bits = per_channel[0].codebook.precision_bits();
            for ch in &per_channel {
                if ch.codebook.precision_bits() != bits {
                    return Err(Error::ShapeMismatch(
                        "all columns must share one precision".to_string(),
                    ));
                }
                if !(ch.scale > 0.0 && ch.scale.is_finite()) {
                    return Err(Error::BadScale(ch.scale));
                }
            }
        }
        for (n, ch) in per_channel.iter().enumerate() {
            let limit = ch.codebook.len();
            for k in 0..rows {
                let idx = indices[n * rows + k];
                if idx as usize >= limit {
                    return Err(Error::IndexOutOfRange {
                        index: idx as u16,
                        bits: ch.codebook.precision_bits(),
                    });
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            indices,
            per_channel,
            tables: None,
        })
    }

    /// Attach offline-computed product tables (one `channel_map` entry per column).
    pub fn with_tables(mut self, tables: AttachedTables) -> Result<Self> {
        if tables.channel_map().len() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "channel map covers {} columns, matrix has {}",
                tables.channel_map().len(),
                self.cols
            )));
        }
        self.tables = Some(tables);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Column-major index payload.
    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn column_indices(&self, col: usize) -> &[u8] {
        &self.indices[col * self.rows..(col + 1) * self.rows]
    }

    pub fn index(&self, row: usize, col: usize) -> u8 {
        self.indices[col * self.rows + row]
    }

    pub fn per_channel(&self) -> &[ChannelQuant] {
        &self.per_channel
    }

    pub fn channel(&self, col: usize) -> &ChannelQuant {
        &self.per_channel[col]
    }

    pub fn precision_bits(&self) -> u8 {
        self.per_channel
            .first()
            .map(|c| c.codebook.precision_bits())
            .unwrap_or(0)
    }

    pub fn attached_tables(&self) -> Option<&AttachedTables> {
        self.tables.as_ref()
    }
}

/// Uniformly quantized vector: entry `i` represents
/// `scale * (indices[i] - zero_point)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerQuantizedVector {
    indices: Vec<u8>,
    precision_bits: u8,
    scale: f64,
    zero_point: u8,
}

impl IntegerQuantizedVector {
    pub fn new(indices: Vec<u8>, precision_bits: u8, scale: f64, zero_point: u8) -> Result<Self> {
        if precision_bits == 0 || precision_bits > 8 {
            return Err(Error::BadPrecision(precision_bits));
        }
        let limit = 1u16 << precision_bits;
        if (zero_point as u16) >= limit {
            return Err(Error::BadZeroPoint {
                zero_point,
                bits: precision_bits,
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::BadScale(scale));
        }
        for &idx in &indices {
            if (idx as u16) >= limit {
                return Err(Error::IndexOutOfRange {
                    index: idx as u16,
                    bits: precision_bits,
                });
            }
        }
        Ok(Self {
            indices,
            precision_bits,
            scale,
            zero_point,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn precision_bits(&self) -> u8 {
        self.precision_bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u8 {
        self.zero_point
    }

    pub fn dequantized(&self, i: usize) -> f64 {
        self.scale * (self.indices[i] as i32 - self.zero_point as i32) as f64
    }
}

/// Expand a quantized token to a 1xK dense row: `scale * centroids[index]` at
/// inlier positions, the stored full-precision value at outlier positions.
pub fn dequantize_vector(q: &QuantizedVector) -> DenseMatrix {
    let mut values: Vec<f64> = q
        .indices()
        .iter()
        .map(|&idx| q.scale() * q.codebook().centroid(idx))
        .collect();
    for &(p, v) in q.outliers().entries() {
        values[p] = v;
    }
    DenseMatrix::from_row(values).expect("quantized vector holds finite payload")
}

/// Expand a quantized weight matrix to dense form, column by column.
pub fn dequantize_matrix(q: &QuantizedMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(q.rows(), q.cols());
    for n in 0..q.cols() {
        let ch = q.channel(n);
        for k in 0..q.rows() {
            out.values[k * q.cols() + n] = ch.scale * ch.codebook.centroid(q.index(k, n));
        }
    }
    out
}
