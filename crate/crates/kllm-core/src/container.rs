//! The KLLM binary container format.
//!
//! Byte layout (all multi-byte fields little-endian, payloads packed):
//!
//! ```text
//! magic   4 bytes  "KLLM"
//! version u8       currently 1
//! tag     u8       record type, see below
//! ```
//!
//! followed by one record, header fields first, then raw payloads in field
//! declaration order. Indices are stored one byte each (precisions <= 8).
//!
//! ```text
//! tag 0  DenseMatrix             rows u64, cols u64,
//!                                values f64 x rows*cols (row-major)
//! tag 1  Codebook                bits u8, centroids f64 x 2^bits
//! tag 2  QuantizedVector         length u64, bits u8, outlier_count u64,
//!                                indices u8 x length, centroids f64 x 2^bits,
//!                                scale f64, outliers (pos u64, value f64) x count
//! tag 3  QuantizedMatrix         rows u64, cols u64, bits u8, table_count u64,
//!                                indices u8 x rows*cols (column-major),
//!                                per channel: centroids f64 x 2^bits, scale f64;
//!                                if table_count > 0:
//!                                  channel_map u64 x cols,
//!                                  per table: bits_a u8, bits_b u8,
//!                                             values f64 x 2^(bits_a+bits_b)
//! tag 4  IntegerQuantizedVector  length u64, bits u8, indices u8 x length,
//!                                scale f64, zero_point u8
//! tag 5  CalibrationStats        bits u8, centroids f64 x 2^bits,
//!                                upper f64, lower f64, scale f64
//! ```
//!
//! Round-trips are bit-exact; readers reject bad magic, unknown versions and
//! tags, truncated or oversized payloads, and out-of-range indices, each with
//! a distinct error.

use crate::error::{Error, Result};
use crate::quantizer::CalibrationStats;
use crate::tensor::{
    AttachedTables, ChannelQuant, Codebook, DenseMatrix, IntegerQuantizedVector, OutlierSet,
    ProductTable, QuantizedMatrix, QuantizedVector,
};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"KLLM";
pub const VERSION: u8 = 1;

/// One record of the KLLM container format.
#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Dense(DenseMatrix),
    Codebook(Codebook),
    QuantizedVector(QuantizedVector),
    QuantizedMatrix(QuantizedMatrix),
    IntegerVector(IntegerQuantizedVector),
    CalibrationStats(CalibrationStats),
}

impl Container {
    fn tag(&self) -> u8 {
        match self {
            Container::Dense(_) => 0,
            Container::Codebook(_) => 1,
            Container::QuantizedVector(_) => 2,
            Container::QuantizedMatrix(_) => 3,
            Container::IntegerVector(_) => 4,
            Container::CalibrationStats(_) => 5,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Container::Dense(_) => "DenseMatrix",
            Container::Codebook(_) => "Codebook",
            Container::QuantizedVector(_) => "QuantizedVector",
            Container::QuantizedMatrix(_) => "QuantizedMatrix",
            Container::IntegerVector(_) => "IntegerQuantizedVector",
            Container::CalibrationStats(_) => "CalibrationStats",
        }
    }

    pub fn into_dense(self) -> Result<DenseMatrix> {
        match self {
            Container::Dense(m) => Ok(m),
            other => Err(Error::WrongContainerType {
                expected: "DenseMatrix",
                got: other.type_name(),
            }),
        }
    }

    pub fn into_quantized_vector(self) -> Result<QuantizedVector> {
        match self {
            Container::QuantizedVector(v) => Ok(v),
            other => Err(Error::WrongContainerType {
                expected: "QuantizedVector",
                got: other.type_name(),
            }),
        }
    }

    pub fn into_quantized_matrix(self) -> Result<QuantizedMatrix> {
        match self {
            Container::QuantizedMatrix(m) => Ok(m),
            other => Err(Error::WrongContainerType {
                expected: "QuantizedMatrix",
                got: other.type_name(),
            }),
        }
    }

    pub fn into_integer_vector(self) -> Result<IntegerQuantizedVector> {
        match self {
            Container::IntegerVector(v) => Ok(v),
            other => Err(Error::WrongContainerType {
                expected: "IntegerQuantizedVector",
                got: other.type_name(),
            }),
        }
    }

    pub fn into_calibration_stats(self) -> Result<CalibrationStats> {
        match self {
            Container::CalibrationStats(s) => Ok(s),
            other => Err(Error::WrongContainerType {
                expected: "CalibrationStats",
                got: other.type_name(),
            }),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

/// Serialize a record to bytes.
pub fn to_bytes(c: &Container) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u8(VERSION);
    w.u8(c.tag());
    match c {
        Container::Dense(m) => {
            w.u64(m.rows() as u64);
            w.u64(m.cols() as u64);
            w.f64s(m.values());
        }
        Container::Codebook(cb) => {
            w.u8(cb.precision_bits());
            w.f64s(cb.centroids());
        }
        Container::QuantizedVector(q) => {
            w.u64(q.len() as u64);
            w.u8(q.codebook().precision_bits());
            w.u64(q.outliers().len() as u64);
            w.bytes(q.indices());
            w.f64s(q.codebook().centroids());
            w.f64(q.scale());
            for &(p, v) in q.outliers().entries() {
                w.u64(p as u64);
                w.f64(v);
            }
        }
        Container::QuantizedMatrix(m) => {
            w.u64(m.rows() as u64);
            w.u64(m.cols() as u64);
            w.u8(m.precision_bits());
            let tables = m.attached_tables();
            w.u64(tables.map_or(0, |t| t.tables().len()) as u64);
            w.bytes(m.indices());
            for ch in m.per_channel() {
                w.f64s(ch.codebook.centroids());
                w.f64(ch.scale);
            }
            if let Some(t) = tables {
                for &id in t.channel_map() {
                    w.u64(id as u64);
                }
                for table in t.tables() {
                    w.u8(table.bits_a());
                    w.u8(table.bits_b());
                    w.f64s(table.values());
                }
            }
        }
        Container::IntegerVector(q) => {
            w.u64(q.len() as u64);
            w.u8(q.precision_bits());
            w.bytes(q.indices());
            w.f64(q.scale());
            w.u8(q.zero_point());
        }
        Container::CalibrationStats(s) => {
            w.u8(s.centroids.precision_bits());
            w.f64s(s.centroids.centroids());
            w.f64(s.static_upper_threshold);
            w.f64(s.static_lower_threshold);
            w.f64(s.static_scale);
        }
    }
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                needed: self.pos + n - self.buf.len(),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn usize_of(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Truncated { needed: usize::MAX })
}

/// Parse a record from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tag = r.u8()?;
    let record = match tag {
        0 => {
            let rows = usize_of(r.u64()?)?;
            let cols = usize_of(r.u64()?)?;
            let values = r.f64s(rows.checked_mul(cols).ok_or(Error::Truncated {
                needed: usize::MAX,
            })?)?;
            Container::Dense(DenseMatrix::new(rows, cols, values)?)
        }
        1 => {
            let bits = r.u8()?;
            if bits == 0 || bits > 8 {
                return Err(Error::BadPrecision(bits));
            }
            let centroids = r.f64s(1 << bits)?;
            Container::Codebook(Codebook::from_values(bits, centroids)?)
        }
        2 => {
            let length = usize_of(r.u64()?)?;
            let bits = r.u8()?;
            if bits == 0 || bits > 8 {
                return Err(Error::BadPrecision(bits));
            }
            let n_outliers = usize_of(r.u64()?)?;
            let indices = r.take(length)?.to_vec();
            let centroids = r.f64s(1 << bits)?;
            let scale = r.f64()?;
            let mut entries = Vec::with_capacity(n_outliers);
            for _ in 0..n_outliers {
                let p = usize_of(r.u64()?)?;
                let v = r.f64()?;
                entries.push((p, v));
            }
            Container::QuantizedVector(QuantizedVector::new(
                indices,
                Codebook::from_values(bits, centroids)?,
                scale,
                OutlierSet::new(entries)?,
            )?)
        }
        3 => {
            let rows = usize_of(r.u64()?)?;
            let cols = usize_of(r.u64()?)?;
            let bits = r.u8()?;
            if bits == 0 || bits > 8 {
                return Err(Error::BadPrecision(bits));
            }
            let table_count = usize_of(r.u64()?)?;
            let indices = r
                .take(rows.checked_mul(cols).ok_or(Error::Truncated {
                    needed: usize::MAX,
                })?)?
                .to_vec();
            let mut per_channel = Vec::with_capacity(cols);
            for _ in 0..cols {
                let centroids = r.f64s(1 << bits)?;
                let scale = r.f64()?;
                per_channel.push(ChannelQuant {
                    codebook: Codebook::from_values(bits, centroids)?,
                    scale,
                });
            }
            let mut m = QuantizedMatrix::new(rows, cols, indices, per_channel)?;
            if table_count > 0 {
                let mut channel_map = Vec::with_capacity(cols);
                for _ in 0..cols {
                    channel_map.push(u32::try_from(r.u64()?).map_err(|_| Error::Truncated {
                        needed: usize::MAX,
                    })?);
                }
                let mut tables = Vec::with_capacity(table_count);
                for _ in 0..table_count {
                    let bits_a = r.u8()?;
                    let bits_b = r.u8()?;
                    if bits_a == 0 || bits_a > 8 {
                        return Err(Error::BadPrecision(bits_a));
                    }
                    if bits_b == 0 || bits_b > 8 {
                        return Err(Error::BadPrecision(bits_b));
                    }
                    let values = r.f64s(1 << (bits_a + bits_b))?;
                    tables.push(ProductTable::new(bits_a, bits_b, values)?);
                }
                m = m.with_tables(AttachedTables::new(channel_map, tables)?)?;
            }
            Container::QuantizedMatrix(m)
        }
        4 => {
            let length = usize_of(r.u64()?)?;
            let bits = r.u8()?;
            let indices = r.take(length)?.to_vec();
            let scale = r.f64()?;
            let zero_point = r.u8()?;
            Container::IntegerVector(IntegerQuantizedVector::new(indices, bits, scale, zero_point)?)
        }
        5 => {
            let bits = r.u8()?;
            if bits == 0 || bits > 8 {
                return Err(Error::BadPrecision(bits));
            }
            let centroids = r.f64s(1 << bits)?;
            let static_upper_threshold = r.f64()?;
            let static_lower_threshold = r.f64()?;
            let static_scale = r.f64()?;
            Container::CalibrationStats(CalibrationStats::new(
                Codebook::from_values(bits, centroids)?,
                static_upper_threshold,
                static_lower_threshold,
                static_scale,
            )?)
        }
        other => return Err(Error::UnknownTypeTag(other)),
    };
    if r.remaining() != 0 {
        return Err(Error::TrailingBytes(r.remaining()));
    }
    Ok(record)
}

pub fn write_container<P: AsRef<Path>>(path: P, record: &Container) -> Result<()> {
    std::fs::write(path, to_bytes(record))?;
    Ok(())
}

pub fn read_container<P: AsRef<Path>>(path: P) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_vector() -> QuantizedVector {
        let cb = Codebook::new(2, vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let outliers = OutlierSet::new(vec![(1, 42.0), (4, -17.5)]).unwrap();
        QuantizedVector::new(vec![0, 0, 3, 2, 0, 1], cb, 1.25, outliers).unwrap()
    }

    #[test]
    fn quantized_vector_round_trip() {
        let q = sample_vector();
        let bytes = to_bytes(&Container::QuantizedVector(q.clone()));
        let back = from_bytes(&bytes).unwrap().into_quantized_vector().unwrap();
        assert_eq!(q, back);
        // bit exactness: rewriting gives the identical byte stream
        assert_eq!(bytes, to_bytes(&Container::QuantizedVector(back)));
    }

    #[test]
    fn bad_magic_is_distinct() {
        let mut bytes = to_bytes(&Container::QuantizedVector(sample_vector()));
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn truncation_is_distinct() {
        let bytes = to_bytes(&Container::QuantizedVector(sample_vector()));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(from_bytes(cut), Err(Error::Truncated { .. })));
    }

    #[test]
    fn unsupported_version_and_unknown_tag() {
        let mut bytes = to_bytes(&Container::Codebook(
            Codebook::new(1, vec![0.0, 1.0]).unwrap(),
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(from_bytes(&v), Err(Error::UnsupportedVersion(9))));
        bytes[5] = 200;
        assert!(matches!(from_bytes(&bytes), Err(Error::UnknownTypeTag(200))));
    }

    #[test]
    fn corrupted_index_is_range_error() {
        let cb = Codebook::new(1, vec![0.0, 1.0]).unwrap();
        let q = QuantizedVector::new(vec![0, 1, 1], cb, 1.0, OutlierSet::empty()).unwrap();
        let mut bytes = to_bytes(&Container::QuantizedVector(q));
        // first index byte lives right after magic(4)+version+tag+len(8)+bits+outliers(8)
        let idx_offset = 4 + 1 + 1 + 8 + 1 + 8;
        bytes[idx_offset] = 7;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::IndexOutOfRange { index: 7, .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = to_bytes(&Container::Codebook(
            Codebook::new(1, vec![0.0, 1.0]).unwrap(),
        ));
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn matrix_with_tables_round_trip() {
        let mk = |c: Vec<f64>| ChannelQuant {
            codebook: Codebook::new(1, c).unwrap(),
            scale: 2.0,
        };
        let m = QuantizedMatrix::new(
            2,
            2,
            vec![0, 1, 1, 0],
            vec![mk(vec![-1.0, 1.0]), mk(vec![0.0, 3.0])],
        )
        .unwrap();
        let tables = AttachedTables::new(
            vec![0, 1],
            vec![
                ProductTable::new(1, 1, vec![1.0, -1.0, -1.0, 1.0]).unwrap(),
                ProductTable::new(1, 1, vec![0.0, -3.0, 0.0, 3.0]).unwrap(),
            ],
        )
        .unwrap();
        let m = m.with_tables(tables).unwrap();
        let bytes = to_bytes(&Container::QuantizedMatrix(m.clone()));
        let back = from_bytes(&bytes).unwrap().into_quantized_matrix().unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("kllm-container-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vec.kllm");
        let record = Container::QuantizedVector(sample_vector());
        write_container(&path, &record).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(record, back);
        std::fs::remove_file(&path).ok();
    }
}
