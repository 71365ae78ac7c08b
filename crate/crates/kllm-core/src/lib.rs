//! Index-based compute kernels for K-Means-quantized weights and activations.
//!
//! Quantized MatMuls run without dequantizing their operands: operand indices
//! are concatenated, their distribution is counted, and one weighted sum over
//! the precomputed centroid-product table produces each output value.
//! Element-wise nonlinearities and normalizations ride the same index
//! machinery through codebook rewriting and delayed-division scale fusion.
//! Per-token activation outliers are detected by a two-fold tournament tree
//! and kept in full precision on a sparse side path. Every kernel charges its
//! work to an operation-counting cost model, and everything is checkable
//! against plain dense references at desk scale.

pub mod container;
pub mod cost;
pub mod error;
pub mod matmul;
pub mod nonlinear;
pub mod oracle;
pub mod orizuru;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{
    dequantize_matrix, dequantize_vector, AttachedTables, ChannelQuant, Codebook, DenseMatrix,
    IntegerQuantizedVector, OutlierSet, ProductTable, QuantizedMatrix, QuantizedVector,
};
