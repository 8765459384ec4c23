//! Deterministic inputs shared by the benchmarks.

use vcl_core::{Scalar, Tensor};

/// A `rows x cols` tensor of smooth pseudo-random values in `[-1, 1]`.
pub fn filled<S: Scalar>(rows: usize, cols: usize, salt: f64) -> Tensor<S> {
    let data: Vec<f64> = (0..rows * cols).map(|i| ((i as f64 + salt) * 12.9898).sin()).collect();
    Tensor::from_f64([rows, cols], &data).expect("shape matches data")
}
