//! Benchmark fixtures shared by the criterion targets.

use mirror_align::{Matrix, SeededSampler};

/// A `rows × cols` matrix of standard normal entries.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededSampler::new(seed);
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0))
        .expect("shape matches data length")
}
