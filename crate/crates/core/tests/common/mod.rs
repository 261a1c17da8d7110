//! Independent reference implementations shared by the integration suites.

#![allow(dead_code)]

use mirror_align::{Matrix, SeededSampler};

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededSampler) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0)).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Bidirectional InfoNCE written term by term: plain exponentials, no
/// max subtraction, explicit sums.
pub fn naive_align_loss(zu: &Matrix, ze: &Matrix, tau: f64) -> f64 {
    let b = zu.rows();
    let mut total = 0.0;
    for i in 0..b {
        let pos = (cosine(zu.row(i), ze.row(i)) / tau).exp();
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..b {
            row += (cosine(zu.row(i), ze.row(j)) / tau).exp();
            col += (cosine(zu.row(j), ze.row(i)) / tau).exp();
        }
        total += -(pos / row).ln() - (pos / col).ln();
    }
    total / (2.0 * b as f64)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &v)| {
            let mut r = row.clone();
            r.push(v);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

/// Least-squares `x` minimizing `‖a x − y‖` through the normal equations.
#[allow(clippy::needless_range_loop)]
pub fn least_squares(a: &Matrix, y: &[f64]) -> Vec<f64> {
    let n = a.cols();
    let mut ata = vec![vec![0.0; n]; n];
    let mut aty = vec![0.0; n];
    for r in 0..a.rows() {
        let row = a.row(r);
        for i in 0..n {
            aty[i] += row[i] * y[r];
            for j in 0..n {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    solve(&ata, &aty)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
