// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers and independent reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use headpursuit::{Dictionary, SignalMatrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn labels(v: usize) -> Vec<String> {
    (0..v).map(|j| format!("t{j}")).collect()
}

pub fn random_dict(rng: &mut impl Rng, v: usize, d: usize) -> Dictionary {
    Dictionary::new(gaussian(rng, v, d), labels(v)).expect("gaussian atoms are nonzero")
}

pub fn random_signal(rng: &mut impl Rng, n: usize, d: usize) -> SignalMatrix {
    SignalMatrix::new(gaussian(rng, n, d)).expect("finite")
}

/// `v` orthonormal rows in `d` dimensions (v <= d), by Gram-Schmidt.
pub fn orthonormal_rows(rng: &mut impl Rng, v: usize, d: usize) -> DMatrix<f64> {
    assert!(v <= d);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(v);
    while rows.len() < v {
        let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = x.iter().zip(r).map(|(a, b)| a * b).sum();
                for (xi, ri) in x.iter_mut().zip(r) {
                    *xi -= p * ri;
                }
            }
        }
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(x.into_iter().map(|a| a / n).collect());
        }
    }
    DMatrix::from_fn(v, d, |i, j| rows[i][j])
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col].clone();
            for (x, p) in a[row].iter_mut().zip(&pivot_row).skip(col) {
                *x -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Least-squares coefficients (n x k) from the normal equations
/// `(D_S D_S^T) w_i = D_S h_i`, one sample at a time.
pub fn normal_equations(signal: &DMatrix<f64>, dict: &DMatrix<f64>, support: &[usize]) -> DMatrix<f64> {
    let k = support.len();
    let gram: Vec<Vec<f64>> = support
        .iter()
        .map(|&a| support.iter().map(|&b| dict.row(a).dot(&dict.row(b))).collect())
        .collect();
    let mut out = DMatrix::zeros(signal.nrows(), k);
    for i in 0..signal.nrows() {
        let rhs: Vec<f64> = support.iter().map(|&a| dict.row(a).dot(&signal.row(i))).collect();
        let w = gauss_solve(gram.clone(), rhs);
        for (c, v) in w.into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    out
}

/// Linear-interpolation quantile computed from scratch: sort, then blend
/// the two order statistics around rank `p (n - 1)`.
pub fn quantile_oracle(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = p * (v.len() as f64 - 1.0);
    let below = h.floor();
    let i = below as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (h - below)) + v[i + 1] * (h - below)
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
