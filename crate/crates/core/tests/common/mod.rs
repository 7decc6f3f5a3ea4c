//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hieraprune_core::dpp::DenseKernel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `A·Aᵀ` for a Gaussian `n × rank` matrix `A`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> DenseKernel {
    let a = DMatrix::<f64>::from_fn(n, rank, |_, _| rng.sample(StandardNormal));
    let l = &a * a.transpose();
    DenseKernel::new(n, (0..n * n).map(|x| l[(x / n, x % n)]).collect())
}

/// Determinant of the principal submatrix on `subset`, by LU decomposition.
pub fn subset_det(kernel: &DenseKernel, subset: &[usize]) -> f64 {
    if subset.is_empty() {
        return 1.0;
    }
    let k = subset.len();
    DMatrix::<f64>::from_fn(k, k, |i, j| kernel.get(subset[i], subset[j])).determinant()
}

/// Greedy MAP by full determinant recomputation at every step; ties to the lowest index.
pub fn naive_greedy(kernel: &DenseKernel, k: usize) -> (Vec<usize>, f64) {
    let n = (kernel.as_slice().len() as f64).sqrt() as usize;
    let mut chosen: Vec<usize> = Vec::new();
    let mut best_det = 1.0;
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let mut s = chosen.clone();
            s.push(i);
            let det = subset_det(kernel, &s);
            if best.is_none_or(|(_, b)| det > b) {
                best = Some((i, det));
            }
        }
        let (i, det) = best.unwrap();
        chosen.push(i);
        best_det = det;
    }
    (chosen, best_det.ln())
}

/// `4nd² + 2n²d + 2ndm` in arbitrary precision.
pub fn bigint_layer_flops(n: u64, d: u64, m: u64) -> BigUint {
    let (n, d, m) = (BigUint::from(n), BigUint::from(d), BigUint::from(m));
    BigUint::from(4u32) * &n * &d * &d
        + BigUint::from(2u32) * &n * &n * &d
        + BigUint::from(2u32) * &n * &d * &m
}

/// All `(index, value)` pairs sorted by value descending then index ascending.
pub fn sort_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
