#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safcov::{ReturnPanel, SymMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `A Aᵀ / n + I`, comfortably positive definite.
pub fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
    let a = gaussian_matrix(rng, n, n);
    SymMatrix::new(&a * a.transpose() / n as f64 + DMatrix::identity(n, n)).unwrap()
}

pub fn positive_vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Standardized panel from a strict factor model `x_t = Λ f_t + e_t` with
/// Gaussian factors and noise of standard deviation `noise_sd`.
pub fn factor_panel(rng: &mut ChaCha8Rng, lambda: &DMatrix<f64>, t: usize, noise_sd: f64) -> ReturnPanel {
    let (n, r) = lambda.shape();
    let f = gaussian_matrix(rng, r, t);
    let e = gaussian_matrix(rng, n, t) * noise_sd;
    ReturnPanel::standardized(lambda * f + e).unwrap()
}

/// Standardized panel of i.i.d. standard normal noise.
pub fn noise_panel(rng: &mut ChaCha8Rng, n: usize, t: usize) -> ReturnPanel {
    ReturnPanel::standardized(gaussian_matrix(rng, n, t)).unwrap()
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Dense `(1/T) X Xᵀ` by explicit loops.
pub fn second_moment_loops(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = x.shape();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for s in 0..t {
                acc += x[(i, s)] * x[(j, s)];
            }
            out[(i, j)] = acc / t as f64;
        }
    }
    out
}
