mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safcov::saf::{
    assemble_saf_covariance, effective_sample_cov, fit_saf, fit_saf_from, initial_estimate,
    majorization_gradient, penalized_objective, poet_residual_cov, poet_threshold,
    quasi_log_likelihood, FactorFit, SafConfig,
};
use safcov::selection::{select_mu_with, MuSearchConfig};
use safcov::simulation::{draw_panel, gen_spiked_design, Distribution};
use safcov::{Error, ReturnPanel, SymMatrix};

/// Tangent-plane majorizer of the quasi-likelihood at `(Λ_m, Φ_m)`:
/// `log det Σ_m + tr(2Λ_mᵀ Σ_m⁻¹ (Λ − Λ_m)) + tr(S (ΛΛᵀ + Φ_m)⁻¹)`,
/// evaluated with dense inverses.
fn majorized(lambda: &DMatrix<f64>, lambda_m: &DMatrix<f64>, phi: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let sigma_m = lambda_m * lambda_m.transpose() + DMatrix::from_diagonal(phi);
    let inv_m = sigma_m.clone().try_inverse().unwrap();
    let log_det = sigma_m.determinant().ln();
    let tangent = 2.0 * (lambda_m.transpose() * &inv_m * (lambda - lambda_m)).trace();
    let sigma = lambda * lambda.transpose() + DMatrix::from_diagonal(phi);
    let convex = (s * sigma.try_inverse().unwrap()).trace();
    log_det + tangent + convex
}

fn sample_cov_of(rng: &mut rand_chacha::ChaCha8Rng, n: usize, t: usize) -> SymMatrix {
    let lambda = gaussian_matrix(rng, n, 2);
    let x = lambda * gaussian_matrix(rng, 2, t) + gaussian_matrix(rng, n, t);
    SymMatrix::new(second_moment_loops(&x)).unwrap()
}

#[test]
fn gradient_matches_finite_differences_of_majorizer() {
    for seed in 0..20u64 {
        let mut rng = rng(100 + seed);
        let n = 3 + (seed as usize % 8);
        let r = 1 + (seed as usize % 2);
        let s = sample_cov_of(&mut rng, n, 40);
        let lambda_m = gaussian_matrix(&mut rng, n, r) * 0.7;
        let phi = positive_vector(&mut rng, n, 0.5, 1.5);
        let a_hat = majorization_gradient(&lambda_m, &phi, &s).unwrap();
        let h = 1e-6;
        let mut fd = DMatrix::zeros(n, r);
        for i in 0..n {
            for k in 0..r {
                let mut up = lambda_m.clone();
                up[(i, k)] += h;
                let mut down = lambda_m.clone();
                down[(i, k)] -= h;
                fd[(i, k)] = (majorized(&up, &lambda_m, &phi, s.as_matrix())
                    - majorized(&down, &lambda_m, &phi, s.as_matrix()))
                    / (2.0 * h);
            }
        }
        let rel = (&a_hat - &fd).norm() / fd.norm().max(1e-12);
        assert!(rel < 1e-5, "seed {seed}: relative error {rel}");
    }
}

#[test]
fn penalized_objective_adds_l1_mass() {
    let mut rng = rng(4);
    let s = sample_cov_of(&mut rng, 5, 30);
    let lambda = gaussian_matrix(&mut rng, 5, 2);
    let phi = positive_vector(&mut rng, 5, 0.5, 1.5);
    let base = quasi_log_likelihood(&lambda, &phi, &s).unwrap();
    assert_eq!(penalized_objective(&lambda, &phi, &s, 0.0).unwrap(), base);
    let mut l1 = 0.0;
    for v in lambda.iter() {
        l1 += v.abs();
    }
    let got = penalized_objective(&lambda, &phi, &s, 0.3).unwrap();
    assert!((got - (base + 0.3 * l1)).abs() < 1e-12);

    let ones = DMatrix::from_element(2, 1, 1.0);
    let phi2 = DVector::from_element(2, 1.0);
    let s2 = SymMatrix::identity(2);
    let q = quasi_log_likelihood(&ones, &phi2, &s2).unwrap();
    assert!((penalized_objective(&ones, &phi2, &s2, 0.5).unwrap() - (q + 1.0)).abs() < 1e-12);
}

#[test]
fn strict_factor_model_is_recovered_without_penalty() {
    let mut rng = rng(21);
    let (n, t) = (12, 4000);
    let lambda = gaussian_matrix(&mut rng, n, 2);
    let noise_sd = 0.05;
    let panel = factor_panel(&mut rng, &lambda, t, noise_sd);
    let fit = fit_saf(&panel, &SafConfig { max_outer_iter: 3000, ..SafConfig::new(2, 0.0) }).unwrap();
    // common component on the standardized scale
    let pop_sd = DVector::from_fn(n, |i, _| (lambda.row(i).norm_squared() + noise_sd * noise_sd).sqrt());
    let truth = DMatrix::from_fn(n, n, |i, j| {
        lambda.row(i).dot(&lambda.row(j)) / (pop_sd[i] * pop_sd[j])
    });
    let est = &fit.loadings * fit.loadings.transpose();
    let err = (est - truth).norm() / n as f64;
    assert!(err < 0.02, "common-component error {err}");
}

#[test]
fn heavy_penalty_zeroes_loadings() {
    let mut rng = rng(2);
    let panel = noise_panel(&mut rng, 10, 50);
    let fit = fit_saf(&panel, &SafConfig::new(2, 1e3)).unwrap();
    assert_eq!(fit.nonzero_loadings(), 0);
    let s = panel.sample_cov();
    for i in 0..10 {
        assert!((fit.phi_u[i] - s[(i, i)]).abs() < 1e-10);
    }
    assert!(fit.active_factors.is_empty());
    let est = assemble_saf_covariance(&fit).unwrap();
    assert!(est.matrix.max_abs_diff(&fit.sigma_u_tau) < 1e-15);
}

#[test]
fn zero_variance_series_is_rejected() {
    let mut raw = DMatrix::from_fn(3, 20, |i, t| ((i + 1) * (t % 5)) as f64);
    raw.row_mut(1).fill(0.0);
    let labels = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let panel = ReturnPanel::from_raw_unscaled(raw, labels("a", 3), labels("d", 20)).unwrap();
    assert!(matches!(fit_saf(&panel, &SafConfig::new(1, 0.1)), Err(Error::DegenerateInput(_))));
}

#[test]
fn mm_trace_is_monotone_across_penalties() {
    for seed in 0..20u64 {
        let mut rng = rng(300 + seed);
        let n = 5 + (seed as usize * 7) % 46;
        let lambda = gaussian_matrix(&mut rng, n, 2) * 0.8;
        let panel = factor_panel(&mut rng, &lambda, 60, 1.0);
        let cfg = MuSearchConfig { grid_size: 1, base: SafConfig::new(2, 0.0), ..Default::default() };
        let mu_max = select_mu_with(&panel, &cfg).unwrap().mu_max;
        for mu in [0.0, 0.01, 0.1, mu_max / 2.0] {
            let fit = fit_saf(&panel, &SafConfig::new(2, mu)).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-8, "seed {seed} mu {mu}: {} -> {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn unpenalized_fit_is_stationary() {
    for seed in 0..10u64 {
        let mut rng = rng(500 + seed);
        let n = 8 + seed as usize * 3;
        let lambda = gaussian_matrix(&mut rng, n, 2);
        let panel = factor_panel(&mut rng, &lambda, 120, 1.0);
        let cfg = SafConfig { max_outer_iter: 20_000, ..SafConfig::new(2, 0.0) };
        let fit = fit_saf(&panel, &cfg).unwrap();
        assert!(fit.converged, "seed {seed} did not converge");
        let s = effective_sample_cov(&panel, cfg.epsilon_ridge);
        let grad = majorization_gradient(&fit.loadings, &fit.phi_u, &s).unwrap();
        assert!(grad.norm() < 1e-5 * (n * 2) as f64, "seed {seed}: gradient {}", grad.norm());
    }
}

#[test]
fn sparsity_grows_with_penalty_from_a_fixed_start() {
    let mut rng = rng(41);
    let mut lambda = gaussian_matrix(&mut rng, 20, 2);
    for i in 0..20 {
        if i % 3 == 0 {
            lambda[(i, 0)] = 0.0;
        }
        if i % 2 == 0 {
            lambda[(i, 1)] = 0.0;
        }
    }
    let panel = factor_panel(&mut rng, &lambda, 100, 1.0);
    let base = SafConfig { max_outer_iter: 5000, ..SafConfig::new(2, 0.0) };
    let cfg = MuSearchConfig { warm_path: false, grid_size: 12, base, ..Default::default() };
    let sel = select_mu_with(&panel, &cfg).unwrap();
    let zeros: Vec<usize> = sel
        .kappa_per_mu
        .iter()
        .zip(&sel.failed)
        .filter(|(_, failed)| !**failed)
        .map(|(k, _)| 40 - k)
        .collect();
    assert!(zeros.len() >= 9, "too few converged grid points: {:?}", sel.failed);
    assert!(zeros.windows(2).all(|w| w[0] <= w[1]), "zero counts {zeros:?}");
}

#[test]
fn output_follows_identification_conventions() {
    let sp = gen_spiked_design(30, 0.0, 9).unwrap();
    let panel = draw_panel(&sp.sigma, 200, 17, Distribution::Gaussian).unwrap();
    let fit = fit_saf(&panel, &SafConfig::new(4, 0.05)).unwrap();
    let zeros: Vec<usize> =
        (0..4).map(|k| fit.loadings.column(k).iter().filter(|v| **v == 0.0).count()).collect();
    assert!(zeros.windows(2).all(|w| w[0] <= w[1]));
    for k in 0..4 {
        if let Some(v) = fit.loadings.column(k).iter().find(|v| **v != 0.0) {
            assert!(*v > 0.0);
        }
    }
    assert!(fit.phi_u.iter().all(|v| *v > 0.0));
}

#[test]
fn permuting_series_permutes_the_estimate() {
    let mut rng = rng(77);
    let lambda = gaussian_matrix(&mut rng, 15, 2);
    let panel = factor_panel(&mut rng, &lambda, 80, 1.0);
    let perm: Vec<usize> = (0..15).rev().collect();
    let permuted = panel.select_series(&perm);
    let cfg = SafConfig { max_outer_iter: 5000, ..SafConfig::new(2, 0.05) };
    let a = assemble_saf_covariance(&fit_saf(&panel, &cfg).unwrap()).unwrap().matrix;
    let b = assemble_saf_covariance(&fit_saf(&permuted, &cfg).unwrap()).unwrap().matrix;
    assert!(a.permuted(&perm).max_abs_diff(&b) < 1e-6);
}

#[test]
fn covariance_is_positive_definite_on_random_instances() {
    let mut count = 0;
    for (k, n) in [10usize, 30, 100].into_iter().enumerate() {
        let reps = if n == 100 { 34 } else { 33 };
        for rep in 0..reps {
            let mut rng = rng(1000 * (k as u64 + 1) + rep);
            let r = 1 + rep as usize % 3;
            let lambda = gaussian_matrix(&mut rng, n, r) * 0.6;
            let panel = factor_panel(&mut rng, &lambda, 60, 1.0);
            let mu = [0.0, 0.02, 0.1, 0.3][rep as usize % 4];
            let fit = fit_saf(&panel, &SafConfig::new(r, mu)).unwrap();
            let est = assemble_saf_covariance(&fit).unwrap();
            assert!(est.matrix.is_positive_definite());
            count += 1;
        }
    }
    assert_eq!(count, 100);
}

#[test]
fn wide_panels_use_the_ridge() {
    let mut rng = rng(12);
    let lambda = gaussian_matrix(&mut rng, 80, 2);
    let panel = factor_panel(&mut rng, &lambda, 40, 1.0);
    let s = effective_sample_cov(&panel, 1e-4);
    let raw = panel.sample_cov();
    for i in 0..80 {
        assert!((s[(i, i)] - raw[(i, i)] - 1e-4).abs() < 1e-12);
    }
    let fit = fit_saf(&panel, &SafConfig::new(2, 0.05)).unwrap();
    assert!(assemble_saf_covariance(&fit).unwrap().matrix.is_positive_definite());
}

#[test]
fn poet_keeps_large_residual_covariances_shifted_by_tau() {
    let mut rng = rng(31);
    let (n, t) = (4, 1000);
    let mut sigma = DMatrix::<f64>::identity(n, n);
    for (i, j) in [(0, 1), (2, 3)] {
        sigma[(i, j)] = 0.85;
        sigma[(j, i)] = 0.85;
    }
    let chol = sigma.clone().cholesky().unwrap().l();
    let z = gaussian_matrix(&mut rng, n, t);
    let u = chol * z;
    let tau = poet_threshold(n, t);
    assert!((tau - (0.5 + (4f64.ln() / 1000.0).sqrt())).abs() < 1e-15);
    let got = poet_residual_cov(&u).unwrap();
    let s = second_moment_loops(&u);
    for i in 0..n {
        for j in 0..n {
            let want = if i == j {
                s[(i, i)]
            } else if s[(i, j)].abs() > tau {
                s[(i, j)].signum() * (s[(i, j)].abs() - tau)
            } else {
                0.0
            };
            assert!((got[(i, j)] - want).abs() < 1e-12);
        }
    }
    for (i, j) in [(0, 1), (2, 3)] {
        assert!((got[(i, j)] - (0.85 - tau)).abs() < 0.1);
    }
    for (i, j) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
        assert_eq!(got[(i, j)], 0.0);
    }
}

#[test]
fn residual_covariance_diagonal_is_not_thresholded() {
    let mut rng = rng(19);
    let lambda = gaussian_matrix(&mut rng, 12, 1);
    let panel = factor_panel(&mut rng, &lambda, 60, 1.0);
    let fit = fit_saf(&panel, &SafConfig::new(1, 0.05)).unwrap();
    let resid = panel.data() - &fit.loadings * fit.factors.transpose();
    let s_u = second_moment_loops(&resid);
    for i in 0..12 {
        assert!((fit.sigma_u_tau[(i, i)] - s_u[(i, i)]).abs() < 1e-12);
    }
}

#[test]
fn assembly_matches_its_parts_bit_for_bit() {
    let sp = gen_spiked_design(30, 0.025, 4).unwrap();
    let panel = draw_panel(&sp.sigma, 120, 8, Distribution::Gaussian).unwrap();
    let fit = fit_saf(&panel, &SafConfig::new(4, 0.05)).unwrap();
    let est = assemble_saf_covariance(&fit).unwrap();
    let m = &fit.loadings * fit.factor_cov() * fit.loadings.transpose() + fit.sigma_u_tau.as_matrix();
    for i in 0..30 {
        for j in 0..30 {
            let want = if i == j { m[(i, i)] } else { 0.5 * (m[(i, j)] + m[(j, i)]) };
            assert_eq!(est.matrix[(i, j)].to_bits(), want.to_bits());
        }
    }
}

fn hand_made_fit(loadings: DMatrix<f64>, factors: DMatrix<f64>, sigma_u_tau: SymMatrix) -> FactorFit {
    let n = loadings.nrows();
    let r = loadings.ncols();
    FactorFit {
        loadings,
        factors,
        phi_u: DVector::from_element(n, 1.0),
        sigma_u_tau,
        objective_trace: vec![],
        converged: true,
        n_iter: 0,
        mu: 0.0,
        tau: 0.0,
        active_factors: (0..r).collect(),
    }
}

#[test]
fn assembly_closed_forms() {
    let su = SymMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5]));
    let zero = hand_made_fit(DMatrix::zeros(3, 1), DMatrix::zeros(6, 1), su.clone());
    assert_eq!(assemble_saf_covariance(&zero).unwrap().matrix, su);

    // a factor with mean 0 and unit (1/T) variance
    let f = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
    let v = DVector::from_vec(vec![0.5, -1.0, 2.0]);
    let fit = hand_made_fit(DMatrix::from_column_slice(3, 1, v.as_slice()), f, su.clone());
    let want = &v * v.transpose() + su.as_matrix();
    assert!(max_abs(assemble_saf_covariance(&fit).unwrap().matrix.as_matrix(), &want) < 1e-15);
}

#[test]
fn warm_start_must_match_dimensions() {
    let mut rng = rng(1);
    let panel = noise_panel(&mut rng, 6, 30);
    let s = panel.sample_cov();
    let warm = initial_estimate(&s, &SafConfig::new(2, 0.0)).unwrap();
    let err = fit_saf_from(&panel, &SafConfig::new(3, 0.1), Some(&warm)).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn traces_never_increase(seed in 0u64..5000, n in 4usize..30, mu in 0.0..0.5f64) {
        let mut rng = rng(seed);
        let lambda = gaussian_matrix(&mut rng, n, 1);
        let panel = factor_panel(&mut rng, &lambda, 60, 1.0);
        let fit = fit_saf(&panel, &SafConfig { max_outer_iter: 200, ..SafConfig::new(1, mu) }).unwrap();
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8);
        }
        prop_assert!(fit.phi_u.iter().all(|v| *v > 0.0));
    }
}
