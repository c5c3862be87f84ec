mod common;

use common::{factor_panel, gaussian_matrix, noise_panel, rng};
use nalgebra::DMatrix;
use safcov::saf::{assemble_saf_covariance, fit_saf, effective_sample_cov};
use safcov::selection::{
    dense_likelihood, information_criterion, select_mu, select_mu_with, select_num_factors, MuSearchConfig,
};
use safcov::simulation::{derive_seed, draw_panel, gen_factor_strength_design, Distribution};
use safcov::{ReturnPanel, SafConfig, SymMatrix};

#[test]
fn pure_noise_gives_no_factors() {
    let hits = (0..30)
        .filter(|&k| {
            let panel = noise_panel(&mut rng(100 + k), 50, 450);
            select_num_factors(&panel, 8).unwrap().r_hat == 0
        })
        .count();
    assert!(hits >= 27, "r_hat = 0 in {hits}/30");
}

#[test]
fn strong_and_weak_factors_are_counted() {
    let design = gen_factor_strength_design(100, &[1.0, 0.8, 0.7, 0.6], 5).unwrap();
    let hits = (0..30)
        .filter(|&k| {
            let panel = draw_panel(&design.sigma, 450, derive_seed(5, k), Distribution::Gaussian).unwrap();
            (1..=4).contains(&select_num_factors(&panel, 8).unwrap().r_hat)
        })
        .count();
    assert!(hits >= 27, "r_hat in [1, 4] in {hits}/30");
}

#[test]
fn factor_count_is_scale_equivariant() {
    let mut g = rng(8);
    let lambda = gaussian_matrix(&mut g, 40, 2);
    let raw = &lambda * gaussian_matrix(&mut g, 2, 200) + gaussian_matrix(&mut g, 40, 200);
    let c = 3.0;
    let labels = |prefix: &str, k: usize| (0..k).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
    let base = ReturnPanel::from_raw_unscaled(raw.clone(), labels("a", 40), labels("d", 200)).unwrap();
    let scaled = ReturnPanel::from_raw_unscaled(raw * c, labels("a", 40), labels("d", 200)).unwrap();
    let a = select_num_factors(&base, 6).unwrap();
    let b = select_num_factors(&scaled, 6).unwrap();
    assert_eq!(a.r_hat, b.r_hat);
    for (ga, gb) in a.eigengaps.iter().zip(&b.eigengaps) {
        assert!((gb - c * c * ga).abs() < 1e-9 * gb.abs().max(1.0));
    }
}

#[test]
fn too_few_series_for_calibration() {
    let panel = noise_panel(&mut rng(1), 10, 100);
    assert!(select_num_factors(&panel, 5).is_err());
}

#[test]
fn criterion_matches_dense_reevaluation() {
    let mut g = rng(21);
    let lambda = gaussian_matrix(&mut g, 8, 2);
    let panel = factor_panel(&mut g, &lambda, 120, 0.7);
    let fit = fit_saf(&panel, &SafConfig::new(2, 0.05)).unwrap();
    let s_x = effective_sample_cov(&panel, 1e-4);
    let (n, t) = (8, 120);
    let ic = information_criterion(&fit, &s_x, n, t).unwrap();

    let sigma = assemble_saf_covariance(&fit).unwrap().matrix;
    let dense = sigma.as_matrix().clone();
    let inv = dense.clone().try_inverse().unwrap();
    let log_det = dense.determinant().ln();
    let trace = (s_x.as_matrix() * &inv).trace();
    let kappa = fit.loadings.iter().filter(|v| **v != 0.0).count() as f64;
    let nf = n as f64;
    let want = log_det + trace + 2.0 * kappa * (nf.ln() / nf + nf.ln() / (nf * t as f64)).sqrt();
    assert!((ic - want).abs() < 1e-10 * want.abs().max(1.0), "{ic} vs {want}");
}

#[test]
fn likelihood_of_truth_is_minimal_at_sample_cov() {
    let mut g = rng(3);
    let x = gaussian_matrix(&mut g, 5, 50);
    let s = SymMatrix::new(&x * x.transpose() / 50.0).unwrap();
    let at_s = dense_likelihood(&s, &s).unwrap();
    assert!((at_s - (s.log_det_pd().unwrap() + 5.0)).abs() < 1e-10);
    let other = s.add(&SymMatrix::identity(5).scale(0.1));
    assert!(dense_likelihood(&other, &s).unwrap() > at_s);
}

#[test]
fn dense_strong_factor_needs_little_shrinkage() {
    let mut g = rng(31);
    let lambda = DMatrix::from_fn(20, 1, |_, _| 1.0) + gaussian_matrix(&mut g, 20, 1) * 0.2;
    let panel = factor_panel(&mut g, &lambda, 2000, 0.5);
    let sel = select_mu(&panel, 1, 30).unwrap();
    let rank = sel.grid.iter().position(|m| *m == sel.mu_star).unwrap();
    assert!(rank < 3, "mu* at grid index {rank} (ic {:?})", sel.ic_values);
    assert_eq!(sel.fit.nonzero_loadings(), 20);
}

#[test]
fn pure_noise_is_shrunk_heavily() {
    let panel = noise_panel(&mut rng(44), 30, 200);
    let sel = select_mu(&panel, 1, 30).unwrap();
    assert!(sel.fit.nonzero_loadings() * 10 <= 30, "kappa at mu* = {}", sel.fit.nonzero_loadings());
}

#[test]
fn single_point_grid_is_mu_max() {
    let mut g = rng(12);
    let lambda = gaussian_matrix(&mut g, 10, 1);
    let panel = factor_panel(&mut g, &lambda, 100, 1.0);
    let sel = select_mu(&panel, 1, 1).unwrap();
    assert_eq!(sel.grid, vec![sel.mu_max]);
    assert_eq!(sel.mu_star, sel.mu_max);
    assert_eq!(sel.fit.nonzero_loadings(), 0);
}

#[test]
fn selection_picks_the_smallest_minimizer_and_is_deterministic() {
    let mut g = rng(77);
    let lambda = gaussian_matrix(&mut g, 15, 2);
    let panel = factor_panel(&mut g, &lambda, 150, 1.0);
    let cfg = MuSearchConfig { grid_size: 10, base: SafConfig::new(2, 0.0), ..Default::default() };
    let a = select_mu_with(&panel, &cfg).unwrap();
    let b = select_mu_with(&panel, &cfg).unwrap();
    assert_eq!(a.mu_star.to_bits(), b.mu_star.to_bits());
    assert_eq!(a.fit.loadings, b.fit.loadings);
    assert!(a.grid.windows(2).all(|w| w[0] < w[1]));
    let eligible: Vec<usize> = (0..a.grid.len()).filter(|&k| !a.failed[k] && !a.rank_deficient[k]).collect();
    assert!(!eligible.is_empty());
    let best = eligible.iter().map(|&k| a.ic_values[k]).fold(f64::INFINITY, f64::min);
    let first = eligible.iter().copied().find(|&k| a.ic_values[k] == best).unwrap();
    assert_eq!(a.grid[first], a.mu_star);
    assert_eq!(a.fit.active_factors.len(), 2);
}

#[test]
fn boundary_point_keeps_every_column() {
    let panel = noise_panel(&mut rng(45), 30, 200);
    let sel = select_mu(&panel, 1, 30).unwrap();
    let last_full = (0..sel.grid.len()).rev().find(|&k| !sel.failed[k] && !sel.rank_deficient[k]).unwrap();
    assert!(sel.rank_deficient[last_full + 1]);
    assert_eq!(sel.grid.len(), 31);
    assert_eq!(*sel.grid.last().unwrap(), sel.mu_max);
    assert!(sel.grid.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn penalty_vanishes_for_large_panels() {
    use safcov::selection::ic_penalty;
    assert!(ic_penalty(1, 10_000, 10_000) < ic_penalty(1, 100, 100));
    assert_eq!(ic_penalty(0, 50, 50), 0.0);
}

#[test]
fn undetected_factor_can_be_dropped() {
    use safcov::estimator::{saf_estimate, SafSettings};
    let panel = noise_panel(&mut rng(9), 30, 200);
    let est = saf_estimate(&panel, &SafSettings::default()).unwrap();
    assert_eq!(est.params["r_hat"], 0.0);
    assert_eq!(est.params["active_factors"], 0.0);
    assert!(est.positive_definite);
}
