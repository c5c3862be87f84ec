mod common;

use common::{gaussian_matrix, max_abs, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safcov::portfolio::gmvp_weights_from_precision;
use safcov::rivals::*;
use safcov::{ObservedFactors, ReturnPanel, SymMatrix};

fn factors(series: DMatrix<f64>) -> ObservedFactors {
    let labels = (0..series.ncols()).map(|k| format!("f{k}")).collect();
    ObservedFactors::new(series, labels).unwrap()
}

/// Panel `x_t = β f_t + e_t` with one market factor; returns the panel and the `T × 1` factor.
fn single_index_panel(seed: u64, n: usize, t: usize, noise: f64) -> (ReturnPanel, ObservedFactors, DVector<f64>) {
    let mut g = rng(seed);
    let f = gaussian_matrix(&mut g, t, 1) * 0.04;
    let beta = DVector::from_fn(n, |i, _| 0.5 + (i as f64) / n as f64);
    let raw = &beta * f.transpose() + gaussian_matrix(&mut g, n, t) * noise;
    (ReturnPanel::standardized(raw).unwrap(), factors(f), beta)
}

fn demeaned(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

fn cov_loops(data: &DMatrix<f64>) -> DMatrix<f64> {
    let y = demeaned(data);
    common::second_moment_loops(&y)
}

/// Per-asset OLS with intercept by explicit normal equations.
fn ols_oracle(data: &DMatrix<f64>, f: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let (n, t) = data.shape();
    let q = f.ncols();
    let design = DMatrix::from_fn(t, q + 1, |s, k| if k == 0 { 1.0 } else { f[(s, k - 1)] });
    let xtx = design.transpose() * &design;
    let inv = xtx.try_inverse().unwrap();
    let mut betas = DMatrix::zeros(n, q);
    let mut resid_var = DVector::zeros(n);
    for i in 0..n {
        let y = data.row(i).transpose();
        let coef = &inv * design.transpose() * &y;
        for k in 0..q {
            betas[(i, k)] = coef[k + 1];
        }
        let resid = &y - &design * &coef;
        resid_var[i] = resid.norm_squared() / t as f64;
    }
    (betas, resid_var)
}

#[test]
fn lw_forced_weights_hit_the_endpoints() {
    let (panel, f, _) = single_index_panel(1, 12, 80, 0.03);
    let s = sample_cov(&panel).matrix;
    let sim = sim_cov(&panel, &f).unwrap().matrix;
    assert!(lw_with_alpha(&panel, &f, 1.0).unwrap().matrix.max_abs_diff(&s) < 1e-15);
    assert!(lw_with_alpha(&panel, &f, 0.0).unwrap().matrix.max_abs_diff(&sim) < 1e-15);
}

#[test]
fn lw_on_single_index_data() {
    let (panel, f, _) = single_index_panel(2, 25, 2000, 0.03);
    let (est, diag) = lw_shrinkage(&panel, &f).unwrap();
    let alpha = diag.alpha_star.unwrap();
    assert!((0.0..=1.0).contains(&alpha));
    assert!(est.matrix.is_positive_definite());
    let s = sample_cov(&panel).matrix;
    let sim = sim_cov(&panel, &f).unwrap().matrix;
    let rebuilt = s.as_matrix() * alpha + sim.as_matrix() * (1.0 - alpha);
    assert!(max_abs(est.matrix.as_matrix(), &rebuilt) < 1e-12);
}

#[test]
fn lw_rejects_flat_market() {
    let (panel, _, _) = single_index_panel(3, 5, 40, 0.03);
    let flat = factors(DMatrix::from_element(40, 1, 0.01));
    assert!(lw_shrinkage(&panel, &flat).is_err());
}

#[test]
fn kdm_forced_vertices() {
    let (panel, f, _) = single_index_panel(4, 8, 60, 0.03);
    let s = cov_loops(&panel.original());
    let inv = s.clone().try_inverse().unwrap();
    let p = kdm_with_zeta(&panel, &f, [1.0, 0.0, 0.0]).unwrap();
    assert!(max_abs(p.as_matrix(), &inv) < 1e-8 * inv.amax());
    let id = kdm_with_zeta(&panel, &f, [0.0, 1.0, 0.0]).unwrap();
    assert_eq!(id, SymMatrix::identity(8));
    let w = gmvp_weights_from_precision(&id).unwrap();
    assert!(w.iter().all(|v| *v == 1.0 / 8.0));
}

#[test]
fn kdm_pseudo_inverse_when_wide() {
    let (panel, f, _) = single_index_panel(5, 20, 12, 0.03);
    let p = kdm_with_zeta(&panel, &f, [1.0, 0.0, 0.0]).unwrap();
    let s = cov_loops(&panel.original());
    let pinv = s.clone().pseudo_inverse(1e-10 * s.amax()).unwrap();
    assert!(max_abs(p.as_matrix(), &pinv) < 1e-6 * pinv.amax());
}

#[test]
fn kdm_choice_matches_an_independent_cv_loop() {
    let (panel, f, _) = single_index_panel(6, 10, 100, 0.03);
    let cfg = KdmConfig::default();
    let out = kdm_precision(&panel, &f, &cfg).unwrap();

    let data = panel.original();
    let t = data.ncols();
    let n = data.nrows();
    let candidates = kdm_candidates(cfg.grid_step);
    let mut scores = vec![0.0; candidates.len()];
    for k in 0..cfg.folds {
        let (lo, hi) = (k * t / cfg.folds, (k + 1) * t / cfg.folds);
        let train: Vec<usize> = (0..t).filter(|s| *s < lo || *s >= hi).collect();
        let x_train = data.select_columns(&train);
        let f_train = f.series.select_rows(&train);
        let s = cov_loops(&x_train);
        let s_pinv = s.clone().pseudo_inverse(1e-12 * s.amax()).unwrap();
        let (betas, resid) = ols_oracle(&x_train, &f_train);
        let fc = demeaned(&f_train.transpose());
        let var_f = fc.norm_squared() / train.len() as f64;
        let sim = &betas * betas.transpose() * var_f + DMatrix::from_diagonal(&resid);
        let sim_inv = sim.try_inverse().unwrap();
        for (c, zeta) in candidates.iter().enumerate() {
            let p = &s_pinv * zeta[0] + DMatrix::identity(n, n) * zeta[1] + &sim_inv * zeta[2];
            let raw = p.row_sum().transpose();
            let w = &raw / raw.sum();
            let r: Vec<f64> = (lo..hi).map(|s| data.column(s).dot(&w)).collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            scores[c] += r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
        }
    }
    let best = (0..scores.len()).min_by(|a, b| scores[*a].total_cmp(&scores[*b])).unwrap();
    assert_eq!(out.diagnostics.zeta, candidates[best]);
    for (mine, theirs) in out.cv_scores.iter().zip(&scores) {
        let theirs = theirs / cfg.folds as f64;
        assert!((mine - theirs).abs() < 1e-9 * theirs.abs());
    }
}

#[test]
fn adz_with_duplicate_halves_returns_the_sample_covariance() {
    let mut g = rng(7);
    let half = gaussian_matrix(&mut g, 6, 30);
    let mut raw = DMatrix::zeros(6, 60);
    raw.columns_mut(0, 30).copy_from(&half);
    raw.columns_mut(30, 30).copy_from(&half);
    let panel = ReturnPanel::standardized(raw).unwrap();
    let est = adz_design_free(&panel, 30).unwrap();
    let s1 = cov_loops(&panel.original().columns(0, 30).into_owned());
    assert!(max_abs(est.matrix.as_matrix(), &s1) < 1e-10);
}

fn adz_oracle(data: &DMatrix<f64>, split: usize) -> DMatrix<f64> {
    let t = data.ncols();
    let gamma = cov_loops(data).symmetric_eigen().eigenvectors;
    let gamma1 = cov_loops(&data.columns(0, split).into_owned()).symmetric_eigen().eigenvectors;
    let s2 = cov_loops(&data.columns(split, t - split).into_owned());
    let p = (gamma1.transpose() * s2 * &gamma1).diagonal();
    // pair eigenvalue replacements with full-sample eigenvectors by eigenvalue rank
    let full_vals = cov_loops(data).symmetric_eigen().eigenvalues;
    let vals1 = cov_loops(&data.columns(0, split).into_owned()).symmetric_eigen().eigenvalues;
    let mut order_full: Vec<usize> = (0..full_vals.len()).collect();
    order_full.sort_by(|a, b| full_vals[*b].total_cmp(&full_vals[*a]));
    let mut order1: Vec<usize> = (0..vals1.len()).collect();
    order1.sort_by(|a, b| vals1[*b].total_cmp(&vals1[*a]));
    let n = data.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let v = gamma.column(order_full[k]);
        out += v * v.transpose() * p[order1[k]];
    }
    out
}

#[test]
fn adz_matches_the_formulas_for_both_orderings() {
    let mut g = rng(8);
    let raw = gaussian_matrix(&mut g, 7, 50);
    for data in [raw.clone(), DMatrix::from_fn(7, 50, |i, s| raw[(i, 49 - s)])] {
        let panel = ReturnPanel::standardized(data).unwrap();
        for split in [25, 18] {
            let est = adz_design_free(&panel, split).unwrap();
            let want = adz_oracle(&panel.original(), split);
            assert!(max_abs(est.matrix.as_matrix(), &want) < 1e-10);
        }
    }
}

#[test]
fn adz_keeps_the_sample_eigenvectors() {
    let mut g = rng(9);
    let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 5, 40)).unwrap();
    let est = adz_design_free(&panel, 20).unwrap();
    let gamma = sample_cov(&panel).matrix.eigen().unwrap().vectors;
    let rotated = gamma.transpose() * est.matrix.as_matrix() * &gamma;
    for i in 0..5 {
        for j in 0..5 {
            if i != j {
                assert!(rotated[(i, j)].abs() < 1e-12);
            }
        }
    }
    assert!(adz_design_free(&panel, 1).is_err());
    assert!(adz_design_free(&panel, 39).is_err());
}

#[test]
fn st_extremes() {
    let mut g = rng(10);
    let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 6, 30)).unwrap();
    let s = sample_cov(&panel).matrix;
    assert_eq!(st_with_kappa(&panel, 0.0).matrix, s);
    let big = st_with_kappa(&panel, 1e6).matrix;
    assert_eq!(big, SymMatrix::from_diagonal(&s.diagonal()));
}

#[test]
fn st_choice_is_the_grid_minimum() {
    use safcov::simulation::{draw_panel, gen_sparse_design, Distribution};
    let sigma = gen_sparse_design(30, 0.1, 3).unwrap();
    let panel = draw_panel(&sigma, 60, 4, Distribution::Gaussian).unwrap();
    let tuned = st_threshold_cov(&panel, &StConfig::default(), 5).unwrap();
    let cv = &tuned.cv;
    let mut best = 0;
    for k in 1..cv.scores.len() {
        if cv.scores[k] < cv.scores[best] {
            best = k;
        }
    }
    assert_eq!(cv.chosen, cv.grid[best]);
    assert_eq!(tuned.diagnostics.kappa, Some(cv.chosen));
    let s = cov_loops(&panel.original());
    for i in 0..30 {
        for j in 0..30 {
            let v = s[(i, j)];
            let want = if i == j { v } else { v.signum() * (v.abs() - cv.chosen).max(0.0) };
            assert!((tuned.estimate.matrix[(i, j)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn bt_without_penalty_returns_the_sample_covariance() {
    let mut g = rng(11);
    let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 6, 80)).unwrap();
    let fit = bt_sparse_cov(&panel, 0.0, &BtConfig::default()).unwrap();
    let s = sample_cov(&panel).matrix;
    assert!(fit.estimate.matrix.max_abs_diff(&s) < 1e-6);
}

#[test]
fn bt_with_huge_penalty_is_diagonal() {
    let mut g = rng(12);
    let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 6, 80)).unwrap();
    let fit = bt_sparse_cov(&panel, 1e6, &BtConfig::default()).unwrap();
    let s = sample_cov(&panel).matrix;
    let m = &fit.estimate.matrix;
    for i in 0..6 {
        for j in 0..6 {
            if i != j {
                assert_eq!(m[(i, j)], 0.0);
            }
        }
        assert!((m[(i, i)] - s[(i, i)]).abs() < 1e-6 * s[(i, i)]);
    }
}

#[test]
fn bt_traces_never_increase() {
    for k in 0..20 {
        let mut g = rng(200 + k);
        let n = 4 + (k as usize % 7);
        let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, n, 40)).unwrap();
        let alpha = [0.05, 0.2, 0.5, 1.0][k as usize % 4];
        let fit = bt_sparse_cov(&panel, alpha, &BtConfig::default()).unwrap();
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-8), "instance {k}");
        assert!(fit.estimate.matrix.is_positive_definite());
    }
}

#[test]
fn bt_cross_validation_picks_from_its_grid() {
    let mut g = rng(13);
    let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 8, 60)).unwrap();
    let tuned = bt_cross_validated(&panel, &BtConfig::default(), 3).unwrap();
    let cv = &tuned.cv;
    let best = cv.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let first = cv.scores.iter().position(|v| *v == best).unwrap();
    assert_eq!(cv.chosen, cv.grid[first]);
    assert!(tuned.estimate.matrix.is_positive_definite());
}

#[test]
fn sim_with_orthogonal_factor_is_nearly_diagonal() {
    let mut g = rng(14);
    let f = gaussian_matrix(&mut g, 5000, 1);
    let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 6, 5000)).unwrap();
    let sim = sim_cov(&panel, &factors(f)).unwrap().matrix;
    for i in 0..6 {
        for j in 0..6 {
            if i != j {
                assert!(sim[(i, j)].abs() < 0.01);
            }
        }
    }
}

#[test]
fn sim_with_exact_factor_is_rank_one_plus_floor() {
    let mut g = rng(15);
    let f = gaussian_matrix(&mut g, 50, 1);
    let raw = DMatrix::from_fn(4, 50, |_, s| f[(s, 0)]);
    let panel = ReturnPanel::standardized(raw).unwrap();
    let fit = fit_factor_model(&panel, &factors(f.clone())).unwrap();
    assert!(fit.betas.iter().all(|b| (b - 1.0).abs() < 1e-12));
    assert!(fit.resid_var.iter().all(|v| *v == RESIDUAL_FLOOR));
    let var_f = demeaned(&f.transpose()).norm_squared() / 50.0;
    let sim = sim_cov(&panel, &factors(f)).unwrap().matrix;
    for i in 0..4 {
        for j in 0..4 {
            let want = var_f + if i == j { RESIDUAL_FLOOR } else { 0.0 };
            assert!((sim[(i, j)] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn factor_slopes_match_normal_equations() {
    for q in [1, 3] {
        let mut g = rng(16 + q as u64);
        let f = gaussian_matrix(&mut g, 120, q);
        let b = gaussian_matrix(&mut g, 9, q);
        let raw = &b * f.transpose() + gaussian_matrix(&mut g, 9, 120) * 0.5;
        let panel = ReturnPanel::standardized(raw).unwrap();
        let fit = fit_factor_model(&panel, &factors(f.clone())).unwrap();
        let (betas, resid) = ols_oracle(&panel.original(), &f);
        assert!(max_abs(&fit.betas, &betas) < 1e-10);
        assert!((&fit.resid_var - &resid).amax() < 1e-10);
        let est = if q == 1 { sim_cov(&panel, &factors(f)) } else { ff3f_cov(&panel, &factors(f)) };
        assert!(est.unwrap().matrix.is_positive_definite());
    }
}

#[test]
fn ff3f_recovers_a_single_active_factor() {
    let mut g = rng(19);
    let raw_f = gaussian_matrix(&mut g, 4000, 3);
    let q = raw_f.clone().qr().q() * (4000f64).sqrt();
    let x = DMatrix::from_fn(5, 4000, |_, s| q[(s, 0)]) + gaussian_matrix(&mut g, 5, 4000) * 0.3;
    let panel = ReturnPanel::standardized(x).unwrap();
    let fit = fit_factor_model(&panel, &factors(q)).unwrap();
    for i in 0..5 {
        assert!((fit.betas[(i, 0)] - 1.0).abs() < 0.03);
        assert!(fit.betas[(i, 1)].abs() < 0.03 && fit.betas[(i, 2)].abs() < 0.03);
    }
}

#[test]
fn ff3f_with_zero_slopes_is_the_residual_diagonal() {
    let fit = FactorModelFit {
        betas: DMatrix::zeros(3, 3),
        factor_cov: SymMatrix::identity(3),
        resid_var: DVector::from_vec(vec![0.2, 0.3, 0.4]),
    };
    assert_eq!(fit.covariance(), SymMatrix::from_diagonal(&fit.resid_var));
}

#[test]
fn collinear_factors_are_rejected() {
    let mut g = rng(20);
    let f = gaussian_matrix(&mut g, 50, 1);
    let three = DMatrix::from_fn(50, 3, |s, k| f[(s, 0)] * (k + 1) as f64);
    let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 4, 50)).unwrap();
    assert!(ff3f_cov(&panel, &factors(three)).is_err());
    assert!(sim_cov(&panel, &factors(DMatrix::from_element(50, 1, 2.0))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_exactly_symmetric(seed in 0u64..10_000, n in 3usize..12) {
        let (panel, f, _) = single_index_panel(seed, n, 40, 0.05);
        let outs = vec![
            sample_cov(&panel).matrix,
            lw_shrinkage(&panel, &f).unwrap().0.matrix,
            adz_design_free(&panel, 20).unwrap().matrix,
            st_with_kappa(&panel, 1e-4).matrix,
            sim_cov(&panel, &f).unwrap().matrix,
            kdm_with_zeta(&panel, &f, [0.3, 0.3, 0.4]).unwrap(),
        ];
        for m in outs {
            let a = m.as_matrix();
            prop_assert_eq!(a, &a.transpose());
        }
    }

    #[test]
    fn thresholding_never_touches_the_diagonal(seed in 0u64..10_000, kappa in 0.0f64..2.0) {
        let mut g = rng(seed);
        let panel = ReturnPanel::standardized(gaussian_matrix(&mut g, 5, 20)).unwrap();
        let s = sample_cov(&panel).matrix;
        let st = st_with_kappa(&panel, kappa * s.as_matrix().amax()).matrix;
        prop_assert_eq!(st.diagonal(), s.diagonal());
    }
}
