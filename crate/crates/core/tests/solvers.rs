use atmle::solvers::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem(seed: u64, n: usize, p: usize) -> (Design, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y = rows
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, x)| x * (j % 3) as f64).sum::<f64>() + rng.random_range(-0.5..0.5))
        .collect();
    let w = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
    (Design::from_rows(&rows), y, w)
}

#[test]
fn lambda_max_gives_empty_support() {
    let (x, y, w) = problem(1, 80, 6);
    let opts = LassoOptions::default();
    let grid = lambda_grid(&x, &y, &w, &opts).unwrap();
    assert!(grid.windows(2).all(|p| p[0] > p[1]));
    let fit = lasso_fit(&x, &y, &w, grid[0], &opts).unwrap();
    assert!(fit.beta.iter().all(|&b| b == 0.0));
    let wmean = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
    assert!((fit.intercept - wmean).abs() < 1e-10);
}

#[test]
fn unpenalized_columns_enter_at_lambda_max() {
    let (x, y, w) = problem(2, 80, 4);
    let opts = LassoOptions {
        penalty_factor: Some(vec![0.0, 1.0, 1.0, 1.0]),
        ..LassoOptions::default()
    };
    let grid = lambda_grid(&x, &y, &w, &opts).unwrap();
    let fit = lasso_fit(&x, &y, &w, grid[0], &opts).unwrap();
    assert!(kkt_residual(&x, &y, &w, &fit.beta, fit.intercept, grid[0], &opts).unwrap() < 1e-6);
    assert!(fit.beta[1..].iter().all(|&b| b == 0.0));
}

#[test]
fn duplicated_column_is_dropped() {
    let (x, y, w) = problem(3, 60, 3);
    let mut cols = x.dense_columns();
    cols.push(cols[1].clone());
    let dup = Design::from_dense_columns(60, &cols);
    let fit = relaxed_ols(&dup, &y, &w, &[0, 1, 2, 3]);
    assert_eq!(fit.dropped_columns, vec![3]);
    assert_eq!(fit.columns, vec![0, 1, 2]);
    let plain = relaxed_ols(&x, &y, &w, &[0, 1, 2]);
    for (a, b) in fit.coefficients.iter().zip(&plain.coefficients) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn cv_lasso_is_deterministic_and_selects_on_grid() {
    let (x, y, w) = problem(4, 120, 8);
    let folds = atmle::data::make_folds_by(&vec![0; 120], 5, 9).unwrap();
    let opts = LassoOptions::default();
    let a = cv_lasso(&x, &y, &w, &folds, &opts).unwrap();
    let b = cv_lasso(&x, &y, &w, &folds, &opts).unwrap();
    assert_eq!(a, b);
    assert!(a.cv_risk_path.iter().any(|&(l, _)| l == a.lambda));
    assert!(a.support.iter().all(|&j| a.coefficients[j] != 0.0));
}

#[test]
fn logistic_score_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 400;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random_range(-2.0..2.0)]).collect();
    let labels: Vec<f64> = rows
        .iter()
        .map(|r| rng.random_bool(expit(0.3 - 0.8 * r[1])) as u8 as f64)
        .collect();
    let offset: Vec<f64> = (0..n).map(|i| 0.1 * (i % 5) as f64).collect();
    let x = Design::from_rows(&rows);
    let fit = logistic_irls(&x, &labels, Some(&offset), None).unwrap();
    assert!(fit.converged && !fit.separation);
    let p = fit.predict(&x, Some(&offset));
    for j in 0..2 {
        let score: f64 = (0..n).map(|i| rows[i][j] * (labels[i] - p[i])).sum::<f64>() / n as f64;
        assert!(score.abs() < 1e-8, "{score}");
    }
}

#[test]
fn separated_labels_are_flagged() {
    let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, i as f64]).collect();
    let labels: Vec<f64> = (0..20).map(|i| (i >= 10) as u8 as f64).collect();
    let fit = logistic_irls(&Design::from_rows(&rows), &labels, None, None).unwrap();
    assert!(fit.separation);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lasso_satisfies_kkt(seed in any::<u64>(), n in 20usize..120, p in 1usize..12, k in 0usize..100) {
        let (x, y, w) = problem(seed, n, p);
        let opts = LassoOptions::default();
        let grid = lambda_grid(&x, &y, &w, &opts).unwrap();
        let lambda = grid[k % grid.len()];
        let fit = lasso_fit(&x, &y, &w, lambda, &opts).unwrap();
        prop_assert!(kkt_residual(&x, &y, &w, &fit.beta, fit.intercept, lambda, &opts).unwrap() < 1e-6);
    }

    #[test]
    fn relaxed_ols_solves_normal_equations(seed in any::<u64>(), n in 20usize..120, p in 1usize..10) {
        let (x, y, w) = problem(seed, n, p);
        let support: Vec<usize> = (0..p).collect();
        let fit = relaxed_ols(&x, &y, &w, &support);
        let sub = x.select(&fit.columns);
        let r = normal_equation_residuals(&sub, &y, &w, &fit.coefficients);
        prop_assert!(r.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn design_products_agree_with_dense(
        seed in any::<u64>(),
        n in 1usize..40,
        p in 1usize..6,
        beta in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let (x, _, _) = problem(seed, n, p);
        let dense = x.dense_columns();
        let got = x.mul(&beta[..p]);
        for i in 0..n {
            let want: f64 = (0..p).map(|j| dense[j][i] * beta[j]).sum();
            prop_assert!((got[i] - want).abs() < 1e-12);
        }
    }
}
