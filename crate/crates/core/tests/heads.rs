mod common;

use common::*;
use otbe::barycenter::multi_correlation;
use otbe::extractor::{fit_regression, FitConfig, Roles};
use otbe::heads::{
    affine_mse, anchor_objective, conditional_correlation, fit_anchor_baseline, fit_linear_head, fit_ols_baseline,
    model_conditional_correlation, mse_population, mse_population_raw, LinearHead,
};
use otbe::matstats::{Provenance, RidgePolicy};
use otbe::simlab::{default_lambda_grid, sample, sem_to_moments, SemSpec};
use proptest::prelude::*;

const EXACT: RidgePolicy = RidgePolicy::Exact;

fn exact_model(m: &otbe::matstats::MomentSummary, lambda: f64, dim: usize, context: &str) -> otbe::extractor::FeatureModel {
    let mut cfg = FitConfig::new(lambda, dim);
    cfg.ridge = EXACT;
    fit_regression(m, &Roles::with_context(&[context]), &cfg).unwrap()
}

fn anchor_oracle(m: &otbe::matstats::MomentSummary, gamma: f64) -> Matrix {
    let (dy, dx) = (m.block_dim("y").unwrap(), m.block_dim("x").unwrap());
    let start = fit_ols_baseline(m, "y", "x", EXACT).unwrap().beta;
    let f = |b: &[f64]| anchor_loss(m, gamma, &Matrix::from_row_slice(dy, dx, b));
    let flat: Vec<f64> = start.transpose().as_slice().to_vec();
    Matrix::from_row_slice(dy, dx, &nelder_mead(f, &flat, 0.5, 6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn unit_gamma_is_ols(seed in any::<u64>()) {
        let m = sem_to_moments(&random_sem(&mut rng(seed), 2, 2, 2, 4, false)).unwrap();
        let ols = fit_ols_baseline(&m, "y", "x", EXACT).unwrap();
        let anchor = fit_anchor_baseline(&m, "y", "x", "s", 1.0, EXACT).unwrap();
        prop_assert!((&ols.beta - &anchor.beta).amax() <= 1e-12 * (1.0 + anchor.beta.amax()));
    }

    #[test]
    fn residual_variance_identity(seed in any::<u64>(), dim in 1usize..=3, lambda in 0.0f64..0.99) {
        let m = sem_to_moments(&random_sem(&mut rng(seed), 2, 2, 2, 5, true)).unwrap();
        let model = exact_model(&m, lambda, dim, "s");
        let head = fit_linear_head(&model, &m, "y", "x").unwrap();
        let mse = mse_population(&head, &model, &m, "y", "x").unwrap();
        let w = model.augment(&m, "x", "w").unwrap();
        let delta = dim.min(2) as f64;
        let identity = 2.0 - delta * multi_correlation(&w, "w", "y", EXACT).unwrap();
        prop_assert!((mse - identity).abs() <= 1e-9);
    }

    #[test]
    fn zero_lambda_reduces_to_ols(seed in any::<u64>()) {
        let mut r = rng(seed);
        let source = sem_to_moments(&random_sem(&mut r, 2, 2, 2, 5, false)).unwrap();
        let target = sem_to_moments(&random_sem(&mut r, 2, 2, 2, 5, false)).unwrap();
        let model = exact_model(&source, 0.0, 2, "s");
        let head = fit_linear_head(&model, &source, "y", "x").unwrap();
        let ols = fit_ols_baseline(&source, "y", "x", EXACT).unwrap();
        let a = mse_population(&head, &model, &target, "y", "x").unwrap();
        let b = mse_population_raw(&ols, &target, "y", "x").unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b));
    }
}

#[test]
fn anchor_matches_direct_minimization() {
    for seed in 0..6 {
        let m = sem_to_moments(&random_sem(&mut rng(500 + seed), 1, 1, 1, 3, false)).unwrap();
        for gamma in [0.0, 7.0] {
            let closed = fit_anchor_baseline(&m, "y", "x", "s", gamma, EXACT).unwrap().beta;
            let direct = anchor_oracle(&m, gamma);
            assert!((&closed - &direct).amax() < 1e-6, "seed {seed} gamma {gamma}: {closed} vs {direct}");
        }
    }
}

#[test]
fn library_objective_matches_oracle() {
    let m = sem_to_moments(&random_sem(&mut rng(71), 2, 1, 2, 3, false)).unwrap();
    let b = gaussian(&mut rng(72), 2, 3);
    for gamma in [0.0, 1.0, 5.0] {
        let lib = anchor_objective(&m, "y", "x", "s", gamma, &b).unwrap();
        assert!((lib - anchor_loss(&m, gamma, &b)).abs() < 1e-10 * (1.0 + lib.abs()));
    }
}

#[test]
fn zero_gamma_is_partialling_out() {
    // regress anchor-residualized Y on anchor-residualized X
    let m = sem_to_moments(&random_sem(&mut rng(31), 1, 1, 1, 3, false)).unwrap();
    let ps = |a: &str, b: &str| otbe::matstats::partial_covariance(&m, a, b, "s").unwrap();
    let expected = ps("y", "x") * ps("x", "x").try_inverse().unwrap();
    let anchor = fit_anchor_baseline(&m, "y", "x", "s", 0.0, EXACT).unwrap();
    assert!((anchor.beta - expected).amax() < 1e-10);
    assert!(fit_anchor_baseline(&m, "y", "x", "s", -1.0, EXACT).is_err());
}

#[test]
fn ols_examples() {
    let m = sem_to_moments(&SemSpec::toy(0.0, 1.0, 1.0)).unwrap();
    let ols = fit_ols_baseline(&m, "z", "y", EXACT).unwrap();
    assert_eq!(ols.beta[(0, 0)], 0.0);
    let rho = 0.4;
    let m = sem_to_moments(&SemSpec::toy(rho, 1.0, 1.0)).unwrap();
    assert!((fit_ols_baseline(&m, "z", "y", EXACT).unwrap().beta[(0, 0)] - rho).abs() < 1e-15);

    let m = sem_to_moments(&random_sem(&mut rng(8), 2, 2, 1, 4, false)).unwrap();
    let full = exact_model(&m, 0.0, 4, "s");
    let head = fit_linear_head(&full, &m, "y", "x").unwrap();
    let coef = &head.beta * full.raw_loadings.transpose();
    let ols = fit_ols_baseline(&m, "y", "x", EXACT).unwrap();
    assert!((coef - ols.beta).amax() < 1e-10);
}

#[test]
fn constant_predictor_mse() {
    let m = sem_to_moments(&random_sem(&mut rng(41), 2, 2, 2, 3, false)).unwrap();
    let head = LinearHead::new(Matrix::zeros(2, 3), Vector::from_vec(vec![0.5, -1.0]), Provenance::Exact);
    let mse = mse_population_raw(&head, &m, "y", "x").unwrap();
    let expected = m.cov("y", "y").unwrap().trace() + (m.mean("y").unwrap() - &head.intercept).norm_squared();
    assert!((mse - expected).abs() < 1e-12);
    assert!(affine_mse(&Matrix::zeros(3, 3), &Vector::zeros(2), &m, "y", "x").is_err());
}

#[test]
fn population_mse_agrees_with_monte_carlo() {
    let spec = random_sem(&mut rng(51), 2, 2, 2, 4, false).with_seed(52);
    let m = sem_to_moments(&spec).unwrap();
    let model = exact_model(&m, 0.6, 2, "s");
    let head = fit_linear_head(&model, &m, "y", "x").unwrap();
    let exact = mse_population(&head, &model, &m, "y", "x").unwrap();
    let n = 1_000_000;
    let data = sample(&spec, n).unwrap();
    let w = model.transform(&data.columns(6, 4).into_owned()).unwrap();
    let pred = head.predict(&w).unwrap();
    let errors: Vec<f64> = (0..n).map(|i| (pred.row(i) - data.columns(0, 2).row(i)).norm_squared()).collect();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    assert!((mean - exact).abs() <= 3.0 * (var / n as f64).sqrt(), "{mean} vs {exact}");
}

#[test]
fn toy_shift_favours_barycentric() {
    for rho in [0.5, 0.7, 0.9, -0.6] {
        let source = sem_to_moments(&SemSpec::toy(rho, 1.0, 1.0)).unwrap();
        let target = sem_to_moments(&SemSpec::toy(0.0, 1.0, 1.0)).unwrap();
        let ols = mse_population_raw(&fit_ols_baseline(&source, "y", "x", EXACT).unwrap(), &target, "y", "x").unwrap();
        let best = default_lambda_grid()
            .into_iter()
            .map(|l| {
                let model = exact_model(&source, l, 1, "z");
                let head = fit_linear_head(&model, &source, "y", "x").unwrap();
                mse_population(&head, &model, &target, "y", "x").unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best <= ols, "rho {rho}: {best} > {ols}");
    }
}

#[test]
fn conditional_correlation_examples() {
    let m = sem_to_moments(&SemSpec::toy(0.8, 1.0, 1.0)).unwrap();
    let sum = m
        .augment("w", &Matrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 1.0]), &Vector::zeros(1))
        .unwrap();
    assert!(conditional_correlation(&sum, "w", "z", "y", EXACT).unwrap() < 1e-9);

    let m = sem_to_moments(&random_sem(&mut rng(61), 2, 2, 2, 6, false)).unwrap();
    let model = exact_model(&m, 0.3, 3, "s");
    let own = model_conditional_correlation(&model, &m, "x", "x", "y", EXACT).unwrap();
    assert!((own - 3f64.sqrt()).abs() < 1e-9);
    let low = model_conditional_correlation(&exact_model(&m, 0.0, 2, "z"), &m, "x", "z", "y", EXACT).unwrap();
    let high = model_conditional_correlation(&exact_model(&m, 0.99, 2, "z"), &m, "x", "z", "y", EXACT).unwrap();
    assert!(high < low);
}

#[test]
fn independent_outcome_gives_zero_head() {
    // Y ⟂ X when the features load only on Z and Z ⟂ Y
    let m = sem_to_moments(&SemSpec::toy(0.0, 1.0, 1.0)).unwrap();
    let x1 = m.augment("x1", &Matrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0]), &Vector::zeros(1)).unwrap();
    let ols = fit_ols_baseline(&x1, "y", "x1", EXACT).unwrap();
    assert_eq!(ols.beta[(0, 0)], 0.0);
    assert_eq!(ols.intercept[0], 0.0);
}
