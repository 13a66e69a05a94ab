use atmle::basis::*;
use atmle::data::*;
use atmle::nuisance::*;
use atmle::simulation::{generate, ScenarioId, ScenarioSpec};
use atmle::solvers::linalg::mat_vec;
use atmle::working_model::*;
use proptest::prelude::*;

fn manual(ds: &FusionDataset, theta: Vec<f64>, g1: f64, pi: f64) -> NuisanceFit {
    let n = ds.n();
    NuisanceFit {
        qbar: theta.clone(),
        qbar0: theta.clone(),
        qbar1: theta.clone(),
        theta,
        g1: vec![g1; n],
        pi: vec![pi; n],
        pi0: vec![pi; n],
        pi1: vec![pi; n],
        gdelta: vec![1.0; n],
        gtilde_delta: vec![1.0; n],
        summary: NuisanceSummary::default(),
        models: None,
    }
}

fn scenario(seed: u64) -> FusionDataset {
    generate(&ScenarioSpec::new(ScenarioId::A, 150, 2.0, seed)).unwrap()
}

#[test]
fn zero_response_gives_zero_coefficients() {
    let ds = scenario(1);
    let folds = make_folds(&ds, 5, 1).unwrap();
    let nuis = manual(&ds, ds.y().to_vec(), 0.6, 0.4);
    let basis = generate_basis(&ds, Domain::WOnly, 1, 5).unwrap();
    let m = learn_tau_a(&ds, &nuis, &basis, &folds, &WorkingModelOptions::default()).unwrap();
    assert!(m.beta_star.iter().all(|&b| b == 0.0));
    let basis_s = generate_basis(&ds, Domain::WAndA, 2, 4).unwrap();
    let m = learn_tau_s(&ds, &nuis, &basis_s, &folds, &WorkingModelOptions::default()).unwrap();
    assert!(m.beta_star.iter().all(|&b| b == 0.0));
}

#[test]
fn constant_half_propensity_scales_response() {
    let ds = scenario(2);
    let folds = make_folds(&ds, 5, 2).unwrap();
    let nuis = manual(&ds, vec![0.0; ds.n()], 0.5, 0.4);
    let opts = WorkingModelOptions {
        intercept_only: true,
        ..WorkingModelOptions::default()
    };
    let basis = generate_basis(&ds, Domain::WOnly, 1, 5).unwrap();
    let m = learn_tau_a(&ds, &nuis, &basis, &folds, &opts).unwrap();
    assert!(m.is_intercept_only());
    let want: f64 = (0..ds.n())
        .map(|i| 2.0 * (2.0 * ds.a()[i] as f64 - 1.0) * ds.y()[i])
        .sum::<f64>()
        / ds.n() as f64;
    assert!((m.beta_star[0] - want).abs() < 1e-10, "{} vs {want}", m.beta_star[0]);
    assert!((m.gram_inverse[0][0] - 4.0).abs() < 1e-12);
}

#[test]
fn enrollment_model_needs_external_rows() {
    let full = scenario(3);
    let idx: Vec<usize> = (0..full.n()).filter(|&i| full.s()[i] == 1).collect();
    let ds = full.subset(&idx).unwrap();
    let folds = make_folds(&ds, 5, 3).unwrap();
    let nuis = manual(&ds, vec![0.0; ds.n()], 0.5, 0.9);
    let basis = generate_basis(&ds, Domain::WAndA, 1, 3).unwrap();
    assert!(learn_tau_s(&ds, &nuis, &basis, &folds, &WorkingModelOptions::default()).is_err());
    let wrong = generate_basis(&ds, Domain::WOnly, 1, 3).unwrap();
    assert!(learn_tau_s(
        &full,
        &manual(&full, vec![0.0; full.n()], 0.5, 0.4),
        &wrong,
        &make_folds(&full, 5, 3).unwrap(),
        &WorkingModelOptions::default()
    )
    .is_err());
}

#[test]
fn prediction_checks_arguments() {
    let basis = BasisSet::new(
        Domain::WAndA,
        2,
        vec![BasisFunction {
            subset: vec![1],
            knots: vec![0.0],
            includes_treatment: true,
        }],
    )
    .unwrap();
    let m = fixed_model(WorkingModelKind::EnrollmentEffect, basis.clone(), vec![0.5, -1.0]).unwrap();
    assert_eq!(m.predict(&[0.0, 1.0], Some(1)).unwrap(), -0.5);
    assert_eq!(m.predict(&[0.0, 1.0], Some(0)).unwrap(), 0.5);
    assert!(m.predict(&[0.0, 1.0], None).is_err());
    assert!(m.predict(&[0.0], Some(1)).is_err());
    assert_eq!(m.predict_rows(&[0.0, 1.0, 0.0, -1.0], Some(1)), vec![-0.5, 0.5]);
    assert!(fixed_model(WorkingModelKind::EnrollmentEffect, basis, vec![1.0]).is_err());
}

#[test]
fn refit_on_same_data_reproduces_model() {
    let ds = scenario(4);
    let folds = make_folds(&ds, 5, 4).unwrap();
    let nuis = fit_nuisances(&ds, &folds, &NuisanceOptions::default()).unwrap();
    let basis = generate_basis(&ds, Domain::WAndA, 2, 5).unwrap();
    let m = learn_tau_s(&ds, &nuis, &basis, &folds, &WorkingModelOptions::default()).unwrap();
    let r = m.refit(&ds, &nuis).unwrap();
    assert_eq!(r.support, m.support);
    for (a, b) in r.beta_star.iter().zip(&m.beta_star) {
        assert!((a - b).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn relaxed_fit_solves_coefficient_scores(seed in 0u64..1_000) {
        let ds = scenario(seed);
        let folds = make_folds(&ds, 5, seed).unwrap();
        let nuis = fit_nuisances(&ds, &folds, &NuisanceOptions::default()).unwrap();
        let ba = generate_basis(&ds, Domain::WOnly, 1, 8).unwrap();
        let bs = generate_basis(&ds, Domain::WAndA, 2, 5).unwrap();
        let opts = WorkingModelOptions::default();
        for m in [
            learn_tau_a(&ds, &nuis, &ba, &folds, &opts).unwrap(),
            learn_tau_s(&ds, &nuis, &bs, &folds, &opts).unwrap(),
        ] {
            prop_assert!(m.basis.functions[0].is_intercept());
            let r = mat_vec(&m.gram_inverse, &m.score_residuals(&ds, &nuis));
            prop_assert!(r.iter().all(|v| v.abs() < 1e-8), "{:?}", r);
        }
    }
}
