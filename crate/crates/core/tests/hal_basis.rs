use atmle::basis::*;
use proptest::prelude::*;

fn f(subset: &[usize], knots: &[f64], trt: bool) -> BasisFunction {
    BasisFunction {
        subset: subset.to_vec(),
        knots: knots.to_vec(),
        includes_treatment: trt,
    }
}

#[test]
fn indicator_evaluation() {
    let b = f(&[0, 2], &[0.0, 1.0], false);
    assert_eq!(b.eval(&[0.0, -5.0, 1.0], None), 1);
    assert_eq!(b.eval(&[-0.1, 9.0, 3.0], None), 0);
    assert_eq!(b.eval(&[0.5, 9.0, 0.99], None), 0);
    let t = f(&[1], &[0.5], true);
    assert_eq!(t.eval(&[0.0, 0.6], Some(1)), 1);
    assert_eq!(t.eval(&[0.0, 0.6], Some(0)), 0);
    assert_eq!(t.eval(&[0.0, 0.6], None), 0);
    assert_eq!(BasisFunction::intercept().eval(&[1.0], None), 1);
}

#[test]
fn knots_are_subsampled_quantiles() {
    assert_eq!(quantile_knots(&[3.0, 1.0, 2.0, 1.0], 10), vec![1.0, 2.0, 3.0]);
    let v: Vec<f64> = (0..10).map(f64::from).collect();
    assert_eq!(quantile_knots(&v, 4), vec![0.0, 2.0, 5.0, 7.0]);
}

#[test]
fn generated_basis_size() {
    let w: Vec<f64> = (0..40)
        .map(|i| (i % 20) as f64 / 20.0 + (i / 20) as f64 * 0.01)
        .collect();
    let b = generate_basis_from_points(&w, 2, Domain::WOnly, 2, 5).unwrap();
    assert!(b.functions[0].is_intercept());
    assert!(b.len() <= basis_cap(2, Domain::WOnly, 2, 5));
    assert!(b.functions.iter().all(|g| g.degree() <= 2 && !g.includes_treatment));
    let ba = generate_basis_from_points(&w, 2, Domain::WAndA, 1, 5).unwrap();
    assert!(ba.functions.iter().any(|g| g.includes_treatment && g.subset.is_empty()));
    assert!(generate_basis_from_points(&w, 2, Domain::WOnly, 0, 5).is_err());
}

#[test]
fn construction_is_validated() {
    assert!(BasisSet::new(Domain::WOnly, 2, vec![f(&[0], &[0.0], true)]).is_err());
    assert!(BasisSet::new(Domain::WOnly, 2, vec![f(&[3], &[0.0], false)]).is_err());
    assert!(BasisSet::new(Domain::WOnly, 2, vec![f(&[0], &[f64::NAN], false)]).is_err());
    assert!(BasisSet::new(Domain::WOnly, 2, vec![f(&[0], &[0.0], false), f(&[0], &[0.0], false)]).is_err());
    let b = BasisSet::new(Domain::WAndA, 2, vec![f(&[0], &[0.0], true)]).unwrap();
    assert_eq!(b.len(), 2);
    assert!(b.evaluate(&[0.0, 0.0], None).is_err());
    assert!(b.evaluate(&[0.0], Some(1)).is_err());
    assert_eq!(b.evaluate(&[0.0, 0.0], Some(1)).unwrap(), vec![1, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn design_matches_pointwise_evaluation(
        w in prop::collection::vec(-2.0f64..2.0, 3..90),
        a in prop::collection::vec(0u8..2, 30),
        degree in 1usize..3,
        knots in 1usize..6,
    ) {
        let d = 3;
        let n = (w.len() / d).min(a.len());
        let w = &w[..n * d];
        let a = &a[..n];
        let b = generate_basis_from_points(w, d, Domain::WAndA, degree, knots).unwrap();
        let cols = b.design_columns(w, Some(a));
        for i in 0..n {
            let row = b.evaluate(&w[i * d..(i + 1) * d], Some(a[i])).unwrap();
            for (j, col) in cols.iter().enumerate() {
                prop_assert_eq!(row[j] == 1, col.binary_search(&(i as u32)).is_ok());
            }
        }
        let at1 = b.design_columns_at(w, n, 1);
        prop_assert_eq!(at1, b.design_columns(w, Some(&vec![1; n])));
    }

    #[test]
    fn restrict_keeps_order(n_keep in 1usize..10) {
        let w: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b = generate_basis_from_points(&w, 1, Domain::WOnly, 1, 15).unwrap();
        let idx: Vec<usize> = (0..n_keep.min(b.len())).collect();
        let r = b.restrict(&idx);
        prop_assert_eq!(&r.functions[..], &b.functions[..idx.len()]);
    }
}
