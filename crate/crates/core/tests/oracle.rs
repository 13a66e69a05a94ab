use atmle::basis::{BasisFunction, BasisSet, Domain};
use atmle::estimators::{atmle, BasisOptions, EstimatorConfig};
use atmle::nuisance::{Learner, NuisanceOptions};
use atmle::oracle::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn atom(s: u8, w: f64, a: u8, y: f64, p: f64) -> Atom {
    Atom { s, w: vec![w], a, y, p }
}

fn random(seed: u64, eco: bool) -> DiscreteDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = RandomDistributionOptions {
        external_controls_only: eco,
        ..Default::default()
    };
    random_distribution(&mut rng, &opts).unwrap()
}

/// Two covariate values; every stratum has outcomes {0, 1} with the given
/// masses.
fn two_point(masses: [[f64; 2]; 8], external_shift: f64) -> DiscreteDistribution {
    let mut atoms = Vec::new();
    let mut k = 0;
    for w in [0.0, 1.0] {
        for s in [0u8, 1] {
            for a in [0u8, 1] {
                for (j, y) in [0.0, 1.0].into_iter().enumerate() {
                    let y = if s == 0 { y + external_shift } else { y };
                    atoms.push(atom(s, w, a, y, masses[k][j]));
                }
                k += 1;
            }
        }
    }
    let total: f64 = atoms.iter().map(|a| a.p).sum();
    for a in &mut atoms {
        a.p /= total;
    }
    DiscreteDistribution::new(atoms).unwrap()
}

#[test]
fn outcome_independent_of_treatment_gives_zero() {
    let m = [
        [1.0, 2.0],
        [1.0, 2.0],
        [3.0, 1.0],
        [3.0, 1.0],
        [2.0, 2.0],
        [2.0, 2.0],
        [1.0, 4.0],
        [1.0, 4.0],
    ];
    let d = two_point(m, 0.0);
    assert!(exact_psi(&d).abs() < 1e-15);
}

#[test]
fn zero_enrollment_effect_means_no_bias() {
    // Trial and external strata share outcome laws within each (w, a).
    let mut atoms = Vec::new();
    for (w, mu) in [(0.0, 0.2), (1.0, 0.7)] {
        for a in [0u8, 1] {
            let q = mu + 0.1 * a as f64;
            for (s, ps) in [(0u8, 0.3), (1u8, 0.2)] {
                atoms.push(atom(s, w, a, 1.0, ps * q / 4.0));
                atoms.push(atom(s, w, a, 0.0, ps * (1.0 - q) / 4.0));
            }
        }
    }
    let total: f64 = atoms.iter().map(|a| a.p).sum();
    atoms.iter_mut().for_each(|a| a.p /= total);
    let d = DiscreteDistribution::new(atoms).unwrap();
    assert!(exact_psi_sharp(&d).abs() < 1e-15);
    assert!((exact_psi_tilde(&d) - exact_psi(&d)).abs() < 1e-15);
}

#[test]
fn external_controls_only_special_case() {
    for seed in 0..10 {
        let d = random(seed, true);
        assert!(d.external_controls_only());
        let f = d.functionals();
        // With no external treated mass, only the control-arm term remains.
        let special: f64 = (0..d.cells().len())
            .map(|c| f.p_w[c] * (1.0 - f.pi1[0][c]) * f.tau_s[0][c])
            .sum();
        let difference = exact_psi_tilde(&d) - exact_psi(&d);
        assert!((special - difference).abs() < 1e-12);
        assert!((exact_psi_sharp(&d) - difference).abs() < 1e-12);
    }
}

#[test]
fn psi_computed_two_ways_on_three_point_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = RandomDistributionOptions {
        d: 1,
        grid: 3,
        ..Default::default()
    };
    let d = random_distribution(&mut rng, &opts).unwrap();
    assert!((exact_psi(&d) - exact_psi_weighted(&d)).abs() < 1e-12);
}

#[test]
fn projection_reproduces_effect_in_span() {
    // τ_A(w) = 1 + 2 I(w >= 1) is spanned by {1, I(w >= 1)}.
    let mut atoms = Vec::new();
    for (w, tau) in [(0.0, 1.0), (1.0, 3.0)] {
        for s in [0u8, 1] {
            atoms.push(atom(s, w, 0, 0.0, 0.1));
            atoms.push(atom(s, w, 1, tau, 0.1 + 0.05 * w));
        }
    }
    let total: f64 = atoms.iter().map(|a| a.p).sum();
    atoms.iter_mut().for_each(|a| a.p /= total);
    let d = DiscreteDistribution::new(atoms).unwrap();
    let basis = BasisSet::new(
        Domain::WOnly,
        1,
        vec![
            BasisFunction::intercept(),
            BasisFunction {
                subset: vec![0],
                knots: vec![1.0],
                includes_treatment: false,
            },
        ],
    )
    .unwrap();
    let p = exact_projection_beta(&d, &basis, ProjectionTarget::TauA).unwrap();
    assert!((p.beta()[0] - 1.0).abs() < 1e-12);
    assert!((p.beta()[1] - 2.0).abs() < 1e-12);
}

#[test]
fn intercept_only_projection_is_weighted_mean() {
    let d = random(17, false);
    let f = d.functionals();
    let k = d.cells().len();
    let basis_a = BasisSet::intercept_only(Domain::WOnly, d.d());
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..k {
        let wgt = f.p_w[c] * f.g1[c] * (1.0 - f.g1[c]);
        num += wgt * (f.qbar[1][c] - f.qbar[0][c]);
        den += wgt;
    }
    let p = exact_projection_beta(&d, &basis_a, ProjectionTarget::TauA).unwrap();
    assert!((p.beta()[0] - num / den).abs() < 1e-12);

    let basis_s = BasisSet::intercept_only(Domain::WAndA, d.d());
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..k {
        for a in 0..2 {
            let wgt = f.p_wa[a][c] * f.pi1[a][c] * (1.0 - f.pi1[a][c]);
            num += wgt * f.tau_s[a][c];
            den += wgt;
        }
    }
    let p = exact_projection_beta(&d, &basis_s, ProjectionTarget::TauS).unwrap();
    assert!((p.beta()[0] - num / den).abs() < 1e-12);
}

#[test]
fn projection_is_idempotent() {
    // Replace outcomes by the projected conditional effect and project again.
    let d = random(23, false);
    let basis = staircase_basis(&d, Domain::WOnly).unwrap();
    let beta = exact_projection_beta(&d, &basis, ProjectionTarget::TauA)
        .unwrap()
        .beta()
        .to_vec();
    let atoms: Vec<Atom> = d
        .atoms()
        .iter()
        .map(|at| {
            let phi: f64 = basis
                .functions
                .iter()
                .zip(&beta)
                .map(|(f, b)| f.eval(&at.w, None) as f64 * b)
                .sum();
            Atom {
                y: at.a as f64 * phi,
                ..at.clone()
            }
        })
        .collect();
    let projected = DiscreteDistribution::new(atoms).unwrap();
    let again = exact_projection_beta(&projected, &basis, ProjectionTarget::TauA).unwrap();
    for (x, y) in beta.iter().zip(again.beta()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn random_two_by_two_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let opts = RandomDistributionOptions {
        d: 1,
        grid: 2,
        y_values: 2,
        external_controls_only: false,
    };
    let d = random_distribution(&mut rng, &opts).unwrap();
    for _ in 0..5 {
        let h = random_direction(&d, &mut rng);
        let c = pathwise_check(&d, &Parameter::Psi, &h, 1e-5, None).unwrap();
        assert!(c.discrepancy < 1e-6, "{c:?}");
    }
}

#[test]
fn intercept_only_sharp_projection_gradient() {
    let d = random(41, false);
    let basis = BasisSet::intercept_only(Domain::WAndA, d.d());
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let h = random_direction(&d, &mut rng);
        let c = pathwise_check(&d, &Parameter::SharpProjection(basis.clone()), &h, 1e-5, None).unwrap();
        assert!(c.discrepancy < 1e-6 * (1.0 + c.derivative.abs()), "{c:?}");
    }
}

#[test]
fn non_mean_zero_direction_rejected() {
    let d = random(3, false);
    let h = vec![1.0; d.atoms().len()];
    assert!(pathwise_check(&d, &Parameter::Psi, &h, 1e-5, None).is_err());
}

#[test]
fn invalid_mass_rejected() {
    let atoms = vec![atom(1, 0.0, 1, 1.0, 0.5), atom(1, 0.0, 0, 0.0, 0.4)];
    assert!(DiscreteDistribution::new(atoms).is_err());
}

#[test]
fn psi2_gradient_vanishes_off_trial() {
    let d = random(8, false);
    let g = gradient(&d, &Parameter::Psi2, None).unwrap();
    for (at, v) in d.atoms().iter().zip(&g) {
        if at.s == 0 {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn trial_independent_of_covariates_favours_psi() {
    // P(S = 1 | W) constant: Var D_Ψ <= Var D_Ψ₂.
    let mut atoms = Vec::new();
    for (w, pw) in [(0.0, 0.3), (1.0, 0.7)] {
        for (s, ps) in [(0u8, 0.6), (1u8, 0.4)] {
            for a in [0u8, 1] {
                for (y, py) in [(0.0, 0.5 - 0.2 * w), (1.0 + w * 2.0 + a as f64, 0.5 + 0.2 * w)] {
                    atoms.push(atom(s, w, a, y, pw * ps * 0.5 * py));
                }
            }
        }
    }
    let d = DiscreteDistribution::new(atoms).unwrap();
    let var = |g: &[f64]| d.expect(&g.iter().map(|v| v * v).collect::<Vec<_>>());
    let v1 = var(&gradient(&d, &Parameter::Psi, None).unwrap());
    let v2 = var(&gradient(&d, &Parameter::Psi2, None).unwrap());
    assert!(v1 <= v2 + 1e-12, "{v1} > {v2}");
}

#[test]
fn sweep_passes_and_mutation_fails() {
    let opts = SweepOptions {
        distributions: 10,
        directions: 2,
        ..Default::default()
    };
    assert!(run_sweep(&opts, None).passed());
    let mutated = run_sweep(&opts, Some(Mutation::FlipSharpPiSign));
    assert!(!mutated.passed());
    assert!(!mutated.check("pathwise-sharp-projection[s|w,a]").unwrap().passed);
    assert!(mutated.check("pathwise-psi").unwrap().passed);
}

#[test]
fn empty_sweep_passes_trivially() {
    let opts = SweepOptions {
        distributions: 0,
        ..Default::default()
    };
    let r = run_sweep(&opts, None);
    assert!(r.checks.is_empty() && r.passed());
}

#[test]
fn plug_in_consistency_from_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let opts = RandomDistributionOptions {
        d: 2,
        grid: 3,
        y_values: 3,
        external_controls_only: false,
    };
    let dist = random_distribution(&mut rng, &opts).unwrap();
    let ds = dist.sample(200_000, 78).unwrap();
    // Knots at every grid value span every function of (W, A) on the grid,
    // for the nuisances as well as the working models.
    let config = EstimatorConfig {
        nuisance: NuisanceOptions {
            library: vec![Learner::Hal {
                max_degree: 2,
                max_knots: 3,
                n_lambda: 30,
            }],
            ..Default::default()
        },
        tau_a_basis: BasisOptions {
            max_degree: 2,
            max_knots: 3,
        },
        tau_s_basis: BasisOptions {
            max_degree: 2,
            max_knots: 3,
        },
        ..Default::default()
    };
    let r = atmle(&ds, &config).unwrap();
    let truth = exact_psi(&dist);
    assert!((r.psi - truth).abs() < 3.0 * r.se, "{} vs {truth} (se {})", r.psi, r.se);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bias_parameter_two_forms_agree(seed in any::<u64>(), eco in any::<bool>()) {
        let d = random(seed, eco);
        let diff = exact_psi_tilde(&d) - exact_psi_sharp(&d) - exact_psi(&d);
        prop_assert!(diff.abs() < 1e-10);
    }

    #[test]
    fn gradients_have_mean_zero(seed in any::<u64>()) {
        let d = random(seed, false);
        let params = [
            Parameter::Psi,
            Parameter::Psi2,
            Parameter::PooledProjection(staircase_basis(&d, Domain::WOnly).unwrap()),
            Parameter::SharpProjection(staircase_basis(&d, Domain::WAndA).unwrap()),
        ];
        for p in &params {
            let g = gradient(&d, p, None).unwrap();
            prop_assert!(d.expect(&g).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbation_preserves_mass(seed in any::<u64>(), eps in -0.5f64..0.5) {
        let d = random(seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let h = random_direction(&d, &mut rng);
        let moved = d.perturbed(&h, eps).unwrap();
        let total: f64 = moved.atoms().iter().map(|a| a.p).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
