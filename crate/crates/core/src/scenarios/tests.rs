use super::*;
use crate::bottom_structure::instances;
use crate::lent_particle::{gamma_generic, gamma_of_solution, gamma_rho_mc};
use crate::poisson_measure::{simulate_path, Atom};
use crate::sde::{Coefficients, FnCoefficients};
use proptest::prelude::*;

fn one_d_model() -> TruncatedLevyModel {
    TruncatedLevyModel::new(Arc::new(PowerLaw::symmetric(0.5, 1.0, 0.9).unwrap()), 0.05).unwrap()
}

fn planar_model() -> TruncatedLevyModel {
    TruncatedLevyModel::new(Arc::new(RadialPowerLaw::isotropic(2, 0.5, 1.0, 0.9).unwrap()), 0.1).unwrap()
}

fn config_1d(atoms: &[(f64, f64)]) -> JumpConfiguration {
    let atoms = atoms
        .iter()
        .map(|&(time, u)| Atom { time, mark: DVector::from_element(1, u) })
        .collect();
    JumpConfiguration::new(atoms, 1.0, 1).unwrap()
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).norm() <= tol * (1.0 + b.norm())
}

#[test]
fn doleans_without_jumps_is_degenerate() {
    let r = doleans_on(&one_d_model(), &config_1d(&[]), 1.0).unwrap();
    assert_eq!(r.y, 0.0);
    assert!((r.e - 1.0).abs() < 1e-15);
    assert!(r.closed_form.norm() == 0.0);
    assert!(r.pipeline.matrix.norm() < 1e-12);
}

#[test]
fn doleans_single_jump_by_hand() {
    // Y = 0.4, E = 1.4, gradient (1, E/(1+u)) = (1, 1), γ weight u² = 0.16
    let r = doleans_on(&one_d_model(), &config_1d(&[(0.5, 0.4)]), 1.0).unwrap();
    assert!((r.y - 0.4).abs() < 1e-14);
    assert!((r.e - 1.4).abs() < 1e-12);
    let expected = DMatrix::from_element(2, 2, 0.16);
    assert!(close(&r.closed_form, &expected, 1e-12));
    assert!(close(&r.pipeline.matrix, &expected, 1e-9));
}

#[test]
fn doleans_two_jumps_by_hand() {
    let r = doleans_on(&one_d_model(), &config_1d(&[(0.2, 0.3), (0.7, -0.2)]), 1.0).unwrap();
    assert!((r.e - 1.04).abs() < 1e-12);
    let v1 = DVector::from_column_slice(&[1.0, 0.8]);
    let v2 = DVector::from_column_slice(&[1.0, 1.3]);
    let expected = &v1 * v1.transpose() * 0.09 + &v2 * v2.transpose() * 0.04;
    assert!(close(&r.closed_form, &expected, 1e-12));
    assert!(close(&r.pipeline.matrix, &expected, 1e-9));
}

#[test]
fn doleans_pipeline_matches_closed_form_on_random_paths() {
    let model = one_d_model();
    for seed in 0..8 {
        let r = doleans_dade(&model, 1.0, seed).unwrap();
        assert!(
            r.pipeline.relative_distance(&r.closed_form) <= 1e-9,
            "seed {seed}: {}",
            r.pipeline.relative_distance(&r.closed_form)
        );
    }
}

#[test]
fn doleans_pair_generic_and_rho_agree() {
    let model = one_d_model();
    let config = config_1d(&[(0.2, 0.3), (0.5, 0.45), (0.7, -0.2)]);
    let pair = DoleansPair { model: model.clone(), t: 1.0 };
    let bs = instances::intro_1d();
    let generic = gamma_generic(&pair, &config, &bs).unwrap();
    let closed = doleans_on(&model, &config, 1.0).unwrap().closed_form;
    assert!(generic.relative_distance(&closed) < 1e-12);
    let mc = gamma_rho_mc(&pair, &config, &bs, 20_000, 9).unwrap();
    let se = mc.standard_errors.clone().unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((mc.matrix[(i, j)] - closed[(i, j)]).abs() <= 4.0 * se[(i, j)] + 1e-12);
        }
    }
}

#[test]
fn levy_area_isotropic_matches_closed_form() {
    let model = planar_model();
    for seed in 0..6 {
        let r = levy_area(&model, 1.0, seed, LevyAreaCase::Isotropic).unwrap();
        let d = r.pipeline.relative_distance(&r.closed_form);
        assert!(d <= 1e-9, "seed {seed}: {d}");
    }
}

#[test]
fn levy_area_graph_matches_closed_form() {
    let model = one_d_model();
    for seed in 0..6 {
        let r = levy_area(&model, 1.0, seed, LevyAreaCase::Graph).unwrap();
        let d = r.pipeline.relative_distance(&r.closed_form);
        assert!(d <= 1e-9, "seed {seed}: {d}");
        let x = r.trajectory.final_state();
        assert!((x[1] - r.config.atoms_until(1.0).iter().map(|a| a.mark[0].powi(2)).sum::<f64>()).abs() < 1e-9);
    }
}

#[test]
fn levy_area_single_jump_has_rank_at_most_two() {
    let model = planar_model();
    let config = JumpConfiguration::new(
        vec![Atom { time: 0.4, mark: DVector::from_column_slice(&[0.3, -0.2]) }],
        1.0,
        2,
    )
    .unwrap();
    let r = levy_area_on(&model, &config, 1.0, LevyAreaCase::Isotropic).unwrap();
    assert!(r.span_dim <= 2);
    let rank = crate::density_criteria::rank_diagnostic(&r.closed_form, 1e-8).unwrap().rank;
    assert!(rank <= 2);
}

#[test]
fn graph_lambda_rejects_points_off_the_graph() {
    assert!((graph_lambda(0.3, 0.09).unwrap() - 0.6).abs() < 1e-15);
    assert!(matches!(graph_lambda(0.3, 0.1), Err(Error::Domain(_))));
}

#[test]
fn scenarios_by_name() {
    for name in ["doleans", "levy-area-1", "levy-area-2", "zero"] {
        assert_eq!(Scenario::by_name(name).unwrap().name, name);
    }
    assert!(matches!(Scenario::by_name("nope"), Err(Error::Configuration(_))));
}

fn constant_sigma() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.8])
}

fn mckean_config(sigma: SigmaFn, particles: usize, iters: usize) -> McKeanConfig {
    McKeanConfig {
        sigma,
        initial: McKeanConfig::gaussian_initial(DVector::from_column_slice(&[0.1, -0.2]), 0.0),
        state_dim: 2,
        particles,
        picard_iters: iters,
        horizon: 1.0,
        step: 0.05,
        tolerance: 1e-3,
    }
}

#[test]
fn mckean_with_constant_sigma_is_the_plain_equation() {
    let model = planar_model();
    let bs = instances::isotropic(2);
    let a = constant_sigma();
    let cfg = mckean_config(Arc::new(move |_, _| constant_sigma()), 12, 2);
    let res = mckean_vlasov(&cfg, &model, &bs, 5).unwrap();
    let coeffs = FnCoefficients::new(2, 2, Arc::new(move |_, _, u| &a * u));
    let config = simulate_path(&model, 1.0, 5, 0).unwrap();
    let x0 = DVector::from_column_slice(&[0.1, -0.2]);
    let (_, plain) = gamma_of_solution(&coeffs, &model, &config, &x0, 1.0, 0.05, &bs).unwrap();
    assert!(res.gamma.relative_distance(&plain.matrix) < 1e-6);
    assert!(res.picard_residuals.last().unwrap() < &1e-12);
    assert!(res.aa_star_at_start.full_rank);
}

#[test]
fn mckean_picard_residual_decreases() {
    let model = planar_model();
    let bs = instances::isotropic(2);
    let sigma: SigmaFn = Arc::new(|x, law| {
        let m = law.mean();
        let s = 1.0 + 0.3 * (x[0] - m[0]).tanh();
        DMatrix::from_row_slice(2, 2, &[s, 0.1, 0.0, 1.0 + 0.2 * m[1].sin()])
    });
    let mut cfg = mckean_config(sigma, 40, 4);
    cfg.initial = McKeanConfig::gaussian_initial(DVector::from_column_slice(&[0.0, 0.5]), 0.3);
    let res = mckean_vlasov(&cfg, &model, &bs, 11).unwrap();
    let r = &res.picard_residuals;
    assert!(r.len() == 4);
    assert!(r[3] < r[1], "{r:?}");
    assert!(res.aa_star_at_start.full_rank);
}

#[test]
fn mckean_rejects_too_few_particles() {
    let cfg = mckean_config(Arc::new(|_, _| constant_sigma()), 3, 1);
    let err = mckean_vlasov(&cfg, &planar_model(), &instances::isotropic(2), 0).unwrap_err();
    assert!(matches!(err, Error::Configuration(_)));
}

#[test]
fn zeta_reference_values() {
    assert!((zeta(1.0, 1).unwrap() - 1.0 / std::f64::consts::PI).abs() < 1e-14);
    // Cauchy in the plane: ζ(1, 2) = 1 / (2π)
    assert!((zeta(1.0, 2).unwrap() - 0.5 / std::f64::consts::PI).abs() < 1e-14);
    assert!(matches!(zeta(2.0, 1), Err(Error::Domain(_))));
    assert!(matches!(zeta(0.0, 1), Err(Error::Domain(_))));
}

#[test]
fn zeta_normalizes_the_fourier_identity() {
    for beta in [0.5, 1.0, 1.5] {
        for xi in [0.5, 1.0, 3.0] {
            let e = zeta_identity_error(beta, xi).unwrap();
            assert!(e < 1e-4, "β={beta} ξ={xi}: {e}");
        }
    }
}

#[test]
fn pushforward_has_the_stable_density() {
    for alpha in [0.5, 1.0, 1.7] {
        assert!(stable_like_pushforward_check(alpha, 1.0, 1, 200).unwrap() < 1e-10);
    }
}

fn band_alpha() -> AlphaFn {
    Arc::new(|x: &State| 1.0 + 0.3 * x[0].sin())
}

#[test]
fn coefficient_domain_checks() {
    let a = band_alpha();
    let x = DVector::from_element(1, 0.0);
    let s = DVector::from_element(1, -1.0);
    let c = stable_like_coefficient(&a, (0.6, 1.4), 1.0, &x, 0.0, &s).unwrap();
    assert!((c[0] + 1.0).abs() < 1e-14);
    assert!(matches!(stable_like_coefficient(&a, (0.6, 1.4), 1.0, &x, -1.0, &s), Err(Error::Domain(_))));
    let bad = DVector::from_element(1, 0.5);
    assert!(matches!(stable_like_coefficient(&a, (0.6, 1.4), 1.0, &x, 1.0, &bad), Err(Error::Domain(_))));
    assert!(matches!(stable_like_coefficient(&a, (1.1, 1.4), 1.0, &x, 1.0, &s), Err(Error::Model(_))));
}

#[test]
fn stable_like_jump_du_matches_finite_differences() {
    let sl = StableLike::new(band_alpha(), (0.6, 1.4), 1.0, 2, 1e3).unwrap();
    let x = DVector::from_column_slice(&[0.3, 0.0]);
    let u = DVector::from_column_slice(&[1.2, -0.7]);
    let exact = sl.jump_du(0.0, &x, &u);
    let fd = crate::sde::central_jacobian(|v| sl.jump(0.0, &x, v), &u, 1e-6);
    assert!((exact - fd).norm() < 1e-7);
}

#[test]
fn generator_check_one_dimensional() {
    let sl = StableLike::new(band_alpha(), (0.6, 1.4), 1.0, 1, 1e4).unwrap();
    let x = DVector::from_element(1, 0.0);
    let f = |y: &State| y[0].cos();
    let g = stable_like_generator_check(&sl, &x, &f, 1e-3, 100_000, 3).unwrap();
    assert!(g.passed, "{g:?}");
    assert!(g.quadrature < 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn doleans_closed_form_is_invariant_under_relabeling(
        marks in proptest::collection::vec(-0.45f64..0.45, 1..5),
    ) {
        let marks: Vec<f64> = marks.into_iter().filter(|u| u.abs() > 0.06).collect();
        prop_assume!(!marks.is_empty());
        let n = marks.len();
        let forward: Vec<(f64, f64)> = marks.iter().enumerate().map(|(i, &u)| ((i + 1) as f64 / (n + 1) as f64, u)).collect();
        let reversed: Vec<(f64, f64)> = marks.iter().rev().enumerate().map(|(i, &u)| ((i + 1) as f64 / (n + 1) as f64, u)).collect();
        let model = one_d_model();
        let a = doleans_on(&model, &config_1d(&forward), 1.0).unwrap();
        let b = doleans_on(&model, &config_1d(&reversed), 1.0).unwrap();
        prop_assert!(close(&a.closed_form, &b.closed_form, 1e-12));
        prop_assert!((a.e - b.e).abs() < 1e-12);
    }
}

#[test]
fn generator_check_planar() {
    let sl = StableLike::new(Arc::new(|x: &State| 1.2 + 0.2 * x[1].tanh()), (0.8, 1.5), 1.0, 2, 1e4).unwrap();
    let x = DVector::from_column_slice(&[0.2, -0.1]);
    let f = |y: &State| (y[0] - 0.3 * y[1]).cos() * (-0.5 * y[1] * y[1]).exp();
    let g = stable_like_generator_check(&sl, &x, &f, 1e-3, 50_000, 4).unwrap();
    assert!(g.passed, "{g:?}");
    assert!((g.quadrature - g.quadrature_full).abs() < 0.05 * g.quadrature_full.abs());
}
