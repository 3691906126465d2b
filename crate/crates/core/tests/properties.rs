//! Cross-module invariants through the public API.

use std::sync::Arc;

use lent_core::bottom_structure::{gamma_scalar, gradient_flat, instances};
use lent_core::density_criteria::monte_carlo_rank_stats;
use lent_core::lent_particle::{gamma_remark3, gamma_theorem9, relative_frobenius};
use lent_core::poisson_measure::{simulate_configuration, PowerLaw, RadialPowerLaw};
use lent_core::scenarios::{levy_area_on, stable_like_coefficient, AlphaFn, LevyAreaCase, Scenario};
use lent_core::sde::{solve_with_flow, Feature, FeatureLinear};
use lent_core::{InverseMethod, JumpConfiguration, Mark, State, TruncatedLevyModel};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(dim: usize, eps: f64) -> TruncatedLevyModel {
    let measure: Arc<dyn lent_core::LevyMeasure> = if dim == 1 {
        Arc::new(PowerLaw::symmetric(0.5, 1.0, 0.9).unwrap())
    } else {
        Arc::new(RadialPowerLaw::isotropic(dim, 0.5, 1.0, 0.9).unwrap())
    };
    TruncatedLevyModel::new(measure, eps).unwrap()
}

#[test]
fn flow_formulas_agree_on_random_linear_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for run in 0..24 {
        let d = 1 + run % 3;
        let r = 1 + run % 2;
        let m = model(r, 0.25);
        let mut mat = |s: f64| DMatrix::from_fn(d, d, |_, _| s * (rng.random::<f64>() - 0.5));
        let mats: Vec<_> = (0..r).map(|_| mat(0.8)).collect();
        let drift = mat(1.0);
        let offsets = (0..r).map(|_| DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5)).collect();
        let coeffs = FeatureLinear::new(r, (0..r).map(Feature::Coord).collect(), mats, offsets)
            .unwrap()
            .with_drift(drift, DVector::zeros(d))
            .bind(&m)
            .unwrap();
        let config = simulate_configuration(&m, 1.0, run as u64).unwrap();
        let x0 = DVector::from_element(d, 0.1);
        let traj = solve_with_flow(&coeffs, &m, &config, &x0, 1.0, 0.05, InverseMethod::PerStepInverse).unwrap();
        let bs = instances::isotropic(r);
        let a = gamma_theorem9(&traj, &coeffs, &bs, 1.0).unwrap();
        let b = gamma_remark3(&traj, &coeffs, &bs, 1.0).unwrap();
        assert!(relative_frobenius(&a.matrix, &b.matrix) <= 1e-10, "run {run}");
    }
}

#[test]
fn levy_area_gamma_ignores_construction_order() {
    let m = model(2, 0.1);
    let config = simulate_configuration(&m, 1.0, 12).unwrap();
    let mut atoms = config.atoms().to_vec();
    atoms.reverse();
    let k = atoms.len() / 3;
    atoms.rotate_left(k);
    let shuffled = JumpConfiguration::new(atoms, 1.0, 2).unwrap();
    let a = levy_area_on(&m, &config, 1.0, LevyAreaCase::Isotropic).unwrap();
    let b = levy_area_on(&m, &shuffled, 1.0, LevyAreaCase::Isotropic).unwrap();
    assert!(relative_frobenius(&a.pipeline.matrix, &b.pipeline.matrix) <= 1e-12);
}

#[test]
fn rank_fraction_grows_as_truncation_shrinks() {
    let scenario = Scenario::by_name("levy-area-1").unwrap();
    let table = monte_carlo_rank_stats(&scenario, 40, &[0.05, 0.4, 0.8], 2).unwrap();
    let eps: Vec<f64> = table.rows.iter().map(|r| r.epsilon).collect();
    assert_eq!(eps, vec![0.8, 0.4, 0.05]);
    assert!(table.monotone);
    assert_eq!(table.rows[2].full_rank_fraction, 1.0);
}

#[test]
fn zero_coefficients_are_never_full_rank() {
    let scenario = Scenario::by_name("zero").unwrap();
    let table = monte_carlo_rank_stats(&scenario, 10, &[0.1], 0).unwrap();
    assert_eq!(table.rows[0].full_rank_fraction, 0.0);
}

#[test]
fn constants_carry_no_energy() {
    for bs in instances::standard_instances(2) {
        let u = DVector::from_column_slice(&[0.3, -0.2]);
        let zero = DVector::zeros(2);
        assert_eq!(gamma_scalar(&zero, &u, &bs).unwrap(), 0.0);
        let r = DVector::from_column_slice(&[1.3, -0.4]);
        assert_eq!(gradient_flat(&zero, &u, &r, &bs).unwrap(), 0.0);
    }
}

fn alpha() -> AlphaFn {
    Arc::new(|x: &State| 1.0 + 0.35 * (x[0] * 0.7).sin())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_rule_holds_per_draw(
        u in (0.05f64..0.45, -0.45f64..-0.05),
        r in (-3.0f64..3.0, -3.0f64..3.0),
        a in -2.0f64..2.0,
    ) {
        // f(u) = a u1 u2 + sin u1, φ = exp
        let u: Mark = DVector::from_column_slice(&[u.0, u.1]);
        let r = DVector::from_column_slice(&[r.0, r.1]);
        let f = a * u[0] * u[1] + u[0].sin();
        let grad = DVector::from_column_slice(&[a * u[1] + u[0].cos(), a * u[0]]);
        for bs in instances::standard_instances(2) {
            let lhs = gradient_flat(&(&grad * f.exp()), &u, &r, &bs).unwrap();
            let rhs = f.exp() * gradient_flat(&grad, &u, &r, &bs).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + rhs.abs()));
            let g_lhs = gamma_scalar(&(&grad * f.exp()), &u, &bs).unwrap();
            let g_rhs = f.exp().powi(2) * gamma_scalar(&grad, &u, &bs).unwrap();
            prop_assert!((g_lhs - g_rhs).abs() <= 1e-13 * (1.0 + g_rhs.abs()));
        }
    }

    #[test]
    fn stable_like_coefficient_decreases_in_z(
        x in -3.0f64..3.0,
        z in 0.0f64..50.0,
        dz in 1e-3f64..5.0,
    ) {
        let s = DVector::from_element(1, 1.0);
        let x = DVector::from_element(1, x);
        let c1 = stable_like_coefficient(&alpha(), (0.6, 1.4), 1.0, &x, z, &s).unwrap()[0];
        let c2 = stable_like_coefficient(&alpha(), (0.6, 1.4), 1.0, &x, z + dz, &s).unwrap()[0];
        prop_assert!(c2 < c1);
        prop_assert!(c1 <= 1.0);
        let xb = &x + DVector::from_element(1, 1e-7);
        let c3 = stable_like_coefficient(&alpha(), (0.6, 1.4), 1.0, &xb, z, &s).unwrap()[0];
        prop_assert!((c3 - c1).abs() < 1e-5);
    }
}
