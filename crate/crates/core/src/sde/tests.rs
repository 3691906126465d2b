use super::*;
use crate::poisson_measure::{Atom, PowerLaw, RadialPowerLaw};
use crate::stats::regression_slope;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn power_law_model(eps: f64) -> TruncatedLevyModel {
    TruncatedLevyModel::new(Arc::new(PowerLaw::symmetric(0.5, 1.0, 0.9).unwrap()), eps).unwrap()
}

fn scalar(v: f64) -> Mark {
    DVector::from_element(1, v)
}

fn doleans_pair() -> FeatureLinear {
    FeatureLinear::new(
        1,
        vec![Feature::Coord(0)],
        vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])],
        vec![DVector::from_column_slice(&[1.0, 0.0])],
    )
    .unwrap()
}

#[test]
fn linear_drift_matches_matrix_exponential() {
    let d = DMatrix::from_row_slice(2, 2, &[-0.3, 0.7, -0.5, 0.1]);
    let coeffs = doleans_pair().with_drift(d.clone(), DVector::zeros(2));
    let model = power_law_model(0.2);
    let coeffs = FeatureLinear {
        mats: vec![DMatrix::zeros(2, 2)],
        offsets: vec![DVector::zeros(2)],
        ..coeffs
    }
    .bind(&model)
    .unwrap();
    let config = JumpConfiguration::empty(1.0, 1).unwrap();
    let x0 = DVector::from_column_slice(&[1.0, -2.0]);
    let traj = solve_with_flow(&coeffs, &model, &config, &x0, 1.0, 0.01, InverseMethod::DirectSde)
        .unwrap();
    let e = d.clone().exp();
    assert!((traj.final_state() - &e * &x0).amax() < 1e-10);
    let last = traj.nodes.last().unwrap();
    assert!((last.k.as_ref().unwrap() - &e).amax() < 1e-10);
    assert!((last.kbar.as_ref().unwrap() - (-d).exp()).amax() < 1e-10);
}

#[test]
fn jump_update_and_doleans_closed_form() {
    let model = power_law_model(0.05);
    let coeffs = doleans_pair().bind(&model).unwrap();
    let m1 = model.measure().first_moment(0.05).unwrap()[0];
    let atoms = vec![
        Atom { time: 0.3, mark: scalar(0.4) },
        Atom { time: 0.7, mark: scalar(-0.25) },
    ];
    let config = JumpConfiguration::new(atoms, 1.0, 1).unwrap();
    let x0 = DVector::from_column_slice(&[0.0, 1.0]);
    let traj = solve_sde(&coeffs, &model, &config, &x0, 1.0, 0.01).unwrap();
    let y = 0.4 - 0.25 - m1;
    let e = (1.4f64).ln() + (0.75f64).ln() - m1;
    let x = traj.final_state();
    assert!((x[0] - y).abs() < 1e-13);
    assert!((x[1] - e.exp()).abs() < 1e-10, "{} vs {}", x[1], e.exp());
    assert_eq!(traj.nodes.iter().filter(|n| n.atom.is_some()).count(), 2);
}

fn nonlinear() -> FnCoefficients {
    FnCoefficients::new(
        2,
        1,
        Arc::new(|_, x: &State, u: &Mark| {
            DVector::from_column_slice(&[u[0] * (1.0 + 0.3 * x[1].sin()), 0.2 * u[0] * x[0]])
        }),
    )
    .with_drift(Arc::new(|t, x: &State| {
        DVector::from_column_slice(&[x[1].cos() - 0.5 * x[0], -x[0] * x[1] * 0.3 + t.sin()])
    }))
}

fn nonlinear_config() -> JumpConfiguration {
    JumpConfiguration::new(
        vec![
            Atom { time: 0.123, mark: scalar(0.5) },
            Atom { time: 0.61, mark: scalar(-0.7) },
        ],
        1.0,
        1,
    )
    .unwrap()
}

#[test]
fn rk4_self_convergence_between_jumps() {
    let model = power_law_model(0.3);
    let x0 = DVector::from_column_slice(&[0.3, 0.8]);
    let config = nonlinear_config();
    let field_only = FnCoefficients::new(2, 1, Arc::new(|_, x: &State, _u: &Mark| DVector::zeros(x.len())))
        .with_drift(Arc::new(|t, x: &State| {
            DVector::from_column_slice(&[x[1].cos() - 0.5 * x[0], -x[0] * x[1] * 0.3 + t.sin()])
        }));
    let run = |h: f64| {
        solve_sde(&field_only, &model, &config, &x0, 1.0, h)
            .unwrap()
            .final_state()
            .clone()
    };
    let (a, b, c) = (run(0.1), run(0.05), run(0.025));
    let ratio = (&a - &b).amax() / (&b - &c).amax();
    assert!(ratio >= 12.0, "ratio {ratio}");
}

#[test]
fn inverse_flow_methods_agree() {
    let model = power_law_model(0.3);
    let coeffs = nonlinear();
    let config = nonlinear_config();
    let x0 = DVector::from_column_slice(&[0.3, 0.8]);
    let direct =
        solve_with_flow(&coeffs, &model, &config, &x0, 1.0, 0.01, InverseMethod::DirectSde).unwrap();
    let inverse =
        solve_with_flow(&coeffs, &model, &config, &x0, 1.0, 0.01, InverseMethod::PerStepInverse)
            .unwrap();
    assert!(direct.flow_inverse_defect().unwrap() < 1e-9);
    assert!(inverse.flow_inverse_defect().unwrap() < 1e-9);
    for (a, b) in direct.nodes.iter().zip(&inverse.nodes) {
        assert!((a.kbar.as_ref().unwrap() - b.kbar.as_ref().unwrap()).amax() < 1e-8);
        assert!((a.kbar_left.as_ref().unwrap() - b.kbar_left.as_ref().unwrap()).amax() < 1e-8);
    }
}

#[test]
fn flow_matches_finite_difference_bumps() {
    let model = power_law_model(0.3);
    let coeffs = nonlinear();
    let config = nonlinear_config();
    let x0 = DVector::from_column_slice(&[0.3, 0.8]);
    let base = solve_with_flow(&coeffs, &model, &config, &x0, 1.0, 0.01, InverseMethod::DirectSde)
        .unwrap();
    let k = base.nodes.last().unwrap().k.clone().unwrap();
    let deltas = [1e-3, 5e-4, 2.5e-4];
    for j in 0..2 {
        let errs: Vec<f64> = deltas
            .iter()
            .map(|&delta| {
                let mut xb = x0.clone();
                xb[j] += delta;
                let bumped = solve_sde(&coeffs, &model, &config, &xb, 1.0, 0.01).unwrap();
                let fd = (bumped.final_state() - base.final_state()) / delta;
                (fd - k.column(j)).amax()
            })
            .collect();
        let pts: Vec<(f64, f64)> = deltas.iter().zip(&errs).map(|(d, e)| (d.ln(), e.ln())).collect();
        assert!(regression_slope(&pts) >= 0.9, "{errs:?}");
    }
}

#[test]
fn singular_jump_is_rejected() {
    let model = power_law_model(0.05);
    let coeffs = FeatureLinear::new(
        1,
        vec![Feature::Coord(0)],
        vec![DMatrix::from_element(1, 1, 2.5)],
        vec![DVector::from_element(1, 1.0)],
    )
    .unwrap()
    .bind(&model)
    .unwrap();
    let config =
        JumpConfiguration::new(vec![Atom { time: 0.5, mark: scalar(-0.4) }], 1.0, 1).unwrap();
    let err = solve_sde(&coeffs, &model, &config, &DVector::from_element(1, 1.0), 1.0, 0.1);
    assert!(matches!(err, Err(Error::Model(_))));
}

#[test]
fn affine_solution_matches_recursion_for_pure_jumps() {
    let model = power_law_model(0.05);
    let coeffs = FeatureLinear::new(
        1,
        vec![Feature::Coord(0)],
        vec![DMatrix::from_element(1, 1, 0.8)],
        vec![DVector::from_element(1, 0.0)],
    )
    .unwrap();
    // no compensator: a pure-jump Σ
    let coeffs = FeatureLinear {
        moments: Some((0.05, vec![0.0])),
        ..coeffs
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let atoms: Vec<Atom> = (0..5)
        .map(|i| Atom {
            time: 0.1 + 0.17 * i as f64,
            mark: scalar(if rng.random::<bool>() { 0.3 } else { -0.6 } * rng.random::<f64>() + 0.06),
        })
        .collect();
    let config = JumpConfiguration::new(atoms, 1.0, 1).unwrap();
    let traj = solve_with_flow(
        &coeffs,
        &model,
        &config,
        &DVector::from_element(1, 1.0),
        1.0,
        0.1,
        InverseMethod::DirectSde,
    )
    .unwrap();
    // R jumps by a random amount at each atom, constant otherwise
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut level = 0.7;
    for n in &traj.nodes {
        left.push(DVector::from_element(1, level));
        if n.atom.is_some() {
            level += rng.random::<f64>() - 0.5;
        }
        right.push(DVector::from_element(1, level));
    }
    let r = NodePath { left, right };
    let s = affine_solution(&traj, &coeffs, &r).unwrap();
    let mut rec = r.left[0][0];
    for (i, n) in traj.nodes.iter().enumerate() {
        assert!((s.left[i][0] - rec).abs() < 1e-12);
        if let Some(a) = n.atom {
            let ds = 0.8 * config.atoms()[a].mark[0];
            rec += (r.right[i][0] - r.left[i][0]) + ds * rec;
        }
        assert!((s.right[i][0] - rec).abs() < 1e-12);
    }
    let (jr, cr) = affine_residual(&traj, &coeffs, &r, &s).unwrap();
    assert!(jr < 1e-12 && cr < 1e-12);
}

#[test]
fn affine_solution_with_drift_has_small_residual() {
    let model = power_law_model(0.3);
    let coeffs = nonlinear();
    let config = nonlinear_config();
    let traj = solve_with_flow(
        &coeffs,
        &model,
        &config,
        &DVector::from_column_slice(&[0.3, 0.8]),
        1.0,
        0.005,
        InverseMethod::DirectSde,
    )
    .unwrap();
    let r = NodePath {
        left: traj.nodes.iter().map(|n| DVector::from_column_slice(&[n.time, 1.0])).collect(),
        right: traj.nodes.iter().map(|n| DVector::from_column_slice(&[n.time, 1.0])).collect(),
    };
    let s = affine_solution(&traj, &coeffs, &r).unwrap();
    let (jr, cr) = affine_residual(&traj, &coeffs, &r, &s).unwrap();
    assert!(jr < 1e-12, "{jr}");
    assert!(cr < 1e-5, "{cr}");
}

#[test]
fn planar_marks_use_quadrature_compensator() {
    let measure = Arc::new(RadialPowerLaw::isotropic(2, 1.0, 0.5, 1.0).unwrap());
    let model = TruncatedLevyModel::new(measure, 0.3).unwrap();
    let coeffs = FnCoefficients::new(1, 2, Arc::new(|_, x: &State, u: &Mark| {
        DVector::from_element(1, u[0] * u[0] * (1.0 + 0.1 * x[0]))
    }));
    let config = JumpConfiguration::empty(1.0, 2).unwrap();
    let traj = solve_sde(&coeffs, &model, &config, &DVector::from_element(1, 0.0), 1.0, 0.05)
        .unwrap();
    // ∫ u1² k du = ½ ∫ ρ² ρ^{-1.5} 2π ρ dρ over (0.3, 1)
    let m = std::f64::consts::PI * (1.0 - 0.3f64.powf(1.5)) / 1.5;
    let expected = -10.0 * (1.0 - (-0.1 * m).exp());
    assert!((traj.final_state()[0] - expected).abs() < 1e-8, "{}", traj.final_state()[0]);
}

#[test]
fn csv_header_and_rows() {
    let model = power_law_model(0.3);
    let coeffs = nonlinear();
    let traj = solve_with_flow(
        &coeffs,
        &model,
        &nonlinear_config(),
        &DVector::from_column_slice(&[0.3, 0.8]),
        1.0,
        0.25,
        InverseMethod::PerStepInverse,
    )
    .unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "time,is_jump,X_1,X_2,K_11,K_12,K_21,K_22,Kbar_11,Kbar_12,Kbar_21,Kbar_22"
    );
    assert_eq!(lines.count(), traj.nodes.len());
    assert_eq!(traj.nodes.len(), 5 + 2);
}

#[test]
fn assumption_probe_reports_bounds() {
    let model = power_law_model(0.05);
    let coeffs = doleans_pair().bind(&model).unwrap();
    let report = validate_assumptions(&coeffs, &model, None, 1.0, 1.0, 200, 3).unwrap();
    assert!(report.max_dx_norm < 0.9 && report.max_inverse_norm < 10.0);
}
