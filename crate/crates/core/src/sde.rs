//! Pathwise solver for
//! `X_t = x + ∫∫ c(s, X_{s-}, u) Ñ(ds, du) + ∫ σ(s, X_{s-}) dZ_s`
//! with a truncated Poisson measure and a deterministic finite-variation
//! driver `Z`, together with the flow derivative `K_t` and its inverse `K̄_t`.
//!
//! Between jumps the state follows `dX/dt = b + σ Ż − ∫ c k du` and is
//! integrated with classical RK4, sub-stepped so that every jump time and
//! grid time is hit exactly. At an atom `(α, u)`,
//! `X_α = X_{α-} + c(α, X_{α-}, u)`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::bottom_structure::{gamma_matrix, BottomStructure};
use crate::error::{Error, Result};
use crate::poisson_measure::{
    fmt_f64, truncated_integral, JumpConfiguration, LevyMeasure, Mark, TruncatedLevyModel,
};
use crate::quadrature::Quadrature;
use crate::rng::{self, Domain};

pub type State = DVector<f64>;

/// Coefficients of the SDE. `d` is the state dimension, `r` the mark
/// dimension.
pub trait Coefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn mark_dim(&self) -> usize;

    /// `c(t, x, u)`.
    fn jump(&self, t: f64, x: &State, u: &Mark) -> State;
    /// `D_x c(t, x, u)`, d×d.
    fn jump_dx(&self, t: f64, x: &State, u: &Mark) -> DMatrix<f64>;
    /// `D_u c(t, x, u)`, d×r.
    fn jump_du(&self, t: f64, x: &State, u: &Mark) -> DMatrix<f64>;

    /// Drift `b(t, x)`.
    fn drift(&self, _t: f64, x: &State) -> State {
        DVector::zeros(x.len())
    }

    fn drift_dx(&self, _t: f64, x: &State) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }

    /// `σ(t, x)`, d×n, paired with the driver rate `Ż(t)`.
    fn sigma(&self, _t: f64, _x: &State) -> Option<DMatrix<f64>> {
        None
    }

    /// `D_x σ_{·j}(t, x)` for each driver column `j`.
    fn sigma_dx(&self, _t: f64, _x: &State) -> Vec<DMatrix<f64>> {
        Vec::new()
    }

    /// `Ż(t)` of the deterministic driver.
    fn driver_rate(&self, _t: f64) -> DVector<f64> {
        DVector::zeros(0)
    }

    /// Closed form of `(∫ c(t,x,u) k du, ∫ D_x c(t,x,u) k du)` over
    /// `|u| > ε`; `None` falls back to quadrature.
    fn compensator(
        &self,
        _t: f64,
        _x: &State,
        _model: &TruncatedLevyModel,
    ) -> Option<(State, DMatrix<f64>)> {
        None
    }

    /// Dominating function `η(u)` used by the assumption checks.
    fn eta(&self, _u: &Mark) -> Option<f64> {
        None
    }
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Check assumption (R) at one visited `(t, x, u)`.
pub fn check_assumptions_at(coeffs: &dyn Coefficients, t: f64, x: &State, u: &Mark) -> Result<()> {
    let d = coeffs.state_dim();
    let dx = coeffs.jump_dx(t, x, u);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite D_x c at t = {t}"), f64::NAN));
    }
    let shifted = DMatrix::identity(d, d) + &dx;
    let inverse = shifted.clone().try_inverse().ok_or_else(|| {
        Error::Model(format!(
            "R.1d violated: I + D_x c is singular at t = {t}, u = {:?}",
            u.as_slice()
        ))
    })?;
    if let Some(eta) = coeffs.eta(u) {
        let a = operator_norm(&dx);
        if a > eta * (1.0 + 1e-12) {
            return Err(Error::Model(format!(
                "R.1a violated: |D_x c| = {a} > η(u) = {eta} at t = {t}"
            )));
        }
        let b = coeffs.jump(t, &DVector::zeros(d), u).norm();
        if b > eta * (1.0 + 1e-12) {
            return Err(Error::Model(format!(
                "R.1b violated: |c(t, 0, u)| = {b} > η(u) = {eta} at t = {t}"
            )));
        }
        let dd = operator_norm(&inverse);
        if dd > eta * (1.0 + 1e-12) {
            return Err(Error::Model(format!(
                "R.1d violated: |(I + D_x c)^-1| = {dd} > η(u) = {eta} at t = {t}"
            )));
        }
    }
    for (j, s) in coeffs.sigma_dx(t, x).iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!(
                "R.2 violated: D_x σ column {j} not finite at t = {t}"
            )));
        }
    }
    Ok(())
}

/// Summary of a sampled assumption-(R) check.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub probes: usize,
    pub max_dx_norm: f64,
    pub max_inverse_norm: f64,
    pub max_sigma_dx_norm: f64,
    /// Largest `γ[c(t,x,·)](u) / η(u)` seen (R.1c), when both are available.
    pub max_gamma_over_eta: Option<f64>,
}

/// Probe assumption (R) at `probes` random points: `t` uniform on `[0, T]`,
/// `x` Gaussian with scale `x_scale`, `u` drawn from the model.
pub fn validate_assumptions(
    coeffs: &dyn Coefficients,
    model: &TruncatedLevyModel,
    bs: Option<&BottomStructure>,
    horizon: f64,
    x_scale: f64,
    probes: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    let d = coeffs.state_dim();
    let mut rng = rng::stream(seed, Domain::Probe, 0);
    let mut report = AssumptionReport {
        probes,
        max_dx_norm: 0.0,
        max_inverse_norm: 0.0,
        max_sigma_dx_norm: 0.0,
        max_gamma_over_eta: None,
    };
    let eps = model.epsilon();
    for _ in 0..probes {
        let t = horizon * rng.random::<f64>();
        let x = crate::bottom_structure::standard_normal_vector(d, &mut rng) * x_scale;
        let u = model.measure().sample_shell(eps.max(1e-12), f64::INFINITY, &mut rng)?;
        check_assumptions_at(coeffs, t, &x, &u)?;
        let dx = coeffs.jump_dx(t, &x, &u);
        report.max_dx_norm = report.max_dx_norm.max(operator_norm(&dx));
        let inv = (DMatrix::identity(d, d) + dx)
            .try_inverse()
            .expect("checked above");
        report.max_inverse_norm = report.max_inverse_norm.max(operator_norm(&inv));
        for s in coeffs.sigma_dx(t, &x) {
            report.max_sigma_dx_norm = report.max_sigma_dx_norm.max(operator_norm(&s));
        }
        if let (Some(bs), Some(eta)) = (bs, coeffs.eta(&u)) {
            let g = gamma_matrix(&coeffs.jump_du(t, &x, &u), &u, bs)?;
            let ratio = operator_norm(&g) / eta;
            if ratio > 1.0 + 1e-12 {
                return Err(Error::Model(format!(
                    "R.1c violated: γ[c(t,x,·)](u) = {} > η(u) = {eta}",
                    operator_norm(&g)
                )));
            }
            let best = report.max_gamma_over_eta.unwrap_or(0.0).max(ratio);
            report.max_gamma_over_eta = Some(best);
        }
    }
    Ok(report)
}

/// Tolerances for quadrature compensators; finite-difference Jacobians
/// carry noise near 1e-10 relative.
fn field_quadrature() -> Quadrature {
    Quadrature::with_tolerance(1e-11, 1e-9)
}

/// The between-jump vector field and its state Jacobian, compensator
/// included.
struct Field<'a> {
    coeffs: &'a dyn Coefficients,
    model: &'a TruncatedLevyModel,
    quad: Quadrature,
}

impl Field<'_> {
    fn compensator(&self, t: f64, x: &State) -> Result<(State, DMatrix<f64>)> {
        if let Some(c) = self.coeffs.compensator(t, x, self.model) {
            return Ok(c);
        }
        let d = self.coeffs.state_dim();
        let measure: &dyn LevyMeasure = &**self.model.measure();
        let eps = self.model.epsilon();
        let mut value = DVector::zeros(d);
        for a in 0..d {
            value[a] = truncated_integral(measure, eps, &|u| self.coeffs.jump(t, x, u)[a], &self.quad)?;
        }
        let mut jac = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                jac[(a, b)] = truncated_integral(
                    measure,
                    eps,
                    &|u| self.coeffs.jump_dx(t, x, u)[(a, b)],
                    &self.quad,
                )?;
            }
        }
        Ok((value, jac))
    }

    fn eval(&self, t: f64, x: &State) -> Result<(State, DMatrix<f64>)> {
        let (comp, comp_dx) = self.compensator(t, x)?;
        let mut f = self.coeffs.drift(t, x) - comp;
        let mut a = self.coeffs.drift_dx(t, x) - comp_dx;
        if let Some(sigma) = self.coeffs.sigma(t, x) {
            let rate = self.coeffs.driver_rate(t);
            f += &sigma * &rate;
            for (j, s) in self.coeffs.sigma_dx(t, x).iter().enumerate() {
                a += s * rate[j];
            }
        }
        Ok((f, a))
    }

    fn value(&self, t: f64, x: &State) -> Result<State> {
        Ok(self.eval(t, x)?.0)
    }
}

/// RK4 stages of the state over `[t, t + h]`: stage states and the step
/// result.
fn rk4_state(field: &Field<'_>, t: f64, x: &State, h: f64) -> Result<([State; 4], State)> {
    let k1 = field.value(t, x)?;
    let x2 = x + &k1 * (h / 2.0);
    let k2 = field.value(t + h / 2.0, &x2)?;
    let x3 = x + &k2 * (h / 2.0);
    let k3 = field.value(t + h / 2.0, &x3)?;
    let x4 = x + &k3 * h;
    let k4 = field.value(t + h, &x4)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            format!("non-finite state after RK4 step at t = {t}"),
            f64::INFINITY,
        ));
    }
    Ok(([x.clone(), x2, x3, x4], next))
}

/// Method used to fill `K̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseMethod {
    /// Integrate the linear equation satisfied by `K̄`.
    DirectSde,
    /// Invert `K` at every stored time.
    PerStepInverse,
}

/// One stored time: grid point or jump time, with left and right values.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub time: f64,
    /// Index of the atom jumping here, if any.
    pub atom: Option<usize>,
    pub x_left: State,
    pub x: State,
    pub k_left: Option<DMatrix<f64>>,
    pub k: Option<DMatrix<f64>>,
    pub kbar_left: Option<DMatrix<f64>>,
    pub kbar: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub config: JumpConfiguration,
    pub model: TruncatedLevyModel,
    pub x0: State,
    pub horizon: f64,
    pub step: f64,
    pub nodes: Vec<Node>,
    pub inverse_method: Option<InverseMethod>,
    pub warnings: Vec<String>,
}

/// Solve the SDE on `[0, T]` for a fixed configuration.
pub fn solve_sde(
    coeffs: &dyn Coefficients,
    model: &TruncatedLevyModel,
    config: &JumpConfiguration,
    x0: &State,
    horizon: f64,
    step: f64,
) -> Result<Trajectory> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Configuration(format!("step must be positive, got {step}")));
    }
    if !(horizon > 0.0 && horizon <= config.horizon() * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!(
            "terminal time {horizon} must lie in (0, {}]",
            config.horizon()
        )));
    }
    let d = coeffs.state_dim();
    if x0.len() != d {
        return Err(Error::Input(format!("x0 has length {}, state dimension is {d}", x0.len())));
    }
    if config.mark_dim() != coeffs.mark_dim() {
        return Err(Error::Model(format!(
            "configuration marks have dimension {}, coefficients expect {}",
            config.mark_dim(),
            coeffs.mark_dim()
        )));
    }
    model.validate(config)?;

    let field = Field {
        coeffs,
        model,
        quad: field_quadrature(),
    };
    let n_grid = ((horizon / step) - 1e-9).ceil().max(1.0) as usize;
    let grid = (0..=n_grid).map(|j| if j == n_grid { horizon } else { j as f64 * step });
    let atoms = config.atoms_until(horizon);

    // Merge grid and jump times; a jump within 1e-14·T of a grid time
    // replaces it.
    let tie = 1e-14 * horizon.max(1.0);
    let mut events: Vec<(f64, Option<usize>)> = Vec::with_capacity(n_grid + atoms.len() + 1);
    let mut next_atom = 0;
    for g in grid {
        while next_atom < atoms.len() && atoms[next_atom].time < g - tie {
            events.push((atoms[next_atom].time, Some(next_atom)));
            next_atom += 1;
        }
        if next_atom < atoms.len() && (atoms[next_atom].time - g).abs() <= tie {
            events.push((atoms[next_atom].time, Some(next_atom)));
            next_atom += 1;
        } else {
            events.push((g, None));
        }
    }

    let mut nodes: Vec<Node> = Vec::with_capacity(events.len());
    let mut x = x0.clone();
    let mut t = 0.0;
    for (time, atom) in events {
        if time > t {
            x = rk4_state(&field, t, &x, time - t)?.1;
        }
        let x_left = x.clone();
        if let Some(i) = atom {
            let u = &atoms[i].mark;
            check_assumptions_at(coeffs, time, &x_left, u)?;
            x = &x_left + coeffs.jump(time, &x_left, u);
        }
        nodes.push(Node {
            time,
            atom,
            x_left,
            x: x.clone(),
            k_left: None,
            k: None,
            kbar_left: None,
            kbar: None,
        });
        t = time;
    }

    Ok(Trajectory {
        config: config.clone(),
        model: model.clone(),
        x0: x0.clone(),
        horizon,
        step,
        nodes,
        inverse_method: None,
        warnings: Vec::new(),
    })
}

impl Trajectory {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn final_state(&self) -> &State {
        &self.nodes.last().expect("at least the initial node").x
    }

    /// Index of the node stored exactly at `t`.
    pub fn node_at(&self, t: f64) -> Option<usize> {
        let tie = 1e-12 * self.horizon.max(1.0);
        let idx = self.nodes.partition_point(|n| n.time < t - tie);
        (idx < self.nodes.len() && (self.nodes[idx].time - t).abs() <= tie).then_some(idx)
    }

    /// Jump nodes with time `≤ t`.
    pub fn jump_nodes_until(&self, t: f64) -> impl Iterator<Item = &Node> {
        let tie = 1e-12 * self.horizon.max(1.0);
        self.nodes
            .iter()
            .filter(move |n| n.atom.is_some() && n.time <= t + tie)
    }

    pub fn has_flow(&self) -> bool {
        self.nodes.iter().all(|n| n.k.is_some())
    }

    pub fn has_inverse_flow(&self) -> bool {
        self.nodes.iter().all(|n| n.kbar.is_some())
    }

    /// `max_t ‖K_t K̄_t − I‖_∞` over stored left and right values.
    pub fn flow_inverse_defect(&self) -> Result<f64> {
        let d = self.state_dim();
        let eye = DMatrix::<f64>::identity(d, d);
        let mut worst: f64 = 0.0;
        for n in &self.nodes {
            let (k, kb, kl, kbl) = match (&n.k, &n.kbar, &n.k_left, &n.kbar_left) {
                (Some(a), Some(b), Some(c), Some(e)) => (a, b, c, e),
                _ => return Err(Error::State("flow and inverse flow must be filled".into())),
            };
            worst = worst.max((k * kb - &eye).amax()).max((kl * kbl - &eye).amax());
        }
        Ok(worst)
    }

    /// CSV with columns `time,is_jump,X_1..X_d,K_11..K_dd,Kbar_11..Kbar_dd`
    /// (right-continuous values, row-major matrices).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.state_dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string(), "is_jump".to_string()];
        header.extend((1..=d).map(|i| format!("X_{i}")));
        for name in ["K", "Kbar"] {
            for i in 1..=d {
                for j in 1..=d {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        w.write_record(&header)?;
        let nan = || std::iter::repeat_n("NaN".to_string(), d * d);
        let row_major = |m: &DMatrix<f64>| -> Vec<String> {
            (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| fmt_f64(m[(i, j)]))
                .collect()
        };
        for n in &self.nodes {
            let mut row = vec![fmt_f64(n.time), u8::from(n.atom.is_some()).to_string()];
            row.extend(n.x.iter().map(|v| fmt_f64(*v)));
            match &n.k {
                Some(k) => row.extend(row_major(k)),
                None => row.extend(nan()),
            }
            match &n.kbar {
                Some(k) => row.extend(row_major(k)),
                None => row.extend(nan()),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_same_coefficients(traj: &Trajectory, coeffs: &dyn Coefficients) -> Result<()> {
    if coeffs.state_dim() != traj.state_dim() || coeffs.mark_dim() != traj.config.mark_dim() {
        return Err(Error::State(
            "trajectory was produced with different coefficient dimensions".into(),
        ));
    }
    Ok(())
}

/// One RK4 step of the state jointly with the flow derivative: the
/// derivative of the RK4 map, so it reuses the state stages.
fn flow_step(
    field: &Field<'_>,
    t: f64,
    x: &State,
    k: &DMatrix<f64>,
    h: f64,
) -> Result<(State, DMatrix<f64>)> {
    let (stages, next) = rk4_state(field, t, x, h)?;
    let a1 = field.eval(t, &stages[0])?.1;
    let a2 = field.eval(t + h / 2.0, &stages[1])?.1;
    let a3 = field.eval(t + h / 2.0, &stages[2])?.1;
    let a4 = field.eval(t + h, &stages[3])?.1;
    let k1 = &a1 * k;
    let k2 = &a2 * (k + &k1 * (h / 2.0));
    let k3 = &a3 * (k + &k2 * (h / 2.0));
    let k4 = &a4 * (k + &k3 * h);
    Ok((next, k + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)))
}

/// `(X_t, K_t)` for any `t` in `[0, T]`, stepping from the last stored node
/// at or before `t` (right-continuous values).
pub fn state_and_flow_at(
    traj: &Trajectory,
    coeffs: &dyn Coefficients,
    t: f64,
) -> Result<(State, DMatrix<f64>)> {
    check_same_coefficients(traj, coeffs)?;
    if !traj.has_flow() {
        return Err(Error::State("K must be filled".into()));
    }
    if !(t >= 0.0 && t <= traj.horizon * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", traj.horizon)));
    }
    if let Some(i) = traj.node_at(t) {
        let n = &traj.nodes[i];
        return Ok((n.x.clone(), n.k.clone().expect("filled")));
    }
    let i = traj.nodes.partition_point(|n| n.time <= t) - 1;
    let n = &traj.nodes[i];
    let field = Field {
        coeffs,
        model: &traj.model,
        quad: field_quadrature(),
    };
    flow_step(&field, n.time, &n.x, n.k.as_ref().expect("filled"), t - n.time)
}

/// Fill `K`: `K_α = (I + D_x c) K_{α-}` at atoms and
/// `dK/dt = (D_x b − ∫ D_x c k du) K` between them, integrated jointly with
/// the state over the same RK4 steps.
pub fn solve_flow_derivative(traj: &mut Trajectory, coeffs: &dyn Coefficients) -> Result<()> {
    check_same_coefficients(traj, coeffs)?;
    let d = traj.state_dim();
    let field = Field {
        coeffs,
        model: &traj.model,
        quad: field_quadrature(),
    };
    let atoms = traj.config.atoms().to_vec();
    let mut k = DMatrix::<f64>::identity(d, d);
    for i in 0..traj.nodes.len() {
        if i > 0 {
            let (t, x) = (traj.nodes[i - 1].time, traj.nodes[i - 1].x.clone());
            k = flow_step(&field, t, &x, &k, traj.nodes[i].time - t)?.1;
        }
        let node = &mut traj.nodes[i];
        node.k_left = Some(k.clone());
        if let Some(a) = node.atom {
            let dx = coeffs.jump_dx(node.time, &node.x_left, &atoms[a].mark);
            k = (DMatrix::identity(d, d) + dx) * &k;
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("non-finite flow derivative at t = {}", node.time),
                f64::INFINITY,
            ));
        }
        node.k = Some(k.clone());
    }
    Ok(())
}

/// Fill `K̄ = K^{-1}` by `method`. The direct method integrates
/// `dK̄/dt = −K̄ (D_x b − ∫ D_x c k du)` between jumps and applies
/// `K̄_α = K̄_{α-} (I + D_x c)^{-1}` at atoms; the `⟨Σᶜ, Σᶜ⟩` terms vanish
/// because the driver has no continuous martingale part.
pub fn solve_inverse_flow(
    traj: &mut Trajectory,
    coeffs: &dyn Coefficients,
    method: InverseMethod,
) -> Result<()> {
    check_same_coefficients(traj, coeffs)?;
    if !traj.has_flow() {
        return Err(Error::State("K must be filled before K̄".into()));
    }
    let d = traj.state_dim();
    let atoms = traj.config.atoms().to_vec();
    let mut warnings = Vec::new();
    match method {
        InverseMethod::PerStepInverse => {
            let invert = |m: &DMatrix<f64>, t: f64, warnings: &mut Vec<String>| {
                let svd = m.clone().svd(false, false);
                let cond = svd.singular_values.max() / svd.singular_values.min();
                if !(cond <= 1e12) {
                    warnings.push(format!("K is ill-conditioned at t = {t} (cond {cond:e})"));
                }
                m.clone().try_inverse().ok_or_else(|| {
                    Error::numeric(format!("K is singular at t = {t}"), f64::INFINITY)
                })
            };
            for node in &mut traj.nodes {
                let kl = node.k_left.as_ref().expect("filled");
                let k = node.k.as_ref().expect("filled");
                node.kbar_left = Some(invert(kl, node.time, &mut warnings)?);
                node.kbar = Some(invert(k, node.time, &mut warnings)?);
            }
        }
        InverseMethod::DirectSde => {
            let field = Field {
                coeffs,
                model: &traj.model,
                quad: field_quadrature(),
            };
            let mut kb = DMatrix::<f64>::identity(d, d);
            for i in 0..traj.nodes.len() {
                if i > 0 {
                    let (t, x) = (traj.nodes[i - 1].time, traj.nodes[i - 1].x.clone());
                    let h = traj.nodes[i].time - t;
                    let (stages, _) = rk4_state(&field, t, &x, h)?;
                    let a1 = field.eval(t, &stages[0])?.1;
                    let a2 = field.eval(t + h / 2.0, &stages[1])?.1;
                    let a3 = field.eval(t + h / 2.0, &stages[2])?.1;
                    let a4 = field.eval(t + h, &stages[3])?.1;
                    let k1 = -(&kb * &a1);
                    let k2 = -((&kb + &k1 * (h / 2.0)) * &a2);
                    let k3 = -((&kb + &k2 * (h / 2.0)) * &a3);
                    let k4 = -((&kb + &k3 * h) * &a4);
                    kb += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                }
                let node = &mut traj.nodes[i];
                node.kbar_left = Some(kb.clone());
                if let Some(a) = node.atom {
                    let dx = coeffs.jump_dx(node.time, &node.x_left, &atoms[a].mark);
                    let inv = (DMatrix::identity(d, d) + dx).try_inverse().ok_or_else(|| {
                        Error::Model(format!(
                            "R.1d violated: I + D_x c singular at t = {}",
                            node.time
                        ))
                    })?;
                    kb = &kb * inv;
                }
                node.kbar = Some(kb.clone());
            }
        }
    }
    traj.inverse_method = Some(method);
    traj.warnings.extend(warnings);
    Ok(())
}

/// Solve, then fill `K` and `K̄`.
pub fn solve_with_flow(
    coeffs: &dyn Coefficients,
    model: &TruncatedLevyModel,
    config: &JumpConfiguration,
    x0: &State,
    horizon: f64,
    step: f64,
    method: InverseMethod,
) -> Result<Trajectory> {
    let mut traj = solve_sde(coeffs, model, config, x0, horizon, step)?;
    solve_flow_derivative(&mut traj, coeffs)?;
    solve_inverse_flow(&mut traj, coeffs, method)?;
    Ok(traj)
}

/// A d-vector path given at the trajectory's nodes with left limits.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePath {
    pub left: Vec<State>,
    pub right: Vec<State>,
}

impl NodePath {
    pub fn constant(traj: &Trajectory, value: &State) -> Self {
        let n = traj.nodes.len();
        Self {
            left: vec![value.clone(); n],
            right: vec![value.clone(); n],
        }
    }
}

/// Solution of `S_t = R_t + ∫_0^t dΣ_s S_{s-}`, where `Σ` is the
/// linearization driving `K`:
/// `S_t = K_t [R_0 + ∫ K̄_{s-} dR_s − Σ K̄_{s-} ΔΣ_s (I + ΔΣ_s)^{-1} ΔR_s]`.
///
/// The `⟨Σᶜ, Σᶜ⟩` term is dropped (no continuous martingale driver). The
/// continuous part of `∫ K̄ dR` uses the trapezoid rule on the node grid,
/// so it is exact when `R` is constant between nodes.
pub fn affine_solution(traj: &Trajectory, coeffs: &dyn Coefficients, r: &NodePath) -> Result<NodePath> {
    check_same_coefficients(traj, coeffs)?;
    if !(traj.has_flow() && traj.has_inverse_flow()) {
        return Err(Error::State("K and K̄ must be filled".into()));
    }
    let n = traj.nodes.len();
    if r.left.len() != n || r.right.len() != n {
        return Err(Error::Input(format!(
            "driving path has {} / {} values, trajectory has {n} nodes",
            r.left.len(),
            r.right.len()
        )));
    }
    let d = traj.state_dim();
    let atoms = traj.config.atoms();
    let mut bracket = r.left[0].clone();
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for (i, node) in traj.nodes.iter().enumerate() {
        let kbar_left = node.kbar_left.as_ref().expect("filled");
        if i > 0 {
            let prev = &traj.nodes[i - 1];
            let kb_prev = prev.kbar.as_ref().expect("filled");
            let dr = &r.left[i] - &r.right[i - 1];
            bracket += (kb_prev + kbar_left) * dr * 0.5;
        }
        left.push(node.k_left.as_ref().expect("filled") * &bracket);
        let jump_r = &r.right[i] - &r.left[i];
        match node.atom {
            Some(a) => {
                let ds = coeffs.jump_dx(node.time, &node.x_left, &atoms[a].mark);
                let inv = (DMatrix::identity(d, d) + &ds).try_inverse().ok_or_else(|| {
                    Error::Model(format!("I + ΔΣ singular at t = {}", node.time))
                })?;
                bracket += kbar_left * &jump_r - kbar_left * &ds * &inv * &jump_r;
            }
            None => {
                bracket += kbar_left * &jump_r;
            }
        }
        right.push(node.k.as_ref().expect("filled") * &bracket);
    }
    Ok(NodePath { left, right })
}

/// Residuals of `S` against the affine equation: the exact jump relation
/// `ΔS = ΔR + ΔΣ S_{-}` and the trapezoid form of the continuous part.
pub fn affine_residual(
    traj: &Trajectory,
    coeffs: &dyn Coefficients,
    r: &NodePath,
    s: &NodePath,
) -> Result<(f64, f64)> {
    let field = Field {
        coeffs,
        model: &traj.model,
        quad: field_quadrature(),
    };
    let atoms = traj.config.atoms();
    let mut jump_res: f64 = (&s.left[0] - &r.left[0]).amax();
    let mut cont_res: f64 = 0.0;
    for (i, node) in traj.nodes.iter().enumerate() {
        if i > 0 {
            let prev = &traj.nodes[i - 1];
            let a0 = field.eval(prev.time, &prev.x)?.1;
            let a1 = field.eval(node.time, &node.x_left)?.1;
            let h = node.time - prev.time;
            let expected = &s.right[i - 1]
                + (&r.left[i] - &r.right[i - 1])
                + (a0 * &s.right[i - 1] + a1 * &s.left[i]) * (h / 2.0);
            cont_res = cont_res.max((&s.left[i] - expected).amax());
        }
        let ds = match node.atom {
            Some(a) => coeffs.jump_dx(node.time, &node.x_left, &atoms[a].mark),
            None => DMatrix::zeros(traj.state_dim(), traj.state_dim()),
        };
        let expected = &s.left[i] + (&r.right[i] - &r.left[i]) + ds * &s.left[i];
        jump_res = jump_res.max((&s.right[i] - expected).amax());
    }
    Ok((jump_res, cont_res))
}

/// Mark feature `φ(u)` used by [`FeatureLinear`].
#[derive(Clone)]
pub enum Feature {
    /// `u_i`
    Coord(usize),
    /// `u_i²`
    Square(usize),
    /// Arbitrary feature with its gradient.
    Custom(
        Arc<dyn Fn(&Mark) -> f64 + Send + Sync>,
        Arc<dyn Fn(&Mark) -> DVector<f64> + Send + Sync>,
    ),
}

impl Feature {
    fn value(&self, u: &Mark) -> f64 {
        match self {
            Feature::Coord(i) => u[*i],
            Feature::Square(i) => u[*i] * u[*i],
            Feature::Custom(f, _) => f(u),
        }
    }

    fn gradient(&self, u: &Mark) -> DVector<f64> {
        match self {
            Feature::Coord(i) => {
                let mut g = DVector::zeros(u.len());
                g[*i] = 1.0;
                g
            }
            Feature::Square(i) => {
                let mut g = DVector::zeros(u.len());
                g[*i] = 2.0 * u[*i];
                g
            }
            Feature::Custom(_, g) => g(u),
        }
    }

    fn moment(&self, model: &TruncatedLevyModel) -> Result<f64> {
        let r = model.mark_dim();
        let eps = model.epsilon();
        let closed = match self {
            Feature::Coord(i) => model.measure().first_moment(eps).map(|m| m[*i]),
            Feature::Square(i) => model.measure().second_moment(eps).map(|m| m[*i * r + *i]),
            Feature::Custom(..) => None,
        };
        match closed {
            Some(v) => Ok(v),
            None => model.integrate(&|u| self.value(u), &Quadrature::default()),
        }
    }
}

/// Coefficients linear in the state with feature-weighted marks:
/// `c(t, x, u) = Σ_k φ_k(u) (M_k x + b_k)`, drift `b(t, x) = D x + e`.
///
/// Covers the Doléans-Dade pair, both Lévy-area cases and random linear
/// test systems. The compensator is closed form once
/// [`FeatureLinear::bind`] has computed `∫ φ_k k du`.
#[derive(Clone)]
pub struct FeatureLinear {
    pub features: Vec<Feature>,
    pub mats: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub drift_mat: DMatrix<f64>,
    pub drift_offset: DVector<f64>,
    mark_dim: usize,
    moments: Option<(f64, Vec<f64>)>,
}

impl FeatureLinear {
    pub fn new(
        mark_dim: usize,
        features: Vec<Feature>,
        mats: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let d = offsets.first().map_or(0, |o| o.len());
        if features.is_empty()
            || features.len() != mats.len()
            || mats.len() != offsets.len()
            || mats.iter().any(|m| m.nrows() != d || m.ncols() != d)
            || offsets.iter().any(|o| o.len() != d)
        {
            return Err(Error::Configuration(
                "feature-linear coefficients need matching d×d matrices and d-vectors".into(),
            ));
        }
        Ok(Self {
            features,
            mats,
            offsets,
            drift_mat: DMatrix::zeros(d, d),
            drift_offset: DVector::zeros(d),
            mark_dim,
            moments: None,
        })
    }

    pub fn with_drift(mut self, mat: DMatrix<f64>, offset: DVector<f64>) -> Self {
        self.drift_mat = mat;
        self.drift_offset = offset;
        self
    }

    /// Precompute `∫ φ_k k du` for `model` (closed form where the measure
    /// provides it).
    pub fn bind(mut self, model: &TruncatedLevyModel) -> Result<Self> {
        let moments = self
            .features
            .iter()
            .map(|f| f.moment(model))
            .collect::<Result<Vec<_>>>()?;
        self.moments = Some((model.epsilon(), moments));
        Ok(self)
    }

    /// `∫ φ_k k du` as bound.
    pub fn feature_moments(&self) -> Option<&[f64]> {
        self.moments.as_ref().map(|(_, m)| m.as_slice())
    }
}

impl Coefficients for FeatureLinear {
    fn state_dim(&self) -> usize {
        self.offsets[0].len()
    }

    fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    fn jump(&self, _t: f64, x: &State, u: &Mark) -> State {
        let mut out = DVector::zeros(x.len());
        for ((f, m), b) in self.features.iter().zip(&self.mats).zip(&self.offsets) {
            out += (m * x + b) * f.value(u);
        }
        out
    }

    fn jump_dx(&self, _t: f64, x: &State, u: &Mark) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), x.len());
        for (f, m) in self.features.iter().zip(&self.mats) {
            out += m * f.value(u);
        }
        out
    }

    fn jump_du(&self, _t: f64, x: &State, u: &Mark) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.len(), self.mark_dim);
        for ((f, m), b) in self.features.iter().zip(&self.mats).zip(&self.offsets) {
            out += (m * x + b) * f.gradient(u).transpose();
        }
        out
    }

    fn drift(&self, _t: f64, x: &State) -> State {
        &self.drift_mat * x + &self.drift_offset
    }

    fn drift_dx(&self, _t: f64, _x: &State) -> DMatrix<f64> {
        self.drift_mat.clone()
    }

    fn compensator(
        &self,
        _t: f64,
        x: &State,
        model: &TruncatedLevyModel,
    ) -> Option<(State, DMatrix<f64>)> {
        let (eps, moments) = self.moments.as_ref()?;
        if *eps != model.epsilon() {
            return None;
        }
        let d = x.len();
        let mut value = DVector::zeros(d);
        let mut jac = DMatrix::zeros(d, d);
        for ((m, b), w) in self.mats.iter().zip(&self.offsets).zip(moments) {
            value += (m * x + b) * *w;
            jac += m * *w;
        }
        Some((value, jac))
    }
}

pub type JumpFn = Arc<dyn Fn(f64, &State, &Mark) -> State + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(f64, &State) -> State + Send + Sync>;

/// Closure-backed coefficients with central-difference Jacobians.
#[derive(Clone)]
pub struct FnCoefficients {
    state_dim: usize,
    mark_dim: usize,
    jump: JumpFn,
    drift: Option<DriftFn>,
    fd_step: f64,
}

impl FnCoefficients {
    pub fn new(state_dim: usize, mark_dim: usize, jump: JumpFn) -> Self {
        Self {
            state_dim,
            mark_dim,
            jump,
            drift: None,
            fd_step: 1e-6,
        }
    }

    pub fn with_drift(mut self, drift: DriftFn) -> Self {
        self.drift = Some(drift);
        self
    }
}

/// Central-difference Jacobian of `f` at `x`, step scaled by `1 + |x_j|`.
pub fn central_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, step: f64) -> DMatrix<f64> {
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for j in 0..x.len() {
        let h = step * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

impl Coefficients for FnCoefficients {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    fn jump(&self, t: f64, x: &State, u: &Mark) -> State {
        (self.jump)(t, x, u)
    }

    fn jump_dx(&self, t: f64, x: &State, u: &Mark) -> DMatrix<f64> {
        central_jacobian(|y| (self.jump)(t, y, u), x, self.fd_step)
    }

    fn jump_du(&self, t: f64, x: &State, u: &Mark) -> DMatrix<f64> {
        central_jacobian(|v| (self.jump)(t, x, v), u, self.fd_step)
    }

    fn drift(&self, t: f64, x: &State) -> State {
        match &self.drift {
            Some(b) => b(t, x),
            None => DVector::zeros(x.len()),
        }
    }

    fn drift_dx(&self, t: f64, x: &State) -> DMatrix<f64> {
        match &self.drift {
            Some(b) => central_jacobian(|y| b(t, y), x, self.fd_step),
            None => DMatrix::zeros(x.len(), x.len()),
        }
    }
}

#[cfg(test)]
mod tests;
