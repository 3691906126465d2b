//! Worked examples with closed-form carré du champ oracles: the
//! Doléans-Dade exponential, Lévy's stochastic area (isotropic and graph
//! cases), a McKean-Vlasov equation and stable-like processes.

mod mckean;
mod stable_like;

pub use mckean::{
    mckean_vlasov, sorted_l1_distance, EmpiricalLaw, McKeanConfig, McKeanResult, SigmaFn,
};
pub use stable_like::{
    stable_like_coefficient, stable_like_generator_check, stable_like_pushforward_check,
    zeta, zeta_identity_error, AlphaFn, GeneratorCheck, StableLike, GENERATOR_BIAS_CONSTANT,
};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::bottom_structure::{instances, BottomStructure};
use crate::density_criteria::{span_dimension, RankScenario};
use crate::error::{Error, Result};
use crate::lent_particle::{gamma_theorem9, GammaMatrix, PoissonFunctional};
use crate::poisson_measure::{
    simulate_configuration, AngularWeight, JumpConfiguration, LevyMeasure, Mark, PowerLaw,
    RadialPowerLaw, TruncatedLevyModel,
};
use crate::sde::{solve_with_flow, Feature, FeatureLinear, InverseMethod, State, Trajectory};

/// Relative rank tolerance for span dimensions.
pub const SPAN_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// `(Y, ℰ(Y))` with `dℰ = ℰ_- dY`.
    Doleans,
    /// `(X₁, X₂, ∫X₁dX₂ − ∫X₂dX₁)` for an isotropic planar driver.
    LevyAreaIsotropic,
    /// Same area with `X₂ = [X₁]`: marks `z` on the graph `(z, z²)`.
    LevyAreaGraph,
    /// `c ≡ 0`.
    Zero,
}

/// A shipped example: coefficient family, bottom structure, Lévy measure,
/// numerics and (for all but `Zero`) a closed-form `Γ`.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    pub measure: Arc<dyn LevyMeasure>,
    pub bs: BottomStructure,
    pub x0: State,
    pub horizon: f64,
    pub step: f64,
    pub notes: &'static str,
}

/// One solved path of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub model: TruncatedLevyModel,
    pub trajectory: Trajectory,
    pub pipeline: GammaMatrix,
    pub closed_form: Option<DMatrix<f64>>,
}

/// Structure `γ[f](z) = (z² ∧ 1) f'(z)²` on the graph parameter.
pub fn graph_structure() -> BottomStructure {
    BottomStructure::new(
        "GRAPH_Z",
        1,
        Arc::new(|u: &Mark| u[0] != 0.0),
        Arc::new(|_| 1.0),
        Arc::new(|_| 1.0),
        Arc::new(|u: &Mark| DMatrix::from_element(1, 1, (u[0] * u[0]).min(1.0))),
    )
}

/// Planar measure `g(θ) dθ 1_{(0,1)}(ρ) dρ/ρ` in polar coordinates.
pub fn polar_example_measure(g: AngularWeight, g_max: f64) -> Result<RadialPowerLaw> {
    RadialPowerLaw::planar_with_angle(1.0, 0.0, 1.0, g, g_max)
}

impl Scenario {
    pub fn doleans(measure: Arc<dyn LevyMeasure>) -> Self {
        Self {
            name: "doleans".into(),
            kind: ScenarioKind::Doleans,
            measure,
            bs: instances::intro_1d(),
            x0: DVector::from_column_slice(&[0.0, 1.0]),
            horizon: 1.0,
            step: 0.05,
            notes: "pair (Y_t, E(Y)_t), product factor (1 + u) e^{-u}",
        }
    }

    pub fn levy_area_isotropic(measure: Arc<dyn LevyMeasure>) -> Self {
        Self {
            name: "levy-area-1".into(),
            kind: ScenarioKind::LevyAreaIsotropic,
            measure,
            bs: instances::isotropic(2),
            x0: DVector::zeros(3),
            horizon: 1.0,
            step: 0.05,
            notes: "alpha_12 = 0, alpha_11 = alpha_22 = |x|^2 ∧ 1",
        }
    }

    pub fn levy_area_graph(measure: Arc<dyn LevyMeasure>) -> Self {
        Self {
            name: "levy-area-2".into(),
            kind: ScenarioKind::LevyAreaGraph,
            measure,
            bs: graph_structure(),
            x0: DVector::zeros(3),
            horizon: 1.0,
            step: 0.05,
            notes: "X_2 = [X_1] on the graph x_2 = x_1^2, lambda = 2 x_1, alpha_11 = x_1^2 ∧ 1",
        }
    }

    pub fn zero(measure: Arc<dyn LevyMeasure>, dim: usize) -> Self {
        Self {
            name: "zero".into(),
            kind: ScenarioKind::Zero,
            bs: instances::isotropic(measure.dim()),
            measure,
            x0: DVector::zeros(dim),
            horizon: 1.0,
            step: 0.1,
            notes: "c = 0",
        }
    }

    /// Shipped scenario with its default measure: `doleans`, `levy-area-1`,
    /// `levy-area-2` or `zero`.
    pub fn by_name(name: &str) -> Result<Self> {
        let one_d = || -> Result<Arc<dyn LevyMeasure>> { Ok(Arc::new(PowerLaw::symmetric(0.5, 1.0, 0.9)?)) };
        match name {
            "doleans" => Ok(Self::doleans(one_d()?)),
            "levy-area-1" => Ok(Self::levy_area_isotropic(Arc::new(RadialPowerLaw::isotropic(
                2, 0.5, 1.0, 0.9,
            )?))),
            "levy-area-2" => Ok(Self::levy_area_graph(one_d()?)),
            "zero" => Ok(Self::zero(one_d()?, 2)),
            other => Err(Error::Configuration(format!(
                "unknown scenario `{other}` (expected doleans, levy-area-1, levy-area-2 or zero)"
            ))),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn model(&self, epsilon: f64) -> Result<TruncatedLevyModel> {
        TruncatedLevyModel::new(self.measure.clone(), epsilon)
    }

    fn check_mark_dim(&self, expected: usize) -> Result<()> {
        if self.measure.dim() != expected {
            return Err(Error::Model(format!(
                "scenario `{}` needs {expected}-dimensional marks, measure has {}",
                self.name,
                self.measure.dim()
            )));
        }
        Ok(())
    }

    /// Coefficients bound to `model`'s compensator.
    pub fn coefficients(&self, model: &TruncatedLevyModel) -> Result<FeatureLinear> {
        let z3 = || DMatrix::<f64>::zeros(3, 3);
        let coeffs = match self.kind {
            ScenarioKind::Doleans => {
                self.check_mark_dim(1)?;
                if self.measure.in_support(&DVector::from_element(1, -1.0)) {
                    return Err(Error::Model("the Lévy measure charges u = -1".into()));
                }
                FeatureLinear::new(
                    1,
                    vec![Feature::Coord(0)],
                    vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])],
                    vec![DVector::from_column_slice(&[1.0, 0.0])],
                )?
            }
            ScenarioKind::LevyAreaIsotropic => {
                self.check_mark_dim(2)?;
                let mut m1 = z3();
                m1[(2, 1)] = -1.0;
                let mut m2 = z3();
                m2[(2, 0)] = 1.0;
                FeatureLinear::new(
                    2,
                    vec![Feature::Coord(0), Feature::Coord(1)],
                    vec![m1, m2],
                    vec![
                        DVector::from_column_slice(&[1.0, 0.0, 0.0]),
                        DVector::from_column_slice(&[0.0, 1.0, 0.0]),
                    ],
                )?
            }
            ScenarioKind::LevyAreaGraph => {
                self.check_mark_dim(1)?;
                let mut m1 = z3();
                m1[(2, 1)] = -1.0;
                let mut m2 = z3();
                m2[(2, 0)] = 1.0;
                let base = FeatureLinear::new(
                    1,
                    vec![Feature::Coord(0), Feature::Square(0)],
                    vec![m1, m2.clone()],
                    vec![
                        DVector::from_column_slice(&[1.0, 0.0, 0.0]),
                        DVector::from_column_slice(&[0.0, 1.0, 0.0]),
                    ],
                )?
                .bind(model)?;
                // drift cancelling the compensator of the z² feature keeps
                // X₂ equal to the sum of squared jumps
                let w = base.feature_moments().expect("bound")[1];
                let offset = DVector::from_column_slice(&[0.0, w, 0.0]);
                return Ok(base.with_drift(m2 * w, offset));
            }
            ScenarioKind::Zero => FeatureLinear::new(
                self.measure.dim(),
                vec![Feature::Coord(0)],
                vec![DMatrix::zeros(self.state_dim(), self.state_dim())],
                vec![DVector::zeros(self.state_dim())],
            )?,
        };
        coeffs.bind(model)
    }

    /// Solve a configuration, fill the flows, compute `Γ` by the flow
    /// formula and, when available, by the closed form.
    pub fn run(&self, config: &JumpConfiguration, epsilon: f64) -> Result<ScenarioRun> {
        let model = self.model(epsilon)?;
        let coeffs = self.coefficients(&model)?;
        let trajectory = solve_with_flow(
            &coeffs,
            &model,
            config,
            &self.x0,
            self.horizon,
            self.step,
            InverseMethod::DirectSde,
        )?;
        let pipeline = gamma_theorem9(&trajectory, &coeffs, &self.bs, self.horizon)?;
        let closed_form = self.closed_form_gamma(config, &model, self.horizon)?;
        Ok(ScenarioRun {
            model,
            trajectory,
            pipeline,
            closed_form,
        })
    }

    /// Closed-form `Γ` at `t` computed from the configuration alone.
    pub fn closed_form_gamma(
        &self,
        config: &JumpConfiguration,
        model: &TruncatedLevyModel,
        t: f64,
    ) -> Result<Option<DMatrix<f64>>> {
        match self.kind {
            ScenarioKind::Doleans => Ok(Some(doleans_closed(config, model, &self.bs, t)?.2)),
            ScenarioKind::LevyAreaIsotropic | ScenarioKind::LevyAreaGraph => {
                Ok(Some(self.levy_area_closed(config, model, t)?.gamma))
            }
            ScenarioKind::Zero => Ok(None),
        }
    }

    fn levy_area_closed(
        &self,
        config: &JumpConfiguration,
        model: &TruncatedLevyModel,
        t: f64,
    ) -> Result<LevyAreaClosed> {
        match self.kind {
            ScenarioKind::LevyAreaIsotropic => levy_area_isotropic_closed(config, model, &self.bs, t),
            ScenarioKind::LevyAreaGraph => levy_area_graph_closed(config, model, &self.bs, t),
            _ => Err(Error::Model(format!("`{}` is not a Lévy-area scenario", self.name))),
        }
    }
}

impl RankScenario for Scenario {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn measure(&self) -> Arc<dyn LevyMeasure> {
        self.measure.clone()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn gamma(&self, config: &JumpConfiguration, epsilon: f64) -> Result<DMatrix<f64>> {
        Ok(self.run(config, epsilon)?.pipeline.matrix)
    }
}

/// `(Y_t, ℰ(Y)_t, Γ)` in closed form:
/// `ℰ(Y)_t = exp(Y_t + Σ[log(1 + u) − u])` and
/// `Γ = Σ_{α≤t} (1, ℰ/(1+u))^{⊗2} γ[j](u)`.
fn doleans_closed(
    config: &JumpConfiguration,
    model: &TruncatedLevyModel,
    bs: &BottomStructure,
    t: f64,
) -> Result<(f64, f64, DMatrix<f64>)> {
    let m1 = model
        .measure()
        .first_moment(model.epsilon())
        .map(|m| m[0])
        .map_or_else(|| model.integrate(&|u| u[0], &Default::default()), Ok)?;
    let atoms = config.atoms_until(t);
    let mut y = -m1 * t;
    let mut log_factor = 0.0;
    for a in atoms {
        let u = a.mark[0];
        if u <= -1.0 {
            return Err(Error::Model(format!("mark u = {u} ≤ -1 at t = {}", a.time)));
        }
        y += u;
        log_factor += (1.0 + u).ln() - u;
    }
    let e = (y + log_factor).exp();
    let mut gamma = DMatrix::zeros(2, 2);
    for a in atoms {
        let v = DVector::from_column_slice(&[1.0, e / (1.0 + a.mark[0])]);
        gamma += &v * v.transpose() * bs.metric(&a.mark)[(0, 0)];
    }
    Ok((y, e, gamma))
}

/// `F = (Y_t, ℰ(Y)_t)` with its closed-form mark Jacobian `(1, ℰ/(1+u))`.
pub struct DoleansPair {
    pub model: TruncatedLevyModel,
    pub t: f64,
}

impl PoissonFunctional for DoleansPair {
    fn dim(&self) -> usize {
        2
    }

    fn mark_dim(&self) -> usize {
        1
    }

    fn eval(&self, config: &JumpConfiguration) -> Result<DVector<f64>> {
        let bs = instances::intro_1d();
        let (y, e, _) = doleans_closed(config, &self.model, &bs, self.t)?;
        Ok(DVector::from_column_slice(&[y, e]))
    }

    fn mark_jacobian(&self, config: &JumpConfiguration, atom: usize) -> Option<Result<DMatrix<f64>>> {
        Some(self.eval(config).map(|f| {
            let a = &config.atoms()[atom];
            if a.time > self.t {
                DMatrix::zeros(2, 1)
            } else {
                DMatrix::from_column_slice(2, 1, &[1.0, f[1] / (1.0 + a.mark[0])])
            }
        }))
    }
}

#[derive(Debug, Clone)]
pub struct DoleansResult {
    pub config: JumpConfiguration,
    pub y: f64,
    pub e: f64,
    pub closed_form: DMatrix<f64>,
    pub pipeline: GammaMatrix,
    pub trajectory: Trajectory,
}

/// Simulate one path and compare the closed-form `Γ` of `(Y_t, ℰ(Y)_t)`
/// with the flow formula on the 2-d SDE.
pub fn doleans_dade(model: &TruncatedLevyModel, t: f64, seed: u64) -> Result<DoleansResult> {
    let config = simulate_configuration(model, t, seed)?;
    doleans_on(model, &config, t)
}

pub fn doleans_on(model: &TruncatedLevyModel, config: &JumpConfiguration, t: f64) -> Result<DoleansResult> {
    let mut scenario = Scenario::doleans(model.measure().clone());
    scenario.horizon = t;
    let (y, e, closed_form) = doleans_closed(config, model, &scenario.bs, t)?;
    let run = scenario.run(config, model.epsilon())?;
    Ok(DoleansResult {
        config: config.clone(),
        y,
        e,
        closed_form,
        pipeline: run.pipeline,
        trajectory: run.trajectory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevyAreaCase {
    /// Isotropic planar marks.
    Isotropic,
    /// Marks `z` carried by the graph `x₂ = z²`.
    Graph,
}

/// `λ(x₁, x₂) = 2x₁` on the graph `x₂ = x₁²`.
pub fn graph_lambda(x1: f64, x2: f64) -> Result<f64> {
    if (x2 - x1 * x1).abs() > 1e-12 * (1.0 + x2.abs()) {
        return Err(Error::Domain(format!(
            "({x1}, {x2}) is off the graph x2 = x1^2"
        )));
    }
    Ok(2.0 * x1)
}

struct LevyAreaClosed {
    v: DVector<f64>,
    gamma: DMatrix<f64>,
    span_vectors: Vec<DVector<f64>>,
}

/// Piecewise path of `(X₁, X₂)` from jumps and constant drift `−m`.
struct PlanarPath {
    /// `(time, ΔX, X(α−))` per atom up to `t`.
    jumps: Vec<(f64, [f64; 2], [f64; 2])>,
    end: [f64; 2],
    area: f64,
}

fn planar_path(
    jumps: impl Iterator<Item = (f64, [f64; 2])>,
    drift: [f64; 2],
    t: f64,
) -> PlanarPath {
    let mut x = [0.0, 0.0];
    let mut area = 0.0;
    let mut last = 0.0;
    let mut out = Vec::new();
    let advance = |x: &mut [f64; 2], area: &mut f64, dt: f64| {
        // ∫ X₁ dX₂ − X₂ dX₁ along a straight segment
        *area += x[0] * drift[1] * dt - x[1] * drift[0] * dt;
        x[0] += drift[0] * dt;
        x[1] += drift[1] * dt;
    };
    for (time, dx) in jumps {
        advance(&mut x, &mut area, time - last);
        last = time;
        let left = x;
        area += left[0] * dx[1] - left[1] * dx[0];
        x[0] += dx[0];
        x[1] += dx[1];
        out.push((time, dx, left));
    }
    advance(&mut x, &mut area, t - last);
    PlanarPath {
        jumps: out,
        end: x,
        area,
    }
}

fn levy_area_isotropic_closed(
    config: &JumpConfiguration,
    model: &TruncatedLevyModel,
    bs: &BottomStructure,
    t: f64,
) -> Result<LevyAreaClosed> {
    let m = match model.measure().first_moment(model.epsilon()) {
        Some(m) => m,
        None => DVector::from_column_slice(&[
            model.integrate(&|u| u[0], &Default::default())?,
            model.integrate(&|u| u[1], &Default::default())?,
        ]),
    };
    let path = planar_path(
        config.atoms_until(t).iter().map(|a| (a.time, [a.mark[0], a.mark[1]])),
        [-m[0], -m[1]],
        t,
    );
    let mut gamma = DMatrix::zeros(3, 3);
    let mut span_vectors = Vec::new();
    for (_, dx, left) in &path.jumps {
        let a_t = path.end[1] - dx[1] - 2.0 * left[1];
        let b_t = path.end[0] - dx[0] - 2.0 * left[0];
        let alpha = bs.metric(&DVector::from_column_slice(dx));
        let (a11, a12, a22) = (alpha[(0, 0)], alpha[(0, 1)], alpha[(1, 1)]);
        let term = DMatrix::from_row_slice(
            3,
            3,
            &[
                a11,
                a12,
                a_t * a11 - b_t * a12,
                a12,
                a22,
                a_t * a12 - b_t * a22,
                a_t * a11 - b_t * a12,
                a_t * a12 - b_t * a22,
                a_t * a_t * a11 - 2.0 * a_t * b_t * a12 + b_t * b_t * a22,
            ],
        );
        gamma += term;
        if a11 + a22 > 0.0 {
            span_vectors.push(DVector::from_column_slice(&[1.0, 0.0, a_t]));
            span_vectors.push(DVector::from_column_slice(&[0.0, 1.0, b_t]));
        }
    }
    Ok(LevyAreaClosed {
        v: DVector::from_column_slice(&[path.end[0], path.end[1], path.area]),
        gamma,
        span_vectors,
    })
}

fn levy_area_graph_closed(
    config: &JumpConfiguration,
    model: &TruncatedLevyModel,
    bs: &BottomStructure,
    t: f64,
) -> Result<LevyAreaClosed> {
    let m1 = match model.measure().first_moment(model.epsilon()) {
        Some(m) => m[0],
        None => model.integrate(&|u| u[0], &Default::default())?,
    };
    let path = planar_path(
        config
            .atoms_until(t)
            .iter()
            .map(|a| (a.time, [a.mark[0], a.mark[0] * a.mark[0]])),
        [-m1, 0.0],
        t,
    );
    let mut gamma = DMatrix::zeros(3, 3);
    let mut span_vectors = Vec::new();
    for (_, dx, left) in &path.jumps {
        let lambda = graph_lambda(dx[0], dx[1])?;
        let a_t = path.end[1] - dx[1] - 2.0 * left[1];
        let b_t = path.end[0] - dx[0] - 2.0 * left[0];
        let a11 = bs.metric(&DVector::from_element(1, dx[0]))[(0, 0)];
        let v = DVector::from_column_slice(&[1.0, lambda, a_t - lambda * b_t]);
        gamma += &v * v.transpose() * a11;
        if a11 != 0.0 {
            span_vectors.push(v);
        }
    }
    Ok(LevyAreaClosed {
        v: DVector::from_column_slice(&[path.end[0], path.end[1], path.area]),
        gamma,
        span_vectors,
    })
}

#[derive(Debug, Clone)]
pub struct LevyAreaResult {
    pub config: JumpConfiguration,
    /// `(X₁(t), X₂(t), ∫X₁dX₂ − ∫X₂dX₁)` accumulated jump by jump.
    pub v: DVector<f64>,
    pub closed_form: DMatrix<f64>,
    pub pipeline: GammaMatrix,
    pub trajectory: Trajectory,
    pub span_dim: usize,
}

/// Simulate one path of the Lévy-area scenario and return both `Γ`s.
pub fn levy_area(model: &TruncatedLevyModel, t: f64, seed: u64, case: LevyAreaCase) -> Result<LevyAreaResult> {
    let config = simulate_configuration(model, t, seed)?;
    levy_area_on(model, &config, t, case)
}

pub fn levy_area_on(
    model: &TruncatedLevyModel,
    config: &JumpConfiguration,
    t: f64,
    case: LevyAreaCase,
) -> Result<LevyAreaResult> {
    let mut scenario = match case {
        LevyAreaCase::Isotropic => Scenario::levy_area_isotropic(model.measure().clone()),
        LevyAreaCase::Graph => Scenario::levy_area_graph(model.measure().clone()),
    };
    scenario.horizon = t;
    let closed = scenario.levy_area_closed(config, model, t)?;
    let run = scenario.run(config, model.epsilon())?;
    Ok(LevyAreaResult {
        config: config.clone(),
        v: closed.v,
        closed_form: closed.gamma,
        pipeline: run.pipeline,
        trajectory: run.trajectory,
        span_dim: span_dimension(&closed.span_vectors, SPAN_REL_TOL),
    })
}

#[cfg(test)]
mod tests;
