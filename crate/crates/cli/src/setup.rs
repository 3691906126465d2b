//! Turn a [`RunConfig`] into a model, coefficients and bottom structure.

use std::sync::Arc;

use lent_core::bottom_structure::{instances, BottomStructure};
use lent_core::density_criteria::RankScenario;
use lent_core::expr::Expr;
use lent_core::lent_particle::{gamma_remark3, gamma_theorem9};
use lent_core::poisson_measure::{PowerLaw, RadialPowerLaw};
use lent_core::scenarios::{polar_example_measure, Scenario};
use lent_core::sde::{solve_with_flow, FnCoefficients};
use lent_core::{
    Coefficients, FormulaTag, GammaMatrix, InverseMethod, JumpConfiguration, LevyMeasure, State,
    Trajectory, TruncatedLevyModel,
};
use nalgebra::{DMatrix, DVector};

use crate::config::RunConfig;
use crate::error::CliError;

const DEFAULT_EXPECTED_JUMPS: f64 = 30.0;
const DEFAULT_G: &str = "1 + 0.5*cos(theta)";
const DEFAULT_G_MAX: f64 = 1.5;

/// Isotropic power law with the configured constants on `ℝ^dim`, and the
/// truncation level for a target mass.
pub struct Measure {
    pub measure: Arc<dyn LevyMeasure>,
    eps_for_mass: Box<dyn Fn(f64) -> lent_core::Result<f64> + Send + Sync>,
}

impl Measure {
    pub fn power_law(cfg: &RunConfig, dim: usize) -> Result<Self, CliError> {
        let m = &cfg.model;
        if dim == 1 {
            let p = PowerLaw::symmetric(m.c, m.beta, m.bound)?;
            let q = p.clone();
            Ok(Self {
                measure: Arc::new(p),
                eps_for_mass: Box::new(move |mass| q.epsilon_for_mass(mass)),
            })
        } else {
            let p = RadialPowerLaw::isotropic(dim, m.c, m.beta, m.bound)?;
            let q = p.clone();
            Ok(Self {
                measure: Arc::new(p),
                eps_for_mass: Box::new(move |mass| q.epsilon_for_mass(mass)),
            })
        }
    }

    fn polar(cfg: &RunConfig) -> Result<Self, CliError> {
        let src = cfg.model.g.clone().unwrap_or_else(|| DEFAULT_G.into());
        let g_max = cfg.model.g_max.unwrap_or(DEFAULT_G_MAX);
        let g = Expr::parse(&src, &["theta"])
            .map_err(|e| CliError::Config(format!("`model.g`: {e}")))?;
        let p = polar_example_measure(Arc::new(move |th| g.eval_point(&[th])), g_max)?;
        let q = p.clone();
        Ok(Self {
            measure: Arc::new(p),
            eps_for_mass: Box::new(move |mass| q.epsilon_for_mass(mass)),
        })
    }

    /// Configured `ε`, or the level giving the expected jump count over
    /// `horizon`.
    pub fn epsilon(&self, cfg: &RunConfig, horizon: f64) -> Result<f64, CliError> {
        match cfg.model.epsilon {
            Some(e) => Ok(e),
            None => {
                let n = cfg.model.expected_jumps.unwrap_or(DEFAULT_EXPECTED_JUMPS);
                (self.eps_for_mass)(n / horizon)
                    .map_err(|e| CliError::Config(format!("`model.expected_jumps`: {e}")))
            }
        }
    }
}

enum Family {
    Shipped(Scenario),
    Custom(Arc<FnCoefficients>),
}

/// Everything needed to simulate one SDE and compute its `Γ`.
pub struct Setup {
    pub name: String,
    family: Family,
    pub measure: Arc<dyn LevyMeasure>,
    pub bs: BottomStructure,
    pub x0: State,
    pub horizon: f64,
    pub step: f64,
    pub t: f64,
    pub epsilon: f64,
    pub inverse: InverseMethod,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Parse a list of expressions over `vars`; errors name `path[i]`.
pub fn parse_all(path: &str, srcs: &[String], vars: &[String]) -> Result<Vec<Expr>, CliError> {
    let refs: Vec<&str> = vars.iter().map(String::as_str).collect();
    srcs.iter()
        .enumerate()
        .map(|(i, s)| Expr::parse(s, &refs).map_err(|e| CliError::Config(format!("`{path}[{i}]`: {e}"))))
        .collect()
}

fn custom_coefficients(cfg: &RunConfig) -> Result<(FnCoefficients, State), CliError> {
    let c = cfg
        .custom
        .as_ref()
        .ok_or_else(|| CliError::Config("`custom`: section required for scenario `custom`".into()))?;
    let (d, r) = (c.state_dim, c.mark_dim);
    let mut vars = vec!["t".to_string()];
    vars.extend(names("x", d));
    vars.extend(names("u", r));
    let jump = Arc::new(parse_all("custom.jump", &c.jump, &vars)?);
    let point = move |t: f64, x: &State, u: Option<&State>| -> Vec<f64> {
        let mut p = Vec::with_capacity(1 + d + r);
        p.push(t);
        p.extend(x.iter());
        match u {
            Some(u) => p.extend(u.iter()),
            None => p.extend(std::iter::repeat_n(0.0, r)),
        }
        p
    };
    let mut coeffs = FnCoefficients::new(
        d,
        r,
        Arc::new(move |t, x, u| {
            let p = point(t, x, Some(u));
            DVector::from_iterator(d, jump.iter().map(|e| e.eval_point(&p)))
        }),
    );
    if let Some(drift) = &c.drift {
        let drift = Arc::new(parse_all("custom.drift", drift, &vars)?);
        coeffs = coeffs.with_drift(Arc::new(move |t, x| {
            let p = point(t, x, None);
            DVector::from_iterator(d, drift.iter().map(|e| e.eval_point(&p)))
        }));
    }
    Ok((coeffs, DVector::from_column_slice(&c.x0)))
}

fn structure(cfg: &RunConfig, default: BottomStructure, dim: usize) -> Result<BottomStructure, CliError> {
    let s = &cfg.structure;
    if let Some(xi) = &s.xi {
        let k = s.k.as_deref().unwrap_or("1");
        let psi = s.psi.as_deref().unwrap_or("1");
        return BottomStructure::from_expressions("CUSTOM", dim, k, psi, xi)
            .map_err(|e| CliError::Config(format!("`structure`: {e}")));
    }
    if s.k.is_some() || s.psi.is_some() {
        return Err(CliError::Config("`structure.xi`: required with k or psi".into()));
    }
    match &s.name {
        Some(name) => instances::by_name(name, dim).map_err(|e| CliError::Config(format!("`structure.name`: {e}"))),
        None => Ok(default),
    }
}

impl Setup {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, CliError> {
        let (mut family, measure, default_bs, x0, horizon, step) = match cfg.scenario.as_str() {
            "custom" => {
                let (coeffs, x0) = custom_coefficients(cfg)?;
                let r = coeffs.mark_dim();
                let m = Measure::power_law(cfg, r)?;
                (Family::Custom(Arc::new(coeffs)), m, instances::isotropic(r), x0, 1.0, 0.05)
            }
            name => {
                let base = if name == "polar" {
                    Scenario::levy_area_isotropic(Arc::new(RadialPowerLaw::isotropic(2, 1.0, 0.0, 1.0)?))
                } else {
                    Scenario::by_name(name).map_err(|e| CliError::Config(format!("`scenario`: {e}")))?
                };
                let m = if name == "polar" {
                    Measure::polar(cfg)?
                } else {
                    Measure::power_law(cfg, base.measure.dim())?
                };
                let (bs, x0, h, s) = (base.bs.clone(), base.x0.clone(), base.horizon, base.step);
                (Family::Shipped(base), m, bs, x0, h, s)
            }
        };
        let horizon = cfg.numerics.horizon.unwrap_or(horizon);
        let step = cfg.numerics.step.unwrap_or(step);
        let t = cfg.numerics.t.unwrap_or(horizon);
        if t > horizon {
            return Err(CliError::Config(format!("`numerics.t`: {t} exceeds the horizon {horizon}")));
        }
        let epsilon = measure.epsilon(cfg, horizon)?;
        let bs = structure(cfg, default_bs, measure.measure.dim())?;
        if let Family::Shipped(s) = &mut family {
            s.measure = measure.measure.clone();
            s.bs = bs.clone();
            s.horizon = horizon;
            s.step = step;
        }
        let inverse = match cfg.numerics.inverse.as_str() {
            "direct_sde" => InverseMethod::DirectSde,
            "per_step_inverse" => InverseMethod::PerStepInverse,
            other => {
                return Err(CliError::Config(format!(
                    "`numerics.inverse`: unknown method `{other}` (direct_sde or per_step_inverse)"
                )))
            }
        };
        Ok(Self {
            name: cfg.scenario.clone(),
            family,
            measure: measure.measure,
            bs,
            x0,
            horizon,
            step,
            t,
            epsilon,
            inverse,
        })
    }

    pub fn model(&self, epsilon: f64) -> Result<TruncatedLevyModel, CliError> {
        Ok(TruncatedLevyModel::new(self.measure.clone(), epsilon)?)
    }

    pub fn coefficients(&self, model: &TruncatedLevyModel) -> Result<Arc<dyn Coefficients>, CliError> {
        Ok(match &self.family {
            Family::Shipped(s) => Arc::new(s.coefficients(model)?),
            Family::Custom(c) => c.clone(),
        })
    }

    pub fn solve(
        &self,
        coeffs: &dyn Coefficients,
        model: &TruncatedLevyModel,
        config: &JumpConfiguration,
    ) -> Result<Trajectory, CliError> {
        Ok(solve_with_flow(coeffs, model, config, &self.x0, self.horizon, self.step, self.inverse)?)
    }

    pub fn closed_form(
        &self,
        config: &JumpConfiguration,
        model: &TruncatedLevyModel,
    ) -> Result<Option<DMatrix<f64>>, CliError> {
        Ok(match &self.family {
            Family::Shipped(s) => s.closed_form_gamma(config, model, self.t)?,
            Family::Custom(_) => None,
        })
    }
}

/// `Γ` by one of the two flow formulas.
pub fn flow_gamma(
    tag: FormulaTag,
    traj: &Trajectory,
    coeffs: &dyn Coefficients,
    bs: &BottomStructure,
    t: f64,
) -> Result<GammaMatrix, CliError> {
    Ok(match tag {
        FormulaTag::Remark3 => gamma_remark3(traj, coeffs, bs, t)?,
        _ => gamma_theorem9(traj, coeffs, bs, t)?,
    })
}

impl RankScenario for Setup {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.x0.len()
    }

    fn measure(&self) -> Arc<dyn LevyMeasure> {
        self.measure.clone()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn gamma(&self, config: &JumpConfiguration, epsilon: f64) -> lent_core::Result<DMatrix<f64>> {
        let model = TruncatedLevyModel::new(self.measure.clone(), epsilon)?;
        let coeffs: Arc<dyn Coefficients> = match &self.family {
            Family::Shipped(s) => Arc::new(s.coefficients(&model)?),
            Family::Custom(c) => c.clone(),
        };
        let traj = solve_with_flow(coeffs.as_ref(), &model, config, &self.x0, self.horizon, self.step, self.inverse)?;
        Ok(gamma_theorem9(&traj, coeffs.as_ref(), &self.bs, self.horizon)?.matrix)
    }
}
