//! Carré du champ matrices by the lent-particle procedure: add a particle,
//! apply the bottom carré du champ in the mark, take the particle back and
//! sum over the atoms.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bottom_structure::{gamma_matrix, standard_normal_vector, BottomStructure};
use crate::error::{Error, Result};
use crate::poisson_measure::{JumpConfiguration, Mark, TruncatedLevyModel};
use crate::quadrature::Quadrature;
use crate::rng::{self, Domain};
use crate::sde::{self, central_jacobian, Coefficients, InverseMethod, State, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaTag {
    Theorem9,
    Remark3,
    Generic,
    Linear,
    RhoMc,
}

impl FormulaTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FormulaTag::Theorem9 => "theorem9",
            FormulaTag::Remark3 => "remark3",
            FormulaTag::Generic => "generic",
            FormulaTag::Linear => "linear",
            FormulaTag::RhoMc => "rho_mc",
        }
    }
}

impl std::str::FromStr for FormulaTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem9" => Ok(FormulaTag::Theorem9),
            "remark3" => Ok(FormulaTag::Remark3),
            "generic" => Ok(FormulaTag::Generic),
            "linear" => Ok(FormulaTag::Linear),
            "rho_mc" => Ok(FormulaTag::RhoMc),
            other => Err(Error::Configuration(format!("unknown formula tag `{other}`"))),
        }
    }
}

/// One atom's contribution: `conjugator · gamma · conjugatorᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpTerm {
    pub atom: usize,
    pub time: f64,
    /// `γ` of the mark Jacobian, before conjugation.
    pub gamma: DMatrix<f64>,
    pub conjugator: DMatrix<f64>,
}

impl JumpTerm {
    pub fn conjugated(&self) -> DMatrix<f64> {
        &self.conjugator * &self.gamma * self.conjugator.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix {
    pub t: f64,
    pub formula_tag: FormulaTag,
    pub matrix: DMatrix<f64>,
    pub per_jump_terms: Vec<JumpTerm>,
    pub standard_errors: Option<DMatrix<f64>>,
    /// Some mark Jacobian came from finite differences.
    pub approximate_jacobian: bool,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

impl GammaMatrix {
    fn from_terms(t: f64, formula_tag: FormulaTag, dim: usize, terms: Vec<JumpTerm>) -> Self {
        let mut matrix = DMatrix::zeros(dim, dim);
        for term in &terms {
            matrix += term.conjugated();
        }
        Self {
            t,
            formula_tag,
            matrix: symmetrize(&matrix),
            per_jump_terms: terms,
            standard_errors: None,
            approximate_jacobian: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.matrix.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// Sum of the stored terms, as the formula dictates.
    pub fn reassembled(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for term in &self.per_jump_terms {
            m += term.conjugated();
        }
        symmetrize(&m)
    }

    /// Sum of the unconjugated `γ` terms.
    pub fn preconjugation_sum(&self) -> DMatrix<f64> {
        let r = self.per_jump_terms.first().map_or(0, |t| t.gamma.nrows());
        let mut m = DMatrix::zeros(r, r);
        for term in &self.per_jump_terms {
            m += &term.gamma;
        }
        m
    }

    /// `‖self − other‖_F / max(‖self‖_F, ‖other‖_F)`, zero when both vanish.
    pub fn relative_distance(&self, other: &DMatrix<f64>) -> f64 {
        relative_frobenius(&self.matrix, other)
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "t": self.t,
            "formula_tag": self.formula_tag.as_str(),
            "dim": self.dim(),
            "matrix": row_major(&self.matrix),
            "eigenvalues": self.eigenvalues(),
            "approximate_jacobian": self.approximate_jacobian,
        });
        if !self.per_jump_terms.is_empty() {
            v["per_jump_terms"] = self
                .per_jump_terms
                .iter()
                .map(|term| {
                    json!({
                        "atom": term.atom,
                        "time": term.time,
                        "gamma": row_major(&term.gamma),
                        "conjugator": row_major(&term.conjugator),
                    })
                })
                .collect();
        }
        if let Some(se) = &self.standard_errors {
            v["standard_errors"] = json!(row_major(se));
        }
        v
    }
}

pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

fn check_trajectory(traj: &Trajectory, t: f64) -> Result<()> {
    if !traj.has_inverse_flow() || !traj.has_flow() {
        return Err(Error::State("K and K̄ must be filled before computing Γ".into()));
    }
    if !(t >= 0.0 && t <= traj.horizon * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("t = {t} outside [0, {}]", traj.horizon)));
    }
    Ok(())
}

fn flow_gamma(
    traj: &Trajectory,
    coeffs: &dyn Coefficients,
    bs: &BottomStructure,
    t: f64,
    tag: FormulaTag,
) -> Result<GammaMatrix> {
    check_trajectory(traj, t)?;
    let d = traj.state_dim();
    let (_, k_t) = sde::state_and_flow_at(traj, coeffs, t)?;
    let atoms = traj.config.atoms();
    let mut terms = Vec::new();
    for node in traj.jump_nodes_until(t) {
        let a = node.atom.expect("jump node");
        let u = &atoms[a].mark;
        let du = coeffs.jump_du(node.time, &node.x_left, u);
        let gamma = gamma_matrix(&du, u, bs)?;
        let kbar = match tag {
            FormulaTag::Theorem9 => node.kbar.clone().expect("filled"),
            _ => {
                let dx = coeffs.jump_dx(node.time, &node.x_left, u);
                let inv = (DMatrix::identity(d, d) + dx).try_inverse().ok_or_else(|| {
                    Error::Model(format!("I + D_x c is singular at t = {}", node.time))
                })?;
                node.kbar_left.as_ref().expect("filled") * inv
            }
        };
        terms.push(JumpTerm {
            atom: a,
            time: node.time,
            conjugator: &k_t * kbar,
            gamma,
        });
    }
    Ok(GammaMatrix::from_terms(t, tag, d, terms))
}

/// `Γ[X_t] = K_t Σ_{α≤t} K̄_α γ[c(α, X_{α-}, ·)](u_α) K̄_αᵀ K_tᵀ` with the
/// right limit `K̄_α`.
pub fn gamma_theorem9(
    traj: &Trajectory,
    coeffs: &dyn Coefficients,
    bs: &BottomStructure,
    t: f64,
) -> Result<GammaMatrix> {
    flow_gamma(traj, coeffs, bs, t, FormulaTag::Theorem9)
}

/// As [`gamma_theorem9`] with `K̄_{α-} (I + D_x c)^{-1}` in place of `K̄_α`.
pub fn gamma_remark3(
    traj: &Trajectory,
    coeffs: &dyn Coefficients,
    bs: &BottomStructure,
    t: f64,
) -> Result<GammaMatrix> {
    flow_gamma(traj, coeffs, bs, t, FormulaTag::Remark3)
}

/// A vector functional of the configuration.
pub trait PoissonFunctional: Sync {
    fn dim(&self) -> usize;
    fn mark_dim(&self) -> usize;
    fn eval(&self, config: &JumpConfiguration) -> Result<DVector<f64>>;

    /// Closed-form Jacobian of `u ↦ ε⁺_{(α_i, u)} F` on the configuration
    /// with atom `i` removed, evaluated at `u = u_i`.
    fn mark_jacobian(&self, _config: &JumpConfiguration, _atom: usize) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

/// Finite-difference step for mark Jacobians, scaled by `1 + |u|`.
pub const FD_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `u ↦ ε⁺_{(α_i, u)} F` at `u_i`.
pub fn finite_difference_jacobian(
    f: &dyn PoissonFunctional,
    config: &JumpConfiguration,
    atom: usize,
    step: f64,
) -> Result<DMatrix<f64>> {
    let a = config
        .atoms()
        .get(atom)
        .ok_or_else(|| Error::Input(format!("atom {atom} out of range")))?
        .clone();
    let base = config.without_atom(atom);
    let h = step * (1.0 + a.mark.norm());
    let mut jac = DMatrix::zeros(f.dim(), a.mark.len());
    for j in 0..a.mark.len() {
        let mut up = a.mark.clone();
        let mut down = a.mark.clone();
        up[j] += h;
        down[j] -= h;
        let fu = f
            .eval(&base.add_particle(a.time, &up)?)
            .map_err(|e| Error::Functional(format!("evaluation failed at ε⁺ (atom {atom}): {e}")))?;
        let fd = f
            .eval(&base.add_particle(a.time, &down)?)
            .map_err(|e| Error::Functional(format!("evaluation failed at ε⁺ (atom {atom}): {e}")))?;
        jac.set_column(j, &((fu - fd) / (2.0 * h)));
    }
    Ok(jac)
}

/// Mark Jacobian at atom `i`: closed form when offered, else central
/// differences. The flag reports the fallback.
pub fn mark_jacobian(
    f: &dyn PoissonFunctional,
    config: &JumpConfiguration,
    atom: usize,
) -> Result<(DMatrix<f64>, bool)> {
    let (jac, approx) = match f.mark_jacobian(config, atom) {
        Some(j) => (j.map_err(|e| Error::Functional(format!("Jacobian oracle failed: {e}")))?, false),
        None => (finite_difference_jacobian(f, config, atom, FD_STEP)?, true),
    };
    if jac.nrows() != f.dim() || jac.ncols() != config.mark_dim() {
        return Err(Error::Functional(format!(
            "Jacobian has shape {}×{}, expected {}×{}",
            jac.nrows(),
            jac.ncols(),
            f.dim(),
            config.mark_dim()
        )));
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Functional(format!("non-finite Jacobian at atom {atom}")));
    }
    Ok((jac, approx))
}

/// `Γ[F] = Σ_α ε⁻ γ[ε⁺ F]` over the atoms of `config`.
pub fn gamma_generic(
    f: &dyn PoissonFunctional,
    config: &JumpConfiguration,
    bs: &BottomStructure,
) -> Result<GammaMatrix> {
    let mut approx = false;
    let mut terms = Vec::with_capacity(config.len());
    for (i, atom) in config.atoms().iter().enumerate() {
        let (jac, fd) = mark_jacobian(f, config, i)?;
        approx |= fd;
        terms.push(JumpTerm {
            atom: i,
            time: atom.time,
            gamma: gamma_matrix(&jac, &atom.mark, bs)?,
            conjugator: DMatrix::identity(f.dim(), f.dim()),
        });
    }
    let mut g = GammaMatrix::from_terms(config.horizon(), FormulaTag::Generic, f.dim(), terms);
    g.approximate_jacobian = approx;
    Ok(g)
}

pub type MarkMap = Arc<dyn Fn(f64, &Mark) -> DVector<f64> + Send + Sync>;
pub type MarkJacobian = Arc<dyn Fn(f64, &Mark) -> DMatrix<f64> + Send + Sync>;

/// `Ñ(h)_t = Σ_{α≤t} h(α, u_α) − ∫_0^t ∫ h(s, u) k(u) du ds`.
#[derive(Clone)]
pub struct LinearFunctional {
    dim: usize,
    h: MarkMap,
    jacobian: Option<MarkJacobian>,
    model: TruncatedLevyModel,
    t: f64,
    compensator: Arc<OnceLock<std::result::Result<DVector<f64>, String>>>,
}

impl LinearFunctional {
    pub fn new(dim: usize, h: MarkMap, model: TruncatedLevyModel, t: f64) -> Self {
        Self {
            dim,
            h,
            jacobian: None,
            model,
            t,
            compensator: Arc::new(OnceLock::new()),
        }
    }

    pub fn with_jacobian(mut self, jacobian: MarkJacobian) -> Self {
        self.jacobian = Some(jacobian);
        self
    }

    pub fn horizon(&self) -> f64 {
        self.t
    }

    pub fn h(&self, s: f64, u: &Mark) -> DVector<f64> {
        (self.h)(s, u)
    }

    /// `∂_u h(s, u)`: closed form or central differences (flagged).
    pub fn jacobian(&self, s: f64, u: &Mark) -> (DMatrix<f64>, bool) {
        match &self.jacobian {
            Some(j) => (j(s, u), false),
            None => (central_jacobian(|v| (self.h)(s, v), u, FD_STEP), true),
        }
    }

    /// `∫_0^t ∫ h k du ds` by quadrature, computed once.
    pub fn compensator(&self) -> Result<DVector<f64>> {
        let cached = self.compensator.get_or_init(|| {
            let quad = Quadrature::with_tolerance(1e-11, 1e-9);
            let mut out = DVector::zeros(self.dim);
            for a in 0..self.dim {
                let mut failure = None;
                let v = quad.integrate(
                    |s| match self.model.integrate(&|u| (self.h)(s, u)[a], &quad) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.get_or_insert(e.to_string());
                            0.0
                        }
                    },
                    0.0,
                    self.t,
                );
                match (v, failure) {
                    (Ok(v), None) => out[a] = v,
                    (Err(e), _) => return Err(e.to_string()),
                    (_, Some(e)) => return Err(e),
                }
            }
            Ok(out)
        });
        cached
            .clone()
            .map_err(|e| Error::numeric(format!("compensator quadrature failed: {e}"), f64::NAN))
    }
}

impl PoissonFunctional for LinearFunctional {
    fn dim(&self) -> usize {
        self.dim
    }

    fn mark_dim(&self) -> usize {
        self.model.mark_dim()
    }

    fn eval(&self, config: &JumpConfiguration) -> Result<DVector<f64>> {
        let mut sum = DVector::zeros(self.dim);
        for a in config.atoms_until(self.t) {
            sum += (self.h)(a.time, &a.mark);
        }
        Ok(sum - self.compensator()?)
    }

    fn mark_jacobian(&self, config: &JumpConfiguration, atom: usize) -> Option<Result<DMatrix<f64>>> {
        let j = self.jacobian.as_ref()?;
        let a = &config.atoms()[atom];
        Some(Ok(if a.time <= self.t {
            j(a.time, &a.mark)
        } else {
            DMatrix::zeros(self.dim, a.mark.len())
        }))
    }
}

/// `Γ[Ñ(h)]_t = Σ_{α≤t} γ[h(α, ·)](u_α)`.
pub fn gamma_linear(
    h: &LinearFunctional,
    config: &JumpConfiguration,
    bs: &BottomStructure,
    t: f64,
) -> Result<GammaMatrix> {
    let mut approx = false;
    let mut terms = Vec::new();
    for (i, a) in config.atoms_until(t).iter().enumerate() {
        let (jac, fd) = h.jacobian(a.time, &a.mark);
        approx |= fd;
        terms.push(JumpTerm {
            atom: i,
            time: a.time,
            gamma: gamma_matrix(&jac, &a.mark, bs)?,
            conjugator: DMatrix::identity(h.dim, h.dim),
        });
    }
    let mut g = GammaMatrix::from_terms(t, FormulaTag::Linear, h.dim, terms);
    g.approximate_jacobian = approx;
    Ok(g)
}

/// Per-atom `J_i L(u_i)` so that `F♯ = Σ_i J_i L(u_i) r_i`.
struct SharpOperator {
    dim: usize,
    mark_dim: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl SharpOperator {
    fn new(jacobians: Vec<DMatrix<f64>>, config: &JumpConfiguration, bs: &BottomStructure, dim: usize) -> Result<Self> {
        let blocks = jacobians
            .into_iter()
            .zip(config.atoms())
            .map(|(j, a)| Ok(j * bs.factor(&a.mark)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            mark_dim: config.mark_dim(),
            blocks,
        })
    }

    /// `F♯` for ρ-draw set `m`: atom `i` uses block `i` of stream `m`.
    fn sample(&self, seed: u64, m: u64) -> DVector<f64> {
        let mut rng = rng::stream(seed, Domain::Rho, m);
        let mut out = DVector::zeros(self.dim);
        for (i, block) in self.blocks.iter().enumerate() {
            rng::seek(&mut rng, i as u64);
            out += block * standard_normal_vector(self.mark_dim, &mut rng);
        }
        out
    }
}

/// The ρ draw attached to atom `atom` in draw set `m`.
pub fn rho_draw(seed: u64, m: u64, atom: usize, mark_dim: usize) -> DVector<f64> {
    let mut rng = rng::substream(seed, Domain::Rho, m, atom as u64);
    standard_normal_vector(mark_dim, &mut rng)
}

/// One realization of `F♯ = Σ_α ε⁻((ε⁺F)♭)` with one standard-normal draw
/// per atom.
pub fn sharp_sample(
    f: &dyn PoissonFunctional,
    config: &JumpConfiguration,
    bs: &BottomStructure,
    rho_seed: u64,
) -> Result<DVector<f64>> {
    let jacobians = (0..config.len())
        .map(|i| mark_jacobian(f, config, i).map(|(j, _)| j))
        .collect::<Result<Vec<_>>>()?;
    Ok(SharpOperator::new(jacobians, config, bs, f.dim())?.sample(rho_seed, 0))
}

/// `(Ñ(h))♯_t = Σ_{α≤t} h♭(α, u_α, r_α)`.
pub fn sharp_linear(
    h: &LinearFunctional,
    config: &JumpConfiguration,
    bs: &BottomStructure,
    rho_seed: u64,
    t: f64,
) -> Result<DVector<f64>> {
    let mut jacobians: Vec<DMatrix<f64>> = config
        .atoms()
        .iter()
        .map(|a| h.jacobian(a.time, &a.mark).0)
        .collect();
    for (j, a) in jacobians.iter_mut().zip(config.atoms()) {
        if a.time > t {
            j.fill(0.0);
        }
    }
    Ok(SharpOperator::new(jacobians, config, bs, h.dim)?.sample(rho_seed, 0))
}

/// Draws per parallel batch; the reduction runs over batches in index
/// order, so results do not depend on the thread count.
const RHO_BATCH: usize = 1024;

/// `Ê[F♯ F♯ᵀ]` over `M` independent ρ-draw sets on the fixed
/// configuration, with per-entry standard errors.
pub fn gamma_rho_mc(
    f: &dyn PoissonFunctional,
    config: &JumpConfiguration,
    bs: &BottomStructure,
    draws: usize,
    seed: u64,
) -> Result<GammaMatrix> {
    if draws < 2 {
        return Err(Error::Input(format!("need at least 2 ρ draws, got {draws}")));
    }
    let mut approx = false;
    let mut jacobians = Vec::with_capacity(config.len());
    for i in 0..config.len() {
        let (j, fd) = mark_jacobian(f, config, i)?;
        approx |= fd;
        jacobians.push(j);
    }
    let op = SharpOperator::new(jacobians, config, bs, f.dim())?;
    let d = f.dim();
    let batches = draws.div_ceil(RHO_BATCH);
    let partial: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut sum = DMatrix::zeros(d, d);
            let mut sq = DMatrix::zeros(d, d);
            let end = ((b + 1) * RHO_BATCH).min(draws);
            for m in b * RHO_BATCH..end {
                let s = op.sample(seed, m as u64);
                let outer = &s * s.transpose();
                sq += outer.component_mul(&outer);
                sum += outer;
            }
            (sum, sq)
        })
        .collect();
    let mut sum = DMatrix::zeros(d, d);
    let mut sq = DMatrix::zeros(d, d);
    for (s, q) in partial {
        sum += s;
        sq += q;
    }
    let n = draws as f64;
    let mean = sum / n;
    let se = (sq - mean.component_mul(&mean) * n).map(|v| (v.max(0.0) / ((n - 1.0) * n)).sqrt());
    Ok(GammaMatrix {
        t: config.horizon(),
        formula_tag: FormulaTag::RhoMc,
        matrix: symmetrize(&mean),
        per_jump_terms: Vec::new(),
        standard_errors: Some(se),
        approximate_jacobian: approx,
    })
}

/// `X_t` of an SDE as a functional of the configuration; `ε⁺` re-solves the
/// path. No closed-form Jacobian, so [`gamma_generic`] differentiates by
/// re-solving.
pub struct SdeFunctional<'a> {
    pub coeffs: &'a dyn Coefficients,
    pub model: &'a TruncatedLevyModel,
    pub x0: State,
    pub t: f64,
    pub step: f64,
}

impl PoissonFunctional for SdeFunctional<'_> {
    fn dim(&self) -> usize {
        self.coeffs.state_dim()
    }

    fn mark_dim(&self) -> usize {
        self.coeffs.mark_dim()
    }

    fn eval(&self, config: &JumpConfiguration) -> Result<DVector<f64>> {
        let traj = sde::solve_sde(self.coeffs, self.model, config, &self.x0, self.t, self.step)?;
        Ok(traj.final_state().clone())
    }
}

/// Solve with flow and return `Γ[X_t]` by `tag` (flow formulas only).
pub fn gamma_of_solution(
    coeffs: &dyn Coefficients,
    model: &TruncatedLevyModel,
    config: &JumpConfiguration,
    x0: &State,
    t: f64,
    step: f64,
    bs: &BottomStructure,
) -> Result<(Trajectory, GammaMatrix)> {
    let traj = sde::solve_with_flow(coeffs, model, config, x0, t, step, InverseMethod::DirectSde)?;
    let g = gamma_theorem9(&traj, coeffs, bs, t)?;
    Ok((traj, g))
}
