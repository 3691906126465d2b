//! McKean-Vlasov equation `X_t = X₀ + ∫ σ(X_{s-}, P_s) dY_s` driven by a
//! pure-jump Lévy process, with the law approximated by particles and a
//! law-freezing Picard iteration.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bottom_structure::{standard_normal_vector, BottomStructure};
use crate::density_criteria::{rank_diagnostic, RankReport, RANK_REL_TOL};
use crate::error::{Error, Result};
use crate::lent_particle::{gamma_theorem9, GammaMatrix};
use crate::poisson_measure::{simulate_path, Mark, TruncatedLevyModel};
use crate::quadrature::Quadrature;
use crate::rng::{self, Domain};
use crate::sde::{central_jacobian, solve_sde, solve_with_flow, Coefficients, InverseMethod, State};

/// Empirical law of the particles at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    pub samples: Vec<State>,
}

impl EmpiricalLaw {
    pub fn mean(&self) -> State {
        let d = self.samples[0].len();
        self.samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / self.samples.len() as f64
    }
}

/// `W₁` proxy: sorted-sample `L¹` distance per coordinate, summed.
pub fn sorted_l1_distance(a: &EmpiricalLaw, b: &EmpiricalLaw) -> f64 {
    let d = a.samples[0].len();
    (0..d)
        .map(|j| {
            let mut x: Vec<f64> = a.samples.iter().map(|s| s[j]).collect();
            let mut y: Vec<f64> = b.samples.iter().map(|s| s[j]).collect();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            x.iter().zip(&y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
        })
        .sum()
}

/// `σ(x, P)`: state dimension `k` by driver dimension `r`.
pub type SigmaFn = Arc<dyn Fn(&State, &EmpiricalLaw) -> DMatrix<f64> + Send + Sync>;

/// Initial law sampler.
pub type InitialLaw = Arc<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> State + Send + Sync>;

#[derive(Clone)]
pub struct McKeanConfig {
    pub sigma: SigmaFn,
    pub initial: InitialLaw,
    pub state_dim: usize,
    pub particles: usize,
    pub picard_iters: usize,
    pub horizon: f64,
    pub step: f64,
    /// Picard residual above which a warning is reported.
    pub tolerance: f64,
}

impl McKeanConfig {
    /// Standard-normal initial law scaled by `scale` around `center`.
    pub fn gaussian_initial(center: State, scale: f64) -> InitialLaw {
        Arc::new(move |rng| &center + standard_normal_vector(center.len(), rng) * scale)
    }
}

/// The frozen-law coefficient `c(s, x, u) = a(x, s) u` with
/// `a(x, s) = σ(x, P_{jh})` for `s ∈ (jh, (j+1)h]`.
struct FrozenCoefficients<'a> {
    sigma: &'a SigmaFn,
    laws: &'a [EmpiricalLaw],
    step: f64,
    state_dim: usize,
    mark_dim: usize,
    /// `∫ u k du` of the truncated driver.
    mean_jump: DVector<f64>,
}

impl FrozenCoefficients<'_> {
    fn law_at(&self, s: f64) -> &EmpiricalLaw {
        // law of the grid interval (jh, (j+1)h] containing s
        let idx = ((s / self.step) * (1.0 - 1e-12)).ceil().max(1.0) as usize - 1;
        &self.laws[idx.min(self.laws.len() - 1)]
    }

    fn a(&self, s: f64, x: &State) -> DMatrix<f64> {
        (self.sigma)(x, self.law_at(s))
    }
}

impl Coefficients for FrozenCoefficients<'_> {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    fn jump(&self, t: f64, x: &State, u: &Mark) -> State {
        self.a(t, x) * u
    }

    fn jump_dx(&self, t: f64, x: &State, u: &Mark) -> DMatrix<f64> {
        central_jacobian(|y| self.a(t, y) * u, x, 1e-6)
    }

    fn jump_du(&self, t: f64, x: &State, _u: &Mark) -> DMatrix<f64> {
        self.a(t, x)
    }

    fn compensator(
        &self,
        t: f64,
        x: &State,
        _model: &TruncatedLevyModel,
    ) -> Option<(State, DMatrix<f64>)> {
        if self.mean_jump.iter().all(|v| *v == 0.0) {
            return Some((DVector::zeros(self.state_dim), DMatrix::zeros(self.state_dim, self.state_dim)));
        }
        let value = self.a(t, x) * &self.mean_jump;
        let jac = central_jacobian(|y| self.a(t, y) * &self.mean_jump, x, 1e-6);
        Some((value, jac))
    }
}

#[derive(Debug, Clone)]
pub struct McKeanResult {
    /// Particle states at the horizon.
    pub samples: Vec<State>,
    /// `W₁` proxy between successive law paths, one per iteration.
    pub picard_residuals: Vec<f64>,
    pub converged: bool,
    pub warning: Option<String>,
    /// `Γ[X_t]` of the tagged path (particle 0) under the final frozen law.
    pub gamma: GammaMatrix,
    /// Rank report of `a aᵀ(X₀, 0)` for the tagged path.
    pub aa_star_at_start: RankReport,
    /// Largest finite-difference Lipschitz estimate of `σ` in `x`.
    pub lipschitz_estimate: f64,
}

fn mean_jump(model: &TruncatedLevyModel) -> Result<DVector<f64>> {
    if let Some(m) = model.measure().first_moment(model.epsilon()) {
        return Ok(m);
    }
    let r = model.mark_dim();
    let quad = Quadrature::default();
    (0..r)
        .map(|j| model.integrate(&|u| u[j], &quad))
        .collect::<Result<Vec<_>>>()
        .map(DVector::from_vec)
}

/// Particle approximation of the McKean-Vlasov law by `picard_iters`
/// law-freezing iterations, then `Γ` of a tagged path with
/// `γ[j, jᵀ]` given by `bs`.
pub fn mckean_vlasov(
    cfg: &McKeanConfig,
    model: &TruncatedLevyModel,
    bs: &BottomStructure,
    seed: u64,
) -> Result<McKeanResult> {
    if cfg.particles < 10 {
        return Err(Error::Configuration(format!(
            "need at least 10 particles, got {}",
            cfg.particles
        )));
    }
    if cfg.picard_iters == 0 {
        return Err(Error::Configuration("picard_iters must be positive".into()));
    }
    if !(cfg.step > 0.0 && cfg.horizon > 0.0) {
        return Err(Error::Configuration("step and horizon must be positive".into()));
    }
    let r = model.mark_dim();
    let n_grid = ((cfg.horizon / cfg.step) - 1e-9).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (0..=n_grid)
        .map(|j| if j == n_grid { cfg.horizon } else { j as f64 * cfg.step })
        .collect();
    let x0: Vec<State> = (0..cfg.particles)
        .map(|p| (cfg.initial)(&mut rng::stream(seed, Domain::InitialState, p as u64)))
        .collect();
    if x0.iter().any(|x| x.len() != cfg.state_dim) {
        return Err(Error::Configuration("initial law has the wrong dimension".into()));
    }
    let configs = (0..cfg.particles)
        .map(|p| simulate_path(model, cfg.horizon, seed, p as u64))
        .collect::<Result<Vec<_>>>()?;
    let m = mean_jump(model)?;

    let start = EmpiricalLaw { samples: x0.clone() };
    let lipschitz_estimate = lipschitz_probe(cfg, &start, seed)?;
    let mut laws = vec![start; grid.len()];
    let mut residuals = Vec::with_capacity(cfg.picard_iters);
    for _ in 0..cfg.picard_iters {
        let coeffs = FrozenCoefficients {
            sigma: &cfg.sigma,
            laws: &laws,
            step: cfg.step,
            state_dim: cfg.state_dim,
            mark_dim: r,
            mean_jump: m.clone(),
        };
        let paths: Vec<Vec<State>> = (0..cfg.particles)
            .into_par_iter()
            .map(|p| {
                let traj = solve_sde(&coeffs, model, &configs[p], &x0[p], cfg.horizon, cfg.step)?;
                Ok(grid
                    .iter()
                    .map(|&g| traj.nodes[traj.node_at(g).expect("grid node")].x.clone())
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let next: Vec<EmpiricalLaw> = (0..grid.len())
            .map(|j| EmpiricalLaw {
                samples: paths.iter().map(|p| p[j].clone()).collect(),
            })
            .collect();
        let residual = laws
            .iter()
            .zip(&next)
            .map(|(a, b)| sorted_l1_distance(a, b))
            .fold(0.0, f64::max);
        residuals.push(residual);
        laws = next;
    }
    let last = *residuals.last().expect("at least one iteration");
    let converged = last <= cfg.tolerance;
    let warning = (!converged).then(|| {
        format!(
            "Picard iteration not converged: residual {last:e} > tolerance {:e}",
            cfg.tolerance
        )
    });

    let coeffs = FrozenCoefficients {
        sigma: &cfg.sigma,
        laws: &laws,
        step: cfg.step,
        state_dim: cfg.state_dim,
        mark_dim: r,
        mean_jump: m,
    };
    let traj = solve_with_flow(
        &coeffs,
        model,
        &configs[0],
        &x0[0],
        cfg.horizon,
        cfg.step,
        InverseMethod::DirectSde,
    )?;
    let gamma = gamma_theorem9(&traj, &coeffs, bs, cfg.horizon)?;
    let a0 = coeffs.a(0.0, &x0[0]);
    let aa_star_at_start = rank_diagnostic(&(&a0 * a0.transpose()), RANK_REL_TOL)?;
    Ok(McKeanResult {
        samples: laws.last().expect("grid").samples.clone(),
        picard_residuals: residuals,
        converged,
        warning,
        gamma,
        aa_star_at_start,
        lipschitz_estimate,
    })
}

/// Finite-difference Lipschitz estimate of `σ(·, P₀)` at sampled points.
fn lipschitz_probe(cfg: &McKeanConfig, law: &EmpiricalLaw, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, Domain::Probe, 7);
    let mut worst: f64 = 0.0;
    for x in law.samples.iter().take(32) {
        let dir = standard_normal_vector(x.len(), &mut rng);
        let dir = dir.normalize() * 1e-4;
        let a = (cfg.sigma)(x, law);
        let b = (cfg.sigma)(&(x + &dir), law);
        let slope = (b - a).norm() / 1e-4;
        if !slope.is_finite() {
            return Err(Error::Model("σ is not Lipschitz at a sampled point".into()));
        }
        worst = worst.max(slope);
    }
    Ok(worst)
}
