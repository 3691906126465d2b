//! Stable-like processes of variable order `α(x)` built from a Poisson
//! measure with intensity `dt dσ dz` on `S^{d-1} × ℝ₊`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::poisson_measure::{simulate_path, Mark, RadialPowerLaw, TruncatedLevyModel};
use crate::quadrature::Quadrature;
use crate::sde::{central_jacobian, Coefficients, State};

pub type AlphaFn = Arc<dyn Fn(&State) -> f64 + Send + Sync>;

/// Constant in the bias allowance `C·h` of the generator check.
pub const GENERATOR_BIAS_CONSTANT: f64 = 1.0;

/// `ζ(β) = sin(πβ/2) Γ(1+β) Γ((d+β)/2) / (π^{(d+1)/2} Γ((1+β)/2))`.
pub fn zeta(beta: f64, d: usize) -> Result<f64> {
    if !(beta > 0.0 && beta < 2.0) {
        return Err(Error::Domain(format!("ζ(β) needs 0 < β < 2, got {beta}")));
    }
    if d == 0 {
        return Err(Error::Domain("ζ needs d ≥ 1".into()));
    }
    let d = d as f64;
    Ok((PI * beta / 2.0).sin() * gamma(1.0 + beta) * gamma((d + beta) / 2.0)
        / (PI.powf((d + 1.0) / 2.0) * gamma((1.0 + beta) / 2.0)))
}

/// Relative error of `ζ(β) ∫ (1 − cos ξy) |y|^{-1-β} dy = |ξ|^β` in
/// dimension one, by quadrature.
pub fn zeta_identity_error(beta: f64, xi: f64) -> Result<f64> {
    let z = zeta(beta, 1)?;
    if xi == 0.0 {
        return Ok(0.0);
    }
    let w = xi.abs();
    let quad = Quadrature::with_tolerance(1e-12, 1e-10);
    // [0, A] with y = s², which removes the y^{1-β} behaviour at 0
    let a = 20.0 * PI / w;
    let head = quad.integrate(
        |s| {
            if s == 0.0 {
                return 0.0;
            }
            let y = s * s;
            4.0 * (0.5 * w * y).sin().powi(2) * y.powf(-1.0 - beta) * s
        },
        0.0,
        a.sqrt(),
    )?;
    let tail_power = a.powf(-beta) / beta;
    let tail_cos = quad.integrate_oscillatory_tail(|y| (w * y).cos() * y.powf(-1.0 - beta), a, 2.0 * PI / w, 60)?;
    let integral = 2.0 * (head + tail_power - tail_cos);
    let target = w.powf(beta);
    Ok((z * integral - target).abs() / target)
}

/// Variable-order stable-like jump coefficient
/// `c(x, σ, z) = (α(x) z / ζ(α(x)) + u₀^{-α(x)})^{-1/α(x)} σ`, with marks
/// `u = zσ ∈ ℝ^d` and `z ≤ z_max`.
#[derive(Clone)]
pub struct StableLike {
    pub alpha: AlphaFn,
    pub band: (f64, f64),
    pub u0: f64,
    pub dim: usize,
    pub z_max: f64,
}

impl StableLike {
    pub fn new(alpha: AlphaFn, band: (f64, f64), u0: f64, dim: usize, z_max: f64) -> Result<Self> {
        let (l1, l2) = band;
        if !(0.0 < l1 && l1 <= l2 && l2 < 2.0) {
            return Err(Error::Model(format!("need 0 < λ1 ≤ λ2 < 2, got ({l1}, {l2})")));
        }
        if !(u0 > 0.0 && u0.is_finite() && z_max > 0.0 && z_max.is_finite()) {
            return Err(Error::Model("u0 and z_max must be positive and finite".into()));
        }
        if dim == 0 || dim > 2 {
            return Err(Error::Model(format!("stable-like processes supported for d ∈ {{1, 2}}, got {dim}")));
        }
        Ok(Self {
            alpha,
            band,
            u0,
            dim,
            z_max,
        })
    }

    pub fn alpha_at(&self, x: &State) -> Result<f64> {
        let a = (self.alpha)(x);
        if !(a >= self.band.0 && a <= self.band.1) {
            return Err(Error::Model(format!(
                "α(x) = {a} outside [{}, {}]",
                self.band.0, self.band.1
            )));
        }
        Ok(a)
    }

    /// `C(α, z)`.
    pub fn magnitude(&self, alpha: f64, z: f64) -> f64 {
        let zeta = zeta(alpha, self.dim).unwrap_or(f64::NAN);
        (alpha * z / zeta + self.u0.powf(-alpha)).powf(-1.0 / alpha)
    }

    /// Intensity `dz dσ` on `0 < z < z_max` as a measure on `u = zσ`.
    pub fn measure(&self) -> Result<RadialPowerLaw> {
        RadialPowerLaw::isotropic(self.dim, 1.0, -1.0, self.z_max)
    }

    /// Smallest simulated jump size `C(α, z_max)` at `x`.
    pub fn truncation_radius(&self, x: &State) -> Result<f64> {
        Ok(self.magnitude(self.alpha_at(x)?, self.z_max))
    }
}

/// `c(x, σ, z)`; errors when `α(x)` leaves the band, `z < 0` or `|σ| ≠ 1`.
pub fn stable_like_coefficient(
    alpha_fn: &AlphaFn,
    band: (f64, f64),
    u0: f64,
    x: &State,
    z: f64,
    sigma_dir: &DVector<f64>,
) -> Result<DVector<f64>> {
    let s = StableLike::new(alpha_fn.clone(), band, u0, sigma_dir.len().max(1), 1.0)?;
    let alpha = s.alpha_at(x)?;
    if !(z >= 0.0) {
        return Err(Error::Domain(format!("z must be ≥ 0, got {z}")));
    }
    if (sigma_dir.norm() - 1.0).abs() > 1e-12 {
        return Err(Error::Domain("σ must be a unit vector".into()));
    }
    Ok(sigma_dir * s.magnitude(alpha, z))
}

/// Largest relative deviation between the density of `z ↦ C(α, z)` (by
/// change of variables through the inverse map) and `ζ(α) r^{-1-α}` on
/// `n` points of `(0, u₀)`.
pub fn stable_like_pushforward_check(alpha: f64, u0: f64, d: usize, n: usize) -> Result<f64> {
    let zeta = zeta(alpha, d)?;
    let mut worst: f64 = 0.0;
    for i in 1..=n {
        let r = u0 * i as f64 / (n + 1) as f64;
        let z = zeta * (r.powf(-alpha) - u0.powf(-alpha)) / alpha;
        let base = alpha * z / zeta + u0.powf(-alpha);
        let c = base.powf(-1.0 / alpha);
        let dc_dz = -(1.0 / zeta) * base.powf(-1.0 / alpha - 1.0);
        let density = 1.0 / dc_dz.abs();
        let target = zeta * r.powf(-1.0 - alpha);
        worst = worst
            .max((density - target).abs() / target)
            .max((c - r).abs() / r);
    }
    Ok(worst)
}

impl Coefficients for StableLike {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn mark_dim(&self) -> usize {
        self.dim
    }

    fn jump(&self, _t: f64, x: &State, u: &Mark) -> State {
        let z = u.norm();
        u * (self.magnitude((self.alpha)(x), z) / z)
    }

    fn jump_dx(&self, t: f64, x: &State, u: &Mark) -> DMatrix<f64> {
        central_jacobian(|y| self.jump(t, y, u), x, 1e-6)
    }

    fn jump_du(&self, _t: f64, x: &State, u: &Mark) -> DMatrix<f64> {
        let alpha = (self.alpha)(x);
        let z = u.norm();
        let sigma = u / z;
        let c = self.magnitude(alpha, z);
        let dc = -c.powf(1.0 + alpha) / zeta(alpha, self.dim).unwrap_or(f64::NAN);
        let proj = &sigma * sigma.transpose();
        &proj * dc + (DMatrix::identity(self.dim, self.dim) - proj) * (c / z)
    }

    fn compensator(
        &self,
        _t: f64,
        x: &State,
        _model: &TruncatedLevyModel,
    ) -> Option<(State, DMatrix<f64>)> {
        // symmetric in σ for every z
        Some((DVector::zeros(x.len()), DMatrix::zeros(x.len(), x.len())))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GeneratorCheck {
    /// `[E f(X_h) − f(x)] / h`.
    pub monte_carlo: f64,
    pub standard_error: f64,
    /// `A⁰f(x)` over the simulated jump sizes `r ≥ r_min`.
    pub quadrature: f64,
    /// `A⁰f(x)` over all `r < u₀`.
    pub quadrature_full: f64,
    pub truncation_radius: f64,
    pub residual: f64,
    /// `3·SE + C·h`.
    pub bound: f64,
    pub passed: bool,
}

/// `ζ ∫_{S^{d-1}} dσ ∫_lo^{u₀} ½[f(x+rσ) + f(x−rσ) − 2f(x)] r^{-1-α} dr`.
fn generator_quadrature(
    f: &(dyn Fn(&State) -> f64 + Sync),
    x: &State,
    alpha: f64,
    zeta: f64,
    u0: f64,
    lo: f64,
) -> Result<f64> {
    let quad = Quadrature::with_tolerance(1e-13, 1e-10);
    let fx = f(x);
    let radial = |dir: &DVector<f64>| -> Result<f64> {
        let g = |r: f64| 0.5 * (f(&(x + dir * r)) + f(&(x - dir * r)) - 2.0 * fx);
        // r = u₀ s^p with p = 1/(2−α) flattens the r^{1−α} behaviour
        let p = 1.0 / (2.0 - alpha);
        let r_c = 1e-3 * u0;
        let s_lo = (lo.max(r_c) / u0).powf(1.0 / p);
        let body = quad.integrate(
            |s| {
                let r = u0 * s.powf(p);
                g(r) * r.powf(-1.0 - alpha) * u0 * p * s.powf(p - 1.0)
            },
            s_lo,
            1.0,
        )?;
        // below r_c: g(r) ≈ g(r_c)(r/r_c)²
        let inner = if lo < r_c {
            g(r_c) / (r_c * r_c) * (r_c.powf(2.0 - alpha) - lo.powf(2.0 - alpha)) / (2.0 - alpha)
        } else {
            0.0
        };
        Ok(body + inner)
    };
    let total = match x.len() {
        1 => 2.0 * radial(&DVector::from_element(1, 1.0))?,
        2 => {
            let mut failure = None;
            let v = quad.integrate(
                |th| match radial(&DVector::from_column_slice(&[th.cos(), th.sin()])) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                },
                0.0,
                2.0 * PI,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            v
        }
        d => return Err(Error::Configuration(format!("generator quadrature needs d ≤ 2, got {d}"))),
    };
    Ok(zeta * total)
}

const GENERATOR_BATCH: usize = 4096;

/// Monte Carlo `[E f(X_h) − f(x)]/h` against the quadrature of `A⁰f(x)`;
/// passes when the residual is at most `3·SE + C·h`.
pub fn stable_like_generator_check(
    sl: &StableLike,
    x: &State,
    f: &(dyn Fn(&State) -> f64 + Sync),
    h: f64,
    n_paths: usize,
    seed: u64,
) -> Result<GeneratorCheck> {
    if !(h > 0.0) || n_paths < 2 {
        return Err(Error::Input("need h > 0 and at least 2 paths".into()));
    }
    let alpha = sl.alpha_at(x)?;
    let zeta = zeta(alpha, sl.dim)?;
    let r_min = sl.truncation_radius(x)?;
    let wrap = |e: Error| match e {
        Error::Numeric { message, residual } => Error::Numeric {
            message: format!("{message}; refine the quadrature near r = 0"),
            residual,
        },
        other => other,
    };
    let quadrature = generator_quadrature(f, x, alpha, zeta, sl.u0, r_min).map_err(wrap)?;
    let quadrature_full = generator_quadrature(f, x, alpha, zeta, sl.u0, 0.0).map_err(wrap)?;

    let model = TruncatedLevyModel::new(Arc::new(sl.measure()?), 1e-12)?;
    let fx = f(x);
    let batches = n_paths.div_ceil(GENERATOR_BATCH);
    let sums: Vec<(f64, f64)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut s = 0.0;
            let mut sq = 0.0;
            for p in b * GENERATOR_BATCH..((b + 1) * GENERATOR_BATCH).min(n_paths) {
                let config = simulate_path(&model, h, seed, p as u64)?;
                let mut state = x.clone();
                for atom in config.atoms() {
                    sl.alpha_at(&state)?;
                    state += sl.jump(atom.time, &state, &atom.mark);
                }
                let v = (f(&state) - fx) / h;
                s += v;
                sq += v * v;
            }
            Ok((s, sq))
        })
        .collect::<Result<Vec<_>>>()?;
    let (s, sq) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let n = n_paths as f64;
    let mean = s / n;
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    let standard_error = (var / n).sqrt();
    let residual = (mean - quadrature).abs();
    let bound = 3.0 * standard_error + GENERATOR_BIAS_CONSTANT * h;
    Ok(GeneratorCheck {
        monte_carlo: mean,
        standard_error,
        quadrature,
        quadrature_full,
        truncation_radius: r_min,
        residual,
        bound,
        passed: residual <= bound,
    })
}
