//! Truncated Poisson random measures on `[0, T] × ℝ^r`.
//!
//! A [`JumpConfiguration`] is one realization (finite atom list); a
//! [`TruncatedLevyModel`] is a Lévy measure `ν = k du` restricted to marks
//! with `|u| > ε`, from which configurations are drawn.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Poisson, StandardNormal};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::quadrature::Quadrature;
use crate::rng::{self, Domain};

pub type Mark = DVector<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub time: f64,
    pub mark: Mark,
}

/// Finite realization of `N` on `(0, T] × ℝ^r`, atoms sorted by time.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpConfiguration {
    atoms: Vec<Atom>,
    horizon: f64,
    mark_dim: usize,
}

impl JumpConfiguration {
    pub fn empty(horizon: f64, mark_dim: usize) -> Result<Self> {
        Self::new(Vec::new(), horizon, mark_dim)
    }

    /// Build from atoms in any order. Times must be distinct and in
    /// `(0, T]`, marks nonzero with dimension `mark_dim`.
    pub fn new(mut atoms: Vec<Atom>, horizon: f64, mark_dim: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        for atom in &atoms {
            check_atom(atom.time, &atom.mark, horizon, mark_dim)?;
        }
        atoms.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(w) = atoms.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(Error::Domain(format!("tied jump times at t = {}", w[0].time)));
        }
        Ok(Self {
            atoms,
            horizon,
            mark_dim,
        })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn mark_dim(&self) -> usize {
        self.mark_dim
    }

    /// Atoms with `time <= t`.
    pub fn atoms_until(&self, t: f64) -> &[Atom] {
        let n = self.atoms.partition_point(|a| a.time <= t);
        &self.atoms[..n]
    }

    fn position(&self, t: f64, u: &Mark) -> std::result::Result<usize, usize> {
        let idx = self.atoms.partition_point(|a| a.time < t);
        match self.atoms.get(idx) {
            Some(a) if a.time == t && a.mark == *u => Ok(idx),
            _ => Err(idx),
        }
    }

    pub fn contains(&self, t: f64, u: &Mark) -> bool {
        self.position(t, u).is_ok()
    }

    /// Creation operator ε⁺: insert `(t, u)`; unchanged if already present.
    pub fn add_particle(&self, t: f64, u: &Mark) -> Result<Self> {
        check_atom(t, u, self.horizon, self.mark_dim)?;
        match self.position(t, u) {
            Ok(_) => Ok(self.clone()),
            Err(idx) => {
                if self.atoms.get(idx).is_some_and(|a| a.time == t) {
                    return Err(Error::Domain(format!(
                        "an atom with a different mark already sits at t = {t}"
                    )));
                }
                let mut atoms = self.atoms.clone();
                atoms.insert(
                    idx,
                    Atom {
                        time: t,
                        mark: u.clone(),
                    },
                );
                Ok(Self { atoms, ..*self })
            }
        }
    }

    /// Annihilation operator ε⁻: remove `(t, u)` if present.
    pub fn remove_particle(&self, t: f64, u: &Mark) -> Self {
        match self.position(t, u) {
            Ok(idx) => {
                let mut atoms = self.atoms.clone();
                atoms.remove(idx);
                Self { atoms, ..*self }
            }
            Err(_) => self.clone(),
        }
    }

    /// Remove the atom at index `i`.
    pub fn without_atom(&self, i: usize) -> Self {
        let mut atoms = self.atoms.clone();
        atoms.remove(i);
        Self { atoms, ..*self }
    }

    /// CSV with header `time,mark_1,..,mark_r` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["time".to_string()];
        header.extend((1..=self.mark_dim).map(|i| format!("mark_{i}")));
        w.write_record(&header)?;
        for atom in &self.atoms {
            let mut row = vec![fmt_f64(atom.time)];
            row.extend(atom.mark.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, horizon: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("time") || headers.len() < 2 {
            return Err(Error::Input(
                "configuration CSV needs a `time` column followed by mark columns".into(),
            ));
        }
        let mark_dim = headers.len() - 1;
        let mut atoms = Vec::new();
        for record in r.records() {
            let record = record?;
            let values: Vec<f64> = record
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Input(format!("bad number `{s}` in configuration CSV")))
                })
                .collect::<Result<_>>()?;
            atoms.push(Atom {
                time: values[0],
                mark: DVector::from_column_slice(&values[1..]),
            });
        }
        Self::new(atoms, horizon, mark_dim)
    }
}

/// Round-trip float formatting for CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_atom(t: f64, u: &Mark, horizon: f64, mark_dim: usize) -> Result<()> {
    if !(t > 0.0 && t <= horizon) {
        return Err(Error::Domain(format!("jump time {t} outside (0, {horizon}]")));
    }
    if u.len() != mark_dim {
        return Err(Error::Domain(format!(
            "mark has dimension {}, expected {mark_dim}",
            u.len()
        )));
    }
    if u.iter().all(|v| *v == 0.0) || u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("marks must be finite and nonzero".into()));
    }
    Ok(())
}

/// An absolutely continuous Lévy measure `ν = k du` on `ℝ^r \ {0}`.
pub trait LevyMeasure: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// `k(u)`; zero off the support.
    fn density(&self, u: &Mark) -> f64;

    /// Membership in the open support `O`.
    fn in_support(&self, u: &Mark) -> bool;

    /// `O` lies inside the centered ball of this radius.
    fn bounding_radius(&self) -> f64;

    /// Closed-form `ν(lo < |u| ≤ hi)` when available.
    fn shell_mass(&self, _lo: f64, _hi: f64) -> Option<f64> {
        None
    }

    /// Draw from `ν` restricted to `lo < |u| ≤ hi`, normalized.
    fn sample_shell(&self, lo: f64, hi: f64, rng: &mut dyn RngCore) -> Result<Mark>;

    /// Closed-form `∫_{|u|>ε} u k(u) du` when available.
    fn first_moment(&self, _eps: f64) -> Option<Mark> {
        None
    }

    /// Closed-form `∫_{|u|>ε} u uᵀ k(u) du` when available (row-major r×r).
    fn second_moment(&self, _eps: f64) -> Option<Vec<f64>> {
        None
    }
}

/// `∫_lo^hi ρ^{-1-β} dρ`.
fn radial_power_integral(beta: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    if beta == 0.0 {
        (hi / lo).ln()
    } else if hi.is_infinite() {
        if beta > 0.0 {
            lo.powf(-beta) / beta
        } else {
            f64::INFINITY
        }
    } else {
        (lo.powf(-beta) - hi.powf(-beta)) / beta
    }
}

/// Inverse-CDF draw of `ρ` with density `∝ ρ^{-1-β}` on `(lo, hi]`.
fn sample_radius(beta: f64, lo: f64, hi: f64, rng: &mut dyn RngCore) -> f64 {
    let v: f64 = rng.random();
    if beta == 0.0 {
        lo * (hi / lo).powf(v)
    } else {
        let a = lo.powf(-beta);
        let b = hi.powf(-beta);
        (a - v * (a - b)).powf(-1.0 / beta).clamp(lo.next_up(), hi)
    }
}

/// One-dimensional power law `k(u) = c± |u|^{-1-β}` on `0 < |u| < B`, with
/// separate weights on the positive and negative half-lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerLaw {
    pub c_plus: f64,
    pub c_minus: f64,
    pub beta: f64,
    pub bound: f64,
}

impl PowerLaw {
    pub fn symmetric(c: f64, beta: f64, bound: f64) -> Result<Self> {
        Self::new(c, c, beta, bound)
    }

    pub fn new(c_plus: f64, c_minus: f64, beta: f64, bound: f64) -> Result<Self> {
        if !(c_plus >= 0.0 && c_minus >= 0.0 && beta < 2.0 && bound > 0.0 && bound.is_finite())
        {
            return Err(Error::Model(format!(
                "power law needs c± ≥ 0, β < 2, 0 < B < ∞ (got c+={c_plus}, c-={c_minus}, β={beta}, B={bound})"
            )));
        }
        Ok(Self {
            c_plus,
            c_minus,
            beta,
            bound,
        })
    }

    /// `∫_ε^B u^p · u^{-1-β} du`
    fn side_moment(&self, eps: f64, p: f64) -> f64 {
        radial_power_integral(self.beta - p, eps, self.bound)
    }

    /// Truncation level at which `ν(|u| > ε) = mass`.
    pub fn epsilon_for_mass(&self, mass: f64) -> Result<f64> {
        let c = self.c_plus + self.c_minus;
        if !(mass > 0.0) || c == 0.0 {
            return Err(Error::Model(format!("cannot reach mass {mass}")));
        }
        let eps = if self.beta == 0.0 {
            self.bound * (-mass / c).exp()
        } else {
            (mass * self.beta / c + self.bound.powf(-self.beta)).powf(-1.0 / self.beta)
        };
        if !(eps > 0.0 && eps < self.bound) {
            return Err(Error::Model(format!(
                "mass {mass} is not attainable by truncation (β = {})",
                self.beta
            )));
        }
        Ok(eps)
    }
}

impl LevyMeasure for PowerLaw {
    fn dim(&self) -> usize {
        1
    }

    fn density(&self, u: &Mark) -> f64 {
        let x = u[0];
        if !self.in_support(u) {
            return 0.0;
        }
        let c = if x > 0.0 { self.c_plus } else { self.c_minus };
        c * x.abs().powf(-1.0 - self.beta)
    }

    fn in_support(&self, u: &Mark) -> bool {
        let a = u[0].abs();
        a > 0.0 && a < self.bound
    }

    fn bounding_radius(&self) -> f64 {
        self.bound
    }

    fn shell_mass(&self, lo: f64, hi: f64) -> Option<f64> {
        Some(
            (self.c_plus + self.c_minus)
                * radial_power_integral(self.beta, lo, hi.min(self.bound)),
        )
    }

    fn sample_shell(&self, lo: f64, hi: f64, rng: &mut dyn RngCore) -> Result<Mark> {
        let hi = hi.min(self.bound);
        let total = self.c_plus + self.c_minus;
        if !(lo > 0.0 && hi > lo) || total == 0.0 {
            return Err(Error::Model(format!("empty sampling shell ({lo}, {hi}]")));
        }
        let sign = if rng.random::<f64>() * total < self.c_plus {
            1.0
        } else {
            -1.0
        };
        let r = sample_radius(self.beta, lo, hi, rng);
        Ok(DVector::from_element(1, sign * r.min(self.bound.next_down())))
    }

    fn first_moment(&self, eps: f64) -> Option<Mark> {
        Some(DVector::from_element(
            1,
            (self.c_plus - self.c_minus) * self.side_moment(eps, 1.0),
        ))
    }

    fn second_moment(&self, eps: f64) -> Option<Vec<f64>> {
        Some(vec![(self.c_plus + self.c_minus) * self.side_moment(eps, 2.0)])
    }
}

pub type AngularWeight = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Radial power law on `ℝ^r`: `k(u) = c g(θ) |u|^{-r-β}` on `0 < |u| < B`.
/// The angular weight `g` is only available for `r = 2`; otherwise the
/// measure is isotropic.
#[derive(Clone)]
pub struct RadialPowerLaw {
    dim: usize,
    pub c: f64,
    pub beta: f64,
    pub bound: f64,
    angular: Option<(AngularWeight, f64, f64)>,
}

impl fmt::Debug for RadialPowerLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RadialPowerLaw")
            .field("dim", &self.dim)
            .field("c", &self.c)
            .field("beta", &self.beta)
            .field("bound", &self.bound)
            .field("angular", &self.angular.is_some())
            .finish()
    }
}

impl RadialPowerLaw {
    pub fn isotropic(dim: usize, c: f64, beta: f64, bound: f64) -> Result<Self> {
        if dim == 0 || !(c >= 0.0 && beta < 2.0 && bound > 0.0 && bound.is_finite()) {
            return Err(Error::Model(format!(
                "radial power law needs r ≥ 1, c ≥ 0, β < 2, 0 < B < ∞ (got r={dim}, c={c}, β={beta}, B={bound})"
            )));
        }
        Ok(Self {
            dim,
            c,
            beta,
            bound,
            angular: None,
        })
    }

    /// Planar measure `c g(θ) dθ ρ^{-1-β} dρ`; `g` must be bounded by
    /// `g_max` on `[0, 2π)`.
    pub fn planar_with_angle(
        c: f64,
        beta: f64,
        bound: f64,
        g: AngularWeight,
        g_max: f64,
    ) -> Result<Self> {
        let mut m = Self::isotropic(2, c, beta, bound)?;
        let total = Quadrature::default().integrate(|th| g(th), 0.0, std::f64::consts::TAU)?;
        if !(g_max > 0.0 && total > 0.0) {
            return Err(Error::Model("angular weight must be positive somewhere".into()));
        }
        m.angular = Some((g, g_max, total));
        Ok(m)
    }

    fn sphere_weight(&self) -> f64 {
        match &self.angular {
            Some((_, _, total)) => *total,
            None if self.dim == 1 => 2.0,
            None => {
                let r = self.dim as f64;
                2.0 * std::f64::consts::PI.powf(r / 2.0) / gamma(r / 2.0)
            }
        }
    }

    fn direction(&self, rng: &mut dyn RngCore) -> Mark {
        if let Some((g, g_max, _)) = &self.angular {
            loop {
                let th = rng.random::<f64>() * std::f64::consts::TAU;
                if rng.random::<f64>() * g_max <= g(th) {
                    return DVector::from_column_slice(&[th.cos(), th.sin()]);
                }
            }
        }
        loop {
            let v = DVector::from_fn(self.dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                z
            });
            let n = v.norm();
            if n > 0.0 {
                return v / n;
            }
        }
    }

    /// Truncation level at which `ν(|u| > ε) = mass`.
    pub fn epsilon_for_mass(&self, mass: f64) -> Result<f64> {
        let c = self.c * self.sphere_weight();
        let as_1d = PowerLaw {
            c_plus: c / 2.0,
            c_minus: c / 2.0,
            beta: self.beta,
            bound: self.bound,
        };
        as_1d.epsilon_for_mass(mass)
    }
}

impl LevyMeasure for RadialPowerLaw {
    fn dim(&self) -> usize {
        self.dim
    }

    fn density(&self, u: &Mark) -> f64 {
        if !self.in_support(u) {
            return 0.0;
        }
        let n = u.norm();
        let g = match &self.angular {
            Some((g, _, _)) => g(u[1].atan2(u[0]).rem_euclid(std::f64::consts::TAU)),
            None => 1.0,
        };
        self.c * g * n.powf(-(self.dim as f64) - self.beta)
    }

    fn in_support(&self, u: &Mark) -> bool {
        let n = u.norm();
        n > 0.0 && n < self.bound
    }

    fn bounding_radius(&self) -> f64 {
        self.bound
    }

    fn shell_mass(&self, lo: f64, hi: f64) -> Option<f64> {
        Some(self.c * self.sphere_weight() * radial_power_integral(self.beta, lo, hi.min(self.bound)))
    }

    fn sample_shell(&self, lo: f64, hi: f64, rng: &mut dyn RngCore) -> Result<Mark> {
        let hi = hi.min(self.bound);
        if !(lo > 0.0 && hi > lo) || self.c == 0.0 {
            return Err(Error::Model(format!("empty sampling shell ({lo}, {hi}]")));
        }
        let r = sample_radius(self.beta, lo, hi, rng).min(self.bound.next_down());
        Ok(self.direction(rng) * r)
    }

    fn first_moment(&self, _eps: f64) -> Option<Mark> {
        match self.angular {
            None => Some(DVector::zeros(self.dim)),
            Some(_) => None,
        }
    }

    fn second_moment(&self, eps: f64) -> Option<Vec<f64>> {
        if self.angular.is_some() {
            return None;
        }
        // E[σσᵀ] = I/r over the uniform sphere.
        let radial = radial_power_integral(self.beta - 2.0, eps, self.bound);
        let diag = self.c * self.sphere_weight() * radial / self.dim as f64;
        let r = self.dim;
        Some((0..r * r).map(|i| if i / r == i % r { diag } else { 0.0 }).collect())
    }
}

/// `ν` truncated to `|u| > ε`, with its finite mass `λ_ε`.
#[derive(Debug, Clone)]
pub struct TruncatedLevyModel {
    measure: Arc<dyn LevyMeasure>,
    epsilon: f64,
    mass: f64,
}

impl TruncatedLevyModel {
    pub fn new(measure: Arc<dyn LevyMeasure>, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::Configuration(format!(
                "truncation ε must be ≥ 0, got {epsilon}"
            )));
        }
        let mass = match measure.shell_mass(epsilon, f64::INFINITY) {
            Some(m) => m,
            None => truncated_integral(&*measure, epsilon, &|_| 1.0, &Quadrature::default())?,
        };
        if !mass.is_finite() || mass < 0.0 {
            return Err(Error::Configuration(format!(
                "truncated mass λ_ε is not finite at ε = {epsilon}"
            )));
        }
        Ok(Self {
            measure,
            epsilon,
            mass,
        })
    }

    pub fn measure(&self) -> &Arc<dyn LevyMeasure> {
        &self.measure
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `λ_ε = ν(|u| > ε)`.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn mark_dim(&self) -> usize {
        self.measure.dim()
    }

    /// Truncated density `k(u) 1_{|u|>ε}`.
    pub fn density(&self, u: &Mark) -> f64 {
        if u.norm() > self.epsilon {
            self.measure.density(u)
        } else {
            0.0
        }
    }

    /// Every atom's mark lies in `O` with `|u| > ε`.
    pub fn validate(&self, config: &JumpConfiguration) -> Result<()> {
        if config.mark_dim() != self.mark_dim() {
            return Err(Error::Model(format!(
                "configuration marks have dimension {}, model has {}",
                config.mark_dim(),
                self.mark_dim()
            )));
        }
        for atom in config.atoms() {
            if !self.measure.in_support(&atom.mark) || atom.mark.norm() <= self.epsilon {
                return Err(Error::Model(format!(
                    "mark {:?} at t = {} is outside the truncated support",
                    atom.mark.as_slice(),
                    atom.time
                )));
            }
        }
        Ok(())
    }

    /// `∫_{|u|>ε} f(u) k(u) du`, closed form left to the caller.
    pub fn integrate(&self, f: &dyn Fn(&Mark) -> f64, quad: &Quadrature) -> Result<f64> {
        truncated_integral(&*self.measure, self.epsilon, f, quad)
    }
}

/// `∫_{|u|>ε} f(u) k(u) du` by adaptive quadrature: two half-lines for
/// `r = 1`, polar coordinates for `r = 2`.
pub fn truncated_integral(
    measure: &dyn LevyMeasure,
    eps: f64,
    f: &dyn Fn(&Mark) -> f64,
    quad: &Quadrature,
) -> Result<f64> {
    let radius = measure.bounding_radius();
    let integrand = |u: &Mark| {
        if u.norm() <= eps {
            0.0
        } else {
            let k = measure.density(u);
            if k == 0.0 {
                0.0
            } else {
                f(u) * k
            }
        }
    };
    match measure.dim() {
        1 => {
            let lo = eps.max(0.0);
            let pos = quad.integrate(|x| integrand(&DVector::from_element(1, x)), lo, radius)?;
            let neg = quad.integrate(|x| integrand(&DVector::from_element(1, -x)), lo, radius)?;
            Ok(pos + neg)
        }
        2 => quad.integrate_2d(
            |rho, th| {
                let u = DVector::from_column_slice(&[rho * th.cos(), rho * th.sin()]);
                integrand(&u) * rho
            },
            (eps.max(0.0), radius),
            (0.0, std::f64::consts::TAU),
        ),
        r => Err(Error::Configuration(format!(
            "no quadrature for mark dimension {r} > 2; supply a closed-form compensator"
        ))),
    }
}

/// Draw one configuration on `(0, T]` from `model`. Pure in
/// `(model, T, seed)`.
pub fn simulate_configuration(
    model: &TruncatedLevyModel,
    horizon: f64,
    seed: u64,
) -> Result<JumpConfiguration> {
    simulate_path(model, horizon, seed, 0)
}

/// Configuration for path `path` of a multi-path study.
pub fn simulate_path(
    model: &TruncatedLevyModel,
    horizon: f64,
    seed: u64,
    path: u64,
) -> Result<JumpConfiguration> {
    let mut levels = simulate_coupled(model.measure(), horizon, seed, path, &[model.epsilon()])?;
    Ok(levels.pop().expect("one level"))
}

/// Superposition-coupled configurations for decreasing truncation levels.
///
/// `epsilons` must be strictly decreasing. Level `k` contains every atom of
/// level `k-1` plus an independent Poisson sample of the shell
/// `ε_k < |u| ≤ ε_{k-1}`, so the outputs are nested.
pub fn simulate_coupled(
    measure: &Arc<dyn LevyMeasure>,
    horizon: f64,
    seed: u64,
    path: u64,
    epsilons: &[f64],
) -> Result<Vec<JumpConfiguration>> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Configuration(
            "truncation levels must be strictly decreasing".into(),
        ));
    }
    let mut out = Vec::with_capacity(epsilons.len());
    let mut atoms: Vec<Atom> = Vec::new();
    let mut upper = f64::INFINITY;
    for (shell, &eps) in epsilons.iter().enumerate() {
        let model = TruncatedLevyModel::new(measure.clone(), eps)?;
        let shell_mass = match measure.shell_mass(eps, upper) {
            Some(m) => m,
            None if upper.is_infinite() => model.mass(),
            None => {
                model.mass() - TruncatedLevyModel::new(measure.clone(), upper)?.mass()
            }
        };
        let mut rng = rng::substream(seed, Domain::Configuration, path, shell as u64);
        let mean = shell_mass * horizon;
        let count = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::Configuration(format!("bad Poisson mean {mean}: {e}")))?
                .sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let time = horizon * (1.0 - rng.random::<f64>());
            let mark = measure.sample_shell(eps, upper, &mut rng)?;
            if !measure.in_support(&mark) || mark.norm() <= eps {
                return Err(Error::Model(format!(
                    "sampler produced mark {:?} outside the truncated support",
                    mark.as_slice()
                )));
            }
            atoms.push(Atom { time, mark });
        }
        out.push(JumpConfiguration::new(atoms.clone(), horizon, measure.dim())?);
        upper = eps;
    }
    Ok(out)
}

/// Quadrature scheme for [`compensated_integral`].
#[derive(Debug, Clone, Copy, Default)]
pub enum Compensator {
    /// Adaptive quadrature in time and mark.
    #[default]
    Adaptive,
    /// Caller-supplied value of `∫_0^t ∫ h k du ds`.
    ClosedForm(f64),
}

/// `∫_0^t ∫ h dÑ = Σ_{α_i ≤ t} h(α_i, u_i) − ∫_0^t ∫_{|u|>ε} h(s, u) k(u) du ds`.
pub fn compensated_integral(
    config: &JumpConfiguration,
    h: &dyn Fn(f64, &Mark) -> f64,
    model: &TruncatedLevyModel,
    t: f64,
    compensator: Compensator,
    quad: &Quadrature,
) -> Result<f64> {
    let jumps: f64 = config
        .atoms_until(t)
        .iter()
        .map(|a| h(a.time, &a.mark))
        .sum();
    let drift = match compensator {
        Compensator::ClosedForm(v) => v,
        Compensator::Adaptive => {
            let mut failure = None;
            let v = quad.integrate(
                |s| match model.integrate(&|u| h(s, u), quad) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                },
                0.0,
                t,
            )?;
            if let Some(e) = failure {
                return Err(e);
            }
            v
        }
    };
    Ok(jumps - drift)
}
