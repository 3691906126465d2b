//! Numerical non-degeneracy diagnostics for carré du champ matrices.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bottom_structure::{gamma_matrix, BottomStructure};
use crate::error::{Error, Result};
use crate::lent_particle::{gamma_theorem9, GammaMatrix};
use crate::poisson_measure::{simulate_coupled, JumpConfiguration, LevyMeasure, Mark};
use crate::quadrature::Quadrature;
use crate::rng::{self, Domain};
use crate::sde::{Coefficients, Trajectory};
use crate::stats::median;

/// Default relative rank tolerance.
pub const RANK_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
    pub min_eigenvalue: f64,
    pub full_rank: bool,
    pub rel_tol: f64,
    /// Absolute threshold `rel_tol · σ_max`.
    pub tolerance: f64,
    /// Smallest factor separating any singular value from the threshold.
    pub margin: f64,
    /// Some singular value lies within a factor 10 of the threshold.
    pub indeterminate: bool,
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Input(format!("matrix is {}×{}, not square", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * m.amax() {
        return Err(Error::Input(format!("matrix is not symmetric (defect {asym:e})")));
    }
    Ok(())
}

/// Rank of a symmetric matrix by relative threshold on the singular values
/// of its symmetric eigendecomposition.
pub fn rank_diagnostic(m: &DMatrix<f64>, rel_tol: f64) -> Result<RankReport> {
    check_symmetric(m)?;
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::Input(format!("relative tolerance must lie in (0, 1), got {rel_tol}")));
    }
    let d = m.nrows();
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let tolerance = rel_tol * smax;
    let (rank, margin) = if smax == 0.0 {
        (0, f64::INFINITY)
    } else {
        let rank = sv.iter().filter(|&&s| s > tolerance).count();
        let margin = sv
            .iter()
            .map(|&s| if s == 0.0 { f64::INFINITY } else { (s / tolerance).max(tolerance / s) })
            .fold(f64::INFINITY, f64::min);
        (rank, margin)
    };
    Ok(RankReport {
        rank,
        singular_values: sv,
        min_eigenvalue: if d == 0 { 0.0 } else { min_eigenvalue },
        full_rank: rank == d,
        rel_tol,
        tolerance,
        margin,
        indeterminate: margin < 10.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub satisfied: bool,
    /// `(atom index, jump time)` of the first full-rank conjugated term.
    pub witness: Option<(usize, f64)>,
}

/// True iff a single conjugated per-jump term of `g` is (determinately)
/// full rank; `det` of the sum is then positive.
pub fn scan_terms(g: &GammaMatrix, rel_tol: f64) -> Result<ScanResult> {
    for term in &g.per_jump_terms {
        let r = rank_diagnostic(&term.conjugated(), rel_tol)?;
        if r.full_rank && !r.indeterminate {
            return Ok(ScanResult {
                satisfied: true,
                witness: Some((term.atom, term.time)),
            });
        }
    }
    Ok(ScanResult {
        satisfied: false,
        witness: None,
    })
}

/// [`scan_terms`] on `Γ[X_T]` of a solved trajectory.
pub fn sufficient_condition_scan(
    traj: &Trajectory,
    coeffs: &dyn Coefficients,
    bs: &BottomStructure,
) -> Result<ScanResult> {
    let g = gamma_theorem9(traj, coeffs, bs, traj.horizon)?;
    scan_terms(&g, RANK_REL_TOL)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularCaseReport {
    pub passes: bool,
    pub invertible: bool,
    pub min_eigenvalue: f64,
    /// `max ‖γ(p) − γ(p₀)‖_F / ‖γ(p₀)‖_F` over the probes.
    pub max_relative_variation: f64,
    pub probes_used: usize,
    /// `(outer radius, ν-mass of the shell)` for halving radii around `u0`.
    pub mass_curve: Vec<(f64, f64)>,
    /// Shell masses stop decaying as the radius shrinks.
    pub mass_diverges: bool,
}

fn in_closure(measure: &dyn LevyMeasure, u: &Mark) -> bool {
    if measure.in_support(u) {
        return true;
    }
    let scale = 1e-9 * (1.0 + u.norm());
    (0..u.len()).any(|j| {
        [-1.0, 1.0].iter().any(|s| {
            let mut v = u.clone();
            v[j] += s * scale;
            measure.in_support(&v)
        })
    })
}

fn shell_mass_around(
    measure: &dyn LevyMeasure,
    u0: &Mark,
    lo: f64,
    hi: f64,
    quad: &Quadrature,
) -> Result<Option<f64>> {
    match u0.len() {
        1 => {
            let c = u0[0];
            let f = |x: f64| measure.density(&DVector::from_element(1, x));
            let right = quad.integrate(f, c + lo, c + hi)?;
            let left = quad.integrate(f, c - hi, c - lo)?;
            Ok(Some(right + left))
        }
        2 => quad
            .integrate_2d(
                |rho, th| {
                    let u = DVector::from_column_slice(&[u0[0] + rho * th.cos(), u0[1] + rho * th.sin()]);
                    measure.density(&u) * rho
                },
                (lo, hi),
                (0.0, std::f64::consts::TAU),
            )
            .map(Some),
        _ => Ok(None),
    }
}

/// Shells probed in the mass curve.
const MASS_SHELLS: usize = 10;

/// Invertibility of `γ[c(0, x, ·)](u0)`, a continuity proxy over random
/// probes in the `(s, y, u)` ball of `radius`, and the ν-mass curve of
/// halving shells around `u0`.
#[allow(clippy::too_many_arguments)]
pub fn regular_case_check(
    coeffs: &dyn Coefficients,
    bs: &BottomStructure,
    measure: &dyn LevyMeasure,
    x: &DVector<f64>,
    u0: &Mark,
    radius: f64,
    probes: usize,
    seed: u64,
) -> Result<RegularCaseReport> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Input(format!("radius must be positive, got {radius}")));
    }
    if u0.len() != measure.dim() || x.len() != coeffs.state_dim() {
        return Err(Error::Input("x or u0 has the wrong dimension".into()));
    }
    if !in_closure(measure, u0) {
        return Err(Error::Domain(format!(
            "u0 = {:?} is outside the closure of the support",
            u0.as_slice()
        )));
    }
    let gamma_at = |s: f64, y: &DVector<f64>, u: &Mark| gamma_matrix(&coeffs.jump_du(s, y, u), u, bs);
    let g0 = gamma_at(0.0, x, u0)?;
    let report = rank_diagnostic(&g0, RANK_REL_TOL)?;
    let invertible = report.full_rank && report.min_eigenvalue > 0.0;

    let mut rng = rng::stream(seed, Domain::Probe, 1);
    let ball = |dim: usize, rng: &mut rand_chacha::ChaCha8Rng| loop {
        let v = DVector::from_fn(dim, |_, _| 2.0 * rng.random::<f64>() - 1.0);
        if v.norm() <= 1.0 {
            return v * radius;
        }
    };
    let g0_norm = g0.norm();
    let mut max_variation: f64 = 0.0;
    let mut used = 0;
    for _ in 0..probes {
        let s = radius * rng.random::<f64>();
        let y = x + ball(x.len(), &mut rng);
        let mut u = u0 + ball(u0.len(), &mut rng);
        let mut tries = 0;
        while !measure.in_support(&u) && tries < 100 {
            u = u0 + ball(u0.len(), &mut rng);
            tries += 1;
        }
        if !measure.in_support(&u) {
            continue;
        }
        let g = gamma_at(s, &y, &u)?;
        let diff = (&g - &g0).norm();
        let variation = if g0_norm > 0.0 {
            diff / g0_norm
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        max_variation = max_variation.max(variation);
        used += 1;
    }

    let quad = Quadrature::with_tolerance(1e-14, 1e-8);
    let mut mass_curve = Vec::new();
    for k in 0..MASS_SHELLS {
        let hi = radius * 0.5f64.powi(k as i32);
        match shell_mass_around(measure, u0, hi / 2.0, hi, &quad)? {
            Some(m) => mass_curve.push((hi, m)),
            None => break,
        }
    }
    let tail: Vec<f64> = mass_curve.iter().rev().take(4).map(|p| p.1).collect();
    let mass_diverges = tail.len() == 4 && tail.windows(2).all(|w| w[1] > 0.0 && w[0] >= 0.9 * w[1]);

    Ok(RegularCaseReport {
        passes: invertible && max_variation.is_finite(),
        invertible,
        min_eigenvalue: report.min_eigenvalue,
        max_relative_variation: max_variation,
        probes_used: used,
        mass_curve,
        mass_diverges,
    })
}

/// Numerical rank of the stacked vectors.
pub fn span_dimension(vectors: &[DVector<f64>], rel_tol: f64) -> usize {
    let Some(first) = vectors.first() else {
        return 0;
    };
    let m = DMatrix::from_fn(vectors.len(), first.len(), |i, j| vectors[i][j]);
    let sv = m.svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// A model whose Γ can be evaluated on any configuration, for rank studies.
pub trait RankScenario: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn measure(&self) -> Arc<dyn LevyMeasure>;
    fn horizon(&self) -> f64;
    /// `Γ` at the horizon for a configuration drawn at truncation `epsilon`.
    fn gamma(&self, config: &JumpConfiguration, epsilon: f64) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub epsilon: f64,
    pub n_paths: usize,
    pub full_rank_fraction: f64,
    pub median_min_eig: f64,
    pub indeterminate_paths: usize,
    pub mean_jumps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTable {
    pub scenario: String,
    pub seed: u64,
    /// Rows in order of decreasing ε.
    pub rows: Vec<RankRow>,
    /// Full-rank fraction is non-decreasing as ε decreases.
    pub monotone: bool,
}

impl RankTable {
    /// CSV with columns `epsilon,n_paths,full_rank_fraction,median_min_eig`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        use crate::poisson_measure::fmt_f64;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epsilon", "n_paths", "full_rank_fraction", "median_min_eig"])?;
        for r in &self.rows {
            w.write_record([
                fmt_f64(r.epsilon),
                r.n_paths.to_string(),
                fmt_f64(r.full_rank_fraction),
                fmt_f64(r.median_min_eig),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Full-rank frequencies of `Γ` over `n_paths` superposition-coupled paths
/// per truncation level.
pub fn monte_carlo_rank_stats(
    scenario: &dyn RankScenario,
    n_paths: usize,
    epsilons: &[f64],
    seed: u64,
) -> Result<RankTable> {
    if epsilons.is_empty() {
        return Err(Error::Configuration("epsilons must not be empty".into()));
    }
    if n_paths == 0 {
        return Err(Error::Configuration("n_paths must be positive".into()));
    }
    let mut levels = epsilons.to_vec();
    if levels.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::Configuration("epsilons must be positive and finite".into()));
    }
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let measure = scenario.measure();
    let horizon = scenario.horizon();
    let per_path: Vec<Vec<(RankReport, usize)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let configs = simulate_coupled(&measure, horizon, seed, p as u64, &levels)?;
            configs
                .iter()
                .zip(&levels)
                .map(|(c, &eps)| {
                    let g = scenario.gamma(c, eps)?;
                    Ok((rank_diagnostic(&g, RANK_REL_TOL)?, c.len()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<RankRow> = levels
        .iter()
        .enumerate()
        .map(|(k, &epsilon)| {
            let reports: Vec<&(RankReport, usize)> = per_path.iter().map(|p| &p[k]).collect();
            let full = reports.iter().filter(|r| r.0.full_rank).count();
            let mins: Vec<f64> = reports.iter().map(|r| r.0.min_eigenvalue).collect();
            RankRow {
                epsilon,
                n_paths,
                full_rank_fraction: full as f64 / n_paths as f64,
                median_min_eig: median(&mins),
                indeterminate_paths: reports.iter().filter(|r| r.0.indeterminate).count(),
                mean_jumps: reports.iter().map(|r| r.1 as f64).sum::<f64>() / n_paths as f64,
            }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].full_rank_fraction >= w[0].full_rank_fraction);
    Ok(RankTable {
        scenario: scenario.name().to_string(),
        seed,
        rows,
        monotone,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule per coordinate, floored at the grid spacing.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KdeTable {
    /// One axis per coordinate; the grid is their tensor product.
    pub axes: Vec<Vec<f64>>,
    /// Density at the grid points, last axis fastest.
    pub values: Vec<f64>,
    pub bandwidth: Vec<f64>,
    /// Trapezoid mass of `values` over the grid.
    pub mass: f64,
}

fn trapezoid_weights(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { axis[i] - axis[i - 1] } else { 0.0 };
            let right = if i + 1 < n { axis[i + 1] - axis[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Gaussian product-kernel density estimate on a tensor grid.
pub fn kde_density(samples: &[DVector<f64>], bandwidth: Bandwidth, axes: &[Vec<f64>]) -> Result<KdeTable> {
    if samples.len() < 30 {
        return Err(Error::Input(format!("need at least 30 samples, got {}", samples.len())));
    }
    let d = axes.len();
    if d == 0 || samples.iter().any(|s| s.len() != d) {
        return Err(Error::Input("sample and grid dimensions disagree".into()));
    }
    for axis in axes {
        if axis.len() < 2 || axis.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("grid axes must be strictly increasing with ≥ 2 points".into()));
        }
    }
    let n = samples.len() as f64;
    let bw: Vec<f64> = match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Input(format!("degenerate bandwidth {h}")));
            }
            vec![h; d]
        }
        Bandwidth::Auto => (0..d)
            .map(|j| {
                let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
                let (_, sd) = crate::stats::mean_std(&col);
                let spacing = axes[j].windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
                (sd * (4.0 / ((d as f64 + 2.0) * n)).powf(1.0 / (d as f64 + 4.0))).max(spacing)
            })
            .collect(),
    };
    let sizes: Vec<usize> = axes.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().product();
    let norm = bw.iter().map(|h| h * (2.0 * std::f64::consts::PI).sqrt()).product::<f64>() * n;
    // per-axis kernel tables: k[j][g][s]
    let tables: Vec<Vec<Vec<f64>>> = (0..d)
        .map(|j| {
            axes[j]
                .iter()
                .map(|&g| {
                    samples
                        .iter()
                        .map(|s| (-0.5 * ((g - s[j]) / bw[j]).powi(2)).exp())
                        .collect()
                })
                .collect()
        })
        .collect();
    let index = |mut flat: usize| {
        let mut idx = vec![0; d];
        for j in (0..d).rev() {
            idx[j] = flat % sizes[j];
            flat /= sizes[j];
        }
        idx
    };
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let idx = index(flat);
            (0..samples.len())
                .map(|s| (0..d).map(|j| tables[j][idx[j]][s]).product::<f64>())
                .sum::<f64>()
                / norm
        })
        .collect();
    let weights: Vec<Vec<f64>> = axes.iter().map(|a| trapezoid_weights(a)).collect();
    let mass = values
        .iter()
        .enumerate()
        .map(|(flat, v)| {
            let idx = index(flat);
            v * (0..d).map(|j| weights[j][idx[j]]).product::<f64>()
        })
        .sum();
    Ok(KdeTable {
        axes: axes.to_vec(),
        values,
        bandwidth: bw,
        mass,
    })
}
