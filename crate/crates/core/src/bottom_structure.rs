//! Bottom Dirichlet structure on mark space: the carré du champ
//! `γ[f](u) = Σ ξ_ij(u) ∂_i f ∂_j f ψ(u)/k(u)` (with `0/0 = 0`) and the
//! randomized gradient `f♭(u, r) = ∇f(u)ᵀ L(u) r`, `L Lᵀ = ξψ/k`, `r ~ N(0, I_r)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::poisson_measure::Mark;

pub type ScalarField = Arc<dyn Fn(&Mark) -> f64 + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&Mark) -> DMatrix<f64> + Send + Sync>;
pub type Region = Arc<dyn Fn(&Mark) -> bool + Send + Sync>;

#[derive(Clone)]
pub struct BottomStructure {
    name: String,
    dim: usize,
    region: Region,
    k: ScalarField,
    psi: ScalarField,
    xi: MatrixField,
}

impl fmt::Debug for BottomStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BottomStructure")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

/// One draw of the randomized gradient together with its `ρ` sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub value: f64,
    pub rho_draw: DVector<f64>,
}

/// Outcome of [`BottomStructure::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct StructureCheck {
    pub points_in_region: usize,
    /// Smallest `ξ` eigenvalue seen in `O` (ellipticity lower bound).
    pub min_xi_eigenvalue: f64,
    /// Largest `Σ|ξ_ij|` seen in `O`.
    pub max_xi_abs_sum: f64,
    pub max_psi_over_k: f64,
    pub max_factor_residual: f64,
}

impl BottomStructure {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        region: Region,
        k: ScalarField,
        psi: ScalarField,
        xi: MatrixField,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            region,
            k,
            psi,
            xi,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn in_region(&self, u: &Mark) -> bool {
        (self.region)(u)
    }

    /// `ψ(u)/k(u)` with `0/0 = 0`; zero off `O`.
    pub fn weight(&self, u: &Mark) -> f64 {
        if !self.in_region(u) {
            return 0.0;
        }
        let psi = (self.psi)(u);
        if psi == 0.0 {
            return 0.0;
        }
        psi / (self.k)(u)
    }

    /// `ξ(u) ψ(u)/k(u)`, the r×r matrix of the quadratic form.
    pub fn metric(&self, u: &Mark) -> DMatrix<f64> {
        let w = self.weight(u);
        if w == 0.0 {
            return DMatrix::zeros(self.dim, self.dim);
        }
        (self.xi)(u) * w
    }

    /// Factor `L(u)` with `L Lᵀ = ξψ/k`: Cholesky where positive definite,
    /// otherwise an eigenvalue-clamped square root.
    pub fn factor(&self, u: &Mark) -> Result<DMatrix<f64>> {
        let m = self.metric(u);
        check_finite(m.iter(), "ξψ/k")?;
        if m.iter().all(|v| *v == 0.0) {
            return Ok(m);
        }
        if let Some(ch) = m.clone().cholesky() {
            return Ok(ch.l());
        }
        let trace = m.trace().abs();
        let eig = m.symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min < -1e-12 * trace.max(f64::MIN_POSITIVE) {
            return Err(Error::Structure(format!(
                "ξψ/k is not positive semidefinite at {:?} (eigenvalue {min:e})",
                u.as_slice()
            )));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
    }

    /// Spot-check the structure at `points`: ψ ≤ k, symmetry of ξ, local
    /// ellipticity, and factor consistency.
    pub fn validate(&self, points: &[Mark]) -> Result<StructureCheck> {
        let mut check = StructureCheck {
            points_in_region: 0,
            min_xi_eigenvalue: f64::INFINITY,
            max_xi_abs_sum: 0.0,
            max_psi_over_k: 0.0,
            max_factor_residual: 0.0,
        };
        for u in points.iter().filter(|u| self.in_region(u)) {
            check.points_in_region += 1;
            let (k, psi) = ((self.k)(u), (self.psi)(u));
            if psi > k * (1.0 + 1e-12) || psi < 0.0 {
                return Err(Error::Structure(format!(
                    "need k ≥ ψ ≥ 0 at {:?}, got k = {k}, ψ = {psi}",
                    u.as_slice()
                )));
            }
            let xi = (self.xi)(u);
            let asym = (&xi - xi.transpose()).amax();
            if asym > 1e-12 * (1.0 + xi.amax()) {
                return Err(Error::Structure(format!(
                    "ξ is not symmetric at {:?}",
                    u.as_slice()
                )));
            }
            check.min_xi_eigenvalue = check
                .min_xi_eigenvalue
                .min(xi.clone().symmetric_eigen().eigenvalues.min());
            check.max_xi_abs_sum = check.max_xi_abs_sum.max(xi.iter().map(|v| v.abs()).sum());
            check.max_psi_over_k = check.max_psi_over_k.max(self.weight(u));
            let m = self.metric(u);
            let l = self.factor(u)?;
            let residual = (&l * l.transpose() - &m).norm() / (1.0 + m.norm());
            check.max_factor_residual = check.max_factor_residual.max(residual);
        }
        if check.points_in_region > 0 && !(check.min_xi_eigenvalue > 0.0) {
            return Err(Error::Structure(format!(
                "ξ is not elliptic on the sampled points (min eigenvalue {})",
                check.min_xi_eigenvalue
            )));
        }
        if check.max_factor_residual > 1e-12 {
            return Err(Error::Structure(format!(
                "factor residual {} exceeds 1e-12",
                check.max_factor_residual
            )));
        }
        Ok(check)
    }

    /// Custom structure from expressions in `x1..xr` (or `x` when `r = 1`):
    /// density `k`, weight `ψ` and the diagonal of `ξ`. `O = {ψ > 0}`.
    pub fn from_expressions(
        name: impl Into<String>,
        dim: usize,
        k: &str,
        psi: &str,
        xi_diag: &[String],
    ) -> Result<Self> {
        if xi_diag.len() != dim {
            return Err(Error::Configuration(format!(
                "ξ diagonal has {} entries, mark dimension is {dim}",
                xi_diag.len()
            )));
        }
        let names: Vec<String> = if dim == 1 {
            vec!["x".into(), "x1".into()]
        } else {
            (1..=dim).map(|i| format!("x{i}")).collect()
        };
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let point = move |u: &Mark| -> (Vec<f64>, f64) {
            let mut v: Vec<f64> = u.iter().copied().collect();
            if dim == 1 {
                v.push(u[0]);
            }
            (v, u.norm())
        };
        let k = Arc::new(Expr::parse(k, &refs)?);
        let psi = Arc::new(Expr::parse(psi, &refs)?);
        let xi: Vec<Expr> = xi_diag
            .iter()
            .map(|s| Expr::parse(s, &refs))
            .collect::<Result<_>>()?;
        let xi = Arc::new(xi);
        let psi_region = psi.clone();
        Ok(Self::new(
            name,
            dim,
            Arc::new(move |u| {
                let (v, n) = point(u);
                n > 0.0 && psi_region.eval(&v, n) > 0.0
            }),
            Arc::new(move |u| {
                let (v, n) = point(u);
                k.eval(&v, n)
            }),
            Arc::new(move |u| {
                let (v, n) = point(u);
                psi.eval(&v, n)
            }),
            Arc::new(move |u| {
                let (v, n) = point(u);
                DMatrix::from_diagonal(&DVector::from_iterator(
                    dim,
                    xi.iter().map(|e| e.eval(&v, n)),
                ))
            }),
        ))
    }
}

fn check_finite<'a>(values: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    let mut values = values;
    if values.any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite entries in {what}"), f64::NAN));
    }
    Ok(())
}

/// `γ[f](u)` from the mark gradient of `f`.
pub fn gamma_scalar(grad: &DVector<f64>, u: &Mark, bs: &BottomStructure) -> Result<f64> {
    check_finite(grad.iter(), "gradient")?;
    if grad.len() != bs.dim() {
        return Err(Error::Input(format!(
            "gradient has length {}, mark dimension is {}",
            grad.len(),
            bs.dim()
        )));
    }
    let m = bs.metric(u);
    Ok((grad.transpose() * m * grad)[(0, 0)].max(0.0))
}

/// `γ[c, cᵀ](u)` for a vector function with mark Jacobian `jac` (d×r):
/// entry `(a, b) = Σ ξ_ij ∂_i c_a ∂_j c_b ψ/k`.
pub fn gamma_matrix(jac: &DMatrix<f64>, u: &Mark, bs: &BottomStructure) -> Result<DMatrix<f64>> {
    check_finite(jac.iter(), "mark Jacobian")?;
    if jac.ncols() != bs.dim() {
        return Err(Error::Input(format!(
            "Jacobian has {} columns, mark dimension is {}",
            jac.ncols(),
            bs.dim()
        )));
    }
    let m = bs.metric(u);
    let g = jac * m * jac.transpose();
    Ok((&g + g.transpose()) * 0.5)
}

/// `f♭(u, r) = ∇f(u)ᵀ L(u) r`.
pub fn gradient_flat(
    grad: &DVector<f64>,
    u: &Mark,
    rho_draw: &DVector<f64>,
    bs: &BottomStructure,
) -> Result<f64> {
    check_finite(grad.iter(), "gradient")?;
    let l = bs.factor(u)?;
    Ok(grad.dot(&(l * rho_draw)))
}

/// Vector form `c♭(u, r) = J(u) L(u) r` for a d×r mark Jacobian.
pub fn gradient_flat_vector(
    jac: &DMatrix<f64>,
    u: &Mark,
    rho_draw: &DVector<f64>,
    bs: &BottomStructure,
) -> Result<DVector<f64>> {
    check_finite(jac.iter(), "mark Jacobian")?;
    let l = bs.factor(u)?;
    Ok(jac * (l * rho_draw))
}

/// Draw `r ~ N(0, I_r)` and evaluate `f♭`.
pub fn sample_gradient(
    grad: &DVector<f64>,
    u: &Mark,
    bs: &BottomStructure,
    rng: &mut dyn RngCore,
) -> Result<GradientSample> {
    let rho_draw = standard_normal_vector(bs.dim(), rng);
    let value = gradient_flat(grad, u, &rho_draw, bs)?;
    Ok(GradientSample { value, rho_draw })
}

pub(crate) fn standard_normal_vector(dim: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut *rng);
        z
    })
}

/// Named instances shipped with the library.
pub mod instances {
    use super::*;

    pub const INTRO_1D: &str = "INTRO_1D";
    pub const ISOTROPIC_RD: &str = "ISOTROPIC_RD";
    pub const PSI_OVER_K: &str = "PSI_OVER_K";

    fn unit() -> ScalarField {
        Arc::new(|_| 1.0)
    }

    /// `γ[f](x) = x² f'(x)² 1_{|x| < 1/2}` on `ℝ \ {0}`.
    pub fn intro_1d() -> BottomStructure {
        BottomStructure::new(
            INTRO_1D,
            1,
            Arc::new(|u: &Mark| {
                let a = u[0].abs();
                a > 0.0 && a < 0.5
            }),
            unit(),
            unit(),
            Arc::new(|u: &Mark| DMatrix::from_element(1, 1, u[0] * u[0])),
        )
    }

    /// `γ[j, jᵀ](x) = (|x|² ∧ 1) I` on `ℝ^r \ {0}`.
    pub fn isotropic(dim: usize) -> BottomStructure {
        BottomStructure::new(
            ISOTROPIC_RD,
            dim,
            Arc::new(|u: &Mark| u.norm() > 0.0),
            unit(),
            unit(),
            Arc::new(move |u: &Mark| DMatrix::identity(dim, dim) * u.norm_squared().min(1.0)),
        )
    }

    /// `ξ = |x|² I` with user weight `ψ` and density `k`; `O = {ψ > 0}`.
    pub fn psi_over_k(dim: usize, psi: ScalarField, k: ScalarField) -> BottomStructure {
        let region_psi = psi.clone();
        BottomStructure::new(
            PSI_OVER_K,
            dim,
            Arc::new(move |u: &Mark| u.norm() > 0.0 && region_psi(u) > 0.0),
            k,
            psi,
            Arc::new(move |u: &Mark| DMatrix::identity(dim, dim) * u.norm_squared()),
        )
    }

    /// Catalog of the parameter-free instances, `ISOTROPIC_RD` and
    /// `PSI_OVER_K` (with `ψ = k = 1`) at dimension `dim`.
    pub fn standard_instances(dim: usize) -> Vec<BottomStructure> {
        let mut out = Vec::new();
        if dim == 1 {
            out.push(intro_1d());
        }
        out.push(isotropic(dim));
        out.push(psi_over_k(dim, unit(), unit()));
        out
    }

    pub fn by_name(name: &str, dim: usize) -> Result<BottomStructure> {
        match name {
            INTRO_1D if dim == 1 => Ok(intro_1d()),
            ISOTROPIC_RD => Ok(isotropic(dim)),
            PSI_OVER_K => Ok(psi_over_k(dim, unit(), unit())),
            _ => Err(Error::Configuration(format!(
                "unknown bottom structure `{name}` for mark dimension {dim}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::instances::*;
    use super::*;
    use crate::rng::{self, Domain};
    use proptest::prelude::*;

    fn m1(v: f64) -> Mark {
        DVector::from_element(1, v)
    }

    /// Random SPD ξ, positive ψ ≤ k at a fixed point, dimension r.
    fn random_structure(r: usize, entries: &[f64], psi: f64, k: f64) -> BottomStructure {
        let a = DMatrix::from_fn(r, r, |i, j| entries[(i * r + j) % entries.len()]);
        let xi = &a * a.transpose() + DMatrix::identity(r, r) * 0.1;
        BottomStructure::new(
            "random",
            r,
            Arc::new(|_| true),
            Arc::new(move |_| k),
            Arc::new(move |_| psi),
            Arc::new(move |_| xi.clone()),
        )
    }

    #[test]
    fn zero_gradient_gives_zero() {
        let bs = intro_1d();
        assert_eq!(gamma_scalar(&DVector::zeros(1), &m1(0.25), &bs).unwrap(), 0.0);
        assert_eq!(
            gamma_matrix(&DMatrix::zeros(3, 1), &m1(0.25), &bs).unwrap(),
            DMatrix::zeros(3, 3)
        );
        let draw = DVector::from_element(1, 1.7);
        assert_eq!(gradient_flat(&DVector::zeros(1), &m1(0.25), &draw, &bs).unwrap(), 0.0);
    }

    #[test]
    fn intro_values() {
        let bs = intro_1d();
        let g = DVector::from_element(1, 1.0);
        assert!((gamma_scalar(&g, &m1(0.25), &bs).unwrap() - 0.0625).abs() < 1e-16);
        assert_eq!(gamma_scalar(&g, &m1(0.75), &bs).unwrap(), 0.0);
        assert_eq!(gamma_scalar(&g, &m1(-0.5), &bs).unwrap(), 0.0);
    }

    #[test]
    fn isotropic_saturates() {
        let bs = isotropic(2);
        let u = DVector::from_column_slice(&[3.0, 4.0]);
        let g = gamma_matrix(&DMatrix::identity(2, 2), &u, &bs).unwrap();
        assert_eq!(g, DMatrix::identity(2, 2));
        let u = DVector::from_column_slice(&[0.3, 0.4]);
        let g = gamma_matrix(&DMatrix::identity(2, 2), &u, &bs).unwrap();
        assert!((g - DMatrix::identity(2, 2) * 0.25).amax() < 1e-16);
    }

    #[test]
    fn psi_over_k_weight() {
        let k: ScalarField = Arc::new(|u: &Mark| 2.0 / u.norm());
        let bs = psi_over_k(2, k.clone(), k);
        let u = DVector::from_column_slice(&[0.6, 0.8]);
        assert_eq!(bs.weight(&u), 1.0);
        let g = gamma_matrix(&DMatrix::identity(2, 2), &u, &bs).unwrap();
        assert!((g - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let bs = BottomStructure::new(
            "degenerate",
            1,
            Arc::new(|_| true),
            Arc::new(|_| 0.0),
            Arc::new(|_| 0.0),
            Arc::new(|_| DMatrix::identity(1, 1)),
        );
        assert_eq!(bs.weight(&m1(0.3)), 0.0);
        let g = DVector::from_element(1, 2.0);
        assert_eq!(gamma_scalar(&g, &m1(0.3), &bs).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let bs = intro_1d();
        let g = DVector::from_element(1, f64::NAN);
        assert!(matches!(gamma_scalar(&g, &m1(0.25), &bs), Err(Error::Numeric { .. })));
    }

    #[test]
    fn indefinite_metric_is_structure_error() {
        let bs = BottomStructure::new(
            "bad",
            2,
            Arc::new(|_| true),
            Arc::new(|_| 1.0),
            Arc::new(|_| 1.0),
            Arc::new(|_| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])),
        );
        let u = DVector::from_column_slice(&[0.1, 0.1]);
        assert!(matches!(bs.factor(&u), Err(Error::Structure(_))));
    }

    #[test]
    fn singular_psd_metric_uses_clamped_factor() {
        let bs = BottomStructure::new(
            "rank1",
            2,
            Arc::new(|_| true),
            Arc::new(|_| 1.0),
            Arc::new(|_| 1.0),
            Arc::new(|_| DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])),
        );
        let u = DVector::from_column_slice(&[0.1, 0.1]);
        let l = bs.factor(&u).unwrap();
        assert!((&l * l.transpose() - bs.metric(&u)).amax() < 1e-14);
    }

    #[test]
    fn catalog_validates() {
        let pts1: Vec<Mark> = (1..50).map(|i| m1(-1.0 + i as f64 * 0.041)).collect();
        let pts2: Vec<Mark> = (1..50)
            .map(|i| DVector::from_column_slice(&[(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos() * 1.3]))
            .collect();
        for bs in standard_instances(1) {
            bs.validate(&pts1).unwrap();
        }
        for bs in standard_instances(2) {
            bs.validate(&pts2).unwrap();
        }
        assert!(by_name(INTRO_1D, 2).is_err());
    }

    #[test]
    fn psi_above_k_fails_validation() {
        let bs = psi_over_k(1, Arc::new(|_| 2.0), Arc::new(|_| 1.0));
        assert!(bs.validate(&[m1(0.3)]).is_err());
    }

    #[test]
    fn expression_structure_matches_intro() {
        let bs = BottomStructure::from_expressions(
            "custom",
            1,
            "1",
            "ind(0.5)",
            &["x^2".to_string()],
        )
        .unwrap();
        let intro = intro_1d();
        for u in [-0.7, -0.3, 0.1, 0.25, 0.49, 0.51] {
            let g = DVector::from_element(1, 1.3);
            assert_eq!(
                gamma_scalar(&g, &m1(u), &bs).unwrap(),
                gamma_scalar(&g, &m1(u), &intro).unwrap()
            );
        }
    }

    #[test]
    fn constants_have_zero_gamma_and_gradient() {
        // A constant functional has zero mark gradient.
        let grad = DVector::zeros(2);
        let u = DVector::from_column_slice(&[0.2, -0.1]);
        let bs = isotropic(2);
        assert_eq!(gamma_scalar(&grad, &u, &bs).unwrap(), 0.0);
        let mut rng = rng::stream(3, Domain::Rho, 0);
        for _ in 0..10 {
            assert_eq!(sample_gradient(&grad, &u, &bs, &mut rng).unwrap().value, 0.0);
        }
    }

    #[test]
    fn monte_carlo_second_moment_matches_gamma() {
        let bs = intro_1d();
        let u = m1(0.3);
        let grad = DVector::from_element(1, 1.7);
        let exact = gamma_scalar(&grad, &u, &bs).unwrap();
        let mut rng = rng::stream(99, Domain::Rho, 0);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let s = sample_gradient(&grad, &u, &bs, &mut rng).unwrap();
            acc += s.value * s.value;
        }
        let est = acc / n as f64;
        assert!(((est - exact) / exact).abs() <= 5e-3, "{est} vs {exact}");
    }

    #[test]
    fn monte_carlo_error_rate_is_root_m() {
        let bs = isotropic(2);
        let u = DVector::from_column_slice(&[0.4, -0.2]);
        let grad = DVector::from_column_slice(&[1.0, 2.0]);
        let exact = gamma_scalar(&grad, &u, &bs).unwrap();
        // RMS error over independent replicates at each M.
        let ms = [100usize, 400, 1600, 6400];
        let reps = 200;
        let mut pts = Vec::new();
        for (mi, &m) in ms.iter().enumerate() {
            let mut sq = 0.0;
            for rep in 0..reps {
                let mut rng = rng::stream(5, Domain::Rho, (mi * 1000 + rep) as u64);
                let mut acc = 0.0;
                for _ in 0..m {
                    let v = sample_gradient(&grad, &u, &bs, &mut rng).unwrap().value;
                    acc += v * v;
                }
                sq += (acc / m as f64 - exact).powi(2);
            }
            pts.push(((m as f64).ln(), (sq / reps as f64).sqrt().ln()));
        }
        let slope = crate::stats::regression_slope(&pts);
        assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
    }

    proptest! {
        #[test]
        fn dense_quadratic_form_agrees(
            entries in prop::collection::vec(-2.0f64..2.0, 9),
            grad in prop::collection::vec(-3.0f64..3.0, 3),
            psi in 0.01f64..1.0,
            extra in 0.0f64..2.0,
        ) {
            let k = psi + extra;
            let bs = random_structure(3, &entries, psi, k);
            let u = DVector::from_column_slice(&[0.1, 0.2, 0.3]);
            let g = DVector::from_column_slice(&grad);
            let value = gamma_scalar(&g, &u, &bs).unwrap();
            let xi = (bs.xi)(&u);
            let mut direct = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    direct += xi[(i, j)] * grad[i] * grad[j] * psi / k;
                }
            }
            prop_assert!((value - direct).abs() <= 1e-14 * (1.0 + direct.abs()) * 10.0);
            prop_assert!(value >= 0.0);
        }

        #[test]
        fn gamma_matrix_is_symmetric_psd_and_polarizes(
            entries in prop::collection::vec(-2.0f64..2.0, 4),
            jf in prop::collection::vec(-3.0f64..3.0, 2),
            jg in prop::collection::vec(-3.0f64..3.0, 2),
            jac in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let bs = random_structure(2, &entries, 0.5, 1.0);
            let u = DVector::from_column_slice(&[0.3, -0.4]);
            let j = DMatrix::from_row_slice(3, 2, &jac);
            let g = gamma_matrix(&j, &u, &bs).unwrap();
            prop_assert_eq!(&g, &g.transpose());
            let eig = g.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eig.min() >= -1e-12 * g.trace().abs().max(1e-300));
            // d = 1 reduces to gamma_scalar
            let row = DMatrix::from_row_slice(1, 2, &jf);
            let s = gamma_scalar(&DVector::from_column_slice(&jf), &u, &bs).unwrap();
            let m = gamma_matrix(&row, &u, &bs).unwrap()[(0, 0)];
            prop_assert!((s - m).abs() <= 1e-13 * (1.0 + s));
            // polarization
            let f = DVector::from_column_slice(&jf);
            let h = DVector::from_column_slice(&jg);
            let lhs = gamma_scalar(&(&f + &h), &u, &bs).unwrap() + gamma_scalar(&(&f - &h), &u, &bs).unwrap();
            let rhs = 2.0 * gamma_scalar(&f, &u, &bs).unwrap() + 2.0 * gamma_scalar(&h, &u, &bs).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn chain_rule_per_draw(
            coeffs in prop::collection::vec(-2.0f64..2.0, 4),
            fval in -2.0f64..2.0,
            gval in -2.0f64..2.0,
            grad_f in prop::collection::vec(-3.0f64..3.0, 2),
            grad_g in prop::collection::vec(-3.0f64..3.0, 2),
            draw in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let bs = isotropic(2);
            let u = DVector::from_column_slice(&[0.5, 0.25]);
            let r = DVector::from_column_slice(&draw);
            let df = DVector::from_column_slice(&grad_f);
            let dg = DVector::from_column_slice(&grad_g);
            // 1-d: F(y) = c0 + c1 y + c2 y² + c3 y³
            let fprime = coeffs[1] + 2.0 * coeffs[2] * fval + 3.0 * coeffs[3] * fval * fval;
            let lhs = gradient_flat(&(&df * fprime), &u, &r, &bs).unwrap();
            let rhs = fprime * gradient_flat(&df, &u, &r, &bs).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + rhs.abs()));
            // 2-d: F(y, z) = c0 y z + c1 y² + c2 z³
            let fy = coeffs[0] * gval + 2.0 * coeffs[1] * fval;
            let fz = coeffs[0] * fval + 3.0 * coeffs[2] * gval * gval;
            let lhs = gradient_flat(&(&df * fy + &dg * fz), &u, &r, &bs).unwrap();
            let rhs = fy * gradient_flat(&df, &u, &r, &bs).unwrap()
                + fz * gradient_flat(&dg, &u, &r, &bs).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-13 * (1.0 + rhs.abs()));
        }
    }
}
