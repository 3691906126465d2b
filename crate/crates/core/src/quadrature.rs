//! Adaptive Gauss-Kronrod quadrature used for compensators, ν-masses and
//! the stable-like generator integrals.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Tolerances and budget of the adaptive scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-10,
            max_intervals: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

impl Quadrature {
    pub fn with_tolerance(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            abs_tol,
            rel_tol,
            ..Self::default()
        }
    }

    /// Integral of `f` over `[a, b]`. Endpoints are never evaluated.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> Result<f64> {
        if a == b {
            return Ok(0.0);
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::Domain(format!(
                "quadrature bounds must be finite, got [{a}, {b}]"
            )));
        }
        let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
        let mut segments = vec![gk15(&mut f, lo, hi)];
        loop {
            let total: f64 = segments.iter().map(|s| s.value).sum();
            let error: f64 = segments.iter().map(|s| s.error).sum();
            if !total.is_finite() || !error.is_finite() {
                return Err(Error::numeric("non-finite integrand value", f64::INFINITY));
            }
            if error <= self.abs_tol.max(self.rel_tol * total.abs()) {
                return Ok(sign * total);
            }
            if segments.len() >= self.max_intervals {
                return Err(Error::numeric(
                    format!("quadrature did not converge on [{lo}, {hi}]"),
                    error,
                ));
            }
            let (worst, _) = segments
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
                .expect("non-empty");
            let seg = segments.swap_remove(worst);
            let mid = 0.5 * (seg.a + seg.b);
            if mid <= seg.a || mid >= seg.b {
                return Err(Error::numeric("interval underflow in quadrature", error));
            }
            segments.push(gk15(&mut f, seg.a, mid));
            segments.push(gk15(&mut f, mid, seg.b));
        }
    }

    /// Iterated integral over the rectangle `[a0,b0] × [a1,b1]`.
    pub fn integrate_2d<F: FnMut(f64, f64) -> f64>(
        &self,
        mut f: F,
        (a0, b0): (f64, f64),
        (a1, b1): (f64, f64),
    ) -> Result<f64> {
        let inner = Quadrature {
            abs_tol: self.abs_tol * 0.1,
            rel_tol: self.rel_tol * 0.1,
            ..*self
        };
        let mut failure = None;
        let value = self.integrate(
            |x| match inner.integrate(|y| f(x, y), a1, b1) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            },
            a0,
            b0,
        )?;
        match failure {
            Some(e) => Err(e),
            None => Ok(value),
        }
    }

    /// Integral over `[a, ∞)` of an oscillatory integrand whose sign changes
    /// are roughly `period / 2` apart; partial sums over half periods are
    /// accelerated by repeated averaging.
    pub fn integrate_oscillatory_tail<F: FnMut(f64) -> f64>(
        &self,
        mut f: F,
        a: f64,
        period: f64,
        chunks: usize,
    ) -> Result<f64> {
        let half = 0.5 * period;
        let mut partial = Vec::with_capacity(chunks);
        let mut acc = 0.0;
        for k in 0..chunks {
            let lo = a + k as f64 * half;
            acc += self.integrate(&mut f, lo, lo + half)?;
            partial.push(acc);
        }
        // Iterated averaging of consecutive partial sums (Euler-type
        // acceleration for alternating tails).
        let mut level = partial;
        while level.len() > 1 {
            level = level.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        }
        Ok(level[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = Quadrature::default();
        let v = q.integrate(|x| 3.0 * x * x + 1.0, -1.0, 2.0).unwrap();
        assert!((v - 12.0).abs() < 1e-13);
    }

    #[test]
    fn reversed_bounds_flip_sign() {
        let q = Quadrature::default();
        let v = q.integrate(f64::exp, 1.0, 0.0).unwrap();
        assert!((v + (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn discontinuous_integrand_converges() {
        let q = Quadrature::default();
        let v = q
            .integrate(|x| if x.abs() < 0.5 { x * x } else { 0.0 }, -1.0, 1.0)
            .unwrap();
        assert!((v - 1.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn singular_endpoint() {
        let q = Quadrature::default();
        let v = q.integrate(|x| x.powf(-0.5), 0.0, 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-8);
    }

    #[test]
    fn budget_exhaustion_reports_residual() {
        let q = Quadrature {
            max_intervals: 3,
            ..Quadrature::default()
        };
        match q.integrate(|x| (1.0 / x).sin(), 1e-6, 1.0) {
            Err(Error::Numeric { residual, .. }) => assert!(residual > 0.0),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn rectangle() {
        let q = Quadrature::default();
        let v = q.integrate_2d(|x, y| x * y, (0.0, 1.0), (0.0, 2.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oscillatory_tail_of_sine_over_x() {
        // ∫_1^∞ sin(x)/x dx = π/2 − Si(1)
        let q = Quadrature::default();
        let v = q
            .integrate_oscillatory_tail(|x| x.sin() / x, 1.0, 2.0 * std::f64::consts::PI, 60)
            .unwrap();
        let si1 = 0.946_083_070_367_183_0;
        assert!((v - (std::f64::consts::FRAC_PI_2 - si1)).abs() < 1e-9);
    }
}
