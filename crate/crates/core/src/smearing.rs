//! Occupation functions and the Fermi-level solve.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmearingKind {
    FermiDirac,
    Gaussian,
}

impl fmt::Display for SmearingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SmearingKind::FermiDirac => "fermi-dirac",
            SmearingKind::Gaussian => "gaussian",
        })
    }
}

impl FromStr for SmearingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fermi-dirac" | "fermi_dirac" | "fermidirac" | "fd" => Ok(SmearingKind::FermiDirac),
            "gaussian" | "gauss" => Ok(SmearingKind::Gaussian),
            other => Err(Error::invalid(format!("unknown smearing '{other}'"))),
        }
    }
}

/// Smearing function and temperature. The occupation of a level is
/// `f_max·g((ε - ε_F)/T)` with `g` decreasing from 1 to 0 and `g(x) + g(-x) = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmearingScheme<T> {
    kind: SmearingKind,
    temperature: T,
}

/// `1/(1+eˣ)`, evaluated without overflow.
pub fn fermi_dirac_unit<T: Real>(x: T) -> T {
    if x > T::zero() {
        let e = (-x).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + x.exp())
    }
}

fn fermi_dirac_unit_derivative<T: Real>(x: T) -> T {
    // -eˣ/(1+eˣ)² = -1/(4 cosh²(x/2))
    let ch = (x * T::lit(0.5)).cosh();
    -T::one() / (T::lit(4.0) * ch * ch)
}

fn gaussian_unit<T: Real>(x: T) -> T {
    let xf = x.as_f64();
    let half_tail = 0.5 * statrs::function::erf::erfc(xf.abs() / std::f64::consts::SQRT_2);
    if xf >= 0.0 {
        T::lit(half_tail)
    } else {
        T::lit(1.0 - half_tail)
    }
}

fn gaussian_unit_derivative<T: Real>(x: T) -> T {
    let xf = x.as_f64();
    T::lit(-(-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt())
}

impl<T: Real> SmearingScheme<T> {
    pub fn new(kind: SmearingKind, temperature: T) -> Result<Self> {
        if !(temperature > T::zero()) {
            return Err(Error::invalid(format!(
                "smearing temperature must be positive (got {temperature:e})"
            )));
        }
        Ok(Self { kind, temperature })
    }

    pub fn fermi_dirac(temperature: T) -> Result<Self> {
        Self::new(SmearingKind::FermiDirac, temperature)
    }

    pub fn gaussian(temperature: T) -> Result<Self> {
        Self::new(SmearingKind::Gaussian, temperature)
    }

    pub fn kind(&self) -> SmearingKind {
        self.kind
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    /// Occupation fraction `g(x)` in `(0, 1)`.
    pub fn unit(&self, x: T) -> T {
        match self.kind {
            SmearingKind::FermiDirac => fermi_dirac_unit(x),
            SmearingKind::Gaussian => gaussian_unit(x),
        }
    }

    /// `g'(x)`.
    pub fn unit_derivative(&self, x: T) -> T {
        match self.kind {
            SmearingKind::FermiDirac => fermi_dirac_unit_derivative(x),
            SmearingKind::Gaussian => gaussian_unit_derivative(x),
        }
    }

    pub fn occupation(&self, eps: T, fermi: T, f_max: T) -> T {
        f_max * self.unit((eps - fermi) / self.temperature)
    }

    /// `(1/T)·f'((ε - ε_F)/T)`, the diagonal of the response quotient.
    pub fn occupation_derivative(&self, eps: T, fermi: T, f_max: T) -> T {
        f_max * self.unit_derivative((eps - fermi) / self.temperature) / self.temperature
    }

    /// Largest `|f'(x)|/T`: `f_max/(4T)` for Fermi-Dirac, `f_max/(√(2π)T)` for Gaussian.
    pub fn max_derivative(&self, f_max: T) -> T {
        f_max * self.unit_derivative(T::zero()).mag() / self.temperature
    }
}

/// `occupation` entry point.
pub fn occupation<T: Real>(eps: T, fermi: T, smearing: &SmearingScheme<T>, f_max: T) -> T {
    smearing.occupation(eps, fermi, f_max)
}

/// `occupation_derivative` entry point.
pub fn occupation_derivative<T: Real>(eps: T, fermi: T, smearing: &SmearingScheme<T>, f_max: T) -> T {
    smearing.occupation_derivative(eps, fermi, f_max)
}

/// Band energies of one channel as seen by the Fermi solve.
#[derive(Debug, Clone, Copy)]
pub struct LevelSet<'a, T> {
    pub eigenvalues: &'a [T],
    pub weight: T,
    pub f_max: T,
}

/// `Σ_channels weight·Σ_n f_n` at a trial Fermi level, summed in channel order.
pub fn total_charge<T: Real>(channels: &[LevelSet<'_, T>], smearing: &SmearingScheme<T>, fermi: T) -> T {
    channels.iter().fold(T::zero(), |acc, ch| {
        let s = ch
            .eigenvalues
            .iter()
            .fold(T::zero(), |a, &e| a + smearing.occupation(e, fermi, ch.f_max));
        acc + ch.weight * s
    })
}

const FERMI_MAX_ITER: usize = 200;

/// Fermi level from the charge constraint, by bisection on
/// `[min ε - 20T ln 10, max ε + 20T ln 10]`.
pub fn solve_fermi_level<T: Real>(channels: &[LevelSet<'_, T>], smearing: &SmearingScheme<T>, n_el: T) -> Result<T> {
    let capacity = channels.iter().fold(T::zero(), |acc, ch| {
        acc + ch.weight * ch.f_max * <T as Real>::from_usize(ch.eigenvalues.len())
    });
    if !(n_el > T::zero()) || !(n_el < capacity) {
        return Err(Error::Infeasible(format!(
            "{} electrons cannot be placed in {} states of capacity {}",
            n_el.as_f64(),
            channels.iter().map(|c| c.eigenvalues.len()).sum::<usize>(),
            capacity.as_f64()
        )));
    }
    let all = channels.iter().flat_map(|c| c.eigenvalues.iter().copied());
    let (lo_e, hi_e) = all.fold((None::<T>, None::<T>), |(lo, hi), e| {
        (
            Some(lo.map_or(e, |l| if e < l { e } else { l })),
            Some(hi.map_or(e, |h| if e > h { e } else { h })),
        )
    });
    let margin = T::lit(20.0) * smearing.temperature() * T::ln_10();
    let mut lo = lo_e.expect("nonempty spectrum") - margin;
    let mut hi = hi_e.expect("nonempty spectrum") + margin;

    let tol = T::lit(1e-12) * n_el;
    let residual = |ef: T| total_charge(channels, smearing, ef) - n_el;
    if residual(lo) > T::zero() || residual(hi) < T::zero() {
        return Err(Error::Infeasible(format!(
            "Fermi level not bracketed for {} electrons",
            n_el.as_f64()
        )));
    }
    let mut best = (T::lit(0.5) * (lo + hi), T::max_value().unwrap_or_else(T::one));
    for _ in 0..FERMI_MAX_ITER {
        let mid = T::lit(0.5) * (lo + hi);
        let r = residual(mid);
        if r.mag() < best.1 {
            best = (mid, r.mag());
        }
        if r.mag() <= tol {
            return Ok(mid);
        }
        if r < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Charge jumps faster than the float grid resolves (tiny T): accept the best point.
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd(t: f64) -> SmearingScheme<f64> {
        SmearingScheme::fermi_dirac(t).unwrap()
    }

    #[test]
    fn occupation_examples() {
        let s = fd(0.01);
        assert_eq!(occupation(0.3, 0.3, &s, 2.0), 1.0);
        let x = 0.01 * 3f64.ln();
        assert!((occupation(x, 0.0, &s, 2.0) - 0.5).abs() < 1e-15);
        let g = SmearingScheme::gaussian(0.01).unwrap();
        assert_eq!(occupation(0.3, 0.3, &g, 2.0), 1.0);
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        assert!(SmearingScheme::fermi_dirac(0.0).is_err());
        assert!(SmearingScheme::gaussian(-1.0).is_err());
    }

    #[test]
    fn derivative_examples() {
        let t = 0.02;
        let s = fd(t);
        assert!((occupation_derivative(1.0, 1.0, &s, 2.0) + 1.0 / (2.0 * t)).abs() < 1e-12);
        assert!(occupation_derivative(40.0 * t, 0.0, &s, 2.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_matches_central_differences() {
        let h = 1e-5;
        for s in [fd(1.0), SmearingScheme::gaussian(1.0).unwrap()] {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let fdiff = (occupation(x + h, 0.0, &s, 2.0) - occupation(x - h, 0.0, &s, 2.0)) / (2.0 * h);
                // f depends on ε through (ε - ε_F)/T; with T = 1 the derivative in ε is f'(x)/T.
                let exact = occupation_derivative(x, 0.0, &s, 2.0);
                assert!((fdiff - exact).abs() < 1e-8, "{:?} x={x}", s.kind());
                assert!(exact < 0.0);
            }
        }
    }

    #[test]
    fn complementary_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for s in [fd(1.0), SmearingScheme::gaussian(1.0).unwrap()] {
            for _ in 0..1000 {
                let x: f64 = rng.random_range(-30.0..30.0);
                let sum = s.unit(x) + s.unit(-x);
                assert!((sum - 1.0).abs() <= 1e-14, "{:?} at {x}", s.kind());
            }
        }
    }

    #[test]
    fn monotone_decreasing() {
        for s in [fd(0.3), SmearingScheme::gaussian(0.3).unwrap()] {
            let mut last = f64::INFINITY;
            for i in -400..400 {
                let f = occupation(i as f64 * 0.01, 0.0, &s, 2.0);
                assert!(f <= last);
                last = f;
            }
        }
    }

    #[test]
    fn fermi_two_level_symmetry() {
        let s = fd(0.05);
        let eps = [0.0, 1.0];
        let one = [LevelSet { eigenvalues: &eps, weight: 1.0, f_max: 2.0 }];
        assert_eq!(solve_fermi_level(&one, &s, 2.0).unwrap(), 0.5);
        let two = [
            LevelSet { eigenvalues: &eps, weight: 0.5, f_max: 2.0 },
            LevelSet { eigenvalues: &eps, weight: 0.5, f_max: 2.0 },
        ];
        assert_eq!(solve_fermi_level(&two, &s, 2.0).unwrap(), 0.5);
    }

    #[test]
    fn fermi_infeasible() {
        let s = fd(0.05);
        let eps = [0.0, 1.0];
        let one = [LevelSet { eigenvalues: &eps, weight: 1.0, f_max: 2.0 }];
        assert!(matches!(solve_fermi_level(&one, &s, 4.0), Err(Error::Infeasible(_))));
        assert!(matches!(solve_fermi_level(&one, &s, 0.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn fermi_matches_grid_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut eps: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..2.0)).collect();
        eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s = fd(0.05);
        let levels = [LevelSet { eigenvalues: &eps, weight: 1.0, f_max: 2.0 }];
        let ef = solve_fermi_level(&levels, &s, 10.0).unwrap();
        assert!((total_charge(&levels, &s, ef) - 10.0).abs() <= 1e-11);

        // independent scan: coarse pass to locate the crossing, then step 1e-6
        let scan = |lo: f64, hi: f64, step: f64| -> f64 {
            let steps = ((hi - lo) / step).ceil() as usize;
            let mut prev = total_charge(&levels, &s, lo) - 10.0;
            for i in 1..=steps {
                let e = lo + i as f64 * step;
                let cur = total_charge(&levels, &s, e) - 10.0;
                assert!(cur >= prev, "charge must increase with the Fermi level");
                if prev < 0.0 && cur >= 0.0 {
                    return e;
                }
                prev = cur;
            }
            panic!("no crossing");
        };
        let coarse = scan(eps[0] - 1.0, eps[29] + 1.0, 1e-3);
        let crossing = Some(scan(coarse - 1e-3, coarse, 1e-6));
        assert!((crossing.unwrap() - ef).abs() < 1e-5);
    }
}
