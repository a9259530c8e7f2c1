//! Brute-force references: full diagonalisation, the sum-over-states `χ0` and
//! a finite-difference `χ0`. Nothing here is truncated or iterative.

use rayon::prelude::*;

use crate::density::Density;
use crate::linalg::{c, hermitian_eigen, CMat};
use crate::model::{HamiltonianChannel, LocalPotential};
use crate::smearing::{solve_fermi_level, LevelSet, SmearingScheme};
use crate::{Error, Real, Result};

/// All eigenpairs of a channel, ascending.
#[derive(Debug, Clone)]
pub struct FullSpectrum<T: Real> {
    pub values: Vec<T>,
    pub vectors: CMat<T>,
}

pub fn full_spectrum<T: Real>(channel: &HamiltonianChannel<T>) -> FullSpectrum<T> {
    let (values, vectors) = hermitian_eigen(&channel.dense());
    FullSpectrum { values, vectors }
}

/// Relative degeneracy tolerance `1e-8·max(1, spread)` of a list of energies.
pub fn degeneracy_tolerance<T: Real>(eps: &[T]) -> T {
    let (lo, hi) = eps.iter().fold((None::<T>, None::<T>), |(lo, hi), &e| {
        (Some(lo.map_or(e, |l: T| l.min(e))), Some(hi.map_or(e, |h: T| h.max(e))))
    });
    let spread = match (lo, hi) {
        (Some(l), Some(h)) => h - l,
        _ => T::zero(),
    };
    T::lit(1e-8) * spread.max(T::one())
}

/// `(f_n - f_m)/(ε_n - ε_m)`, or the mean derivative `(f'_n + f'_m)/2` when
/// `|ε_n - ε_m| < dtol`.
#[inline]
pub fn response_quotient<T: Real>(en: T, em: T, fn_: T, fm: T, dn: T, dm: T, dtol: T) -> T {
    let de = en - em;
    if de.mag() < dtol {
        T::lit(0.5) * (dn + dm)
    } else {
        (fn_ - fm) / de
    }
}

/// `Δ_mn = ((f_n - f_m)/(ε_n - ε_m))·δV_mn` off the diagonal, 0 on it.
/// `dv[(m, n)] = ⟨φ_m, δV φ_n⟩`.
pub fn delta_matrix<T: Real>(eps: &[T], occ: &[T], occ_deriv: &[T], dv: &CMat<T>) -> CMat<T> {
    let n = eps.len();
    assert_eq!(dv.nrows(), n);
    let dtol = degeneracy_tolerance(eps);
    CMat::from_fn(n, n, |m, k| {
        if m == k {
            c(T::zero())
        } else {
            dv[(m, k)] * response_quotient(eps[k], eps[m], occ[k], occ[m], occ_deriv[k], occ_deriv[m], dtol)
        }
    })
}

/// Spectra, Fermi level and occupations of a set of channels, all bands kept.
#[derive(Debug, Clone)]
pub struct ExactGroundState<T: Real> {
    pub spectra: Vec<FullSpectrum<T>>,
    pub fermi_level: T,
}

pub fn exact_groundstate<T: Real>(
    channels: &[HamiltonianChannel<T>],
    smearing: &SmearingScheme<T>,
    n_el: T,
) -> Result<ExactGroundState<T>> {
    let spectra: Vec<FullSpectrum<T>> = channels.par_iter().map(full_spectrum).collect();
    let sets: Vec<LevelSet<'_, T>> = spectra
        .iter()
        .zip(channels)
        .map(|(s, ch)| LevelSet {
            eigenvalues: &s.values,
            weight: ch.weight(),
            f_max: ch.f_max(),
        })
        .collect();
    let fermi_level = solve_fermi_level(&sets, smearing, n_el)?;
    Ok(ExactGroundState { spectra, fermi_level })
}

/// `ρ = Σ weight·Σ_n f_n |φ_n|²` over all bands.
pub fn groundstate_density<T: Real>(
    channels: &[HamiltonianChannel<T>],
    exact: &ExactGroundState<T>,
    smearing: &SmearingScheme<T>,
) -> Density<T> {
    let mut rho = Density::zeros(channels[0].basis());
    for (ch, s) in channels.iter().zip(&exact.spectra) {
        // Density matrix Φ diag(f) Φᴴ, then its diagonal in position space.
        let mut scaled = s.vectors.clone();
        for (j, &e) in s.values.iter().enumerate() {
            let f = smearing.occupation(e, exact.fermi_level, ch.f_max());
            scaled.column_mut(j).scale_mut(f);
        }
        let gamma = &scaled * s.vectors.adjoint();
        rho.accumulate_operator(&gamma, ch.weight());
    }
    rho
}

fn check_perturbation<T: Real>(channels: &[HamiltonianChannel<T>], dv: &LocalPotential<T>) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::invalid("no channels"));
    }
    let limit = 2 * channels[0].basis().n_max();
    if dv.max_mode() > limit {
        return Err(Error::invalid(format!(
            "perturbation mode {} exceeds the density range {limit}",
            dv.max_mode()
        )));
    }
    Ok(())
}

/// `δε_F` and `δρ` from the full sum over states with the shared Fermi level.
pub fn chi0_sum_over_states<T: Real>(
    channels: &[HamiltonianChannel<T>],
    exact: &ExactGroundState<T>,
    smearing: &SmearingScheme<T>,
    dv: &LocalPotential<T>,
) -> Result<(Density<T>, T)> {
    check_perturbation(channels, dv)?;
    let ef = exact.fermi_level;
    let blocks: Vec<(CMat<T>, Vec<T>, Vec<T>, Vec<T>)> = channels
        .par_iter()
        .zip(exact.spectra.par_iter())
        .map(|(ch, s)| {
            let dvphi = dv.apply_block(ch.basis(), &s.vectors);
            let dvm = s.vectors.ad_mul(&dvphi);
            let f: Vec<T> = s.values.iter().map(|&e| smearing.occupation(e, ef, ch.f_max())).collect();
            let d: Vec<T> = s.values.iter().map(|&e| smearing.occupation_derivative(e, ef, ch.f_max())).collect();
            (dvm, f, d, s.values.clone())
        })
        .collect();

    let mut num = T::zero();
    let mut den = T::zero();
    for ((dvm, _, d, _), ch) in blocks.iter().zip(channels) {
        let w = ch.weight();
        for (i, &di) in d.iter().enumerate() {
            num += w * di * dvm[(i, i)].re;
            den += w * di;
        }
    }
    let def = if den.mag() < T::lit(1e-12) * <T as Real>::from_usize(blocks.iter().map(|b| b.3.len()).sum()) {
        T::zero()
    } else {
        num / den
    };

    let mut rho = Density::zeros(channels[0].basis());
    for (((dvm, f, d, eps), ch), s) in blocks.iter().zip(channels).zip(&exact.spectra) {
        let nb = eps.len();
        let dtol = degeneracy_tolerance(eps);
        // δγ = Φ M Φᴴ with M_mn = q_mn (δV_mn - δε_F δ_mn).
        let m = CMat::from_fn(nb, nb, |a, b| {
            let q = response_quotient(eps[a], eps[b], f[a], f[b], d[a], d[b], dtol);
            let v = if a == b { dvm[(a, b)] - c(def) } else { dvm[(a, b)] };
            v * q
        });
        let gamma = &s.vectors * m * s.vectors.adjoint();
        rho.accumulate_operator(&gamma, ch.weight());
    }
    Ok((rho, def))
}

/// Central difference `(ρ(V + h·δV) - ρ(V - h·δV))/(2h)` with full
/// rediagonalisation and a fresh Fermi level at each displaced potential.
pub fn finite_difference_chi0<T: Real>(
    channels: &[HamiltonianChannel<T>],
    smearing: &SmearingScheme<T>,
    n_el: T,
    dv: &LocalPotential<T>,
    h: T,
) -> Result<Density<T>> {
    check_perturbation(channels, dv)?;
    if dv.is_zero() {
        return Ok(Density::zeros(channels[0].basis()));
    }
    let displaced = |sign: T| -> Result<Density<T>> {
        let moved: Vec<HamiltonianChannel<T>> = channels
            .iter()
            .map(|ch| ch.with_potential(ch.potential().add_scaled(dv, sign * h)))
            .collect::<Result<_>>()?;
        let exact = exact_groundstate(&moved, smearing, n_el)?;
        Ok(groundstate_density(&moved, &exact, smearing))
    };
    let plus = displaced(T::one())?;
    let minus = displaced(-T::one())?;
    Ok(plus.sub(&minus).scaled(T::one() / (T::lit(2.0) * h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::relative_difference;
    use crate::model::build_basis;
    use crate::synth::random_potential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> (Vec<HamiltonianChannel<f64>>, SmearingScheme<f64>, LocalPotential<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = build_basis(8.0, 5.0).unwrap();
        let v = random_potential(&mut rng, &basis, 4, 0.6);
        let dv = random_potential(&mut rng, &basis, 3, 0.1);
        let ch = HamiltonianChannel::new(basis, v, 1.0, 2.0).unwrap();
        (vec![ch], SmearingScheme::fermi_dirac(2e-2).unwrap(), dv)
    }

    #[test]
    fn constant_perturbation_gives_nothing() {
        let (chs, sm, _) = model(1);
        let ex = exact_groundstate(&chs, &sm, 4.0).unwrap();
        let (rho, def) = chi0_sum_over_states(&chs, &ex, &sm, &LocalPotential::constant(0.7)).unwrap();
        assert!(rho.norm() < 1e-12);
        assert!((def - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_mode_vanishes() {
        let (chs, sm, dv) = model(2);
        let ex = exact_groundstate(&chs, &sm, 4.0).unwrap();
        let (rho, _) = chi0_sum_over_states(&chs, &ex, &sm, &dv).unwrap();
        assert!(rho.coefficient(0).norm() < 1e-12);
        assert!(rho.norm() > 1e-6);
    }

    #[test]
    fn sum_over_states_matches_finite_differences() {
        let (chs, sm, dv) = model(3);
        let ex = exact_groundstate(&chs, &sm, 4.0).unwrap();
        let (rho, _) = chi0_sum_over_states(&chs, &ex, &sm, &dv).unwrap();
        let fd = finite_difference_chi0(&chs, &sm, 4.0, &dv, 1e-5).unwrap();
        assert!(relative_difference(&rho, &fd) < 1e-6, "{}", relative_difference(&rho, &fd));
    }

    #[test]
    fn finite_differences_are_second_order() {
        let (chs, sm, dv) = model(4);
        let ex = exact_groundstate(&chs, &sm, 4.0).unwrap();
        let (exact, _) = chi0_sum_over_states(&chs, &ex, &sm, &dv).unwrap();
        let err = |h: f64| finite_difference_chi0(&chs, &sm, 4.0, &dv, h).unwrap().sub(&exact).norm();
        let ratio = err(4e-2) / err(2e-2);
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn finite_differences_of_trivial_perturbations() {
        let (chs, sm, _) = model(5);
        assert_eq!(finite_difference_chi0(&chs, &sm, 4.0, &LocalPotential::zero(), 1e-5).unwrap().norm(), 0.0);
        let r = finite_difference_chi0(&chs, &sm, 4.0, &LocalPotential::constant(1.0), 1e-5).unwrap();
        assert!(r.norm() < 1e-8);
    }

    #[test]
    fn linear_and_negative() {
        let (chs, sm, dv1) = model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let dv2 = random_potential(&mut rng, chs[0].basis(), 5, 0.2);
        let ex = exact_groundstate(&chs, &sm, 4.0).unwrap();
        let chi = |v: &LocalPotential<f64>| chi0_sum_over_states(&chs, &ex, &sm, v).unwrap().0;
        let comb = dv1.scaled(0.3).add_scaled(&dv2, -1.7);
        let lhs = chi(&comb);
        let mut rhs = chi(&dv1).scaled(0.3);
        rhs.add_scaled(&chi(&dv2), -1.7);
        assert!(lhs.sub(&rhs).norm() < 1e-10 * lhs.norm().max(1.0));
        let q = chi(&dv1).pair_with(&dv1);
        assert!(q.im.abs() < 1e-10 && q.re <= 0.0);
    }

    #[test]
    fn delta_matrix_limits() {
        let eps = [0.1, 0.1, 0.4];
        let f = [1.5, 1.5, 0.5];
        let d = [-3.0, -3.0, -2.0];
        let dv = CMat::from_fn(3, 3, |i, j| c(1.0 + (i + j) as f64));
        let delta = delta_matrix(&eps, &f, &d, &dv);
        assert!((delta[(0, 1)] - dv[(0, 1)] * -3.0).norm() < 1e-15);
        assert!((delta[(2, 0)] - dv[(2, 0)] * ((1.5 - 0.5) / (0.1 - 0.4))).norm() < 1e-15);
        assert_eq!(delta[(1, 1)], c(0.0));
    }
}
