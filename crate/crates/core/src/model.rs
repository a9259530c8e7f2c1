//! Plane-wave basis, local potentials and the counted Hamiltonian operator.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex;

use crate::linalg::{CMat, CVec};
use crate::{Error, Real, Result};

/// Fourier basis `e_G(x) = exp(iGx)/√L`, `G = 2πn/L`, `½G² ≤ ecut`,
/// ordered by `n = -n_max..=n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneWaveBasis<T> {
    cell_length: T,
    ecut: T,
    n_max: i64,
    gvectors: Vec<T>,
}

impl<T: Real> PlaneWaveBasis<T> {
    pub fn new(cell_length: T, ecut: T) -> Result<Self> {
        if !(cell_length > T::zero()) || !(ecut > T::zero()) {
            return Err(Error::invalid(format!(
                "cell_length and ecut must be positive (got {cell_length:e}, {ecut:e})"
            )));
        }
        let unit = T::two_pi() / cell_length;
        let fits = |n: i64| {
            let g = unit * T::lit(n as f64);
            T::lit(0.5) * g * g <= ecut
        };
        let guess = ((T::lit(2.0) * ecut).sqrt() / unit).as_f64().floor().max(0.0) as i64;
        let mut n_max = guess;
        while fits(n_max + 1) {
            n_max += 1;
        }
        while n_max > 0 && !fits(n_max) {
            n_max -= 1;
        }
        let gvectors = (-n_max..=n_max).map(|n| unit * T::lit(n as f64)).collect();
        Ok(Self {
            cell_length,
            ecut,
            n_max,
            gvectors,
        })
    }

    pub fn len(&self) -> usize {
        self.gvectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gvectors.is_empty()
    }

    pub fn cell_length(&self) -> T {
        self.cell_length
    }

    pub fn ecut(&self) -> T {
        self.ecut
    }

    pub fn n_max(&self) -> i64 {
        self.n_max
    }

    pub fn gvectors(&self) -> &[T] {
        &self.gvectors
    }

    /// Integer mode index of basis position `i`.
    pub fn mode(&self, i: usize) -> i64 {
        i as i64 - self.n_max
    }

    pub fn modes(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.len()).map(|i| self.mode(i))
    }

    pub fn index_of(&self, mode: i64) -> Option<usize> {
        if mode.abs() <= self.n_max {
            Some((mode + self.n_max) as usize)
        } else {
            None
        }
    }

    /// Wave number of an arbitrary integer mode in this cell.
    pub fn wavenumber(&self, mode: i64) -> T {
        T::two_pi() / self.cell_length * T::lit(mode as f64)
    }

    /// `½|G|²` for every basis function.
    pub fn kinetic_diagonal(&self) -> Vec<T> {
        self.gvectors
            .iter()
            .map(|&g| T::lit(0.5) * g * g)
            .collect()
    }

    /// Basis positions sorted by kinetic energy (`0, -1, 1, -2, 2, …`).
    pub fn lowest_kinetic_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by_key(|&i| {
            let m = self.mode(i);
            (m.abs(), m > 0)
        });
        idx
    }
}

/// `build_basis` entry point.
pub fn build_basis<T: Real>(cell_length: T, ecut: T) -> Result<PlaneWaveBasis<T>> {
    PlaneWaveBasis::new(cell_length, ecut)
}

/// Real-valued periodic potential `V(x) = Σ_m V̂_m exp(2πimx/L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPotential<T> {
    coeffs: BTreeMap<i64, Complex<T>>,
}

impl<T: Real> Default for LocalPotential<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Real> LocalPotential<T> {
    /// Builds a potential from `(mode, V̂_mode)` pairs. Both `m` and `-m` must be
    /// given (or both omitted); `V̂_{-m} = conj(V̂_m)` is checked.
    pub fn new(coeffs: impl IntoIterator<Item = (i64, Complex<T>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (m, v) in coeffs {
            if map.insert(m, v).is_some() {
                return Err(Error::invalid(format!("mode {m} given twice")));
            }
        }
        let pot = Self { coeffs: map };
        pot.check_conjugate_symmetry()?;
        Ok(pot.pruned())
    }

    pub fn zero() -> Self {
        Self {
            coeffs: BTreeMap::new(),
        }
    }

    pub fn constant(value: T) -> Self {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(0, Complex::new(value, T::zero()));
        Self { coeffs }.pruned()
    }

    /// `V(x) = 2a·cos(2πmx/L)`, i.e. `V̂_{±m} = a`.
    pub fn cosine(mode: i64, amplitude: T) -> Self {
        let mut coeffs = BTreeMap::new();
        if mode == 0 {
            coeffs.insert(0, Complex::new(T::lit(2.0) * amplitude, T::zero()));
        } else {
            coeffs.insert(mode, Complex::new(amplitude, T::zero()));
            coeffs.insert(-mode, Complex::new(amplitude, T::zero()));
        }
        Self { coeffs }.pruned()
    }

    fn pruned(mut self) -> Self {
        self.coeffs.retain(|_, v| v.re != T::zero() || v.im != T::zero());
        self
    }

    fn check_conjugate_symmetry(&self) -> Result<()> {
        let scale = self
            .coeffs
            .values()
            .map(|v| v.norm_sqr().sqrt())
            .fold(T::one(), |a, b| if b > a { b } else { a });
        let tol = T::default_epsilon() * T::lit(64.0) * scale;
        for (&m, &v) in &self.coeffs {
            let partner = self
                .coeffs
                .get(&-m)
                .copied()
                .unwrap_or_else(|| Complex::new(T::zero(), T::zero()));
            let mismatch = (partner - v.conj()).norm_sqr().sqrt();
            if mismatch > tol {
                return Err(Error::invalid(format!(
                    "potential is not conjugate-symmetric at mode {m} (mismatch {mismatch:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn coefficient(&self, mode: i64) -> Complex<T> {
        self.coeffs
            .get(&mode)
            .copied()
            .unwrap_or_else(|| Complex::new(T::zero(), T::zero()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, Complex<T>)> + '_ {
        self.coeffs.iter().map(|(&m, &v)| (m, v))
    }

    pub fn max_mode(&self) -> i64 {
        self.coeffs.keys().map(|m| m.abs()).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            coeffs: self
                .coeffs
                .iter()
                .map(|(&m, &v)| (m, v * factor))
                .collect(),
        }
        .pruned()
    }

    /// `self + factor·other`.
    pub fn add_scaled(&self, other: &Self, factor: T) -> Self {
        let mut coeffs = self.coeffs.clone();
        for (&m, &v) in &other.coeffs {
            let e = coeffs
                .entry(m)
                .or_insert_with(|| Complex::new(T::zero(), T::zero()));
            *e += v * factor;
        }
        Self { coeffs }.pruned()
    }

    /// Convolution `(Vψ)_n = Σ_m V̂_m ψ_{n-m}`.
    pub fn apply(&self, basis: &PlaneWaveBasis<T>, v: &CVec<T>) -> CVec<T> {
        let mut out = CVec::zeros(v.len());
        self.apply_add(basis, v.as_slice(), out.as_mut_slice());
        out
    }

    pub(crate) fn apply_add(&self, basis: &PlaneWaveBasis<T>, v: &[Complex<T>], out: &mut [Complex<T>]) {
        let len = basis.len() as i64;
        for (&m, &vm) in &self.coeffs {
            // out[i] += vm * v[i - m] for 0 <= i, i - m < len
            let lo = m.max(0);
            let hi = (len + m).min(len);
            for i in lo..hi {
                out[i as usize] += vm * v[(i - m) as usize];
            }
        }
    }

    pub fn apply_block(&self, basis: &PlaneWaveBasis<T>, x: &CMat<T>) -> CMat<T> {
        let mut out = CMat::zeros(x.nrows(), x.ncols());
        for j in 0..x.ncols() {
            let col = x.column(j);
            let src: Vec<Complex<T>> = col.iter().copied().collect();
            let mut dst = vec![Complex::new(T::zero(), T::zero()); x.nrows()];
            self.apply_add(basis, &src, &mut dst);
            for (i, z) in dst.into_iter().enumerate() {
                out[(i, j)] = z;
            }
        }
        out
    }

    /// Dense matrix `V_{GG'} = V̂_{n-n'}`.
    pub fn matrix(&self, basis: &PlaneWaveBasis<T>) -> CMat<T> {
        let n = basis.len();
        CMat::from_fn(n, n, |i, j| self.coefficient(basis.mode(i) - basis.mode(j)))
    }

    /// Value at position `x`.
    pub fn evaluate(&self, cell_length: T, x: T) -> T {
        let unit = T::two_pi() / cell_length;
        self.coeffs.iter().fold(T::zero(), |acc, (&m, v)| {
            let phase = unit * T::lit(m as f64) * x;
            acc + v.re * phase.cos() - v.im * phase.sin()
        })
    }
}

/// One Hamiltonian `H = -½Δ + V` (a k-point or spin channel) with its weight,
/// maximal occupation and a counter of single-vector applications.
#[derive(Debug)]
pub struct HamiltonianChannel<T: Real> {
    basis: PlaneWaveBasis<T>,
    potential: LocalPotential<T>,
    weight: T,
    f_max: T,
    kinetic: Vec<T>,
    applies: AtomicU64,
}

impl<T: Real> Clone for HamiltonianChannel<T> {
    fn clone(&self) -> Self {
        Self {
            basis: self.basis.clone(),
            potential: self.potential.clone(),
            weight: self.weight,
            f_max: self.f_max,
            kinetic: self.kinetic.clone(),
            applies: AtomicU64::new(self.apply_count()),
        }
    }
}

impl<T: Real> HamiltonianChannel<T> {
    pub fn new(basis: PlaneWaveBasis<T>, potential: LocalPotential<T>, weight: T, f_max: T) -> Result<Self> {
        potential.check_conjugate_symmetry()?;
        if potential.max_mode() > 2 * basis.n_max() {
            return Err(Error::invalid(format!(
                "potential mode {} exceeds twice the basis range {}",
                potential.max_mode(),
                basis.n_max()
            )));
        }
        if !(weight > T::zero() && weight <= T::one()) {
            return Err(Error::invalid(format!("channel weight {weight:e} outside (0, 1]")));
        }
        if f_max != T::one() && f_max != T::lit(2.0) {
            return Err(Error::invalid(format!("f_max must be 1 or 2 (got {f_max:e})")));
        }
        let kinetic = basis.kinetic_diagonal();
        Ok(Self {
            basis,
            potential,
            weight,
            f_max,
            kinetic,
            applies: AtomicU64::new(0),
        })
    }

    pub fn basis(&self) -> &PlaneWaveBasis<T> {
        &self.basis
    }

    pub fn potential(&self) -> &LocalPotential<T> {
        &self.potential
    }

    pub fn weight(&self) -> T {
        self.weight
    }

    pub fn f_max(&self) -> T {
        self.f_max
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn apply_count(&self) -> u64 {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn reset_apply_count(&self) {
        self.applies.store(0, Ordering::Relaxed);
    }

    pub(crate) fn set_apply_count(&self, count: u64) {
        self.applies.store(count, Ordering::Relaxed);
    }

    /// Same basis, weight and occupation range with another potential; counter starts at 0.
    pub fn with_potential(&self, potential: LocalPotential<T>) -> Result<Self> {
        Self::new(self.basis.clone(), potential, self.weight, self.f_max)
    }

    fn apply_uncounted(&self, v: &[Complex<T>], out: &mut [Complex<T>]) {
        for ((o, &k), &x) in out.iter_mut().zip(&self.kinetic).zip(v) {
            *o = x * k;
        }
        self.potential.apply_add(&self.basis, v, out);
    }

    /// `Hv`; counts one application.
    pub fn apply(&self, v: &CVec<T>) -> Result<CVec<T>> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector of length {} applied to a Hamiltonian of dimension {}",
                v.len(),
                self.dim()
            )));
        }
        let mut out = CVec::zeros(v.len());
        self.apply_uncounted(v.as_slice(), out.as_mut_slice());
        self.applies.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// `HX`; counts one application per column.
    pub fn apply_block(&self, x: &CMat<T>) -> Result<CMat<T>> {
        if x.nrows() != self.dim() {
            return Err(Error::invalid(format!(
                "block with {} rows applied to a Hamiltonian of dimension {}",
                x.nrows(),
                self.dim()
            )));
        }
        let mut out = CMat::zeros(x.nrows(), x.ncols());
        let mut dst = vec![Complex::new(T::zero(), T::zero()); x.nrows()];
        for j in 0..x.ncols() {
            let src: Vec<Complex<T>> = x.column(j).iter().copied().collect();
            self.apply_uncounted(&src, &mut dst);
            out.column_mut(j).copy_from_slice(&dst);
        }
        self.applies.fetch_add(x.ncols() as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Dense matrix; not counted.
    pub fn dense(&self) -> CMat<T> {
        let mut m = self.potential.matrix(&self.basis);
        for (i, &k) in self.kinetic.iter().enumerate() {
            m[(i, i)] += Complex::new(k, T::zero());
        }
        m
    }
}

/// `build_hamiltonian` entry point.
pub fn build_hamiltonian<T: Real>(
    basis: PlaneWaveBasis<T>,
    potential: LocalPotential<T>,
    weight: T,
    f_max: T,
) -> Result<HamiltonianChannel<T>> {
    HamiltonianChannel::new(basis, potential, weight, f_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, inner, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_potential(rng: &mut ChaCha8Rng, max_mode: i64) -> LocalPotential<f64> {
        use rand::Rng;
        let mut coeffs = vec![(0, c(rng.random_range(-1.0..1.0)))];
        for m in 1..=max_mode {
            let v = Complex::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            coeffs.push((m, v));
            coeffs.push((-m, v.conj()));
        }
        LocalPotential::new(coeffs).unwrap()
    }

    #[test]
    fn basis_sizes() {
        for (ecut, size) in [(0.5, 3), (2.0, 5), (4.5, 7)] {
            let b = build_basis(2.0 * PI, ecut).unwrap();
            assert_eq!(b.len(), size, "ecut {ecut}");
            assert_eq!(b.modes().collect::<Vec<_>>(), (-(size as i64 / 2)..=size as i64 / 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn basis_rejects_nonpositive() {
        assert!(build_basis(0.0, 1.0).is_err());
        assert!(build_basis(1.0, -1.0).is_err());
    }

    #[test]
    fn basis_closed_under_negation() {
        let b = build_basis(7.3, 13.1).unwrap();
        let modes: Vec<i64> = b.modes().collect();
        let mut neg: Vec<i64> = modes.iter().map(|m| -m).collect();
        neg.sort();
        assert_eq!(modes, neg);
        assert!(b.len() % 2 == 1);
        assert!(b.kinetic_diagonal().iter().all(|&k| k <= 13.1));
    }

    #[test]
    fn free_hamiltonian_is_kinetic_diagonal() {
        let b = build_basis(2.0 * PI, 4.5).unwrap();
        let h = build_hamiltonian(b.clone(), LocalPotential::zero(), 1.0, 2.0).unwrap();
        let dense = h.dense();
        for i in 0..b.len() {
            for j in 0..b.len() {
                let expect = if i == j { 0.5 * (b.mode(i) as f64).powi(2) } else { 0.0 };
                assert_eq!(dense[(i, j)], c(expect));
            }
        }
    }

    #[test]
    fn cosine_couples_adjacent_modes() {
        let b = build_basis(2.0 * PI, 4.5).unwrap();
        let h = build_hamiltonian(b.clone(), LocalPotential::cosine(1, 0.3), 1.0, 2.0).unwrap();
        let dense = h.dense();
        for i in 0..b.len() - 1 {
            assert_eq!(dense[(i, i + 1)], c(0.3));
            assert_eq!(dense[(i + 1, i)], c(0.3));
        }
        assert_eq!(dense[(0, 2)], c(0.0));
    }

    #[test]
    fn rejects_asymmetric_potential() {
        let v = LocalPotential::new(vec![(1, Complex::new(0.1, 0.2)), (-1, Complex::new(0.1, 0.2))]);
        assert!(matches!(v, Err(Error::InvalidArgument(_))));
        let v = LocalPotential::new(vec![(0, Complex::new(0.1, 0.2))]);
        assert!(v.is_err());
    }

    #[test]
    fn dense_is_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = build_basis(9.0, 20.0).unwrap();
        let h = build_hamiltonian(b, random_potential(&mut rng, 6), 1.0, 2.0).unwrap();
        let d = h.dense();
        assert!((&d - d.adjoint()).camax() <= 1e-14);
    }

    #[test]
    fn apply_matches_dense_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = build_basis(9.0, 20.0).unwrap();
        let h = build_hamiltonian(b.clone(), random_potential(&mut rng, 5), 1.0, 2.0).unwrap();
        let v: CMat<f64> = random_matrix(&mut rng, b.len(), 1);
        let v = v.column(0).into_owned();
        let hv = h.apply(&v).unwrap();
        assert_eq!(h.apply_count(), 1);
        let dense = h.dense() * &v;
        assert!((hv - dense).camax() < 1e-13);
        let _ = h.apply(&v).unwrap();
        assert_eq!(h.apply_count(), 2);
        let block: CMat<f64> = random_matrix(&mut rng, b.len(), 4);
        let hb = h.apply_block(&block).unwrap();
        assert_eq!(h.apply_count(), 6);
        assert!((hb - h.dense() * block).camax() < 1e-13);
    }

    #[test]
    fn apply_unit_vector_free() {
        let b = build_basis(2.0 * PI, 4.5).unwrap();
        let h = build_hamiltonian(b.clone(), LocalPotential::zero(), 1.0, 2.0).unwrap();
        let i = b.index_of(2).unwrap();
        let mut e = CVec::zeros(b.len());
        e[i] = c(1.0);
        let he = h.apply(&e).unwrap();
        assert_eq!(he[i], c(2.0));
        assert_eq!(h.apply_count(), 1);
    }

    #[test]
    fn apply_dimension_mismatch() {
        let b = build_basis(2.0 * PI, 4.5).unwrap();
        let h = build_hamiltonian(b, LocalPotential::zero(), 1.0, 2.0).unwrap();
        assert!(h.apply(&CVec::zeros(3)).is_err());
        assert_eq!(h.apply_count(), 0);
    }

    #[test]
    fn hermiticity_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = build_basis(11.0, 15.0).unwrap();
        let h = build_hamiltonian(b.clone(), random_potential(&mut rng, 8), 1.0, 2.0).unwrap();
        for _ in 0..100 {
            let uv: CMat<f64> = random_matrix(&mut rng, b.len(), 2);
            let u = uv.column(0).into_owned();
            let v = uv.column(1).into_owned();
            let lhs = inner(&u, &h.apply(&v).unwrap());
            let rhs = inner(&v, &h.apply(&u).unwrap()).conj();
            assert!((lhs - rhs).norm() <= 1e-12 * u.norm() * v.norm());
        }
    }

    #[test]
    fn counter_is_exact_under_concurrency() {
        use rayon::prelude::*;
        let b = build_basis(11.0, 15.0).unwrap();
        let h = build_hamiltonian(b.clone(), LocalPotential::cosine(1, 0.2), 1.0, 2.0).unwrap();
        let v = CVec::from_element(b.len(), c(1.0));
        (0..64).into_par_iter().for_each(|_| {
            let _ = h.apply(&v).unwrap();
        });
        assert_eq!(h.apply_count(), 64);
    }

    #[test]
    fn rejects_bad_weight_and_fmax() {
        let b = build_basis(2.0 * PI, 4.5).unwrap();
        assert!(build_hamiltonian(b.clone(), LocalPotential::zero(), 0.0, 2.0).is_err());
        assert!(build_hamiltonian(b.clone(), LocalPotential::zero(), 1.0, 1.5).is_err());
        assert!(build_hamiltonian(b, LocalPotential::cosine(9, 0.1), 1.0, 2.0).is_err());
    }

    #[test]
    fn single_precision_path() {
        let b = build_basis(2.0f32 * std::f32::consts::PI, 2.0).unwrap();
        assert_eq!(b.len(), 5);
        let h = build_hamiltonian(b.clone(), LocalPotential::cosine(1, 0.25f32), 1.0, 2.0).unwrap();
        let v = CVec::from_element(b.len(), Complex::new(1.0f32, 0.0));
        let hv = h.apply(&v).unwrap();
        assert!((hv - h.dense() * v).camax() < 1e-5);
    }
}
