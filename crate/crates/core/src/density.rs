//! Densities (and density variations) stored as Fourier coefficients.
//!
//! With orbitals normalised as coefficient vectors in the basis
//! `exp(iGx)/√L`, the product `conj(u(x))·v(x)` has the Fourier coefficient
//! `(1/L) Σ_n conj(u_n) v_{n+q}` at mode `q`. Products of basis functions
//! reach modes `|q| ≤ 2·n_max`, which fixes the length of the coefficient
//! vector.

use num_complex::Complex;

use crate::linalg::{CMat, CVec};
use crate::model::{LocalPotential, PlaneWaveBasis};
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Density<T> {
    max_mode: i64,
    cell_length: T,
    coeffs: Vec<Complex<T>>,
}

impl<T: Real> Density<T> {
    /// Zero density on the product grid of `basis`.
    pub fn zeros(basis: &PlaneWaveBasis<T>) -> Self {
        let max_mode = 2 * basis.n_max();
        Self {
            max_mode,
            cell_length: basis.cell_length(),
            coeffs: vec![Complex::new(T::zero(), T::zero()); (2 * max_mode + 1) as usize],
        }
    }

    pub fn from_coefficients(max_mode: i64, cell_length: T, coeffs: Vec<Complex<T>>) -> Self {
        assert_eq!(coeffs.len() as i64, 2 * max_mode + 1);
        Self {
            max_mode,
            cell_length,
            coeffs,
        }
    }

    pub fn max_mode(&self) -> i64 {
        self.max_mode
    }

    pub fn cell_length(&self) -> T {
        self.cell_length
    }

    pub fn coefficients(&self) -> &[Complex<T>] {
        &self.coeffs
    }

    pub fn coefficient(&self, mode: i64) -> Complex<T> {
        if mode.abs() > self.max_mode {
            Complex::new(T::zero(), T::zero())
        } else {
            self.coeffs[(mode + self.max_mode) as usize]
        }
    }

    pub fn modes(&self) -> impl Iterator<Item = i64> {
        -self.max_mode..=self.max_mode
    }

    /// Euclidean norm of the coefficient vector.
    pub fn norm(&self) -> T {
        self.coeffs
            .iter()
            .fold(T::zero(), |acc, z| acc + z.norm_sqr())
            .sqrt()
    }

    /// Largest violation of `ρ̂_{-q} = conj(ρ̂_q)`.
    pub fn conjugate_symmetry_defect(&self) -> T {
        let mut worst = T::zero();
        for q in 0..=self.max_mode {
            let d = (self.coefficient(-q) - self.coefficient(q).conj()).norm_sqr().sqrt();
            if d > worst {
                worst = d;
            }
        }
        worst
    }

    pub fn add_scaled(&mut self, other: &Self, factor: T) {
        assert_eq!(self.max_mode, other.max_mode);
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += *b * factor;
        }
    }

    pub fn scaled(&self, factor: T) -> Self {
        let mut out = self.clone();
        for z in &mut out.coeffs {
            *z *= factor;
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_scaled(other, -T::one());
        out
    }

    /// Accumulates `scale·(conj(u)v + u·conj(v))`, the density of `2Re(conj(u)v)`.
    pub fn accumulate_pair(&mut self, u: &CVec<T>, v: &CVec<T>, scale: T) {
        let n = u.len() as i64;
        let inv_l = scale / self.cell_length;
        for q in 0..=self.max_mode.min(n - 1) {
            let mut acc = Complex::new(T::zero(), T::zero());
            for k in 0..(n - q) {
                let (k, kq) = (k as usize, (k + q) as usize);
                acc += u[k].conj() * v[kq] + v[k].conj() * u[kq];
            }
            let acc = acc * inv_l;
            self.coeffs[(q + self.max_mode) as usize] += acc;
            if q > 0 {
                self.coeffs[(self.max_mode - q) as usize] += acc.conj();
            }
        }
    }

    /// Accumulates `scale·|u|²`.
    pub fn accumulate_abs2(&mut self, u: &CVec<T>, scale: T) {
        self.accumulate_pair(u, u, scale * T::lit(0.5));
    }

    /// Density `Σ_k M_{k+q,k}/L` of the operator with plane-wave matrix `M`
    /// (i.e. `ρ(x) = ⟨x|M|x⟩`).
    pub fn accumulate_operator(&mut self, m: &CMat<T>, scale: T) {
        let n = m.nrows() as i64;
        let inv_l = scale / self.cell_length;
        for q in -self.max_mode.min(n - 1)..=self.max_mode.min(n - 1) {
            let mut acc = Complex::new(T::zero(), T::zero());
            for k in 0..n {
                let kq = k + q;
                if kq >= 0 && kq < n {
                    acc += m[(kq as usize, k as usize)];
                }
            }
            self.coeffs[(q + self.max_mode) as usize] += acc * inv_l;
        }
    }

    /// `∫ V(x) ρ(x) dx = L Σ_q conj(V̂_q) ρ̂_q` for real `V`.
    pub fn pair_with(&self, v: &LocalPotential<T>) -> Complex<T> {
        let mut acc = Complex::new(T::zero(), T::zero());
        for (m, vm) in v.iter() {
            acc += vm.conj() * self.coefficient(m);
        }
        acc * self.cell_length
    }

    /// The same coefficients read as a potential (`V̂_q = ρ̂_q`).
    pub fn to_potential(&self) -> crate::Result<LocalPotential<T>> {
        LocalPotential::new(self.modes().map(|q| (q, self.coefficient(q))))
    }

    /// Value at position `x`.
    pub fn evaluate(&self, x: T) -> T {
        let unit = T::two_pi() / self.cell_length;
        self.modes().fold(T::zero(), |acc, q| {
            let v = self.coefficient(q);
            let phase = unit * T::lit(q as f64) * x;
            acc + v.re * phase.cos() - v.im * phase.sin()
        })
    }
}

/// Relative distance `‖a - b‖ / max(‖a‖, ‖b‖)` (0 when both vanish).
pub fn relative_difference<T: Real>(a: &Density<T>, b: &Density<T>) -> T {
    let scale = if a.norm() > b.norm() { a.norm() } else { b.norm() };
    let diff = a.sub(b).norm();
    if scale == T::zero() {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, random_matrix};
    use crate::model::build_basis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn abs2_integrates_to_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_basis(5.0, 10.0).unwrap();
        let u: CMat<f64> = random_matrix(&mut rng, b.len(), 1);
        let u = u.column(0).into_owned();
        let mut rho = Density::zeros(&b);
        rho.accumulate_abs2(&u, 1.0);
        let total = rho.coefficient(0).re * b.cell_length();
        assert!((total - u.norm_squared()).abs() < 1e-12);
        assert!(rho.conjugate_symmetry_defect() < 1e-15);
    }

    #[test]
    fn pair_density_matches_real_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = build_basis(4.0, 8.0).unwrap();
        let uv: CMat<f64> = random_matrix(&mut rng, b.len(), 2);
        let (u, v) = (uv.column(0).into_owned(), uv.column(1).into_owned());
        let mut rho = Density::zeros(&b);
        rho.accumulate_pair(&u, &v, 1.0);
        let l = b.cell_length();
        let eval = |w: &CVec<f64>, x: f64| -> Complex<f64> {
            b.modes()
                .enumerate()
                .map(|(i, m)| w[i] * Complex::from_polar(1.0 / l.sqrt(), b.wavenumber(m) * x))
                .sum()
        };
        for &x in &[0.1, 1.3, 2.9] {
            let expect = 2.0 * (eval(&u, x).conj() * eval(&v, x)).re;
            assert!((rho.evaluate(x) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_density_matches_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = build_basis(4.0, 8.0).unwrap();
        let uv: CMat<f64> = random_matrix(&mut rng, b.len(), 2);
        let (u, v) = (uv.column(0).into_owned(), uv.column(1).into_owned());
        let mut a = Density::zeros(&b);
        a.accumulate_pair(&u, &v, 1.0);
        // |v><u| + |u><v|
        let m = &v * u.adjoint() + &u * v.adjoint();
        let mut bden = Density::zeros(&b);
        bden.accumulate_operator(&m, 1.0);
        assert!(relative_difference(&a, &bden) < 1e-14);
        let _ = c(0.0);
    }
}
