//! Sternheimer solvers for the unoccupied part of the orbital response.
//!
//! All three variants run the same preconditioned CG loop (one `H`
//! application per iteration) on different operators:
//!
//! * direct: `Q(H - ε_n)Q` on `Ran Q`, `Q = 1 - ΦΦᴴ`;
//! * Schur: the Schur complement on `Ran R`, `R = Q - Φ̃Φ̃ᴴ`, of the block
//!   system split along the extra bands;
//! * shifted: `H + S - ε_n` on the whole space with `S = Σ s_m φ_mφ_mᴴ`.

use std::fmt;
use std::str::FromStr;

use num_complex::{Complex, Complex64};
use serde::{Deserialize, Serialize};

use crate::error::PartialState;
use crate::linalg::{c, hermitian_eigen, norm, CMat, CVec};
use crate::model::{HamiltonianChannel, PlaneWaveBasis};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Direct,
    Schur,
    Shifted,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Direct, Method::Schur, Method::Shifted];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Direct => "direct",
            Method::Schur => "schur",
            Method::Shifted => "shifted",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "direct" => Ok(Method::Direct),
            "schur" => Ok(Method::Schur),
            "shifted" => Ok(Method::Shifted),
            other => Err(Error::invalid(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SternheimerOptions<T> {
    pub method: Method,
    /// Absolute tolerance on the residual norm.
    pub tol: T,
    pub max_iter: usize,
    pub precond_shift: T,
}

impl<T: Real> Default for SternheimerOptions<T> {
    fn default() -> Self {
        Self {
            method: Method::Schur,
            tol: T::lit(1e-9),
            max_iter: 1000,
            precond_shift: T::one(),
        }
    }
}

impl<T: Real> SternheimerOptions<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > T::zero()) {
            return Err(Error::invalid("Sternheimer tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.precond_shift > T::zero()) {
            return Err(Error::invalid("preconditioner shift must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SternheimerSolution<T: Real> {
    /// `δφ_n^Q` (direct, Schur) or `w_n + f_n δφ_n^Q` (shifted).
    pub dphi_q: CVec<T>,
    pub iterations: usize,
    pub final_residual: T,
    pub h_applies: u64,
    /// Residual norm before the first and after every iteration.
    pub history: Vec<T>,
    /// Schur split `δφ^Q = Φ̃α + δφ^R`.
    pub alpha: Option<CVec<T>>,
    pub dphi_r: Option<CVec<T>>,
}

/// Diagonal preconditioner `1/(½|G|² + σ)`.
#[derive(Debug, Clone)]
pub struct KineticPreconditioner<T> {
    diag: Vec<T>,
}

impl<T: Real> KineticPreconditioner<T> {
    pub fn new(basis: &PlaneWaveBasis<T>, shift: T) -> Result<Self> {
        if !(shift > T::zero()) {
            return Err(Error::invalid(format!(
                "preconditioner shift must be positive (got {shift:e})"
            )));
        }
        Ok(Self {
            diag: basis.kinetic_diagonal().into_iter().map(|k| T::one() / (k + shift)).collect(),
        })
    }

    pub fn diagonal(&self) -> &[T] {
        &self.diag
    }

    pub fn apply_in_place(&self, v: &mut CVec<T>) {
        for (x, &d) in v.iter_mut().zip(&self.diag) {
            *x *= d;
        }
    }

    pub fn apply(&self, v: &CVec<T>) -> CVec<T> {
        let mut out = v.clone();
        self.apply_in_place(&mut out);
        out
    }
}

/// `kinetic_preconditioner` entry point.
pub fn kinetic_preconditioner<T: Real>(basis: &PlaneWaveBasis<T>, shift: T) -> Result<KineticPreconditioner<T>> {
    KineticPreconditioner::new(basis, shift)
}

/// Extra bands with their images `HΦ̃` and Ritz block `Φ̃ᴴHΦ̃`, computed once per channel.
#[derive(Debug, Clone)]
pub struct ExtraBands<T: Real> {
    pub phi_ex: CMat<T>,
    pub h_phi_ex: CMat<T>,
    pub ritz: CMat<T>,
    /// Applications spent building `HΦ̃`.
    pub setup_applies: u64,
}

impl<T: Real> ExtraBands<T> {
    pub fn new(channel: &HamiltonianChannel<T>, phi_ex: &CMat<T>) -> Result<Self> {
        let h_phi_ex = channel.apply_block(phi_ex)?;
        let ritz = crate::linalg::hermitize(&phi_ex.ad_mul(&h_phi_ex));
        Ok(Self {
            phi_ex: phi_ex.clone(),
            h_phi_ex,
            ritz,
            setup_applies: phi_ex.ncols() as u64,
        })
    }

    pub fn len(&self) -> usize {
        self.phi_ex.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn to_c64<T: Real>(v: &CVec<T>) -> Vec<Complex64> {
    v.iter().map(|z| Complex64::new(z.re.as_f64(), z.im.as_f64())).collect()
}

/// Window for the stagnation guard.
const STAGNATION_WINDOW: usize = 50;
/// Minimal relative decrease of the best residual over one window.
const STAGNATION_FACTOR: f64 = 0.99;

struct PcgOutcome<T: Real> {
    x: CVec<T>,
    iterations: usize,
    residual: T,
    history: Vec<T>,
}

/// Preconditioned CG for `A x = b` with `A` Hermitian positive definite on the
/// range of the projector `project` (identity for full-space solves). The
/// iterate, residual and search direction are re-projected every iteration.
fn pcg<T, A, P>(
    mut apply: A,
    project: P,
    precond: &KineticPreconditioner<T>,
    b: &CVec<T>,
    tol: T,
    max_iter: usize,
    what: &str,
    indefinite: fn(String) -> Error,
) -> Result<PcgOutcome<T>>
where
    T: Real,
    A: FnMut(&CVec<T>) -> Result<CVec<T>>,
    P: Fn(&mut CVec<T>),
{
    let mut x = CVec::zeros(b.len());
    let mut r = b.clone();
    project(&mut r);
    let mut res = norm(&r);
    let mut history = vec![res];
    if res <= tol {
        return Ok(PcgOutcome { x, iterations: 0, residual: res, history });
    }
    let mut z = precond.apply(&r);
    project(&mut z);
    let mut p = z.clone();
    let mut rz = r.dotc(&z).re;
    let mut best_before = res;

    for it in 1..=max_iter {
        let ap = apply(&p)?;
        let pap = p.dotc(&ap).re;
        if !(pap > T::zero()) {
            return Err(indefinite(format!(
                "{what}: operator not positive definite (pᴴAp = {:.3e} at iteration {it})",
                pap.as_f64()
            )));
        }
        let alpha = c(rz / pap);
        x.axpy(alpha, &p, Complex::new(T::one(), T::zero()));
        r.axpy(-alpha, &ap, Complex::new(T::one(), T::zero()));
        project(&mut x);
        project(&mut r);
        res = norm(&r);
        history.push(res);
        if res <= tol {
            return Ok(PcgOutcome { x, iterations: it, residual: res, history });
        }
        if it >= STAGNATION_WINDOW {
            let split = history.len() - STAGNATION_WINDOW;
            if split > 0 {
                best_before = history[..split].iter().fold(best_before, |a, &h| a.min(h));
                let recent = history[split..].iter().fold(res, |a, &h| a.min(h));
                if recent > T::lit(STAGNATION_FACTOR) * best_before {
                    return Err(not_converged(what, it, res, &x, &history, "stagnated"));
                }
            }
        }
        z = precond.apply(&r);
        project(&mut z);
        let rz_new = r.dotc(&z).re;
        let beta = c(rz_new / rz);
        rz = rz_new;
        p = &z + &p * beta;
        project(&mut p);
    }
    Err(not_converged(what, max_iter, res, &x, &history, "iteration limit"))
}

fn not_converged<T: Real>(what: &str, it: usize, res: T, x: &CVec<T>, history: &[T], why: &str) -> Error {
    Error::NotConverged {
        what: format!("{what} ({why})"),
        iterations: it,
        residual: res.as_f64(),
        partial: Box::new(PartialState {
            iterate: to_c64(x),
            residuals: history.iter().map(|h| h.as_f64()).collect(),
        }),
    }
}

/// `v ← v - B(Bᴴv)` for every block in order.
fn project_blocks<T: Real>(v: &mut CVec<T>, blocks: &[&CMat<T>]) {
    for b in blocks {
        if b.ncols() > 0 {
            let coef = b.ad_mul(v);
            *v -= *b * coef;
        }
    }
}

/// `b ← Qb` then `Q(H - ε_n)Q x = b` by projected PCG.
pub fn solve_direct<T: Real>(
    channel: &HamiltonianChannel<T>,
    eps_n: T,
    phi: &CMat<T>,
    b_n: &CVec<T>,
    opts: &SternheimerOptions<T>,
) -> Result<SternheimerSolution<T>> {
    opts.validate()?;
    let precond = KineticPreconditioner::new(channel.basis(), opts.precond_shift)?;
    let project = |v: &mut CVec<T>| project_blocks(v, &[phi]);
    let apply = |v: &CVec<T>| -> Result<CVec<T>> {
        let mut hv = channel.apply(v)?;
        hv.axpy(c(-eps_n), v, c(T::one()));
        Ok(hv)
    };
    let out = pcg(apply, project, &precond, b_n, opts.tol, opts.max_iter, "direct Sternheimer", Error::Infeasible)?;
    Ok(SternheimerSolution {
        dphi_q: out.x,
        iterations: out.iterations,
        final_residual: out.residual,
        h_applies: out.iterations as u64,
        history: out.history,
        alpha: None,
        dphi_r: None,
    })
}

/// Schur-complement solve: eliminate the extra-band block exactly, run CG on
/// `Ran R` for `δφ^R`, then recover `α` and `δφ^Q = Φ̃α + δφ^R`.
pub fn solve_schur<T: Real>(
    channel: &HamiltonianChannel<T>,
    eps_n: T,
    phi: &CMat<T>,
    extra: &ExtraBands<T>,
    b_n: &CVec<T>,
    opts: &SternheimerOptions<T>,
) -> Result<SternheimerSolution<T>> {
    if extra.is_empty() {
        return solve_direct(channel, eps_n, phi, b_n, opts);
    }
    opts.validate()?;
    let precond = KineticPreconditioner::new(channel.basis(), opts.precond_shift)?;
    let phi_ex = &extra.phi_ex;
    let n_ex = extra.len();

    // D = Φ̃ᴴHΦ̃ - ε_n, inverted through its eigendecomposition.
    let (d_vals, d_vecs) = hermitian_eigen(&extra.ritz);
    let closest = d_vals.iter().fold(T::max_value().unwrap_or_else(T::one), |a, &v| a.min((v - eps_n).mag()));
    if closest < T::lit(1e-8) {
        return Err(Error::DegenerateShift(format!(
            "extra-band Ritz value within {:.3e} of ε_n = {:.6}",
            closest.as_f64(),
            eps_n.as_f64()
        )));
    }
    let d_inv = |v: &CVec<T>| -> CVec<T> {
        let mut w = d_vecs.ad_mul(v);
        for (i, x) in w.iter_mut().enumerate() {
            *x /= c(d_vals[i] - eps_n);
        }
        &d_vecs * w
    };
    // (H - ε_n)Φ̃, from the precomputed images.
    let shifted_ex = &extra.h_phi_ex - phi_ex * c(eps_n);
    let project = |v: &mut CVec<T>| project_blocks(v, &[phi, phi_ex]);

    let apply = |y: &CVec<T>| -> Result<CVec<T>> {
        let mut u = channel.apply(y)?;
        u.axpy(c(-eps_n), y, c(T::one()));
        let d = d_inv(&phi_ex.ad_mul(&u));
        u -= &shifted_ex * d;
        project(&mut u);
        Ok(u)
    };

    let mut bq = b_n.clone();
    project_blocks(&mut bq, &[phi]);
    let bt = phi_ex.ad_mul(&bq);
    let mut rhs = &bq - &shifted_ex * d_inv(&bt);
    project(&mut rhs);

    let out = pcg(apply, project, &precond, &rhs, opts.tol, opts.max_iter, "Schur Sternheimer", Error::Infeasible)?;
    let y = out.x;
    let alpha = d_inv(&(bt - extra.h_phi_ex.ad_mul(&y)));
    let dphi_q = phi_ex * &alpha + &y;
    debug_assert_eq!(alpha.len(), n_ex);
    Ok(SternheimerSolution {
        dphi_q,
        iterations: out.iterations,
        final_residual: out.residual,
        h_applies: out.iterations as u64,
        history: out.history,
        alpha: Some(alpha),
        dphi_r: Some(y),
    })
}

/// Shifts `s_m = ε_N + δ_gap - ε_m + 0.1` with `δ_gap = max(ε̃_{N+1} - ε_N, 0.1)`.
pub fn shift_values<T: Real>(eps: &[T], first_extra: Option<T>) -> Vec<T> {
    let eps_n = *eps.last().expect("at least one occupied band");
    let tenth = T::lit(0.1);
    let gap = first_extra.map_or(tenth, |e| (e - eps_n).max(tenth));
    eps.iter().map(|&e| eps_n + gap - e + tenth).collect()
}

/// Shifted Sternheimer solve for band `n` on the full space:
/// `(H + S - ε_n)x = f_n b_n + Σ_m Γ_mn (ε_m + s_m - ε_n) φ_m`, whose solution is
/// `x = w_n + f_n δφ_n^Q`.
#[allow(clippy::too_many_arguments)]
pub fn solve_shifted<T: Real>(
    channel: &HamiltonianChannel<T>,
    n: usize,
    phi: &CMat<T>,
    eps: &[T],
    shifts: &[T],
    gamma_col: &CVec<T>,
    f_n: T,
    b_n: &CVec<T>,
    opts: &SternheimerOptions<T>,
) -> Result<SternheimerSolution<T>> {
    opts.validate()?;
    let eps_n = eps[n];
    for (m, (&e, &s)) in eps.iter().zip(shifts).enumerate() {
        if !(e + s > eps_n) {
            return Err(Error::InvalidShift(format!(
                "shifted level {m} at {:.6} does not lie above ε_{n} = {:.6}",
                (e + s).as_f64(),
                eps_n.as_f64()
            )));
        }
    }
    let precond = KineticPreconditioner::new(channel.basis(), opts.precond_shift)?;

    let mut bq = b_n.clone();
    project_blocks(&mut bq, &[phi]);
    let mut coef = gamma_col.clone();
    for (m, z) in coef.iter_mut().enumerate() {
        *z *= c(eps[m] + shifts[m] - eps_n);
    }
    let rhs = bq * c(f_n) + phi * coef;

    let apply = |v: &CVec<T>| -> Result<CVec<T>> {
        let mut hv = channel.apply(v)?;
        hv.axpy(c(-eps_n), v, c(T::one()));
        let mut proj = phi.ad_mul(v);
        for (m, z) in proj.iter_mut().enumerate() {
            *z *= c(shifts[m]);
        }
        hv += phi * proj;
        Ok(hv)
    };
    let out = pcg(apply, |_: &mut CVec<T>| {}, &precond, &rhs, opts.tol, opts.max_iter, "shifted Sternheimer", Error::InvalidShift)?;
    Ok(SternheimerSolution {
        dphi_q: out.x,
        iterations: out.iterations,
        final_residual: out.residual,
        h_applies: out.iterations as u64,
        history: out.history,
        alpha: None,
        dphi_r: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundstate::{prepare_groundstate, GroundStateOptions};
    use crate::linalg::{orthonormalize, random_matrix};
    use crate::model::{build_basis, LocalPotential};
    use crate::smearing::SmearingScheme;
    use crate::synth::random_potential;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (crate::GroundState, CVec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = build_basis(10.0, 6.0).unwrap();
        let v = random_potential(&mut rng, &basis, 5, 0.8);
        let ch = HamiltonianChannel::new(basis, v, 1.0, 2.0).unwrap();
        let gs = prepare_groundstate(vec![ch], SmearingScheme::fermi_dirac(1e-2).unwrap(), 4.0, &GroundStateOptions::default()).unwrap();
        let d = gs.channels[0].channel.dim();
        let b: CMat<f64> = random_matrix(&mut rng, d, 1);
        let mut b = b.column(0).into_owned();
        project_blocks(&mut b, &[&gs.channels[0].slice.phi]);
        (gs, b)
    }

    #[test]
    fn preconditioner_entries() {
        let b = build_basis(2.0 * std::f64::consts::PI, 2.0).unwrap();
        let p = KineticPreconditioner::new(&b, 1.0).unwrap();
        assert_eq!(p.diagonal()[b.index_of(0).unwrap()], 1.0);
        assert!((p.diagonal()[b.index_of(2).unwrap()] - 1.0 / 3.0).abs() < 1e-15);
        assert!(KineticPreconditioner::new(&b, 0.0).is_err());
    }

    #[test]
    fn zero_rhs_takes_no_iterations() {
        let (gs, b) = setup(1);
        let ch = &gs.channels[0];
        let zero = CVec::zeros(b.len());
        let s = solve_direct(&ch.channel, ch.slice.eps[0], &ch.slice.phi, &zero, &Default::default()).unwrap();
        assert_eq!(s.iterations, 0);
        assert_eq!(s.dphi_q.norm(), 0.0);
    }

    #[test]
    fn direct_matches_dense_projected_solve() {
        let (gs, b) = setup(2);
        let ch = &gs.channels[0];
        let phi = &ch.slice.phi;
        let n = phi.ncols() - 1;
        let eps_n = ch.slice.eps[n];
        let opts = SternheimerOptions { tol: 1e-12, ..Default::default() };
        let s = solve_direct(&ch.channel, eps_n, phi, &b, &opts).unwrap();
        // Dense oracle: diagonalize H on the complement of Φ.
        let h = ch.channel.dense();
        let dim = h.nrows();
        let (q, _) = orthonormalize(&CMat::identity(dim, dim), None, &[phi], &[&CMat::zeros(dim, 0)], 1e-8);
        let hq = q.ad_mul(&(&h * &q));
        let (vals, vecs) = hermitian_eigen(&hq);
        let mut coef = vecs.ad_mul(&q.ad_mul(&b));
        for (i, z) in coef.iter_mut().enumerate() {
            *z /= vals[i] - eps_n;
        }
        let x = &q * (&vecs * coef);
        assert!((&s.dphi_q - &x).norm() < 1e-8 * x.norm());
        assert!(phi.ad_mul(&s.dphi_q).norm() <= 1e-10 * s.dphi_q.norm());
        assert_eq!(s.h_applies, s.iterations as u64);
    }

    #[test]
    fn schur_matches_direct() {
        let (gs, b) = setup(3);
        let ch = &gs.channels[0];
        let extra = ExtraBands::new(&ch.channel, &ch.slice.phi_ex).unwrap();
        assert!(extra.len() >= 3);
        let opts = SternheimerOptions { tol: 1e-12, ..Default::default() };
        for n in 0..ch.slice.n_occ() {
            let e = ch.slice.eps[n];
            let d = solve_direct(&ch.channel, e, &ch.slice.phi, &b, &opts).unwrap();
            let s = solve_schur(&ch.channel, e, &ch.slice.phi, &extra, &b, &opts).unwrap();
            assert!((&d.dphi_q - &s.dphi_q).norm() < 1e-8 * d.dphi_q.norm());
            let r = s.dphi_r.as_ref().unwrap();
            assert!(ch.slice.phi_ex.ad_mul(r).norm() <= 1e-10 * r.norm().max(1e-300));
        }
    }

    #[test]
    fn schur_without_extra_bands_is_direct() {
        let (gs, b) = setup(4);
        let ch = &gs.channels[0];
        let empty = ExtraBands::new(&ch.channel, &CMat::zeros(b.len(), 0)).unwrap();
        let e = ch.slice.eps[0];
        let d = solve_direct(&ch.channel, e, &ch.slice.phi, &b, &Default::default()).unwrap();
        let s = solve_schur(&ch.channel, e, &ch.slice.phi, &empty, &b, &Default::default()).unwrap();
        assert_eq!(d.dphi_q, s.dphi_q);
        assert_eq!(d.iterations, s.iterations);
    }

    #[test]
    fn exact_complete_extra_bands_need_no_iterations() {
        let basis = build_basis(2.0 * std::f64::consts::PI, 4.5).unwrap();
        let ch = HamiltonianChannel::new(basis, LocalPotential::cosine(1, 0.2), 1.0, 2.0).unwrap();
        let (vals, vecs) = hermitian_eigen(&ch.dense());
        let phi = vecs.columns(0, 2).into_owned();
        let phi_ex = vecs.columns(2, vals.len() - 2).into_owned();
        let extra = ExtraBands::new(&ch, &phi_ex).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b: CMat<f64> = random_matrix(&mut rng, vals.len(), 1);
        let mut b = b.column(0).into_owned();
        project_blocks(&mut b, &[&phi]);
        let s = solve_schur(&ch, vals[1], &phi, &extra, &b, &Default::default()).unwrap();
        assert_eq!(s.iterations, 0);
        let mut expect = phi_ex.ad_mul(&b);
        for (i, z) in expect.iter_mut().enumerate() {
            *z /= vals[i + 2] - vals[1];
        }
        assert!((&s.dphi_q - &phi_ex * expect).norm() < 1e-10);
    }

    #[test]
    fn shifted_rejects_low_shifts() {
        let (gs, b) = setup(6);
        let ch = &gs.channels[0];
        let n = ch.slice.n_occ();
        let shifts = vec![-10.0; n];
        let g = CVec::zeros(n);
        let err = solve_shifted(&ch.channel, n - 1, &ch.slice.phi, &ch.slice.eps, &shifts, &g, 1.0, &b, &Default::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidShift(_)));
    }

    #[test]
    fn shift_values_clear_the_occupied_levels() {
        let eps = [-1.0, -0.5, 0.2];
        let s = shift_values(&eps, Some(0.25));
        for (&e, &sm) in eps.iter().zip(&s) {
            assert!((e + sm - (0.2f64 + 0.1 + 0.1)).abs() < 1e-15);
        }
    }
}
