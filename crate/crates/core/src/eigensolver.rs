//! Block preconditioned eigensolver (LOBPCG with a three-block Rayleigh-Ritz
//! subspace `[X, W, P]`).
//!
//! Every iterate is the Ritz basis of an orthonormal subspace, so `XᴴX = I`
//! and `XᴴHX` is diagonal after each step, not only at exit.

use nalgebra::DVector;
use num_complex::Complex;

use crate::error::PartialState;
use crate::linalg::{c, column_norm, drop_tolerance, hcat, hermitian_eigen, orthonormalize, CMat};
use crate::model::HamiltonianChannel;
use crate::sternheimer::KineticPreconditioner;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy)]
pub struct EigenOptions<T> {
    pub tol: T,
    pub max_iter: usize,
    pub precond_shift: T,
}

impl<T: Real> Default for EigenOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-10),
            max_iter: 500,
            precond_shift: T::one(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenOutcome<T: Real> {
    pub vectors: CMat<T>,
    pub values: Vec<T>,
    pub residual_norms: Vec<T>,
    pub iterations: usize,
    pub h_applies: u64,
}


fn rayleigh_ritz<T: Real>(z: &CMat<T>, hz: &CMat<T>, k: usize) -> (Vec<T>, CMat<T>) {
    let a = z.ad_mul(hz);
    let (vals, vecs) = hermitian_eigen(&a);
    let k = k.min(vals.len());
    (vals[..k].to_vec(), vecs.columns(0, k).into_owned())
}

fn residuals<T: Real>(x: &CMat<T>, hx: &CMat<T>, vals: &[T]) -> (CMat<T>, Vec<T>) {
    let mut r = hx.clone();
    for (j, &l) in vals.iter().enumerate() {
        let col = x.column(j) * c(l);
        let mut rc = r.column_mut(j);
        rc -= col;
    }
    let norms = (0..r.ncols()).map(|j| column_norm(&r, j)).collect();
    (r, norms)
}

/// LOBPCG on the orthogonal complement of `locked` (orthonormal, may be empty),
/// starting from `initial`. Stops once the first `n_required` Ritz pairs have
/// residual norm `≤ tol`; the remaining columns keep iterating while they are
/// above tolerance but are not waited for.
pub fn lobpcg<T: Real>(
    channel: &HamiltonianChannel<T>,
    initial: &CMat<T>,
    locked: &CMat<T>,
    n_required: usize,
    opts: &EigenOptions<T>,
) -> Result<EigenOutcome<T>> {
    let start_count = channel.apply_count();
    let dim = channel.dim();
    let k = initial.ncols();
    if n_required > k || k + locked.ncols() > dim {
        return Err(Error::invalid(format!(
            "cannot compute {k} bands ({n_required} required) beside {} locked in dimension {dim}",
            locked.ncols()
        )));
    }
    let precond = KineticPreconditioner::new(channel.basis(), opts.precond_shift)?;
    let drop = drop_tolerance::<T>();
    let empty = CMat::<T>::zeros(dim, 0);

    let (x0, _) = orthonormalize(initial, None, &[locked], &[&empty], drop);
    if x0.ncols() < k {
        return Err(Error::invalid("initial block is rank deficient"));
    }
    let hx0 = channel.apply_block(&x0)?;
    let (mut vals, coef) = rayleigh_ritz(&x0, &hx0, k);
    let mut x = &x0 * &coef;
    let mut hx = &hx0 * &coef;
    let mut p = CMat::<T>::zeros(dim, 0);
    let mut hp = CMat::<T>::zeros(dim, 0);
    let mut last_norms: Vec<T>;

    let mut iter = 0;
    loop {
        let (r, norms) = residuals(&x, &hx, &vals);
        let required_done = norms[..n_required].iter().all(|&n| n <= opts.tol);
        if required_done {
            // Confirm against a fresh application of H before accepting.
            let hx_true = channel.apply_block(&x)?;
            let (v2, c2) = rayleigh_ritz(&x, &hx_true, k);
            let x2 = &x * &c2;
            let hx2 = &hx_true * &c2;
            let (_, n2) = residuals(&x2, &hx2, &v2);
            x = x2;
            hx = hx2;
            vals = v2;
            if n2[..n_required].iter().all(|&n| n <= opts.tol) {
                return Ok(EigenOutcome {
                    vectors: x,
                    values: vals,
                    residual_norms: n2,
                    iterations: iter,
                    h_applies: channel.apply_count() - start_count,
                });
            }
            p = CMat::zeros(dim, 0);
            hp = CMat::zeros(dim, 0);
            continue;
        }
        last_norms = norms.clone();
        if iter >= opts.max_iter {
            break;
        }
        iter += 1;

        let active: Vec<usize> = (0..k).filter(|&j| norms[j] > opts.tol).collect();
        let mut w = CMat::<T>::zeros(dim, active.len());
        for (a, &j) in active.iter().enumerate() {
            let mut col = r.column(j).into_owned();
            precond.apply_in_place(&mut col);
            w.set_column(a, &col);
        }

        // P is built from blocks already orthogonal to `locked`, and their
        // images under H are not available, so only X is projected out here.
        let (p_o, hp_o) = orthonormalize(&p, Some(&hp), &[&x], &[&hx], drop);
        let hp_o = hp_o.expect("tracked");
        let (w_o, _) = orthonormalize(&w, None, &[locked, &x, &p_o], &[&empty, &hx, &hp_o], drop);
        let hw = channel.apply_block(&w_o)?;

        let z = hcat(&[&x, &w_o, &p_o]);
        let hz = hcat(&[&hx, &hw, &hp_o]);
        let (new_vals, coef) = rayleigh_ritz(&z, &hz, k);

        let tail = z.ncols() - k;
        if tail > 0 {
            let ct = coef.rows(k, tail);
            p = z.columns(k, tail) * ct;
            hp = hz.columns(k, tail) * ct;
        } else {
            p = CMat::zeros(dim, 0);
            hp = CMat::zeros(dim, 0);
        }
        x = &z * &coef;
        hx = &hz * &coef;
        vals = new_vals;
    }

    let worst = last_norms[..n_required]
        .iter()
        .fold(0.0f64, |a, n| a.max(n.as_f64()));
    Err(Error::NotConverged {
        what: "block eigensolver".into(),
        iterations: iter,
        residual: worst,
        partial: Box::new(PartialState {
            iterate: Vec::new(),
            residuals: last_norms.iter().map(|n| n.as_f64()).collect(),
        }),
    })
}

/// Initial block made of the `k` plane waves of lowest kinetic energy.
pub fn plane_wave_guess<T: Real>(channel: &HamiltonianChannel<T>, k: usize) -> CMat<T> {
    let order = channel.basis().lowest_kinetic_order();
    let mut x = CMat::zeros(channel.dim(), k);
    for (j, &i) in order.iter().take(k).enumerate() {
        x[(i, j)] = c(T::one());
    }
    x
}

/// Unit vector helper used by callers building their own blocks.
pub fn unit_column<T: Real>(dim: usize, i: usize) -> DVector<Complex<T>> {
    let mut v = DVector::zeros(dim);
    v[i] = c(T::one());
    v
}
