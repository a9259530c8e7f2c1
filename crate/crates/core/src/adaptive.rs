//! Conditioning estimates for the Schur-complement Sternheimer equation and
//! adaptive selection of the number of extra bands.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eigensolver::{lobpcg, EigenOptions};
use crate::groundstate::GroundState;
use crate::linalg::{hcat, hermitian_eigen, orthonormalize, random_matrix, CMat};
use crate::{Error, Real, Result};

/// `sqrt((ε̃ - ε_1)/(ε̃ - ε_N))`.
pub fn xi_ratio<T: Real>(eps1: T, eps_n: T, eps_last_extra: T) -> Result<T> {
    if !(eps_last_extra > eps_n) {
        return Err(Error::invalid(format!(
            "last extra level {:.6} must lie above ε_N = {:.6}",
            eps_last_extra.as_f64(),
            eps_n.as_f64()
        )));
    }
    Ok(((eps_last_extra - eps1) / (eps_last_extra - eps_n)).sqrt())
}

/// Certified lower bound `ε - ‖r‖` for the exact eigenvalue matched by a Ritz pair.
pub fn bauer_fike_lower<T: Real>(eps_ritz: T, res_norm: T) -> T {
    eps_ritz - res_norm
}

/// `(ν_i(H0) + α)·‖(H0+α)^{-1/2} W (H0+α)^{-1/2}‖` for every `i`.
///
/// Bounds `|ν_i(H0+W) - ν_i(H0)|` whenever the weighted norm is at most 1;
/// beyond that the lower half of the min-max argument no longer applies.
pub fn perturbation_bound<T: Real>(h0: &CMat<T>, w: &CMat<T>, alpha: T) -> Result<Vec<T>> {
    if h0.shape() != w.shape() || h0.nrows() != h0.ncols() {
        return Err(Error::invalid("H0 and W must be square of the same size"));
    }
    if !(alpha >= T::zero()) {
        return Err(Error::invalid("alpha must be non-negative"));
    }
    let (nu, vecs) = hermitian_eigen(h0);
    if let Some(&lo) = nu.first() {
        if !(lo + alpha > T::zero()) {
            return Err(Error::invalid(format!(
                "H0 + α is not positive definite (lowest {:.3e})",
                (lo + alpha).as_f64()
            )));
        }
    }
    // S = (H0+α)^{-1/2} in the eigenbasis of H0.
    let mut s = vecs.clone();
    for (j, &v) in nu.iter().enumerate() {
        s.column_mut(j).scale_mut(T::one() / (v + alpha).sqrt());
    }
    let s = &s * vecs.adjoint();
    let m = &s * w * &s;
    let (mv, _) = hermitian_eigen(&m);
    let norm = mv.iter().fold(T::zero(), |a, &x| a.max(x.mag()));
    Ok(nu.iter().map(|&v| (v + alpha) * norm).collect())
}

/// One step of the adaptive loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptStep {
    pub step: usize,
    pub n_ex: usize,
    pub xi: f64,
    pub tol: f64,
    pub h_applies: u64,
}

/// Conditioning indicators of one channel. `kappa` holds `1/(ε̃ - ε_n)`,
/// the condition numbers up to an unknown constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub channel: usize,
    pub eps_1: f64,
    pub eps_n: f64,
    pub eps_last: f64,
    pub last_residual: f64,
    pub xi: f64,
    /// `ξ` with `ε̃` replaced by its Bauer-Fike lower bound.
    pub xi_certified: Option<f64>,
    pub kappa: Vec<f64>,
}

pub fn conditioning_report<T: Real>(gs: &GroundState<T>) -> Result<Vec<ConditioningReport>> {
    gs.channels
        .iter()
        .enumerate()
        .map(|(k, ch)| {
            let s = &ch.slice;
            let eps_last = *s
                .eps_ex
                .last()
                .ok_or_else(|| Error::invalid(format!("channel {k} has no extra bands")))?;
            let eps_1 = s.eps[0];
            let eps_n = *s.eps.last().expect("occupied band");
            let last_residual = *s.res_norms.last().expect("residuals");
            let xi = xi_ratio(eps_1, eps_n, eps_last)?;
            let xi_certified = xi_ratio(eps_1, eps_n, bauer_fike_lower(eps_last, last_residual))
                .ok()
                .map(|x| x.as_f64());
            Ok(ConditioningReport {
                channel: k,
                eps_1: eps_1.as_f64(),
                eps_n: eps_n.as_f64(),
                eps_last: eps_last.as_f64(),
                last_residual: last_residual.as_f64(),
                xi: xi.as_f64(),
                xi_certified,
                kappa: s.eps.iter().map(|&e| 1.0 / (eps_last - e).as_f64()).collect(),
            })
        })
        .collect()
}

fn channel_xi<T: Real>(gs: &GroundState<T>, channel: usize) -> Result<T> {
    let s = &gs.channels[channel].slice;
    let last = *s
        .eps_ex
        .last()
        .ok_or_else(|| Error::invalid("no extra bands to estimate ξ from"))?;
    xi_ratio(s.eps[0], *s.eps.last().expect("occupied band"), last)
}

/// Adds extra bands to `channel` one at a time until `ξ ≤ xi_target`. Each new
/// band starts from a seeded random vector orthogonal to `[Φ Φ̃]`; the extra
/// bands are then refined against the locked `Φ` with tolerance
/// `(ε̃_{N+N_ex-1} - ε_N)/50`.
pub fn adapt_bands<T: Real>(
    gs: &mut GroundState<T>,
    channel: usize,
    xi_target: T,
    max_added: usize,
    eigen: &EigenOptions<T>,
    seed: u64,
) -> Result<Vec<AdaptStep>> {
    if !(xi_target > T::one()) {
        return Err(Error::invalid("xi_target must exceed 1"));
    }
    if channel >= gs.channels.len() {
        return Err(Error::invalid(format!("no channel {channel}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = channel_xi(gs, channel)?;
    let mut trace = Vec::new();
    let mut added = 0;
    let drop = crate::linalg::drop_tolerance::<T>();

    while xi > xi_target {
        if added == max_added {
            return Err(Error::BudgetExhausted {
                added,
                xi: xi.as_f64(),
                trace,
            });
        }
        let ch = &mut gs.channels[channel];
        let dim = ch.channel.dim();
        let s = &ch.slice;
        if s.n_occ() + s.n_ex() + 1 > dim {
            return Err(Error::Infeasible(format!(
                "basis of size {dim} exhausted after adding {added} bands"
            )));
        }
        let eps_n = *s.eps.last().expect("occupied band");
        let old_last = *s.eps_ex.last().expect("extra band");
        let tol = (old_last - eps_n) / T::lit(50.0);

        let empty = CMat::zeros(dim, 0);
        let fresh = loop {
            let r: CMat<T> = random_matrix(&mut rng, dim, 1);
            let (v, _) = orthonormalize(&r, None, &[&s.phi, &s.phi_ex], &[&empty, &empty], drop);
            if v.ncols() == 1 {
                break v;
            }
        };
        let start = hcat(&[&s.phi_ex, &fresh]);
        let k = start.ncols();
        let opts = EigenOptions { tol, ..*eigen };
        let out = lobpcg(&ch.channel, &start, &s.phi, k, &opts)?;

        let n_occ = s.n_occ();
        let mut res = s.res_norms[..n_occ].to_vec();
        res.extend_from_slice(&out.residual_norms);
        let mut conv = s.converged[..n_occ].to_vec();
        conv.extend(out.residual_norms.iter().map(|&r| r <= eigen.tol));
        ch.slice.phi_ex = out.vectors;
        ch.slice.eps_ex = out.values;
        ch.slice.res_norms = res;
        ch.slice.converged = conv;
        added += 1;

        xi = channel_xi(gs, channel)?;
        trace.push(AdaptStep {
            step: added,
            n_ex: gs.channels[channel].slice.n_ex(),
            xi: xi.as_f64(),
            tol: tol.as_f64(),
            h_applies: out.h_applies,
        });
    }
    Ok(trace)
}
