//! `δρ = χ0 δV` from a prepared ground state, and the Dyson equation with a
//! Hartree kernel.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::Density;
use crate::gauges::{build_gamma, delta_fermi_level, occupied_variation, FermiTerms, GaugeKind};
use crate::groundstate::GroundState;
use crate::linalg::{c, CMat, CVec};
use crate::model::LocalPotential;
use crate::oracle::delta_matrix;
use crate::report::SolverReport;
use crate::sternheimer::{
    shift_values, solve_direct, solve_schur, solve_shifted, ExtraBands, Method, SternheimerOptions,
    SternheimerSolution,
};
use crate::{Error, Real, Result};

/// Response of one channel.
#[derive(Debug, Clone)]
pub struct ChannelResponse<T: Real> {
    /// `w_n` (occupied part, columns).
    pub w: CMat<T>,
    pub df: Vec<T>,
    /// `δφ_n^Q` (columns).
    pub dphi_q: CMat<T>,
    /// Applications spent outside the per-band solves (`HΦ̃` for Schur).
    pub setup_applies: u64,
    /// Orthogonal gauge hit a degenerate pair.
    pub degenerate_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct ResponseResult<T: Real> {
    pub drho: Density<T>,
    pub def: T,
    pub channels: Vec<ChannelResponse<T>>,
    pub reports: Vec<SolverReport>,
    pub total_h_applies: u64,
    pub method: Method,
    pub gauge: GaugeKind,
    /// Fixed-point residuals of the Dyson iteration (empty for a bare `χ0` application).
    pub dyson_history: Vec<f64>,
}

impl<T: Real> ResponseResult<T> {
    /// Sum over per-band reports of the iterations.
    pub fn total_iterations(&self) -> usize {
        self.reports.iter().filter(|r| !r.is_total()).map(|r| r.iterations).sum()
    }

    /// Reports followed by the totals row of the method.
    pub fn reports_with_totals(&self) -> Vec<SolverReport> {
        let setup: u64 = self.channels.iter().map(|c| c.setup_applies).sum();
        let mut extra = BTreeMap::new();
        extra.insert(self.method.to_string(), setup);
        let mut rows = self.reports.clone();
        rows.extend(crate::report::totals(&self.reports, &extra));
        rows
    }

    pub fn iterations(&self, channel: usize, band: usize) -> Option<usize> {
        self.reports
            .iter()
            .find(|r| r.channel == Some(channel) && r.band == Some(band))
            .map(|r| r.iterations)
    }
}

/// `K ρ` with Fourier multiplier `scale·4π/|G|²` (zero at `G = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HartreeKernel {
    pub scale: f64,
}

impl Default for HartreeKernel {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl HartreeKernel {
    pub fn new(scale: f64) -> Self {
        Self { scale }
    }

    pub fn multiplier<T: Real>(&self, mode: i64, cell_length: T) -> T {
        if mode == 0 {
            return T::zero();
        }
        let g = T::two_pi() * T::lit(mode as f64) / cell_length;
        T::lit(self.scale) * T::lit(4.0) * T::pi() / (g * g)
    }

    pub fn apply<T: Real>(&self, rho: &Density<T>) -> Result<LocalPotential<T>> {
        let l = rho.cell_length();
        let half = T::lit(0.5);
        LocalPotential::new(rho.modes().map(|q| {
            // Symmetrised so that rounding noise cannot break V̂_{-q} = conj(V̂_q).
            let sym = (rho.coefficient(q) + rho.coefficient(-q).conj()) * half;
            (q, sym * self.multiplier(q, l))
        }))
    }
}

struct ChannelInputs<T: Real> {
    dvm: CMat<T>,
    dvphi: CMat<T>,
    d_eps: Vec<T>,
    occ: Vec<T>,
    deriv: Vec<T>,
}

/// `δρ = χ0 δV` through the gauge framework and the chosen Sternheimer method.
pub fn apply_chi0<T: Real>(
    gs: &GroundState<T>,
    dv: &LocalPotential<T>,
    gauge: GaugeKind,
    opts: &SternheimerOptions<T>,
) -> Result<ResponseResult<T>> {
    opts.validate()?;
    let basis = gs.channels[0].channel.basis();
    if dv.max_mode() > 2 * basis.n_max() {
        return Err(Error::invalid(format!(
            "perturbation mode {} exceeds the density range {}",
            dv.max_mode(),
            2 * basis.n_max()
        )));
    }

    let inputs: Vec<ChannelInputs<T>> = gs
        .channels
        .iter()
        .enumerate()
        .map(|(k, ch)| {
            let phi = &ch.slice.phi;
            let dvphi = dv.apply_block(ch.channel.basis(), phi);
            let dvm = crate::linalg::hermitize(&phi.ad_mul(&dvphi));
            let d_eps = (0..phi.ncols()).map(|i| dvm[(i, i)].re).collect();
            ChannelInputs {
                dvm,
                dvphi,
                d_eps,
                occ: gs.occupations(k),
                deriv: gs.occupation_derivatives(k),
            }
        })
        .collect();

    let terms: Vec<FermiTerms<'_, T>> = inputs
        .iter()
        .zip(&gs.channels)
        .map(|(inp, ch)| FermiTerms {
            d_eps: &inp.d_eps,
            occ_deriv: &inp.deriv,
            weight: ch.channel.weight(),
        })
        .collect();
    let def = delta_fermi_level(&terms);

    let mut drho = Density::zeros(basis);
    let mut channels = Vec::with_capacity(gs.channels.len());
    let mut reports = Vec::new();
    let mut total = 0u64;
    let mut failure: Option<Error> = None;

    for (k, (ch, inp)) in gs.channels.iter().zip(&inputs).enumerate() {
        let slice = &ch.slice;
        let phi = &slice.phi;
        let n_occ = phi.ncols();
        let eps_n_top = slice.eps[n_occ - 1];
        let first_extra = slice.eps_ex.first().copied();
        let gap = first_extra.map_or(f64::NAN, |e| (e - eps_n_top).as_f64());

        let delta = delta_matrix(&slice.eps, &inp.occ, &inp.deriv, &inp.dvm);
        let gm = build_gamma(&delta, &slice.eps, &inp.occ, &inp.dvm, &gs.smearing, gauge);
        let occv = occupied_variation(&gm, phi, &inp.d_eps, &inp.deriv, def);

        // b_n = -Q δV φ_n
        let mut b = -inp.dvphi.clone();
        let coef = phi.ad_mul(&b);
        b -= phi * coef;

        let (extra, setup) = match opts.method {
            Method::Schur => {
                let e = ExtraBands::new(&ch.channel, &slice.phi_ex)?;
                let s = e.setup_applies;
                (Some(e), s)
            }
            _ => (None, 0),
        };
        let shifts = shift_values(&slice.eps, first_extra);

        let solutions: Vec<Result<SternheimerSolution<T>>> = (0..n_occ)
            .into_par_iter()
            .map(|n| {
                let bn: CVec<T> = b.column(n).into_owned();
                match opts.method {
                    Method::Direct => solve_direct(&ch.channel, slice.eps[n], phi, &bn, opts),
                    Method::Schur => solve_schur(&ch.channel, slice.eps[n], phi, extra.as_ref().expect("built"), &bn, opts),
                    Method::Shifted => {
                        let g = gm.gamma.column(n).into_owned();
                        solve_shifted(&ch.channel, n, phi, &slice.eps, &shifts, &g, inp.occ[n], &bn, opts)
                    }
                }
            })
            .collect();

        let weight = ch.channel.weight();
        let mut dphi_q = CMat::zeros(phi.nrows(), n_occ);
        total += setup;
        for (n, sol) in solutions.into_iter().enumerate() {
            let sol = match sol {
                Ok(s) => s,
                Err(e) => {
                    failure.get_or_insert(e);
                    continue;
                }
            };
            reports.push(SolverReport {
                channel: Some(k),
                band: Some(n),
                method: opts.method,
                gauge,
                gap,
                iterations: sol.iterations,
                final_residual: sol.final_residual.as_f64(),
                h_applies: sol.h_applies,
            });
            total += sol.h_applies;

            let phi_n: CVec<T> = phi.column(n).into_owned();
            let full = match opts.method {
                Method::Shifted => {
                    let mut q = sol.dphi_q.clone();
                    let cf = phi.ad_mul(&q);
                    q -= phi * cf;
                    dphi_q.set_column(n, &(q * c(T::one() / inp.occ[n])));
                    sol.dphi_q
                }
                _ => {
                    dphi_q.set_column(n, &sol.dphi_q);
                    occv.w.column(n) + &sol.dphi_q * c(inp.occ[n])
                }
            };
            drho.accumulate_pair(&phi_n, &full, weight);
            drho.accumulate_abs2(&phi_n, weight * occv.df[n]);
        }
        channels.push(ChannelResponse {
            w: occv.w,
            df: occv.df,
            dphi_q,
            setup_applies: setup,
            degenerate_fallback: gm.degenerate_fallback,
        });
    }

    if let Some(e) = failure {
        return Err(Error::ResponseFailed {
            source: Box::new(e),
            reports,
        });
    }
    Ok(ResponseResult {
        drho,
        def,
        channels,
        reports,
        total_h_applies: total,
        method: opts.method,
        gauge,
        dyson_history: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DysonOptions {
    /// Damping `β` in `(0, 1]`.
    pub mixing: f64,
    /// Relative fixed-point tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DysonOptions {
    fn default() -> Self {
        Self {
            mixing: 0.5,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Damped fixed point `δρ ← (1-β)δρ + β χ0(δV0 + Kδρ)` from `δρ = χ0 δV0`,
/// stopped once `‖δρ - χ0(δV0 + Kδρ)‖ ≤ tol·‖χ0 δV0‖`.
pub fn solve_dyson<T: Real>(
    gs: &GroundState<T>,
    dv0: &LocalPotential<T>,
    kernel: &HartreeKernel,
    dyson: &DysonOptions,
    gauge: GaugeKind,
    opts: &SternheimerOptions<T>,
) -> Result<ResponseResult<T>> {
    if !(dyson.mixing > 0.0 && dyson.mixing <= 1.0) {
        return Err(Error::invalid(format!("mixing {} outside (0, 1]", dyson.mixing)));
    }
    let beta = T::lit(dyson.mixing);
    let first = apply_chi0(gs, dv0, gauge, opts)?;
    let scale = first.drho.norm();
    let mut applies = first.total_h_applies;
    let mut rho = first.drho;
    let mut history = Vec::new();

    for _ in 0..dyson.max_iter {
        let v = dv0.add_scaled(&kernel.apply(&rho)?, T::one());
        let mut y = apply_chi0(gs, &v, gauge, opts)?;
        applies += y.total_h_applies;
        let res = rho.sub(&y.drho).norm();
        history.push(res.as_f64());
        if res <= T::lit(dyson.tol) * scale {
            y.drho = rho;
            y.total_h_applies = applies;
            y.dyson_history = history;
            return Ok(y);
        }
        let mut next = rho.scaled(T::one() - beta);
        next.add_scaled(&y.drho, beta);
        rho = next;
    }
    Err(Error::NotConverged {
        what: "Dyson iteration".into(),
        iterations: dyson.max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
        partial: Box::new(crate::error::PartialState {
            iterate: rho
                .coefficients()
                .iter()
                .map(|z| num_complex::Complex64::new(z.re.as_f64(), z.im.as_f64()))
                .collect(),
            residuals: history,
        }),
    })
}
