//! Engineered small-gap model and the gap-sweep benchmark.
//!
//! The background potential only has modes that are multiples of 3, so the
//! Bloch-like states with `n ≡ 1` and `n ≡ 2 (mod 3)` come in exactly
//! degenerate pairs. A tuning term `cosine(1, a)` couples the two members of
//! the pair at `ε_N`, opening `ε_{N+1} - ε_N` continuously from zero. The
//! Fermi level is pinned `2T` above `ε_N`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gauges::GaugeKind;
use crate::groundstate::{prepare_groundstate, BandPolicy, GroundState, GroundStateOptions};
use crate::model::{build_basis, HamiltonianChannel, LocalPotential};
use crate::oracle::full_spectrum;
use crate::report::SolverReport;
use crate::response::{apply_chi0, ResponseResult};
use crate::smearing::{SmearingKind, SmearingScheme};
use crate::sternheimer::{Method, SternheimerOptions};
use crate::synth::random_potential;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapModelParams {
    /// Cell length in units of `2π`.
    pub cell_scale: f64,
    pub ecut: f64,
    /// Strength `B` of `cosine(3, -B) + cosine(6, B/2) + cosine(9, -3B/10)`.
    pub background: f64,
    /// `N`; bands `N` and `N + 1` must be degenerate without the tuning term.
    pub occupied: usize,
    pub temperature: f64,
    pub smearing: SmearingKind,
    pub dv_amplitude: f64,
    pub dv_max_mode: i64,
    pub seed: u64,
}

impl Default for GapModelParams {
    fn default() -> Self {
        Self {
            cell_scale: 1.25,
            ecut: 1152.0,
            background: 8.0,
            occupied: 10,
            temperature: 1e-4,
            smearing: SmearingKind::Gaussian,
            dv_amplitude: 0.1,
            dv_max_mode: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GapModel {
    pub channel: HamiltonianChannel<f64>,
    pub smearing: SmearingScheme<f64>,
    pub n_el: f64,
    pub dv: LocalPotential<f64>,
    /// Achieved `ε_{N+1} - ε_N` (never above the requested gap).
    pub gap: f64,
    pub amplitude: f64,
    pub occupied: usize,
}

impl GapModel {
    /// `N_conv = N + 3` converged bands and no unconverged extras, so that
    /// `Φ̃` holds the three converged bands above `ε_N`.
    pub fn policy(&self) -> BandPolicy {
        BandPolicy {
            n_conv: Some(self.occupied + 3),
            n_ex: 0,
            guard: 2,
            auto_grow: false,
        }
    }

    pub fn groundstate(&self, seed: u64) -> Result<GroundState<f64>> {
        let opts = GroundStateOptions {
            policy: self.policy(),
            seed,
            ..Default::default()
        };
        prepare_groundstate(vec![self.channel.clone()], self.smearing, self.n_el, &opts)
    }
}

fn gap_channel(p: &GapModelParams, a: f64) -> Result<HamiltonianChannel<f64>> {
    let basis = build_basis(2.0 * std::f64::consts::PI * p.cell_scale, p.ecut)?;
    let b = p.background;
    let v = [(3, -b), (6, 0.5 * b), (9, -0.3 * b), (1, a)]
        .iter()
        .fold(LocalPotential::zero(), |acc, &(m, c)| acc.add_scaled(&LocalPotential::cosine(m, c), 1.0));
    HamiltonianChannel::new(basis, v, 1.0, 2.0)
}

fn gap_of(p: &GapModelParams, a: f64) -> Result<f64> {
    let s = full_spectrum(&gap_channel(p, a)?);
    let n = p.occupied;
    Ok(s.values[n] - s.values[n - 1])
}

/// Tunes `a` by bisection so that `ε_{N+1} - ε_N` lands just below `gap`.
pub fn gap_model(p: &GapModelParams, gap: f64) -> Result<GapModel> {
    if !(gap > 0.0) {
        return Err(Error::invalid("gap must be positive"));
    }
    let n = p.occupied;
    let dim = build_basis(2.0 * std::f64::consts::PI * p.cell_scale, p.ecut)?.len();
    if n == 0 || n + 4 > dim {
        return Err(Error::invalid(format!("occupied = {n} does not fit a basis of size {dim}")));
    }
    // Margin so that Ritz values cannot land above the requested gap.
    let target = gap * (1.0 - 1e-8);
    if gap_of(p, 0.0)? > target {
        return Err(Error::Infeasible(format!(
            "bands {n} and {} are not degenerate without the tuning term",
            n + 1
        )));
    }
    let (mut lo, mut hi) = (0.0, 1e-3);
    while gap_of(p, hi)? < target {
        lo = hi;
        hi *= 2.0;
        if hi > 100.0 {
            return Err(Error::Infeasible(format!("gap {gap:e} is not reachable")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap_of(p, mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let channel = gap_channel(p, lo)?;
    let spec = full_spectrum(&channel);
    let smearing = SmearingScheme::new(p.smearing, p.temperature)?;
    let fermi = spec.values[n - 1] + 2.0 * p.temperature;
    let n_el = spec.values.iter().map(|&e| smearing.occupation(e, fermi, 2.0)).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let dv = random_potential(&mut rng, channel.basis(), p.dv_max_mode, p.dv_amplitude);
    Ok(GapModel {
        gap: spec.values[n] - spec.values[n - 1],
        channel,
        smearing,
        n_el,
        dv,
        amplitude: lo,
        occupied: n,
    })
}

/// One `(gap, method)` point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub requested_gap: f64,
    pub gap: f64,
    pub method: Method,
    /// Iterations of the `n = N` solve.
    pub top_iterations: usize,
    pub total_iterations: usize,
    pub total_h_applies: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFailure {
    pub requested_gap: f64,
    pub method: Option<Method>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct BenchResult {
    pub points: Vec<BenchPoint>,
    /// Per-band rows, with a totals row after each `(gap, method)` block.
    pub rows: Vec<SolverReport>,
    pub failures: Vec<BenchFailure>,
}

impl BenchResult {
    pub fn point(&self, requested_gap: f64, method: Method) -> Option<&BenchPoint> {
        self.points
            .iter()
            .find(|p| p.requested_gap == requested_gap && p.method == method)
    }
}

/// Runs every method on one shared ground state per gap. Failures are
/// recorded per point and the sweep continues.
pub fn run_gap_sweep(
    p: &GapModelParams,
    gaps: &[f64],
    methods: &[Method],
    gauge: GaugeKind,
    opts: &SternheimerOptions<f64>,
) -> BenchResult {
    let mut out = BenchResult::default();
    for &g in gaps {
        let built = gap_model(p, g).and_then(|m| m.groundstate(p.seed).map(|gs| (m.dv, gs)));
        let top = p.occupied - 1;
        let (dv, gs) = match built {
            Ok(x) => x,
            Err(e) => {
                out.failures.push(BenchFailure {
                    requested_gap: g,
                    method: None,
                    message: e.to_string(),
                });
                continue;
            }
        };
        for &method in methods {
            let o = SternheimerOptions { method, ..*opts };
            match apply_chi0(&gs, &dv, gauge, &o) {
                Ok(r) => record(&mut out, g, top, &r),
                Err(e) => {
                    if let Error::ResponseFailed { reports, .. } = &e {
                        out.rows.extend(reports.iter().cloned());
                    }
                    out.failures.push(BenchFailure {
                        requested_gap: g,
                        method: Some(method),
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    out
}

fn record(out: &mut BenchResult, requested_gap: f64, top: usize, r: &ResponseResult<f64>) {
    let rows = r.reports_with_totals();
    let total = rows.iter().find(|x| x.is_total()).expect("totals row");
    out.points.push(BenchPoint {
        requested_gap,
        gap: total.gap,
        method: r.method,
        top_iterations: r.iterations(0, top).unwrap_or(0),
        total_iterations: total.iterations,
        total_h_applies: total.h_applies,
    });
    out.rows.extend(rows);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GapModelParams {
        GapModelParams {
            ecut: 300.0,
            ..Default::default()
        }
    }

    #[test]
    fn bisection_hits_the_requested_gap() {
        for g in [1.0, 1e-2, 1e-3] {
            let m = gap_model(&small(), g).unwrap();
            assert!(m.gap <= g && m.gap > g * (1.0 - 2e-8), "{} vs {g}", m.gap);
        }
    }

    #[test]
    fn engineered_model_keeps_n_occupied_bands() {
        let m = gap_model(&small(), 1e-3).unwrap();
        let gs = m.groundstate(0).unwrap();
        let s = &gs.channels[0].slice;
        assert_eq!(s.n_occ(), m.occupied);
        assert_eq!(s.n_ex(), 3);
        assert!(s.eps_ex[2] - s.eps[m.occupied - 1] >= 0.5);
        assert!((gs.total_charge() - m.n_el).abs() < 1e-10);
    }

    #[test]
    fn unreachable_gap_is_infeasible() {
        assert!(matches!(gap_model(&small(), 1e3), Err(Error::Infeasible(_))));
        let odd = GapModelParams { occupied: 11, ..small() };
        assert!(matches!(gap_model(&odd, 1e-3), Err(Error::Infeasible(_))));
        assert!(gap_model(&small(), 0.0).is_err());
    }
}
