//! Occupied-occupied response coefficients.
//!
//! For occupied bands the variation of the density matrix only fixes
//! `Δ_mn = Γ_mn + conj(Γ_nm)`; each gauge rule picks one `Γ` satisfying this
//! constraint with `Γ_nn = 0`. `Γ_mn = ⟨φ_m, f_n δφ_n⟩` keeps the occupation
//! folded in, so `w_n = Σ_m Γ_mn φ_m` never divides by a small `f_n`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{c, CMat};
use crate::oracle::degeneracy_tolerance;
use crate::smearing::{fermi_dirac_unit, SmearingScheme};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaugeKind {
    Orthogonal,
    Simple,
    QuantumEspresso,
    Abinit,
    #[default]
    Minimal,
}

impl GaugeKind {
    pub const ALL: [GaugeKind; 5] = [
        GaugeKind::Orthogonal,
        GaugeKind::Simple,
        GaugeKind::QuantumEspresso,
        GaugeKind::Abinit,
        GaugeKind::Minimal,
    ];
}

impl fmt::Display for GaugeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GaugeKind::Orthogonal => "orth",
            GaugeKind::Simple => "simple",
            GaugeKind::QuantumEspresso => "qe",
            GaugeKind::Abinit => "abinit",
            GaugeKind::Minimal => "min",
        })
    }
}

impl FromStr for GaugeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "orth" | "orthogonal" => Ok(GaugeKind::Orthogonal),
            "simple" => Ok(GaugeKind::Simple),
            "qe" | "quantum-espresso" => Ok(GaugeKind::QuantumEspresso),
            "abinit" => Ok(GaugeKind::Abinit),
            "min" | "minimal" => Ok(GaugeKind::Minimal),
            other => Err(Error::invalid(format!("unknown gauge '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaugeMatrix<T: Real> {
    pub delta: CMat<T>,
    pub gamma: CMat<T>,
    pub kind: GaugeKind,
    /// Set when the orthogonal gauge met a degenerate pair and used `Δ/2` for it.
    pub degenerate_fallback: bool,
}

impl<T: Real> GaugeMatrix<T> {
    /// Largest `|Γ_mn + conj(Γ_nm) - Δ_mn|` over `m ≠ n`.
    pub fn constraint_defect(&self) -> T {
        let n = self.gamma.nrows();
        let mut worst = T::zero();
        for m in 0..n {
            for k in 0..n {
                if m != k {
                    let d = self.gamma[(m, k)] + self.gamma[(k, m)].conj() - self.delta[(m, k)];
                    worst = worst.max(d.norm_sqr().sqrt());
                }
            }
        }
        worst
    }
}

/// Per-channel inputs of the Fermi-level variation.
pub struct FermiTerms<'a, T> {
    pub d_eps: &'a [T],
    pub occ_deriv: &'a [T],
    pub weight: T,
}

/// `δε_F = Σ w Σ f'_n δε_n / Σ w Σ f'_n`, or 0 in the insulating limit.
pub fn delta_fermi_level<T: Real>(channels: &[FermiTerms<'_, T>]) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    let mut count = 0usize;
    for ch in channels {
        for (&de, &d) in ch.d_eps.iter().zip(ch.occ_deriv) {
            num += ch.weight * d * de;
            den += ch.weight * d;
        }
        count += ch.d_eps.len();
    }
    if den.mag() < T::lit(1e-12) * <T as Real>::from_usize(count.max(1)) {
        T::zero()
    } else {
        num / den
    }
}

/// `Γ` for the given rule. `dv[(m, n)] = ⟨φ_m, δV φ_n⟩` is only read by the
/// orthogonal gauge.
pub fn build_gamma<T: Real>(
    delta: &CMat<T>,
    eps: &[T],
    occ: &[T],
    dv: &CMat<T>,
    smearing: &SmearingScheme<T>,
    kind: GaugeKind,
) -> GaugeMatrix<T> {
    let n = eps.len();
    let half = T::lit(0.5);
    let dtol = degeneracy_tolerance(eps);
    let mut fallback = false;
    let mut gamma = CMat::zeros(n, n);
    for m in 0..n {
        for k in 0..n {
            if m == k {
                continue;
            }
            let d = delta[(m, k)];
            gamma[(m, k)] = match kind {
                GaugeKind::Orthogonal => {
                    let de = eps[k] - eps[m];
                    if de.mag() < dtol {
                        fallback = true;
                        d * c(half)
                    } else {
                        dv[(m, k)] * c(occ[k] / de)
                    }
                }
                GaugeKind::Simple => d * c(half),
                GaugeKind::QuantumEspresso => {
                    d * c(fermi_dirac_unit((eps[k] - eps[m]) / smearing.temperature()))
                }
                GaugeKind::Abinit => {
                    let w = if occ[k] > occ[m] {
                        T::one()
                    } else if occ[k] < occ[m] {
                        T::zero()
                    } else {
                        half
                    };
                    d * c(w)
                }
                GaugeKind::Minimal => {
                    let (a, b) = (occ[k] * occ[k], occ[m] * occ[m]);
                    d * c(a / (a + b))
                }
            };
        }
    }
    GaugeMatrix {
        delta: delta.clone(),
        gamma,
        kind,
        degenerate_fallback: fallback,
    }
}

/// Occupied part of the response of one channel.
#[derive(Debug, Clone)]
pub struct OccupiedVariation<T: Real> {
    /// Columns `w_n = Σ_{m≠n} Γ_mn φ_m`.
    pub w: CMat<T>,
    /// `δf_n = f'_n (δε_n - δε_F)`.
    pub df: Vec<T>,
    pub def: T,
}

pub fn occupied_variation<T: Real>(
    gauge: &GaugeMatrix<T>,
    phi: &CMat<T>,
    d_eps: &[T],
    occ_deriv: &[T],
    def: T,
) -> OccupiedVariation<T> {
    let w = phi * &gauge.gamma;
    let df = d_eps.iter().zip(occ_deriv).map(|(&e, &d)| d * (e - def)).collect();
    OccupiedVariation { w, df, def }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_hermitian;
    use crate::oracle::delta_matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        eps: Vec<f64>,
        occ: Vec<f64>,
        deriv: Vec<f64>,
        dv: CMat<f64>,
        sm: SmearingScheme<f64>,
    }

    fn instance(seed: u64, n: usize, t: f64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sm = SmearingScheme::fermi_dirac(t).unwrap();
        let mut eps: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0 * t..5.0 * t)).collect();
        eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let occ = eps.iter().map(|&e| sm.occupation(e, 0.0, 2.0)).collect();
        let deriv = eps.iter().map(|&e| sm.occupation_derivative(e, 0.0, 2.0)).collect();
        let dv = random_hermitian(&mut rng, n);
        Instance { eps, occ, deriv, dv, sm }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in GaugeKind::ALL {
            assert_eq!(k.to_string().parse::<GaugeKind>().unwrap(), k);
        }
        assert_eq!(GaugeKind::default(), GaugeKind::Minimal);
        assert!("nope".parse::<GaugeKind>().is_err());
    }

    #[test]
    fn fermi_shift_of_a_constant_is_the_constant() {
        let d = [-1.0, -0.3, -2.0];
        let e = [0.25; 3];
        let v = delta_fermi_level(&[FermiTerms { d_eps: &e, occ_deriv: &d, weight: 0.5 }]);
        assert!((v - 0.25f64).abs() < 1e-15);
        let tiny = [-1e-15; 3];
        assert_eq!(delta_fermi_level(&[FermiTerms { d_eps: &e, occ_deriv: &tiny, weight: 1.0 }]), 0.0);
    }

    #[test]
    fn fermi_shift_matches_compensated_reverse_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let de: Vec<Vec<f64>> = (0..3).map(|_| (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let d: Vec<Vec<f64>> = (0..3).map(|_| (0..40).map(|_| -rng.random_range(0.0..50.0)).collect()).collect();
        let w = [0.2, 0.3, 0.5];
        let terms: Vec<FermiTerms<'_, f64>> =
            (0..3).map(|i| FermiTerms { d_eps: &de[i], occ_deriv: &d[i], weight: w[i] }).collect();
        let got = delta_fermi_level(&terms);
        let kahan = |vals: Vec<f64>| {
            let (mut s, mut comp) = (0.0f64, 0.0f64);
            for v in vals {
                let y = v - comp;
                let t = s + y;
                comp = (t - s) - y;
                s = t;
            }
            s
        };
        let mut num = Vec::new();
        let mut den = Vec::new();
        for i in (0..3).rev() {
            for j in (0..40).rev() {
                num.push(w[i] * d[i][j] * de[i][j]);
                den.push(w[i] * d[i][j]);
            }
        }
        let expect = kahan(num) / kahan(den);
        assert!((got - expect).abs() < 1e-13 * expect.abs().max(1.0));
    }

    #[test]
    fn qe_and_minimal_halve_symmetric_pairs() {
        let sm = SmearingScheme::fermi_dirac(0.01).unwrap();
        let eps = [0.0, 0.0];
        let occ = [1.2, 1.2];
        let delta = CMat::from_fn(2, 2, |i, j| if i == j { c(0.0) } else { c(3.0) });
        for kind in [GaugeKind::QuantumEspresso, GaugeKind::Minimal, GaugeKind::Abinit] {
            let g = build_gamma(&delta, &eps, &occ, &delta, &sm, kind);
            assert!((g.gamma[(0, 1)] - c(1.5)).norm() < 1e-15);
        }
    }

    #[test]
    fn orthogonal_gauge_blows_up_near_degeneracy() {
        let sm = SmearingScheme::fermi_dirac(0.01).unwrap();
        let eps = [0.0, 1e-6];
        let occ = [1.5, 0.5];
        let dv = CMat::from_fn(2, 2, |_, _| c(1.0));
        let delta = delta_matrix(&eps, &occ, &[-1.0, -1.0], &dv);
        let g = build_gamma(&delta, &eps, &occ, &dv, &sm, GaugeKind::Orthogonal);
        // Γ_10 = f_0 δV_10/(ε_0 - ε_1)
        assert!((g.gamma[(1, 0)].norm() - 1.5e6f64).abs() < 1e-3);
        assert!(g.constraint_defect() < 1e-8 * 1e6);
        assert!(!g.degenerate_fallback);
    }

    #[test]
    fn orthogonal_gauge_flags_exact_degeneracy() {
        let sm = SmearingScheme::fermi_dirac(0.01).unwrap();
        let eps = [0.3, 0.3];
        let occ = [1.0, 1.0];
        let dv = CMat::from_fn(2, 2, |_, _| c(1.0));
        let delta = delta_matrix(&eps, &occ, &[-2.0, -2.0], &dv);
        let g = build_gamma(&delta, &eps, &occ, &dv, &sm, GaugeKind::Orthogonal);
        assert!(g.degenerate_fallback);
        assert!((g.gamma[(0, 1)] - c(-1.0)).norm() < 1e-15);
    }

    #[test]
    fn bound_on_a_thousand_pairs() {
        let t = 1e-2;
        let mut pairs = 0;
        for seed in 0..25 {
            let inst = instance(seed, 7, t);
            let delta = delta_matrix(&inst.eps, &inst.occ, &inst.deriv, &inst.dv);
            for kind in GaugeKind::ALL.into_iter().filter(|&k| k != GaugeKind::Orthogonal) {
                let g = build_gamma(&delta, &inst.eps, &inst.occ, &inst.dv, &inst.sm, kind);
                for m in 0..7 {
                    for k in 0..7 {
                        if m != k {
                            assert!(g.gamma[(m, k)].norm() <= inst.dv[(m, k)].norm() * 2.0 / (4.0 * t) * (1.0 + 1e-12));
                            pairs += 1;
                        }
                    }
                }
            }
        }
        assert!(pairs >= 1000);
    }

    #[test]
    fn minimal_gauge_minimizes_the_weighted_norm() {
        for seed in 0..50 {
            let inst = instance(100 + seed, 6, 5e-2);
            let delta = delta_matrix(&inst.eps, &inst.occ, &inst.deriv, &inst.dv);
            let cost = |g: &GaugeMatrix<f64>| {
                let mut s = 0.0;
                for m in 0..6 {
                    for k in 0..6 {
                        s += (g.gamma[(m, k)] / inst.occ[k]).norm_sqr();
                    }
                }
                s
            };
            let best = cost(&build_gamma(&delta, &inst.eps, &inst.occ, &inst.dv, &inst.sm, GaugeKind::Minimal));
            for kind in GaugeKind::ALL {
                let other = cost(&build_gamma(&delta, &inst.eps, &inst.occ, &inst.dv, &inst.sm, kind));
                assert!(best <= other * (1.0 + 1e-12), "{kind}");
            }
        }
    }

    proptest! {
        #[test]
        fn constraint_holds_for_every_kind(seed in 0u64..10_000, n in 2usize..9, logt in -3.0f64..-1.0) {
            let inst = instance(seed, n, 10f64.powf(logt));
            let delta = delta_matrix(&inst.eps, &inst.occ, &inst.deriv, &inst.dv);
            let scale = delta.iter().fold(1.0f64, |a, z| a.max(z.norm()));
            for kind in GaugeKind::ALL {
                let g = build_gamma(&delta, &inst.eps, &inst.occ, &inst.dv, &inst.sm, kind);
                let tol = if kind == GaugeKind::Orthogonal { 1e-10 } else { 1e-13 };
                prop_assert!(g.constraint_defect() <= tol * scale);
                for i in 0..n {
                    prop_assert_eq!(g.gamma[(i, i)], c(0.0));
                    if kind != GaugeKind::Orthogonal {
                        for j in 0..n {
                            prop_assert!(g.gamma[(i, j)].norm() <= delta[(i, j)].norm() * (1.0 + 1e-15));
                        }
                    }
                }
            }
        }

        #[test]
        fn delta_is_hermitian(seed in 0u64..10_000, n in 2usize..9) {
            let inst = instance(seed, n, 1e-2);
            let delta = delta_matrix(&inst.eps, &inst.occ, &inst.deriv, &inst.dv);
            prop_assert!((&delta - delta.adjoint()).norm() <= 1e-14 * delta.norm().max(1.0));
        }
    }
}
