//! Seeded random models used by tests, benches and the acceptance suite.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{build_basis, HamiltonianChannel, LocalPotential, PlaneWaveBasis};
use crate::smearing::SmearingScheme;
use crate::{Complex, Real};

/// Conjugate-symmetric potential on modes `1..=max_mode` (and a random constant)
/// with coefficients of magnitude up to `amplitude/m`.
pub fn random_potential<T: Real, R: Rng>(
    rng: &mut R,
    basis: &PlaneWaveBasis<T>,
    max_mode: i64,
    amplitude: f64,
) -> LocalPotential<T> {
    let top = max_mode.min(2 * basis.n_max()).max(0);
    let mut coeffs = vec![(0, Complex::new(T::lit(rng.random_range(-amplitude..amplitude)), T::zero()))];
    for m in 1..=top {
        let s = amplitude / m as f64;
        let z = Complex::new(T::lit(rng.random_range(-s..s)), T::lit(rng.random_range(-s..s)));
        coeffs.push((m, z));
        coeffs.push((-m, z.conj()));
    }
    LocalPotential::new(coeffs).expect("symmetric by construction")
}

/// A random response problem: channels, smearing, electron count and perturbation.
#[derive(Debug, Clone)]
pub struct RandomModel {
    pub channels: Vec<HamiltonianChannel<f64>>,
    pub smearing: SmearingScheme<f64>,
    pub n_el: f64,
    pub dv: LocalPotential<f64>,
}

/// Limits of [`random_model`].
#[derive(Debug, Clone, Copy)]
pub struct RandomModelSpec {
    pub dim: (usize, usize),
    pub temperature: (f64, f64),
    pub n_el: (f64, f64),
    pub max_channels: usize,
    pub dv_amplitude: f64,
}

impl Default for RandomModelSpec {
    fn default() -> Self {
        Self {
            dim: (32, 200),
            temperature: (1e-3, 1e-1),
            n_el: (2.0, 10.0),
            max_channels: 2,
            dv_amplitude: 0.1,
        }
    }
}

/// Model with basis size in `spec.dim`, log-uniform temperature, one or more
/// equally weighted channels sharing a basis.
pub fn random_model(seed: u64, spec: &RandomModelSpec) -> RandomModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_max_lo = spec.dim.0.div_ceil(2).max(1);
    let n_max_hi = ((spec.dim.1 - 1) / 2).max(n_max_lo);
    let n_max = rng.random_range(n_max_lo..=n_max_hi);
    let l: f64 = rng.random_range(6.0..14.0);
    let g = 2.0 * std::f64::consts::PI * (n_max as f64 + 0.5) / l;
    let basis = build_basis(l, 0.5 * g * g).expect("positive inputs");

    let t = (rng.random_range(spec.temperature.0.ln()..=spec.temperature.1.ln())).exp();
    let smearing = SmearingScheme::fermi_dirac(t).expect("positive temperature");
    let n_el = rng.random_range(spec.n_el.0..=spec.n_el.1);
    let n_channels = rng.random_range(1..=spec.max_channels.max(1));
    let base = random_potential(&mut rng, &basis, 6, 1.0);
    let channels = (0..n_channels)
        .map(|_| {
            let v = base.add_scaled(&random_potential(&mut rng, &basis, 3, 0.2), 1.0);
            HamiltonianChannel::new(basis.clone(), v, 1.0 / n_channels as f64, 2.0).expect("valid channel")
        })
        .collect();
    let dv = random_potential(&mut rng, &basis, 4, spec.dv_amplitude);
    RandomModel {
        channels,
        smearing,
        n_el,
        dv,
    }
}

/// Near-free-electron metal with about twenty occupied bands and a
/// perturbation spread over many modes, so that CG iteration counts track the
/// conditioning rather than a small Krylov space.
pub fn metallic_toy(seed: u64) -> RandomModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = build_basis(40.0, 100.0).expect("positive inputs");
    let v = LocalPotential::cosine(1, -3.0).add_scaled(&random_potential(&mut rng, &basis, 4, 0.9), 1.0);
    let dv = random_potential(&mut rng, &basis, 80, 0.1);
    let channel = HamiltonianChannel::new(basis, v, 1.0, 2.0).expect("valid channel");
    RandomModel {
        channels: vec![channel],
        smearing: SmearingScheme::fermi_dirac(0.01).expect("positive temperature"),
        n_el: 41.0,
        dv,
    }
}
