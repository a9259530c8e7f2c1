//! Ground-state data for response calculations: occupied and extra bands per
//! channel, occupations and the shared Fermi level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigensolver::{lobpcg, plane_wave_guess, EigenOptions};
use crate::linalg::{c, random_matrix, CMat};
use crate::model::HamiltonianChannel;
use crate::smearing::{solve_fermi_level, total_charge, LevelSet, SmearingScheme};
use crate::{Error, Real, Result};

/// Occupation threshold below which a band is not treated as occupied.
pub const OCCUPATION_THRESHOLD: f64 = 1e-8;

/// Relative tolerance for keeping a degenerate cluster together at the end of the slice.
pub const CLUSTER_TOL: f64 = 1e-10;

/// Bands of one channel: `N` occupied bands `Φ` followed by `N_ex` extra bands `Φ̃`.
#[derive(Debug, Clone)]
pub struct SpectrumSlice<T: Real> {
    pub phi: CMat<T>,
    pub eps: Vec<T>,
    pub phi_ex: CMat<T>,
    pub eps_ex: Vec<T>,
    /// `‖Hφ - εφ‖` for the `N + N_ex` bands in order.
    pub res_norms: Vec<T>,
    pub converged: Vec<bool>,
}

impl<T: Real> SpectrumSlice<T> {
    pub fn n_occ(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_ex(&self) -> usize {
        self.phi_ex.ncols()
    }

    /// `[Φ, Φ̃]`.
    pub fn all_vectors(&self) -> CMat<T> {
        crate::linalg::hcat(&[&self.phi, &self.phi_ex])
    }

    pub fn all_values(&self) -> Vec<T> {
        self.eps.iter().chain(&self.eps_ex).copied().collect()
    }

    /// Max-norm of `[Φ Φ̃]ᴴ[Φ Φ̃] - I`.
    pub fn orthonormality_defect(&self) -> T {
        crate::linalg::orthonormality_defect(&self.all_vectors())
    }

    /// Largest off-diagonal `|Φ̃ᴴHΦ̃|` relative to the spread of `[ε, ε̃]` (uncounted dense product).
    pub fn ritz_offdiagonal(&self, channel: &HamiltonianChannel<T>) -> T {
        let x = self.all_vectors();
        let m = x.ad_mul(&(channel.dense() * &x));
        let vals = self.all_values();
        let spread = vals
            .iter()
            .fold(T::zero(), |a, &v| a.max(v.mag()))
            .max(T::one());
        let mut worst = T::zero();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if i != j {
                    worst = worst.max(m[(i, j)].norm_sqr().sqrt());
                }
            }
        }
        worst / spread
    }

    /// Splits ordered Ritz pairs into `n` occupied bands and the remainder.
    fn split_at(all: &CMat<T>, vals: &[T], n: usize, res: Vec<T>, conv: Vec<bool>) -> Self {
        let total = all.ncols();
        Self {
            phi: all.columns(0, n).into_owned(),
            eps: vals[..n].to_vec(),
            phi_ex: all.columns(n, total - n).into_owned(),
            eps_ex: vals[n..].to_vec(),
            res_norms: res,
            converged: conv,
        }
    }
}

/// Band counts applied uniformly to every channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPolicy {
    /// Converged bands; `None` means `ceil(1.2·n_el/f_max)`.
    pub n_conv: Option<usize>,
    pub n_ex: usize,
    /// Extra unreported block vectors that speed up convergence of the last bands.
    pub guard: usize,
    /// Enlarge `n_conv` until the last converged band is below the occupation threshold.
    pub auto_grow: bool,
}

impl Default for BandPolicy {
    fn default() -> Self {
        Self {
            n_conv: None,
            n_ex: 3,
            guard: 2,
            auto_grow: true,
        }
    }
}

impl BandPolicy {
    pub fn n_conv_for<T: Real>(&self, n_el: T, f_max: T) -> usize {
        self.n_conv.unwrap_or_else(|| {
            let v = (T::lit(1.2) * n_el / f_max).as_f64().ceil();
            (v as usize).max(1)
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroundStateOptions<T> {
    pub policy: BandPolicy,
    pub eigen: EigenOptions<T>,
    pub threshold: T,
    pub seed: u64,
}

impl<T: Real> Default for GroundStateOptions<T> {
    fn default() -> Self {
        Self {
            policy: BandPolicy::default(),
            eigen: EigenOptions::default(),
            threshold: T::lit(OCCUPATION_THRESHOLD),
            seed: 0,
        }
    }
}

/// One channel of a prepared ground state.
#[derive(Debug, Clone)]
pub struct ChannelState<T: Real> {
    pub channel: HamiltonianChannel<T>,
    pub slice: SpectrumSlice<T>,
    /// Converged bands entering the Fermi solve (`N ≤ n_conv ≤ N + N_ex`).
    pub n_conv: usize,
    /// H applications spent by the eigensolver.
    pub eig_applies: u64,
}

#[derive(Debug, Clone)]
pub struct GroundState<T: Real> {
    pub channels: Vec<ChannelState<T>>,
    pub smearing: SmearingScheme<T>,
    pub fermi_level: T,
    pub n_el: T,
    pub threshold: T,
    pub policy: BandPolicy,
    pub seed: u64,
}

impl<T: Real> ChannelState<T> {
    /// `f_n` of the occupied bands.
    pub fn occupations(&self, smearing: &SmearingScheme<T>, fermi: T) -> Vec<T> {
        let f_max = self.channel.f_max();
        self.slice
            .eps
            .iter()
            .map(|&e| smearing.occupation(e, fermi, f_max))
            .collect()
    }

    /// `f'_n` of the occupied bands.
    pub fn occupation_derivatives(&self, smearing: &SmearingScheme<T>, fermi: T) -> Vec<T> {
        let f_max = self.channel.f_max();
        self.slice
            .eps
            .iter()
            .map(|&e| smearing.occupation_derivative(e, fermi, f_max))
            .collect()
    }

    /// Energies of the converged bands (the ones the Fermi level is solved over).
    pub fn converged_values(&self) -> Vec<T> {
        self.slice.all_values()[..self.n_conv].to_vec()
    }
}

impl<T: Real> GroundState<T> {
    pub fn occupations(&self, channel: usize) -> Vec<T> {
        self.channels[channel].occupations(&self.smearing, self.fermi_level)
    }

    pub fn occupation_derivatives(&self, channel: usize) -> Vec<T> {
        self.channels[channel].occupation_derivatives(&self.smearing, self.fermi_level)
    }

    /// `Σ weight·Σ f_n` over the converged bands.
    pub fn total_charge(&self) -> T {
        let vals: Vec<Vec<T>> = self.channels.iter().map(|c| c.converged_values()).collect();
        let sets: Vec<LevelSet<'_, T>> = self
            .channels
            .iter()
            .zip(&vals)
            .map(|(c, v)| LevelSet {
                eigenvalues: v,
                weight: c.channel.weight(),
                f_max: c.channel.f_max(),
            })
            .collect();
        total_charge(&sets, &self.smearing, self.fermi_level)
    }

    /// Ground-state density `Σ weight·Σ f_n |φ_n|²` over the occupied bands.
    pub fn density(&self) -> crate::density::Density<T> {
        let mut rho = crate::density::Density::zeros(self.channels[0].channel.basis());
        for (k, ch) in self.channels.iter().enumerate() {
            let f = self.occupations(k);
            for (n, &fn_) in f.iter().enumerate() {
                rho.accumulate_abs2(&ch.slice.phi.column(n).into_owned(), ch.channel.weight() * fn_);
            }
        }
        rho
    }
}

/// Eigenpairs of the `n_conv + n_ex` lowest bands; the first `n_conv` are converged
/// to `opts.tol`. The returned slice holds the converged bands in `Φ` and the rest
/// in `Φ̃`. A degenerate cluster cut by the block end is kept whole when the guard
/// vectors resolve it.
pub fn block_eigensolve<T: Real>(
    channel: &HamiltonianChannel<T>,
    n_conv: usize,
    n_ex: usize,
    guard: usize,
    opts: &EigenOptions<T>,
    seed: u64,
) -> Result<SpectrumSlice<T>> {
    let dim = channel.dim();
    let wanted = n_conv + n_ex;
    if n_conv == 0 || wanted > dim {
        return Err(Error::invalid(format!(
            "{n_conv} converged + {n_ex} extra bands requested in dimension {dim}"
        )));
    }
    let k = (wanted + guard).min(dim);
    let mut x0 = plane_wave_guess(channel, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: CMat<T> = random_matrix(&mut rng, dim, k);
    x0 += noise * c(T::lit(1e-3));
    let empty = CMat::zeros(dim, 0);
    let out = lobpcg(channel, &x0, &empty, n_conv, opts)?;

    let mut keep = wanted;
    let scale = out.values.iter().fold(T::one(), |a, &v| a.max(v.mag()));
    while keep < k && (out.values[keep] - out.values[keep - 1]).mag() <= T::lit(CLUSTER_TOL) * scale {
        keep += 1;
    }
    let vectors = out.vectors.columns(0, keep).into_owned();
    let values = out.values[..keep].to_vec();
    let res = out.residual_norms[..keep].to_vec();
    let conv = res.iter().map(|&r| r <= opts.tol).collect();
    Ok(SpectrumSlice::split_at(&vectors, &values, n_conv, res, conv))
}

/// Eigensolve every channel, solve for the shared Fermi level over the converged
/// bands and split each slice at the occupation threshold.
pub fn prepare_groundstate<T: Real>(
    channels: Vec<HamiltonianChannel<T>>,
    smearing: SmearingScheme<T>,
    n_el: T,
    opts: &GroundStateOptions<T>,
) -> Result<GroundState<T>> {
    if channels.is_empty() {
        return Err(Error::invalid("no channels"));
    }
    let dim0 = channels[0].dim();
    if channels.iter().any(|c| c.dim() != dim0) {
        return Err(Error::invalid("channels must share one basis size"));
    }
    let policy = opts.policy;
    let mut n_conv: Vec<usize> = channels
        .iter()
        .map(|c| policy.n_conv_for(n_el, c.f_max()).min(c.dim()))
        .collect();

    loop {
        let slices: Vec<Result<(SpectrumSlice<T>, u64)>> = channels
            .par_iter()
            .zip(n_conv.par_iter())
            .enumerate()
            .map(|(i, (ch, &nc))| {
                let before = ch.apply_count();
                let n_ex = policy.n_ex.min(ch.dim() - nc);
                let s = block_eigensolve(ch, nc, n_ex, policy.guard, &opts.eigen, opts.seed.wrapping_add(i as u64))?;
                Ok((s, ch.apply_count() - before))
            })
            .collect();
        let slices: Vec<(SpectrumSlice<T>, u64)> = slices.into_iter().collect::<Result<_>>()?;

        let sets: Vec<LevelSet<'_, T>> = slices
            .iter()
            .zip(&channels)
            .map(|((s, _), ch)| LevelSet {
                eigenvalues: &s.eps,
                weight: ch.weight(),
                f_max: ch.f_max(),
            })
            .collect();
        let fermi = solve_fermi_level(&sets, &smearing, n_el)?;

        // Grow the converged block if its top band is still occupied.
        let mut grew = false;
        if policy.auto_grow {
            for ((s, _), (ch, nc)) in slices.iter().zip(channels.iter().zip(n_conv.iter_mut())) {
                let top = *s.eps.last().expect("n_conv >= 1");
                if smearing.occupation(top, fermi, ch.f_max()) >= opts.threshold && *nc < ch.dim() {
                    *nc = (*nc + (*nc / 5).max(2)).min(ch.dim());
                    grew = true;
                }
            }
        }
        if grew {
            continue;
        }

        let mut states = Vec::with_capacity(channels.len());
        for ((s, applies), ch) in slices.into_iter().zip(channels) {
            let nc = s.eps.len();
            let n_occ = s
                .eps
                .iter()
                .take_while(|&&e| smearing.occupation(e, fermi, ch.f_max()) >= opts.threshold)
                .count();
            if n_occ == 0 {
                return Err(Error::Infeasible("a channel has no band above the occupation threshold".into()));
            }
            let all = s.all_vectors();
            let vals = s.all_values();
            let slice = SpectrumSlice::split_at(&all, &vals, n_occ, s.res_norms, s.converged);
            states.push(ChannelState {
                channel: ch,
                slice,
                n_conv: nc,
                eig_applies: applies,
            });
        }
        return Ok(GroundState {
            channels: states,
            smearing,
            fermi_level: fermi,
            n_el,
            threshold: opts.threshold,
            policy,
            seed: opts.seed,
        });
    }
}
