//! Finite-temperature density response on a periodic plane-wave model.
//!
//! The crate computes `δρ = χ0 δV` for a fixed (non self-consistent) one-dimensional
//! periodic Hamiltonian `H = -½Δ + V` discretised on plane waves, with smeared
//! occupations and any number of weighted channels sharing one Fermi level.
//!
//! The response is split into an occupied-occupied part, fixed by a gauge rule
//! for the coefficients `Γ_mn` ([`gauges`]), and an unoccupied-occupied part
//! obtained from the Sternheimer equation ([`sternheimer`]). The Sternheimer
//! equation can be solved directly, through a Schur complement on the extra
//! bands left over by the eigensolver, or in shifted form. Brute-force
//! references for all of it live in [`oracle`].
//!
//! Numerical code is generic over the scalar type through [`Real`]; the
//! aliases at the bottom of this file fix it to `f64`, which is what the
//! file formats and the command-line front-end use.

use std::fmt;

use nalgebra::RealField;
use num_traits::ToPrimitive;

pub mod adaptive;
pub mod bench;
pub mod density;
pub mod eigensolver;
pub mod error;
pub mod gauges;
pub mod groundstate;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod report;
pub mod response;
pub mod smearing;
pub mod sternheimer;
pub mod synth;

pub use error::{Error, Result};

/// Real scalar the numerical kernels are written against.
///
/// Everything nalgebra needs comes from `RealField`; `ToPrimitive` is used to
/// leave generic code for reporting and for the few special functions that are
/// only available in double precision.
pub trait Real: RealField + Copy + ToPrimitive + fmt::LowerExp + 'static {
    /// Literal conversion from `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize(n: usize) -> Self {
        Self::lit(n as f64)
    }

    /// Absolute value (sidesteps the `Signed`/`ComplexField` method clash).
    #[inline]
    fn mag(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub use num_complex::Complex;

pub type Basis = model::PlaneWaveBasis<f64>;
pub type Potential = model::LocalPotential<f64>;
pub type Hamiltonian = model::HamiltonianChannel<f64>;
pub type Smearing = smearing::SmearingScheme<f64>;
pub type Slice = groundstate::SpectrumSlice<f64>;
pub type GroundState = groundstate::GroundState<f64>;
pub type Density = density::Density<f64>;
pub type Gauge = gauges::GaugeMatrix<f64>;
pub type Response = response::ResponseResult<f64>;
