//! Adversarially robust training of neural ODEs.
//!
//! A residual network is read as the explicit-Euler discretization of a
//! controlled dynamical system `x' = F(x, u(t))`. Robust training against
//! bounded input perturbations is posed as a minimax optimal-control problem
//! and solved with a shooting method derived from the maximum principle:
//! a forward sweep of the perturbed ensemble, a weighted terminal covector,
//! a backward adjoint sweep, and a proximally regularized Hamiltonian ascent
//! step per time node. Three schemes weight the perturbations of each data
//! point: uniform, tempered softmax (Gibbs), and worst-case.
//!
//! The [`verify`] module provides independent numerical checks (finite
//! differences, stationarity residuals, weight-support conditions) for
//! everything the solver computes analytically.

use std::path::PathBuf;

pub mod adjoint;
pub mod dynamics;
pub mod evaluation;
pub mod experiment;
pub mod shooting;
pub mod task;
pub mod verify;
pub mod weights;

/// Crate-wide error type. Shape mismatches are programming bugs and panic
/// instead; these variants cover data-dependent runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite {quantity} at time node {node}")]
    NonFinite { quantity: &'static str, node: usize },

    #[error("shooting iteration {iteration}: {source}")]
    Shooting {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(
        "dataset generation stalled: accepted {accepted} of {requested} points \
         after {attempts} draws (margin {margin} excludes too much of the unit square)"
    )]
    GenerationStalled {
        requested: usize,
        accepted: usize,
        attempts: usize,
        margin: f64,
    },

    #[error(
        "perturbation {perturbation} of point {point} crosses the class boundary \
         (budget {epsilon} incompatible with margin {margin})"
    )]
    LabelFlip {
        point: usize,
        perturbation: usize,
        epsilon: f64,
        margin: f64,
    },

    #[error("invalid weight matrix: {0}")]
    InvalidWeights(String),

    #[error("margin band contains no lattice points at resolution {resolution}, margin {margin}")]
    EmptyMarginBand { resolution: usize, margin: f64 },

    #[error("non-finite objective while probing control coordinate {coord} at time node {node}")]
    NonFiniteProbe { node: usize, coord: usize },

    #[error("{failed} verification check(s) failed")]
    VerificationFailed { failed: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Adapter for `map_err` that attaches the offending path.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

/// Named RNG streams so that one experiment seed never feeds the same
/// sequence to two different consumers.
#[derive(Debug, Clone, Copy)]
pub(crate) enum SeedStream {
    Dataset = 1,
    PerturbationPhase = 2,
    ControlInit = 3,
}

/// SplitMix64 finalizer over `base` xor a stream tag.
pub(crate) fn derive_seed(base: u64, stream: SeedStream) -> u64 {
    let mut z = base ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
