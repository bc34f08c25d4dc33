//! Numerical toolkit for the linearised Vlasov-Poisson-Fokker-Planck equation in one
//! space and one velocity dimension: equilibria, a conservative splitting solver,
//! Lyapunov functionals, computable decay-rate certificates and empirical probes.
//!
//! Everything is generic over the scalar type (see [`Real`]); the aliases at the crate
//! root fix it to `f64`.

pub mod certificate;
pub mod error;
pub mod evolution;
pub mod functionals;
pub mod grid;
pub mod linalg;
pub mod poisson;
pub mod potential;
pub mod probes;
pub mod scalar;
pub mod steady_state;

pub use error::{Error, Result};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use scalar::Real;

pub type PhaseGrid = grid::PhaseGrid<f64>;
pub type Field = grid::Field<f64>;
pub type XField = grid::XField<f64>;
pub type VField = grid::VField<f64>;
pub type PhysParams = potential::PhysParams<f64>;
pub type PotentialSpec = potential::PotentialSpec<f64>;
pub type SteadyState = steady_state::SteadyState<f64>;
pub type ConstantsReport = certificate::ConstantsReport<f64>;
pub type CertificateReport = certificate::CertificateReport<f64>;
pub type TimeSeries = probes::TimeSeries<f64>;
