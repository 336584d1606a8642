//! Numerical laboratory for variational SPDEs with locally monotone coefficients.
//!
//! The crate is organised the way an experiment flows:
//!
//! * [`space`] realises the Gelfand triple `V ⊆ H ⊆ V*` on a uniform 1D grid,
//! * [`model`] provides drift/diffusion pairs `(A, B)` with hypothesis metadata,
//! * [`hypotheses`] audits a model against its declared structural inequalities,
//! * [`dynamics`] integrates skeleton, Galerkin and controlled stochastic equations,
//! * [`rate`] computes the rate function `I(f)` by adjoint-based optimisation,
//! * [`ldp`] runs Monte Carlo exceedance experiments and Gaussian oracles.
//!
//! All arithmetic is `f64`. Randomness flows through [`rng`], which splits one
//! master seed into independent per-sample streams so results do not depend on
//! how work is scheduled across threads.

pub mod dynamics;
pub mod error;
pub mod hypotheses;
pub mod ldp;
pub mod linalg;
pub mod model;
pub mod rate;
pub mod rng;
pub mod space;

pub use dynamics::{Control, SchemeOpts, StepDiagnostics, StopReason, StopRecord, TimeGrid, Trajectory};
pub use error::{Error, Result};
pub use hypotheses::{AuditReport, HypothesisId, Verdict};
pub use ldp::{ExceedanceEstimate, ExceedanceEvent, SlopeFit};
pub use model::{BuiltinModel, HypothesisProfile, Model, Regime};
pub use rate::{RateProblem, RateResult, RateStatus, RateTarget};
pub use space::{DomainKind, DualVector, SpaceDiscretization, StateVector};
