//! Indirect optimal control for hybrid systems whose resets drop dimension.
//!
//! A reset `Δ: S → M` that is a constant-rank submersion onto its image makes
//! the classical co-state jump condition either unsolvable or underdetermined.
//! This crate carries the pieces needed to still shoot for extremals:
//!
//! * [`problem`] describes the hybrid control system and builds the local
//!   geometry at a guard point (tangent frame, reset push-forward, fibers).
//! * [`flow`] evaluates the optimized Hamiltonian and integrates its flow up to
//!   the next guard crossing.
//! * [`jump`] implements the consistency residual, the pseudo-inverse lift of
//!   the co-state and the root-finding selection of the post-reset co-state.
//! * [`shooting`] glues arcs together for a fixed number of resets and solves
//!   the resulting boundary value problem.
//! * [`bouncing_ball`] is the bundled worked example with its closed forms.
//! * [`oracle`] is an independent direct-method cost verifier.

pub mod bouncing_ball;
pub mod error;
pub mod flow;
pub mod integrate;
pub mod jump;
pub mod linalg;
pub mod newton;
pub mod oracle;
pub mod output;
pub mod problem;
pub mod registry;
pub mod shooting;

pub use error::{Error, Result};
pub use flow::{CotangentState, ContinuousArc, FlowOptions, Termination};
pub use jump::{JumpCandidate, JumpOptions, JumpSolution};
pub use problem::{build_guard_frame, GuardFrame, HybridProblem};
pub use shooting::{HybridArc, ShootingOptions, ShootingSpec};
