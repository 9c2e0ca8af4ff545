//! Rank-one anti-windup coordination for saturated resource-sharing networks.
//!
//! A network of `n` agents obeys
//!
//! ```text
//! x' = -x + B sat(u) + w
//! z' = x + beta * 1 1^T dz(u)
//! u  = -P x - R z
//! ```
//!
//! where `B` is a strictly row-dominant M-matrix, every agent runs a local PI
//! controller, and the scalar sum of all dead-zones is broadcast back to every
//! integrator. The crate provides:
//!
//! * [`model`]: domain types, `sat`/`dz`, and M-matrix validation.
//! * [`equilibrium`]: existence/uniqueness checks and the closed-form fair
//!   equilibrium.
//! * [`fairness_lp`]: an independent simplex-based oracle for
//!   `min ||x||_inf s.t. x = B u + w, -1 <= u <= 1`.
//! * [`simulate`]: adaptive Dormand–Prince integration of the coordinated and
//!   uncoordinated loops with an equilibrium-detection stopping rule.
//! * [`experiments`]: the seeded randomized convergence study and the
//!   district-heating comparison.
//! * [`io`]: configuration parsing and report/trajectory emission.

pub mod equilibrium;
pub mod error;
pub mod experiments;
pub mod fairness_lp;
pub mod io;
pub mod model;
mod simplex;
pub mod simulate;

pub use equilibrium::{
    candidate_equilibrium, equilibrium_report, existence_condition, maximizing_set,
    EquilibriumPoint, EquilibriumReport, EquilibriumTolerances, ExistenceStatus, MaximizerSet,
    Satisfaction,
};
pub use error::{Error, ExitCode};
pub use fairness_lp::{lp_feasible, min_infnorm, FairnessCertificate, Feasibility};
pub use model::{
    control_law, deadzone, saturate, validate_coupling, ClosedLoopState, ControllerGains,
    CouplingMatrix, Disturbance,
};
pub use simulate::{
    integrate, rhs_coordinated, rhs_uncoordinated, DisturbanceSchedule, LoopVariant,
    SimulationConfig, SimulationResult, StepControl, TrajectorySample,
};

pub use nalgebra::{DMatrix, DVector};
