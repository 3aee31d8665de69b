//! Re-randomization designs for finite-population experiments.
//!
//! The crate covers the full path from covariates to an accepted treatment
//! assignment: finite-population moments ([`population`]), balance criteria
//! and their thresholds ([`criteria`]), the rejection sampler ([`sampler`]),
//! pilot-then-ReB pipelines ([`twostage`]), closed-form efficiency measures
//! ([`theory`]) and a simulation harness ([`harness`]).

pub mod criteria;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod population;
pub mod rng;
pub mod sampler;
pub mod special;
pub mod theory;
pub mod twostage;

pub use criteria::{accept, build_criterion, BalanceCriterion, CriterionKind, DesignInputs, McConfig, PcaSelection, PriorSpec};
pub use error::{Error, Result};
pub use population::{Assignment, Population};
pub use rng::RngStream;

/// Crate version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
