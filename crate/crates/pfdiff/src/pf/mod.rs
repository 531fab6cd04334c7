//! Power-flow engine: physics residual, Newton–Raphson solver, dispatch,
//! constraint checks, and dataset manufacturing.

pub mod constraints;
pub mod dataset;
pub mod dispatch;
pub mod flows;
pub mod newton;
pub mod residual;

pub use constraints::{check_constraints, ConstraintCheck, ConstraintReport, EQUALITY_TOLERANCE};
pub use dataset::{
    generate_dataset, solve_with_slack_correction, Dataset, GenerationConfig, RejectionStats,
};
pub use dispatch::{dispatch_from_costs, sample_dispatch, DispatchScenario, PerturbRanges};
pub use flows::{line_flow_check, BranchFlow, LineFlowReport};
pub use newton::{solve_newton_raphson, Demands, Setpoints, SolveOptions, SolvedFlow};
pub use residual::{residual_gradient, residual_imbalance, ImbalanceResult};
