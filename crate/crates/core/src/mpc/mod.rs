//! Belief-weighted stochastic multiple-shooting planner for force reference
//! and impedance.

mod config;
pub mod costs;
pub mod ipm;
mod problem;
mod solve;

pub use config::{ChanceConfig, DisturbanceCostConfig, ErgonomicConfig, ForceRefTarget, ImpedanceLimits, MpcConfig, WellDampedConfig};
pub use costs::{
    chance_constraint_residual, chance_kappa, chance_satisfaction_probability, ergonomic_cost, h2_disturbance_cost,
    h2_disturbance_cost_grad, lyapunov_solve, stage_cost, well_damped_residual, CostWeights,
};
pub use ipm::{solve_nlp, IpmOptions, IpmResult, Nlp, NlpEval, SolveStatus};
pub use problem::{build_problem, DecisionLayout, MpcProblem};
pub use solve::{decode_solution, solve, ConstraintActivity, MpcSolution, SolutionAudit};
