//! Distributed model predictive control for a platoon of connected automated
//! vehicles following a human-driven leader.
//!
//! Each CAV solves a small quadratically constrained program per iteration and
//! only talks to its predecessor and follower. [`solvers`] holds the
//! Douglas-Rachford and three-operator schemes, [`stability`] the closed-loop
//! analysis of the unconstrained controller, and [`sim`] the receding-horizon
//! harness.

pub mod consensus;
pub mod decomposition;
pub mod dense;
pub mod error;
pub mod fixtures;
pub mod mpc;
pub mod platoon;
pub mod qcqp;
pub mod sim;
pub mod solvers;
pub mod stability;

pub use consensus::{AugmentedLayout, AugmentedVar, Fabric, VehicleGraph};
pub use decomposition::{decompose_pd, decompose_psd, stage_blocks, Decomposition, DeltaRule, StageBlocks};
pub use error::{Error, Result};
pub use mpc::{build_qcqp, QcqpProblem, WeightSchedule};
pub use platoon::{LeaderProfile, PlatoonConfig, PlatoonState};
pub use sim::{emit_results, run_scenario, scenario_builtin, ScenarioSpec, SimResult};
pub use solvers::{solve, solve_centralized, solve_with_warm_start, DistributedProblem, SolveReport, SolverParams, Variant};
pub use stability::{build_closed_loop, ClosedLoopModel, StabilityReport};
