//! Nominal NMPC on the GP mean model.

pub mod ocp;
pub mod problem;
pub mod qp;
pub mod sqp;

pub use problem::{move_penalty, ControlBox, CostSpec, PathConstraints};
pub use ocp::{decision_dim, solve_ocp, NmpcMemory, NmpcPolicy, OcpConfig, OcpProgram, OcpSolution, OcpStatus, SolverOptions};
