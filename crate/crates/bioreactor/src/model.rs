//! The reactor as a hybrid model, its costs and its constraints.

use hgp_core::hybrid_dynamics::HybridModel;
use hgp_core::nmpc::{move_penalty, CostSpec, PathConstraints};
use hgp_core::{Matrix, Scalar};
use serde::{Deserialize, Serialize};

use crate::plant::{balances, BioreactorParams};

pub const STATE_NAMES: [&str; 4] = ["C_X", "C_N", "q", "FA"];
pub const CONTROL_NAMES: [&str; 2] = ["I0", "F_N"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Known balances with a GP for the light-limited growth rate `μ_m(I0, C_X)`.
    Hybrid,
    /// One GP per state on `(x, u)`: `x⁺ = q(x, u)`.
    NonHybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactorModel {
    pub params: BioreactorParams,
    pub architecture: Architecture,
}

impl HybridModel for ReactorModel {
    fn n_x(&self) -> usize {
        4
    }
    fn n_u(&self) -> usize {
        2
    }
    fn n_q(&self) -> usize {
        match self.architecture {
            Architecture::Hybrid => 1,
            Architecture::NonHybrid => 4,
        }
    }
    fn q_in_dim(&self, _: usize) -> usize {
        match self.architecture {
            Architecture::Hybrid => 2,
            Architecture::NonHybrid => 6,
        }
    }
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], q: &[S]) -> Vec<S> {
        match self.architecture {
            Architecture::Hybrid => balances(x, u, q[0], &self.params),
            Architecture::NonHybrid => q.to_vec(),
        }
    }
    fn q_in<S: Scalar>(&self, _: usize, x: &[S], u: &[S]) -> Vec<S> {
        match self.architecture {
            Architecture::Hybrid => vec![u[0], x[0]],
            Architecture::NonHybrid => x.iter().chain(u).copied().collect(),
        }
    }
}

/// `Δuᵀ R Δu` per step and `−FA_T` at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct ReactorCost {
    pub r: Matrix,
}

impl CostSpec for ReactorCost {
    fn stage<S: Scalar>(&self, _: &[S], u: &[S], u_prev: &[S]) -> S {
        move_penalty(&self.r, u, u_prev)
    }
    fn terminal<S: Scalar>(&self, x: &[S]) -> S {
        -x[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioConstraint {
    /// `q − r·C_X ≤ 0`.
    Quota,
    /// `FA − r·C_X ≤ 0` (product-to-biomass reading).
    Product,
}

/// g₁ = C_N − n_max at every step, g₂ = ratio constraint at every step, g₃ = C_N − n_final at T only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactorConstraints {
    pub nitrate_max: f64,
    pub ratio: f64,
    pub ratio_kind: RatioConstraint,
    pub nitrate_final: f64,
    pub horizon: usize,
}

impl PathConstraints for ReactorConstraints {
    fn n_g(&self) -> usize {
        3
    }
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let numerator = match self.ratio_kind {
            RatioConstraint::Quota => x[2],
            RatioConstraint::Product => x[3],
        };
        vec![x[1] - S::c(self.nitrate_max), numerator - S::c(self.ratio) * x[0], x[1] - S::c(self.nitrate_final)]
    }
    fn applies(&self, j: usize, k: usize) -> bool {
        j < 2 || k == self.horizon
    }
    fn names(&self) -> Vec<String> {
        vec!["g1".into(), "g2".into(), "g3".into()]
    }
}
