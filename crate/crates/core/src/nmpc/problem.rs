//! Problem description shared by the controller and the closed-loop simulator.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Stage and terminal costs.
pub trait CostSpec: Send + Sync {
    /// Cost of applying `u` at state `x` when the previously applied control was `u_prev`.
    fn stage<S: Scalar>(&self, x: &[S], u: &[S], u_prev: &[S]) -> S;
    fn terminal<S: Scalar>(&self, x: &[S]) -> S;
}

/// State path constraints `g_j(x) ≤ 0`, optionally restricted to some time indices.
pub trait PathConstraints: Send + Sync {
    fn n_g(&self) -> usize;
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S>;
    /// Whether `g_j` applies at time index `k ∈ 0..=T`.
    fn applies(&self, _j: usize, _k: usize) -> bool {
        true
    }
    fn names(&self) -> Vec<String> {
        (1..=self.n_g()).map(|j| format!("g{j}")).collect()
    }
}

/// `Δuᵀ R Δu` with `Δu = u − u_prev`.
pub fn move_penalty<S: Scalar>(r: &crate::num_kernel::Matrix<f64>, u: &[S], u_prev: &[S]) -> S {
    let du: Vec<S> = u.iter().zip(u_prev).map(|(&a, &b)| a - b).collect();
    let mut total = S::zero();
    for i in 0..du.len() {
        for j in 0..du.len() {
            let w = r[(i, j)];
            if w != 0.0 {
                total += S::c(w) * du[i] * du[j];
            }
        }
    }
    total
}

/// Hard box on the controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("control bounds", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::Config("control box needs finite lower ≤ upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn clamp(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.lower.iter().zip(&self.upper)).map(|(&v, (&l, &h))| v.clamp(l, h)).collect()
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.iter().zip(self.lower.iter().zip(&self.upper)).all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol)
    }
}
