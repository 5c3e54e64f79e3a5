//! Balance equations of the microalgae FAME semi-batch reactor.
//!
//! States `[C_X, C_N, q, FA]`, controls `[I0, F_N]`.

use std::sync::OnceLock;

use hgp_core::num_kernel::GaussLegendre;
use hgp_core::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BioreactorParams {
    pub mu_max: f64,
    pub mu_d: f64,
    pub k_q: f64,
    pub mu_n: f64,
    pub k_n: f64,
    pub k_s: f64,
    pub k_i: f64,
    pub alpha_p: f64,
    pub theta_p: f64,
    pub gamma_p: f64,
    pub eps_p: f64,
    pub beta_p: f64,
    /// Reactor width (m).
    pub width: f64,
    // carried along with the rest of the table; the balances do not use them
    pub tau_p: f64,
    pub delta_p: f64,
    pub phi_p: f64,
}

impl Default for BioreactorParams {
    fn default() -> Self {
        Self {
            mu_max: 0.359,
            mu_d: 0.004,
            k_q: 1.963,
            mu_n: 2.692,
            k_n: 0.8,
            k_s: 91.2,
            k_i: 100.0,
            alpha_p: 196.4,
            theta_p: 6.691,
            gamma_p: 7530.0,
            eps_p: 0.01,
            beta_p: 0.0,
            width: 0.0044,
            tau_p: 1.376,
            delta_p: 9.904,
            phi_p: 16.89,
        }
    }
}

impl BioreactorParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("mu_max", self.mu_max),
            ("mu_d", self.mu_d),
            ("k_q", self.k_q),
            ("mu_n", self.mu_n),
            ("k_n", self.k_n),
            ("k_s", self.k_s),
            ("k_i", self.k_i),
            ("alpha_p", self.alpha_p),
            ("theta_p", self.theta_p),
            ("gamma_p", self.gamma_p),
            ("eps_p", self.eps_p),
            ("width", self.width),
            ("tau_p", self.tau_p),
            ("delta_p", self.delta_p),
            ("phi_p", self.phi_p),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(format!("plant parameter {name} must be positive"));
        }
        if !(self.beta_p >= 0.0) {
            return Err("plant parameter beta_p must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("nitrogen quota {0} is at the singularity q = 0")]
    QuotaSingularity(f64),
}

pub const DEFAULT_LIGHT_ORDER: usize = 16;

fn default_rule() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(DEFAULT_LIGHT_ORDER))
}

/// Depth-averaged growth rate `μ_m(I0, C_X)` with the default rule.
pub fn light_quadrature<S: Scalar>(i0: S, c_x: S, p: &BioreactorParams) -> S {
    light_quadrature_with(default_rule(), i0, c_x, p)
}

/// `(μ_M/L) ∫₀ᴸ I/(I + k_s + I²/k_i) dz` with `I = I0·exp(−(α′C_X + β′) z)`.
pub fn light_quadrature_with<S: Scalar>(rule: &GaussLegendre, i0: S, c_x: S, p: &BioreactorParams) -> S {
    let att = S::c(p.alpha_p) * c_x + S::c(p.beta_p);
    let mut acc = S::zero();
    for (z, w) in rule.mapped(0.0, p.width) {
        let i = i0 * (-att * S::c(z)).exp();
        acc += S::c(w) * i / (i + S::c(p.k_s) + i * i / S::c(p.k_i));
    }
    S::c(p.mu_max / p.width) * acc
}

/// Right-hand side with a given growth rate `mu_m`.
pub fn balances<S: Scalar>(x: &[S], u: &[S], mu_m: S, p: &BioreactorParams) -> Vec<S> {
    let (c_x, c_n, q, fa) = (x[0], x[1], x[2], x[3]);
    let f_n = u[1];
    let quota = S::one() - S::c(p.k_q) / q;
    let uptake = S::c(p.mu_n) * c_n / (c_n + S::c(p.k_n));
    vec![
        S::c(2.0) * mu_m * quota * (c_n / (c_n + S::c(p.k_n))) * c_x - S::c(p.mu_d) * c_x,
        -uptake * c_x + f_n,
        uptake - mu_m * quota * q,
        mu_m * (S::c(p.theta_p) * q - S::c(p.eps_p) * fa) * quota - S::c(p.gamma_p) * uptake * c_x,
    ]
}

pub fn plant_rhs<S: Scalar>(x: &[S], u: &[S], p: &BioreactorParams) -> Result<Vec<S>, PlantError> {
    if x[2].to_f64().is_none_or(|q| q.abs() <= 1e-9) {
        return Err(PlantError::QuotaSingularity(x[2].to_f64().unwrap_or(f64::NAN)));
    }
    Ok(balances(x, u, light_quadrature(u[0], x[0], p), p))
}
