//! Scenario configuration: the published set-up plus user overrides.

use std::path::Path;

use hgp_core::backoff_engine::BackoffRunParams;
use hgp_core::hybrid_dynamics::{Rule, Scheme, SystemSpec, TruthOptions};
use hgp_core::map_trainer::{GaussianPrior, LbfgsOptions, MapOptions, PriorSpec};
use hgp_core::gp_core::LatentScaling;
use hgp_core::nmpc::{ControlBox, OcpConfig, SolverOptions};
use hgp_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::model::{Architecture, RatioConstraint, ReactorConstraints, ReactorCost, ReactorModel};
use crate::plant::BioreactorParams;

pub const PUBLISHED_SCENARIO: &str = include_str!("../scenarios/published.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scenario file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub architecture: Architecture,
    pub horizon: usize,
    pub batch_time: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialInterpretation {
    Literal,
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub interpretation: InitialInterpretation,
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub swapped_quota: f64,
}

impl InitialState {
    /// Mean and covariance diagonal in state order `[C_X, C_N, q, FA]`.
    pub fn resolved(&self) -> (Vec<f64>, Vec<f64>) {
        match self.interpretation {
            InitialInterpretation::Literal => (self.mean.clone(), self.cov_diag.clone()),
            InitialInterpretation::Swapped => {
                let mut m = self.mean.clone();
                let mut c = self.cov_diag.clone();
                m.swap(1, 2);
                c.swap(1, 2);
                m[2] = self.swapped_quota;
                (m, c)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub measurement_cov_diag: Vec<f64>,
    pub disturbance_cov_diag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub nitrate_max: f64,
    pub ratio: f64,
    pub ratio_kind: RatioConstraint,
    pub nitrate_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub r_diag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollocationSection {
    pub rule: Rule,
    pub stages: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub q_mean: f64,
    pub q_var: f64,
    pub qhat_mean: f64,
    pub qhat_var: f64,
    pub psi_mean: f64,
    pub psi_var: f64,
    pub noise_mean: f64,
    pub noise_var: f64,
    pub include_standalone: bool,
    pub log_scale: bool,
    pub latent_offset: f64,
    pub latent_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub points: usize,
    pub multistarts: usize,
    pub max_iter: usize,
    pub sobol_lower: Vec<f64>,
    pub sobol_upper: Vec<f64>,
}

impl TrainingSection {
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.sobol_lower.iter().copied().zip(self.sobol_upper.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub rollouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossValidationSection {
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub plant: BioreactorParams,
    pub initial_state: InitialState,
    pub noise: NoiseSection,
    pub constraints: ConstraintSection,
    pub controls: ControlSection,
    pub cost: CostSection,
    pub collocation: CollocationSection,
    pub priors: PriorSection,
    pub training: TrainingSection,
    pub solver: SolverOptions,
    pub backoff: BackoffRunParams,
    pub evaluate: EvaluateSection,
    pub cross_validation: CrossValidationSection,
    pub truth: TruthOptions,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ScenarioConfig {
    pub fn published() -> Self {
        Self::from_overrides("").expect("embedded scenario is valid")
    }

    /// The published scenario with the keys of `text` replaced.
    pub fn from_overrides(text: &str) -> Result<Self, ConfigError> {
        let mut base: toml::Value = toml::from_str(PUBLISHED_SCENARIO)?;
        let over: toml::Value = toml::from_str(text)?;
        merge(&mut base, over);
        let cfg: Self = base.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::published()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                Self::from_overrides(&text)
            }
        }
    }

    pub fn dt(&self) -> f64 {
        self.scenario.batch_time / self.scenario.horizon as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.scenario.horizon == 0 || !(self.scenario.batch_time > 0.0) {
            return bad("horizon and batch time must be positive");
        }
        self.plant.validate().map_err(ConfigError::Invalid)?;
        for (name, v, n) in [
            ("initial_state.mean", &self.initial_state.mean, 4),
            ("initial_state.cov_diag", &self.initial_state.cov_diag, 4),
            ("noise.measurement_cov_diag", &self.noise.measurement_cov_diag, 4),
            ("noise.disturbance_cov_diag", &self.noise.disturbance_cov_diag, 4),
            ("controls.lower", &self.controls.lower, 2),
            ("controls.upper", &self.controls.upper, 2),
            ("cost.r_diag", &self.cost.r_diag, 2),
            ("training.sobol_lower", &self.training.sobol_lower, 6),
            ("training.sobol_upper", &self.training.sobol_upper, 6),
        ] {
            if v.len() != n {
                return Err(ConfigError::Invalid(format!("{name} needs {n} entries, found {}", v.len())));
            }
        }
        let diag_ok = |v: &[f64]| v.iter().all(|x| *x >= 0.0 && x.is_finite());
        if !diag_ok(&self.initial_state.cov_diag) || !diag_ok(&self.noise.measurement_cov_diag) || !diag_ok(&self.noise.disturbance_cov_diag) || !diag_ok(&self.cost.r_diag) {
            return bad("covariances and cost weights must be non-negative");
        }
        if self.training.sobol_lower.iter().zip(&self.training.sobol_upper).any(|(l, u)| !(l < u)) {
            return bad("Sobol bounds need lower < upper");
        }
        if self.training.points == 0 || self.evaluate.rollouts == 0 || self.cross_validation.points == 0 {
            return bad("point and rollout counts must be positive");
        }
        if let Some(u) = &self.controls.initial {
            if u.len() != 2 {
                return bad("controls.initial needs 2 entries");
            }
        }
        let (m, _) = self.initial_state.resolved();
        if m[2].abs() <= 1e-9 {
            return bad("initial nitrogen quota must be non-zero");
        }
        ControlBox::new(self.controls.lower.clone(), self.controls.upper.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.priors.q_var > 0.0 && self.priors.qhat_var > 0.0 && self.priors.psi_var > 0.0 && self.priors.noise_var > 0.0 && self.priors.latent_scale != 0.0) {
            return bad("prior variances must be positive and the latent scale non-zero");
        }
        self.backoff.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.scheme().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.scenario.architecture == Architecture::NonHybrid && self.collocation.rule != Rule::Direct {
            log::warn!("non-hybrid architecture uses the direct one-step map; collocation settings are ignored");
        }
        Ok(())
    }

    pub fn model(&self) -> ReactorModel {
        ReactorModel { params: self.plant, architecture: self.scenario.architecture }
    }

    /// Discretization used by training, sampling and control.
    pub fn scheme(&self) -> hgp_core::Result<Scheme> {
        if self.scenario.architecture == Architecture::NonHybrid {
            return Ok(Scheme::direct());
        }
        match self.collocation.rule {
            Rule::Radau => Scheme::radau(self.collocation.stages),
            Rule::Trapezium => Ok(Scheme::trapezium()),
            Rule::Direct => Ok(Scheme::direct()),
        }
    }

    pub fn system_spec(&self) -> hgp_core::Result<SystemSpec<ReactorModel>> {
        let (mean, cov) = self.initial_state.resolved();
        SystemSpec::new(
            self.model(),
            self.dt(),
            self.scenario.horizon,
            Matrix::from_diag(&self.noise.measurement_cov_diag),
            Matrix::from_diag(&self.noise.disturbance_cov_diag),
            mean,
            Matrix::from_diag(&cov),
        )
    }

    pub fn constraints(&self) -> ReactorConstraints {
        let c = &self.constraints;
        ReactorConstraints { nitrate_max: c.nitrate_max, ratio: c.ratio, ratio_kind: c.ratio_kind, nitrate_final: c.nitrate_final, horizon: self.scenario.horizon }
    }

    pub fn control_box(&self) -> ControlBox {
        ControlBox { lower: self.controls.lower.clone(), upper: self.controls.upper.clone() }
    }

    /// Controller configuration with the given back-offs (n_g × (T+1)).
    pub fn ocp_config(&self, backoffs: Matrix) -> hgp_core::Result<OcpConfig<ReactorCost, ReactorConstraints>> {
        Ok(OcpConfig {
            horizon: self.scenario.horizon,
            scheme: self.scheme()?,
            costs: ReactorCost { r: Matrix::from_diag(&self.cost.r_diag) },
            constraints: self.constraints(),
            control_box: self.control_box(),
            backoffs,
            solver: self.solver,
            initial_control: self.controls.initial.clone(),
        })
    }

    pub fn zero_backoffs(&self) -> Matrix {
        Matrix::zeros(3, self.scenario.horizon + 1)
    }

    /// Priors for `n` data points with `nodes` collocation nodes each.
    pub fn priors(&self, n: usize, nodes: usize) -> hgp_core::Result<PriorSpec> {
        let p = &self.priors;
        let model = self.model();
        use hgp_core::hybrid_dynamics::HybridModel;
        let n_q = model.n_q();
        let psi = (0..n_q)
            .map(|i| {
                let d = model.q_in_dim(i);
                let mut mean = vec![p.psi_mean; d + 1];
                let mut var = vec![p.psi_var; d + 1];
                mean.push(p.noise_mean);
                var.push(p.noise_var);
                GaussianPrior::diagonal(mean, &var)
            })
            .collect::<hgp_core::Result<Vec<_>>>()?;
        Ok(PriorSpec {
            q: GaussianPrior::isotropic(n * n_q, p.q_mean, p.q_var)?,
            qhat: GaussianPrior::isotropic(n * nodes * n_q, p.qhat_mean, p.qhat_var)?,
            psi,
            include_standalone: p.include_standalone,
            psi_log_scale: p.log_scale,
        })
    }

    pub fn map_options(&self, seed: u64) -> MapOptions {
        use hgp_core::hybrid_dynamics::HybridModel;
        let latent = LatentScaling { offset: self.priors.latent_offset, scale: self.priors.latent_scale };
        MapOptions {
            multistarts: self.training.multistarts,
            lbfgs: LbfgsOptions { max_iter: self.training.max_iter, ..LbfgsOptions::default() },
            seed,
            latent_scaling: Some(vec![latent; self.model().n_q()]),
            ..MapOptions::default()
        }
    }
}
