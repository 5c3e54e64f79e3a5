//! The offline pipeline: each command reads its predecessors' artifacts from
//! the output directory and writes its own.

use std::path::{Path, PathBuf};

use hgp_core::backoff_engine::{BackoffIterationRecord, BackoffOutcome, BackoffProblem, BackoffTable};
use hgp_core::gp_core::GpModel;
use hgp_core::gp_path_sampler::SamplerOptions;
use hgp_core::map_trainer::train;
use hgp_core::nmpc::NmpcPolicy;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self as art, ArtifactError, DatasetFile, JsonLog, ModelArtifact};
use crate::closed_loop::{plant_closed_loop, terminal_product};
use crate::cross_validation::{cross_validate, rows_to_csv, CvSummary, CV_HEADER};
use crate::dataset::gen_dataset;
use crate::report;
use crate::scenario::{ConfigError, InitialInterpretation, ScenarioConfig};
use crate::stats::Quantiles;

pub const BACKOFF_STREAM_TAG: u64 = 0xbac0_ff;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("numerical failure: {0}")]
    Numerical(hgp_core::Error),
}

impl From<hgp_core::Error> for PipelineError {
    fn from(e: hgp_core::Error) -> Self {
        match e {
            hgp_core::Error::Config(m) => PipelineError::Usage(m),
            other => PipelineError::Numerical(other),
        }
    }
}

impl PipelineError {
    /// 2 configuration, 3 missing or unreadable prerequisite, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => 2,
            PipelineError::Artifact(ArtifactError::Missing { .. } | ArtifactError::Malformed { .. }) => 3,
            PipelineError::Artifact(ArtifactError::Write { .. }) => 1,
            PipelineError::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Train,
    CrossValidate,
    Backoff,
    Evaluate,
    Report,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackoffSummary {
    pub master_seed: u64,
    pub samples: usize,
    pub n_b: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    pub quantile_level: f64,
    pub gamma: f64,
    pub beta_hat: f64,
    pub beta_lb: f64,
    pub degenerate: bool,
    pub evaluations: usize,
    /// Bracket width once established and after the last bisection.
    pub initial_bracket_width: Option<f64>,
    pub final_bracket_width: Option<f64>,
}

impl BackoffSummary {
    fn of(outcome: &BackoffOutcome, cfg: &ScenarioConfig, master_seed: u64) -> Self {
        let widths: Vec<f64> = outcome.records.iter().filter_map(|r| r.bracket.map(|(a, b)| b - a)).collect();
        let p = &cfg.backoff;
        Self {
            master_seed,
            samples: p.samples,
            n_b: p.n_b,
            epsilon: p.epsilon,
            alpha: p.alpha,
            delta: p.delta,
            quantile_level: p.quantile_level(),
            gamma: outcome.table.gamma,
            beta_hat: outcome.beta_hat,
            beta_lb: outcome.beta_lb,
            degenerate: outcome.degenerate,
            evaluations: outcome.records.len(),
            initial_bracket_width: widths.first().copied(),
            final_bracket_width: widths.last().copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub name: String,
    pub rollouts: usize,
    pub satisfied: usize,
    pub satisfaction_frequency: f64,
    pub violation_frequency: f64,
    pub policy_failures: usize,
    pub plant_failures: usize,
    /// Terminal FAME over completed rollouts.
    pub objective: Quantiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub seed: u64,
    pub epsilon: f64,
    pub gamma: f64,
    pub policies: Vec<PolicySummary>,
}

impl EvaluateSummary {
    pub fn policy(&self, name: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.name == name)
    }
}

pub const TIGHTENED: &str = "tightened";
pub const NOMINAL: &str = "nominal";

/// Scenario, seed and output directory shared by all commands.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: ScenarioConfig, seed: Option<u64>, out: &Path) -> Self {
        let seed = seed.unwrap_or(config.scenario.seed);
        Self { config, seed, out: out.to_path_buf() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn run(&self, command: Command) -> Result<()> {
        if self.config.initial_state.interpretation == InitialInterpretation::Swapped {
            log::warn!("initial state: published mean read with nitrate and quota swapped, q(0) = {}", self.config.initial_state.swapped_quota);
        } else {
            log::warn!("initial state: published mean taken literally (C_N(0) = {}, q(0) = {})", self.config.initial_state.mean[1], self.config.initial_state.mean[2]);
        }
        match command {
            Command::GenData => self.gen_data().map(drop),
            Command::Train => self.train().map(drop),
            Command::CrossValidate => self.cross_validate().map(drop),
            Command::Backoff => self.backoff().map(drop),
            Command::Evaluate => self.evaluate().map(drop),
            Command::Report => self.report().map(drop),
        }
    }

    pub fn gen_data(&self) -> Result<DatasetFile> {
        let ds = gen_dataset(&self.config, self.seed)?;
        if !ds.skipped.is_empty() {
            log::warn!("{} design points failed to integrate and were replaced", ds.skipped.len());
        }
        let file = DatasetFile { sobol_index: ds.sobol_index, data: ds.data };
        art::write_text(&self.path(art::DATASET), &file.to_csv())?;
        log::info!("wrote {} rows to {}", file.data.len(), self.path(art::DATASET).display());
        Ok(file)
    }

    pub fn train(&self) -> Result<ModelArtifact> {
        let file = DatasetFile::read(&self.path(art::DATASET))?;
        let spec = self.config.system_spec()?;
        let scheme = self.config.scheme()?;
        let priors = self.config.priors(file.data.len(), scheme.nodes())?;
        let solution = train(&file.data, &spec, &scheme, &priors, &self.config.map_options(self.seed))?;
        if !solution.converged {
            log::warn!("MAP training stopped before the gradient tolerance (nll {:e}, |g| {:e}, {} iterations)", solution.nll, solution.grad_norm, solution.iterations);
        }
        let artifact = ModelArtifact { architecture: self.config.scenario.architecture, seed: self.seed, data_fingerprint: file.data.fingerprint(), inputs_z: file.data.inputs_z, solution };
        art::write_json(&self.path(art::MODEL), &artifact)?;
        Ok(artifact)
    }

    /// The trained model, checked against the configured architecture.
    pub fn load_model(&self) -> Result<GpModel> {
        let path = self.path(art::MODEL);
        let artifact: ModelArtifact = art::read_json(&path, "train")?;
        if artifact.architecture != self.config.scenario.architecture {
            return Err(PipelineError::Usage(format!("{} holds a {:?} model but the scenario asks for {:?}", path.display(), artifact.architecture, self.config.scenario.architecture)));
        }
        let gp = artifact.solution.gp_model().map_err(|e| ArtifactError::Malformed { path: path.display().to_string(), reason: e.to_string() })?;
        Ok(gp)
    }

    pub fn cross_validate(&self) -> Result<CvSummary> {
        let gp = self.load_model()?;
        let points = self.config.cross_validation.points;
        let (rows, skipped) = cross_validate(&self.config, &gp, points, self.seed);
        let summary = CvSummary::of(self.config.scenario.architecture, self.seed, points, skipped, &rows);
        art::write_text(&self.path(art::CV_TABLE), &art::table_to_csv(&CV_HEADER, &rows_to_csv(&rows)))?;
        art::write_json(&self.path(art::CV_SUMMARY), &summary)?;
        log::info!("cross-validation: median |error| {:e}, {:.2}% beyond 3 sigma", summary.median_abs_error, 100.0 * summary.fraction_beyond_3_sigma);
        Ok(summary)
    }

    pub fn backoff_seed(&self) -> u64 {
        self.seed ^ BACKOFF_STREAM_TAG
    }

    pub fn backoff(&self) -> Result<BackoffSummary> {
        let gp = self.load_model()?;
        let spec = self.config.system_spec()?;
        let ocp = self.config.ocp_config(self.config.zero_backoffs())?;
        let problem = BackoffProblem { spec: &spec, gp: &gp, config: &ocp, params: self.config.backoff, master_seed: self.backoff_seed(), sampler: SamplerOptions::default() };
        let mut log = JsonLog::create(&self.path(art::BACKOFF_LOG))?;
        let mut write_error = None;
        let outcome = problem.run(&mut |r: &BackoffIterationRecord| {
            if let Err(e) = log.append(r) {
                write_error.get_or_insert(e);
            }
        });
        if let Some(e) = write_error {
            return Err(e.into());
        }
        let outcome = outcome?;
        let summary = BackoffSummary::of(&outcome, &self.config, self.backoff_seed());
        art::write_text(&self.path(art::BACKOFF_TABLE), &outcome.table.to_csv())?;
        if let Some(ens) = &outcome.ensemble {
            art::write_text(&self.path(art::BACKOFF_ENSEMBLE), &art::trajectories_to_csv(&[(TIGHTENED, ens)]))?;
        }
        art::write_json(&self.path(art::BACKOFF_SUMMARY), &summary)?;
        log::info!("back-off: gamma {} beta_hat {} beta_lb {}", summary.gamma, summary.beta_hat, summary.beta_lb);
        Ok(summary)
    }

    pub fn load_backoffs(&self) -> Result<BackoffTable> {
        let path = self.path(art::BACKOFF_TABLE);
        let table = BackoffTable::from_csv(&art::read_required(&path, "backoff")?).map_err(|e| ArtifactError::Malformed { path: path.display().to_string(), reason: e.to_string() })?;
        let want = self.config.zero_backoffs();
        if (table.effective.rows(), table.effective.cols()) != (want.rows(), want.cols()) {
            return Err(ArtifactError::Malformed { path: path.display().to_string(), reason: "table does not match the scenario horizon".into() }.into());
        }
        Ok(table)
    }

    pub fn evaluate(&self) -> Result<EvaluateSummary> {
        let gp = self.load_model()?;
        let table = self.load_backoffs()?;
        let spec = self.config.system_spec()?;
        let rollouts = self.config.evaluate.rollouts;
        let mut policies = Vec::new();
        let mut ensembles = Vec::new();
        for (name, backoffs) in [(TIGHTENED, table.effective.clone()), (NOMINAL, self.config.zero_backoffs())] {
            let ocp = self.config.ocp_config(backoffs)?;
            let policy = NmpcPolicy::new(&spec, &gp, &ocp)?;
            let ens = plant_closed_loop(&self.config, &policy, &ocp.constraints, rollouts, self.seed)?;
            policies.push(policy_summary(name, &ens));
            ensembles.push((name, ens));
        }
        let groups: Vec<(&str, &_)> = ensembles.iter().map(|(n, e)| (*n, e)).collect();
        art::write_text(&self.path(art::ROLLOUTS), &art::trajectories_to_csv(&groups))?;
        let summary = EvaluateSummary { seed: self.seed, epsilon: self.config.backoff.epsilon, gamma: table.gamma, policies };
        art::write_json(&self.path(art::EVALUATE_SUMMARY), &summary)?;
        for p in &summary.policies {
            log::info!("{}: {}/{} rollouts satisfy every constraint", p.name, p.satisfied, p.rollouts);
        }
        Ok(summary)
    }

    pub fn report(&self) -> Result<report::ReportSummary> {
        report::write_report(&self.out, &self.path(art::REPORT_DIR))
    }
}

pub fn policy_summary(name: &str, ens: &hgp_core::gp_path_sampler::TrajectoryEnsemble) -> PolicySummary {
    use hgp_core::gp_path_sampler::PathStatus;
    let n = ens.len();
    let satisfied = ens.worst_case.iter().filter(|&&c| c <= 0.0).count();
    PolicySummary {
        name: name.to_string(),
        rollouts: n,
        satisfied,
        satisfaction_frequency: satisfied as f64 / n.max(1) as f64,
        violation_frequency: (n - satisfied) as f64 / n.max(1) as f64,
        policy_failures: ens.status.iter().filter(|s| matches!(s, PathStatus::PolicyFailed(_))).count(),
        plant_failures: ens.status.iter().filter(|s| matches!(s, PathStatus::StepFailed(_))).count(),
        objective: Quantiles::of(&terminal_product(ens)),
    }
}
