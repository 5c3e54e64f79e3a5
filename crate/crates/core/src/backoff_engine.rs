//! Back-off tuning: tighten the nominal controller's constraints until the
//! Monte Carlo estimate of joint satisfaction, lowered to a confidence bound,
//! reaches the target.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gp_core::GpModel;
use crate::gp_path_sampler::{nominal_closed_loop, simulate_closed_loop, PathStatus, SamplerOptions, TrajectoryEnsemble};
use crate::hybrid_dynamics::{HybridModel, SystemSpec};
use crate::nmpc::{CostSpec, NmpcPolicy, OcpConfig, PathConstraints};
use crate::num_kernel::linalg::Matrix;

pub use crate::num_kernel::beta::confidence_lower_bound;

/// Fraction of paths whose worst-case constraint value is at most zero. NaN counts as a violation.
pub fn ecdf_satisfaction(worst_case: &[f64]) -> f64 {
    if worst_case.is_empty() {
        return 0.0;
    }
    worst_case.iter().filter(|&&c| c <= 0.0).count() as f64 / worst_case.len() as f64
}

/// Order statistic `⌈p·S⌉` (1-based, clamped to `1..=S`) of the samples; NaN ranks as +∞.
pub fn upper_quantile(samples: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = samples.iter().map(|&x| if x.is_nan() { f64::INFINITY } else { x }).collect();
    v.sort_by(f64::total_cmp);
    let idx = ((p * v.len() as f64 - 1e-9).ceil() as usize).clamp(1, v.len());
    v[idx - 1]
}

/// Base back-offs `F̂⁻¹(p) − g(χ̄_k)` per constraint and time index (n_g × (T+1)).
///
/// `nominal` holds the mean-model constraint values, (T+1) × n_g. Time index 0
/// and constraints that do not apply at a step get zero. A quantile landing on
/// a failed path is replaced by the largest finite sample.
pub fn initial_backoffs<G: PathConstraints>(ensemble: &TrajectoryEnsemble, nominal: &Matrix<f64>, constraints: &G, quantile_level: f64) -> Result<Matrix<f64>> {
    let n_g = constraints.n_g();
    let horizon = nominal.rows().checked_sub(1).ok_or_else(|| Error::Domain("empty nominal trajectory".into()))?;
    check_dim("nominal constraint columns", n_g, nominal.cols())?;
    if ensemble.constraint_values.is_empty() {
        return Err(Error::Domain("empty ensemble".into()));
    }
    let mut base = Matrix::zeros(n_g, horizon + 1);
    for k in 1..=horizon {
        for j in 0..n_g {
            if !constraints.applies(j, k) {
                continue;
            }
            let g_nom = nominal[(k, j)];
            if !g_nom.is_finite() {
                return Err(Error::Domain(format!("nominal value of constraint {j} at step {k} is not finite")));
            }
            let column = ensemble.constraint_column(j, k);
            let mut q = upper_quantile(&column, quantile_level);
            if !q.is_finite() {
                q = column.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
                if !q.is_finite() {
                    return Err(Error::Domain(format!("no finite sample of constraint {j} at step {k}")));
                }
            }
            base[(j, k)] = q - g_nom;
        }
    }
    Ok(base)
}

/// Base back-offs scaled by a single factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackoffTable {
    /// n_g × (T+1).
    pub base: Matrix<f64>,
    pub gamma: f64,
    pub effective: Matrix<f64>,
}

impl BackoffTable {
    pub fn new(base: Matrix<f64>, gamma: f64) -> Self {
        let effective = base.scaled(gamma);
        Self { base, gamma, effective }
    }

    pub fn zeros(n_g: usize, horizon: usize) -> Self {
        Self::new(Matrix::zeros(n_g, horizon + 1), 0.0)
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self::new(self.base.clone(), gamma)
    }

    pub const HEADER: &'static str = "constraint,step,base,gamma,effective";

    /// One line per (constraint, step) under [`Self::HEADER`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for j in 0..self.base.rows() {
            for k in 0..self.base.cols() {
                out.push_str(&format!("{},{},{},{},{}\n", j, k, self.base[(j, k)], self.gamma, self.effective[(j, k)]));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Config(format!("back-off table line {line}: {what}"));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == Self::HEADER => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut rows = Vec::new();
        let mut gamma = None;
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            let j: usize = f[0].parse().map_err(|_| bad(i + 1, "constraint index"))?;
            let k: usize = f[1].parse().map_err(|_| bad(i + 1, "step"))?;
            let b: f64 = f[2].parse().map_err(|_| bad(i + 1, "base"))?;
            let g: f64 = f[3].parse().map_err(|_| bad(i + 1, "gamma"))?;
            if gamma.is_some_and(|g0| g0 != g) {
                return Err(bad(i + 1, "gamma differs between rows"));
            }
            gamma = Some(g);
            rows.push((j, k, b));
        }
        let n_g = rows.iter().map(|r| r.0 + 1).max().ok_or_else(|| bad(2, "no rows"))?;
        let cols = rows.iter().map(|r| r.1 + 1).max().unwrap_or(1);
        if rows.len() != n_g * cols {
            return Err(bad(rows.len() + 1, "table is not complete"));
        }
        let mut base = Matrix::zeros(n_g, cols);
        for (j, k, b) in rows {
            base[(j, k)] = b;
        }
        Ok(Self::new(base, gamma.unwrap_or(0.0)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackoffRunParams {
    pub samples: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    pub n_b: usize,
    pub gamma_hi: f64,
    /// How often `gamma_hi` may be doubled while the upper end is still infeasible.
    pub max_doublings: usize,
    /// Swap the beta shape parameters of the confidence bound.
    pub swap_beta_shapes: bool,
    /// Use the δ-quantile instead of the (1−δ)-quantile for the base back-offs.
    pub lower_tail_quantile: bool,
}

impl Default for BackoffRunParams {
    fn default() -> Self {
        Self { samples: 1000, epsilon: 0.1, alpha: 0.01, delta: 0.05, n_b: 14, gamma_hi: 4.0, max_doublings: 3, swap_beta_shapes: false, lower_tail_quantile: false }
    }
}

impl BackoffRunParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.epsilon) || !unit(self.alpha) || !unit(self.delta) {
            return Err(Error::Config("epsilon, alpha and delta must lie in (0, 1)".into()));
        }
        if self.samples < 2 || self.n_b == 0 {
            return Err(Error::Config("need at least 2 samples and 1 bisection iteration".into()));
        }
        if !(self.gamma_hi > 0.0 && self.gamma_hi.is_finite()) {
            return Err(Error::Config("gamma_hi must be positive".into()));
        }
        Ok(())
    }

    pub fn quantile_level(&self) -> f64 {
        if self.lower_tail_quantile {
            self.delta
        } else {
            1.0 - self.delta
        }
    }

    pub fn lower_bound(&self, beta_hat: f64) -> Result<f64> {
        confidence_lower_bound(beta_hat, self.samples, self.alpha, self.swap_beta_shapes)
    }
}

/// Interval `[a, b]` with `h(a) < 0 ≤ h(b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub a: f64,
    pub b: f64,
    pub h_a: f64,
    pub h_b: f64,
    /// Set once a midpoint hit `h = 0` exactly.
    pub exact: bool,
}

impl Bracket {
    pub fn new(a: f64, h_a: f64, b: f64, h_b: f64) -> Result<Self> {
        if !(h_a < 0.0 && h_b >= 0.0) {
            return Err(Error::InvalidBracket { h_lo: h_a, h_hi: h_b });
        }
        Ok(Self { a, b, h_a, h_b, exact: false })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }

    /// Replace the endpoint whose sign of `h` matches `h_c`.
    pub fn step(self, c: f64, h_c: f64) -> Self {
        if h_c < 0.0 {
            Self { a: c, h_a: h_c, ..self }
        } else {
            Self { b: c, h_b: h_c, exact: self.exact || h_c == 0.0, ..self }
        }
    }
}

/// Summary of one Monte Carlo ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub samples: usize,
    pub satisfied: usize,
    pub policy_failures: usize,
    pub step_failures: usize,
    /// Mean and maximum of the finite worst-case values.
    #[serde(with = "crate::float_serde")]
    pub mean_worst: f64,
    #[serde(with = "crate::float_serde")]
    pub max_worst: f64,
}

impl EnsembleSummary {
    pub fn of(ens: &TrajectoryEnsemble) -> Self {
        let finite: Vec<f64> = ens.worst_case.iter().copied().filter(|v| v.is_finite()).collect();
        Self {
            samples: ens.worst_case.len(),
            satisfied: ens.worst_case.iter().filter(|&&c| c <= 0.0).count(),
            policy_failures: ens.status.iter().filter(|s| matches!(s, PathStatus::PolicyFailed(_))).count(),
            step_failures: ens.status.iter().filter(|s| matches!(s, PathStatus::StepFailed(_))).count(),
            mean_worst: if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 },
            max_worst: finite.iter().copied().fold(f64::NAN, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    /// γ = 0, which also yields the base back-offs.
    Initial,
    /// Upper end of the initial bracket.
    UpperBracket,
    Bisection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackoffIterationRecord {
    pub iteration: usize,
    pub kind: IterationKind,
    pub gamma: f64,
    pub beta_hat: f64,
    pub beta_lb: f64,
    pub h: f64,
    /// Bracket after this evaluation, once established.
    pub bracket: Option<(f64, f64)>,
    pub summary: EnsembleSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackoffOutcome {
    /// Table at the upper bracket end, the smallest γ known to meet the target.
    pub table: BackoffTable,
    pub beta_hat: f64,
    pub beta_lb: f64,
    pub records: Vec<BackoffIterationRecord>,
    /// No tightening was needed: the bound already holds at γ = 0.
    pub degenerate: bool,
    /// Ensemble at the returned table.
    #[serde(skip)]
    pub ensemble: Option<TrajectoryEnsemble>,
}

/// Closed-loop evaluation of the controller at one back-off table.
pub struct Evaluation {
    pub ensemble: TrajectoryEnsemble,
    pub beta_hat: f64,
    pub beta_lb: f64,
}

/// Shared context of a tuning run.
pub struct BackoffProblem<'a, M, C, G> {
    pub spec: &'a SystemSpec<M>,
    pub gp: &'a GpModel,
    /// Controller configuration; its back-offs are replaced at every evaluation.
    pub config: &'a OcpConfig<C, G>,
    pub params: BackoffRunParams,
    pub master_seed: u64,
    pub sampler: SamplerOptions,
}

impl<M: HybridModel, C: CostSpec + Clone, G: PathConstraints + Clone> BackoffProblem<'_, M, C, G> {
    fn config_with(&self, table: &BackoffTable) -> Result<OcpConfig<C, G>> {
        let mut cfg = self.config.clone();
        check_dim("back-off rows", cfg.backoffs.rows(), table.effective.rows())?;
        check_dim("back-off columns", cfg.backoffs.cols(), table.effective.cols())?;
        cfg.backoffs = table.effective.clone();
        Ok(cfg)
    }

    /// S closed-loop paths under the given table; the same per-path streams for every table.
    pub fn evaluate(&self, table: &BackoffTable) -> Result<Evaluation> {
        let cfg = self.config_with(table)?;
        let policy = NmpcPolicy::new(self.spec, self.gp, &cfg)?;
        let ensemble = simulate_closed_loop(self.spec, &cfg.scheme, self.gp, &policy, &cfg.constraints, self.params.samples, self.master_seed, &self.sampler)?;
        let beta_hat = ecdf_satisfaction(&ensemble.worst_case);
        let beta_lb = self.params.lower_bound(beta_hat)?;
        Ok(Evaluation { ensemble, beta_hat, beta_lb })
    }

    /// Constraint values along the mean-model closed loop, (T+1) × n_g.
    pub fn nominal(&self, table: &BackoffTable) -> Result<Matrix<f64>> {
        let cfg = self.config_with(table)?;
        let policy = NmpcPolicy::new(self.spec, self.gp, &cfg)?;
        Ok(nominal_closed_loop(self.spec, &cfg.scheme, self.gp, &policy, &cfg.constraints, &self.sampler.newton)?.constraint_values)
    }

    /// Full tuning loop; `observe` sees each record as soon as it is produced.
    pub fn run(&self, observe: &mut dyn FnMut(&BackoffIterationRecord)) -> Result<BackoffOutcome> {
        self.params.validate()?;
        let target = 1.0 - self.params.epsilon;
        let n_g = self.config.constraints.n_g();
        let zero = BackoffTable::zeros(n_g, self.config.horizon);
        let mut records = Vec::new();
        let mut push = |r: BackoffIterationRecord, records: &mut Vec<BackoffIterationRecord>| {
            log::info!("back-off iteration {} ({:?}): gamma {:.6} beta_hat {:.4} beta_lb {:.4}", r.iteration, r.kind, r.gamma, r.beta_hat, r.beta_lb);
            observe(&r);
            records.push(r);
        };

        let ev0 = self.evaluate(&zero)?;
        let h0 = ev0.beta_lb - target;
        let nominal = self.nominal(&zero)?;
        let base = initial_backoffs(&ev0.ensemble, &nominal, &self.config.constraints, self.params.quantile_level())?;
        let table0 = BackoffTable::new(base, 0.0);
        push(BackoffIterationRecord { iteration: 0, kind: IterationKind::Initial, gamma: 0.0, beta_hat: ev0.beta_hat, beta_lb: ev0.beta_lb, h: h0, bracket: None, summary: EnsembleSummary::of(&ev0.ensemble) }, &mut records);
        if h0 >= 0.0 {
            return Ok(BackoffOutcome { table: table0, beta_hat: ev0.beta_hat, beta_lb: ev0.beta_lb, records, degenerate: true, ensemble: Some(ev0.ensemble) });
        }

        let mut hi = self.params.gamma_hi;
        let mut iteration = 1;
        let (mut bracket, mut best) = loop {
            let ev = self.evaluate(&table0.with_gamma(hi))?;
            let h = ev.beta_lb - target;
            let bracket = Bracket::new(0.0, h0, hi, h).ok();
            push(
                BackoffIterationRecord { iteration, kind: IterationKind::UpperBracket, gamma: hi, beta_hat: ev.beta_hat, beta_lb: ev.beta_lb, h, bracket: bracket.map(|b| (b.a, b.b)), summary: EnsembleSummary::of(&ev.ensemble) },
                &mut records,
            );
            iteration += 1;
            match bracket {
                Some(b) => break (b, (ev.beta_hat, ev.beta_lb, ev.ensemble)),
                None if iteration - 1 <= self.params.max_doublings => hi *= 2.0,
                None => return Err(Error::InvalidBracket { h_lo: h0, h_hi: h }),
            }
        };

        for _ in 0..self.params.n_b {
            let c = bracket.midpoint();
            let ev = self.evaluate(&table0.with_gamma(c))?;
            let h = ev.beta_lb - target;
            bracket = bracket.step(c, h);
            let record = BackoffIterationRecord { iteration, kind: IterationKind::Bisection, gamma: c, beta_hat: ev.beta_hat, beta_lb: ev.beta_lb, h, bracket: Some((bracket.a, bracket.b)), summary: EnsembleSummary::of(&ev.ensemble) };
            if h >= 0.0 {
                best = (ev.beta_hat, ev.beta_lb, ev.ensemble);
            }
            push(record, &mut records);
            iteration += 1;
        }
        Ok(BackoffOutcome { table: table0.with_gamma(bracket.b), beta_hat: best.0, beta_lb: best.1, records, degenerate: false, ensemble: Some(best.2) })
    }
}

#[cfg(test)]
mod tests;
