//! Tables and summaries derived only from persisted artifacts.

use std::fmt::Write as _;
use std::path::Path;

use hgp_core::backoff_engine::BackoffIterationRecord;
use hgp_core::gp_path_sampler::TrajectoryEnsemble;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self as art, num, CONSTRAINT_NAMES};
use crate::closed_loop::terminal_product;
use crate::cross_validation::CvSummary;
use crate::model::{CONTROL_NAMES, STATE_NAMES};
use crate::pipeline::{BackoffSummary, EvaluateSummary, Result};
use crate::stats::Quantiles;

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TEXT: &str = "summary.txt";
pub const ITERATIONS: &str = "backoff_iterations.csv";
pub const PERCENTILES: &str = "trajectory_percentiles.csv";
pub const OBJECTIVES: &str = "objective_distribution.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub cross_validation: CvSummary,
    pub backoff: BackoffSummary,
    pub evaluate: EvaluateSummary,
}

fn iteration_rows(records: &[BackoffIterationRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|r| {
            let (a, b) = r.bracket.unwrap_or((f64::NAN, f64::NAN));
            vec![
                r.iteration.to_string(),
                serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
                num(r.gamma),
                num(r.beta_hat),
                num(r.beta_lb),
                num(r.h),
                num(a),
                num(b),
                r.summary.satisfied.to_string(),
                r.summary.policy_failures.to_string(),
                r.summary.step_failures.to_string(),
            ]
        })
        .collect()
}

/// Percentile bands of every state, control and constraint per step.
fn percentile_rows(source: &str, ens: &TrajectoryEnsemble, rows: &mut Vec<Vec<String>>) {
    let Some(first) = ens.states.first() else { return };
    let steps = first.rows();
    let mut emit = |variable: &str, k: usize, values: Vec<f64>| {
        let mut r = vec![source.to_string(), variable.to_string(), k.to_string()];
        r.extend(Quantiles::of(&values).fields());
        rows.push(r);
    };
    for (j, name) in STATE_NAMES.iter().enumerate() {
        for k in 0..steps {
            emit(name, k, ens.states.iter().map(|x| x[(k, j)]).collect());
        }
    }
    for (j, name) in CONTROL_NAMES.iter().enumerate() {
        for k in 0..steps - 1 {
            emit(name, k, ens.controls.iter().map(|u| u[(k, j)]).collect());
        }
    }
    for (j, name) in CONSTRAINT_NAMES.iter().enumerate() {
        for k in 0..steps {
            emit(name, k, ens.constraint_values.iter().map(|g| g[(k, j)]).collect());
        }
    }
}

fn objective_rows(policy: &str, ens: &TrajectoryEnsemble, rows: &mut Vec<Vec<String>>) {
    for ((s, fa), c) in ens.seeds.iter().zip(terminal_product(ens)).zip(&ens.worst_case) {
        rows.push(vec![policy.to_string(), s.to_string(), num(fa), num(*c), (*c <= 0.0).to_string()]);
    }
}

fn summary_text(s: &ReportSummary) -> String {
    let mut t = String::new();
    let cv = &s.cross_validation;
    let _ = writeln!(t, "cross-validation ({} points, {} rows)", cv.points, cv.rows);
    let _ = writeln!(t, "  median |error|        {:e}", cv.median_abs_error);
    let _ = writeln!(t, "  fraction |error|/sd>3 {:.4}", cv.fraction_beyond_3_sigma);
    let b = &s.backoff;
    let _ = writeln!(t, "back-off ({} samples, {} bisections)", b.samples, b.n_b);
    let _ = writeln!(t, "  gamma    {}", b.gamma);
    let _ = writeln!(t, "  beta_hat {}", b.beta_hat);
    let _ = writeln!(t, "  beta_lb  {}", b.beta_lb);
    let _ = writeln!(t, "plant rollouts (epsilon {})", s.evaluate.epsilon);
    for p in &s.evaluate.policies {
        let _ = writeln!(t, "  {:<10} satisfied {}/{} ({:.3}), median FA_T {}", p.name, p.satisfied, p.rollouts, p.satisfaction_frequency, p.objective.p50);
    }
    t
}

/// Reads the artifacts in `out` and writes the report files to `dir`.
pub fn write_report(out: &Path, dir: &Path) -> Result<ReportSummary> {
    let cv: CvSummary = art::read_json(&out.join(art::CV_SUMMARY), "cross-validate")?;
    let backoff: BackoffSummary = art::read_json(&out.join(art::BACKOFF_SUMMARY), "backoff")?;
    let records: Vec<BackoffIterationRecord> = art::read_json_lines(&out.join(art::BACKOFF_LOG), "backoff")?;
    let tuned = art::read_trajectories(&out.join(art::BACKOFF_ENSEMBLE), "backoff")?;
    let evaluate: EvaluateSummary = art::read_json(&out.join(art::EVALUATE_SUMMARY), "evaluate")?;
    let rollouts = art::read_trajectories(&out.join(art::ROLLOUTS), "evaluate")?;

    let iter_header = ["iteration", "kind", "gamma", "beta_hat", "beta_lb", "h", "bracket_lo", "bracket_hi", "satisfied", "policy_failures", "step_failures"];
    art::write_text(&dir.join(ITERATIONS), &art::table_to_csv(&iter_header, &iteration_rows(&records)))?;

    let mut pct = Vec::new();
    for (name, ens) in &tuned {
        percentile_rows(&format!("gp_samples_{name}"), ens, &mut pct);
    }
    for (name, ens) in &rollouts {
        percentile_rows(&format!("plant_{name}"), ens, &mut pct);
    }
    let pct_header: Vec<&str> = ["source", "variable", "step"].into_iter().chain(Quantiles::HEADER).collect();
    art::write_text(&dir.join(PERCENTILES), &art::table_to_csv(&pct_header, &pct))?;

    let mut obj = Vec::new();
    for (name, ens) in &rollouts {
        objective_rows(name, ens, &mut obj);
    }
    art::write_text(&dir.join(OBJECTIVES), &art::table_to_csv(&["policy", "sample", "FA_T", "worst_case", "satisfied"], &obj))?;

    let summary = ReportSummary { cross_validation: cv, backoff, evaluate };
    art::write_json(&dir.join(SUMMARY_JSON), &summary)?;
    art::write_text(&dir.join(SUMMARY_TEXT), &summary_text(&summary))?;
    Ok(summary)
}
