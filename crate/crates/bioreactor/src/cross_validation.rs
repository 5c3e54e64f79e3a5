//! Accuracy of the trained GP at fresh points of the design box.
//!
//! Hybrid models are scored on the growth rate `μ_m(I0, C_X)` against the light
//! integral; non-hybrid models on each next-state channel against the
//! noise-free plant step.

use hgp_core::gp_core::GpModel;
use hgp_core::hybrid_dynamics::HybridModel;
use hgp_core::num_kernel::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::plant_step;
use crate::model::{Architecture, STATE_NAMES};
use crate::plant::light_quadrature;
use crate::scenario::ScenarioConfig;
use crate::stats::{mean, median};

pub const CV_STREAM_TAG: u64 = 0xc055_7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub point: usize,
    pub output: String,
    /// Raw `(x, u)` of the point.
    pub z: Vec<f64>,
    pub truth: f64,
    pub mean: f64,
    pub std: f64,
}

impl CvRow {
    pub fn abs_error(&self) -> f64 {
        (self.truth - self.mean).abs()
    }

    /// `|error| / σ`; infinite for a non-zero error at zero variance.
    pub fn standardized(&self) -> f64 {
        self.abs_error() / self.std
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub architecture: Architecture,
    pub seed: u64,
    pub points: usize,
    pub rows: usize,
    /// Points where the plant step could not be integrated.
    pub skipped: usize,
    #[serde(with = "hgp_core::float_serde")]
    pub median_abs_error: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub mean_abs_error: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub median_standardized: f64,
    #[serde(with = "hgp_core::float_serde")]
    pub fraction_beyond_3_sigma: f64,
}

impl CvSummary {
    pub fn of(architecture: Architecture, seed: u64, points: usize, skipped: usize, rows: &[CvRow]) -> Self {
        let abs: Vec<f64> = rows.iter().map(CvRow::abs_error).collect();
        let z: Vec<f64> = rows.iter().map(CvRow::standardized).collect();
        let beyond = z.iter().filter(|v| !(**v <= 3.0)).count();
        Self {
            architecture,
            seed,
            points,
            rows: rows.len(),
            skipped,
            median_abs_error: median(&abs),
            mean_abs_error: mean(&abs),
            median_standardized: median(&z),
            fraction_beyond_3_sigma: if rows.is_empty() { f64::NAN } else { beyond as f64 / rows.len() as f64 },
        }
    }
}

pub const CV_HEADER: [&str; 13] = ["point", "output", "C_X", "C_N", "q", "FA", "I0", "F_N", "truth", "mean", "std", "abs_error", "standardized"];

pub fn rows_to_csv(rows: &[CvRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            let mut f = vec![r.point.to_string(), r.output.clone()];
            f.extend(r.z.iter().map(|v| format!("{v}")));
            f.extend([r.truth, r.mean, r.std, r.abs_error(), r.standardized()].iter().map(|v| format!("{v}")));
            f
        })
        .collect()
}

fn draw_point(cfg: &ScenarioConfig, seed: u64, i: usize) -> Vec<f64> {
    let mut rng = RngStream::new(seed ^ CV_STREAM_TAG, i as u64);
    cfg.training.bounds().iter().map(|(lo, hi)| lo + (hi - lo) * rng.uniform()).collect()
}

/// Rows for `points` uniform draws in the design box; the second value counts skipped points.
pub fn cross_validate(cfg: &ScenarioConfig, gp: &GpModel, points: usize, seed: u64) -> (Vec<CvRow>, usize) {
    let model = cfg.model();
    let per_point: Vec<Option<Vec<CvRow>>> = (0..points)
        .into_par_iter()
        .map(|i| {
            let z = draw_point(cfg, seed, i);
            let (x, u) = z.split_at(4);
            let inputs: Vec<Vec<f64>> = (0..model.n_q()).map(|o| model.q_in(o, x, u)).collect();
            let (m, v) = gp.predict(&inputs, false);
            let truth = match cfg.scenario.architecture {
                Architecture::Hybrid => vec![light_quadrature(u[0], x[0], &cfg.plant)],
                Architecture::NonHybrid => match plant_step(x, u, cfg.dt(), &cfg.plant, &cfg.truth) {
                    Ok(next) => next,
                    Err(e) => {
                        log::warn!("cross-validation point {i} skipped: {e}");
                        return None;
                    }
                },
            };
            let name = |o: usize| match cfg.scenario.architecture {
                Architecture::Hybrid => "mu_m".to_string(),
                Architecture::NonHybrid => format!("next_{}", STATE_NAMES[o]),
            };
            Some((0..model.n_q()).map(|o| CvRow { point: i, output: name(o), z: z.clone(), truth: truth[o], mean: m[o], std: v[o].max(0.0).sqrt() }).collect())
        })
        .collect();
    let skipped = per_point.iter().filter(|p| p.is_none()).count();
    (per_point.into_iter().flatten().flatten().collect(), skipped)
}
