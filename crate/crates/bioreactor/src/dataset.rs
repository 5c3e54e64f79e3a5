//! Training data from Sobol-designed one-step experiments on the reference plant.

use hgp_core::gp_path_sampler::GaussianNoise;
use hgp_core::hybrid_dynamics::{integrate_adaptive, TruthOptions};
use hgp_core::map_trainer::TrainingData;
use hgp_core::num_kernel::sobol::sobol_points_from;
use hgp_core::num_kernel::RngStream;
use hgp_core::{Error, Matrix, Result};
use rayon::prelude::*;

use crate::plant::{plant_rhs, BioreactorParams};
use crate::scenario::ScenarioConfig;

/// Stream family of the dataset noise draws.
pub const DATASET_STREAM_TAG: u64 = 0x5eed_da7a;

/// One reference-plant step of length `dt` without disturbance.
pub fn plant_step(x: &[f64], u: &[f64], dt: f64, p: &BioreactorParams, opts: &TruthOptions) -> Result<Vec<f64>> {
    let f = |y: &[f64]| plant_rhs(y, u, p).map_err(|e| Error::IntegrationFailure(e.to_string()));
    let x1 = integrate_adaptive(&f, x, dt, opts)?;
    if x1.iter().all(|v| v.is_finite()) {
        Ok(x1)
    } else {
        Err(Error::IntegrationFailure("non-finite state".into()))
    }
}

/// A generated dataset with the Sobol indices that produced its rows.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub data: TrainingData,
    pub sobol_index: Vec<usize>,
    /// Sobol indices that failed to integrate and were replaced.
    pub skipped: Vec<usize>,
}

/// `points` rows `(x, u) → y = x⁺ + ω + ν`, drawing ω and ν from the stream of each Sobol index.
pub fn gen_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<Dataset> {
    let n = cfg.training.points;
    let bounds = cfg.training.bounds();
    let w = GaussianNoise::new(&Matrix::from_diag(&cfg.noise.disturbance_cov_diag))?;
    let v = GaussianNoise::new(&Matrix::from_diag(&cfg.noise.measurement_cov_diag))?;
    let dt = cfg.dt();
    let mut rows_z = Vec::with_capacity(n);
    let mut rows_y = Vec::with_capacity(n);
    let mut used = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    let mut next = 1usize;
    while rows_z.len() < n {
        let want = n - rows_z.len();
        let batch = sobol_points_from(next, want, &bounds)?;
        let results: Vec<Result<Vec<f64>>> = (0..want)
            .into_par_iter()
            .map(|r| {
                let z = batch.row(r);
                let (x, u) = z.split_at(4);
                let x1 = plant_step(x, u, dt, &cfg.plant, &cfg.truth)?;
                let mut rng = RngStream::new(seed ^ DATASET_STREAM_TAG, (next + r) as u64);
                let x_w = w.sample(&x1, &mut rng);
                Ok(v.sample(&x_w, &mut rng))
            })
            .collect();
        for (r, res) in results.into_iter().enumerate() {
            match res {
                Ok(y) => {
                    rows_z.push(batch.row(r).to_vec());
                    rows_y.push(y);
                    used.push(next + r);
                }
                Err(e) => {
                    log::warn!("Sobol point {} skipped: {e}", next + r);
                    skipped.push(next + r);
                }
            }
        }
        next += want;
        if skipped.len() > 10 * n + 100 {
            return Err(Error::IntegrationFailure("too many design points failed to integrate".into()));
        }
    }
    let z = Matrix::from_fn(n, 6, |i, j| rows_z[i][j]);
    let y = Matrix::from_fn(n, 4, |i, j| rows_y[i][j]);
    Ok(Dataset { data: TrainingData::new(z, y)?, sobol_index: used, skipped })
}
