//! Closed-loop rollouts of a feedback law on the reference plant.

use hgp_core::gp_path_sampler::{worst_case_constraint, GaussianNoise, PathStatus, Policy, TrajectoryEnsemble};
use hgp_core::nmpc::PathConstraints;
use hgp_core::num_kernel::RngStream;
use hgp_core::{Matrix, Result};
use rayon::prelude::*;

use crate::dataset::plant_step;
use crate::scenario::ScenarioConfig;

/// Stream family of the rollout draws.
pub const ROLLOUT_STREAM_TAG: u64 = 0x0e7a_1a7e;

struct Rollout {
    states: Matrix,
    controls: Matrix,
    gvals: Matrix,
    status: PathStatus,
}

fn record<G: PathConstraints>(g: &G, x: &[f64], k: usize, row: &mut [f64]) {
    for (j, v) in g.eval(x).into_iter().enumerate() {
        row[j] = if g.applies(j, k) { v } else { f64::NAN };
    }
}

fn rollout<P: Policy, G: PathConstraints>(cfg: &ScenarioConfig, policy: &P, constraints: &G, x0_noise: &GaussianNoise, w: &GaussianNoise, mean0: &[f64], seed: u64, r: u64) -> Rollout {
    let t = cfg.scenario.horizon;
    let mut states = Matrix::from_fn(t + 1, 4, |_, _| f64::NAN);
    let mut controls = Matrix::from_fn(t, 2, |_, _| f64::NAN);
    let mut gvals = Matrix::from_fn(t + 1, constraints.n_g(), |_, _| f64::NAN);
    let mut rng = RngStream::new(seed ^ ROLLOUT_STREAM_TAG, r);
    let mut x = x0_noise.sample(mean0, &mut rng);
    let mut memory = policy.start();
    let mut status = PathStatus::Completed;
    for k in 0..=t {
        states.row_mut(k).copy_from_slice(&x);
        record(constraints, &x, k, gvals.row_mut(k));
        if k == t {
            break;
        }
        let action = policy.act(&x, k, &mut memory);
        controls.row_mut(k).copy_from_slice(&action.u);
        if action.failed {
            status = PathStatus::PolicyFailed(k);
            break;
        }
        // drawn before integrating so a failure does not shift later streams
        let omega = w.sample(&[0.0; 4], &mut rng);
        match plant_step(&x, &action.u, cfg.dt(), &cfg.plant, &cfg.truth) {
            Ok(next) => x = next.iter().zip(&omega).map(|(a, b)| a + b).collect(),
            Err(e) => {
                log::debug!("rollout {r}: plant step {k} failed: {e}");
                status = PathStatus::StepFailed(k);
                break;
            }
        }
    }
    Rollout { states, controls, gvals, status }
}

/// `rollouts` plant trajectories from `x0 ~ N(μ_x0, Σ_x0)` with disturbances `ω_k`.
///
/// Rollout `r` draws from stream `r`, so two policies evaluated with the same
/// seed face identical initial states and disturbances.
pub fn plant_closed_loop<P: Policy, G: PathConstraints>(cfg: &ScenarioConfig, policy: &P, constraints: &G, rollouts: usize, seed: u64) -> Result<TrajectoryEnsemble> {
    let spec = cfg.system_spec()?;
    let x0_noise = GaussianNoise::new(&spec.init_cov)?;
    let w = GaussianNoise::new(&spec.disturbance_cov)?;
    let runs: Vec<Rollout> = (0..rollouts as u64).into_par_iter().map(|r| rollout(cfg, policy, constraints, &x0_noise, &w, &spec.init_mean, seed, r)).collect();
    let mut ens = TrajectoryEnsemble { states: vec![], controls: vec![], constraint_values: vec![], worst_case: vec![], seeds: vec![], status: vec![] };
    for (r, run) in runs.into_iter().enumerate() {
        ens.worst_case.push(if run.status.is_completed() { worst_case_constraint(&run.gvals) } else { f64::INFINITY });
        ens.seeds.push(r as u64);
        ens.status.push(run.status);
        ens.states.push(run.states);
        ens.controls.push(run.controls);
        ens.constraint_values.push(run.gvals);
    }
    Ok(ens)
}

/// Terminal FAME concentration of each completed rollout (NaN otherwise).
pub fn terminal_product(ens: &TrajectoryEnsemble) -> Vec<f64> {
    ens.states.iter().zip(&ens.status).map(|(x, s)| if s.is_completed() { x[(x.rows() - 1, 3)] } else { f64::NAN }).collect()
}
