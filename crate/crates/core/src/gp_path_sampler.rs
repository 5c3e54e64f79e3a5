//! Exact GP function samples along closed-loop trajectories.
//!
//! Each Monte Carlo path carries its own copy of the posterior. At every step
//! the q-values at the collocation nodes are drawn jointly, conditioned on
//! everything the path has already sampled, and then appended as noiseless
//! points, so each path follows one deterministic function realization.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::Grad;
use crate::error::{check_dim, Error, Result};
use crate::gp_core::{GpModel, GpPosterior};
use crate::hybrid_dynamics::{solve_nodes, HybridModel, NewtonOptions, Scheme, SystemSpec};
use crate::nmpc::problem::PathConstraints;
use crate::num_kernel::linalg::{semidefinite_lower, Matrix};
use crate::num_kernel::rng::RngStream;
use crate::scalar::Scalar;

/// Relative pivot below which a sampled direction is treated as already determined.
const SAMPLE_PIVOT_TOL: f64 = 1e-9;

/// Control returned by a feedback law.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub u: Vec<f64>,
    /// The law could not produce a feasible plan, even with softened constraints.
    pub failed: bool,
}

/// Feedback law `κ(x, k)`; `Memory` is the per-path mutable state (warm starts, last control).
pub trait Policy: Sync {
    type Memory: Send;
    fn start(&self) -> Self::Memory;
    fn act(&self, x: &[f64], k: usize, memory: &mut Self::Memory) -> Action;
}

/// Open loop: the same control at every step.
#[derive(Clone, Debug)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    type Memory = ();
    fn start(&self) {}
    fn act(&self, _: &[f64], _: usize, _: &mut ()) -> Action {
        Action { u: self.0.clone(), failed: false }
    }
}

/// Stateless feedback from a closure.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&[f64], usize) -> Vec<f64> + Sync> Policy for FnPolicy<F> {
    type Memory = ();
    fn start(&self) {}
    fn act(&self, x: &[f64], k: usize, _: &mut ()) -> Action {
        Action { u: (self.0)(x, k), failed: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub newton: NewtonOptions,
    /// Add σ²_ν to the node covariance when drawing.
    pub include_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { newton: NewtonOptions { tol: 1e-9, max_iter: 50 }, include_noise: false }
    }
}

/// Draws `mean + L ξ` for a possibly singular covariance.
#[derive(Clone, Debug)]
pub struct GaussianNoise {
    lower: Matrix<f64>,
}

impl GaussianNoise {
    pub fn new(cov: &Matrix<f64>) -> Result<Self> {
        let scale = cov.diag().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self { lower: semidefinite_lower(cov, SAMPLE_PIVOT_TOL * scale)? })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn sample(&self, mean: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let xi = rng.normals(self.dim());
        let lx = self.lower.matvec(&xi).expect("square factor");
        mean.iter().zip(lx).map(|(m, v)| m + v).collect()
    }
}

/// One Monte Carlo path in progress.
#[derive(Clone, Debug)]
pub struct SampledPathState {
    pub sample_index: u64,
    pub step: usize,
    pub state: Vec<f64>,
    /// Per-output posteriors including this path's noiseless appends.
    pub posteriors: Vec<Arc<GpPosterior<f64>>>,
    rng: RngStream,
}

impl SampledPathState {
    /// Path `sample_index` with a given initial state (no draw).
    pub fn with_state(gp: &GpModel, master_seed: u64, sample_index: u64, x0: Vec<f64>) -> Self {
        Self {
            sample_index,
            step: 0,
            state: x0,
            posteriors: gp.outputs.iter().map(|o| Arc::new(o.posterior.clone())).collect(),
            rng: RngStream::new(master_seed, sample_index),
        }
    }

    /// Path `sample_index` with `x_0 ~ N(μ_x0, Σ_x0)` drawn from its own stream.
    pub fn start<M: HybridModel>(spec: &SystemSpec<M>, gp: &GpModel, master_seed: u64, sample_index: u64) -> Result<Self> {
        let mut path = Self::with_state(gp, master_seed, sample_index, Vec::new());
        path.state = GaussianNoise::new(&spec.init_cov)?.sample(&spec.init_mean, &mut path.rng);
        Ok(path)
    }

    /// Total number of points in the augmented posterior of output `i`.
    pub fn conditioned_points(&self, i: usize) -> usize {
        self.posteriors[i].len()
    }

    /// Advance one step under control `u`.
    pub fn sample_step<M: HybridModel>(&mut self, spec: &SystemSpec<M>, scheme: &Scheme, gp: &GpModel, u: &[f64], noise: &GaussianNoise, opts: &SamplerOptions) -> Result<()> {
        let model = &spec.model;
        check_dim("control", model.n_u(), u.len())?;
        let d = scheme.nodes();
        let n_q = model.n_q();
        let xi: Vec<Vec<f64>> = (0..n_q).map(|_| self.rng.normals(d)).collect();
        let w = noise.sample(&vec![0.0; model.n_x()], &mut self.rng);

        let posts: Vec<&GpPosterior<f64>> = self.posteriors.iter().map(|p| p.as_ref()).collect();
        let ug: Vec<Grad<f64>> = u.iter().map(|&v| Grad::constant(v)).collect();
        let q_of = |nodes: &[Vec<Grad<f64>>]| -> Result<Vec<Vec<Grad<f64>>>> {
            let latent = draw_nodes(model, gp, &posts, nodes, &ug, &xi, opts.include_noise)?;
            Ok(to_physical_nodes(gp, &latent))
        };
        let sol = solve_nodes(model, scheme, spec.dt, &self.state, u, &q_of, None, &opts.newton)?;

        // the accepted draw in plain arithmetic, then condition on it
        let latent = draw_nodes(model, gp, &posts, &sol.nodes, u, &xi, opts.include_noise)?;
        for i in 0..n_q {
            let post = Arc::make_mut(&mut self.posteriors[i]);
            for (l, node) in sol.nodes.iter().enumerate() {
                let z = gp.outputs[i].input_scaling.apply(&model.q_in(i, node, u));
                post.push_noiseless(z, latent[l][i])?;
            }
        }
        let next: Vec<f64> = sol.x_end.iter().zip(&w).map(|(a, b)| a + b).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure("non-finite sampled state".into()));
        }
        self.state = next;
        self.step += 1;
        Ok(())
    }
}

/// Joint latent draw at the node inputs, `μ + L ξ` per output, node-major.
fn draw_nodes<S: Scalar, M: HybridModel>(model: &M, gp: &GpModel, posts: &[&GpPosterior<f64>], nodes: &[Vec<S>], u: &[S], xi: &[Vec<f64>], include_noise: bool) -> Result<Vec<Vec<S>>> {
    let d = nodes.len();
    let mut out = vec![Vec::with_capacity(posts.len()); d];
    for (i, post) in posts.iter().enumerate() {
        let zs: Vec<Vec<S>> = nodes.iter().map(|x| gp.outputs[i].input_scaling.apply(&model.q_in(i, x, u))).collect();
        let (mean, mut cov) = post.joint(&zs);
        if include_noise {
            for l in 0..d {
                cov[(l, l)] += S::c(post.hyper.noise_var);
            }
        }
        let lower = semidefinite_lower(&cov, S::c(SAMPLE_PIVOT_TOL * post.hyper.magnitude_sq))?;
        for l in 0..d {
            let mut v = mean[l];
            for m in 0..=l {
                v += lower[(l, m)] * S::c(xi[i][m]);
            }
            out[l].push(v);
        }
    }
    Ok(out)
}

fn to_physical_nodes<S: Scalar>(gp: &GpModel, latent: &[Vec<S>]) -> Vec<Vec<S>> {
    latent.iter().map(|row| row.iter().zip(&gp.outputs).map(|(&v, o)| o.latent_scaling.to_physical(v)).collect()).collect()
}

/// One step of the mean model (q = posterior mean at the nodes, no disturbance).
pub fn nominal_step<M: HybridModel>(spec: &SystemSpec<M>, scheme: &Scheme, gp: &GpModel, x: &[f64], u: &[f64], opts: &NewtonOptions) -> Result<Vec<f64>> {
    let model = &spec.model;
    let ug: Vec<Grad<f64>> = u.iter().map(|&v| Grad::constant(v)).collect();
    let q_of = |nodes: &[Vec<Grad<f64>>]| -> Result<Vec<Vec<Grad<f64>>>> {
        Ok(nodes.iter().map(|xl| gp.mean(&(0..model.n_q()).map(|i| model.q_in(i, xl, &ug)).collect::<Vec<_>>())).collect())
    };
    Ok(solve_nodes(model, scheme, spec.dt, x, u, &q_of, None, opts)?.x_end)
}

/// How a path ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "step")]
pub enum PathStatus {
    Completed,
    /// The controller failed at this step, even with softened constraints.
    PolicyFailed(usize),
    /// The sampled dynamics could not be solved at this step.
    StepFailed(usize),
}

impl PathStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, PathStatus::Completed)
    }
}

/// Monte Carlo closed-loop trajectories.
///
/// Entries after an abnormal end are NaN and the path counts as violating
/// (`worst_case = +∞`). Constraints that do not apply at a step are NaN too.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    /// Per path, (T+1) × n_x.
    pub states: Vec<Matrix<f64>>,
    /// Per path, T × n_u.
    pub controls: Vec<Matrix<f64>>,
    /// Per path, (T+1) × n_g.
    pub constraint_values: Vec<Matrix<f64>>,
    pub worst_case: Vec<f64>,
    pub seeds: Vec<u64>,
    pub status: Vec<PathStatus>,
}

impl TrajectoryEnsemble {
    pub fn len(&self) -> usize {
        self.worst_case.len()
    }

    pub fn is_empty(&self) -> bool {
        self.worst_case.is_empty()
    }

    /// Values of `g_j` at step `k` across paths (non-finite entries become +∞).
    pub fn constraint_column(&self, j: usize, k: usize) -> Vec<f64> {
        self.constraint_values.iter().map(|g| if g[(k, j)].is_finite() { g[(k, j)] } else { f64::INFINITY }).collect()
    }
}

/// `C = max_(j,k) g_j(x_k)`; `C ≤ 0` exactly when every constraint holds. NaN entries are skipped.
pub fn worst_case_constraint(values: &Matrix<f64>) -> f64 {
    values.data().iter().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, |m, &v| m.max(v))
}

fn record_constraints<G: PathConstraints>(g: &G, x: &[f64], k: usize, row: &mut [f64]) {
    let vals = g.eval(x);
    for (j, v) in vals.into_iter().enumerate() {
        row[j] = if g.applies(j, k) { v } else { f64::NAN };
    }
}

struct PathRecord {
    states: Matrix<f64>,
    controls: Matrix<f64>,
    gvals: Matrix<f64>,
    status: PathStatus,
}

fn run_path<M, P, G>(spec: &SystemSpec<M>, scheme: &Scheme, gp: &GpModel, policy: &P, constraints: &G, master_seed: u64, s: u64, noise: &GaussianNoise, opts: &SamplerOptions) -> Result<PathRecord>
where
    M: HybridModel,
    P: Policy,
    G: PathConstraints,
{
    let (t, n_x, n_u, n_g) = (spec.horizon, spec.model.n_x(), spec.model.n_u(), constraints.n_g());
    let mut states = Matrix::from_fn(t + 1, n_x, |_, _| f64::NAN);
    let mut controls = Matrix::from_fn(t, n_u, |_, _| f64::NAN);
    let mut gvals = Matrix::from_fn(t + 1, n_g, |_, _| f64::NAN);
    let mut path = SampledPathState::start(spec, gp, master_seed, s)?;
    let mut memory = policy.start();
    let mut status = PathStatus::Completed;
    for k in 0..=t {
        states.row_mut(k).copy_from_slice(&path.state);
        record_constraints(constraints, &path.state, k, gvals.row_mut(k));
        if k == t {
            break;
        }
        let action = policy.act(&path.state, k, &mut memory);
        check_dim("policy control", n_u, action.u.len())?;
        controls.row_mut(k).copy_from_slice(&action.u);
        if action.failed {
            status = PathStatus::PolicyFailed(k);
            break;
        }
        if let Err(e) = path.sample_step(spec, scheme, gp, &action.u, noise, opts) {
            log::debug!("path {s}: step {k} failed: {e}");
            status = PathStatus::StepFailed(k);
            break;
        }
    }
    Ok(PathRecord { states, controls, gvals, status })
}

/// `S` independent closed-loop paths; path `s` uses stream `s` of `master_seed`.
pub fn simulate_closed_loop<M, P, G>(spec: &SystemSpec<M>, scheme: &Scheme, gp: &GpModel, policy: &P, constraints: &G, samples: usize, master_seed: u64, opts: &SamplerOptions) -> Result<TrajectoryEnsemble>
where
    M: HybridModel,
    P: Policy,
    G: PathConstraints,
{
    spec.validate()?;
    check_dim("GP outputs", spec.model.n_q(), gp.n_q())?;
    let noise = GaussianNoise::new(&spec.disturbance_cov)?;
    let records: Vec<PathRecord> = (0..samples as u64)
        .into_par_iter()
        .map(|s| run_path(spec, scheme, gp, policy, constraints, master_seed, s, &noise, opts))
        .collect::<Result<_>>()?;
    let mut ens = TrajectoryEnsemble { states: Vec::new(), controls: Vec::new(), constraint_values: Vec::new(), worst_case: Vec::new(), seeds: Vec::new(), status: Vec::new() };
    for (s, r) in records.into_iter().enumerate() {
        let c = if r.status.is_completed() { worst_case_constraint(&r.gvals) } else { f64::INFINITY };
        ens.worst_case.push(c);
        ens.seeds.push(s as u64);
        ens.status.push(r.status);
        ens.states.push(r.states);
        ens.controls.push(r.controls);
        ens.constraint_values.push(r.gvals);
    }
    Ok(ens)
}

/// Closed loop of the mean model from `μ_x0` without disturbances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NominalTrajectory {
    pub states: Matrix<f64>,
    pub controls: Matrix<f64>,
    pub constraint_values: Matrix<f64>,
    pub status: PathStatus,
}

pub fn nominal_closed_loop<M, P, G>(spec: &SystemSpec<M>, scheme: &Scheme, gp: &GpModel, policy: &P, constraints: &G, newton: &NewtonOptions) -> Result<NominalTrajectory>
where
    M: HybridModel,
    P: Policy,
    G: PathConstraints,
{
    let (t, n_x, n_u, n_g) = (spec.horizon, spec.model.n_x(), spec.model.n_u(), constraints.n_g());
    let mut states = Matrix::from_fn(t + 1, n_x, |_, _| f64::NAN);
    let mut controls = Matrix::from_fn(t, n_u, |_, _| f64::NAN);
    let mut gvals = Matrix::from_fn(t + 1, n_g, |_, _| f64::NAN);
    let mut memory = policy.start();
    let mut x = spec.init_mean.clone();
    let mut status = PathStatus::Completed;
    for k in 0..=t {
        states.row_mut(k).copy_from_slice(&x);
        record_constraints(constraints, &x, k, gvals.row_mut(k));
        if k == t {
            break;
        }
        let action = policy.act(&x, k, &mut memory);
        controls.row_mut(k).copy_from_slice(&action.u);
        if action.failed {
            status = PathStatus::PolicyFailed(k);
            break;
        }
        match nominal_step(spec, scheme, gp, &x, &action.u, newton) {
            Ok(next) => x = next,
            Err(_) => {
                status = PathStatus::StepFailed(k);
                break;
            }
        }
    }
    Ok(NominalTrajectory { states, controls, constraint_values: gvals, status })
}

#[cfg(test)]
mod tests;
