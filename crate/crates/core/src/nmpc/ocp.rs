//! Receding-horizon optimal control on the GP mean model.
//!
//! The program is solved in the reduced space of the controls: for given
//! controls, the node states of every step are eliminated by Newton's method
//! and their sensitivities follow from the implicit function theorem, so the
//! collocation equations hold to the Newton tolerance at every iterate.

use serde::{Deserialize, Serialize};

use crate::dual::{Grad, GRAD_CAPACITY};
use crate::error::{check_dim, Error, Result};
use crate::gp_core::GpModel;
use crate::gp_path_sampler::{Action, Policy};
use crate::hybrid_dynamics::{collocation_residual, solve_nodes, HybridModel, NewtonOptions, Scheme, SystemSpec};
use crate::num_kernel::linalg::{norm_inf, Lu, Matrix};

use super::problem::{ControlBox, CostSpec, PathConstraints};
use super::sqp::{solve_sqp, Nlp, NlpEval, SqpOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Scaled KKT tolerance.
    pub tol: f64,
    /// Largest admissible constraint value counted as satisfied.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Soft-phase penalty per unit of violation, relative to `max(1, |objective|)`.
    pub slack_weight: f64,
    pub newton: NewtonOptions,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-6, feas_tol: 1e-6, max_iter: 100, slack_weight: 1e6, newton: NewtonOptions { tol: 1e-12, max_iter: 50 } }
    }
}

/// Everything fixed for a closed loop.
#[derive(Clone, Debug)]
pub struct OcpConfig<C, G> {
    /// Final time index T.
    pub horizon: usize,
    pub scheme: Scheme,
    pub costs: C,
    pub constraints: G,
    pub control_box: ControlBox,
    /// n_g × (T+1) back-offs added to the constraints at each time index.
    pub backoffs: Matrix<f64>,
    pub solver: SolverOptions,
    /// Control taken as "previous" at k = 0; box midpoint when `None`.
    pub initial_control: Option<Vec<f64>>,
}

impl<C: CostSpec, G: PathConstraints> OcpConfig<C, G> {
    pub fn validate<M: HybridModel>(&self, spec: &SystemSpec<M>) -> Result<()> {
        check_dim("control box", spec.model.n_u(), self.control_box.dim())?;
        check_dim("back-off rows", self.constraints.n_g(), self.backoffs.rows())?;
        check_dim("back-off columns", self.horizon + 1, self.backoffs.cols())?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if let Some(u) = &self.initial_control {
            check_dim("initial control", spec.model.n_u(), u.len())?;
        }
        let dirs = self.scheme.nodes() * spec.model.n_x() + spec.model.n_x() + spec.model.n_u();
        if dirs > GRAD_CAPACITY {
            return Err(Error::Config(format!("{dirs} sensitivity directions exceed the derivative capacity")));
        }
        Ok(())
    }

    pub fn initial_previous_control(&self) -> Vec<f64> {
        self.initial_control.clone().unwrap_or_else(|| self.control_box.midpoint())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcpStatus {
    /// KKT conditions met with all tightened constraints satisfied.
    Optimal,
    /// Feasible, but the KKT tolerance was not reached within the iteration cap.
    Feasible,
    /// Only the penalized re-solve produced a point; constraints are violated by `slack_total`.
    SoftFeasible,
    Failed,
}

impl OcpStatus {
    pub fn is_usable(&self) -> bool {
        !matches!(self, OcpStatus::Failed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OcpSolution {
    /// (T−k) × n_u.
    pub controls: Matrix<f64>,
    /// Predicted states x_k..x_T, (T−k+1) × n_x.
    pub states: Matrix<f64>,
    pub objective: f64,
    pub status: OcpStatus,
    /// Sum of positive tightened-constraint values.
    pub slack_total: f64,
    pub iterations: usize,
    pub kkt: f64,
}

/// Full-space size of the transcription: controls plus node states.
pub fn decision_dim(steps: usize, n_u: usize, nodes: usize, n_x: usize) -> usize {
    steps * (n_u + nodes * n_x)
}

/// Rollout of one control sequence with first-order sensitivities.
struct Rollout {
    states: Vec<Vec<f64>>,
    /// d x_j / d U, n_x × (H·n_u) per state.
    sens: Vec<Matrix<f64>>,
    nodes: Vec<Vec<Vec<f64>>>,
}

/// The program for one state and time index.
pub struct OcpProgram<'a, M, C, G> {
    spec: &'a SystemSpec<M>,
    gp: &'a GpModel,
    config: &'a OcpConfig<C, G>,
    x0: Vec<f64>,
    k: usize,
    u_prev: Vec<f64>,
    /// (j, time index) of each constraint row.
    rows: Vec<(usize, usize)>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    guesses: std::sync::Mutex<Option<Vec<Vec<Vec<f64>>>>>,
}

impl<'a, M: HybridModel, C: CostSpec, G: PathConstraints> OcpProgram<'a, M, C, G> {
    pub fn new(spec: &'a SystemSpec<M>, gp: &'a GpModel, config: &'a OcpConfig<C, G>, x: &[f64], k: usize, u_prev: &[f64]) -> Result<Self> {
        config.validate(spec)?;
        check_dim("state", spec.model.n_x(), x.len())?;
        check_dim("previous control", spec.model.n_u(), u_prev.len())?;
        if k >= config.horizon {
            return Err(Error::Config(format!("time index {k} is not before the horizon {}", config.horizon)));
        }
        let steps = config.horizon - k;
        let mut rows = Vec::new();
        for t in k + 1..=config.horizon {
            for j in 0..config.constraints.n_g() {
                if config.constraints.applies(j, t) {
                    rows.push((j, t));
                }
            }
        }
        let b = &config.control_box;
        let lower = (0..steps).flat_map(|_| b.lower.iter().copied()).collect();
        let upper = (0..steps).flat_map(|_| b.upper.iter().copied()).collect();
        Ok(Self { spec, gp, config, x0: x.to_vec(), k, u_prev: u_prev.to_vec(), rows, lower, upper, guesses: std::sync::Mutex::new(None) })
    }

    pub fn steps(&self) -> usize {
        self.config.horizon - self.k
    }

    pub fn decision_dim(&self) -> usize {
        let m = &self.spec.model;
        decision_dim(self.steps(), m.n_u(), self.config.scheme.nodes(), m.n_x())
    }

    /// Constraint rows as (constraint index, time index).
    pub fn constraint_rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    fn n_u(&self) -> usize {
        self.spec.model.n_u()
    }

    fn q_at<S: crate::Scalar>(&self, nodes: &[Vec<S>], u: &[S]) -> Vec<Vec<S>> {
        let model = &self.spec.model;
        nodes.iter().map(|xl| self.gp.mean(&(0..model.n_q()).map(|i| model.q_in(i, xl, u)).collect::<Vec<_>>())).collect()
    }

    fn rollout(&self, controls: &[f64]) -> Result<Rollout> {
        let model = &self.spec.model;
        let (n_x, n_u) = (model.n_x(), model.n_u());
        let d = self.config.scheme.nodes();
        let nv = controls.len();
        let dn = d * n_x;
        let dirs = dn + n_x + n_u;
        let dt = self.spec.dt;
        let scheme = &self.config.scheme;
        let previous = self.guesses.lock().map(|g| g.clone()).unwrap_or(None);

        let mut states = vec![self.x0.clone()];
        let mut sens = vec![Matrix::zeros(n_x, nv)];
        let mut all_nodes = Vec::with_capacity(self.steps());
        for j in 0..self.steps() {
            let x = &states[j];
            let u = &controls[j * n_u..(j + 1) * n_u];
            let ug: Vec<Grad<f64>> = u.iter().map(|&v| Grad::constant(v)).collect();
            let q_of = |nodes: &[Vec<Grad<f64>>]| -> Result<Vec<Vec<Grad<f64>>>> { Ok(self.q_at(nodes, &ug)) };
            let guess = previous.as_ref().and_then(|g| g.get(j)).map(|g| g.as_slice());
            let sol = match solve_nodes(model, scheme, dt, x, u, &q_of, guess, &self.config.solver.newton) {
                Ok(s) => s,
                Err(_) if guess.is_some() => solve_nodes(model, scheme, dt, x, u, &q_of, None, &self.config.solver.newton)?,
                Err(e) => return Err(e),
            };

            // seeds: node states, then x, then u
            let nodes_g: Vec<Vec<Grad<f64>>> = (0..d).map(|l| (0..n_x).map(|i| Grad::variable(sol.nodes[l][i], l * n_x + i, dirs)).collect()).collect();
            let xg: Vec<Grad<f64>> = (0..n_x).map(|i| Grad::variable(x[i], dn + i, dirs)).collect();
            let ug: Vec<Grad<f64>> = (0..n_u).map(|i| Grad::variable(u[i], dn + n_x + i, dirs)).collect();
            let q = self.q_at(&nodes_g, &ug);
            let (r, x_end) = collocation_residual(model, scheme, dt, &xg, &ug, &nodes_g, &q);
            let r_nodes = Matrix::from_fn(dn, dn, |a, b| r[a].d(b));
            let r_xu = Matrix::from_fn(dn, n_x + n_u, |a, b| r[a].d(dn + b));
            // dX̂/d(x,u) = −R_X̂⁻¹ R_(x,u)
            let lu = Lu::new(&r_nodes)?;
            let mut dnodes = Matrix::zeros(dn, n_x + n_u);
            for c in 0..n_x + n_u {
                let col: Vec<f64> = (0..dn).map(|a| -r_xu[(a, c)]).collect();
                let s = lu.solve(&col)?;
                for a in 0..dn {
                    dnodes[(a, c)] = s[a];
                }
            }
            // d x⁺/d(x,u) = E_X̂ dX̂ + E_(x,u)
            let jac = Matrix::from_fn(n_x, n_x + n_u, |i, c| x_end[i].d(dn + c) + (0..dn).map(|a| x_end[i].d(a) * dnodes[(a, c)]).sum::<f64>());
            let prev = &sens[j];
            let next = Matrix::from_fn(n_x, nv, |i, v| {
                let mut s: f64 = (0..n_x).map(|m| jac[(i, m)] * prev[(m, v)]).sum();
                if v >= j * n_u && v < (j + 1) * n_u {
                    s += jac[(i, n_x + v - j * n_u)];
                }
                s
            });
            if x_end.iter().any(|v| !v.re.is_finite()) {
                return Err(Error::Domain("non-finite predicted state".into()));
            }
            states.push(x_end.iter().map(|v| v.re).collect());
            sens.push(next);
            all_nodes.push(sol.nodes);
        }
        Ok(Rollout { states, sens, nodes: all_nodes })
    }

    /// Objective and its gradient with respect to the controls.
    fn objective(&self, controls: &[f64], ro: &Rollout) -> (f64, Vec<f64>) {
        let n_u = self.n_u();
        let n_x = self.spec.model.n_x();
        let nv = controls.len();
        let costs = &self.config.costs;
        let mut f = 0.0;
        let mut grad = vec![0.0; nv];
        let dirs = n_x + 2 * n_u;
        for j in 0..self.steps() {
            let u = &controls[j * n_u..(j + 1) * n_u];
            let up = if j == 0 { &self.u_prev[..] } else { &controls[(j - 1) * n_u..j * n_u] };
            let xg: Vec<Grad<f64>> = (0..n_x).map(|i| Grad::variable(ro.states[j][i], i, dirs)).collect();
            let ug: Vec<Grad<f64>> = (0..n_u).map(|i| Grad::variable(u[i], n_x + i, dirs)).collect();
            let pg: Vec<Grad<f64>> = (0..n_u).map(|i| Grad::variable(up[i], n_x + n_u + i, dirs)).collect();
            let l = costs.stage(&xg, &ug, &pg);
            f += l.re;
            for v in 0..nv {
                grad[v] += (0..n_x).map(|i| l.d(i) * ro.sens[j][(i, v)]).sum::<f64>();
            }
            for i in 0..n_u {
                grad[j * n_u + i] += l.d(n_x + i);
                if j > 0 {
                    grad[(j - 1) * n_u + i] += l.d(n_x + n_u + i);
                }
            }
        }
        let h = self.steps();
        let xg: Vec<Grad<f64>> = (0..n_x).map(|i| Grad::variable(ro.states[h][i], i, n_x)).collect();
        let lf = costs.terminal(&xg);
        f += lf.re;
        for v in 0..nv {
            grad[v] += (0..n_x).map(|i| lf.d(i) * ro.sens[h][(i, v)]).sum::<f64>();
        }
        (f, grad)
    }

    fn constraints(&self, ro: &Rollout, nv: usize) -> (Vec<f64>, Matrix<f64>) {
        let n_x = self.spec.model.n_x();
        let mut c = Vec::with_capacity(self.rows.len());
        let mut jac = Matrix::zeros(self.rows.len(), nv);
        let mut cache: Option<(usize, Vec<Grad<f64>>)> = None;
        for (r, &(j, t)) in self.rows.iter().enumerate() {
            let step = t - self.k;
            if cache.as_ref().is_none_or(|(s, _)| *s != step) {
                let xg: Vec<Grad<f64>> = (0..n_x).map(|i| Grad::variable(ro.states[step][i], i, n_x)).collect();
                cache = Some((step, self.config.constraints.eval(&xg)));
            }
            let g = &cache.as_ref().expect("filled above").1[j];
            c.push(g.re + self.config.backoffs[(j, t)]);
            for v in 0..nv {
                jac[(r, v)] = (0..n_x).map(|i| g.d(i) * ro.sens[step][(i, v)]).sum();
            }
        }
        (c, jac)
    }

    /// Predicted states x_k..x_T for a control sequence.
    pub fn predict(&self, controls: &[f64]) -> Result<Matrix<f64>> {
        check_dim("controls", self.steps() * self.n_u(), controls.len())?;
        let ro = self.rollout(controls)?;
        let n_x = self.spec.model.n_x();
        Ok(Matrix::from_fn(ro.states.len(), n_x, |r, c| ro.states[r][c]))
    }

    /// Collocation residual ∞-norm over all steps at the converged nodes.
    pub fn transcription_residual(&self, controls: &[f64]) -> Result<f64> {
        let ro = self.rollout(controls)?;
        let n_u = self.n_u();
        let mut worst = 0.0f64;
        for j in 0..self.steps() {
            let u = &controls[j * n_u..(j + 1) * n_u];
            let q = self.q_at(&ro.nodes[j], u);
            let (r, x_end) = collocation_residual(&self.spec.model, &self.config.scheme, self.spec.dt, &ro.states[j], u, &ro.nodes[j], &q);
            worst = worst.max(norm_inf(&r));
            let gap: Vec<f64> = x_end.iter().zip(&ro.states[j + 1]).map(|(a, b)| a - b).collect();
            worst = worst.max(norm_inf(&gap));
        }
        Ok(worst)
    }
}

impl<M: HybridModel, C: CostSpec, G: PathConstraints> Nlp for OcpProgram<'_, M, C, G> {
    fn n(&self) -> usize {
        self.steps() * self.n_u()
    }
    fn m(&self) -> usize {
        self.rows.len()
    }
    fn lower(&self) -> &[f64] {
        &self.lower
    }
    fn upper(&self) -> &[f64] {
        &self.upper
    }
    fn eval(&self, x: &[f64]) -> Result<NlpEval> {
        let ro = self.rollout(x)?;
        let (f, grad) = self.objective(x, &ro);
        let (c, jac) = self.constraints(&ro, x.len());
        if let Ok(mut g) = self.guesses.lock() {
            *g = Some(ro.nodes);
        }
        Ok(NlpEval { f, grad, c, jac })
    }
}

/// Solve the program from a warm start (box midpoint when `None`).
///
/// When no feasible point is found, the problem is re-solved with the
/// constraint violation penalized instead of enforced.
pub fn solve_ocp<M: HybridModel, C: CostSpec, G: PathConstraints>(program: &OcpProgram<'_, M, C, G>, warm_start: Option<&[f64]>) -> Result<OcpSolution> {
    let n_u = program.n_u();
    let steps = program.steps();
    let opts = &program.config.solver;
    let bx = &program.config.control_box;
    let start: Vec<f64> = match warm_start {
        Some(w) => {
            check_dim("warm start", steps * n_u, w.len())?;
            w.chunks(n_u).flat_map(|u| bx.clamp(u)).collect()
        }
        None => (0..steps).flat_map(|_| bx.midpoint()).collect(),
    };
    let feasible = |e: &NlpEval| e.violation() <= opts.feas_tol;
    let warm_eval = program.eval(&start).ok();

    let sqp = SqpOptions { tol: opts.tol, max_iter: opts.max_iter, fixed_penalty: None, max_penalty: 1e8 };
    let mut best = solve_sqp(program, &start, &sqp).ok().filter(|r| feasible(&r.eval));
    if let (Some(r), Some(w)) = (&mut best, &warm_eval) {
        if feasible(w) && w.f < r.eval.f {
            // never hand back something worse than a feasible warm start
            r.x = start.clone();
            r.eval = w.clone();
            r.converged = false;
        }
    }
    let (res, hard_phase) = match best {
        Some(r) => (r, true),
        None => {
            let scale = warm_eval.as_ref().map(|w| w.f.abs()).filter(|f| f.is_finite()).unwrap_or(1.0).max(1.0);
            let soft = SqpOptions { fixed_penalty: Some(opts.slack_weight * scale), ..sqp };
            match solve_sqp(program, &start, &soft) {
                Ok(r) => (r, false),
                Err(e) => return Ok(failed(program, &start, e)),
            }
        }
    };
    let states = program.predict(&res.x)?;
    let slack_total: f64 = res.eval.c.iter().map(|v| v.max(0.0)).sum();
    let status = if hard_phase || feasible(&res.eval) {
        if res.converged && res.kkt <= opts.tol {
            OcpStatus::Optimal
        } else {
            OcpStatus::Feasible
        }
    } else {
        OcpStatus::SoftFeasible
    };
    let slack_total = if feasible(&res.eval) { 0.0 } else { slack_total };
    Ok(OcpSolution {
        controls: Matrix::from_fn(steps, n_u, |r, c| res.x[r * n_u + c]),
        states,
        objective: res.eval.f,
        status,
        slack_total,
        iterations: res.iterations,
        kkt: res.kkt,
    })
}

fn failed<M: HybridModel, C: CostSpec, G: PathConstraints>(program: &OcpProgram<'_, M, C, G>, start: &[f64], err: Error) -> OcpSolution {
    log::debug!("OCP failed at k = {}: {err}", program.k);
    let n_u = program.n_u();
    let steps = program.steps();
    let n_x = program.spec.model.n_x();
    OcpSolution {
        controls: Matrix::from_fn(steps, n_u, |r, c| start[r * n_u + c]),
        states: Matrix::from_fn(steps + 1, n_x, |_, _| f64::NAN),
        objective: f64::NAN,
        status: OcpStatus::Failed,
        slack_total: f64::INFINITY,
        iterations: 0,
        kkt: f64::INFINITY,
    }
}

/// Per-path controller state.
#[derive(Clone, Debug, Default)]
pub struct NmpcMemory {
    /// Last solved control plan, (T−k) × n_u.
    pub plan: Option<Matrix<f64>>,
    pub u_prev: Vec<f64>,
    /// Status of each solve so far.
    pub statuses: Vec<OcpStatus>,
}

/// Receding-horizon feedback: solve at (x, k), apply the first control.
pub struct NmpcPolicy<'a, M, C, G> {
    pub spec: &'a SystemSpec<M>,
    pub gp: &'a GpModel,
    pub config: &'a OcpConfig<C, G>,
}

impl<'a, M: HybridModel, C: CostSpec, G: PathConstraints> NmpcPolicy<'a, M, C, G> {
    pub fn new(spec: &'a SystemSpec<M>, gp: &'a GpModel, config: &'a OcpConfig<C, G>) -> Result<Self> {
        config.validate(spec)?;
        Ok(Self { spec, gp, config })
    }

    /// Solve at (x, k) with the warm start implied by `memory`, without updating it.
    pub fn plan(&self, x: &[f64], k: usize, memory: &NmpcMemory) -> Result<OcpSolution> {
        let program = OcpProgram::new(self.spec, self.gp, self.config, x, k, &memory.u_prev)?;
        let n_u = self.spec.model.n_u();
        let steps = program.steps();
        // shift by one, repeating the last control
        let warm: Option<Vec<f64>> = memory.plan.as_ref().filter(|p| p.rows() > 0).map(|p| (0..steps).flat_map(|r| p.row((r + 1).min(p.rows() - 1)).to_vec()).collect());
        debug_assert!(warm.as_ref().is_none_or(|w| w.len() == steps * n_u));
        solve_ocp(&program, warm.as_deref())
    }
}

impl<M: HybridModel, C: CostSpec, G: PathConstraints> Policy for NmpcPolicy<'_, M, C, G> {
    type Memory = NmpcMemory;

    fn start(&self) -> NmpcMemory {
        NmpcMemory { plan: None, u_prev: self.config.initial_previous_control(), statuses: Vec::new() }
    }

    fn act(&self, x: &[f64], k: usize, memory: &mut NmpcMemory) -> Action {
        match self.plan(x, k, memory) {
            Ok(sol) if sol.status.is_usable() => {
                let u = sol.controls.row(0).to_vec();
                memory.statuses.push(sol.status);
                memory.u_prev = u.clone();
                memory.plan = Some(sol.controls);
                Action { u, failed: false }
            }
            other => {
                if let Err(e) = &other {
                    log::debug!("NMPC solve error at k = {k}: {e}");
                }
                memory.statuses.push(OcpStatus::Failed);
                let u = self.config.control_box.clamp(&memory.u_prev);
                memory.plan = None;
                Action { u, failed: true }
            }
        }
    }
}
