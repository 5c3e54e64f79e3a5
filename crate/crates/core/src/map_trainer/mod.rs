//! MAP training of the hybrid GP: latent targets `Q`, node values `Q̂`, and
//! log-hyperparameters are fitted jointly by minimizing the negative log posterior.
//!
//! Node states are eliminated per datum by Newton's method, so the collocation
//! equations hold to solver tolerance at every evaluated candidate. Gradients
//! use the adjoint of those equations.

pub mod lbfgs;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{Grad, GRAD_CAPACITY};
use crate::error::{check_dim, Error, Result};
use crate::gp_core::{training_covariance, GpModel, GpOutput, GpPosterior, InputScaling, KernelHyperparams, LatentScaling};
use crate::hybrid_dynamics::{collocation_residual, solve_nodes, HybridModel, NewtonOptions, Scheme, SystemSpec};
use crate::num_kernel::linalg::{cholesky, dot, Lu, Matrix, SpdFactor};
use crate::num_kernel::rng::RngStream;

pub use lbfgs::{LbfgsOptions, LbfgsResult};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observed transitions: rows of `(x_k, u_k)` and the noisy next measurement `y_{k+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub inputs_z: Matrix<f64>,
    pub outputs_y: Matrix<f64>,
}

impl TrainingData {
    pub fn new(inputs_z: Matrix<f64>, outputs_y: Matrix<f64>) -> Result<Self> {
        check_dim("training rows", inputs_z.rows(), outputs_y.rows())?;
        if inputs_z.data().iter().chain(outputs_y.data()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("training data contains non-finite entries".into()));
        }
        Ok(Self { inputs_z, outputs_y })
    }

    pub fn len(&self) -> usize {
        self.inputs_z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Order-independent fingerprint of the rows (FNV-1a over sorted row hashes).
    pub fn fingerprint(&self) -> u64 {
        let mut rows: Vec<u64> = (0..self.len()).map(|j| self.row_hash(j)).collect();
        rows.sort_unstable();
        rows.iter().fold(0xcbf2_9ce4_8422_2325, |h, &r| fnv(h, r))
    }

    fn row_hash(&self, j: usize) -> u64 {
        self.inputs_z.row(j).iter().chain(self.outputs_y.row(j)).fold(0xcbf2_9ce4_8422_2325, |h, v| fnv(h, v.to_bits()))
    }
}

fn fnv(mut h: u64, v: u64) -> u64 {
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Gaussian density used as a prior penalty.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub cov: Matrix<f64>,
    factor: SpdFactor<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: Matrix<f64>) -> Result<Self> {
        check_dim("prior covariance", mean.len(), cov.rows())?;
        let factor = cholesky(&cov)?;
        Ok(Self { mean, cov, factor })
    }

    pub fn diagonal(mean: Vec<f64>, var: &[f64]) -> Result<Self> {
        check_dim("prior variances", mean.len(), var.len())?;
        Self::new(mean, Matrix::from_diag(var))
    }

    pub fn isotropic(n: usize, mean: f64, var: f64) -> Result<Self> {
        Self::diagonal(vec![mean; n], &vec![var; n])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn nll(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let w = self.factor.solve_lower(&d).expect("dimension checked");
        0.5 * dot(&w, &w) + 0.5 * self.factor.log_det() + 0.5 * self.dim() as f64 * LN_2PI
    }

    /// `Σ⁻¹ (x − μ)`.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.factor.solve(&d).expect("dimension checked")
    }

    pub fn marginal_std(&self, i: usize) -> f64 {
        self.cov[(i, i)].sqrt()
    }
}

/// Prior factors of the MAP objective.
#[derive(Clone, Debug)]
pub struct PriorSpec {
    /// On the stacked latent targets `[Q_1; …; Q_nq]` (length N·n_q).
    pub q: GaussianPrior,
    /// On the stacked node values `[Q̂_1; …]` (length d_s·N·n_q).
    pub qhat: GaussianPrior,
    /// On the natural-scale hyperparameters `[λ²…, ζ², σ²]` of each output.
    pub psi: Vec<GaussianPrior>,
    /// Include the standalone `p(Q)` and `p(Q̂)` factors.
    pub include_standalone: bool,
    /// Place the Ψ prior on `ln Ψ` instead of `Ψ`.
    pub psi_log_scale: bool,
}

#[derive(Clone, Debug)]
pub struct MapOptions {
    pub multistarts: usize,
    pub lbfgs: LbfgsOptions,
    pub newton: NewtonOptions,
    pub seed: u64,
    /// Standardize each GP input column using the training inputs.
    pub normalize_inputs: bool,
    /// Per-output map from latent GP values to physical q (identity by default).
    pub latent_scaling: Option<Vec<LatentScaling>>,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { multistarts: 5, lbfgs: LbfgsOptions::default(), newton: NewtonOptions::default(), seed: 0, normalize_inputs: true, latent_scaling: None }
    }
}

/// Result of MAP training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapSolution {
    /// Latent targets, N × n_q.
    pub q_star: Matrix<f64>,
    /// Node values, (d_s·N) × n_q, datum-major.
    pub qhat_star: Matrix<f64>,
    pub psi_star: Vec<KernelHyperparams<f64>>,
    pub nll: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the winning multistart.
    pub start: usize,
    /// Scaled GP training inputs per output.
    pub train_inputs: Vec<Vec<Vec<f64>>>,
    pub input_scaling: Vec<InputScaling>,
    pub latent_scaling: Vec<LatentScaling>,
}

impl MapSolution {
    /// Posterior model with `D = (Z, Q*)` per output.
    pub fn gp_model(&self) -> Result<GpModel> {
        let outputs = (0..self.psi_star.len())
            .map(|i| {
                let n = self.train_inputs[i].len();
                let posterior = GpPosterior::build(self.train_inputs[i].clone(), self.q_star.column(i), vec![true; n], self.psi_star[i].clone())?;
                Ok(GpOutput { posterior, input_scaling: self.input_scaling[i].clone(), latent_scaling: self.latent_scaling[i] })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GpModel { outputs })
    }
}

/// Packed decision vector layout: `[Q_1 … Q_nq | Q̂_1 … Q̂_nq | θ_1 … θ_nq]`
/// with `θ_i = ln[λ²…, ζ², σ²]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub d: usize,
    pub n_q: usize,
    pub psi_dims: Vec<usize>,
}

impl Layout {
    pub fn q(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }
    pub fn qhat(&self, i: usize, j: usize, l: usize) -> usize {
        self.n * self.n_q + i * self.n * self.d + j * self.d + l
    }
    pub fn psi(&self, i: usize) -> usize {
        self.n * self.n_q * (1 + self.d) + self.psi_dims[..i].iter().sum::<usize>()
    }
    pub fn qhat_start(&self) -> usize {
        self.n * self.n_q
    }
    pub fn dim(&self) -> usize {
        self.psi(self.n_q) + 0
    }
}

/// The MAP objective for one dataset.
pub struct MapProblem<'a, M> {
    pub model: &'a M,
    pub scheme: &'a Scheme,
    pub dt: f64,
    pub data: &'a TrainingData,
    pub priors: &'a PriorSpec,
    pub newton: NewtonOptions,
    pub layout: Layout,
    meas: Matrix<f64>,
    out_factor: SpdFactor<f64>,
    train_in: Vec<Vec<Vec<f64>>>,
    scaling: Vec<InputScaling>,
    latent: Vec<LatentScaling>,
}

/// Warm starts for the per-datum node solves.
pub type NodeCache = Vec<Option<Vec<Vec<f64>>>>;

struct Evaluated {
    nll: f64,
    grad: Option<Vec<f64>>,
}

impl<'a, M: HybridModel> MapProblem<'a, M> {
    pub fn new(spec: &'a SystemSpec<M>, scheme: &'a Scheme, data: &'a TrainingData, priors: &'a PriorSpec, opts: &MapOptions) -> Result<Self> {
        let model = &spec.model;
        let (n_x, n_u, n_q) = (model.n_x(), model.n_u(), model.n_q());
        let n = data.len();
        let d = scheme.nodes();
        check_dim("training input columns", n_x + n_u, data.inputs_z.cols())?;
        check_dim("training output columns", spec.n_y(), data.outputs_y.cols())?;
        if n < n_q + 1 {
            return Err(Error::Domain(format!("MAP training needs at least {} points, got {n}", n_q + 1)));
        }
        if d * (n_x + n_q) > GRAD_CAPACITY {
            return Err(Error::Config("collocation system too large for the derivative capacity".into()));
        }
        let psi_dims: Vec<usize> = (0..n_q).map(|i| model.q_in_dim(i) + 2).collect();
        let layout = Layout { n, d, n_q, psi_dims };
        check_dim("Q prior", n * n_q, priors.q.dim())?;
        check_dim("Q̂ prior", n * n_q * d, priors.qhat.dim())?;
        check_dim("Ψ priors", n_q, priors.psi.len())?;
        for i in 0..n_q {
            check_dim("Ψ prior", layout.psi_dims[i], priors.psi[i].dim())?;
        }
        let raw: Vec<Vec<Vec<f64>>> = (0..n_q)
            .map(|i| (0..n).map(|j| model.q_in(i, &data.inputs_z.row(j)[..n_x], &data.inputs_z.row(j)[n_x..])).collect())
            .collect();
        let scaling: Vec<InputScaling> = raw
            .iter()
            .enumerate()
            .map(|(i, rows)| if opts.normalize_inputs { InputScaling::fit(rows) } else { InputScaling::identity(model.q_in_dim(i)) })
            .collect();
        let train_in = raw.iter().zip(&scaling).map(|(rows, s)| rows.iter().map(|r| s.apply(r)).collect()).collect();
        let latent = match &opts.latent_scaling {
            Some(v) => {
                check_dim("latent scaling", n_q, v.len())?;
                v.clone()
            }
            None => vec![LatentScaling::default(); n_q],
        };
        let out_factor = cholesky(&spec.output_cov())?;
        Ok(Self { model, scheme, dt: spec.dt, data, priors, newton: opts.newton, layout, meas: spec.meas_matrix.clone(), out_factor, train_in, scaling, latent })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn input_scaling(&self) -> &[InputScaling] {
        &self.scaling
    }

    pub fn train_inputs(&self) -> &[Vec<Vec<f64>>] {
        &self.train_in
    }

    pub fn latent_scaling(&self) -> &[LatentScaling] {
        &self.latent
    }

    fn state_control(&self, j: usize) -> (&[f64], &[f64]) {
        let row = self.data.inputs_z.row(j);
        row.split_at(self.model.n_x())
    }

    /// Negative log posterior; `+∞` when the candidate is infeasible.
    pub fn nll(&self, theta: &[f64], cache: Option<&mut NodeCache>) -> f64 {
        self.evaluate(theta, false, cache).map_or(f64::INFINITY, |e| e.nll)
    }

    /// Objective and gradient (`+∞` and zeros when infeasible).
    pub fn nll_grad(&self, theta: &[f64], cache: Option<&mut NodeCache>) -> (f64, Vec<f64>) {
        match self.evaluate(theta, true, cache) {
            Ok(Evaluated { nll, grad: Some(g) }) if nll.is_finite() && g.iter().all(|v| v.is_finite()) => (nll, g),
            _ => (f64::INFINITY, vec![0.0; self.dim()]),
        }
    }

    /// Node states of every datum at a candidate.
    pub fn node_states(&self, theta: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
        let lay = &self.layout;
        (0..lay.n)
            .map(|j| {
                let (x, u) = self.state_control(j);
                let q = self.node_q(theta, j);
                let qg: Vec<Vec<Grad<f64>>> = q.iter().map(|r| r.iter().map(|&v| Grad::constant(v)).collect()).collect();
                let q_of = move |_: &[Vec<Grad<f64>>]| Ok(qg.clone());
                Ok(solve_nodes(self.model, self.scheme, self.dt, x, u, &q_of, None, &self.newton)?.nodes)
            })
            .collect()
    }

    /// Physical q-values at the nodes of datum `j` (node-major).
    fn node_q(&self, theta: &[f64], j: usize) -> Vec<Vec<f64>> {
        let lay = &self.layout;
        (0..lay.d).map(|l| (0..lay.n_q).map(|i| self.latent[i].to_physical(theta[lay.qhat(i, j, l)])).collect()).collect()
    }

    fn hyper(&self, theta: &[f64], i: usize) -> Result<KernelHyperparams<f64>> {
        let off = self.layout.psi(i);
        let psi: Vec<f64> = theta[off..off + self.layout.psi_dims[i]].iter().map(|v| v.exp()).collect();
        KernelHyperparams::from_slice(&psi)
    }

    fn evaluate(&self, theta: &[f64], want_grad: bool, mut cache: Option<&mut NodeCache>) -> Result<Evaluated> {
        check_dim("MAP candidate", self.dim(), theta.len())?;
        let lay = &self.layout;
        let (n, d, n_q) = (lay.n, lay.d, lay.n_q);
        let n_x = self.model.n_x();
        let n_y = self.meas.rows();
        if let Some(c) = cache.as_deref_mut() {
            c.resize(n, None);
        }

        // node elimination
        let mut nodes = Vec::with_capacity(n);
        let mut x_end = Vec::with_capacity(n);
        for j in 0..n {
            let (x, u) = self.state_control(j);
            let q = self.node_q(theta, j);
            let qg: Vec<Vec<Grad<f64>>> = q.iter().map(|r| r.iter().map(|&v| Grad::constant(v)).collect()).collect();
            let q_of = move |_: &[Vec<Grad<f64>>]| Ok(qg.clone());
            let guess = cache.as_deref().and_then(|c| c[j].clone());
            let sol = solve_nodes(self.model, self.scheme, self.dt, x, u, &q_of, guess.as_deref(), &self.newton)?;
            if let Some(c) = cache.as_deref_mut() {
                c[j] = Some(sol.nodes.clone());
            }
            nodes.push(sol.nodes);
            x_end.push(sol.x_end);
        }

        let mut grad = if want_grad { Some(vec![0.0; self.dim()]) } else { None };
        let mut nll = 0.0;

        // data likelihood
        let mut dl_dxend = vec![vec![0.0; n_x]; n];
        for j in 0..n {
            let hx = self.meas.matvec(&x_end[j])?;
            let r: Vec<f64> = self.data.outputs_y.row(j).iter().zip(&hx).map(|(y, h)| y - h).collect();
            let w = self.out_factor.solve(&r)?;
            nll += 0.5 * dot(&r, &w);
            if want_grad {
                dl_dxend[j] = self.meas.tr_matvec(&w)?.iter().map(|v| -v).collect();
            }
        }
        nll += n as f64 * 0.5 * (self.out_factor.log_det() + n_y as f64 * LN_2PI);

        // GP coupling term, per output
        let mut g_node = vec![vec![vec![Vec::new(); d]; n]; n_q];
        for i in 0..n_q {
            let hyper = self.hyper(theta, i)?;
            let mut pts = self.train_in[i].clone();
            for j in 0..n {
                let (_, u) = self.state_control(j);
                for l in 0..d {
                    pts.push(self.scaling[i].apply(&self.model.q_in(i, &nodes[j][l], u)));
                }
            }
            let m = pts.len();
            let v: Vec<f64> = (0..n).map(|j| theta[lay.q(i, j)]).chain((0..n).flat_map(|j| (0..d).map(move |l| (j, l))).map(|(j, l)| theta[lay.qhat(i, j, l)])).collect();
            let k = training_covariance(&pts, &vec![true; m], &hyper);
            let factor = cholesky(&k)?;
            let alpha = factor.solve(&v)?;
            nll += 0.5 * dot(&v, &alpha) + 0.5 * factor.log_det() + 0.5 * m as f64 * LN_2PI;
            let Some(g) = grad.as_mut() else { continue };
            for j in 0..n {
                g[lay.q(i, j)] += alpha[j];
                for l in 0..d {
                    g[lay.qhat(i, j, l)] += alpha[n + j * d + l];
                }
            }
            let kinv = factor.inverse();
            let w = |a: usize, b: usize| kinv[(a, b)] - alpha[a] * alpha[b];
            let dim_in = hyper.input_dim();
            let off = lay.psi(i);
            let (mut g_len, mut g_mag, mut g_noise) = (vec![0.0; dim_in], 0.0, 0.0);
            for a in 0..m {
                g_noise += 0.5 * hyper.noise_var * w(a, a);
                g_mag += 0.5 * w(a, a) * hyper.magnitude_sq;
                for b in 0..a {
                    let kab = k[(a, b)];
                    let wab = w(a, b);
                    g_mag += wab * kab;
                    for (c, gl) in g_len.iter_mut().enumerate() {
                        let diff = pts[a][c] - pts[b][c];
                        *gl += wab * kab * 0.5 * diff * diff / hyper.length_scales_sq[c];
                    }
                }
            }
            for c in 0..dim_in {
                g[off + c] += g_len[c];
            }
            g[off + dim_in] += g_mag;
            g[off + dim_in + 1] += g_noise;
            // sensitivity to node input locations (in raw, unscaled coordinates)
            for j in 0..n {
                for l in 0..d {
                    let p = n + j * d + l;
                    let mut gz = vec![0.0; dim_in];
                    for q in 0..m {
                        if q == p {
                            continue;
                        }
                        let coef = w(p, q) * k[(p, q)];
                        for c in 0..dim_in {
                            gz[c] -= coef * (pts[p][c] - pts[q][c]) / hyper.length_scales_sq[c];
                        }
                    }
                    for c in 0..dim_in {
                        gz[c] /= self.scaling[i].scale[c];
                    }
                    g_node[i][j][l] = gz;
                }
            }
        }

        // adjoint through the collocation equations
        if let Some(g) = grad.as_mut() {
            let nx_vars = d * n_x;
            let nvars = nx_vars + d * n_q;
            for j in 0..n {
                let (x, u) = self.state_control(j);
                let q = self.node_q(theta, j);
                let xg: Vec<Grad<f64>> = x.iter().map(|&v| Grad::constant(v)).collect();
                let ug: Vec<Grad<f64>> = u.iter().map(|&v| Grad::constant(v)).collect();
                let ng: Vec<Vec<Grad<f64>>> = (0..d).map(|l| (0..n_x).map(|c| Grad::variable(nodes[j][l][c], l * n_x + c, nvars)).collect()).collect();
                let qg: Vec<Vec<Grad<f64>>> = (0..d).map(|l| (0..n_q).map(|i| Grad::variable(q[l][i], nx_vars + l * n_q + i, nvars)).collect()).collect();
                let (res, xe) = collocation_residual(self.model, self.scheme, self.dt, &xg, &ug, &ng, &qg);
                let mut dl_dx = vec![0.0; nx_vars];
                for (e, xe_e) in xe.iter().enumerate() {
                    for (k, v) in dl_dx.iter_mut().enumerate() {
                        *v += dl_dxend[j][e] * xe_e.d(k);
                    }
                }
                for i in 0..n_q {
                    for l in 0..d {
                        let qin = self.model.q_in(i, &ng[l], &ug);
                        for (c, z) in qin.iter().enumerate() {
                            let gz = g_node[i][j][l][c];
                            if gz != 0.0 {
                                for (k, v) in dl_dx.iter_mut().enumerate() {
                                    *v += gz * z.d(k);
                                }
                            }
                        }
                    }
                }
                let jac = Matrix::from_fn(nx_vars, nx_vars, |r, k| res[r].d(k));
                let lambda = Lu::new(&jac)?.solve_transpose(&dl_dx)?;
                for l in 0..d {
                    for i in 0..n_q {
                        let t = nx_vars + l * n_q + i;
                        let mut total = 0.0;
                        for (e, xe_e) in xe.iter().enumerate() {
                            total += dl_dxend[j][e] * xe_e.d(t);
                        }
                        for (r, lam) in lambda.iter().enumerate() {
                            total -= lam * res[r].d(t);
                        }
                        g[lay.qhat(i, j, l)] += total * self.latent[i].scale;
                    }
                }
            }
        }

        // prior factors
        if self.priors.include_standalone {
            let qs = &theta[..lay.qhat_start()];
            let qh = &theta[lay.qhat_start()..lay.psi(0)];
            nll += self.priors.q.nll(qs) + self.priors.qhat.nll(qh);
            if let Some(g) = grad.as_mut() {
                for (k, v) in self.priors.q.grad(qs).into_iter().enumerate() {
                    g[k] += v;
                }
                for (k, v) in self.priors.qhat.grad(qh).into_iter().enumerate() {
                    g[lay.qhat_start() + k] += v;
                }
            }
        }
        for i in 0..n_q {
            let off = lay.psi(i);
            let log_psi = &theta[off..off + lay.psi_dims[i]];
            let prior = &self.priors.psi[i];
            if self.priors.psi_log_scale {
                nll += prior.nll(log_psi);
                if let Some(g) = grad.as_mut() {
                    for (k, v) in prior.grad(log_psi).into_iter().enumerate() {
                        g[off + k] += v;
                    }
                }
            } else {
                let psi: Vec<f64> = log_psi.iter().map(|v| v.exp()).collect();
                nll += prior.nll(&psi);
                if let Some(g) = grad.as_mut() {
                    for (k, v) in prior.grad(&psi).into_iter().enumerate() {
                        g[off + k] += v * psi[k];
                    }
                }
            }
        }
        Ok(Evaluated { nll, grad })
    }

    /// Starting candidate: prior means (`start == 0`) or marginal prior draws.
    ///
    /// Draws for a datum come from a stream keyed by that datum's contents, so a
    /// row permutation of the data permutes the start consistently.
    pub fn start_point(&self, seed: u64, start: usize) -> Vec<f64> {
        let lay = &self.layout;
        let mut theta = vec![0.0; self.dim()];
        let pri = self.priors;
        for j in 0..lay.n {
            let mut rng = RngStream::new(seed ^ (start as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), self.data.row_hash(j));
            for i in 0..lay.n_q {
                let k = lay.q(i, j);
                let xi = if start == 0 { 0.0 } else { rng.normal() };
                theta[k] = pri.q.mean[k] + pri.q.marginal_std(k) * xi;
                for l in 0..lay.d {
                    let k = lay.qhat(i, j, l);
                    let kk = k - lay.qhat_start();
                    let xi = if start == 0 { 0.0 } else { rng.normal() };
                    theta[k] = pri.qhat.mean[kk] + pri.qhat.marginal_std(kk) * xi;
                }
            }
        }
        let mut rng = RngStream::new(seed, 0x5eed_0000 + start as u64);
        for i in 0..lay.n_q {
            let off = lay.psi(i);
            for c in 0..lay.psi_dims[i] {
                let m = pri.psi[i].mean[c];
                if pri.psi_log_scale {
                    let xi = if start == 0 { 0.0 } else { rng.normal() };
                    theta[off + c] = m + pri.psi[i].marginal_std(c) * xi;
                    continue;
                }
                let v = if start == 0 {
                    if m > 0.0 {
                        m
                    } else {
                        1.0
                    }
                } else {
                    (m + pri.psi[i].marginal_std(c) * rng.normal()).abs().max(1e-3)
                };
                theta[off + c] = v.ln();
            }
        }
        theta
    }

    /// Unpack an optimized candidate.
    pub fn solution(&self, theta: &[f64], nll: f64, grad_norm: f64, iterations: usize, converged: bool, start: usize) -> Result<MapSolution> {
        let lay = &self.layout;
        let q_star = Matrix::from_fn(lay.n, lay.n_q, |j, i| theta[lay.q(i, j)]);
        let qhat_star = Matrix::from_fn(lay.n * lay.d, lay.n_q, |r, i| theta[lay.qhat(i, r / lay.d, r % lay.d)]);
        let psi_star = (0..lay.n_q).map(|i| self.hyper(theta, i)).collect::<Result<Vec<_>>>()?;
        Ok(MapSolution {
            q_star,
            qhat_star,
            psi_star,
            nll,
            grad_norm,
            iterations,
            converged,
            start,
            train_inputs: self.train_in.clone(),
            input_scaling: self.scaling.clone(),
            latent_scaling: self.latent.clone(),
        })
    }
}

/// Multistart MAP training; the best finite local minimum wins (lowest start index on ties).
pub fn train<M: HybridModel>(data: &TrainingData, spec: &SystemSpec<M>, scheme: &Scheme, priors: &PriorSpec, opts: &MapOptions) -> Result<MapSolution> {
    let problem = MapProblem::new(spec, scheme, data, priors, opts)?;
    let seed = opts.seed ^ data.fingerprint();
    let runs: Vec<(usize, LbfgsResult)> = (0..opts.multistarts.max(1))
        .into_par_iter()
        .map(|s| {
            let x0 = problem.start_point(seed, s);
            let mut cache: NodeCache = Vec::new();
            let r = lbfgs::minimize(|x| problem.nll_grad(x, Some(&mut cache)), &x0, &opts.lbfgs);
            log::debug!("MAP start {s}: nll {:.6e} after {} iterations (converged: {})", r.f, r.iterations, r.converged);
            (s, r)
        })
        .collect();
    let best = runs
        .into_iter()
        .filter(|(_, r)| r.f.is_finite())
        .min_by(|a, b| a.1.f.partial_cmp(&b.1.f).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let Some((s, r)) = best else {
        return Err(Error::AllStartsFailed);
    };
    problem.solution(&r.x, r.f, r.grad_norm(), r.iterations, r.converged, s)
}

#[cfg(test)]
mod tests;
