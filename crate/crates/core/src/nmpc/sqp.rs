//! SQP for small dense NLPs with bounds and inequality constraints `c(x) ≤ 0`.
//!
//! Subproblems are elastic (ℓ1) QPs, so they are always feasible; steps are
//! globalized by an ℓ1 merit line search and the Hessian is a damped BFGS
//! approximation of the Lagrangian's.

use crate::error::{check_dim, Error, Result};
use crate::num_kernel::linalg::{dot, norm_inf, Matrix};

use super::qp::{solve_qp, QpOptions};

/// Objective, gradient, constraint values and Jacobian at a point.
#[derive(Clone, Debug)]
pub struct NlpEval {
    pub f: f64,
    pub grad: Vec<f64>,
    pub c: Vec<f64>,
    /// m × n.
    pub jac: Matrix<f64>,
}

impl NlpEval {
    pub fn violation(&self) -> f64 {
        self.c.iter().fold(0.0f64, |m, &v| m.max(v))
    }

    fn l1_violation(&self) -> f64 {
        self.c.iter().map(|v| v.max(0.0)).sum()
    }
}

pub trait Nlp {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn eval(&self, x: &[f64]) -> Result<NlpEval>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Fixed ℓ1 penalty (soft mode); adaptive when `None`.
    pub fixed_penalty: Option<f64>,
    /// Upper limit for the adaptive penalty.
    pub max_penalty: f64,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 100, fixed_penalty: None, max_penalty: 1e8 }
    }
}

#[derive(Clone, Debug)]
pub struct SqpResult {
    pub x: Vec<f64>,
    pub eval: NlpEval,
    pub lambda: Vec<f64>,
    pub kkt: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Scaled KKT residual: stationarity, feasibility and complementarity.
fn kkt_residual(ev: &NlpEval, lambda: &[f64], box_mult: &[f64]) -> Result<f64> {
    let jt = ev.jac.tr_matvec(lambda)?;
    let stat: Vec<f64> = (0..ev.grad.len()).map(|i| ev.grad[i] + jt[i] + box_mult[i]).collect();
    let cscale = 1.0 + norm_inf(&ev.c);
    let stationarity = norm_inf(&stat) / (1.0 + norm_inf(&ev.grad));
    let feasibility = ev.violation() / cscale;
    let comp = lambda.iter().zip(&ev.c).fold(0.0f64, |m, (l, c)| m.max((l * c).abs())) / ((1.0 + ev.f.abs()).max(cscale));
    Ok(stationarity.max(feasibility).max(comp))
}

pub fn solve_sqp(nlp: &dyn Nlp, x0: &[f64], opts: &SqpOptions) -> Result<SqpResult> {
    let (n, m) = (nlp.n(), nlp.m());
    check_dim("SQP start", n, x0.len())?;
    let (lo, hi) = (nlp.lower(), nlp.upper());
    let mut x: Vec<f64> = x0.iter().zip(lo.iter().zip(hi)).map(|(&v, (&l, &h))| v.clamp(l, h)).collect();
    let mut ev = nlp.eval(&x)?;
    if !ev.f.is_finite() {
        return Err(Error::Domain("objective not finite at the start point".into()));
    }
    let mut b = Matrix::identity(n);
    let mut scaled = false;
    let mut nu = opts.fixed_penalty.unwrap_or(1.0);
    let mut lambda = vec![0.0; m];
    let mut kkt = f64::INFINITY;
    let qp_opts = QpOptions::default();

    for it in 0..opts.max_iter {
        // elastic QP in (d, t): ½dᵀBd + ∇fᵀd + ν Σt, J d − t ≤ −c, t ≥ 0, lo − x ≤ d ≤ hi − x
        let nv = n + m;
        let rows = 2 * m + 2 * n;
        let hq = Matrix::from_fn(nv, nv, |i, j| if i < n && j < n { b[(i, j)] } else { 0.0 });
        let cq: Vec<f64> = ev.grad.iter().copied().chain(std::iter::repeat(nu).take(m)).collect();
        let mut g = Matrix::zeros(rows, nv);
        let mut h = vec![0.0; rows];
        for i in 0..m {
            for j in 0..n {
                g[(i, j)] = ev.jac[(i, j)];
            }
            g[(i, n + i)] = -1.0;
            h[i] = -ev.c[i];
            g[(m + i, n + i)] = -1.0;
        }
        for j in 0..n {
            g[(2 * m + j, j)] = 1.0;
            h[2 * m + j] = hi[j] - x[j];
            g[(2 * m + n + j, j)] = -1.0;
            h[2 * m + n + j] = x[j] - lo[j];
        }
        let qp = solve_qp(&hq, &cq, &g, &h, &qp_opts)?;
        let d = &qp.x[..n];
        let t = &qp.x[n..];
        lambda = qp.z[..m].to_vec();
        let box_mult: Vec<f64> = (0..n).map(|j| qp.z[2 * m + j] - qp.z[2 * m + n + j]).collect();
        kkt = kkt_residual(&ev, &lambda, &box_mult)?;
        let step_small = norm_inf(d) <= 1e-12 * (1.0 + norm_inf(&x));
        if kkt <= opts.tol || step_small {
            // a vanishing step with remaining violation is a stationary point of the penalty function
            let converged = kkt <= opts.tol || ev.violation() <= opts.tol * (1.0 + norm_inf(&ev.c));
            return Ok(SqpResult { x, eval: ev, lambda, kkt, iterations: it, converged });
        }
        if opts.fixed_penalty.is_none() {
            let lmax = norm_inf(&lambda);
            let elastic = t.iter().any(|v| *v > 1e-9 * (1.0 + norm_inf(&ev.c)));
            if elastic && lmax >= 0.99 * nu {
                nu = (10.0 * nu).min(opts.max_penalty);
            }
            nu = nu.max(1.1 * lmax).min(opts.max_penalty);
            // at the penalty cap with no predicted progress on the violation: locally infeasible
            let predicted = ev.l1_violation() - t.iter().sum::<f64>();
            if nu >= opts.max_penalty && ev.violation() > opts.tol && predicted <= 1e-8 * (1.0 + ev.l1_violation()) {
                return Ok(SqpResult { x, eval: ev, lambda, kkt, iterations: it, converged: false });
            }
        }

        let merit = |e: &NlpEval| e.f + nu * e.l1_violation();
        let phi0 = merit(&ev);
        let mut slope = dot(&ev.grad, d) - nu * (ev.l1_violation() - t.iter().sum::<f64>());
        if !(slope < 0.0) {
            let bd = b.matvec(d)?;
            slope = -dot(d, &bd);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            if alpha * norm_inf(d) <= 1e-10 * (1.0 + norm_inf(&x)) {
                break;
            }
            let xt: Vec<f64> = x.iter().zip(d).zip(lo.iter().zip(hi)).map(|((&xi, &di), (&l, &h))| (xi + alpha * di).clamp(l, h)).collect();
            if let Ok(et) = nlp.eval(&xt) {
                if et.f.is_finite() && merit(&et) <= phi0 + 1e-4 * alpha * slope {
                    accepted = Some((xt, et));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, en)) = accepted else {
            if scaled {
                // restart once from the identity before giving up
                b = Matrix::identity(n);
                scaled = false;
                continue;
            }
            return Ok(SqpResult { x, eval: ev, lambda, kkt, iterations: it, converged: false });
        };

        // damped BFGS on the Lagrangian gradient
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let gl_new = lagrangian_grad(&en, &lambda)?;
        let gl_old = lagrangian_grad(&ev, &lambda)?;
        let mut y: Vec<f64> = gl_new.iter().zip(&gl_old).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if !scaled && sy > 0.0 {
            let gamma = dot(&y, &y) / sy;
            b = Matrix::identity(n).scaled(gamma);
            scaled = true;
        }
        let bs = b.matvec(&s)?;
        let sbs = dot(&s, &bs);
        if sbs > 1e-300 {
            if sy < 0.2 * sbs {
                let theta = 0.8 * sbs / (sbs - sy);
                for i in 0..n {
                    y[i] = theta * y[i] + (1.0 - theta) * bs[i];
                }
            }
            let sy = dot(&s, &y);
            if sy > 1e-300 {
                for i in 0..n {
                    for j in 0..n {
                        b[(i, j)] += y[i] * y[j] / sy - bs[i] * bs[j] / sbs;
                    }
                }
            }
        }
        x = xn;
        ev = en;
    }
    Ok(SqpResult { x, eval: ev, lambda, kkt, iterations: opts.max_iter, converged: false })
}

fn lagrangian_grad(ev: &NlpEval, lambda: &[f64]) -> Result<Vec<f64>> {
    let jt = ev.jac.tr_matvec(lambda)?;
    Ok(ev.grad.iter().zip(jt).map(|(a, b)| a + b).collect())
}
