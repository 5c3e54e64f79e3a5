//! Limited-memory BFGS with a backtracking Armijo search.

use std::collections::VecDeque;

use crate::num_kernel::linalg::{dot, norm2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖g‖₂ ≤ grad_rtol · (1 + |f|)`.
    pub grad_rtol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, max_iter: 2000, grad_rtol: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at every accepted iterate, starting point included.
    pub history: Vec<f64>,
}

impl LbfgsResult {
    pub fn grad_norm(&self) -> f64 {
        norm2(&self.grad)
    }
}

/// Minimize `f`, which returns the value and gradient (value `+∞` marks infeasible points).
pub fn minimize(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x0: &[f64], opts: &LbfgsOptions) -> LbfgsResult {
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut history = vec![fx];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let stop = |fx: f64, g: &[f64]| fx.is_finite() && norm2(g) <= opts.grad_rtol * (1.0 + fx.abs());
    if !fx.is_finite() {
        return LbfgsResult { x, f: fx, grad: g, iterations: 0, converged: false, history };
    }
    for it in 0..opts.max_iter {
        if stop(fx, &g) {
            return LbfgsResult { x, f: fx, grad: g, iterations: it, converged: true, history };
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match mem.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / norm2(&g).max(1e-12),
        };
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v / norm2(&g).max(1e-12)).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (ft, gt) = f(&xt);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((xt, ft, gt));
                break;
            }
            step *= if ft.is_finite() { 0.5 } else { 0.1 };
        }
        let Some((xn, fnew, gn)) = accepted else {
            return LbfgsResult { x, f: fx, grad: g.clone(), iterations: it, converged: stop(fx, &g), history };
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm2(&s) * norm2(&y) {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fnew;
        g = gn;
        history.push(fx);
    }
    let converged = stop(fx, &g);
    LbfgsResult { x, f: fx, grad: g, iterations: opts.max_iter, converged, history }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            (v, g)
        };
        let r = minimize(f, &[-1.2, 1.0], &LbfgsOptions { grad_rtol: 1e-10, ..Default::default() });
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_infeasible_region() {
        // f = x - ln(x) with minimum at 1; x ≤ 0 infeasible
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                (f64::INFINITY, vec![0.0])
            } else {
                (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
            }
        };
        let r = minimize(f, &[5.0], &LbfgsOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-4);
    }
}
