//! Dense convex QP by a Mehrotra predictor-corrector interior-point method:
//! minimize `½ xᵀ H x + cᵀ x` subject to `G x ≤ h`.

use crate::error::{check_dim, Error, Result};
use crate::num_kernel::linalg::{cholesky, dot, norm_inf, Lu, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of `G x ≤ h` (non-negative).
    pub z: Vec<f64>,
    pub iterations: usize,
}

/// Solve the QP; `H` must be positive semidefinite with `H + Gᵀ D G` definite for positive `D`.
pub fn solve_qp(h_mat: &Matrix<f64>, c: &[f64], g: &Matrix<f64>, h: &[f64], opts: &QpOptions) -> Result<QpSolution> {
    let n = c.len();
    let m = h.len();
    check_dim("QP Hessian", n, h_mat.rows())?;
    check_dim("QP constraint columns", n, g.cols())?;
    check_dim("QP constraint rows", m, g.rows())?;
    if m == 0 {
        let f = cholesky(h_mat)?;
        let x = f.solve(&c.iter().map(|v| -v).collect::<Vec<_>>())?;
        return Ok(QpSolution { x, z: Vec::new(), iterations: 0 });
    }
    // a linear term far larger than the curvature (elastic penalties) wrecks the central path
    let obj_scale = norm_inf(c).max(1.0);
    let h_mat = &h_mat.scaled(1.0 / obj_scale);
    let c: Vec<f64> = c.iter().map(|v| v / obj_scale).collect();
    let c = &c[..];
    let mut x = vec![0.0; n];
    let gx = g.matvec(&x)?;
    let mut s: Vec<f64> = h.iter().zip(&gx).map(|(hi, gi)| (hi - gi).max(1.0)).collect();
    let mut z = vec![1.0; m];
    let scale_c = 1.0 + norm_inf(c);
    let scale_h = 1.0 + norm_inf(h);

    for it in 0..opts.max_iter {
        let gx = g.matvec(&x)?;
        let hx = h_mat.matvec(&x)?;
        let gtz = g.tr_matvec(&z)?;
        let rd: Vec<f64> = (0..n).map(|i| hx[i] + c[i] + gtz[i]).collect();
        let rp: Vec<f64> = (0..m).map(|i| gx[i] + s[i] - h[i]).collect();
        let mu = dot(&s, &z) / m as f64;
        if norm_inf(&rd) <= opts.tol * scale_c && norm_inf(&rp) <= opts.tol * scale_h && mu <= opts.tol * scale_c.max(scale_h) {
            let z = z.iter().map(|v| v * obj_scale).collect();
            return Ok(QpSolution { x, z, iterations: it });
        }
        // reduced matrix H + Gᵀ (Z/S) G
        let w: Vec<f64> = (0..m).map(|i| z[i] / s[i]).collect();
        let mut k = h_mat.clone();
        for r in 0..m {
            let row = g.row(r);
            let wr = w[r];
            for a in 0..n {
                let ga = row[a] * wr;
                if ga == 0.0 {
                    continue;
                }
                for b in 0..n {
                    k[(a, b)] += ga * row[b];
                }
            }
        }
        // no jitter here: the weights span many orders of magnitude near convergence
        let factor = Lu::new(&k)?;
        let solve_dir = |rc: &[f64]| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
            // rhs = −r_d + Gᵀ S⁻¹ (r_c − Z r_p)
            let t: Vec<f64> = (0..m).map(|i| (rc[i] - z[i] * rp[i]) / s[i]).collect();
            let gt = g.tr_matvec(&t)?;
            let rhs: Vec<f64> = (0..n).map(|i| -rd[i] + gt[i]).collect();
            let dx = factor.solve(&rhs)?;
            let gdx = g.matvec(&dx)?;
            let ds: Vec<f64> = (0..m).map(|i| -rp[i] - gdx[i]).collect();
            let dz: Vec<f64> = (0..m).map(|i| (-rc[i] - z[i] * ds[i]) / s[i]).collect();
            Ok((dx, ds, dz))
        };
        let max_step = |v: &[f64], dv: &[f64]| -> f64 { v.iter().zip(dv).filter(|(_, d)| **d < 0.0).fold(1.0f64, |a, (vi, di)| a.min(-vi / di)) };

        let rc_aff: Vec<f64> = (0..m).map(|i| s[i] * z[i]).collect();
        let (_, ds_a, dz_a) = solve_dir(&rc_aff)?;
        let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_aff = (0..m).map(|i| (s[i] + a_aff * ds_a[i]) * (z[i] + a_aff * dz_a[i])).sum::<f64>() / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rc: Vec<f64> = (0..m).map(|i| s[i] * z[i] + ds_a[i] * dz_a[i] - sigma * mu).collect();
        let (dx, ds, dz) = solve_dir(&rc)?;
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        for i in 0..n {
            x[i] += alpha * dx[i];
        }
        for i in 0..m {
            s[i] = (s[i] + alpha * ds[i]).max(1e-300);
            z[i] = (z[i] + alpha * dz[i]).max(1e-300);
        }
        if x.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    Err(Error::NonConvergence { what: "interior-point QP", iterations: opts.max_iter })
}
