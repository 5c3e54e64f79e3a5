//! Squared-exponential Gaussian processes: posteriors, predictions, and
//! noiseless conditioning.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::num_kernel::linalg::{cholesky, dot, Matrix, SpdFactor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams<T> {
    /// λ² per input dimension.
    pub length_scales_sq: Vec<T>,
    /// ζ².
    pub magnitude_sq: T,
    /// σ²_ν.
    pub noise_var: T,
}

impl<T: Scalar> KernelHyperparams<T> {
    pub fn new(length_scales_sq: Vec<T>, magnitude_sq: T, noise_var: T) -> Result<Self> {
        let h = Self { length_scales_sq, magnitude_sq, noise_var };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.length_scales_sq.iter().all(|&l| l > T::zero() && l.is_finite())
            && self.magnitude_sq > T::zero()
            && self.magnitude_sq.is_finite()
            && self.noise_var > T::zero()
            && self.noise_var.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain("kernel hyperparameters must be positive and finite".into()))
        }
    }

    pub fn input_dim(&self) -> usize {
        self.length_scales_sq.len()
    }

    /// Packed natural-scale vector `[λ²…, ζ², σ²]`.
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = self.length_scales_sq.clone();
        v.push(self.magnitude_sq);
        v.push(self.noise_var);
        v
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::DimensionMismatch { what: "hyperparameter vector", expected: 3, found: v.len() });
        }
        let n = v.len() - 2;
        Self::new(v[..n].to_vec(), v[n], v[n + 1])
    }
}

/// `ζ² exp(−½ (a−b)ᵀ Λ⁻² (a−b))`, with query scalar `S` and stored scalar `T`.
#[inline]
pub fn se_kernel_mixed<S: Scalar, T: Scalar>(a: &[S], b: &[T], hyper: &KernelHyperparams<T>) -> S {
    let mut r = S::zero();
    for ((&x, &y), &l) in a.iter().zip(b).zip(&hyper.length_scales_sq) {
        let d = x - S::lift(y);
        r += d * d / S::lift(l);
    }
    S::lift(hyper.magnitude_sq) * (S::c(-0.5) * r).exp()
}

/// Kernel between two query-typed inputs under stored hyperparameters.
#[inline]
pub fn se_kernel_query<S: Scalar, T: Scalar>(a: &[S], b: &[S], hyper: &KernelHyperparams<T>) -> S {
    let mut r = S::zero();
    for ((&x, &y), &l) in a.iter().zip(b).zip(&hyper.length_scales_sq) {
        let d = x - y;
        r += d * d / S::lift(l);
    }
    S::lift(hyper.magnitude_sq) * (S::c(-0.5) * r).exp()
}

/// Squared-exponential covariance between two inputs.
pub fn se_kernel<T: Scalar>(a: &[T], b: &[T], hyper: &KernelHyperparams<T>) -> Result<T> {
    check_dim("kernel input a", hyper.input_dim(), a.len())?;
    check_dim("kernel input b", hyper.input_dim(), b.len())?;
    Ok(se_kernel_mixed(a, b, hyper))
}

/// Training covariance `k(x_l, x_m) + σ² δ_lm [noisy_l]`.
pub fn training_covariance<T: Scalar>(inputs: &[Vec<T>], noisy: &[bool], hyper: &KernelHyperparams<T>) -> Matrix<T> {
    let n = inputs.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = se_kernel_mixed(&inputs[i], &inputs[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = hyper.magnitude_sq + if noisy[i] { hyper.noise_var } else { T::zero() };
    }
    k
}

/// Single-output GP posterior given latent targets at known inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpPosterior<T> {
    pub hyper: KernelHyperparams<T>,
    pub inputs: Vec<Vec<T>>,
    pub targets: Vec<T>,
    pub noisy: Vec<bool>,
    pub factor: SpdFactor<T>,
    /// `L⁻¹ Q`, kept so that appends update the weights cheaply.
    whitened: Vec<T>,
    /// `α = Σ⁻¹ Q`.
    pub weights: Vec<T>,
}

impl<T: Scalar> GpPosterior<T> {
    pub fn build(inputs: Vec<Vec<T>>, targets: Vec<T>, noisy: Vec<bool>, hyper: KernelHyperparams<T>) -> Result<Self> {
        hyper.validate()?;
        if inputs.is_empty() {
            return Err(Error::Domain("posterior needs at least one training point".into()));
        }
        check_dim("posterior targets", inputs.len(), targets.len())?;
        check_dim("posterior noise flags", inputs.len(), noisy.len())?;
        for row in &inputs {
            check_dim("posterior input row", hyper.input_dim(), row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite training input".into()));
            }
        }
        let k = training_covariance(&inputs, &noisy, &hyper);
        let factor = cholesky(&k)?;
        let whitened = factor.solve_lower(&targets)?;
        let weights = factor.solve_upper(&whitened)?;
        Ok(Self { hyper, inputs, targets, noisy, factor, whitened, weights })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.hyper.input_dim()
    }

    /// Kernel vector against the training inputs.
    pub fn cross<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        self.inputs.iter().map(|x| se_kernel_mixed(z, x, &self.hyper)).collect()
    }

    /// `L⁻¹ v` for a query-typed right-hand side.
    pub fn whiten<S: Scalar>(&self, v: &[S]) -> Vec<S> {
        let n = self.len();
        let mut y: Vec<S> = v.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= S::lift(self.factor.at(i, k)) * y[k];
            }
            y[i] = s / S::lift(self.factor.at(i, i));
        }
        y
    }

    /// Predictive mean and variance at `z`; the variance includes σ²_ν when `with_noise`.
    pub fn predict_with<S: Scalar>(&self, z: &[S], with_noise: bool) -> (S, S) {
        let v = self.whiten(&self.cross(z));
        let mean = v.iter().zip(&self.whitened).fold(S::zero(), |s, (&a, &b)| s + a * S::lift(b));
        let mut var = S::lift(self.hyper.magnitude_sq) - dot(&v, &v);
        if with_noise {
            var += S::lift(self.hyper.noise_var);
        }
        (mean, var.max(S::zero()))
    }

    /// Predictive mean and variance including the observation-noise term.
    pub fn predict<S: Scalar>(&self, z: &[S]) -> (S, S) {
        self.predict_with(z, true)
    }

    pub fn mean<S: Scalar>(&self, z: &[S]) -> S {
        self.cross(z).iter().zip(&self.weights).fold(S::zero(), |s, (&k, &w)| s + k * S::lift(w))
    }

    /// Joint latent mean and covariance (no σ²_ν) over several query points.
    pub fn joint<S: Scalar>(&self, zs: &[Vec<S>]) -> (Vec<S>, Matrix<S>) {
        let vs: Vec<Vec<S>> = zs.iter().map(|z| self.whiten(&self.cross(z))).collect();
        let means = vs
            .iter()
            .map(|v| v.iter().zip(&self.whitened).fold(S::zero(), |s, (&a, &b)| s + a * S::lift(b)))
            .collect();
        let m = zs.len();
        let mut cov = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let prior = if i == j { S::lift(self.hyper.magnitude_sq) } else { se_kernel_query(&zs[i], &zs[j], &self.hyper) };
                let c = prior - dot(&vs[i], &vs[j]);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        (means, cov)
    }

    /// Append a noiseless pseudo-observation in place. Hyperparameters are untouched.
    ///
    /// A point whose residual variance is below the pivot floor is stored with the
    /// current posterior mean as its value, provided the given value agrees with it.
    pub fn push_noiseless(&mut self, input: Vec<T>, value: T) -> Result<()> {
        check_dim("conditioning input", self.input_dim(), input.len())?;
        let cross = self.cross(&input);
        let v = self.factor.solve_lower(&cross)?;
        let prior_mean = dot(&v, &self.whitened);
        let resid = self.hyper.magnitude_sq - dot(&v, &v);
        let mut value = value;
        if !(resid > self.factor.pivot_floor()) {
            // already determined by the existing points: accept only a consistent value, stored as the current mean
            if (value - prior_mean).abs() > T::c(1e-4) * self.hyper.magnitude_sq.sqrt() {
                return Err(Error::NotPositiveDefinite { pivot: self.len() });
            }
            value = prior_mean;
        }
        self.factor.push_whitened(v.clone(), self.hyper.magnitude_sq)?;
        let n = self.len();
        let d = self.factor.at(n, n);
        let b = (value - dot(&v, &self.whitened)) / d;
        self.whitened.push(b);
        self.inputs.push(input);
        self.targets.push(value);
        self.noisy.push(false);
        self.weights = self.factor.solve_upper(&self.whitened)?;
        Ok(())
    }

    /// Posterior with one extra noiseless point.
    pub fn condition_on_noiseless(&self, input: Vec<T>, value: T) -> Result<Self> {
        let mut p = self.clone();
        p.push_noiseless(input, value)?;
        Ok(p)
    }
}

/// Affine map applied to raw GP inputs before the kernel: `(z − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Zero mean, unit variance per column (unit scale for constant columns).
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for d in 0..dim {
            let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n;
            shift[d] = mean;
            if var > 1e-24 {
                scale[d] = var.sqrt();
            }
        }
        Self { shift, scale }
    }

    pub fn apply<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        z.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(&v, (&m, &s))| (v - S::c(m)) / S::c(s))
            .collect()
    }
}

/// Affine map from GP latent values to the physical unknown: `q = offset + scale · q̃`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScaling {
    pub offset: f64,
    pub scale: f64,
}

impl Default for LatentScaling {
    fn default() -> Self {
        Self { offset: 0.0, scale: 1.0 }
    }
}

impl LatentScaling {
    #[inline]
    pub fn to_physical<S: Scalar>(&self, latent: S) -> S {
        S::c(self.offset) + S::c(self.scale) * latent
    }
}

/// One output of a multi-output model: posterior plus its input and latent maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpOutput {
    pub posterior: GpPosterior<f64>,
    pub input_scaling: InputScaling,
    pub latent_scaling: LatentScaling,
}

/// Independent GPs, one per unknown-function output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpModel {
    pub outputs: Vec<GpOutput>,
}

impl GpModel {
    pub fn n_q(&self) -> usize {
        self.outputs.len()
    }

    /// Physical mean and variance of each output at its raw (unscaled) input.
    pub fn predict<S: Scalar>(&self, raw_inputs: &[Vec<S>], with_noise: bool) -> (Vec<S>, Vec<S>) {
        let mut means = Vec::with_capacity(self.n_q());
        let mut vars = Vec::with_capacity(self.n_q());
        for (o, z) in self.outputs.iter().zip(raw_inputs) {
            let (m, v) = o.posterior.predict_with(&o.input_scaling.apply(z), with_noise);
            let s = S::c(o.latent_scaling.scale);
            means.push(o.latent_scaling.to_physical(m));
            vars.push(v * s * s);
        }
        (means, vars)
    }

    /// Physical posterior mean of each output.
    pub fn mean<S: Scalar>(&self, raw_inputs: &[Vec<S>]) -> Vec<S> {
        self.outputs
            .iter()
            .zip(raw_inputs)
            .map(|(o, z)| o.latent_scaling.to_physical(o.posterior.mean(&o.input_scaling.apply(z))))
            .collect()
    }
}
