//! Diagonal Gaussian and Bernoulli machinery: closed-form KL, log densities,
//! reparameterized sampling, and a Monte Carlo KL estimator for cross-checks.

use thiserror::Error;

use crate::rng::RngStream;
use crate::Scalar;

/// Bounds applied to every stored log-variance.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistributionError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("bernoulli observation at index {0} is not 0 or 1")]
    NonBinary(usize),
    #[error("Monte Carlo estimate needs at least 100 samples, got {0}")]
    TooFewSamples(usize),
}

pub fn clamp_log_var<T: Scalar>(v: T) -> T {
    v.max(T::of(LOG_VAR_MIN)).min(T::of(LOG_VAR_MAX))
}

/// Diagonal Gaussian parameterized by mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian<T> {
    mean: Vec<T>,
    log_var: Vec<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    /// Log-variances outside `[-20, 20]` are clamped.
    pub fn new(mean: Vec<T>, log_var: Vec<T>) -> Result<Self, DistributionError> {
        check_dims(mean.len(), log_var.len())?;
        // Infinite log-variances are clamped; NaN anywhere or an infinite mean is rejected.
        if let Some(i) = log_var.iter().position(|v| v.is_nan()) {
            return Err(DistributionError::NonFinite(i));
        }
        if let Some(i) = mean.iter().position(|v| !v.is_finite()) {
            return Err(DistributionError::NonFinite(i));
        }
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![T::zero(); dim], log_var: vec![T::zero(); dim] }
    }

    /// Isotropic Gaussian with the same mean and variance in every dimension.
    pub fn isotropic(dim: usize, mean: f64, variance: f64) -> Self {
        Self::new(vec![T::of(mean); dim], vec![T::of(variance.ln()); dim]).expect("finite isotropic parameters")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn log_var(&self) -> &[T] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<T> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

/// `N(0, I)` of a given dimension; never stored as parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StandardPrior {
    pub dim: usize,
}

impl StandardPrior {
    pub fn to_gaussian<T: Scalar>(self) -> DiagGaussian<T> {
        DiagGaussian::standard(self.dim)
    }
}

fn check_dims(a: usize, b: usize) -> Result<(), DistributionError> {
    if a == b {
        Ok(())
    } else {
        Err(DistributionError::DimensionMismatch(a, b))
    }
}

/// Per-dimension `KL(N(μ₁,σ₁²) ‖ N(μ₂,σ₂²))` in log-variance form:
/// `log σ₂ − log σ₁ + (σ₁² + (μ₁−μ₂)²)/(2σ₂²) − 1/2`.
pub fn kl_gaussian_scalar<T: Scalar>(mean_q: T, log_var_q: T, mean_p: T, log_var_p: T) -> T {
    let half = T::of(0.5);
    let diff = mean_q - mean_p;
    half * (log_var_p - log_var_q) + (log_var_q.exp() + diff * diff) * half * (-log_var_p).exp() - half
}

pub fn kl_gaussian<T: Scalar>(q: &DiagGaussian<T>, p: &DiagGaussian<T>) -> Result<T, DistributionError> {
    check_dims(q.dim(), p.dim())?;
    Ok((0..q.dim()).map(|d| kl_gaussian_scalar(q.mean[d], q.log_var[d], p.mean[d], p.log_var[d])).sum())
}

/// Per-dimension `KL(N(μ,σ²) ‖ N(0,1)) = (σ² + μ² − 1 − log σ²)/2`.
pub fn kl_standard_scalar<T: Scalar>(mean: T, log_var: T) -> T {
    T::of(0.5) * (log_var.exp() + mean * mean - T::one() - log_var)
}

pub fn kl_to_standard<T: Scalar>(q: &DiagGaussian<T>) -> T {
    q.mean.iter().zip(&q.log_var).map(|(&m, &lv)| kl_standard_scalar(m, lv)).sum()
}

/// `z = μ + exp(log_var/2) ⊙ ε`, `ε ~ N(0, I)` drawn from `rng`.
pub fn reparam_sample<T: Scalar>(q: &DiagGaussian<T>, rng: &mut RngStream) -> Vec<T> {
    let half = T::of(0.5);
    q.mean.iter().zip(&q.log_var).map(|(&m, &lv)| m + (half * lv).exp() * rng.normal::<T>()).collect()
}

pub fn log_prob_gaussian<T: Scalar>(x: &[T], p: &DiagGaussian<T>) -> Result<T, DistributionError> {
    check_dims(x.len(), p.dim())?;
    let half = T::of(0.5);
    let ln_2pi = T::of((2.0 * std::f64::consts::PI).ln());
    Ok(x.iter()
        .zip(p.mean.iter().zip(&p.log_var))
        .map(|(&x, (&m, &lv))| {
            let d = x - m;
            -half * (ln_2pi + lv) - half * d * d * (-lv).exp()
        })
        .sum())
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Σ_d [x·log σ(l) + (1−x)·log(1−σ(l))], evaluated as Σ_d [x·l − softplus(l)].
pub fn log_prob_bernoulli<T: Scalar>(x: &[T], logits: &[T]) -> Result<T, DistributionError> {
    check_dims(x.len(), logits.len())?;
    if let Some(i) = x.iter().position(|&v| v != T::zero() && v != T::one()) {
        return Err(DistributionError::NonBinary(i));
    }
    Ok(x.iter().zip(logits).map(|(&x, &l)| x * l - softplus(l)).sum())
}

/// Monte Carlo estimate with its standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        McEstimate { estimate: mean, std_error: (var / n).sqrt() }
    }
}

/// `(1/n) Σ [log q(z_i) − log p(z_i)]` with `z_i ~ q`.
pub fn mc_kl<T: Scalar>(
    q: &DiagGaussian<T>,
    p: &DiagGaussian<T>,
    n: usize,
    rng: &mut RngStream,
) -> Result<McEstimate, DistributionError> {
    check_dims(q.dim(), p.dim())?;
    if n < 100 {
        return Err(DistributionError::TooFewSamples(n));
    }
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let z = reparam_sample(q, rng);
            (log_prob_gaussian(&z, q).expect("dims checked") - log_prob_gaussian(&z, p).expect("dims checked")).as_f64()
        })
        .collect();
    Ok(McEstimate::from_samples(&samples))
}
