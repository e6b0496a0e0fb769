//! Single-output Gaussian process regression with a squared-exponential
//! kernel and one length scale per regressor dimension (ARD):
//!
//! ```text
//! k(v, w) = exp(-½ Σ_i ((v_i - w_i) / l_i)²)
//! ```
//!
//! The kernel has unit signal variance. Hyperparameters (length scales and
//! the noise variance σ²) are chosen by maximizing the log marginal
//! likelihood with restarted L-BFGS in log space. When training through
//! [`GaussianProcess::train`], observations are standardized first, so a
//! unit signal variance is the right scale for every state variable.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, spd_inverse};
use crate::optim::{self, LbfgsOptions};

/// Smallest noise variance the optimizer may reach.
pub const NOISE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelHyperparameters {
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl KernelHyperparameters {
    pub fn new(length_scales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let h = Self {
            length_scales,
            noise_variance,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_scales.is_empty()
            || self.length_scales.iter().any(|l| !(*l > 0.0 && l.is_finite()))
        {
            return Err(Error::Precondition(format!(
                "length scales must be positive and finite: {:?}",
                self.length_scales
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Precondition(format!(
                "noise variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// `(log l_1, …, log l_V, log σ²)`.
    pub fn to_log(&self) -> Vec<f64> {
        self.length_scales
            .iter()
            .map(|l| l.ln())
            .chain(std::iter::once(self.noise_variance.ln()))
            .collect()
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let (ls, noise) = theta.split_at(theta.len() - 1);
        Self {
            length_scales: ls.iter().map(|t| t.exp()).collect(),
            noise_variance: noise[0].exp(),
        }
    }
}

/// Regressors `v_n ∈ R^V` (row-major) with scalar observations `z_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    dim: usize,
    regressors: Vec<f64>,
    observations: Vec<f64>,
}

impl TrainingSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            regressors: Vec::new(),
            observations: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], observations: &[f64]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::Precondition("empty training set".into()))?;
        if rows.len() != observations.len() {
            return Err(Error::Structural(format!(
                "{} regressors but {} observations",
                rows.len(),
                observations.len()
            )));
        }
        let mut set = Self::new(dim);
        for (r, z) in rows.iter().zip(observations) {
            set.push(r.as_ref(), *z)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, regressor: &[f64], observation: f64) -> Result<()> {
        if regressor.len() != self.dim {
            return Err(Error::Structural(format!(
                "regressor has dimension {}, expected {}",
                regressor.len(),
                self.dim
            )));
        }
        if !observation.is_finite() || regressor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training data".into()));
        }
        self.regressors.extend_from_slice(regressor);
        self.observations.push(observation);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn regressor(&self, i: usize) -> &[f64] {
        &self.regressors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    fn with_observations(&self, observations: Vec<f64>) -> Self {
        Self {
            dim: self.dim,
            regressors: self.regressors.clone(),
            observations,
        }
    }

    /// Population standard deviation of each regressor coordinate.
    pub fn regressor_std(&self) -> Vec<f64> {
        let t = self.len() as f64;
        (0..self.dim)
            .map(|d| {
                let col = || (0..self.len()).map(|i| self.regressors[i * self.dim + d]);
                let mean = col().sum::<f64>() / t;
                (col().map(|v| (v - mean).powi(2)).sum::<f64>() / t).sqrt()
            })
            .collect()
    }
}

#[inline]
fn scaled_sq_dist(v: &[f64], w: &[f64], inv_l2: &[f64]) -> f64 {
    v.iter()
        .zip(w)
        .zip(inv_l2)
        .map(|((a, b), s)| (a - b) * (a - b) * s)
        .sum()
}

/// Squared-exponential ARD kernel value.
pub fn se_kernel(v: &[f64], w: &[f64], hyper: &KernelHyperparameters) -> Result<f64> {
    if v.len() != hyper.dim() || w.len() != hyper.dim() {
        return Err(Error::Structural(format!(
            "kernel inputs of dimension {} and {}, expected {}",
            v.len(),
            w.len(),
            hyper.dim()
        )));
    }
    let inv_l2: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    Ok((-0.5 * scaled_sq_dist(v, w, &inv_l2)).exp())
}

/// Gram matrix of the kernel over the training regressors, without noise.
pub fn kernel_matrix(data: &TrainingSet, length_scales: &[f64]) -> DMatrix<f64> {
    let t = data.len();
    let inv_l2: Vec<f64> = length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut k = DMatrix::zeros(t, t);
    for j in 0..t {
        k[(j, j)] = 1.0;
        let vj = data.regressor(j);
        for i in j + 1..t {
            let v = (-0.5 * scaled_sq_dist(data.regressor(i), vj, &inv_l2)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Log marginal likelihood and its gradient with respect to
/// `(log l_1, …, log l_V, log σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub value: f64,
    pub gradient: Vec<f64>,
}

fn check_dims(hyper: &KernelHyperparameters, data: &TrainingSet) -> Result<()> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if hyper.dim() != data.dim() {
        return Err(Error::Structural(format!(
            "{} length scales for regressors of dimension {}",
            hyper.dim(),
            data.dim()
        )));
    }
    Ok(())
}

pub fn log_marginal_likelihood(hyper: &KernelHyperparameters, data: &TrainingSet) -> Result<Evidence> {
    check_dims(hyper, data)?;
    let t = data.len();
    let v_dim = data.dim();
    let k = kernel_matrix(data, &hyper.length_scales);
    let mut a = k.clone();
    for i in 0..t {
        a[(i, i)] += hyper.noise_variance;
    }
    let (chol, _) = cholesky_with_jitter(a, "log marginal likelihood")?;
    let z = DVector::from_column_slice(data.observations());
    let alpha = chol.solve(&z);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let value = -0.5 * z.dot(&alpha) - 0.5 * log_det - 0.5 * t as f64 * (2.0 * std::f64::consts::PI).ln();

    // dL/dθ = ½ tr((ααᵀ − A⁻¹) ∂A/∂θ)
    let a_inv = spd_inverse(&chol);
    let inv_l2: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut grad = vec![0.0; v_dim + 1];
    for j in 0..t {
        let vj = data.regressor(j);
        for i in j + 1..t {
            let q = alpha[i] * alpha[j] - a_inv[(i, j)];
            // off-diagonal pairs appear twice in the trace
            let w = 2.0 * q * k[(i, j)];
            if w == 0.0 {
                continue;
            }
            for (d, (x, y)) in data.regressor(i).iter().zip(vj).enumerate() {
                grad[d] += w * (x - y) * (x - y) * inv_l2[d];
            }
        }
    }
    for g in &mut grad[..v_dim] {
        *g *= 0.5;
    }
    let trace_q: f64 = (0..t).map(|i| alpha[i] * alpha[i] - a_inv[(i, i)]).sum();
    grad[v_dim] = 0.5 * hyper.noise_variance * trace_q;
    Ok(Evidence {
        value,
        gradient: grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerOptions {
    pub num_restarts: usize,
    pub lbfgs: LbfgsOptions,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            num_restarts: 5,
            lbfgs: LbfgsOptions {
                max_iterations: 60,
                gradient_tolerance: 1e-4,
                relative_tolerance: 1e-8,
                ..LbfgsOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperparameterFit {
    pub hyper: KernelHyperparameters,
    pub log_evidence: f64,
    /// Evidence at each restart's starting point.
    pub initial_evidence: Vec<f64>,
    /// False when no restart improved on its initialization; the best
    /// initialization is returned in that case.
    pub improved: bool,
}

/// Evidence maximization on the given observations as they are. Use
/// [`optimize_hyperparameters`] for the standardized variant.
pub fn maximize_evidence(data: &TrainingSet, opts: &OptimizerOptions, seed: u64) -> Result<HyperparameterFit> {
    if data.len() < 2 {
        return Err(Error::Precondition(format!(
            "evidence maximization needs at least 2 points, got {}",
            data.len()
        )));
    }
    if opts.num_restarts == 0 {
        return Err(Error::Precondition("at least one restart is required".into()));
    }
    let v_dim = data.dim();
    let spread: Vec<f64> = data
        .regressor_std()
        .into_iter()
        .map(|s| if s > 1e-12 { s } else { 1.0 })
        .collect();
    let z = data.observations();
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
    let noise0 = (1e-4 * if var > 0.0 { var } else { 1.0 }).max(2.0 * NOISE_FLOOR);

    // The noise coordinate is log(σ² − floor), so the floor can never be
    // crossed; its gradient follows by the chain rule from log σ².
    let to_hyper = |theta: &[f64]| KernelHyperparameters {
        length_scales: theta[..v_dim].iter().map(|t| t.exp()).collect(),
        noise_variance: NOISE_FLOOR + theta[v_dim].exp(),
    };
    let objective = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        if theta.iter().any(|t| t.abs() > 40.0) {
            return None;
        }
        let h = to_hyper(theta);
        let ev = log_marginal_likelihood(&h, data).ok()?;
        let mut g: Vec<f64> = ev.gradient.iter().map(|c| -c).collect();
        g[v_dim] *= (h.noise_variance - NOISE_FLOOR) / h.noise_variance;
        Some((-ev.value, g))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut initial_evidence = Vec::with_capacity(opts.num_restarts);
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    for _ in 0..opts.num_restarts {
        let mut theta: Vec<f64> = spread
            .iter()
            .map(|s| (s * 10f64.powf(rng.gen_range(-1.0..=1.0))).ln())
            .collect();
        theta.push((noise0 - NOISE_FLOOR).ln());
        let start = objective(&theta);
        initial_evidence.push(start.as_ref().map_or(f64::NEG_INFINITY, |(f, _)| -f));
        let Some((f0, _)) = start else { continue };
        let (value, x, improved) = match optim::minimize(objective, theta.clone(), &opts.lbfgs) {
            Some(m) if m.value < f0 => (-m.value, m.x, true),
            _ => (-f0, theta, false),
        };
        if best.as_ref().is_none_or(|(b, _, _)| value > *b) {
            best = Some((value, x, improved));
        }
    }
    let (log_evidence, theta, improved) = best.ok_or_else(|| Error::Conditioning {
        context: "evidence at every initialization".into(),
        jitter: crate::linalg::JITTER_LEVELS.to_vec(),
    })?;
    Ok(HyperparameterFit {
        hyper: to_hyper(&theta),
        log_evidence,
        initial_evidence,
        improved,
    })
}

/// Mean and scale used to standardize observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationScaling {
    pub offset: f64,
    pub scale: f64,
}

impl ObservationScaling {
    pub const IDENTITY: Self = Self {
        offset: 0.0,
        scale: 1.0,
    };

    /// Zero mean, unit variance; constant observations keep unit scale.
    pub fn standardizing(observations: &[f64]) -> Self {
        let t = observations.len().max(1) as f64;
        let offset = observations.iter().sum::<f64>() / t;
        let var = observations.iter().map(|v| (v - offset).powi(2)).sum::<f64>() / t;
        let scale = var.sqrt();
        let scale = if scale > 1e-12 * (1.0 + offset.abs()) { scale } else { 1.0 };
        Self { offset, scale }
    }

    fn apply(&self, data: &TrainingSet) -> TrainingSet {
        data.with_observations(
            data.observations()
                .iter()
                .map(|z| (z - self.offset) / self.scale)
                .collect(),
        )
    }
}

/// Standardizes the observations, then maximizes the evidence with
/// `num_restarts` restarts. The returned hyperparameters refer to the
/// standardized observations, as used by [`GaussianProcess::train`].
pub fn optimize_hyperparameters(data: &TrainingSet, num_restarts: usize, seed: u64) -> Result<HyperparameterFit> {
    let opts = OptimizerOptions {
        num_restarts,
        ..OptimizerOptions::default()
    };
    let scaled = ObservationScaling::standardizing(data.observations()).apply(data);
    maximize_evidence(&scaled, &opts, seed)
}

/// A fitted GP, ready for posterior-mean predictions.
#[derive(Debug, Clone)]
pub struct GaussianProcess {
    data: TrainingSet,
    hyper: KernelHyperparameters,
    inv_l2: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    /// `(K + σ²I)⁻¹ z` for the scaled observations.
    weights: Vec<f64>,
    scaling: ObservationScaling,
}

impl GaussianProcess {
    /// Fits on the raw observations (prior mean zero).
    pub fn fit(data: &TrainingSet, hyper: &KernelHyperparameters) -> Result<Self> {
        Self::fit_scaled(data, hyper, ObservationScaling::IDENTITY)
    }

    /// Fits on standardized observations; predictions are mapped back, so
    /// the prior mean is the observation mean.
    pub fn fit_standardized(data: &TrainingSet, hyper: &KernelHyperparameters) -> Result<Self> {
        Self::fit_scaled(data, hyper, ObservationScaling::standardizing(data.observations()))
    }

    fn fit_scaled(data: &TrainingSet, hyper: &KernelHyperparameters, scaling: ObservationScaling) -> Result<Self> {
        check_dims(hyper, data)?;
        let mut a = kernel_matrix(data, &hyper.length_scales);
        for i in 0..data.len() {
            a[(i, i)] += hyper.noise_variance;
        }
        let (chol, jitter) = cholesky_with_jitter(a, "GP fit")?;
        let z = DVector::from_iterator(
            data.len(),
            data.observations().iter().map(|v| (v - scaling.offset) / scaling.scale),
        );
        let weights = chol.solve(&z).iter().copied().collect();
        Ok(Self {
            data: data.clone(),
            inv_l2: hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect(),
            hyper: hyper.clone(),
            chol,
            jitter,
            weights,
            scaling,
        })
    }

    /// Standardize, maximize the evidence, fit.
    pub fn train(data: &TrainingSet, opts: &OptimizerOptions, seed: u64) -> Result<(Self, HyperparameterFit)> {
        let scaling = ObservationScaling::standardizing(data.observations());
        let fit = maximize_evidence(&scaling.apply(data), opts, seed)?;
        let gp = Self::fit_scaled(data, &fit.hyper, scaling)?;
        Ok((gp, fit))
    }

    pub fn hyperparameters(&self) -> &KernelHyperparameters {
        &self.hyper
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.data
    }

    pub fn scaling(&self) -> ObservationScaling {
        self.scaling
    }

    /// Diagonal jitter added on top of the noise variance, if any.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular factor of `K + σ²I` (plus jitter).
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_input(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.data.dim() {
            return Err(Error::Structural(format!(
                "query has dimension {}, expected {}",
                v.len(),
                self.data.dim()
            )));
        }
        Ok(())
    }

    /// Posterior mean `μ(v) = k(v, V)ᵀ (K + σ²I)⁻¹ z`.
    pub fn predict_mean(&self, v: &[f64]) -> Result<f64> {
        self.check_input(v)?;
        let s: f64 = (0..self.data.len())
            .map(|i| {
                self.weights[i] * (-0.5 * scaled_sq_dist(v, self.data.regressor(i), &self.inv_l2)).exp()
            })
            .sum();
        Ok(self.scaling.offset + self.scaling.scale * s)
    }

    /// `∂μ/∂v`, using `∂k(v, v_i)/∂v = −Λ⁻²(v − v_i) k(v, v_i)`.
    pub fn predict_mean_gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; v.len()];
        self.predict_with_gradient(v, &mut grad)?;
        Ok(grad)
    }

    /// Mean and gradient in one pass; the gradient is written to `grad`.
    pub fn predict_with_gradient(&self, v: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_input(v)?;
        if grad.len() != v.len() {
            return Err(Error::Structural("gradient buffer has the wrong length".into()));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut mean = 0.0;
        for i in 0..self.data.len() {
            let vi = self.data.regressor(i);
            let wk = self.weights[i] * (-0.5 * scaled_sq_dist(v, vi, &self.inv_l2)).exp();
            mean += wk;
            for d in 0..v.len() {
                grad[d] -= wk * (v[d] - vi[d]) * self.inv_l2[d];
            }
        }
        grad.iter_mut().for_each(|g| *g *= self.scaling.scale);
        Ok(self.scaling.offset + self.scaling.scale * mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn random_set(t: usize, dim: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let obs: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x.sin()).sum::<f64>() + 0.1 * rng.gen::<f64>()).collect();
        TrainingSet::from_rows(&rows, &obs).unwrap()
    }

    /// Explicit-inverse, explicit-determinant evaluation of the evidence.
    fn dense_evidence(hyper: &KernelHyperparameters, data: &TrainingSet) -> f64 {
        let t = data.len();
        let mut a = DMatrix::from_fn(t, t, |i, j| se_kernel(data.regressor(i), data.regressor(j), hyper).unwrap());
        a += DMatrix::identity(t, t) * hyper.noise_variance;
        let z = DVector::from_column_slice(data.observations());
        let inv = a.clone().try_inverse().unwrap();
        -0.5 * z.dot(&(inv * &z)) - 0.5 * a.determinant().ln() - 0.5 * t as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn kernel_values() {
        let h = KernelHyperparameters::new(vec![1.0, 1.0], 0.1).unwrap();
        assert_eq!(se_kernel(&[0.3, -1.0], &[0.3, -1.0], &h).unwrap(), 1.0);
        let v = se_kernel(&[1.0, 1.0], &[0.0, 0.0], &h).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
        let far = se_kernel(&[100.0, 0.0], &[0.0, 0.0], &h).unwrap();
        let farther = se_kernel(&[200.0, 0.0], &[0.0, 0.0], &h).unwrap();
        assert!(far < 1e-300 && farther <= far);
        assert!(se_kernel(&[1.0], &[1.0, 2.0], &h).is_err());
    }

    #[test]
    fn scalar_evidence() {
        let (z, s2) = (0.7, 0.3);
        let data = TrainingSet::from_rows(&[[0.0]], &[z]).unwrap();
        let h = KernelHyperparameters::new(vec![1.0], s2).unwrap();
        let ev = log_marginal_likelihood(&h, &data).unwrap();
        let expected = -0.5 * z * z / (1.0 + s2) - 0.5 * (1.0 + s2).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ev.value - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_data_is_rejected() {
        let h = KernelHyperparameters::new(vec![1.0], 0.1).unwrap();
        assert!(matches!(
            log_marginal_likelihood(&h, &TrainingSet::new(1)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn evidence_matches_dense_computation() {
        let data = random_set(20, 3, 9);
        let h = KernelHyperparameters::new(vec![0.7, 1.3, 2.0], 0.05).unwrap();
        let ev = log_marginal_likelihood(&h, &data).unwrap();
        let dense = dense_evidence(&h, &data);
        assert!((ev.value - dense).abs() <= 1e-10 * dense.abs());
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let data = random_set(10, 3, 1);
        let h = KernelHyperparameters::new(vec![0.8, 1.5, 0.6], 0.02).unwrap();
        let ev = log_marginal_likelihood(&h, &data).unwrap();
        let theta = h.to_log();
        for i in 0..theta.len() {
            let eps = 1e-5;
            let mut up = theta.clone();
            up[i] += eps;
            let mut dn = theta.clone();
            dn[i] -= eps;
            let fd = (log_marginal_likelihood(&KernelHyperparameters::from_log(&up), &data).unwrap().value
                - log_marginal_likelihood(&KernelHyperparameters::from_log(&dn), &data).unwrap().value)
                / (2.0 * eps);
            let rel = (fd - ev.gradient[i]).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-5, "component {i}: analytic {} fd {fd}", ev.gradient[i]);
        }
    }

    #[test]
    fn fit_single_point() {
        let data = TrainingSet::from_rows(&[[0.5, 0.5]], &[2.0]).unwrap();
        let h = KernelHyperparameters::new(vec![1.0, 1.0], 0.25).unwrap();
        let gp = GaussianProcess::fit(&data, &h).unwrap();
        assert_eq!(gp.factor().shape(), (1, 1));
        assert!((gp.weights()[0] - 2.0 / 1.25).abs() < 1e-15);
    }

    #[test]
    fn two_point_posterior_matches_hand_solve() {
        let data = TrainingSet::from_rows(&[[0.0], [1.0]], &[1.0, -2.0]).unwrap();
        let h = KernelHyperparameters::new(vec![0.8], 0.01).unwrap();
        let gp = GaussianProcess::fit(&data, &h).unwrap();
        let k01 = (-0.5f64 / 0.64).exp();
        // 2x2 solve of [[1+s, k],[k, 1+s]] w = z by Cramer's rule
        let a = 1.01;
        let det = a * a - k01 * k01;
        let w0 = (a * 1.0 - k01 * -2.0) / det;
        let w1 = (a * -2.0 - k01 * 1.0) / det;
        let q = 0.3;
        let expected = w0 * (-0.5 * q * q / 0.64f64).exp() + w1 * (-0.5 * (q - 1.0) * (q - 1.0) / 0.64f64).exp();
        assert!((gp.predict_mean(&[q]).unwrap() - expected).abs() < 1e-12);
        // at the training points the error shrinks with the noise variance
        for (x, z) in [(0.0, 1.0), (1.0, -2.0)] {
            assert!((gp.predict_mean(&[x]).unwrap() - z).abs() < 0.05);
        }
    }

    #[test]
    fn interpolation_limit_and_prior_reversion() {
        let data = TrainingSet::from_rows(&[[0.2, -0.1]], &[3.5]).unwrap();
        let h = KernelHyperparameters::new(vec![0.5, 0.5], 1e-12).unwrap();
        let gp = GaussianProcess::fit(&data, &h).unwrap();
        assert!((gp.predict_mean(&[0.2, -0.1]).unwrap() - 3.5).abs() < 1e-6);

        let data = random_set(15, 2, 4);
        let h = KernelHyperparameters::new(vec![0.3, 0.3], 0.01).unwrap();
        let gp = GaussianProcess::fit(&data, &h).unwrap();
        let z_norm = DVector::from_column_slice(data.observations()).norm();
        let far = [20.0 * 0.3 + 2.0, 0.0];
        assert!(gp.predict_mean(&far).unwrap().abs() < 1e-8 * z_norm);
        assert!(gp.predict_mean_gradient(&far).unwrap().iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn factor_reproduces_kernel_matrix() {
        let data = random_set(30, 3, 2);
        let h = KernelHyperparameters::new(vec![1.0, 0.5, 2.0], 1e-3).unwrap();
        let gp = GaussianProcess::fit(&data, &h).unwrap();
        let l = gp.factor();
        let mut a = kernel_matrix(&data, &h.length_scales);
        a += DMatrix::identity(30, 30) * 1e-3;
        assert!((&l * l.transpose() - &a).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn duplicated_regressors_need_jitter() {
        let rows = vec![[0.5, 0.5]; 4];
        let data = TrainingSet::from_rows(&rows, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let h = KernelHyperparameters::new(vec![1.0, 1.0], 0.0).unwrap();
        let gp = GaussianProcess::fit(&data, &h).unwrap();
        assert!(gp.jitter() > 0.0);
        assert!((gp.predict_mean(&[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_midpoint_has_zero_gradient() {
        let data = TrainingSet::from_rows(&[[-1.0, 0.0], [1.0, 0.0]], &[0.5, 0.5]).unwrap();
        let h = KernelHyperparameters::new(vec![0.7, 0.7], 0.01).unwrap();
        let gp = GaussianProcess::fit(&data, &h).unwrap();
        let g = gp.predict_mean_gradient(&[0.0, 0.3]).unwrap();
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let data = random_set(25, 4, 17);
        let h = KernelHyperparameters::new(vec![0.9, 1.4, 0.6, 2.0], 1e-3).unwrap();
        let gp = GaussianProcess::fit_standardized(&data, &h).unwrap();
        let v = [0.3, -0.4, 0.8, 0.1];
        let g = gp.predict_mean_gradient(&v).unwrap();
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for d in 0..4 {
            let eps = 1e-6;
            let mut up = v;
            up[d] += eps;
            let mut dn = v;
            dn[d] -= eps;
            let fd = (gp.predict_mean(&up).unwrap() - gp.predict_mean(&dn).unwrap()) / (2.0 * eps);
            assert!((fd - g[d]).abs() < 1e-5 * scale, "dim {d}: {} vs {fd}", g[d]);
        }
    }

    #[test]
    fn optimizer_is_deterministic_and_never_worse_than_starts() {
        let data = random_set(40, 2, 5);
        let a = optimize_hyperparameters(&data, 3, 11).unwrap();
        let b = optimize_hyperparameters(&data, 3, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.improved);
        assert!(a.initial_evidence.iter().all(|e| a.log_evidence >= *e));
    }

    #[test]
    fn optimizer_needs_two_points() {
        let data = TrainingSet::from_rows(&[[1.0]], &[1.0]).unwrap();
        assert!(matches!(optimize_hyperparameters(&data, 2, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn noise_free_data_drives_noise_to_floor() {
        // a smooth deterministic function sampled twice at each location
        let rows: Vec<[f64; 1]> = (0..30).map(|i| [(i % 15) as f64 / 5.0]).collect();
        let obs: Vec<f64> = rows.iter().map(|r| (1.3 * r[0]).sin()).collect();
        let data = TrainingSet::from_rows(&rows, &obs).unwrap();
        let fit = optimize_hyperparameters(&data, 3, 1).unwrap();
        assert!(fit.hyper.noise_variance < 1e-6, "{:?}", fit.hyper);
        assert!(fit.hyper.noise_variance >= NOISE_FLOOR);
    }

    #[test]
    fn recovers_length_scale_of_sampled_gp() {
        // 200 points drawn from a zero-mean SE-GP with l = 0.5
        let truth = KernelHyperparameters::new(vec![0.5], 1e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let rows: Vec<[f64; 1]> = (0..200).map(|_| [rng.gen_range(0.0..10.0)]).collect();
        let pre = TrainingSet::from_rows(&rows, &vec![0.0; 200]).unwrap();
        let mut cov = kernel_matrix(&pre, &truth.length_scales);
        cov += DMatrix::identity(200, 200) * truth.noise_variance;
        let l = cov.cholesky().unwrap().l();
        let w = DVector::from_fn(200, |_, _| StandardNormal.sample(&mut rng));
        let z = l * w;
        let data = TrainingSet::from_rows(&rows, z.as_slice()).unwrap();
        let fit = maximize_evidence(&data, &OptimizerOptions::default(), 7).unwrap();
        let ratio = fit.hyper.length_scales[0] / 0.5;
        assert!((1.0 / 1.5..=1.5).contains(&ratio), "recovered {:?}", fit.hyper);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gram_is_psd(seed in 0u64..1000, l in 0.05f64..5.0) {
            let data = random_set(12, 2, seed);
            let k = kernel_matrix(&data, &[l, 2.0 * l]);
            prop_assert!((&k - k.transpose()).abs().max() == 0.0);
            let min_eig = k.symmetric_eigenvalues().iter().fold(f64::INFINITY, |m, v| m.min(*v));
            prop_assert!(min_eig > -1e-10);
        }

        #[test]
        fn prediction_is_linear_in_observations(seed in 0u64..1000, c in -3.0f64..3.0) {
            let a = random_set(10, 2, seed);
            let b = random_set(10, 2, seed + 1);
            let mixed: Vec<f64> = a.observations().iter().zip(b.observations()).map(|(x, y)| x + c * y).collect();
            let ab = a.with_observations(mixed);
            let b = a.with_observations(b.observations().to_vec());
            let h = KernelHyperparameters::new(vec![0.7, 1.1], 0.01).unwrap();
            let q = [0.1, -0.2];
            let pa = GaussianProcess::fit(&a, &h).unwrap().predict_mean(&q).unwrap();
            let pb = GaussianProcess::fit(&b, &h).unwrap().predict_mean(&q).unwrap();
            let pab = GaussianProcess::fit(&ab, &h).unwrap().predict_mean(&q).unwrap();
            prop_assert!((pab - (pa + c * pb)).abs() < 1e-8 * (1.0 + pab.abs()));
        }
    }
}
