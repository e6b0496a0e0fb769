//! State-space dynamics model built from one GP per state variable.
//!
//! GP `m` predicts `x_m(n+1)` from the regressor `[x(n); u(n)]`. Chaining
//! the posterior means from the known initial state gives a roll-out
//! prediction of a whole trial, and chaining their gradients gives the
//! Jacobian of that roll-out with respect to the lifted input.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gp::{GaussianProcess, HyperparameterFit, OptimizerOptions, TrainingSet};
use crate::trajectory::{LiftedTrajectory, TrialRecord};

/// The most recent trials, oldest first.
#[derive(Debug, Clone)]
pub struct TrialWindow {
    records: VecDeque<TrialRecord>,
    capacity: usize,
}

impl TrialWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Precondition("trial window must hold at least one trial".into()));
        }
        Ok(Self {
            records: VecDeque::with_capacity(capacity + 1),
            capacity,
        })
    }

    /// Appends a trial, returning the evicted oldest one if the window was full.
    pub fn push(&mut self, record: TrialRecord) -> Option<TrialRecord> {
        self.records.push_back(record);
        if self.records.len() > self.capacity {
            self.records.pop_front()
        } else {
            None
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &TrialRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// One training set per state variable: regressors `[x(n); u(n)]`,
/// observations `x_m(n+1)`. Each trial of `N` samples gives `N − 1` pairs.
pub fn assemble_training_data(window: &TrialWindow) -> Result<Vec<TrainingSet>> {
    let first = window
        .records()
        .next()
        .ok_or_else(|| Error::Precondition("cannot train on an empty trial window".into()))?;
    let (m, r) = (first.states.dim(), first.input.dim());
    let (n, dt) = (first.input.num_samples(), first.input.dt());
    let mut sets = vec![TrainingSet::new(m + r); m];
    let mut regressor = vec![0.0; m + r];
    for rec in window.records() {
        if rec.states.dim() != m
            || rec.input.dim() != r
            || rec.input.num_samples() != n
            || rec.states.num_samples() != n
            || rec.input.dt() != dt
        {
            return Err(Error::Structural(format!(
                "trial {} does not match the shape of the other trials in the window",
                rec.trial_index
            )));
        }
        for k in 0..n - 1 {
            regressor[..m].copy_from_slice(rec.states.sample(k));
            regressor[m..].copy_from_slice(rec.input.sample(k));
            let next = rec.states.sample(k + 1);
            for (set, z) in sets.iter_mut().zip(next) {
                set.push(&regressor, *z)?;
            }
        }
    }
    Ok(sets)
}

/// What the learner knows about the plant without identifying it.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownStructure {
    pub initial_state: Vec<f64>,
    /// `O × M`, with `y = C x`.
    pub output_matrix: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct DynamicsModel {
    gps: Vec<GaussianProcess>,
    fits: Vec<HyperparameterFit>,
    input_dim: usize,
    structure: KnownStructure,
    horizon: usize,
}

/// Fits one GP per state variable with independently optimized
/// hyperparameters. GP `m` uses a seed derived from `seed` and `m`.
pub fn train_model(
    window: &TrialWindow,
    structure: &KnownStructure,
    opts: &OptimizerOptions,
    seed: u64,
) -> Result<DynamicsModel> {
    let sets = assemble_training_data(window)?;
    let first = window.records().next().expect("window checked non-empty");
    let m = sets.len();
    if structure.initial_state.len() != m || structure.output_matrix.ncols() != m {
        return Err(Error::Structural(format!(
            "known structure has {} initial states and {} output-matrix columns for {m} state variables",
            structure.initial_state.len(),
            structure.output_matrix.ncols()
        )));
    }
    let mut gps = Vec::with_capacity(m);
    let mut fits = Vec::with_capacity(m);
    for (i, set) in sets.iter().enumerate() {
        let gp_seed = seed ^ (i as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F);
        let (gp, fit) = GaussianProcess::train(set, opts, gp_seed).map_err(|e| Error::StateModel {
            state: i,
            source: Box::new(e),
        })?;
        gps.push(gp);
        fits.push(fit);
    }
    Ok(DynamicsModel {
        gps,
        fits,
        input_dim: first.input.dim(),
        structure: structure.clone(),
        horizon: first.input.num_samples(),
    })
}

impl DynamicsModel {
    pub fn state_dim(&self) -> usize {
        self.gps.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.structure.output_matrix.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gps(&self) -> &[GaussianProcess] {
        &self.gps
    }

    pub fn hyperparameter_fits(&self) -> &[HyperparameterFit] {
        &self.fits
    }

    fn check_input(&self, input: &LiftedTrajectory) -> Result<()> {
        if input.dim() != self.input_dim {
            return Err(Error::Structural(format!(
                "model expects {} inputs per sample, got {}",
                self.input_dim,
                input.dim()
            )));
        }
        Ok(())
    }

    fn output_of(&self, x: &[f64], out: &mut Vec<f64>) {
        let c = &self.structure.output_matrix;
        for o in 0..c.nrows() {
            out.push((0..x.len()).map(|j| c[(o, j)] * x[j]).sum());
        }
    }

    fn diverged(&self, x: &[f64], sample: usize) -> Result<()> {
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence {
                what: "model roll-out".into(),
                sample,
            })
        }
    }

    /// Predicted state trajectory for `input`, starting from the known
    /// initial state.
    pub fn rollout_states(&self, input: &LiftedTrajectory) -> Result<LiftedTrajectory> {
        self.check_input(input)?;
        let m = self.state_dim();
        let mut x = self.structure.initial_state.clone();
        let mut states = Vec::with_capacity(m * input.num_samples());
        let mut regressor = vec![0.0; m + self.input_dim];
        for n in 0..input.num_samples() {
            self.diverged(&x, n + 1)?;
            states.extend_from_slice(&x);
            if n + 1 < input.num_samples() {
                regressor[..m].copy_from_slice(&x);
                regressor[m..].copy_from_slice(input.sample(n));
                for (xi, gp) in x.iter_mut().zip(&self.gps) {
                    *xi = gp.predict_mean(&regressor)?;
                }
            }
        }
        LiftedTrajectory::new(states, m, input.dt())
    }

    /// Predicted output trajectory, `ŷ(n) = C x̂(n)`.
    pub fn rollout(&self, input: &LiftedTrajectory) -> Result<LiftedTrajectory> {
        let states = self.rollout_states(input)?;
        let mut out = Vec::with_capacity(self.output_dim() * input.num_samples());
        for x in states.samples() {
            self.output_of(x, &mut out);
        }
        LiftedTrajectory::new(out, self.output_dim(), input.dt())
    }

    /// Jacobian of [`rollout`](Self::rollout) with respect to the lifted
    /// input, shape `ON × RN`, sample-major on both sides.
    ///
    /// The sensitivity `∂x̂(n)/∂u` (an `M × RN` matrix) is carried forward:
    /// `S(n+1) = A_n S(n) + B_n E_n`, where `A_n` and `B_n` are the state and
    /// input parts of the GP mean gradients at sample `n` and `E_n` selects
    /// `u(n)`. Row block `n` of the result is `C S(n)`. Since `S(n)` only has
    /// nonzero columns for inputs before sample `n`, the matrix is strictly
    /// block lower-triangular.
    pub fn rollout_jacobian(&self, input: &LiftedTrajectory) -> Result<DMatrix<f64>> {
        self.check_input(input)?;
        let (m, r) = (self.state_dim(), self.input_dim);
        let o = self.output_dim();
        let n_samples = input.num_samples();
        let c = &self.structure.output_matrix;
        let mut p = DMatrix::zeros(o * n_samples, r * n_samples);
        let mut sens = DMatrix::<f64>::zeros(m, r * n_samples);
        let mut x = self.structure.initial_state.clone();
        let mut regressor = vec![0.0; m + r];
        let mut grads = DMatrix::<f64>::zeros(m, m + r);
        let mut grad = vec![0.0; m + r];
        for n in 0..n_samples {
            self.diverged(&x, n + 1)?;
            let live = n * r;
            if live > 0 {
                let block = c * sens.columns(0, live);
                p.view_mut((n * o, 0), (o, live)).copy_from(&block);
            }
            if n + 1 == n_samples {
                break;
            }
            regressor[..m].copy_from_slice(&x);
            regressor[m..].copy_from_slice(input.sample(n));
            for (i, gp) in self.gps.iter().enumerate() {
                x[i] = gp.predict_with_gradient(&regressor, &mut grad)?;
                grads.row_mut(i).copy_from_slice(&grad);
            }
            let a = grads.columns(0, m);
            if live > 0 {
                let next = a * sens.columns(0, live);
                sens.columns_mut(0, live).copy_from(&next);
            }
            sens.columns_mut(live, r).copy_from(&grads.columns(m, r));
        }
        Ok(p)
    }
}
