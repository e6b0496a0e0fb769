//! Plants: the trial-executing interface the learner drives, a two-link
//! horizontal-plane SCARA simulator, and a discrete linear plant used as a
//! test fixture.
//!
//! The SCARA arm obeys `M(q) q̈ + C(q, q̇) q̇ + D q̇ = u` with joint angles
//! `q = (α, β)`, where `β` is measured relative to the first link. The arm
//! moves in the horizontal plane, so gravity does not enter.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::trajectory::LiftedTrajectory;

/// States and outputs measured during one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub states: LiftedTrajectory,
    pub output: LiftedTrajectory,
}

/// A repetitive system that executes one fixed-length trial per call.
///
/// The learner treats the dynamics as unknown. It does know the input and
/// state dimensions, the output matrix `C` (with `y = C x`) and the state
/// each trial starts from.
pub trait Plant {
    fn input_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn output_matrix(&self) -> DMatrix<f64>;
    fn initial_state(&self) -> Vec<f64>;
    /// Applies `input` from the initial state. `trial` seeds any
    /// measurement noise.
    fn run_trial(&mut self, input: &LiftedTrajectory, trial: usize) -> Result<TrialData>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParameters {
    pub link_lengths: [f64; 2],
    pub link_masses: [f64; 2],
    /// Link inertias about their centers of mass.
    pub link_inertias: [f64; 2],
    /// Distance from each joint to its link's center of mass.
    pub com_distances: [f64; 2],
    pub joint_damping: [f64; 2],
    /// Symmetric motor torque saturation.
    pub torque_limit: f64,
}

impl Default for PlantParameters {
    fn default() -> Self {
        let l = 0.3;
        let m = 1.0;
        Self {
            link_lengths: [l, l],
            link_masses: [m, m],
            link_inertias: [m * l * l / 12.0; 2],
            com_distances: [l / 2.0; 2],
            joint_damping: [0.05; 2],
            torque_limit: 5.0,
        }
    }
}

impl PlantParameters {
    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            let ok = self.link_lengths[i] > 0.0
                && self.link_masses[i] > 0.0
                && self.link_inertias[i] > 0.0
                && self.com_distances[i] > 0.0
                && self.com_distances[i] <= self.link_lengths[i]
                && self.joint_damping[i] >= 0.0;
            if !ok {
                return Err(Error::Precondition(format!(
                    "invalid mechanical parameters for link {}: {self:?}",
                    i + 1
                )));
            }
        }
        if !(self.torque_limit > 0.0) {
            return Err(Error::Precondition("torque limit must be positive".into()));
        }
        Ok(())
    }

    /// `M(q)`; depends only on the relative angle β.
    pub fn inertia_matrix(&self, beta: f64) -> Matrix2<f64> {
        let [l1, _] = self.link_lengths;
        let [m1, m2] = self.link_masses;
        let [i1, i2] = self.link_inertias;
        let [r1, r2] = self.com_distances;
        let c = beta.cos();
        let m22 = i2 + m2 * r2 * r2;
        let m12 = m22 + m2 * l1 * r2 * c;
        let m11 = i1 + m1 * r1 * r1 + m2 * (l1 * l1 + 2.0 * l1 * r2 * c) + m22;
        Matrix2::new(m11, m12, m12, m22)
    }

    /// Coriolis/centrifugal matrix `C(q, q̇)` in the Christoffel convention,
    /// so that `Ṁ − 2C` is skew-symmetric.
    pub fn coriolis_matrix(&self, beta: f64, alpha_dot: f64, beta_dot: f64) -> Matrix2<f64> {
        let h = self.link_masses[1] * self.link_lengths[0] * self.com_distances[1] * beta.sin();
        Matrix2::new(
            -h * beta_dot,
            -h * (alpha_dot + beta_dot),
            h * alpha_dot,
            0.0,
        )
    }

    pub fn kinetic_energy(&self, state: &PlantState) -> f64 {
        let qd = Vector2::new(state.alpha_dot, state.beta_dot);
        0.5 * qd.dot(&(self.inertia_matrix(state.beta) * qd))
    }

    pub fn saturate(&self, torque: [f64; 2]) -> [f64; 2] {
        torque.map(|t| t.clamp(-self.torque_limit, self.torque_limit))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
}

impl PlantState {
    pub fn at_rest(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.alpha, self.beta, self.alpha_dot, self.beta_dot]
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        Self {
            alpha: x[0],
            beta: x[1],
            alpha_dot: x[2],
            beta_dot: x[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// `[α̇, β̇, α̈, β̈]` for an already saturated torque.
pub fn dynamics_rhs(state: &PlantState, torque: [f64; 2], params: &PlantParameters) -> Result<[f64; 4]> {
    if !state.is_finite() || !torque.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite("plant state or torque".into()));
    }
    let qd = Vector2::new(state.alpha_dot, state.beta_dot);
    let m = params.inertia_matrix(state.beta);
    let c = params.coriolis_matrix(state.beta, state.alpha_dot, state.beta_dot);
    let d = Vector2::new(
        params.joint_damping[0] * qd[0],
        params.joint_damping[1] * qd[1],
    );
    let rhs = Vector2::new(torque[0], torque[1]) - c * qd - d;
    // M is SPD for valid parameters.
    let qdd = m
        .cholesky()
        .ok_or_else(|| Error::NonFinite("inertia matrix factorization".into()))?
        .solve(&rhs);
    Ok([qd[0], qd[1], qdd[0], qdd[1]])
}

/// `y = (α, β)`.
pub fn output_map(state: &PlantState) -> [f64; 2] {
    [state.alpha, state.beta]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    /// RK4 steps per sample period; torques are held constant over the period.
    pub substeps: usize,
    /// Any state component beyond this magnitude counts as divergence.
    pub divergence_bound: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            substeps: 4,
            divergence_bound: 1e6,
        }
    }
}

fn rk4_step(x: [f64; 4], u: [f64; 2], h: f64, params: &PlantParameters) -> Result<[f64; 4]> {
    let f = |x: [f64; 4]| dynamics_rhs(&PlantState::from_array(x), u, params);
    let axpy = |a: [f64; 4], s: f64, k: [f64; 4]| std::array::from_fn(|i| a[i] + s * k[i]);
    let k1 = f(x)?;
    let k2 = f(axpy(x, h / 2.0, k1))?;
    let k3 = f(axpy(x, h / 2.0, k2))?;
    let k4 = f(axpy(x, h, k3))?;
    Ok(std::array::from_fn(|i| {
        x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    }))
}

/// Advances the state over one sample period with the torque held.
pub fn step(
    state: &PlantState,
    torque: [f64; 2],
    dt: f64,
    params: &PlantParameters,
    opts: &SimulationOptions,
) -> Result<PlantState> {
    let u = params.saturate(torque);
    let h = dt / opts.substeps as f64;
    let mut x = state.to_array();
    for _ in 0..opts.substeps {
        x = rk4_step(x, u, h, params)?;
    }
    Ok(PlantState::from_array(x))
}

/// Runs one noise-free trial with the default integrator settings.
pub fn simulate_trial(
    input: &LiftedTrajectory,
    x0: &PlantState,
    params: &PlantParameters,
) -> Result<TrialData> {
    simulate_trial_with(input, x0, params, &SimulationOptions::default())
}

pub fn simulate_trial_with(
    input: &LiftedTrajectory,
    x0: &PlantState,
    params: &PlantParameters,
    opts: &SimulationOptions,
) -> Result<TrialData> {
    if input.dim() != 2 {
        return Err(Error::Structural(format!(
            "SCARA input needs 2 torques per sample, got {}",
            input.dim()
        )));
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("initial state".into()));
    }
    let n = input.num_samples();
    let mut states = Vec::with_capacity(4 * n);
    let mut outputs = Vec::with_capacity(2 * n);
    let mut x = *x0;
    for k in 0..n {
        if !x.is_finite() || x.to_array().iter().any(|v| v.abs() > opts.divergence_bound) {
            return Err(Error::Divergence {
                what: "plant simulation".into(),
                sample: k + 1,
            });
        }
        states.extend_from_slice(&x.to_array());
        outputs.extend_from_slice(&output_map(&x));
        if k + 1 < n {
            let u = input.sample(k);
            x = step(&x, [u[0], u[1]], input.dt(), params, opts).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    what: "plant simulation".into(),
                    sample: k + 2,
                },
                e => e,
            })?;
        }
    }
    Ok(TrialData {
        states: LiftedTrajectory::new(states, 4, input.dt())?,
        output: LiftedTrajectory::new(outputs, 2, input.dt())?,
    })
}

/// Additive Gaussian noise on the measured states (and hence outputs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise {
    pub std_dev: f64,
    pub seed: u64,
}

/// The simulated SCARA robot behind the [`Plant`] interface.
#[derive(Debug, Clone)]
pub struct ScaraPlant {
    pub params: PlantParameters,
    pub x0: PlantState,
    pub options: SimulationOptions,
    pub noise: Option<MeasurementNoise>,
}

impl ScaraPlant {
    pub fn new(params: PlantParameters, x0: PlantState) -> Self {
        Self {
            params,
            x0,
            options: SimulationOptions::default(),
            noise: None,
        }
    }

    pub fn with_noise(mut self, noise: MeasurementNoise) -> Self {
        self.noise = Some(noise);
        self
    }
}

impl Plant for ScaraPlant {
    fn input_dim(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn output_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    }

    fn initial_state(&self) -> Vec<f64> {
        self.x0.to_array().to_vec()
    }

    fn run_trial(&mut self, input: &LiftedTrajectory, trial: usize) -> Result<TrialData> {
        let clean = simulate_trial_with(input, &self.x0, &self.params, &self.options)?;
        let Some(noise) = self.noise.filter(|n| n.std_dev > 0.0) else {
            return Ok(clean);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let dist = Normal::new(0.0, noise.std_dev)
            .map_err(|e| Error::Precondition(format!("noise distribution: {e}")))?;
        let states: Vec<f64> = clean.states.data().iter().map(|v| v + dist.sample(&mut rng)).collect();
        let outputs: Vec<f64> = states
            .chunks_exact(4)
            .flat_map(|x| [x[0], x[1]])
            .collect();
        Ok(TrialData {
            states: clean.states.with_data(states)?,
            output: clean.output.with_data(outputs)?,
        })
    }
}

/// `x⁺ = A x + B u`, `y = C x`, starting from `x0` every trial.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub x0: DVector<f64>,
}

impl LinearPlant {
    /// The lifted map from an `N`-sample input to the output, sample-major:
    /// block `(n, k)` is `C A^(n-k-1) B` for `k < n` and zero otherwise.
    pub fn lifted_matrix(&self, num_samples: usize) -> DMatrix<f64> {
        let (o, r) = (self.c.nrows(), self.b.ncols());
        let mut p = DMatrix::zeros(o * num_samples, r * num_samples);
        // markov[k] = C A^k B
        let mut ak_b = self.b.clone();
        let mut markov = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            markov.push(&self.c * &ak_b);
            ak_b = &self.a * ak_b;
        }
        for n in 0..num_samples {
            for k in 0..n {
                p.view_mut((n * o, k * r), (o, r)).copy_from(&markov[n - k - 1]);
            }
        }
        p
    }
}

impl Plant for LinearPlant {
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn output_matrix(&self) -> DMatrix<f64> {
        self.c.clone()
    }

    fn initial_state(&self) -> Vec<f64> {
        self.x0.iter().copied().collect()
    }

    fn run_trial(&mut self, input: &LiftedTrajectory, _trial: usize) -> Result<TrialData> {
        if input.dim() != self.input_dim() {
            return Err(Error::Structural(format!(
                "linear plant expects {} inputs per sample, got {}",
                self.input_dim(),
                input.dim()
            )));
        }
        let mut x = self.x0.clone();
        let mut states = Vec::new();
        let mut outputs = Vec::new();
        for (k, u) in input.samples().enumerate() {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    what: "linear plant".into(),
                    sample: k + 1,
                });
            }
            states.extend(x.iter());
            outputs.extend((&self.c * &x).iter());
            x = &self.a * &x + &self.b * DVector::from_column_slice(u);
        }
        Ok(TrialData {
            states: LiftedTrajectory::new(states, self.state_dim(), input.dt())?,
            output: LiftedTrajectory::new(outputs, self.c.nrows(), input.dt())?,
        })
    }
}
