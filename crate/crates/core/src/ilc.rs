//! The learning loop and its self-parameterization.
//!
//! Each iteration trains a GP dynamics model on the last `H` trials,
//! linearizes its roll-out at the current input (`P_j`), picks weights from
//! block norms of `P_j`, and applies the norm-optimal update
//!
//! ```text
//! Δu = argmin ‖e_j − P_j Δu‖²_W + ‖Δu‖²_S = (Pᵀ W P + S)⁻¹ Pᵀ W e_j
//! ```
//!
//! The first input is band-limited Gaussian noise whose band is read off the
//! reference spectrum and whose variance is raised until the plant visibly
//! responds.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dynamics::{train_model, KnownStructure, TrialWindow};
use crate::error::{Error, Result};
use crate::gp::OptimizerOptions;
use crate::linalg::{cholesky_with_jitter, spectral_norm};
use crate::plant::Plant;
use crate::trajectory::{normalized_error_norm, LiftedTrajectory, TrialRecord};

/// Initial candidate for the excitation variance, (0.01 N·m)².
pub const CALIBRATION_START_VARIANCE: f64 = 1e-4;
/// Output deviation that always counts as excited, in output units.
pub const EXCITATION_FLOOR: f64 = 1e-3;
pub const MAX_CALIBRATION_DOUBLINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct LearningConfig {
    /// Number of most recent trials the model is trained on (`H`).
    pub window_size: usize,
    /// Trial budget including the initial trial (`J`).
    pub max_trials: usize,
    /// Variance of the initial input noise; calibrated when `None`.
    pub input_variance: Option<f64>,
    /// Fraction of a channel's peak amplitude above which a frequency bin
    /// counts as significant.
    pub spectral_threshold: f64,
    /// Stop once an updated trial reaches a normalized error below this.
    pub stop_epsilon: f64,
    /// Evidence-maximization restarts per GP.
    pub gp_restarts: usize,
    /// Measurement noise level used by the excitation check, output units.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            window_size: 3,
            max_trials: 15,
            input_variance: None,
            spectral_threshold: 0.01,
            stop_epsilon: 0.01,
            gp_restarts: 5,
            noise_level: 0.0,
            seed: 42,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(m.to_string()));
        if self.window_size == 0 {
            return bad("window size must be at least 1");
        }
        if self.max_trials == 0 {
            return bad("at least one trial is required");
        }
        if self.input_variance.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            return bad("input variance must be non-negative");
        }
        if !(self.spectral_threshold > 0.0 && self.spectral_threshold < 1.0) {
            return bad("spectral threshold must lie in (0, 1)");
        }
        if self.gp_restarts == 0 {
            return bad("at least one GP restart is required");
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise level must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoffFrequency {
    pub hz: f64,
    /// Set when the reference has no spectral content and the fallback
    /// `5 / (N dt)` was used.
    pub fallback: bool,
}

fn spectrum(signal: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Frequency of DFT bin `k` of an `n`-point transform, folded so that the
/// mirrored bins above `n/2` map to their positive frequency.
fn bin_frequency(k: usize, n: usize, dt: f64) -> f64 {
    k.min(n - k) as f64 / (n as f64 * dt)
}

/// Highest frequency at which any output channel of the reference carries
/// more than `threshold` times that channel's peak spectral amplitude.
pub fn detect_cutoff_frequency(reference: &LiftedTrajectory, threshold: f64) -> Result<CutoffFrequency> {
    let n = reference.num_samples();
    if n < 8 {
        return Err(Error::Precondition(format!("need at least 8 samples, got {n}")));
    }
    let dt = reference.dt();
    let fallback = CutoffFrequency {
        hz: 5.0 / (n as f64 * dt),
        fallback: true,
    };
    let mut highest: Option<usize> = None;
    for d in 0..reference.dim() {
        let x = reference.variable_block(d)?;
        let mean = x.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let amps: Vec<f64> = spectrum(&centered)[..=n / 2].iter().map(|c| c.norm()).collect();
        let peak = amps[1..].iter().fold(0.0f64, |m, &a| m.max(a));
        // numerically constant channel
        if peak <= 1e-12 * scale * n as f64 {
            continue;
        }
        if let Some(k) = (1..amps.len()).rev().find(|&k| amps[k] > threshold * peak) {
            highest = Some(highest.map_or(k, |h| h.max(k)));
        }
    }
    Ok(match highest {
        Some(k) => CutoffFrequency {
            hz: bin_frequency(k, n, dt),
            fallback: false,
        },
        None => fallback,
    })
}

/// Zero-phase brick-wall low-pass: zeroes every DFT bin above `cutoff_hz`.
pub fn brick_wall_lowpass(signal: &[f64], dt: f64, cutoff_hz: f64) -> Vec<f64> {
    let n = signal.len();
    let mut buf = spectrum(signal);
    for (k, c) in buf.iter_mut().enumerate() {
        if bin_frequency(k, n, dt) > cutoff_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Draws white Gaussian noise of the given variance per input channel and
/// low-passes it at `cutoff_hz`.
pub fn generate_initial_input(
    input_dim: usize,
    num_samples: usize,
    dt: f64,
    cutoff_hz: f64,
    variance: f64,
    seed: u64,
) -> Result<LiftedTrajectory> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Precondition(format!("input variance must be non-negative, got {variance}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = variance.sqrt();
    let mut data = vec![0.0; input_dim * num_samples];
    for r in 0..input_dim {
        let noise: Vec<f64> = (0..num_samples)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect();
        for (n, v) in brick_wall_lowpass(&noise, dt, cutoff_hz).into_iter().enumerate() {
            data[n * input_dim + r] = v;
        }
    }
    LiftedTrajectory::new(data, input_dim, dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub variance: f64,
    /// Every candidate variance that was tried, in order.
    pub tried: Vec<f64>,
}

/// Doubles the excitation variance, starting at
/// [`CALIBRATION_START_VARIANCE`], until a trial's output moves more than
/// `max(10 × noise_level, EXCITATION_FLOOR)` away from its initial value.
pub fn calibrate_input_variance<P: Plant + ?Sized>(
    plant: &mut P,
    num_samples: usize,
    dt: f64,
    cutoff_hz: f64,
    noise_level: f64,
    seed: u64,
) -> Result<Calibration> {
    let threshold = (10.0 * noise_level).max(EXCITATION_FLOOR);
    let mut variance = CALIBRATION_START_VARIANCE;
    let mut tried = Vec::new();
    for k in 0..=MAX_CALIBRATION_DOUBLINGS {
        tried.push(variance);
        let input = generate_initial_input(plant.input_dim(), num_samples, dt, cutoff_hz, variance, seed.wrapping_add(k as u64))?;
        let out = plant.run_trial(&input, k)?.output;
        let y0 = out.sample(0).to_vec();
        let deviation = out
            .samples()
            .flat_map(|y| y.iter().zip(&y0).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if deviation > threshold {
            return Ok(Calibration { variance, tried });
        }
        if k < MAX_CALIBRATION_DOUBLINGS {
            variance *= 2.0;
        }
    }
    Err(Error::Calibration {
        doublings: MAX_CALIBRATION_DOUBLINGS,
        last_variance: variance,
    })
}

/// Weighting matrices of the norm-optimal update.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPair {
    /// Error weight, `ON × ON`.
    pub w: DMatrix<f64>,
    /// Input-change weight, `RN × RN`.
    pub s: DMatrix<f64>,
}

impl WeightPair {
    /// `W = I_N ⊗ diag(w_bar)`, `S = I_N ⊗ diag(s_bar)`.
    pub fn kronecker(w_bar: &[f64], s_bar: &[f64], num_samples: usize) -> Self {
        let eye = DMatrix::<f64>::identity(num_samples, num_samples);
        Self {
            w: eye.kronecker(&DMatrix::from_diagonal(&DVector::from_column_slice(w_bar))),
            s: eye.kronecker(&DMatrix::from_diagonal(&DVector::from_column_slice(s_bar))),
        }
    }
}

/// Extracts `[P^{o1} … P^{oR}]` (all columns, rows of output `o`) or
/// `[P^{1r}; …; P^{Or}]` (all rows, columns of input `r`) from the
/// sample-major lifted matrix.
fn strided_rows(p: &DMatrix<f64>, offset: usize, stride: usize) -> DMatrix<f64> {
    let idx: Vec<usize> = (offset..p.nrows()).step_by(stride).collect();
    p.select_rows(idx.iter())
}

fn strided_columns(p: &DMatrix<f64>, offset: usize, stride: usize) -> DMatrix<f64> {
    let idx: Vec<usize> = (offset..p.ncols()).step_by(stride).collect();
    p.select_columns(idx.iter())
}

/// Diagonal weight blocks from spectral norms of the input-output blocks of
/// `P`: output `o` is weighted by `1 / ‖[P^{o1} … P^{oR}]‖`, input `r` is
/// penalized by `‖[P^{1r}; …; P^{Or}]‖`.
pub fn block_weights(p: &DMatrix<f64>, outputs: usize, inputs: usize, num_samples: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if p.nrows() != outputs * num_samples || p.ncols() != inputs * num_samples {
        return Err(Error::Structural(format!(
            "P is {}x{}, expected {}x{}",
            p.nrows(),
            p.ncols(),
            outputs * num_samples,
            inputs * num_samples
        )));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linearized model".into()));
    }
    let mut w_bar = Vec::with_capacity(outputs);
    for o in 0..outputs {
        let norm = spectral_norm(&strided_rows(p, o, outputs));
        if norm <= 0.0 {
            return Err(Error::DegenerateWeights(format!("output {o} is not affected by any input")));
        }
        w_bar.push(1.0 / norm);
    }
    let mut s_bar = Vec::with_capacity(inputs);
    for r in 0..inputs {
        let norm = spectral_norm(&strided_columns(p, r, inputs));
        if norm <= 0.0 {
            return Err(Error::DegenerateWeights(format!("input {r} affects no output")));
        }
        s_bar.push(norm);
    }
    Ok((w_bar, s_bar))
}

pub fn compute_weights(p: &DMatrix<f64>, outputs: usize, inputs: usize, num_samples: usize) -> Result<WeightPair> {
    let (w_bar, s_bar) = block_weights(p, outputs, inputs, num_samples)?;
    Ok(WeightPair::kronecker(&w_bar, &s_bar, num_samples))
}

/// `Δu = (PᵀWP + S)⁻¹ PᵀW e`.
pub fn norm_optimal_step(p: &DMatrix<f64>, weights: &WeightPair, error: &[f64]) -> Result<DVector<f64>> {
    let (rows, cols) = p.shape();
    if weights.w.shape() != (rows, rows) || weights.s.shape() != (cols, cols) || error.len() != rows {
        return Err(Error::Structural(format!(
            "P {rows}x{cols}, W {:?}, S {:?}, e {}",
            weights.w.shape(),
            weights.s.shape(),
            error.len()
        )));
    }
    let wp = &weights.w * p;
    let hessian = p.transpose() * &wp + &weights.s;
    let rhs = wp.transpose() * DVector::from_column_slice(error);
    let (chol, _) = cholesky_with_jitter(hessian, "norm-optimal update")?;
    Ok(chol.solve(&rhs))
}

/// `u_{j+1} = u_j + Δu`.
pub fn norm_optimal_update(
    p: &DMatrix<f64>,
    weights: &WeightPair,
    input: &LiftedTrajectory,
    error: &LiftedTrajectory,
) -> Result<LiftedTrajectory> {
    if p.ncols() != input.data().len() {
        return Err(Error::Structural(format!(
            "P has {} columns but the input has {} entries",
            p.ncols(),
            input.data().len()
        )));
    }
    let du = norm_optimal_step(p, weights, error.data())?;
    input.with_data(input.data().iter().zip(du.iter()).map(|(u, d)| u + d).collect())
}

/// All trials of a learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningHistory {
    pub records: Vec<TrialRecord>,
    /// Normalized error norm per trial; the first is always 1.
    pub epsilons: Vec<f64>,
    pub reference: LiftedTrajectory,
    pub config: LearningConfig,
    pub cutoff: CutoffFrequency,
    pub input_variance: f64,
}

impl LearningHistory {
    pub fn num_trials(&self) -> usize {
        self.records.len()
    }

    pub fn final_epsilon(&self) -> f64 {
        *self.epsilons.last().expect("history holds at least the initial trial")
    }
}

/// Runs the learning loop one trial at a time.
pub struct Learner<'a, P: Plant + ?Sized> {
    plant: &'a mut P,
    structure: KnownStructure,
    window: TrialWindow,
    history: LearningHistory,
}

impl<'a, P: Plant + ?Sized> Learner<'a, P> {
    /// Picks the cutoff and excitation, then runs the initial trial.
    pub fn start(plant: &'a mut P, reference: &LiftedTrajectory, config: &LearningConfig) -> Result<Self> {
        config.validate()?;
        let c = plant.output_matrix();
        if reference.dim() != c.nrows() {
            return Err(Error::Structural(format!(
                "reference has {} outputs per sample, plant has {}",
                reference.dim(),
                c.nrows()
            )));
        }
        let (n, dt) = (reference.num_samples(), reference.dt());
        let cutoff = detect_cutoff_frequency(reference, config.spectral_threshold)?;
        let input_variance = match config.input_variance {
            Some(v) => v,
            None => {
                calibrate_input_variance(plant, n, dt, cutoff.hz, config.noise_level, config.seed.wrapping_add(1))
                    .map_err(|e| e.in_trial(0))?
                    .variance
            }
        };
        let input = generate_initial_input(plant.input_dim(), n, dt, cutoff.hz, input_variance, config.seed)?;
        let structure = KnownStructure {
            initial_state: plant.initial_state(),
            output_matrix: c,
        };
        let mut learner = Self {
            plant,
            structure,
            window: TrialWindow::new(config.window_size)?,
            history: LearningHistory {
                records: Vec::new(),
                epsilons: Vec::new(),
                reference: reference.clone(),
                config: config.clone(),
                cutoff,
                input_variance,
            },
        };
        learner.execute(input).map_err(|e| e.in_trial(0))?;
        Ok(learner)
    }

    fn execute(&mut self, input: LiftedTrajectory) -> Result<()> {
        let index = self.history.records.len();
        let data = self.plant.run_trial(&input, index)?;
        let record = TrialRecord::new(index, input, data.states, data.output, &self.history.reference)?;
        let first_output = self.history.records.first().map_or(&record.output, |r| &r.output);
        let epsilon = normalized_error_norm(&self.history.reference, &record.output, first_output)?;
        self.window.push(record.clone());
        self.history.records.push(record);
        self.history.epsilons.push(epsilon);
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        let h = &self.history;
        h.records.len() >= h.config.max_trials || (h.records.len() > 1 && h.final_epsilon() < h.config.stop_epsilon)
    }

    /// One learning iteration: model, linearization, weights, update, trial.
    /// Returns `false` without doing anything once the run is finished.
    pub fn step(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let j = self.history.records.len();
        self.iterate(j).map_err(|e| e.in_trial(j))?;
        Ok(true)
    }

    fn iterate(&mut self, trial: usize) -> Result<()> {
        let config = &self.history.config;
        let opts = OptimizerOptions {
            num_restarts: config.gp_restarts,
            ..OptimizerOptions::default()
        };
        let seed = config.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let model = train_model(&self.window, &self.structure, &opts, seed)?;
        let last = self.history.records.last().expect("initial trial exists");
        let p = model.rollout_jacobian(&last.input)?;
        let n = last.input.num_samples();
        let weights = compute_weights(&p, last.error.dim(), last.input.dim(), n)?;
        let next = norm_optimal_update(&p, &weights, &last.input, &last.error)?;
        self.execute(next)
    }

    pub fn history(&self) -> &LearningHistory {
        &self.history
    }

    pub fn into_history(self) -> LearningHistory {
        self.history
    }
}

/// Learns until the trial budget is spent or the error is small enough.
pub fn run_learning<P: Plant + ?Sized>(
    plant: &mut P,
    reference: &LiftedTrajectory,
    config: &LearningConfig,
) -> Result<LearningHistory> {
    let mut learner = Learner::start(plant, reference, config)?;
    while learner.step()? {}
    Ok(learner.into_history())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{LinearPlant, TrialData};
    use rand::Rng;
    use std::f64::consts::PI;

    fn tone(freqs: &[(f64, f64)], n: usize, dt: f64) -> LiftedTrajectory {
        let data = (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                freqs.iter().map(|(a, f)| a * (2.0 * PI * f * t).sin()).sum()
            })
            .collect();
        LiftedTrajectory::new(data, 1, dt).unwrap()
    }

    fn stopband_energy(x: &[f64], dt: f64, f0: f64) -> (f64, f64) {
        let spec = spectrum(x);
        let total: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
        let stop: f64 = spec
            .iter()
            .enumerate()
            .filter(|(k, _)| bin_frequency(*k, x.len(), dt) > f0)
            .map(|(_, c)| c.norm_sqr())
            .sum();
        (stop, total)
    }

    #[test]
    fn single_tone_cutoff() {
        let f = detect_cutoff_frequency(&tone(&[(1.0, 0.5)], 200, 0.02), 0.01).unwrap();
        assert_eq!(f, CutoffFrequency { hz: 0.5, fallback: false });
    }

    #[test]
    fn weak_line_below_threshold_is_ignored() {
        // 5 s horizon puts both 0.2 Hz and 5 Hz on exact bins
        let r = tone(&[(1.0, 0.2), (0.005, 5.0)], 250, 0.02);
        let f = detect_cutoff_frequency(&r, 0.01).unwrap();
        assert!((f.hz - 0.2).abs() < 1e-12);
        // and counted once it clears the threshold
        let f = detect_cutoff_frequency(&r, 0.001).unwrap();
        assert!((f.hz - 5.0).abs() < 1e-12);
    }

    #[test]
    fn constant_reference_falls_back() {
        let r = LiftedTrajectory::new(vec![0.7; 400], 2, 0.02).unwrap();
        let f = detect_cutoff_frequency(&r, 0.01).unwrap();
        assert!(f.fallback);
        assert!((f.hz - 5.0 / 4.0).abs() < 1e-12);
        assert!(detect_cutoff_frequency(&LiftedTrajectory::zeros(1, 7, 0.1).unwrap(), 0.01).is_err());
    }

    #[test]
    fn zero_variance_gives_zero_input() {
        let u = generate_initial_input(2, 100, 0.02, 1.0, 0.0, 3).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_input_is_band_limited_and_seeded() {
        let a = generate_initial_input(2, 200, 0.02, 1.5, 0.3, 11).unwrap();
        assert_eq!(a, generate_initial_input(2, 200, 0.02, 1.5, 0.3, 11).unwrap());
        assert_ne!(a, generate_initial_input(2, 200, 0.02, 1.5, 0.3, 12).unwrap());
        for r in 0..2 {
            let (stop, total) = stopband_energy(&a.variable_block(r).unwrap(), 0.02, 1.5);
            assert!(total > 0.0);
            assert!(stop <= 1e-24 * total, "stop-band energy {stop} of {total}");
        }
    }

    /// Counts trials and reports outputs that move only for large inputs.
    struct ThresholdPlant {
        gain: f64,
        calls: Vec<f64>,
    }

    impl Plant for ThresholdPlant {
        fn input_dim(&self) -> usize {
            1
        }
        fn state_dim(&self) -> usize {
            1
        }
        fn output_matrix(&self) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
        fn initial_state(&self) -> Vec<f64> {
            vec![0.0]
        }
        fn run_trial(&mut self, input: &LiftedTrajectory, _trial: usize) -> Result<TrialData> {
            let var = input.data().iter().map(|v| v * v).sum::<f64>() / input.data().len() as f64;
            self.calls.push(var);
            let mut y = 0.0;
            let out: Vec<f64> = input
                .data()
                .iter()
                .map(|u| {
                    let now = y;
                    y += self.gain * u;
                    now
                })
                .collect();
            let t = LiftedTrajectory::new(out, 1, input.dt())?;
            Ok(TrialData { states: t.clone(), output: t })
        }
    }

    #[test]
    fn calibration_doubles_until_excited() {
        let mut plant = ThresholdPlant { gain: 1e-4, calls: vec![] };
        let cal = calibrate_input_variance(&mut plant, 200, 0.02, 2.0, 0.0, 5).unwrap();
        assert!(cal.tried.len() > 1, "{cal:?}");
        for (k, v) in cal.tried.iter().enumerate() {
            assert_eq!(*v, CALIBRATION_START_VARIANCE * 2f64.powi(k as i32));
        }
        assert_eq!(plant.calls.len(), cal.tried.len());
        assert_eq!(cal.variance, *cal.tried.last().unwrap());

        // a responsive plant accepts the first candidate
        let mut plant = ThresholdPlant { gain: 1.0, calls: vec![] };
        let cal = calibrate_input_variance(&mut plant, 200, 0.02, 2.0, 0.0, 5).unwrap();
        assert_eq!(cal.tried, vec![CALIBRATION_START_VARIANCE]);

        // noise raises the bar
        let mut plant = ThresholdPlant { gain: 1.0, calls: vec![] };
        let noisy = calibrate_input_variance(&mut plant, 200, 0.02, 2.0, 1.0, 5).unwrap();
        assert!(noisy.variance > CALIBRATION_START_VARIANCE);
    }

    #[test]
    fn calibration_fails_on_dead_plant() {
        let mut plant = ThresholdPlant { gain: 0.0, calls: vec![] };
        match calibrate_input_variance(&mut plant, 50, 0.02, 2.0, 0.0, 5) {
            Err(Error::Calibration { doublings, .. }) => assert_eq!(doublings, 20),
            other => panic!("{other:?}"),
        }
        assert_eq!(plant.calls.len(), 21);
    }

    #[test]
    fn scalar_block_weights() {
        let p = DMatrix::from_diagonal_element(4, 4, 2.0);
        let w = compute_weights(&p, 1, 1, 4).unwrap();
        assert_eq!(w.w, DMatrix::from_diagonal_element(4, 4, 0.5));
        assert_eq!(w.s, DMatrix::from_diagonal_element(4, 4, 2.0));
    }

    #[test]
    fn decoupled_identity_blocks_give_unit_weights() {
        // P^{oo} = I_N and zero cross blocks, sample-major: P is the identity
        let n = 5;
        let p = DMatrix::<f64>::identity(2 * n, 2 * n);
        let (w_bar, s_bar) = block_weights(&p, 2, 2, n).unwrap();
        for v in w_bar.iter().chain(&s_bar) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_input_is_degenerate() {
        let mut p = DMatrix::<f64>::identity(6, 6);
        for k in 0..3 {
            p[(2 * k + 1, 2 * k + 1)] = 0.0;
        }
        assert!(matches!(block_weights(&p, 2, 2, 3), Err(Error::DegenerateWeights(_))));
        assert!(block_weights(&p, 2, 2, 4).is_err());
    }

    #[test]
    fn scalar_update() {
        let p = DMatrix::from_element(1, 1, 2.0);
        let w = WeightPair {
            w: DMatrix::from_element(1, 1, 1.0),
            s: DMatrix::from_element(1, 1, 1.0),
        };
        let du = norm_optimal_step(&p, &w, &[1.0]).unwrap();
        assert!((du[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn small_penalty_inverts_the_plant() {
        let p = DMatrix::<f64>::identity(6, 6);
        let w = WeightPair {
            w: DMatrix::identity(6, 6),
            s: DMatrix::from_diagonal_element(6, 6, 1e-9),
        };
        let e = [1.0, -2.0, 0.5, 0.0, 3.0, -1.0];
        let du = norm_optimal_step(&p, &w, &e).unwrap();
        for (d, e) in du.iter().zip(e) {
            assert!((d - e).abs() < 1e-8);
        }
        let u = LiftedTrajectory::new(vec![1.0; 6], 2, 0.1).unwrap();
        let err = LiftedTrajectory::new(e.to_vec(), 2, 0.1).unwrap();
        let next = norm_optimal_update(&p, &w, &u, &err).unwrap();
        assert!((next.data()[4] - 4.0).abs() < 1e-8);
    }

    /// Stable square system with invertible `B` and `C`, so it has no finite
    /// transmission zeros and its lifted matrix stays well conditioned.
    fn random_lti(rng: &mut ChaCha8Rng) -> LinearPlant {
        let mut a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let rho = a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        a *= rng.gen_range(0.2..0.9) / rho;
        let mut invertible = || DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.3..0.3)) + DMatrix::identity(2, 2);
        LinearPlant {
            a,
            b: invertible(),
            c: invertible(),
            x0: DVector::zeros(2),
        }
    }

    #[test]
    fn exact_model_error_map_contracts() {
        // The first output sample is fixed by the initial state, so the
        // contraction is checked on the remaining samples.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let plant = random_lti(&mut rng);
            let n = 15;
            let p = plant.lifted_matrix(n);
            let w = compute_weights(&p, 2, 2, n).unwrap();
            let h = p.transpose() * &w.w * &p + &w.s;
            let l = h.cholesky().unwrap().solve(&(p.transpose() * &w.w));
            let m = DMatrix::identity(2 * n, 2 * n) - &p * l;
            let tail = m.view((2, 2), (2 * n - 2, 2 * n - 2)).into_owned();
            let rho = tail.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
            assert!(rho < 1.0, "spectral radius {rho}");
        }
    }

    fn cost(p: &DMatrix<f64>, w: &WeightPair, e: &DVector<f64>, du: &DVector<f64>) -> f64 {
        let r = e - p * du;
        (r.transpose() * &w.w * &r)[0] + (du.transpose() * &w.s * du)[0]
    }

    #[test]
    fn update_minimizes_the_weighted_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 12;
        let p = random_lti(&mut rng).lifted_matrix(n);
        let w = compute_weights(&p, 2, 2, n).unwrap();
        let e = DVector::from_fn(2 * n, |_, _| rng.gen_range(-1.0..1.0));
        let du = norm_optimal_step(&p, &w, e.as_slice()).unwrap();

        // gradient of the cost vanishes at the minimizer
        let grad = p.transpose() * &w.w * (&e - &p * &du) - &w.s * &du;
        assert!(grad.norm() < 1e-10 * e.norm(), "{}", grad.norm());

        let best = cost(&p, &w, &e, &du);
        assert!(best <= cost(&p, &w, &e, &DVector::zeros(2 * n)));
        for _ in 0..1000 {
            let scale = 10f64.powf(rng.gen_range(-4.0..0.0));
            let d = DVector::from_fn(2 * n, |_, _| rng.gen_range(-scale..scale));
            assert!(best <= cost(&p, &w, &e, &(&du + d)) + 1e-12);
        }
    }

    #[test]
    fn weights_have_kronecker_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10;
        let p = random_lti(&mut rng).lifted_matrix(n);
        let w = compute_weights(&p, 2, 2, n).unwrap();
        let w_bar = w.w.view((0, 0), (2, 2)).into_owned();
        let s_bar = w.s.view((0, 0), (2, 2)).into_owned();
        assert_eq!(w_bar[(0, 1)], 0.0);
        assert_eq!(s_bar[(1, 0)], 0.0);
        assert!(w_bar.diagonal().iter().chain(s_bar.diagonal().iter()).all(|&v| v > 0.0));
        let eye = DMatrix::<f64>::identity(n, n);
        assert_eq!(w.w, eye.kronecker(&w_bar));
        assert_eq!(w.s, eye.kronecker(&s_bar));

        // scaling P scales W by 1/c and S by c
        let (w1, s1) = block_weights(&p, 2, 2, n).unwrap();
        let (w2, s2) = block_weights(&(&p * 3.0), 2, 2, n).unwrap();
        for k in 0..2 {
            assert!((w2[k] * 3.0 - w1[k]).abs() < 1e-12 * w1[k]);
            assert!((s2[k] - 3.0 * s1[k]).abs() < 1e-12 * s1[k]);
        }
    }

    #[test]
    fn learns_on_linear_plant() {
        let mut plant = LinearPlant {
            a: DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.1, 0.25]),
            b: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4]),
            c: DMatrix::identity(2, 2),
            x0: DVector::zeros(2),
        };
        let n = 60;
        let dt = 0.05;
        let reference = LiftedTrajectory::new(
            (0..n)
                .flat_map(|k| {
                    let t = k as f64 * dt;
                    let w = (PI * t / ((n - 1) as f64 * dt)).sin().powi(2);
                    [w * (2.0 * PI * 0.4 * t).sin(), 0.5 * w * (2.0 * PI * 0.7 * t).cos()]
                })
                .collect(),
            2,
            dt,
        )
        .unwrap();
        let config = LearningConfig {
            max_trials: 10,
            stop_epsilon: 0.0,
            gp_restarts: 2,
            ..LearningConfig::default()
        };
        let h = run_learning(&mut plant, &reference, &config).unwrap();
        assert_eq!(h.num_trials(), 10);
        assert_eq!(h.epsilons[0], 1.0);
        for j in 2..h.epsilons.len() {
            assert!(h.epsilons[j] <= h.epsilons[j - 1] * (1.0 + 1e-9), "{:?}", h.epsilons);
        }
        assert!(h.final_epsilon() < 0.05, "{:?}", h.epsilons);
    }

    #[test]
    fn stopping_rules() {
        let mk = || LinearPlant {
            a: DMatrix::from_row_slice(1, 1, &[0.8]),
            b: DMatrix::from_row_slice(1, 1, &[1.0]),
            c: DMatrix::identity(1, 1),
            x0: DVector::zeros(1),
        };
        let reference = LiftedTrajectory::new(
            (0..40).map(|k| (PI * k as f64 / 39.0).sin().powi(2)).collect(),
            1,
            0.05,
        )
        .unwrap();
        let one = LearningConfig {
            max_trials: 1,
            ..LearningConfig::default()
        };
        let h = run_learning(&mut mk(), &reference, &one).unwrap();
        assert_eq!((h.num_trials(), h.epsilons.clone()), (1, vec![1.0]));

        let loose = LearningConfig {
            stop_epsilon: 2.0,
            gp_restarts: 1,
            ..LearningConfig::default()
        };
        let h = run_learning(&mut mk(), &reference, &loose).unwrap();
        assert_eq!(h.num_trials(), 2);
    }

    #[test]
    fn mismatched_reference_is_rejected() {
        let mut plant = LinearPlant {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
            c: DMatrix::identity(1, 1),
            x0: DVector::zeros(1),
        };
        let reference = LiftedTrajectory::zeros(2, 20, 0.1).unwrap();
        assert!(matches!(
            run_learning(&mut plant, &reference, &LearningConfig::default()),
            Err(Error::Structural(_))
        ));
    }
}
