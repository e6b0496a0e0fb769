//! Reference scenarios, configuration and the experiment runner.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::ilc::{Learner, LearningConfig, LearningHistory};
use crate::plant::{MeasurementNoise, Plant, PlantParameters, PlantState, ScaraPlant};
use crate::trajectory::{format_float, LiftedTrajectory, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioId {
    PointToPoint,
    Sinusoid,
    Multiharmonic,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [Self::PointToPoint, Self::Sinusoid, Self::Multiharmonic];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::PointToPoint => "s1",
            Self::Sinusoid => "s2",
            Self::Multiharmonic => "s3",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PointToPoint => "s1_point_to_point",
            Self::Sinusoid => "s2_sinusoid",
            Self::Multiharmonic => "s3_multiharmonic",
        }
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| s == id.short_name() || s == id.name())
            .ok_or_else(|| Error::Usage(format!("unknown scenario `{s}` (expected s1, s2 or s3)")))
    }
}

/// A single scenario or all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioSelection {
    One(ScenarioId),
    All,
}

impl ScenarioSelection {
    pub fn ids(self) -> Vec<ScenarioId> {
        match self {
            Self::One(id) => vec![id],
            Self::All => ScenarioId::ALL.to_vec(),
        }
    }
}

impl FromStr for ScenarioSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(Self::All)
        } else {
            s.parse().map(Self::One)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    /// Joint angles `(α₀, β₀)` of the resting start pose, rad.
    pub initial_pose: [f64; 2],
    /// Joint-space reference, two outputs per sample.
    pub reference: LiftedTrajectory,
}

impl ScenarioSpec {
    pub fn num_samples(&self) -> usize {
        self.reference.num_samples()
    }

    pub fn dt(&self) -> f64 {
        self.reference.dt()
    }
}

/// Quintic smoothstep on `[0, 1]`, clamped outside.
fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (10.0 + x * (-15.0 + 6.0 * x))
}

/// Amplitude window over the normalized time `tau ∈ [0, 1]`: zero for the
/// first and last 10 %, smooth ramps up to 30 % and down from 70 %.
pub fn window(tau: f64) -> f64 {
    if tau <= 0.5 {
        smoothstep((tau - 0.1) / 0.2)
    } else {
        smoothstep((0.9 - tau) / 0.2)
    }
}

pub fn build_reference(id: ScenarioId, num_samples: usize, dt: f64, initial_pose: [f64; 2]) -> Result<ScenarioSpec> {
    if num_samples < 16 {
        return Err(Error::Precondition(format!("need at least 16 samples, got {num_samples}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Precondition(format!("sample period must be positive, got {dt}")));
    }
    if initial_pose.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("initial pose must be finite".into()));
    }
    let [a0, b0] = initial_pose;
    let horizon = (num_samples - 1) as f64 * dt;
    let sin = |amp: f64, hz: f64, t: f64| amp * (std::f64::consts::TAU * hz * t).sin();
    let data = (0..num_samples)
        .flat_map(|n| {
            let t = n as f64 * dt;
            let tau = t / horizon;
            let w = window(tau);
            match id {
                ScenarioId::PointToPoint => {
                    let s = smoothstep((tau - 0.25) / 0.5);
                    [a0 + s * std::f64::consts::FRAC_PI_2, b0 - s * std::f64::consts::FRAC_PI_3]
                }
                ScenarioId::Sinusoid => [a0 + w * sin(0.8, 0.5, t), b0 + w * sin(0.6, 0.75, t)],
                ScenarioId::Multiharmonic => {
                    let h = sin(0.6, 0.4, t) + sin(0.25, 1.2, t);
                    [a0 + w * h, b0 + w * h]
                }
            }
        })
        .collect();
    Ok(ScenarioSpec {
        id,
        initial_pose,
        reference: LiftedTrajectory::new(data, 2, dt)?,
    })
}

/// End-effector position of the arm at joint angles `q = (α, β)`.
pub fn forward_kinematics(q: [f64; 2], params: &PlantParameters) -> [f64; 2] {
    let [l1, l2] = params.link_lengths;
    let [a, b] = q;
    [l1 * a.cos() + l2 * (a + b).cos(), l1 * a.sin() + l2 * (a + b).sin()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSettings {
    pub selection: ScenarioSelection,
    pub num_samples: usize,
    pub dt: f64,
    pub initial_pose: [f64; 2],
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self {
            selection: ScenarioSelection::All,
            num_samples: 200,
            dt: 0.02,
            initial_pose: [0.0, std::f64::consts::FRAC_PI_6],
        }
    }
}

/// Everything a run needs. [`ExperimentConfig::learning`] folds the
/// top-level seed and the noise level into the learning settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub plant: PlantParameters,
    pub substeps: usize,
    /// Standard deviation of the measurement noise on states and outputs.
    pub noise_std: f64,
    pub learn: LearningConfig,
    pub scenario: ScenarioSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            plant: PlantParameters::default(),
            substeps: 4,
            noise_std: 0.0,
            learn: LearningConfig::default(),
            scenario: ScenarioSettings::default(),
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigParse {
        line,
        message: format!("invalid value `{value}` for `{key}`"),
    })
}

impl ExperimentConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are ignored,
    /// missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                message: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(line, key, value)?;
            seen.push(key);
        }
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let f = |v: &str| parse_value::<f64>(line, key, v);
        let p = &mut self.plant;
        match key {
            "seed" => self.seed = parse_value(line, key, value)?,
            "plant.link_length_1" => p.link_lengths[0] = f(value)?,
            "plant.link_length_2" => p.link_lengths[1] = f(value)?,
            "plant.link_mass_1" => p.link_masses[0] = f(value)?,
            "plant.link_mass_2" => p.link_masses[1] = f(value)?,
            "plant.link_inertia_1" => p.link_inertias[0] = f(value)?,
            "plant.link_inertia_2" => p.link_inertias[1] = f(value)?,
            "plant.com_distance_1" => p.com_distances[0] = f(value)?,
            "plant.com_distance_2" => p.com_distances[1] = f(value)?,
            "plant.damping_1" => p.joint_damping[0] = f(value)?,
            "plant.damping_2" => p.joint_damping[1] = f(value)?,
            "plant.torque_limit" => p.torque_limit = f(value)?,
            "plant.substeps" => self.substeps = parse_value(line, key, value)?,
            "plant.noise_std" => self.noise_std = f(value)?,
            "learn.window" => self.learn.window_size = parse_value(line, key, value)?,
            "learn.trials" => self.learn.max_trials = parse_value(line, key, value)?,
            "learn.input_variance" => {
                self.learn.input_variance = if value == "auto" { None } else { Some(f(value)?) }
            }
            "learn.spectral_threshold" => self.learn.spectral_threshold = f(value)?,
            "learn.stop_epsilon" => self.learn.stop_epsilon = f(value)?,
            "learn.gp_restarts" => self.learn.gp_restarts = parse_value(line, key, value)?,
            "scenario.id" => {
                self.scenario.selection = value.parse().map_err(|_| Error::ConfigParse {
                    line,
                    message: format!("unknown scenario `{value}`"),
                })?
            }
            "scenario.samples" => self.scenario.num_samples = parse_value(line, key, value)?,
            "scenario.dt" => self.scenario.dt = f(value)?,
            "scenario.alpha0" => self.scenario.initial_pose[0] = f(value)?,
            "scenario.beta0" => self.scenario.initial_pose[1] = f(value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn learning(&self) -> LearningConfig {
        LearningConfig {
            seed: self.seed,
            noise_level: self.noise_std,
            ..self.learn.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.learning().validate()?;
        if self.substeps == 0 {
            return Err(Error::Precondition("plant.substeps must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Precondition("plant.noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn build_plant(&self) -> ScaraPlant {
        let [a, b] = self.scenario.initial_pose;
        let mut plant = ScaraPlant::new(self.plant, PlantState::at_rest(a, b));
        plant.options.substeps = self.substeps;
        if self.noise_std > 0.0 {
            plant = plant.with_noise(MeasurementNoise {
                std_dev: self.noise_std,
                seed: self.seed,
            });
        }
        plant
    }

    pub fn build_reference(&self, id: ScenarioId) -> Result<ScenarioSpec> {
        let s = &self.scenario;
        build_reference(id, s.num_samples, s.dt, s.initial_pose)
    }

    /// The config as `key = value` lines, in a form [`parse`](Self::parse)
    /// reads back.
    pub fn to_text(&self) -> String {
        let p = &self.plant;
        let l = &self.learn;
        let selection = match self.scenario.selection {
            ScenarioSelection::All => "all",
            ScenarioSelection::One(id) => id.short_name(),
        };
        let variance = l.input_variance.map_or("auto".to_string(), |v| v.to_string());
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        for i in 0..2 {
            kv(&format!("plant.link_length_{}", i + 1), p.link_lengths[i].to_string());
            kv(&format!("plant.link_mass_{}", i + 1), p.link_masses[i].to_string());
            kv(&format!("plant.link_inertia_{}", i + 1), p.link_inertias[i].to_string());
            kv(&format!("plant.com_distance_{}", i + 1), p.com_distances[i].to_string());
            kv(&format!("plant.damping_{}", i + 1), p.joint_damping[i].to_string());
        }
        kv("plant.torque_limit", p.torque_limit.to_string());
        kv("plant.substeps", self.substeps.to_string());
        kv("plant.noise_std", self.noise_std.to_string());
        kv("learn.window", l.window_size.to_string());
        kv("learn.trials", l.max_trials.to_string());
        kv("learn.input_variance", variance);
        kv("learn.spectral_threshold", l.spectral_threshold.to_string());
        kv("learn.stop_epsilon", l.stop_epsilon.to_string());
        kv("learn.gp_restarts", l.gp_restarts.to_string());
        kv("scenario.id", selection.to_string());
        kv("scenario.samples", self.scenario.num_samples.to_string());
        kv("scenario.dt", self.scenario.dt.to_string());
        kv("scenario.alpha0", self.scenario.initial_pose[0].to_string());
        kv("scenario.beta0", self.scenario.initial_pose[1].to_string());
        out
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse(&text)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub scenario: ScenarioId,
    /// `None` when the run failed before the first trial finished.
    pub history: Option<LearningHistory>,
    /// Error that ended the run early, if any.
    pub failure: Option<String>,
    pub wall_time: f64,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn epsilons(&self) -> &[f64] {
        self.history.as_ref().map_or(&[], |h| &h.epsilons)
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut out = create(path)?;
    write(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn write_taskspace(path: &Path, output: &LiftedTrajectory, params: &PlantParameters) -> Result<()> {
    write_file(path, |out| {
        writeln!(out, "sample,x,y")?;
        for (n, q) in output.samples().enumerate() {
            let [x, y] = forward_kinematics([q[0], q[1]], params);
            writeln!(out, "{},{},{}", n + 1, format_float(x), format_float(y))?;
        }
        Ok(())
    })
}

fn write_trial(dir: &Path, record: &TrialRecord, params: &PlantParameters, files: &mut Vec<PathBuf>) -> Result<()> {
    let j = record.trial_index + 1;
    for (kind, traj) in [("input", &record.input), ("states", &record.states), ("output", &record.output)] {
        let path = dir.join(format!("trial_{j}_{kind}.csv"));
        write_file(&path, |out| traj.write_csv(out))?;
        files.push(path);
    }
    let path = dir.join(format!("taskspace_trial_{j}.csv"));
    write_taskspace(&path, &record.output, params)?;
    files.push(path);
    Ok(())
}

fn write_epsilons(path: &Path, epsilons: &[f64]) -> Result<()> {
    write_file(path, |out| {
        writeln!(out, "trial,epsilon")?;
        for (j, e) in epsilons.iter().enumerate() {
            writeln!(out, "{},{}", j + 1, format_float(*e))?;
        }
        Ok(())
    })
}

pub fn write_reference(spec: &ScenarioSpec, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("reference.csv");
    write_file(&path, |out| spec.reference.write_csv(out))?;
    Ok(path)
}

/// Runs the learning experiment on `plant`, writing each trial's files as
/// soon as the trial completes. Learning and plant failures end the run but
/// are returned inside the report; only I/O errors are returned as `Err`.
pub fn run_scenario_with<P: Plant>(
    spec: &ScenarioSpec,
    plant: &mut P,
    params: &PlantParameters,
    config: &LearningConfig,
    out_dir: &Path,
) -> Result<RunReport> {
    let started = Instant::now();
    let mut files = vec![write_reference(spec, out_dir)?];
    let mut written = 0;
    let mut flush = |history: &LearningHistory, files: &mut Vec<PathBuf>| -> Result<()> {
        for record in &history.records[written..] {
            write_trial(out_dir, record, params, files)?;
        }
        written = history.records.len();
        Ok(())
    };

    let (history, failure) = match Learner::start(plant, &spec.reference, config) {
        Err(e) => (None, Some(e.to_string())),
        Ok(mut learner) => {
            flush(learner.history(), &mut files)?;
            let mut failure = None;
            loop {
                match learner.step() {
                    Ok(true) => flush(learner.history(), &mut files)?,
                    Ok(false) => break,
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            (Some(learner.into_history()), failure)
        }
    };

    let epsilon_path = out_dir.join("epsilon.csv");
    write_epsilons(&epsilon_path, history.as_ref().map_or(&[], |h| &h.epsilons))?;
    files.push(epsilon_path);

    let mut report = RunReport {
        scenario: spec.id,
        history,
        failure,
        wall_time: started.elapsed().as_secs_f64(),
        out_dir: out_dir.to_path_buf(),
        files,
    };
    let summary_path = out_dir.join("report.txt");
    let summary = summary(&report, spec, config);
    write_file(&summary_path, |out| out.write_all(summary.as_bytes()))?;
    report.files.push(summary_path);
    Ok(report)
}

/// Runs one scenario against the simulated SCARA robot.
pub fn run_scenario(spec: &ScenarioSpec, config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    let mut plant = config.build_plant();
    run_scenario_with(spec, &mut plant, &config.plant, &config.learning(), out_dir)
}

fn summary(report: &RunReport, spec: &ScenarioSpec, config: &LearningConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(s, "{k} = {v}").unwrap();
    kv("scenario", &spec.id.name());
    kv("status", &if report.succeeded() { "ok" } else { "failed" });
    if let Some(f) = &report.failure {
        kv("failure", f);
    }
    kv("samples", &spec.num_samples());
    kv("dt", &spec.dt());
    kv("seed", &config.seed);
    kv("window", &config.window_size);
    kv("max_trials", &config.max_trials);
    kv("stop_epsilon", &config.stop_epsilon);
    kv("gp_restarts", &config.gp_restarts);
    if let Some(h) = &report.history {
        kv("cutoff_hz", &h.cutoff.hz);
        kv("cutoff_fallback", &h.cutoff.fallback);
        kv("input_variance", &h.input_variance);
        kv("trials", &h.num_trials());
        kv("final_epsilon", &h.final_epsilon());
        let eps: Vec<String> = h.epsilons.iter().map(|e| format!("{e:.6}")).collect();
        kv("epsilons", &eps.join(","));
    } else {
        kv("trials", &0);
    }
    kv("wall_time_s", &format!("{:.3}", report.wall_time));
    s
}
