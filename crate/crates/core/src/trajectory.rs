//! Lifted trajectories.
//!
//! A trial of `N` samples of a `D`-dimensional signal is stored as one flat
//! vector in sample-major order: element `n * D + d` (zero-based) holds
//! variable `d` at sample `n`. Inputs, states, outputs, references and errors
//! all use this layout, so one trial's input-output map is a single matrix.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedTrajectory {
    data: Vec<f64>,
    dim: usize,
    num_samples: usize,
    dt: f64,
}

impl LiftedTrajectory {
    /// Wraps an already sample-major data vector.
    pub fn new(data: Vec<f64>, dim: usize, dt: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Structural("dimension per sample must be positive".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Structural(format!(
                "data length {} is not a positive multiple of dimension {dim}",
                data.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Structural(format!("sample period must be positive, got {dt}")));
        }
        let num_samples = data.len() / dim;
        Ok(Self {
            data,
            dim,
            num_samples,
            dt,
        })
    }

    pub fn zeros(dim: usize, num_samples: usize, dt: f64) -> Result<Self> {
        Self::new(vec![0.0; dim * num_samples], dim, dt)
    }

    /// Stacks per-sample vectors into a lifted trajectory.
    pub fn interleave<S: AsRef<[f64]>>(samples: &[S], dt: f64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Structural("no samples to interleave".into()))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(dim * samples.len());
        for (n, s) in samples.iter().enumerate() {
            let s = s.as_ref();
            if s.len() != dim {
                return Err(Error::Structural(format!(
                    "sample {n} has dimension {} but sample 0 has {dim}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        Self::new(data, dim, dt)
    }

    /// Splits back into per-sample vectors.
    pub fn deinterleave(&self) -> Vec<Vec<f64>> {
        self.samples().map(<[f64]>::to_vec).collect()
    }

    pub fn samples(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// The vector of all variables at sample `n` (zero-based).
    pub fn sample(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    /// The trajectory of variable `var` (zero-based) across all samples.
    pub fn variable_block(&self, var: usize) -> Result<Vec<f64>> {
        if var >= self.dim {
            return Err(Error::Structural(format!(
                "variable index {var} out of range for dimension {}",
                self.dim
            )));
        }
        Ok(self.data.iter().skip(var).step_by(self.dim).copied().collect())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Same layout, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Structural(format!(
                "expected {} values, got {}",
                self.data.len(),
                data.len()
            )));
        }
        Self::new(data, self.dim, self.dt)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.num_samples != other.num_samples {
            return Err(Error::Structural(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.num_samples, self.dim, other.num_samples, other.dim
            )));
        }
        if self.dt != other.dt {
            return Err(Error::Structural(format!(
                "sample period mismatch: {} vs {}",
                self.dt, other.dt
            )));
        }
        Ok(())
    }

    /// Writes the CSV form: header `sample,var_1,...,var_D`, one row per
    /// sample, sample numbers starting at 1.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut line = String::from("sample");
        for d in 1..=self.dim {
            write!(line, ",var_{d}").unwrap();
        }
        writeln!(out, "{line}")?;
        for (n, s) in self.samples().enumerate() {
            line.clear();
            write!(line, "{}", n + 1).unwrap();
            for v in s {
                line.push(',');
                line.push_str(&format_float(*v));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads the CSV form written by [`write_csv`](Self::write_csv). The
    /// sample period is not part of the file and must be supplied.
    pub fn read_csv<R: BufRead>(input: R, dt: f64) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Structural("empty trajectory CSV".into()))?
            .map_err(|e| Error::Structural(e.to_string()))?;
        let dim = header.split(',').count().saturating_sub(1);
        let mut data = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Structural(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Structural(format!(
                    "row {} has {} fields, expected {}",
                    i + 1,
                    fields.len(),
                    dim + 1
                )));
            }
            for f in &fields[1..] {
                data.push(f.trim().parse::<f64>().map_err(|e| {
                    Error::Structural(format!("row {}: bad number `{f}`: {e}", i + 1))
                })?);
            }
        }
        Self::new(data, dim, dt)
    }
}

/// Everything measured and derived in one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    /// Zero-based trial number.
    pub trial_index: usize,
    pub input: LiftedTrajectory,
    pub states: LiftedTrajectory,
    pub output: LiftedTrajectory,
    /// `reference − output`.
    pub error: LiftedTrajectory,
}

impl TrialRecord {
    pub fn new(
        trial_index: usize,
        input: LiftedTrajectory,
        states: LiftedTrajectory,
        output: LiftedTrajectory,
        reference: &LiftedTrajectory,
    ) -> Result<Self> {
        for (name, t) in [("states", &states), ("output", &output)] {
            if t.num_samples() != input.num_samples() || t.dt() != input.dt() {
                return Err(Error::Structural(format!(
                    "{name} has {} samples at dt {}, input has {} at dt {}",
                    t.num_samples(),
                    t.dt(),
                    input.num_samples(),
                    input.dt()
                )));
            }
        }
        let error = tracking_error(reference, &output)?;
        Ok(Self {
            trial_index,
            input,
            states,
            output,
            error,
        })
    }
}

/// Scientific notation with 17 significant digits, enough to round-trip
/// every `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// `reference - output`, elementwise.
pub fn tracking_error(reference: &LiftedTrajectory, output: &LiftedTrajectory) -> Result<LiftedTrajectory> {
    reference.check_same_shape(output)?;
    let data = reference
        .data
        .iter()
        .zip(&output.data)
        .map(|(r, y)| r - y)
        .collect();
    reference.with_data(data)
}

/// `‖r − y_j‖ / ‖r − y_1‖` with Euclidean norms.
pub fn normalized_error_norm(
    reference: &LiftedTrajectory,
    output: &LiftedTrajectory,
    first_output: &LiftedTrajectory,
) -> Result<f64> {
    let denom = tracking_error(reference, first_output)?.norm();
    let num = tracking_error(reference, output)?.norm();
    if denom == 0.0 {
        return Err(Error::DegenerateNormalization);
    }
    Ok(num / denom)
}
