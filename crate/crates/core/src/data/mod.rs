//! Trajectory containers, noise injection, metrics, and file persistence.

mod csv;
mod plot;
mod report;

pub use csv::{read_csv, write_csv};
pub use plot::{write_svg_lineplot, PlotSeries};
pub use report::{read_report, write_report, Checkpoint, TensorData};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("trajectory rows disagree: {0}")]
    InconsistentRows(String),
    #[error("times are not uniformly spaced at index {index} (expected step {expected}, got {got})")]
    NonUniformTimes {
        index: usize,
        expected: f64,
        got: f64,
    },
    #[error("trajectory is empty")]
    Empty,
    #[error("trajectory mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite value in column {column} at row {row}")]
    NonFinite { row: usize, column: String },
    #[error("{path}: parse error at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("no series to plot")]
    EmptyPlot,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
}

/// Differential state, algebraic state, and exogenous input at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct DaeState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub system: String,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_hash: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

/// Uniformly sampled time series of DAE states.
///
/// Row k of `x`, `y`, and `u` belongs to `times[k]`. Inputs are sampled
/// zero-order-hold: `u[k]` is held over `[times[k], times[k] + dt)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    pub meta: TrajectoryMeta,
}

const UNIFORM_TIME_TOL: f64 = 1e-12;

impl Trajectory {
    pub fn new(
        times: Vec<f64>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        u: Vec<Vec<f64>>,
        meta: TrajectoryMeta,
    ) -> Result<Self, DataError> {
        if times.is_empty() {
            return Err(DataError::Empty);
        }
        let n = times.len();
        if x.len() != n || y.len() != n || u.len() != n {
            return Err(DataError::InconsistentRows(format!(
                "{n} times vs {} x rows, {} y rows, {} u rows",
                x.len(),
                y.len(),
                u.len()
            )));
        }
        for (name, block) in [("x", &x), ("y", &y), ("u", &u)] {
            let w = block[0].len();
            if let Some(row) = block.iter().position(|r| r.len() != w) {
                return Err(DataError::InconsistentRows(format!(
                    "{name} row {row} has {} entries, expected {w}",
                    block[row].len()
                )));
            }
        }
        if n > 1 {
            let dt = times[1] - times[0];
            for k in 1..n {
                let got = times[k] - times[k - 1];
                if (got - dt).abs() > UNIFORM_TIME_TOL * dt.abs().max(1.0) {
                    return Err(DataError::NonUniformTimes {
                        index: k,
                        expected: dt,
                        got,
                    });
                }
            }
        }
        Ok(Trajectory {
            times,
            x,
            y,
            u,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.x[0].len()
    }

    pub fn n_y(&self) -> usize {
        self.y[0].len()
    }

    pub fn n_u(&self) -> usize {
        self.u[0].len()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            self.meta.dt
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn x_row(&self, k: usize) -> &[f64] {
        &self.x[k]
    }

    pub fn y_row(&self, k: usize) -> &[f64] {
        &self.y[k]
    }

    pub fn u_row(&self, k: usize) -> &[f64] {
        &self.u[k]
    }

    pub fn u_rows(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn state(&self, k: usize) -> DaeState {
        DaeState {
            x: self.x[k].clone(),
            y: self.y[k].clone(),
            u: self.u[k].clone(),
        }
    }

    /// One column of the x block as a time series.
    pub fn x_column(&self, c: usize) -> Vec<f64> {
        self.x.iter().map(|r| r[c]).collect()
    }

    pub fn y_column(&self, c: usize) -> Vec<f64> {
        self.y.iter().map(|r| r[c]).collect()
    }

    /// First `n` samples as a new trajectory.
    pub fn truncated(&self, n: usize) -> Result<Self, DataError> {
        if n == 0 || n > self.len() {
            return Err(DataError::Mismatch(format!(
                "cannot truncate length-{} trajectory to {n}",
                self.len()
            )));
        }
        Trajectory::new(
            self.times[..n].to_vec(),
            self.x[..n].to_vec(),
            self.y[..n].to_vec(),
            self.u[..n].to_vec(),
            self.meta.clone(),
        )
    }
}

/// Channel groups used for grouped error metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateGroup {
    X,
    Y,
    Both,
}

/// Mean over time samples and selected channels of squared differences.
pub fn mse(a: &Trajectory, b: &Trajectory, group: StateGroup) -> Result<f64, DataError> {
    if a.len() != b.len() || a.n_x() != b.n_x() || a.n_y() != b.n_y() {
        return Err(DataError::Mismatch(format!(
            "lengths {}x({},{}) vs {}x({},{})",
            a.len(),
            a.n_x(),
            a.n_y(),
            b.len(),
            b.n_x(),
            b.n_y()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..a.len() {
        if matches!(group, StateGroup::X | StateGroup::Both) {
            for (p, q) in a.x[k].iter().zip(&b.x[k]) {
                sum += (p - q) * (p - q);
                count += 1;
            }
        }
        if matches!(group, StateGroup::Y | StateGroup::Both) {
            for (p, q) in a.y[k].iter().zip(&b.y[k]) {
                sum += (p - q) * (p - q);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(DataError::Mismatch("selected group has no channels".into()));
    }
    Ok(sum / count as f64)
}

/// Which measured channels receive noise. Inputs `u` are controls, never
/// measurements, and are never perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChannels {
    #[default]
    All,
    XOnly,
    YOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Signal-to-noise ratio in dB; `f64::INFINITY` means no noise.
    pub snr_db: f64,
    pub seed: u64,
    #[serde(default)]
    pub channels: NoiseChannels,
}

/// Per-channel noise variances implied by a spec: sigma_c^2 =
/// mean(signal_c^2) / 10^(snr_db/10), ordered x channels then y channels
/// (zeros where the channel selector excludes a group).
pub fn channel_noise_variances(traj: &Trajectory, spec: &NoiseSpec) -> Vec<f64> {
    let ratio = if spec.snr_db.is_infinite() {
        0.0
    } else {
        10f64.powf(-spec.snr_db / 10.0)
    };
    let n = traj.len() as f64;
    let mut vars = Vec::with_capacity(traj.n_x() + traj.n_y());
    let x_on = matches!(spec.channels, NoiseChannels::All | NoiseChannels::XOnly);
    let y_on = matches!(spec.channels, NoiseChannels::All | NoiseChannels::YOnly);
    for c in 0..traj.n_x() {
        let power = traj.x.iter().map(|r| r[c] * r[c]).sum::<f64>() / n;
        vars.push(if x_on { power * ratio } else { 0.0 });
    }
    for c in 0..traj.n_y() {
        let power = traj.y.iter().map(|r| r[c] * r[c]).sum::<f64>() / n;
        vars.push(if y_on { power * ratio } else { 0.0 });
    }
    vars
}

/// Adds Gaussian white noise at the requested SNR per channel. Pure: the
/// input trajectory is untouched; the same seed gives bit-identical output.
pub fn add_noise(traj: &Trajectory, spec: &NoiseSpec) -> Result<Trajectory, DataError> {
    if traj.is_empty() {
        return Err(DataError::Empty);
    }
    if spec.snr_db.is_infinite() && spec.snr_db > 0.0 {
        return Ok(traj.clone());
    }
    let vars = channel_noise_variances(traj, spec);
    let mut out = traj.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_x = traj.n_x();
    for (c, var) in vars.iter().enumerate() {
        if *var == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, var.sqrt()).expect("finite std");
        for k in 0..traj.len() {
            let eps = normal.sample(&mut rng);
            if c < n_x {
                out.x[k][c] += eps;
            } else {
                out.y[k][c - n_x] += eps;
            }
        }
    }
    out.meta
        .extra
        .insert("snr_db".into(), format!("{}", spec.snr_db));
    out.meta
        .extra
        .insert("noise_seed".into(), format!("{}", spec.seed));
    Ok(out)
}

/// Indices and values of strict local extrema of a series (both maxima and
/// minima; endpoints excluded).
pub fn strict_local_extrema(series: &[f64]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for k in 1..series.len().saturating_sub(1) {
        let (a, b, c) = (series[k - 1], series[k], series[k + 1]);
        if (b > a && b > c) || (b < a && b < c) {
            out.push((k, b));
        }
    }
    out
}

/// Oscillation amplitudes of a series in time order: deviations of strict
/// local extrema from the trailing-mean baseline (last 10% of samples),
/// keeping only excursions above 1% of the largest one. Decay of these
/// amplitudes is the qualitative damped-oscillation check.
pub fn oscillation_amplitudes(series: &[f64]) -> Vec<f64> {
    if series.len() < 3 {
        return Vec::new();
    }
    let tail = (series.len() / 10).max(1);
    let baseline = series[series.len() - tail..].iter().sum::<f64>() / tail as f64;
    let amps: Vec<f64> = strict_local_extrema(series)
        .into_iter()
        .map(|(_, v)| (v - baseline).abs())
        .collect();
    let max = amps.iter().fold(0.0f64, |m, &a| m.max(a));
    amps.into_iter().filter(|&a| a >= 0.01 * max).collect()
}
