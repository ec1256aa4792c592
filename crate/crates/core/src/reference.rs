//! Exact reference simulators for the two case studies, a damped Newton
//! solver for algebraic systems, and the index-1 regularity check.
//!
//! Both flow networks admit closed-form index reduction: differentiating the
//! height-equality constraint and combining it with flow conservation yields
//! explicit expressions for the algebraic states, so the ground truth is an
//! ODE integrated to high accuracy (RK4 with internal substeps). The same
//! closed forms serve as oracles for the Newton solver and the learned
//! surrogates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Value};
use crate::data::{Trajectory, TrajectoryMeta};
use crate::integrators::{IntegrateError, Stepper};

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("negative height {value} at t = {t}")]
    NegativeHeight { t: f64, value: f64 },
    #[error("total manifold area is zero at height {height}")]
    ZeroTotalArea { height: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("index-1 assumption violated: Jacobian dg/dy is singular")]
    SingularJacobian,
    #[error("Newton did not converge in {max_iter} iterations (residual {residual:.3e})")]
    NoConvergence { max_iter: usize, residual: f64 },
    #[error("residual has dimension {got}, expected {expected} (square system in y)")]
    NotSquare { expected: usize, got: usize },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Inlet flow as a function of time, sampled zero-order-hold at step
/// boundaries by both the reference simulator and the learned models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Inflow {
    Constant { value: f64 },
    /// offset + amplitude * sin(t / period_scale)
    Sinusoid {
        offset: f64,
        amplitude: f64,
        period_scale: f64,
    },
}

impl Inflow {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Inflow::Constant { value } => *value,
            Inflow::Sinusoid {
                offset,
                amplitude,
                period_scale,
            } => offset + amplitude * (t / period_scale).sin(),
        }
    }
}

/// Two tanks on a shared manifold; tank 1 has a known constant area, tank 2
/// carries the unknown profile sqrt(x) + 0.1 that the learning task recovers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub known_area: f64,
    pub inflow: Inflow,
    pub dt: f64,
    pub steps: usize,
    /// Common initial height of both tanks.
    pub x0: f64,
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        ManifoldSpec {
            known_area: 3.0,
            inflow: Inflow::Constant { value: 0.5 },
            dt: 1.0,
            steps: 500,
            x0: 0.2,
        }
    }
}

impl ManifoldSpec {
    pub fn validate(&self) -> Result<(), ReferenceError> {
        if !(self.dt > 0.0) {
            return Err(ReferenceError::InvalidSpec(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(ReferenceError::InvalidSpec("steps must be >= 1".into()));
        }
        if self.x0 < 0.0 {
            return Err(ReferenceError::InvalidSpec(format!(
                "initial height must be >= 0, got {}",
                self.x0
            )));
        }
        if !(self.known_area > 0.0) {
            return Err(ReferenceError::InvalidSpec(format!(
                "known area must be > 0, got {}",
                self.known_area
            )));
        }
        Ok(())
    }
}

/// Area-height profile of the unknown tank.
pub fn manifold_area_profile(x: f64) -> f64 {
    x.sqrt() + 0.1
}

/// Closed-form algebraic states of the manifold system.
///
/// The height constraint x1 = x2 forces equal level rates, so
/// y1/phi1 = y2/phi2; combined with conservation y1 + y2 = u this gives
/// y1 = u phi1 / (phi1 + phi2).
pub fn manifold_algebra_oracle(
    x1: f64,
    u: f64,
    phi1: f64,
    phi2: impl Fn(f64) -> f64,
) -> Result<(f64, f64), ReferenceError> {
    if x1 < 0.0 {
        return Err(ReferenceError::NegativeHeight { t: f64::NAN, value: x1 });
    }
    let total = phi1 + phi2(x1);
    if total <= 0.0 {
        return Err(ReferenceError::ZeroTotalArea { height: x1 });
    }
    let y1 = u * phi1 / total;
    Ok((y1, u - y1))
}

fn advance(
    x: &mut f64,
    field: impl Fn(f64) -> Result<f64, ReferenceError>,
    dt: f64,
    stepper: Stepper,
    substeps: usize,
) -> Result<(), ReferenceError> {
    let h = dt / substeps as f64;
    for _ in 0..substeps {
        match stepper {
            Stepper::Euler => {
                *x += h * field(*x)?;
            }
            Stepper::Rk4 => {
                let k1 = field(*x)?;
                let k2 = field(*x + 0.5 * h * k1)?;
                let k3 = field(*x + 0.5 * h * k2)?;
                let k4 = field(*x + h * k3)?;
                *x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
    }
    Ok(())
}

/// Ground-truth manifold trajectory: heights identical across tanks at every
/// sample, flows from the closed-form oracle.
pub fn simulate_manifold(spec: &ManifoldSpec) -> Result<Trajectory, ReferenceError> {
    simulate_manifold_with(spec, Stepper::Rk4, 10)
}

pub fn simulate_manifold_with(
    spec: &ManifoldSpec,
    stepper: Stepper,
    substeps: usize,
) -> Result<Trajectory, ReferenceError> {
    spec.validate()?;
    let phi1 = spec.known_area;
    let mut x = spec.x0;
    let mut times = Vec::with_capacity(spec.steps + 1);
    let mut xs = Vec::with_capacity(spec.steps + 1);
    let mut ys = Vec::with_capacity(spec.steps + 1);
    let mut us = Vec::with_capacity(spec.steps + 1);

    for k in 0..=spec.steps {
        let t = k as f64 * spec.dt;
        let u = spec.inflow.at(t);
        if x < 0.0 {
            return Err(ReferenceError::NegativeHeight { t, value: x });
        }
        let (y1, y2) = manifold_algebra_oracle(x, u, phi1, manifold_area_profile)?;
        times.push(t);
        xs.push(vec![x, x]);
        ys.push(vec![y1, y2]);
        us.push(vec![u]);

        if k < spec.steps {
            // Index-reduced height ODE under the zero-order-hold input:
            // dx/dt = u / (phi1 + phi2(x)).
            let field = |h: f64| -> Result<f64, ReferenceError> {
                if h < 0.0 {
                    return Err(ReferenceError::NegativeHeight { t, value: h });
                }
                let total = phi1 + manifold_area_profile(h);
                if total <= 0.0 {
                    return Err(ReferenceError::ZeroTotalArea { height: h });
                }
                Ok(u / total)
            };
            advance(&mut x, field, spec.dt, stepper, substeps)?;
        }
    }

    let meta = TrajectoryMeta {
        system: "manifold".into(),
        dt: spec.dt,
        seed: None,
        spec_hash: Some(spec_hash(&format!("{spec:?}"))),
        ..Default::default()
    };
    Ok(Trajectory::new(times, xs, ys, us, meta)?)
}

/// Closed tank network: pump, four tanks, a manifold with the same height
/// constraint, and square-root outlets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Tank areas phi1..phi4 (tank 4 is the reservoir).
    pub areas: [f64; 4],
    /// Pump law y0 = pump_coeff * x1 * x4.
    pub pump_coeff: f64,
    /// Outlet discharge coefficients in y = alpha * sqrt(height).
    pub alpha1: f64,
    pub alpha2: f64,
    pub dt: f64,
    pub steps: usize,
    pub x0: [f64; 4],
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            areas: [2.0, 1.0, 1.0, 10.0],
            pump_coeff: 0.1,
            alpha1: 0.1,
            alpha2: 0.1,
            dt: 0.1,
            steps: 200,
            x0: [1.0, 1.0, 1.0, 2.0],
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), ReferenceError> {
        if !(self.dt > 0.0) {
            return Err(ReferenceError::InvalidSpec(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(ReferenceError::InvalidSpec("steps must be >= 1".into()));
        }
        if self.areas.iter().any(|&a| a <= 0.0) {
            return Err(ReferenceError::InvalidSpec(format!(
                "areas must be > 0, got {:?}",
                self.areas
            )));
        }
        if self.x0.iter().any(|&h| h < 0.0) {
            return Err(ReferenceError::InvalidSpec(format!(
                "heights must be >= 0, got {:?}",
                self.x0
            )));
        }
        if (self.x0[0] - self.x0[1]).abs() > 1e-12 {
            return Err(ReferenceError::InvalidSpec(format!(
                "tanks 1 and 2 share a manifold, initial heights must match: {} vs {}",
                self.x0[0], self.x0[1]
            )));
        }
        Ok(())
    }
}

/// Closed-form algebraic states [y0..y4] of the network.
///
/// y0 is the pump flow, y3/y4 the outlet flows, and y1 follows from index
/// reduction: (y1 - y3)/phi1 = y2/phi2 with y2 = y0 - y1 gives
/// y1 = (phi1 y0 + phi2 y3) / (phi1 + phi2). Backflow (y2 < 0) is allowed.
pub fn network_algebra_oracle(
    x: &[f64; 4],
    spec: &NetworkSpec,
) -> Result<[f64; 5], ReferenceError> {
    for (i, &h) in x.iter().enumerate() {
        // Only tanks 1 and 3 feed square roots, but a negative height is
        // out of domain for the whole system.
        if h < 0.0 && (i == 0 || i == 2) {
            return Err(ReferenceError::NegativeHeight { t: f64::NAN, value: h });
        }
    }
    let [phi1, phi2, _, _] = spec.areas;
    let y0 = spec.pump_coeff * x[0] * x[3];
    let y3 = spec.alpha1 * x[0].sqrt();
    let y4 = spec.alpha2 * x[2].sqrt();
    let y1 = (phi1 * y0 + phi2 * y3) / (phi1 + phi2);
    let y2 = y0 - y1;
    Ok([y0, y1, y2, y3, y4])
}

/// Total fluid volume of the closed network; conserved by the dynamics.
pub fn network_total_volume(spec: &NetworkSpec, x: &[f64; 4]) -> f64 {
    x.iter().zip(spec.areas.iter()).map(|(h, a)| h * a).sum()
}

pub fn simulate_network(spec: &NetworkSpec) -> Result<Trajectory, ReferenceError> {
    simulate_network_with(spec, Stepper::Rk4, 10)
}

pub fn simulate_network_with(
    spec: &NetworkSpec,
    stepper: Stepper,
    substeps: usize,
) -> Result<Trajectory, ReferenceError> {
    spec.validate()?;
    let [phi1, _, phi3, phi4] = spec.areas;
    // Index-reduced states: the shared height, tank 3, and the reservoir.
    let mut s = [spec.x0[0], spec.x0[2], spec.x0[3]];
    let mut times = Vec::with_capacity(spec.steps + 1);
    let mut xs = Vec::with_capacity(spec.steps + 1);
    let mut ys = Vec::with_capacity(spec.steps + 1);
    let mut us = Vec::with_capacity(spec.steps + 1);

    let field = |s: &[f64; 3], t: f64| -> Result<[f64; 3], ReferenceError> {
        let x = [s[0], s[0], s[1], s[2]];
        if s[0] < 0.0 || s[1] < 0.0 {
            return Err(ReferenceError::NegativeHeight {
                t,
                value: s[0].min(s[1]),
            });
        }
        let [y0, y1, _, y3, y4] = network_algebra_oracle(&x, spec)?;
        Ok([
            (y1 - y3) / phi1,
            (y3 - y4) / phi3,
            (y4 - y0) / phi4,
        ])
    };

    for k in 0..=spec.steps {
        let t = k as f64 * spec.dt;
        let x = [s[0], s[0], s[1], s[2]];
        if let Some(&bad) = x.iter().find(|&&h| h < 0.0) {
            return Err(ReferenceError::NegativeHeight { t, value: bad });
        }
        let flows = network_algebra_oracle(&x, spec)?;
        times.push(t);
        xs.push(x.to_vec());
        ys.push(flows.to_vec());
        us.push(vec![]);

        if k < spec.steps {
            let h = spec.dt / substeps as f64;
            for _ in 0..substeps {
                match stepper {
                    Stepper::Euler => {
                        let d = field(&s, t)?;
                        for i in 0..3 {
                            s[i] += h * d[i];
                        }
                    }
                    Stepper::Rk4 => {
                        let k1 = field(&s, t)?;
                        let mut s2 = s;
                        for i in 0..3 {
                            s2[i] += 0.5 * h * k1[i];
                        }
                        let k2 = field(&s2, t)?;
                        let mut s3 = s;
                        for i in 0..3 {
                            s3[i] += 0.5 * h * k2[i];
                        }
                        let k3 = field(&s3, t)?;
                        let mut s4 = s;
                        for i in 0..3 {
                            s4[i] += h * k3[i];
                        }
                        let k4 = field(&s4, t)?;
                        for i in 0..3 {
                            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                        }
                    }
                }
            }
        }
    }

    let meta = TrajectoryMeta {
        system: "network".into(),
        dt: spec.dt,
        seed: None,
        spec_hash: Some(spec_hash(&format!("{spec:?}"))),
        ..Default::default()
    };
    Ok(Trajectory::new(times, xs, ys, us, meta)?)
}

fn spec_hash(text: &str) -> String {
    // FNV-1a; stable across platforms, enough to detect spec drift.
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}

// ---- constraint residuals ---------------------------------------------------

/// Raw manifold constraints of the governing equations:
/// [u - y1 - y2, x1 - x2].
pub fn manifold_constraints() -> impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> {
    |x, y, u| vec![u[0] - y[0] - y[1], x[0] - x[1]]
}

/// Square algebraic system for the manifold after index reduction:
/// conservation plus the differentiated height constraint
/// y1/phi1 - y2/phi2(x1) = 0. Nonsingular in (y1, y2).
pub fn manifold_algebra_residual(
    known_area: f64,
) -> impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> {
    move |x, y, u| {
        let phi2 = manifold_area_profile(x[0]);
        vec![u[0] - y[0] - y[1], y[0] / known_area - y[1] / phi2]
    }
}

/// Raw network constraints of the governing equations.
pub fn network_constraints(spec: &NetworkSpec) -> impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> {
    let spec = *spec;
    move |x, y, _u| {
        vec![
            y[0] - spec.pump_coeff * x[0] * x[3],
            y[0] - y[1] - y[2],
            y[3] - spec.alpha1 * x[0].max(0.0).sqrt(),
            y[4] - spec.alpha2 * x[2].max(0.0).sqrt(),
            x[0] - x[1],
        ]
    }
}

/// Square algebraic system for the network after index reduction; the height
/// constraint is replaced by its derivative (y1 - y3)/phi1 - y2/phi2 = 0.
pub fn network_algebra_residual(spec: &NetworkSpec) -> impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> {
    let spec = *spec;
    move |x, y, _u| {
        let [phi1, phi2, _, _] = spec.areas;
        vec![
            y[0] - spec.pump_coeff * x[0] * x[3],
            y[0] - y[1] - y[2],
            y[3] - spec.alpha1 * x[0].max(0.0).sqrt(),
            y[4] - spec.alpha2 * x[2].max(0.0).sqrt(),
            (y[1] - y[3]) / phi1 - y[2] / phi2,
        ]
    }
}

// ---- Newton solver and index check ------------------------------------------

#[derive(Clone, Debug)]
pub struct NewtonResult {
    pub y: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

const FD_JACOBIAN_STEP: f64 = 1e-7;

fn fd_jacobian(
    g: &impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    y: &[f64],
    u: &[f64],
) -> Result<Vec<f64>, ReferenceError> {
    let n = y.len();
    let mut jac = vec![0.0; n * n];
    let mut yp = y.to_vec();
    for c in 0..n {
        yp[c] = y[c] + FD_JACOBIAN_STEP;
        let gp = g(x, &yp, u);
        yp[c] = y[c] - FD_JACOBIAN_STEP;
        let gm = g(x, &yp, u);
        yp[c] = y[c];
        if gp.len() != n || gm.len() != n {
            return Err(ReferenceError::NotSquare {
                expected: n,
                got: gp.len(),
            });
        }
        for r in 0..n {
            jac[r * n + c] = (gp[r] - gm[r]) / (2.0 * FD_JACOBIAN_STEP);
        }
    }
    Ok(jac)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Gaussian elimination with partial pivoting. Returns None when the matrix
/// is singular relative to its own scale.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return None;
    }
    let tol = 1e-14 * scale;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| a[r1 * n + col].abs().total_cmp(&a[r2 * n + col].abs()))?;
        if a[pivot_row * n + col].abs() <= tol {
            return None;
        }
        if pivot_row != col {
            for c in 0..n {
                a.swap(col * n + c, pivot_row * n + c);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= factor * a[col * n + c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc -= a[r * n + c] * x[c];
        }
        x[r] = acc / a[r * n + r];
    }
    Some(x)
}

fn invert_dense(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = solve_dense(a.to_vec(), e)?;
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    Some(inv)
}

fn one_norm(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|c| (0..n).map(|r| a[r * n + c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Damped Newton iteration on the square algebraic system g(x, y, u) = 0 in
/// y, with a central finite-difference Jacobian.
pub fn newton_solve_algebraic(
    g: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    u: &[f64],
    y_guess: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<NewtonResult, ReferenceError> {
    let n = y_guess.len();
    let mut y = y_guess.to_vec();
    let mut r = g(x, &y, u);
    if r.len() != n {
        return Err(ReferenceError::NotSquare {
            expected: n,
            got: r.len(),
        });
    }
    let mut r_norm = inf_norm(&r);
    if r_norm <= tol {
        return Ok(NewtonResult {
            y,
            iterations: 0,
            residual: r_norm,
        });
    }

    for iter in 1..=max_iter {
        let jac = fd_jacobian(&g, x, &y, u)?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = solve_dense(jac, rhs).ok_or(ReferenceError::SingularJacobian)?;

        // Backtracking damping: halve the step while it fails to reduce the
        // residual, down to 1/64 of the Newton step.
        let mut lambda = 1.0;
        let (mut y_try, mut r_try, mut norm_try);
        loop {
            y_try = y
                .iter()
                .zip(delta.iter())
                .map(|(yi, di)| yi + lambda * di)
                .collect::<Vec<_>>();
            r_try = g(x, &y_try, u);
            norm_try = inf_norm(&r_try);
            if norm_try < r_norm || lambda <= 1.0 / 64.0 {
                break;
            }
            lambda *= 0.5;
        }
        y = y_try;
        r = r_try;
        r_norm = norm_try;
        if r_norm <= tol {
            return Ok(NewtonResult {
                y,
                iterations: iter,
                residual: r_norm,
            });
        }
    }
    Err(ReferenceError::NoConvergence {
        max_iter,
        residual: r_norm,
    })
}

pub struct IndexCheck {
    pub ok: bool,
    pub condition_number: f64,
}

/// Estimates the 1-norm condition number of dg/dy by finite differences.
/// A system is treated as index-1 at this point when the condition number is
/// finite and below the threshold (1e8 default).
pub fn check_index1(
    g: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    cond_threshold: f64,
) -> IndexCheck {
    let n = y.len();
    let jac = match fd_jacobian(&g, x, y, u) {
        Ok(j) => j,
        Err(_) => {
            return IndexCheck {
                ok: false,
                condition_number: f64::INFINITY,
            }
        }
    };
    let cond = match invert_dense(&jac, n) {
        Some(inv) => one_norm(&jac, n) * one_norm(&inv, n),
        None => f64::INFINITY,
    };
    IndexCheck {
        ok: cond.is_finite() && cond < cond_threshold,
        condition_number: cond,
    }
}

// ---- tape-side ground truth -------------------------------------------------

/// True manifold differential map expressed in tape operations, for plugging
/// the exact physics into the timestepper.
pub fn manifold_true_ode(
    known_area: f64,
) -> impl Fn(&mut Tape, Value, Value, Value) -> Result<Value, IntegrateError> {
    move |tape, x, y, _u| {
        let x2 = tape.index(x, 1)?;
        let y1 = tape.index(y, 0)?;
        let y2 = tape.index(y, 1)?;
        let a1 = tape.constant_scalar(known_area);
        let dx1 = tape.div(y1, a1)?;
        let s = tape.sqrt(x2)?;
        let c = tape.constant_scalar(0.1);
        let a2 = tape.add(s, c)?;
        let dx2 = tape.div(y2, a2)?;
        Ok(tape.stack(&[dx1, dx2])?)
    }
}

/// Exact algebraic update for the manifold in tape operations.
pub fn manifold_oracle_surrogate(
    known_area: f64,
) -> impl Fn(&mut Tape, Value, Value, Value) -> Result<Value, IntegrateError> {
    move |tape, x, _y, u| {
        let x1 = tape.index(x, 0)?;
        let u0 = tape.index(u, 0)?;
        let s = tape.sqrt(x1)?;
        let c = tape.constant_scalar(0.1);
        let phi2 = tape.add(s, c)?;
        let phi1 = tape.constant_scalar(known_area);
        let total = tape.add(phi1, phi2)?;
        let num = tape.mul(u0, phi1)?;
        let y1 = tape.div(num, total)?;
        let y2 = tape.sub(u0, y1)?;
        Ok(tape.stack(&[y1, y2])?)
    }
}
