//! Explicit ODE steppers, Lie–Trotter splitting, and the operator-splitting
//! DAE timestep with full-horizon rollout.
//!
//! One DAE step is algebra-first and the order is fixed: the algebraic state
//! is updated through the surrogate `h`, then the differential state is
//! advanced by an explicit ODE step that already sees the fresh algebraic
//! values. Rollouts keep every intermediate on the tape so a trajectory loss
//! backpropagates through all steps.

use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Value};
use crate::data::{DataError, Trajectory, TrajectoryMeta};

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("step size must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("derivative component {component} is non-finite ({value})")]
    NonFiniteDerivative { component: usize, value: f64 },
    #[error("algebraic update component {component} is non-finite ({value})")]
    NonFiniteAlgebra { component: usize, value: f64 },
    #[error("state component {component} is non-finite ({value})")]
    NonFiniteState { component: usize, value: f64 },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<IntegrateError>,
    },
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input sequence has {got} entries, need at least {need}")]
    ShortInputs { need: usize, got: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Right-hand side of the differential update: (x, y, u) -> dx/dt.
pub trait OdeFunction {
    fn eval(&self, tape: &mut Tape, x: Value, y: Value, u: Value)
        -> Result<Value, IntegrateError>;
}

impl<F> OdeFunction for F
where
    F: Fn(&mut Tape, Value, Value, Value) -> Result<Value, IntegrateError>,
{
    fn eval(&self, tape: &mut Tape, x: Value, y: Value, u: Value) -> Result<Value, IntegrateError> {
        self(tape, x, y, u)
    }
}

/// Algebraic update surrogate: (x, y, u) -> next algebraic state.
pub trait AlgebraSurrogate {
    fn eval(&self, tape: &mut Tape, x: Value, y: Value, u: Value)
        -> Result<Value, IntegrateError>;
}

impl<F> AlgebraSurrogate for F
where
    F: Fn(&mut Tape, Value, Value, Value) -> Result<Value, IntegrateError>,
{
    fn eval(&self, tape: &mut Tape, x: Value, y: Value, u: Value) -> Result<Value, IntegrateError> {
        self(tape, x, y, u)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    #[default]
    Euler,
    Rk4,
}

/// Operator-splitting neural timestepper: algebraic surrogate plus explicit
/// ODE stepper over a fixed step `dt`.
pub struct NeuralDaeModel<F, H> {
    pub f: F,
    pub h: H,
    pub dt: f64,
    pub stepper: Stepper,
}

fn check_finite(
    tape: &Tape,
    v: Value,
    mk: impl Fn(usize, f64) -> IntegrateError,
) -> Result<(), IntegrateError> {
    for (i, &x) in tape.value(v).iter().enumerate() {
        if !x.is_finite() {
            return Err(mk(i, x));
        }
    }
    Ok(())
}

fn check_dim(
    tape: &Tape,
    v: Value,
    expected: usize,
    what: &'static str,
) -> Result<(), IntegrateError> {
    let got = tape.shape(v).len();
    if got != expected {
        return Err(IntegrateError::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Forward Euler: x + dt * f(x, y, u). The algebraic state and input are
/// taken as given for the whole step.
pub fn euler_step(
    tape: &mut Tape,
    f: &impl OdeFunction,
    x: Value,
    y: Value,
    u: Value,
    dt: f64,
) -> Result<Value, IntegrateError> {
    if dt <= 0.0 {
        return Err(IntegrateError::NonPositiveDt(dt));
    }
    let dx = f.eval(tape, x, y, u)?;
    check_dim(tape, dx, tape.shape(x).len(), "derivative")?;
    check_finite(tape, dx, |component, value| IntegrateError::NonFiniteDerivative {
        component,
        value,
    })?;
    let dt_c = tape.constant_scalar(dt);
    let scaled = tape.mul(dt_c, dx)?;
    Ok(tape.add(x, scaled)?)
}

/// Classical 4-stage Runge–Kutta with y and u held fixed across stages.
pub fn rk4_step(
    tape: &mut Tape,
    f: &impl OdeFunction,
    x: Value,
    y: Value,
    u: Value,
    dt: f64,
) -> Result<Value, IntegrateError> {
    if dt <= 0.0 {
        return Err(IntegrateError::NonPositiveDt(dt));
    }
    let n = tape.shape(x).len();
    let half = tape.constant_scalar(dt / 2.0);
    let full = tape.constant_scalar(dt);
    let sixth = tape.constant_scalar(dt / 6.0);
    let two = tape.constant_scalar(2.0);

    let stage = |tape: &mut Tape, xs: Value| -> Result<Value, IntegrateError> {
        let k = f.eval(tape, xs, y, u)?;
        check_dim(tape, k, n, "derivative")?;
        check_finite(tape, k, |component, value| {
            IntegrateError::NonFiniteDerivative { component, value }
        })?;
        Ok(k)
    };

    let k1 = stage(tape, x)?;
    let d1 = tape.mul(half, k1)?;
    let x2 = tape.add(x, d1)?;
    let k2 = stage(tape, x2)?;
    let d2 = tape.mul(half, k2)?;
    let x3 = tape.add(x, d2)?;
    let k3 = stage(tape, x3)?;
    let d3 = tape.mul(full, k3)?;
    let x4 = tape.add(x, d3)?;
    let k4 = stage(tape, x4)?;

    let k2x2 = tape.mul(two, k2)?;
    let k3x2 = tape.mul(two, k3)?;
    let s1 = tape.add(k1, k2x2)?;
    let s2 = tape.add(s1, k3x2)?;
    let s3 = tape.add(s2, k4)?;
    let inc = tape.mul(sixth, s3)?;
    Ok(tape.add(x, inc)?)
}

fn ode_step(
    tape: &mut Tape,
    stepper: Stepper,
    f: &impl OdeFunction,
    x: Value,
    y: Value,
    u: Value,
    dt: f64,
) -> Result<Value, IntegrateError> {
    match stepper {
        Stepper::Euler => euler_step(tape, f, x, y, u, dt),
        Stepper::Rk4 => rk4_step(tape, f, x, y, u, dt),
    }
}

/// Lie–Trotter split step for dx/dt = A(x) + B(x): solve A over [t, t+dt],
/// then B over the same interval starting from A's result.
#[allow(clippy::too_many_arguments)]
pub fn lie_trotter_step(
    tape: &mut Tape,
    a: &impl OdeFunction,
    b: &impl OdeFunction,
    x: Value,
    y: Value,
    u: Value,
    dt: f64,
    base: Stepper,
) -> Result<Value, IntegrateError> {
    let xh = ode_step(tape, base, a, x, y, u, dt)?;
    ode_step(tape, base, b, xh, y, u, dt)
}

/// One operator-splitting DAE timestep: algebraic update first, then the
/// differential update sees the fresh algebraic state.
pub fn dae_step<F: OdeFunction, H: AlgebraSurrogate>(
    tape: &mut Tape,
    model: &NeuralDaeModel<F, H>,
    x: Value,
    y: Value,
    u: Value,
) -> Result<(Value, Value), IntegrateError> {
    let y_next = model.h.eval(tape, x, y, u)?;
    check_dim(tape, y_next, tape.shape(y).len(), "algebraic update")?;
    check_finite(tape, y_next, |component, value| {
        IntegrateError::NonFiniteAlgebra { component, value }
    })?;
    let x_next = ode_step(tape, model.stepper, &model.f, x, y_next, u, model.dt)?;
    check_finite(tape, x_next, |component, value| IntegrateError::NonFiniteState {
        component,
        value,
    })?;
    Ok((x_next, y_next))
}

impl<F: OdeFunction, H: AlgebraSurrogate> NeuralDaeModel<F, H> {
    pub fn step(
        &self,
        tape: &mut Tape,
        x: Value,
        y: Value,
        u: Value,
    ) -> Result<(Value, Value), IntegrateError> {
        dae_step(tape, self, x, y, u)
    }
}

/// Anything that can advance a full DAE state by one step on the tape.
pub trait DaeStepFn {
    fn dae_step(
        &self,
        tape: &mut Tape,
        x: Value,
        y: Value,
        u: Value,
    ) -> Result<(Value, Value), IntegrateError>;

    fn dt(&self) -> f64;
}

impl<F: OdeFunction, H: AlgebraSurrogate> DaeStepFn for NeuralDaeModel<F, H> {
    fn dae_step(
        &self,
        tape: &mut Tape,
        x: Value,
        y: Value,
        u: Value,
    ) -> Result<(Value, Value), IntegrateError> {
        dae_step(tape, self, x, y, u)
    }

    fn dt(&self) -> f64 {
        self.dt
    }
}

/// Tape handles for every state of a rollout (N+1 entries per block).
#[derive(Clone, Debug)]
pub struct RolloutRecord {
    pub xs: Vec<Value>,
    pub ys: Vec<Value>,
    pub us: Vec<Value>,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Extracts plain values into a trajectory starting at `t0`.
    pub fn to_trajectory(
        &self,
        tape: &Tape,
        t0: f64,
        dt: f64,
        meta: TrajectoryMeta,
    ) -> Result<Trajectory, DataError> {
        let times: Vec<f64> = (0..self.xs.len()).map(|k| t0 + k as f64 * dt).collect();
        let x = self.xs.iter().map(|&v| tape.value(v).to_vec()).collect();
        let y = self.ys.iter().map(|&v| tape.value(v).to_vec()).collect();
        let u = self.us.iter().map(|&v| tape.value(v).to_vec()).collect();
        Trajectory::new(times, x, y, u, meta)
    }
}

/// Runs `n` DAE steps from `(x0, y0)` under the input sequence, keeping all
/// intermediates on the tape. `u_seq[k]` is applied over step k; the record
/// gets N+1 states. When `u_seq` provides a row for the final instant it is
/// recorded as-is, otherwise the last applied input is repeated.
pub fn rollout<M: DaeStepFn + ?Sized>(
    tape: &mut Tape,
    model: &M,
    x0: &[f64],
    y0: &[f64],
    u_seq: &[Vec<f64>],
    n: usize,
) -> Result<RolloutRecord, IntegrateError> {
    if u_seq.len() < n {
        return Err(IntegrateError::ShortInputs {
            need: n,
            got: u_seq.len(),
        });
    }
    for (i, v) in x0.iter().chain(y0.iter()).enumerate() {
        if !v.is_finite() {
            return Err(IntegrateError::NonFiniteState {
                component: i,
                value: *v,
            });
        }
    }

    let mut x = tape.constant_vector(x0);
    let mut y = tape.constant_vector(y0);
    let mut xs = Vec::with_capacity(n + 1);
    let mut ys = Vec::with_capacity(n + 1);
    let mut us = Vec::with_capacity(n + 1);
    xs.push(x);
    ys.push(y);

    for (k, u_row) in u_seq.iter().enumerate().take(n) {
        let u = tape.constant_vector(u_row);
        us.push(u);
        let (xn, yn) = model.dae_step(tape, x, y, u).map_err(|e| IntegrateError::AtStep {
            step: k,
            source: Box::new(e),
        })?;
        x = xn;
        y = yn;
        xs.push(x);
        ys.push(y);
    }
    // Input at the final instant, for the record only.
    let last = if u_seq.len() > n {
        tape.constant_vector(&u_seq[n])
    } else if n > 0 {
        us[n - 1]
    } else {
        tape.constant_vector(u_seq.first().map(Vec::as_slice).unwrap_or(&[]))
    };
    us.push(last);

    Ok(RolloutRecord { xs, ys, us })
}
