//! Loss assembly, Adam optimization with early stopping, and the training
//! loop: one full-horizon rollout per epoch, backpropagation through time,
//! one optimizer update.

pub mod models;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Value};
use crate::data::{mse, Checkpoint, DataError, StateGroup, Trajectory, TrajectoryMeta};
use crate::integrators::{rollout, DaeStepFn, IntegrateError, RolloutRecord};
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
    #[error("non-finite gradient in parameter entry {index}")]
    NonFiniteGradient { index: usize },
    #[error("prediction has {pred} samples, target has {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("invalid training setup: {0}")]
    BadConfig(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Weights of the multi-term loss: residual tracking plus constraint penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub residual: f64,
    pub constraint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            residual: 1.0,
            constraint: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.residual < 0.0 || self.constraint < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "loss weights must be nonnegative, got {self:?}"
            )));
        }
        if self.residual == 0.0 && self.constraint == 0.0 {
            return Err(TrainError::BadConfig(
                "loss weights must not both be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Sum over the horizon of squared state errors:
/// sum_t ( ||x_t - x̂_t||^2 + ||y_t - ŷ_t||^2 ).
pub fn residual_loss(
    tape: &mut Tape,
    pred: &RolloutRecord,
    target: &Trajectory,
) -> Result<Value, TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    let mut acc = tape.constant_scalar(0.0);
    for k in 0..pred.len() {
        let tx = tape.constant_vector(target.x_row(k));
        let dx = tape.sub(pred.xs[k], tx)?;
        let ex = tape.sq_norm(dx)?;
        acc = tape.add(acc, ex)?;
        let ty = tape.constant_vector(target.y_row(k));
        let dy = tape.sub(pred.ys[k], ty)?;
        let ey = tape.sq_norm(dy)?;
        acc = tape.add(acc, ey)?;
    }
    Ok(acc)
}

/// Sum over the horizon of squared constraint residuals of the rolled-out
/// states themselves.
pub fn constraint_loss<G>(
    tape: &mut Tape,
    g: G,
    pred: &RolloutRecord,
) -> Result<Value, TrainError>
where
    G: Fn(&mut Tape, Value, Value, Value) -> Result<Value, TapeError>,
{
    let mut acc = tape.constant_scalar(0.0);
    for k in 0..pred.len() {
        let r = g(tape, pred.xs[k], pred.ys[k], pred.us[k])?;
        let e = tape.sq_norm(r)?;
        acc = tape.add(acc, e)?;
    }
    Ok(acc)
}

/// lambda_residual * residual + lambda_constraint * constraint.
pub fn total_loss<G>(
    tape: &mut Tape,
    pred: &RolloutRecord,
    target: &Trajectory,
    g: G,
    weights: &LossWeights,
) -> Result<Value, TrainError>
where
    G: Fn(&mut Tape, Value, Value, Value) -> Result<Value, TapeError>,
{
    weights.validate()?;
    let res = residual_loss(tape, pred, target)?;
    let con = constraint_loss(tape, g, pred)?;
    let wr = tape.constant_scalar(weights.residual);
    let wc = tape.constant_scalar(weights.constraint);
    let a = tape.mul(wr, res)?;
    let b = tape.mul(wc, con)?;
    Ok(tape.add(a, b)?)
}

/// Adam with bias correction over the tape's flat parameter storage.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_entries: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_entries],
            v: vec![0.0; n_entries],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update from the gradients currently on the tape.
    pub fn step(&mut self, tape: &mut Tape) -> Result<(), TrainError> {
        let (params, grads) = tape.flat_params_and_grads_mut();
        assert_eq!(params.len(), self.m.len());
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { index });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Stops after `patience` consecutive epochs of strictly increasing loss.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    prev: Option<f64>,
    run: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            prev: None,
            run: 0,
        }
    }

    /// Feeds one epoch loss; true means halt now.
    pub fn observe(&mut self, loss: f64) -> bool {
        if let Some(prev) = self.prev {
            if loss > prev {
                self.run += 1;
            } else {
                self.run = 0;
            }
        }
        self.prev = Some(loss);
        self.run >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs of strictly increasing loss before the early stop triggers.
    pub patience: usize,
    /// Loss tolerance; a value <= 0 disables the convergence stop.
    pub loss_tol: f64,
    pub weights: LossWeights,
    pub lr: f64,
    /// Rollout horizon in steps; defaults to the full dataset.
    pub horizon: Option<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 20_000,
            patience: 20,
            loss_tol: 1e-6,
            weights: LossWeights::default(),
            lr: 1e-3,
            horizon: None,
            seed: 0,
            checkpoint_every: 1000,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 {
            return Err(TrainError::BadConfig("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::BadConfig("patience must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Loss fell to or below the tolerance.
    Converged,
    /// Loss increased for `patience` consecutive epochs.
    EarlyStopped,
    MaxEpochs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    /// Number of optimizer updates performed.
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_secs: f64,
    pub params: Checkpoint,
}

/// A concrete experiment model: a DAE stepper plus everything the training
/// loop and the CLI need around it.
pub trait ExperimentModel: DaeStepFn {
    fn name(&self) -> &'static str;

    /// (n_x, n_y, n_u)
    fn dims(&self) -> (usize, usize, usize);

    /// Known constraint residual of the rolled-out states, as tape ops.
    fn constraint(&self, tape: &mut Tape, x: Value, y: Value, u: Value)
        -> Result<Value, TapeError>;

    fn checkpoint(&self, tape: &Tape) -> Checkpoint;

    fn load_checkpoint(&self, tape: &mut Tape, ck: &Checkpoint) -> Result<(), TrainError>;

    /// Model-specific evaluation extras (recovered coefficients, profile
    /// reconstruction error, ...).
    fn extra_metrics(
        &self,
        tape: &mut Tape,
        reference: &Trajectory,
    ) -> Result<Vec<(String, f64)>, TrainError> {
        let _ = (tape, reference);
        Ok(Vec::new())
    }
}

fn check_dataset<M: ExperimentModel + ?Sized>(
    model: &M,
    dataset: &Trajectory,
) -> Result<(), TrainError> {
    let (n_x, n_y, n_u) = model.dims();
    if dataset.n_x() != n_x || dataset.n_y() != n_y || dataset.n_u() != n_u {
        return Err(TrainError::BadConfig(format!(
            "dataset dims ({}, {}, {}) do not match model dims ({n_x}, {n_y}, {n_u})",
            dataset.n_x(),
            dataset.n_y(),
            dataset.n_u()
        )));
    }
    if dataset.len() > 1 {
        let dt = dataset.dt();
        if (dt - model.dt()).abs() > 1e-9 * model.dt().abs().max(1.0) {
            return Err(TrainError::BadConfig(format!(
                "dataset spacing {dt} does not match model dt {}",
                model.dt()
            )));
        }
    }
    Ok(())
}

/// Trains per the operator-splitting scheme: every epoch rolls the model out
/// over the full horizon from the dataset's initial state, evaluates the
/// multi-term loss, backpropagates through time, and applies one Adam update.
/// Stops on convergence, on `patience` epochs of increasing loss, or at
/// `max_epochs`.
pub fn train<M: ExperimentModel + ?Sized>(
    tape: &mut Tape,
    model: &M,
    dataset: &Trajectory,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    check_dataset(model, dataset)?;
    let n = config.horizon.unwrap_or(dataset.len() - 1);
    if n == 0 || n > dataset.len() - 1 {
        return Err(TrainError::BadConfig(format!(
            "horizon {n} not in [1, {}]",
            dataset.len() - 1
        )));
    }
    let target = dataset.truncated(n + 1)?;
    let x0 = target.x_row(0).to_vec();
    let y0 = target.y_row(0).to_vec();
    let u_seq: Vec<Vec<f64>> = (0..=n).map(|k| target.u_row(k).to_vec()).collect();

    let start = Instant::now();
    let mut adam = AdamState::new(tape.params_len(), config.lr);
    let mut early = EarlyStop::new(config.patience);
    let mut loss_curve = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut epochs_run = 0;

    for epoch in 0..config.max_epochs {
        tape.reset();
        let record = rollout(tape, model, &x0, &y0, &u_seq, n).map_err(|e| {
            TrainError::Diverged {
                epoch,
                message: e.to_string(),
            }
        })?;
        let loss_value = total_loss(
            tape,
            &record,
            &target,
            |t, x, y, u| model.constraint(t, x, y, u),
            &config.weights,
        )?;
        let loss = tape.scalar_value(loss_value);
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                message: format!("loss became {loss}"),
            });
        }
        loss_curve.push(loss);

        if config.loss_tol > 0.0 && loss <= config.loss_tol {
            stop_reason = StopReason::Converged;
            break;
        }
        if early.observe(loss) {
            stop_reason = StopReason::EarlyStopped;
            break;
        }

        tape.zero_grad();
        tape.backward(loss_value)?;
        adam.step(tape)?;
        epochs_run = epoch + 1;

        if config.checkpoint_every > 0 && epochs_run % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                let ck = model.checkpoint(tape);
                ck.save(&dir.join(format!("checkpoint_epoch_{epochs_run}.json")))?;
            }
        }
    }

    let eval = evaluate(tape, model, &target)?;
    let final_loss = *loss_curve.last().expect("at least one epoch ran");
    Ok(TrainReport {
        seed: config.seed,
        epochs_run,
        stop_reason,
        final_loss,
        loss_curve,
        metrics: eval.metrics,
        wall_secs: start.elapsed().as_secs_f64(),
        params: model.checkpoint(tape),
    })
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub metrics: BTreeMap<String, f64>,
    /// The model's open-loop trajectory from the reference initial state.
    pub trajectory: Trajectory,
}

/// Open-loop rollout against a reference trajectory with grouped MSE metrics
/// (`height_mse` for differential states, `flow_mse` for algebraic states)
/// plus model-specific extras. Resets the tape.
pub fn evaluate<M: ExperimentModel + ?Sized>(
    tape: &mut Tape,
    model: &M,
    reference: &Trajectory,
) -> Result<EvalResult, TrainError> {
    check_dataset(model, reference)?;
    tape.reset();
    let n = reference.len() - 1;
    let record = rollout(
        tape,
        model,
        reference.x_row(0),
        reference.y_row(0),
        reference.u_rows(),
        n,
    )?;
    let meta = TrajectoryMeta {
        system: format!("{}-model", model.name()),
        dt: model.dt(),
        ..Default::default()
    };
    let trajectory = record.to_trajectory(tape, reference.times()[0], model.dt(), meta)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("height_mse".into(), mse(&trajectory, reference, StateGroup::X)?);
    metrics.insert("flow_mse".into(), mse(&trajectory, reference, StateGroup::Y)?);
    for (k, v) in model.extra_metrics(tape, reference)? {
        metrics.insert(k, v);
    }
    Ok(EvalResult {
        metrics,
        trajectory,
    })
}

/// Maximum conservation violation over a rolled-out trajectory:
/// |y1 + y2 - u| for the manifold, |y1 + y2 - y0| for the network.
///
/// Inputs are zero-order-hold, so the algebraic state in row k (k >= 1) was
/// produced from the input of row k-1; row 0 is checked against its own
/// input (initial-condition consistency).
pub fn max_split_conservation_violation(traj: &Trajectory) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..traj.len() {
        let y = traj.y_row(k);
        let v = if traj.n_y() == 2 {
            let u = traj.u_row(k.saturating_sub(1))[0];
            (y[0] + y[1] - u).abs()
        } else {
            (y[1] + y[2] - y[0]).abs()
        };
        worst = worst.max(v);
    }
    worst
}
