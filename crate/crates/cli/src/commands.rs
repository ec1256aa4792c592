//! The five subcommands: generate, train, eval, extrapolate, gradcheck.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use daestep::autodiff::gradient_check;
use daestep::data::{
    add_noise, read_csv, write_csv, write_report, write_svg_lineplot, Checkpoint, PlotSeries,
    Trajectory,
};
use daestep::integrators::rollout;
use daestep::reference::{
    check_index1, manifold_algebra_oracle, manifold_algebra_residual, manifold_area_profile,
    network_algebra_oracle, network_algebra_residual, simulate_manifold, simulate_network, Inflow,
    NetworkSpec,
};
use daestep::training::models::{ManifoldModel, NetworkModel};
use daestep::training::{evaluate, total_loss, train, ExperimentModel, LossWeights};
use daestep::Tape;

use crate::config::{ExperimentConfig, ExperimentKind};

/// Exit code 2 for configuration problems, 1 for numerical failures.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn numerical_err(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn out_dir(config: &ExperimentConfig, flag: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn ground_truth(config: &ExperimentConfig) -> Result<Trajectory, CliError> {
    match config.experiment {
        ExperimentKind::Manifold => {
            simulate_manifold(&config.manifold.to_spec()).map_err(numerical_err)
        }
        ExperimentKind::Network => {
            simulate_network(&config.network.to_spec()).map_err(numerical_err)
        }
    }
}

fn build_model(
    tape: &mut Tape,
    config: &ExperimentConfig,
) -> Result<Box<dyn ExperimentModel>, CliError> {
    match config.experiment {
        ExperimentKind::Manifold => Ok(Box::new(
            ManifoldModel::init(tape, &config.manifold_model_config()).map_err(numerical_err)?,
        )),
        ExperimentKind::Network => Ok(Box::new(
            NetworkModel::init(tape, &config.network_model_config()).map_err(numerical_err)?,
        )),
    }
}

/// Index-1 regularity of the algebraic system at the dataset's initial
/// condition, via the square residual after index reduction.
fn index1_at_ic(config: &ExperimentConfig) -> Result<(bool, f64), CliError> {
    match config.experiment {
        ExperimentKind::Manifold => {
            let spec = config.manifold.to_spec();
            let u0 = spec.inflow.at(0.0);
            let (y1, y2) =
                manifold_algebra_oracle(spec.x0, u0, spec.known_area, manifold_area_profile)
                    .map_err(numerical_err)?;
            let check = check_index1(
                manifold_algebra_residual(spec.known_area),
                &[spec.x0, spec.x0],
                &[y1, y2],
                &[u0],
                1e8,
            );
            Ok((check.ok, check.condition_number))
        }
        ExperimentKind::Network => {
            let spec = config.network.to_spec();
            let y = network_algebra_oracle(&spec.x0, &spec).map_err(numerical_err)?;
            let check = check_index1(network_algebra_residual(&spec), &spec.x0, &y, &[], 1e8);
            Ok((check.ok, check.condition_number))
        }
    }
}

pub fn cmd_generate(
    config: &ExperimentConfig,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out_dir(config, out)?;
    let (ok, cond) = index1_at_ic(config)?;
    let mut truth = ground_truth(config)?;
    truth.meta.seed = Some(config.seed);
    truth
        .meta
        .extra
        .insert("index1_ok".into(), ok.to_string());
    truth
        .meta
        .extra
        .insert("index1_condition".into(), format!("{cond:.6e}"));

    let dataset = match config.noise_spec() {
        Some(spec) => add_noise(&truth, &spec).map_err(numerical_err)?,
        None => truth,
    };
    let path = dir.join(format!("{}_dataset.csv", config.experiment));
    write_csv(&dataset, &path).map_err(numerical_err)?;
    println!(
        "wrote {} ({} rows); index-1 at initial condition: {} (condition number {:.3e})",
        path.display(),
        dataset.len(),
        if ok { "ok" } else { "VIOLATED" },
        cond
    );
    if !ok {
        return Err(CliError::Numerical(
            "index-1 assumption violated at the initial condition".into(),
        ));
    }
    Ok(())
}

pub fn cmd_train(
    config: &ExperimentConfig,
    dataset_path: &Path,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out_dir(config, out)?;
    let dataset = read_csv(dataset_path).map_err(config_err)?;
    let mut tape = Tape::new();
    let model = build_model(&mut tape, config)?;
    let mut train_config = config.train_config();
    train_config.checkpoint_dir = Some(dir.clone());

    let report = train(&mut tape, model.as_ref(), &dataset, &train_config)
        .map_err(numerical_err)?;

    let ck_path = dir.join("checkpoint.json");
    report.params.save(&ck_path).map_err(numerical_err)?;
    let report_path = dir.join("train_report.json");
    write_report(&report, &report_path).map_err(numerical_err)?;

    println!(
        "trained {} for {} epochs ({:?}), final loss {:.6e}, {:.1}s",
        config.experiment, report.epochs_run, report.stop_reason, report.final_loss,
        report.wall_secs
    );
    for (k, v) in &report.metrics {
        println!("  {k}: {v:.6e}");
    }
    println!("wrote {} and {}", ck_path.display(), report_path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub scenario: String,
    pub metrics: BTreeMap<String, f64>,
}

fn load_model(
    tape: &mut Tape,
    config: &ExperimentConfig,
    checkpoint: &Path,
) -> Result<Box<dyn ExperimentModel>, CliError> {
    let model = build_model(tape, config)?;
    let ck = Checkpoint::load(checkpoint).map_err(config_err)?;
    model
        .load_checkpoint(tape, &ck)
        .map_err(config_err)?;
    Ok(model)
}

fn channel_plots(
    dir: &Path,
    prefix: &str,
    truth: &Trajectory,
    model: &Trajectory,
) -> Result<(), CliError> {
    let times = truth.times();
    let mut heights = Vec::new();
    for c in 0..truth.n_x() {
        heights.push(PlotSeries::from_values(
            format!("x{} truth", c + 1),
            times,
            &truth.x_column(c),
        ));
        heights.push(PlotSeries::from_values(
            format!("x{} model", c + 1),
            times,
            &model.x_column(c),
        ));
    }
    write_svg_lineplot(&heights, "Tank heights", &dir.join(format!("{prefix}_heights.svg")))
        .map_err(numerical_err)?;

    let mut flows = Vec::new();
    for c in 0..truth.n_y() {
        flows.push(PlotSeries::from_values(
            format!("y{} truth", c + 1),
            times,
            &truth.y_column(c),
        ));
        flows.push(PlotSeries::from_values(
            format!("y{} model", c + 1),
            times,
            &model.y_column(c),
        ));
    }
    write_svg_lineplot(&flows, "Volumetric flows", &dir.join(format!("{prefix}_flows.svg")))
        .map_err(numerical_err)?;
    Ok(())
}

fn area_profile_plot(
    dir: &Path,
    prefix: &str,
    tape: &mut Tape,
    model: &ManifoldModel,
    reference: &Trajectory,
) -> Result<(), CliError> {
    let heights = reference.x_column(1);
    let lo = heights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = heights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = 100;
    let xs: Vec<f64> = (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect();
    let truth: Vec<f64> = xs.iter().map(|&h| manifold_area_profile(h)).collect();
    let mut learned = Vec::with_capacity(xs.len());
    for &h in &xs {
        learned.push(model.area_profile_at(tape, h).map_err(numerical_err)?);
    }
    let series = [
        PlotSeries::from_values("true profile", &xs, &truth),
        PlotSeries::from_values("learned profile", &xs, &learned),
    ];
    write_svg_lineplot(
        &series,
        "Area-height profile over visited heights",
        &dir.join(format!("{prefix}_area_profile.svg")),
    )
    .map_err(numerical_err)?;
    Ok(())
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    dataset_path: &Path,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out_dir(config, out)?;
    let reference = read_csv(dataset_path).map_err(config_err)?;
    let mut tape = Tape::new();
    let model = load_model(&mut tape, config, checkpoint)?;

    let eval = evaluate(&mut tape, model.as_ref(), &reference).map_err(numerical_err)?;
    channel_plots(&dir, "eval", &reference, &eval.trajectory)?;
    if config.experiment == ExperimentKind::Manifold {
        // Rebuild concretely for the profile plot.
        let mut ptape = Tape::new();
        let pmodel = ManifoldModel::init(&mut ptape, &config.manifold_model_config())
            .map_err(numerical_err)?;
        let ck = Checkpoint::load(checkpoint).map_err(config_err)?;
        pmodel.load_checkpoint(&mut ptape, &ck).map_err(config_err)?;
        area_profile_plot(&dir, "eval", &mut ptape, &pmodel, &reference)?;
    }

    let report = EvalReport {
        experiment: config.experiment.to_string(),
        scenario: "dataset".into(),
        metrics: eval.metrics.clone(),
    };
    let report_path = dir.join("eval_report.json");
    write_report(&report, &report_path).map_err(numerical_err)?;
    for (k, v) in &eval.metrics {
        println!("{k}: {v:.6e}");
    }
    println!("wrote {}", report_path.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scenario {
    /// Same system as the training configuration.
    Training,
    /// Manifold: unseen sinusoidal inlet flow.
    UnseenInflow,
    /// Network: tank 1 area redefined to 1.0.
    UnseenPhi1,
}

pub fn cmd_extrapolate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    scenario: Scenario,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let dir = out_dir(config, out)?;
    let mut tape = Tape::new();

    let (truth, eval, label) = match (config.experiment, scenario) {
        (ExperimentKind::Manifold, Scenario::UnseenInflow) => {
            let mut spec = config.manifold.to_spec();
            spec.inflow = Inflow::Sinusoid {
                offset: 0.5,
                amplitude: 0.25,
                period_scale: 100.0,
            };
            let truth = simulate_manifold(&spec).map_err(numerical_err)?;
            let model = load_model(&mut tape, config, checkpoint)?;
            let eval = evaluate(&mut tape, model.as_ref(), &truth).map_err(numerical_err)?;
            (truth, eval, "unseen-inflow")
        }
        (ExperimentKind::Network, Scenario::UnseenPhi1) => {
            let spec = NetworkSpec {
                areas: [1.0, config.network.areas[1], config.network.areas[2], config.network.areas[3]],
                ..config.network.to_spec()
            };
            let truth = simulate_network(&spec).map_err(numerical_err)?;
            let base = NetworkModel::init(&mut tape, &config.network_model_config())
                .map_err(numerical_err)?;
            let ck = Checkpoint::load(checkpoint).map_err(config_err)?;
            base.load_checkpoint(&mut tape, &ck).map_err(config_err)?;
            let deployed = base.with_areas(spec.areas);
            let eval = evaluate(&mut tape, &deployed, &truth).map_err(numerical_err)?;
            (truth, eval, "unseen-phi1")
        }
        (_, Scenario::Training) => {
            let truth = ground_truth(config)?;
            let model = load_model(&mut tape, config, checkpoint)?;
            let eval = evaluate(&mut tape, model.as_ref(), &truth).map_err(numerical_err)?;
            (truth, eval, "training")
        }
        (kind, s) => {
            return Err(CliError::Config(format!(
                "scenario {s:?} does not apply to the {kind} experiment"
            )));
        }
    };

    channel_plots(&dir, "extrapolate", &truth, &eval.trajectory)?;
    let report = EvalReport {
        experiment: config.experiment.to_string(),
        scenario: label.into(),
        metrics: eval.metrics.clone(),
    };
    let report_path = dir.join("extrapolate_report.json");
    write_report(&report, &report_path).map_err(numerical_err)?;
    for (k, v) in &eval.metrics {
        println!("{k}: {v:.6e}");
    }
    println!("wrote {}", report_path.display());
    Ok(())
}

pub fn cmd_gradcheck(
    config: &ExperimentConfig,
    horizon: usize,
    fd_step: f64,
    tolerance: f64,
) -> Result<(), CliError> {
    if horizon == 0 {
        return Err(CliError::Config("horizon must be >= 1".into()));
    }
    if !(fd_step > 0.0) {
        return Err(CliError::Config(format!("fd step must be > 0, got {fd_step}")));
    }

    // Self-contained: simulate the truth for the requested horizon.
    let truth = match config.experiment {
        ExperimentKind::Manifold => {
            let mut spec = config.manifold.to_spec();
            spec.steps = horizon;
            simulate_manifold(&spec).map_err(numerical_err)?
        }
        ExperimentKind::Network => {
            let mut spec = config.network.to_spec();
            spec.steps = horizon;
            simulate_network(&spec).map_err(numerical_err)?
        }
    };

    let mut tape = Tape::new();
    let model = build_model(&mut tape, config)?;
    let weights = LossWeights {
        residual: config.train.lambda_residual,
        constraint: config.train.lambda_constraint,
    };
    let report = gradient_check(
        &mut tape,
        |t| {
            let record = rollout(
                t,
                model.as_ref(),
                truth.x_row(0),
                truth.y_row(0),
                truth.u_rows(),
                horizon,
            )
            .unwrap_or_else(|e| panic!("rollout failed during gradient check: {e}"));
            Ok(total_loss(
                t,
                &record,
                &truth,
                |tt, x, y, u| model.constraint(tt, x, y, u),
                &weights,
            )
            .unwrap_or_else(|e| panic!("loss failed during gradient check: {e}")))
        },
        fd_step,
        1e-8,
    )
    .map_err(numerical_err)?;

    println!(
        "{} loss over {horizon} steps: {} parameter entries checked",
        config.experiment, report.n_checked
    );
    println!(
        "max relative error {:.3e}, mean {:.3e} (tolerance {tolerance:.1e})",
        report.max_rel_err, report.mean_rel_err
    );
    for e in report.worst.iter().take(5) {
        println!(
            "  entry {}: analytic {:.6e}, central difference {:.6e}, rel err {:.3e}",
            e.flat_index, e.analytic, e.numeric, e.rel_err
        );
    }
    if report.max_rel_err > tolerance {
        return Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} > {tolerance:.1e}",
            report.max_rel_err
        )));
    }
    println!("gradient check passed");
    Ok(())
}
