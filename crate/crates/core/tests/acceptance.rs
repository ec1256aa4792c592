//! Acceptance suite. One test per criterion; each prints a PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Training-based criteria must hold for at least 3 of the 4 fixed seeds.
//! Trained models are shared across criteria through lazy statics so each
//! experiment trains once per seed.

use std::sync::LazyLock;
use std::time::Instant;

use daestep::autodiff::gradient_check;
use daestep::data::{
    add_noise, channel_noise_variances, mse, oscillation_amplitudes, NoiseChannels, NoiseSpec,
    StateGroup, Trajectory,
};
use daestep::integrators::{
    euler_step, lie_trotter_step, rk4_step, rollout, IntegrateError, Stepper,
};
use daestep::reference::{
    check_index1, manifold_algebra_oracle, manifold_algebra_residual, manifold_area_profile,
    network_algebra_oracle, network_algebra_residual, network_total_volume, newton_solve_algebraic,
    simulate_manifold, simulate_network, Inflow, ManifoldSpec, NetworkSpec,
};
use daestep::training::models::{
    ManifoldModel, ManifoldModelConfig, NetworkModel, NetworkModelConfig,
};
use daestep::training::{
    evaluate, max_split_conservation_violation, total_loss, train, ExperimentModel, LossWeights,
    TrainConfig,
};
use daestep::{Tape, Value};

const SEEDS: [u64; 4] = [1, 2, 3, 4];
const REQUIRED_SEED_PASSES: usize = 3;

fn verdict(criterion: u32, what: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {criterion} ({what}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn range(values: impl IntoIterator<Item = f64>) -> String {
    let v: Vec<f64> = values.into_iter().collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    format!("{lo:.2e}..{hi:.2e}")
}

// ---- shared trained models ---------------------------------------------------

struct ManifoldRun {
    height_mse: f64,
    flow_mse: f64,
    area_mse: f64,
    wall_secs: f64,
    extrap_flow_mse: f64,
    sign_agreement: f64,
    conservation: f64,
}

fn train_manifold(seed: u64) -> ManifoldRun {
    let dataset = simulate_manifold(&ManifoldSpec::default()).expect("ground truth");
    let mut tape = Tape::new();
    let model = ManifoldModel::init(
        &mut tape,
        &ManifoldModelConfig {
            seed,
            ..Default::default()
        },
    )
    .expect("init");
    let config = TrainConfig {
        seed,
        checkpoint_every: 0,
        ..Default::default()
    };
    let start = Instant::now();
    let report = train(&mut tape, &model, &dataset, &config).expect("training");
    let wall_secs = start.elapsed().as_secs_f64();

    let eval = evaluate(&mut tape, &model, &dataset).expect("eval");
    let mut conservation = max_split_conservation_violation(&eval.trajectory);

    // Unseen sinusoidal inlet.
    let extrap_spec = ManifoldSpec {
        inflow: Inflow::Sinusoid {
            offset: 0.5,
            amplitude: 0.25,
            period_scale: 100.0,
        },
        ..Default::default()
    };
    let truth = simulate_manifold(&extrap_spec).expect("extrap truth");
    let extrap = evaluate(&mut tape, &model, &truth).expect("extrap eval");
    conservation = conservation.max(max_split_conservation_violation(&extrap.trajectory));

    let model_y1 = extrap.trajectory.y_column(0);
    let truth_y1 = truth.y_column(0);
    let mut agree = 0usize;
    for k in 1..truth_y1.len() {
        let a = model_y1[k] - model_y1[k - 1];
        let b = truth_y1[k] - truth_y1[k - 1];
        if a * b >= 0.0 {
            agree += 1;
        }
    }

    let _ = report;
    ManifoldRun {
        height_mse: eval.metrics["height_mse"],
        flow_mse: eval.metrics["flow_mse"],
        area_mse: eval.metrics["area_mse"],
        wall_secs,
        extrap_flow_mse: extrap.metrics["flow_mse"],
        sign_agreement: agree as f64 / (truth_y1.len() - 1) as f64,
        conservation,
    }
}

static MANIFOLD_RUNS: LazyLock<Vec<ManifoldRun>> =
    LazyLock::new(|| SEEDS.iter().map(|&s| train_manifold(s)).collect());

struct NetworkRun {
    height_mse: f64,
    alpha1: f64,
    alpha2: f64,
    extrap_height_mse: f64,
    /// Pump-flow oscillation amplitudes of the deployed model over the
    /// extended horizon where the scenario expresses its damped oscillation.
    extended_y0_amplitudes: Option<Vec<f64>>,
    conservation: f64,
}

fn train_network(seed: u64, noise: Option<NoiseSpec>) -> NetworkRun {
    let clean = simulate_network(&NetworkSpec::default()).expect("ground truth");
    let dataset = match &noise {
        Some(spec) => add_noise(&clean, spec).expect("noise"),
        None => clean.clone(),
    };
    let mut tape = Tape::new();
    let model = NetworkModel::init(
        &mut tape,
        &NetworkModelConfig {
            seed,
            ..Default::default()
        },
    )
    .expect("init");
    let config = TrainConfig {
        seed,
        // The absolute tolerance is meaningless against a noise floor.
        loss_tol: if noise.is_some() { 0.0 } else { 1e-6 },
        checkpoint_every: 0,
        ..Default::default()
    };
    train(&mut tape, &model, &dataset, &config).expect("training");

    let eval = evaluate(&mut tape, &model, &clean).expect("eval");
    let mut conservation = max_split_conservation_violation(&eval.trajectory);
    let (alpha1, alpha2) = model.discharge_coefficients(&tape);

    // Deploy the same trained closures on the phi1 = 1.0 geometry.
    let deployed = model.with_areas([1.0, 1.0, 1.0, 10.0]);
    let extrap_spec = NetworkSpec {
        areas: [1.0, 1.0, 1.0, 10.0],
        ..Default::default()
    };
    let truth = simulate_network(&extrap_spec).expect("extrap truth");
    let extrap = evaluate(&mut tape, &deployed, &truth).expect("extrap eval");
    conservation = conservation.max(max_split_conservation_violation(&extrap.trajectory));

    // Extended horizon: the phi1 = 1.0 system's first two pump-flow extrema
    // sit near t = 32 and t = 95, far beyond the t <= 20 training window.
    let long_spec = NetworkSpec {
        areas: [1.0, 1.0, 1.0, 10.0],
        steps: 2000,
        ..Default::default()
    };
    let long_truth = simulate_network(&long_spec).expect("long truth");
    let extended_y0_amplitudes = evaluate(&mut tape, &deployed, &long_truth)
        .ok()
        .map(|e| oscillation_amplitudes(&e.trajectory.y_column(0)));

    NetworkRun {
        height_mse: eval.metrics["height_mse"],
        alpha1,
        alpha2,
        extrap_height_mse: extrap.metrics["height_mse"],
        extended_y0_amplitudes,
        conservation,
    }
}

static NETWORK_RUNS: LazyLock<Vec<NetworkRun>> =
    LazyLock::new(|| SEEDS.iter().map(|&s| train_network(s, None)).collect());

struct NoisyRun {
    extrap_height_mse: f64,
    /// Training MSE against the noisy data (mean over time, summed over
    /// channels) divided by the injected noise power summed over channels.
    noise_floor_ratio: f64,
    conservation: f64,
}

fn train_noisy(seed: u64) -> NoisyRun {
    let spec = NoiseSpec {
        snr_db: 20.0,
        seed: seed.wrapping_add(1000),
        channels: NoiseChannels::All,
    };
    let clean = simulate_network(&NetworkSpec::default()).expect("ground truth");
    let noisy = add_noise(&clean, &spec).expect("noise");

    let mut tape = Tape::new();
    let model = NetworkModel::init(
        &mut tape,
        &NetworkModelConfig {
            seed,
            ..Default::default()
        },
    )
    .expect("init");
    let config = TrainConfig {
        seed,
        loss_tol: 0.0,
        checkpoint_every: 0,
        ..Default::default()
    };
    train(&mut tape, &model, &noisy, &config).expect("training");

    let eval = evaluate(&mut tape, &model, &clean).expect("eval");
    let conservation = max_split_conservation_violation(&eval.trajectory);
    let channels = (clean.n_x() + clean.n_y()) as f64;
    let train_mse_sum =
        mse(&eval.trajectory, &noisy, StateGroup::Both).expect("mse") * channels;
    let injected_power: f64 = channel_noise_variances(&clean, &spec).iter().sum();

    let deployed = model.with_areas([1.0, 1.0, 1.0, 10.0]);
    let extrap_spec = NetworkSpec {
        areas: [1.0, 1.0, 1.0, 10.0],
        ..Default::default()
    };
    let truth = simulate_network(&extrap_spec).expect("extrap truth");
    let extrap = evaluate(&mut tape, &deployed, &truth).expect("extrap eval");

    NoisyRun {
        extrap_height_mse: extrap.metrics["height_mse"],
        noise_floor_ratio: train_mse_sum / injected_power,
        conservation,
    }
}

static NOISY_RUNS: LazyLock<Vec<NoisyRun>> =
    LazyLock::new(|| SEEDS.iter().map(|&s| train_noisy(s)).collect());

// ---- criteria ----------------------------------------------------------------

#[test]
fn criterion_01_manifold_reconstruction() {
    let runs = &*MANIFOLD_RUNS;
    let passes = runs
        .iter()
        .filter(|r| r.height_mse <= 9e-2 && r.flow_mse <= 2e-1 && r.wall_secs <= 900.0)
        .count();
    let pass = passes >= REQUIRED_SEED_PASSES;
    let detail = format!(
        "{passes}/4 seeds; height mse {} (<= 9e-2), flow mse {} (<= 2e-1), wall {:.0}s max (<= 900s)",
        range(runs.iter().map(|r| r.height_mse)),
        range(runs.iter().map(|r| r.flow_mse)),
        runs.iter().map(|r| r.wall_secs).fold(0.0, f64::max),
    );
    assert!(verdict(1, "manifold reconstruction", pass, &detail), "{detail}");
}

#[test]
fn criterion_02_area_profile_recovery() {
    let runs = &*MANIFOLD_RUNS;
    let passes = runs.iter().filter(|r| r.area_mse <= 6e-2).count();
    let pass = passes >= REQUIRED_SEED_PASSES;
    let detail = format!(
        "{passes}/4 seeds; area profile mse {} (<= 6e-2)",
        range(runs.iter().map(|r| r.area_mse)),
    );
    assert!(verdict(2, "area-height profile recovery", pass, &detail), "{detail}");
}

#[test]
fn criterion_03_manifold_extrapolation() {
    let runs = &*MANIFOLD_RUNS;
    let passes = runs
        .iter()
        .filter(|r| r.extrap_flow_mse <= 1.0 && r.sign_agreement >= 0.8)
        .count();
    let pass = passes >= REQUIRED_SEED_PASSES;
    let detail = format!(
        "{passes}/4 seeds; unseen-inlet flow mse {} (<= 1.0), dy1 sign agreement {} (>= 0.8)",
        range(runs.iter().map(|r| r.extrap_flow_mse)),
        range(runs.iter().map(|r| r.sign_agreement)),
    );
    assert!(verdict(3, "manifold extrapolation", pass, &detail), "{detail}");
}

#[test]
fn criterion_04_network_no_noise() {
    let runs = &*NETWORK_RUNS;
    let passes = runs
        .iter()
        .filter(|r| {
            r.height_mse <= 1e-1
                && (r.alpha1 - 0.1).abs() <= 0.05
                && (r.alpha2 - 0.1).abs() <= 0.05
        })
        .count();
    let pass = passes >= REQUIRED_SEED_PASSES;
    let detail = format!(
        "{passes}/4 seeds; height mse {} (<= 1e-1), alpha1 {}, alpha2 {} (0.1 +/- 0.05)",
        range(runs.iter().map(|r| r.height_mse)),
        range(runs.iter().map(|r| r.alpha1)),
        range(runs.iter().map(|r| r.alpha2)),
    );
    assert!(verdict(4, "network reconstruction and coefficient recovery", pass, &detail), "{detail}");
}

#[test]
fn criterion_05_network_extrapolation() {
    // Two legs: tolerance-banded MSE on the dataset window, and the
    // qualitative damped-oscillation shape. The phi1 = 1.0 system's first
    // two pump-flow extrema sit near t = 32 and t = 95, so the decay check
    // only has content on an extended rollout (t <= 200); over the t <= 20
    // window even the ground truth has no extrema.
    let runs = &*NETWORK_RUNS;
    let decays = |amps: &Option<Vec<f64>>| -> bool {
        match amps {
            Some(a) if a.len() >= 2 => a.windows(2).all(|w| w[1] < w[0]),
            _ => false,
        }
    };
    let passes = runs
        .iter()
        .filter(|r| r.extrap_height_mse <= 6e-1 && decays(&r.extended_y0_amplitudes))
        .count();
    let pass = passes >= REQUIRED_SEED_PASSES;
    let amp_counts: Vec<String> = runs
        .iter()
        .map(|r| match &r.extended_y0_amplitudes {
            Some(a) if a.len() >= 2 => format!(
                "{} extrema, {}",
                a.len(),
                if a.windows(2).all(|w| w[1] < w[0]) {
                    "decaying"
                } else {
                    "not decaying"
                }
            ),
            Some(a) => format!("{} extrema", a.len()),
            None => "rollout diverged".into(),
        })
        .collect();
    let detail = format!(
        "{passes}/4 seeds; height mse on t<=20 {} (<= 6e-1); extended-horizon y0 shape per seed: [{}]",
        range(runs.iter().map(|r| r.extrap_height_mse)),
        amp_counts.join("; "),
    );
    assert!(verdict(5, "network extrapolation with damped oscillations", pass, &detail), "{detail}");
}

#[test]
fn criterion_06_noise_robustness() {
    let runs = &*NOISY_RUNS;
    let passes = runs
        .iter()
        .filter(|r| {
            r.extrap_height_mse <= 7e-1
                && r.noise_floor_ratio >= 0.5
                && r.noise_floor_ratio <= 2.0
        })
        .count();
    let pass = passes >= REQUIRED_SEED_PASSES;
    let detail = format!(
        "{passes}/4 seeds; 20 dB extrapolation mse {} (<= 7e-1), train-mse/noise-power ratio {} (in [0.5, 2])",
        range(runs.iter().map(|r| r.extrap_height_mse)),
        range(runs.iter().map(|r| r.noise_floor_ratio)),
    );
    assert!(verdict(6, "20 dB noise robustness", pass, &detail), "{detail}");
}

#[test]
fn criterion_07_structural_conservation() {
    let worst = MANIFOLD_RUNS
        .iter()
        .map(|r| r.conservation)
        .chain(NETWORK_RUNS.iter().map(|r| r.conservation))
        .chain(NOISY_RUNS.iter().map(|r| r.conservation))
        .fold(0.0, f64::max);
    let pass = worst <= 1e-12;
    let detail = format!("max |split conservation violation| over all trained rollouts {worst:.2e} (<= 1e-12)");
    assert!(verdict(7, "structural conservation", pass, &detail), "{detail}");
}

fn experiment_gradcheck(
    loss_of: impl Fn(&mut Tape) -> Result<Value, daestep::autodiff::TapeError>,
    tape: &mut Tape,
) -> f64 {
    gradient_check(tape, loss_of, 1e-6, 1e-8)
        .expect("gradient check")
        .max_rel_err
}

#[test]
fn criterion_08_gradient_correctness() {
    let horizon = 50;

    let m_spec = ManifoldSpec {
        steps: horizon,
        ..Default::default()
    };
    let m_data = simulate_manifold(&m_spec).expect("truth");
    let mut m_tape = Tape::new();
    let m_model = ManifoldModel::init(
        &mut m_tape,
        &ManifoldModelConfig {
            seed: SEEDS[0],
            ..Default::default()
        },
    )
    .expect("init");
    let m_err = experiment_gradcheck(
        |t| rollout_loss(t, &m_model, &m_data, horizon),
        &mut m_tape,
    );

    let n_spec = NetworkSpec {
        steps: horizon,
        ..Default::default()
    };
    let n_data = simulate_network(&n_spec).expect("truth");
    let mut n_tape = Tape::new();
    let n_model = NetworkModel::init(
        &mut n_tape,
        &NetworkModelConfig {
            seed: SEEDS[0],
            ..Default::default()
        },
    )
    .expect("init");
    let n_err = experiment_gradcheck(
        |t| rollout_loss(t, &n_model, &n_data, horizon),
        &mut n_tape,
    );

    let pass = m_err <= 1e-4 && n_err <= 1e-4;
    let detail = format!(
        "50-step losses vs central differences: manifold max rel err {m_err:.2e}, network {n_err:.2e} (<= 1e-4)"
    );
    assert!(verdict(8, "gradient correctness", pass, &detail), "{detail}");
}

fn rollout_loss(
    tape: &mut Tape,
    model: &impl ExperimentModel,
    data: &Trajectory,
    horizon: usize,
) -> Result<Value, daestep::autodiff::TapeError> {
    let record = rollout(
        tape,
        model,
        data.x_row(0),
        data.y_row(0),
        data.u_rows(),
        horizon,
    )
    .unwrap_or_else(|e| panic!("rollout: {e}"));
    Ok(total_loss(
        tape,
        &record,
        data,
        |t, x, y, u| model.constraint(t, x, y, u),
        &LossWeights::default(),
    )
    .unwrap_or_else(|e| panic!("loss: {e}")))
}

#[test]
fn criterion_09_oracle_equivalence() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xACCE97);

    let mg = manifold_algebra_residual(3.0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x1 = rng.random_range(0.05..40.0);
        let u = rng.random_range(0.0..1.0);
        let (y1, y2) = manifold_algebra_oracle(x1, u, 3.0, manifold_area_profile).expect("oracle");
        let sol = newton_solve_algebraic(&mg, &[x1, x1], &[u], &[0.1, 0.1], 1e-13, 50)
            .expect("newton");
        worst = worst.max((sol.y[0] - y1).abs()).max((sol.y[1] - y2).abs());
    }

    let n_spec = NetworkSpec::default();
    let ng = network_algebra_residual(&n_spec);
    for _ in 0..100 {
        let h1 = rng.random_range(0.1..3.0);
        let x = [h1, h1, rng.random_range(0.1..3.0), rng.random_range(0.5..4.0)];
        let oracle = network_algebra_oracle(&x, &n_spec).expect("oracle");
        let sol = newton_solve_algebraic(&ng, &x, &[], &[0.1; 5], 1e-13, 50).expect("newton");
        for (a, b) in sol.y.iter().zip(oracle.iter()) {
            worst = worst.max((a - b).abs());
        }
    }

    // Index-1 regularity at both dataset initial conditions.
    let m_spec = ManifoldSpec::default();
    let (y1, y2) =
        manifold_algebra_oracle(m_spec.x0, 0.5, 3.0, manifold_area_profile).expect("oracle");
    let m_check = check_index1(
        manifold_algebra_residual(3.0),
        &[m_spec.x0, m_spec.x0],
        &[y1, y2],
        &[0.5],
        1e8,
    );
    let n_ic = n_spec.x0;
    let n_y = network_algebra_oracle(&n_ic, &n_spec).expect("oracle");
    let n_check = check_index1(network_algebra_residual(&n_spec), &n_ic, &n_y, &[], 1e8);

    let pass = worst <= 1e-9 && m_check.ok && n_check.ok;
    let detail = format!(
        "newton vs closed forms on 200 random states: max |diff| {worst:.2e} (<= 1e-9); index-1 at ICs: manifold cond {:.2e}, network cond {:.2e} (< 1e8)",
        m_check.condition_number, n_check.condition_number
    );
    assert!(verdict(9, "oracle equivalence and index-1 checks", pass, &detail), "{detail}");
}

#[test]
fn criterion_10_integrator_orders() {
    fn global_error(stepper: Stepper, dt: f64) -> f64 {
        let mut tape = Tape::new();
        let decay = |t: &mut Tape, x: Value, _y: Value, _u: Value| -> Result<Value, IntegrateError> {
            Ok(t.neg(x)?)
        };
        let mut x = tape.constant_vector(&[1.0]);
        let y = tape.constant_vector(&[0.0]);
        let u = tape.constant_vector(&[0.0]);
        for _ in 0..(1.0 / dt).round() as usize {
            x = match stepper {
                Stepper::Euler => euler_step(&mut tape, &decay, x, y, u, dt).expect("step"),
                Stepper::Rk4 => rk4_step(&mut tape, &decay, x, y, u, dt).expect("step"),
            };
        }
        (tape.value(x)[0] - (-1.0f64).exp()).abs()
    }

    let euler_order = (global_error(Stepper::Euler, 0.01) / global_error(Stepper::Euler, 0.005)).log2();
    let rk4_order = (global_error(Stepper::Rk4, 0.1) / global_error(Stepper::Rk4, 0.05)).log2();

    // Non-commuting shear pair vs a monolithic RK4 reference at dt/100.
    fn splitting_error(dt: f64) -> f64 {
        let mut tape = Tape::new();
        let a = |t: &mut Tape, x: Value, _y: Value, _u: Value| -> Result<Value, IntegrateError> {
            let x2 = t.index(x, 1)?;
            let zero = t.constant_scalar(0.0);
            Ok(t.stack(&[x2, zero])?)
        };
        let b = |t: &mut Tape, x: Value, _y: Value, _u: Value| -> Result<Value, IntegrateError> {
            let x1 = t.index(x, 0)?;
            let zero = t.constant_scalar(0.0);
            Ok(t.stack(&[zero, x1])?)
        };
        let both = |t: &mut Tape, x: Value, _y: Value, _u: Value| -> Result<Value, IntegrateError> {
            let x1 = t.index(x, 0)?;
            let x2 = t.index(x, 1)?;
            Ok(t.stack(&[x2, x1])?)
        };
        let y = tape.constant_vector(&[0.0]);
        let u = tape.constant_vector(&[0.0]);
        let mut xs = tape.constant_vector(&[1.0, 0.0]);
        for _ in 0..(1.0 / dt).round() as usize {
            xs = lie_trotter_step(&mut tape, &a, &b, xs, y, u, dt, Stepper::Rk4).expect("split");
        }
        let fine = dt / 100.0;
        let mut xr = tape.constant_vector(&[1.0, 0.0]);
        for _ in 0..(1.0 / fine).round() as usize {
            xr = rk4_step(&mut tape, &both, xr, y, u, fine).expect("ref");
        }
        let s = tape.value(xs).to_vec();
        let r = tape.value(xr).to_vec();
        ((s[0] - r[0]).powi(2) + (s[1] - r[1]).powi(2)).sqrt()
    }
    let lt_order = (splitting_error(0.02) / splitting_error(0.01)).log2();

    let pass = (euler_order - 1.0).abs() <= 0.1
        && (rk4_order - 4.0).abs() <= 0.3
        && (lt_order - 1.0).abs() <= 0.2;
    let detail = format!(
        "empirical orders: euler {euler_order:.3} (1.0 +/- 0.1), rk4 {rk4_order:.3} (4.0 +/- 0.3), lie-trotter splitting {lt_order:.3} (1.0 +/- 0.2)"
    );
    assert!(verdict(10, "integrator convergence orders", pass, &detail), "{detail}");
}

#[test]
fn criterion_11_closed_network_volume() {
    let spec = NetworkSpec::default();
    let traj = simulate_network(&spec).expect("ground truth");
    let v0 = network_total_volume(&spec, &[spec.x0[0], spec.x0[1], spec.x0[2], spec.x0[3]]);
    let mut worst = 0.0f64;
    for k in 0..traj.len() {
        let x = traj.x_row(k);
        let v = network_total_volume(&spec, &[x[0], x[1], x[2], x[3]]);
        worst = worst.max(((v - v0) / v0).abs());
    }
    let pass = worst <= 1e-6;
    let detail = format!("total volume drift over t in [0, 20]: {worst:.2e} relative (<= 1e-6)");
    assert!(verdict(11, "closed-network volume conservation", pass, &detail), "{detail}");
}
