//! Exit-gate acceptance suite: nine property-based criteria covering the
//! physics identities, the transfer protocol, the optimizer, the
//! statistical model, and artifact determinism.
//!
//! Each test prints exactly one verdict line (`criterion N (...): PASS` or
//! `... FAIL`, with the measured numbers); tolerances are pinned in the
//! code.  Run with `--nocapture` to see the lines for passing tests too.

use nalgebra::Matrix4;
use num_complex::Complex64;
use qwelm::experiments::{
    pauli_transfer_experiment, single_line_fit_loss, witness_transfer_experiment, DatasetSpec,
    MonteCarloConfig, PauliExperimentConfig, Split, StateFamily, WitnessExperimentConfig,
};
use qwelm::optics::{
    effective_transfer, JonesVector, MeasurementSettings, OamRegister, OpticalElement,
    TruncationPolicy, TwoLineTransfer, WalkSpec,
};
use qwelm::optimize::{
    coordinate_descent, landscape_scan, GridAxis, LandscapeSpec, LossEvaluator, OptimizerConfig,
};
use qwelm::photon::{
    coherent_line_features, sample_poisson_frequencies, single_line_features,
    single_photon_probabilities, FeatureMode, IntensityNoise,
};
use qwelm::qelm::{bell_witness, pauli_y, BellState};
use qwelm::SimRng;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn verdict(number: u32, name: &str, ok: bool, detail: String) {
    println!(
        "criterion {number} ({name}): {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {number} ({name}) failed: {detail}");
}

fn random_walk_spec(rng: &mut SimRng) -> WalkSpec {
    let n_steps = rng.random_range(1..=3usize);
    let mut elements = Vec::new();
    for _ in 0..n_steps {
        match rng.random_range(0..3u8) {
            0 => elements.push(OpticalElement::HalfWavePlate {
                angle_deg: rng.random_range(0.0..180.0),
            }),
            1 => elements.push(OpticalElement::QuarterWavePlate {
                angle_deg: rng.random_range(0.0..180.0),
            }),
            _ => {}
        }
        elements.push(OpticalElement::QPlate {
            charge: 0.5,
            retardation_rad: rng.random_range(0.0..std::f64::consts::PI),
        });
    }
    WalkSpec {
        truncation: TruncationPolicy::Truncate,
        register: OamRegister::default(),
        elements,
    }
}

fn random_settings(rng: &mut SimRng) -> MeasurementSettings {
    MeasurementSettings::new(rng.random_range(0.0..180.0), rng.random_range(0.0..180.0))
        .expect("finite angles")
}

fn random_jones(rng: &mut SimRng) -> JonesVector {
    loop {
        let mut c = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (h, v) = (c(), c());
        if let Ok(jones) = JonesVector::new(h, v) {
            return jones;
        }
    }
}

/// Least-squares slope of `ys` against `xs`.
fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[test]
fn criterion_1_normalized_coherent_intensities_match_single_photon_probabilities() {
    let start = Instant::now();
    let mut rng = SimRng::seed_from_u64(101);
    let mut max_deviation: f64 = 0.0;
    for _ in 0..1000 {
        let walk = random_walk_spec(&mut rng).build().expect("valid random walk");
        let transfer = effective_transfer(&walk, &random_settings(&mut rng));
        let jones = random_jones(&mut rng);
        let rho = jones.density_matrix();
        for mode in [FeatureMode::Unconditional, FeatureMode::Renormalized] {
            let coherent = coherent_line_features(&transfer, &jones, mode)
                .expect("coherent features of a generic state");
            let quantum = single_line_features(&transfer, &rho, mode)
                .expect("single-photon features of a generic state");
            max_deviation = max_deviation.max((coherent - quantum).abs().max());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_deviation < 1e-12 && elapsed < 5.0;
    verdict(
        1,
        "coherent-classical equivalence",
        ok,
        format!("max deviation {max_deviation:.3e} over 1000 devices in {elapsed:.2} s (bounds 1e-12, 5 s)"),
    );
}

#[test]
fn criterion_2_product_state_coincidences_factorize_into_marginals() {
    let start = Instant::now();
    let mut rng = SimRng::seed_from_u64(202);
    let mut max_deviation: f64 = 0.0;
    for _ in 0..500 {
        let walk1 = random_walk_spec(&mut rng).build().expect("valid random walk");
        let walk2 = random_walk_spec(&mut rng).build().expect("valid random walk");
        let t1 = effective_transfer(&walk1, &random_settings(&mut rng));
        let t2 = effective_transfer(&walk2, &random_settings(&mut rng));
        let j1 = random_jones(&mut rng);
        let j2 = random_jones(&mut rng);
        let rho_joint: Matrix4<Complex64> = j1.density_matrix().kronecker(&j2.density_matrix());

        let pair = TwoLineTransfer::new(t1.clone(), t2.clone());
        let joint = qwelm::photon::coincidence_features(
            &pair,
            &rho_joint,
            FeatureMode::Unconditional,
        )
        .expect("coincidence features");

        let p1 = single_photon_probabilities(&t1, &j1.density_matrix()).expect("marginal 1");
        let p2 = single_photon_probabilities(&t2, &j2.density_matrix()).expect("marginal 2");
        for m in 0..p1.len() {
            for n in 0..p2.len() {
                let deviation = (joint[m * p2.len() + n] - p1[m] * p2[n]).abs();
                max_deviation = max_deviation.max(deviation);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_deviation < 1e-12 && elapsed < 10.0;
    verdict(
        2,
        "product-state factorization",
        ok,
        format!("max deviation {max_deviation:.3e} over 500 devices in {elapsed:.2} s (bounds 1e-12, 10 s)"),
    );
}

#[test]
fn criterion_3_noiseless_pauli_transfer_recovers_all_three_observables() {
    let start = Instant::now();
    let mut cfg = PauliExperimentConfig::exact(
        WalkSpec::reference(),
        MeasurementSettings::new(0.0, 0.0).expect("finite angles"),
        303,
    );
    cfg.curve_sizes = Vec::new();
    assert_eq!(cfg.train.size, 100, "pinned training-set size");
    assert_eq!(cfg.test.size, 100, "pinned test-set size");
    assert_eq!(cfg.observables.len(), 3, "sigma_x, sigma_y, sigma_z");
    let report = pauli_transfer_experiment(&cfg).expect("noiseless run");
    let elapsed = start.elapsed().as_secs_f64();
    let ok = report.test_mse < 1e-10 && elapsed < 5.0;
    verdict(
        3,
        "exact observable recovery",
        ok,
        format!(
            "test MSE {:.3e} on 100 unseen states in {elapsed:.2} s (bounds 1e-10, 5 s)",
            report.test_mse
        ),
    );
}

#[test]
fn criterion_4_witness_transfers_exactly_from_classical_training_data() {
    let start = Instant::now();
    let walk = WalkSpec::reference();
    let settings = MeasurementSettings::new(0.0, 0.0).expect("finite angles");
    let cfg = WitnessExperimentConfig::exact(
        walk.clone(),
        walk,
        settings,
        settings,
        bell_witness(BellState::PsiPlus),
        404,
    );
    assert_eq!(cfg.train.size, 400, "pinned product training set");
    assert_eq!(cfg.test.size, 58, "pinned entangled test set");
    let report = witness_transfer_experiment(&cfg).expect("noiseless run");

    let mut worst_error: f64 = 0.0;
    let mut misclassified = 0usize;
    let mut n_test = 0usize;
    for pair in &report.predictions {
        if pair.split != Split::Test {
            continue;
        }
        n_test += 1;
        worst_error = worst_error.max((pair.true_value - pair.predicted).abs());
        if pair.true_value.abs() > 1e-6 && (pair.true_value < 0.0) != (pair.predicted < 0.0) {
            misclassified += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = n_test == 58 && worst_error < 1e-9 && misclassified == 0 && elapsed < 30.0;
    verdict(
        4,
        "classical-to-quantum witness transfer",
        ok,
        format!(
            "worst per-state error {worst_error:.3e}, {misclassified} decisive misclassifications \
             over {n_test} entangled states in {elapsed:.2} s (bounds 1e-9, 0, 30 s)"
        ),
    );
}

#[test]
fn criterion_5_coordinate_descent_reaches_the_grid_scan_minimum() {
    let start = Instant::now();
    let walk = WalkSpec::reference();
    let minibatch = DatasetSpec::new(StateFamily::HaarQubit, 15, 505);
    let observables = [pauli_y()];
    let build_loss =
        || single_line_fit_loss(&walk, &minibatch, &observables, FeatureMode::Renormalized, None, 0);

    let axis = GridAxis {
        start_deg: 0.0,
        step_deg: 9.47,
        count: 20,
    };
    let grid = landscape_scan(
        |_seed| build_loss(),
        &LandscapeSpec {
            grid_step_deg: 0.1,
            resamples: 1,
            axis1: axis,
            axis2: axis,
        },
        0,
    )
    .expect("grid scan");
    let grid_min = grid
        .cells
        .iter()
        .filter_map(|c| c.loss)
        .fold(f64::INFINITY, f64::min);
    assert!(grid_min.is_finite(), "grid scan produced no losses");

    // The loss surface is multimodal (several basins within ~1.2x of the
    // global minimum), which is exactly what the random restarts are for:
    // the descent procedure's final loss is the best over 5 starts, and the
    // evaluation budget applies to each run individually.  A 0.5-degree
    // step resolution keeps every run well inside that budget without
    // hurting the reached minimum.
    let optimizer = OptimizerConfig {
        angle_grid_deg: 0.5,
        ..OptimizerConfig::default()
    };
    let mut rng = SimRng::seed_from_u64(4242);
    let mut best_loss = f64::INFINITY;
    let mut worst_evaluations = 0usize;
    for _ in 0..5 {
        let init = [rng.random_range(0.0..180.0), rng.random_range(0.0..180.0)];
        let mut loss = build_loss().expect("loss evaluator");
        let trace = coordinate_descent(&mut loss, &init, &optimizer).expect("descent");
        assert!(!trace.failed, "descent aborted from {init:?}");
        best_loss = best_loss.min(trace.best_loss);
        worst_evaluations = worst_evaluations.max(trace.n_evaluations);
    }
    let ratio = best_loss / grid_min;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = ratio <= 1.05 && worst_evaluations <= 200 && elapsed < 120.0;
    verdict(
        5,
        "descent matches grid minimum",
        ok,
        format!(
            "best-of-5 final/grid-min ratio {ratio:.4}, worst per-run evaluation count \
             {worst_evaluations} (bounds 1.05, 200) in {elapsed:.2} s"
        ),
    );
}

#[test]
fn criterion_6_central_differences_converge_at_second_order() {
    let start = Instant::now();
    let walk = WalkSpec::reference();
    let minibatch = DatasetSpec::new(StateFamily::HaarQubit, 15, 606);
    let observables = [pauli_y()];
    let mut loss = single_line_fit_loss(
        &walk,
        &minibatch,
        &observables,
        FeatureMode::Renormalized,
        None,
        0,
    )
    .expect("loss evaluator");
    // A generic operating point, away from the symmetry axes of the loss.
    let point = [37.3, 112.9];

    let mut worst_ratios: Vec<f64> = Vec::new();
    for coordinate in 0..2 {
        let mut central = |eps_deg: f64| -> f64 {
            let mut plus = point;
            let mut minus = point;
            plus[coordinate] += eps_deg;
            minus[coordinate] -= eps_deg;
            let high = loss.evaluate(&plus).expect("loss at displaced point");
            let low = loss.evaluate(&minus).expect("loss at displaced point");
            (high - low) / (2.0 * eps_deg)
        };
        // Richardson extrapolation from the two finest stencils kills the
        // leading eps^2 term, giving a reference accurate to O(eps^4).
        let reference = (4.0 * central(0.125) - central(0.25)) / 3.0;
        let errors: Vec<f64> = [2.0, 1.0, 0.5]
            .iter()
            .map(|&eps| (central(eps) - reference).abs())
            .collect();
        worst_ratios.push(errors[0] / errors[1]);
        worst_ratios.push(errors[1] / errors[2]);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst_ratios.iter().all(|r| (3.5..=4.5).contains(r)) && elapsed < 30.0;
    verdict(
        6,
        "finite-difference second-order convergence",
        ok,
        format!(
            "successive halving error ratios {:?} (each must lie in [3.5, 4.5]) in {elapsed:.2} s",
            worst_ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_7_frequency_errors_and_mse_spreads_scale_as_inverse_sqrt_counts() {
    let start = Instant::now();
    let shot_levels = [300.0_f64, 3000.0, 30000.0];

    // Part one: Poisson-sampled outcome frequencies drift from the exact
    // distribution with a max-norm error shrinking as 1/sqrt(N).
    let walk = WalkSpec::reference().build().expect("reference walk");
    let transfer =
        effective_transfer(&walk, &MeasurementSettings::new(0.0, 0.0).expect("finite angles"));
    let rho = JonesVector::diagonal().density_matrix();
    let exact = single_line_features(&transfer, &rho, FeatureMode::Renormalized)
        .expect("exact renormalized features");
    let mut rng = SimRng::seed_from_u64(707);
    let mut log_n = Vec::new();
    let mut log_err = Vec::new();
    for &shots in &shot_levels {
        let mut total_error = 0.0;
        for _ in 0..100 {
            let sampled =
                sample_poisson_frequencies(&exact, shots, &mut rng).expect("sampled frequencies");
            total_error += (&sampled.frequencies - &exact).abs().max();
        }
        log_n.push(shots.ln());
        log_err.push((total_error / 100.0).ln());
    }
    let frequency_slope = fitted_slope(&log_n, &log_err);

    // Part two: the Monte-Carlo spread of the test MSE under count
    // resampling.  A deterministic readout residual (strong ridge) puts the
    // pipeline in the bias-dominated regime where the spread follows the
    // 1/sqrt(N) cross term.
    let mut log_sigma = Vec::new();
    for &shots in &shot_levels {
        let mut cfg = PauliExperimentConfig::exact(
            WalkSpec::reference(),
            MeasurementSettings::new(0.0, 0.0).expect("finite angles"),
            21,
        );
        cfg.ridge = Some(1e-1);
        cfg.test_shots = Some(shots);
        cfg.curve_sizes = vec![100];
        cfg.monte_carlo = Some(MonteCarloConfig {
            resamples: 100,
            seed: 9,
        });
        let report = pauli_transfer_experiment(&cfg).expect("sampled run");
        log_sigma.push(report.learning_curve[0].sigma.expect("resampled spread").ln());
    }
    let spread_slope = fitted_slope(&log_n, &log_sigma);

    let elapsed = start.elapsed().as_secs_f64();
    let ok = (frequency_slope + 0.5).abs() < 0.15
        && (spread_slope + 0.5).abs() < 0.15
        && elapsed < 120.0;
    verdict(
        7,
        "1/sqrt(N) statistical scaling",
        ok,
        format!(
            "log-log slopes: frequency error {frequency_slope:.3}, MSE spread {spread_slope:.3} \
             (both must be -0.5 ± 0.15) in {elapsed:.2} s"
        ),
    );
}

#[test]
fn criterion_8_identical_configs_reproduce_bundles_byte_for_byte() {
    let start = Instant::now();
    // The resampling task exercises every nondeterminism hazard at once:
    // sampled counts, parallel Monte-Carlo pipelines, and file emission.
    let config = qwelm::config::parse_config_str(
        "task = \"resample\"\nseed = 808\n\n[datasets.train]\nsize = 50\n\n\
         [datasets.test]\nsize = 10\n\n[noise]\ncoincidence_shots = 300.0\n\n\
         [monte_carlo]\nresamples = 20\n",
    )
    .expect("valid config");
    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    let bundle_a = qwelm::report::run(&config, dir_a.path()).expect("first run");
    let bundle_b = qwelm::report::run(&config, dir_b.path()).expect("second run");

    assert_eq!(bundle_a.files.len(), bundle_b.files.len());
    let mut n_identical = 0usize;
    let mut mismatched: Vec<String> = Vec::new();
    for (file_a, file_b) in bundle_a.files.iter().zip(&bundle_b.files) {
        let name = file_a
            .file_name()
            .expect("bundle file name")
            .to_string_lossy()
            .into_owned();
        if std::fs::read(file_a).expect("read first bundle")
            == std::fs::read(file_b).expect("read second bundle")
        {
            n_identical += 1;
        } else {
            mismatched.push(name);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = mismatched.is_empty();
    verdict(
        8,
        "byte-identical reruns",
        ok,
        format!(
            "{n_identical}/{} files identical in {elapsed:.2} s{}",
            bundle_a.files.len(),
            if mismatched.is_empty() {
                String::new()
            } else {
                format!(", mismatched: {mismatched:?}")
            }
        ),
    );
}

#[test]
fn criterion_9_noisy_learning_curve_is_non_increasing_within_error_bands() {
    let start = Instant::now();
    let mut cfg = PauliExperimentConfig::exact(
        WalkSpec::reference(),
        MeasurementSettings::new(0.0, 0.0).expect("finite angles"),
        909,
    );
    cfg.intensity_noise = Some(IntensityNoise::default());
    cfg.test_shots = Some(3000.0);
    cfg.curve_sizes = vec![10, 20, 40, 70, 100];
    cfg.monte_carlo = Some(MonteCarloConfig {
        resamples: 100,
        seed: 11,
    });
    let report = pauli_transfer_experiment(&cfg).expect("noisy run");
    let curve = &report.learning_curve;
    assert_eq!(curve.len(), 5);

    // Within 1-sigma bands means the bands admit a non-increasing path:
    // each point's lower edge must not rise above the previous upper edge.
    let mut violations: Vec<String> = Vec::new();
    for window in curve.windows(2) {
        let (prev, next) = (&window[0], &window[1]);
        let prev_sigma = prev.sigma.expect("resampled spread");
        let next_sigma = next.sigma.expect("resampled spread");
        if next.test_mse - next_sigma > prev.test_mse + prev_sigma {
            violations.push(format!(
                "n_train {} -> {}: {:.3e} - {:.3e} rises above {:.3e} + {:.3e}",
                prev.n_train, next.n_train, next.test_mse, next_sigma, prev.test_mse, prev_sigma
            ));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = violations.is_empty() && elapsed < 300.0;
    let summary: Vec<String> = curve
        .iter()
        .map(|p| format!("{}:{:.2e}±{:.0e}", p.n_train, p.test_mse, p.sigma.unwrap_or(0.0)))
        .collect();
    verdict(
        9,
        "noisy curve non-increasing within 1 sigma",
        ok,
        format!(
            "curve [{}] in {elapsed:.2} s{}",
            summary.join(", "),
            if violations.is_empty() {
                String::new()
            } else {
                format!("; violations: {violations:?}")
            }
        ),
    );
}
