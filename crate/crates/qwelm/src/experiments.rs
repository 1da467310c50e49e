//! End-to-end protocols: dataset generation, classical training with
//! quantum testing, learning curves, witness classification, and
//! Monte-Carlo uncertainty.
//!
//! The central workflow is transfer learning: the linear readout is trained
//! entirely on *classical* data — coherent probe beams whose mode-resolved
//! intensities are cheap to measure — and then applied unchanged to quantum
//! statistics (single-photon or coincidence counts) from the same device.
//! Because both feature sources are linear in the same input density matrix,
//! a readout that is exact on classical features is exact on quantum ones;
//! every experiment here exercises some facet of that correspondence under
//! configurable noise.

use crate::error::{QelmError, Result};
use crate::optics::{
    effective_transfer, two_line_transfer, JonesVector, MeasurementSettings, OpticalElement,
    WalkOperator, WalkSpec,
};
use crate::photon::{
    apply_intensity_noise, coherent_intensities, coincidence_probabilities, flatten_row_major,
    renormalized, sample_poisson_frequencies, single_photon_probabilities, FeatureMode,
    IntensityNoise,
};
use crate::qelm::{
    as_qubit, as_two_qubit, build_targets, dynamic2, dynamic4, kron2, mean_squared_error,
    Observable, TrainingSummary, DEFAULT_SVD_CUTOFF,
};
use crate::qelm::LinearReadout;
use crate::optimize::LossEvaluator;
use crate::SimRng;
use nalgebra::{DMatrix, DVector, Matrix2, Vector4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Train/test sizes of the main witness classification run.
pub const WITNESS_DATASET: (usize, usize) = (400, 58);

/// Train/test sizes of the changed-conditions rerun.
pub const ROBUSTNESS_DATASET: (usize, usize) = (400, 56);

/// Seed-derivation constant (golden-ratio increment) for "fresh but
/// reproducible" datasets.
pub const SEED_DERIVE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Which ensemble a dataset is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateFamily {
    /// Haar-random pure polarization qubits.
    HaarQubit,
    /// Independent Haar-random single-qubit rotations applied to |HH⟩:
    /// random pure *product* two-qubit states, each photon still classically
    /// describable.
    RotatedProduct,
    /// Independent Haar-random single-qubit rotations applied to the singlet
    /// |Ψ⁻⟩ = (|HV⟩ − |VH⟩)/√2: random *maximally entangled* pure states.
    RotatedSinglet,
}

/// A reproducible random dataset request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Ensemble to draw from.
    pub family: StateFamily,
    /// Number of states.
    pub size: usize,
    /// RNG seed; equal specs generate identical states.
    pub seed: u64,
}

impl DatasetSpec {
    /// Convenience constructor.
    pub fn new(family: StateFamily, size: usize, seed: u64) -> Self {
        DatasetSpec { family, size, seed }
    }

    /// Checks the dataset domain (used by generation and config validation).
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(QelmError::invalid("dataset size", "must be at least 1"));
        }
        Ok(())
    }
}

/// One generated input state, in the representation its family makes
/// natural.
#[derive(Debug, Clone, PartialEq)]
pub enum StateSample {
    /// A single polarization qubit.
    Qubit(JonesVector),
    /// A product pair, one Jones vector per measurement line.
    ProductPair {
        /// Polarization entering line 1.
        first: JonesVector,
        /// Polarization entering line 2.
        second: JonesVector,
    },
    /// A pure two-qubit state by its amplitudes in (HH, HV, VH, VV) order.
    TwoQubit(Vector4<Complex64>),
}

impl StateSample {
    /// Density matrix of the sample (2×2 for a qubit, 4×4 otherwise).
    pub fn density(&self) -> DMatrix<Complex64> {
        match self {
            StateSample::Qubit(j) => dynamic2(&j.density_matrix()),
            StateSample::ProductPair { first, second } => {
                dynamic4(&kron2(&first.density_matrix(), &second.density_matrix()))
            }
            StateSample::TwoQubit(psi) => {
                let rho = psi * psi.adjoint();
                dynamic4(&rho.into())
            }
        }
    }
}

/// Haar-random SU(2) matrix (uniform unit quaternion).
fn haar_unitary2(rng: &mut SimRng) -> Matrix2<Complex64> {
    loop {
        let x: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = (x.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if norm < 1e-6 {
            continue;
        }
        let (a, b, c, d) = (x[0] / norm, x[1] / norm, x[2] / norm, x[3] / norm);
        let alpha = Complex64::new(a, b);
        let beta = Complex64::new(c, d);
        return Matrix2::new(alpha, beta, -beta.conj(), alpha.conj());
    }
}

/// Haar-random pure qubit, as the image of |H⟩ under a Haar rotation.
fn haar_qubit(rng: &mut SimRng) -> JonesVector {
    let u = haar_unitary2(rng);
    JonesVector::new(u[(0, 0)], u[(1, 0)]).expect("columns of a unitary are normalized")
}

/// Amplitudes of the singlet (|HV⟩ − |VH⟩)/√2 in (HH, HV, VH, VV) order.
fn singlet_amplitudes() -> Vector4<Complex64> {
    let s = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    Vector4::new(Complex64::new(0.0, 0.0), s, -s, Complex64::new(0.0, 0.0))
}

/// Draws the requested dataset.  Generation is seed-deterministic: equal
/// specs yield identical state lists.
pub fn generate_states(spec: &DatasetSpec) -> Result<Vec<StateSample>> {
    spec.validate()?;
    let mut rng = SimRng::seed_from_u64(spec.seed);
    let mut states = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let sample = match spec.family {
            StateFamily::HaarQubit => StateSample::Qubit(haar_qubit(&mut rng)),
            StateFamily::RotatedProduct => StateSample::ProductPair {
                first: haar_qubit(&mut rng),
                second: haar_qubit(&mut rng),
            },
            StateFamily::RotatedSinglet => {
                let ua = haar_unitary2(&mut rng);
                let ub = haar_unitary2(&mut rng);
                StateSample::TwoQubit(kron2(&ua, &ub) * singlet_amplitudes())
            }
        };
        states.push(sample);
    }
    Ok(states)
}

/// One point of a learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningCurvePoint {
    /// Training examples used for this fit.
    pub n_train: usize,
    /// Test mean squared error of that fit.
    pub test_mse: f64,
    /// One standard deviation of the test MSE under Poisson count
    /// resampling, when requested and meaningful.
    pub sigma: Option<f64>,
}

/// Which dataset a prediction pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// The state was part of the training set.
    Train,
    /// The state was held out for testing.
    Test,
}

impl Split {
    /// Lower-case name, as used in scatter-plot data files.
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One predicted-vs-true pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPair {
    /// Observable label.
    pub observable: String,
    /// Exact expectation value on the state.
    pub true_value: f64,
    /// Readout prediction from the measured features.
    pub predicted: f64,
    /// Whether the state was seen during training.
    pub split: Split,
}

/// Outcome of one full experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Mean squared error of the final readout on its own training set.
    pub train_mse: f64,
    /// Mean squared error on the test set.
    pub test_mse: f64,
    /// Test MSE as a function of training-set size (strictly increasing
    /// sizes; empty when no curve was requested).
    pub learning_curve: Vec<LearningCurvePoint>,
    /// Predicted-vs-true pairs for every (observable, state), training
    /// states first, with the final readout applied to both splits.
    pub predictions: Vec<PredictionPair>,
    /// Entanglement classification tally, rows = truth, columns =
    /// prediction, order (entangled, separable); entries sum to the
    /// test-set size.  `None` for regression-only experiments.
    pub confusion: Option<[[u64; 2]; 2]>,
    /// Metadata of the final readout (rank, degeneracy flag, feature mode,
    /// device fingerprint).
    pub training: TrainingSummary,
}

/// Monte-Carlo resampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Number of resampled datasets.
    pub resamples: usize,
    /// Base seed; resample `i` uses `seed ⊕ i`.
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            resamples: 100,
            seed: 0,
        }
    }
}

impl MonteCarloConfig {
    /// Checks that the spread is estimated from at least two resamples.
    pub fn validate(&self) -> Result<()> {
        if self.resamples < 2 {
            return Err(QelmError::invalid(
                "resamples",
                "at least 2 are needed for a spread",
            ));
        }
        Ok(())
    }
}

/// Redraws each count from a Poisson distribution whose mean is the
/// recorded count — the standard bootstrap for counting experiments.
pub fn resample_counts(counts: &[u64], rng: &mut SimRng) -> Vec<u64> {
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0
            } else {
                let dist = Poisson::new(n as f64).expect("positive mean");
                dist.sample(rng) as u64
            }
        })
        .collect()
}

/// Converts raw counts into a feature vector: absolute rates `counts /
/// mean_total` in unconditional mode, relative frequencies `counts / Σcounts`
/// in renormalized mode.
fn counts_to_features(counts: &[u64], mean_total: f64, mode: FeatureMode) -> Result<DVector<f64>> {
    match mode {
        FeatureMode::Unconditional => Ok(DVector::from_iterator(
            counts.len(),
            counts.iter().map(|&n| n as f64 / mean_total),
        )),
        FeatureMode::Renormalized => {
            let total: u64 = counts.iter().sum();
            if total == 0 {
                return Err(QelmError::DegenerateInput(
                    "no events recorded; conditional frequencies are undefined".into(),
                ));
            }
            Ok(DVector::from_iterator(
                counts.len(),
                counts.iter().map(|&n| n as f64 / total as f64),
            ))
        }
    }
}

fn finish(raw: DVector<f64>, mode: FeatureMode) -> Result<DVector<f64>> {
    match mode {
        FeatureMode::Unconditional => Ok(raw),
        FeatureMode::Renormalized => renormalized(&raw),
    }
}

/// Classical single-line feature acquisition: coherent intensities, optional
/// detector noise, then the feature-mode map.
fn classical_line_features(
    transfer: &crate::optics::TransferMatrix,
    pol: &JonesVector,
    noise: Option<&IntensityNoise>,
    rng: &mut SimRng,
    mode: FeatureMode,
) -> Result<DVector<f64>> {
    let mut raw = coherent_intensities(transfer, pol, 1.0)?;
    if let Some(noise) = noise {
        raw = apply_intensity_noise(&raw, noise, rng)?;
    }
    finish(raw, mode)
}

/// SHA-256 fingerprint of a device configuration (walk specs plus
/// measurement settings), for tying trained readouts to the reservoir they
/// were trained on.
pub fn reservoir_fingerprint(
    walks: &[&WalkSpec],
    settings: &[&MeasurementSettings],
) -> String {
    let blob = serde_json::json!({
        "walks": walks,
        "settings": settings,
    });
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&blob).expect("serializable"));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Configuration of the single-line observable-regression experiment.
#[derive(Debug, Clone)]
pub struct PauliExperimentConfig {
    /// The reservoir walk.
    pub walk: WalkSpec,
    /// Measurement-projection settings.
    pub settings: MeasurementSettings,
    /// Training dataset (classical probes); family must be single-qubit.
    pub train: DatasetSpec,
    /// Test dataset (quantum probes); family must be single-qubit.
    pub test: DatasetSpec,
    /// Observables to regress.
    pub observables: Vec<Observable>,
    /// How raw statistics become features.
    pub feature_mode: FeatureMode,
    /// Detector noise on the classical training intensities.
    pub intensity_noise: Option<IntensityNoise>,
    /// Mean total photon counts per test state; `None` = exact
    /// probabilities.
    pub test_shots: Option<f64>,
    /// Learning-curve training sizes (strictly increasing; empty = no
    /// curve).
    pub curve_sizes: Vec<usize>,
    /// Seed for all noise draws in this run.
    pub noise_seed: u64,
    /// Per-point Poisson resampling for curve error bars.
    pub monte_carlo: Option<MonteCarloConfig>,
    /// Relative SVD cutoff of the readout regression.
    pub svd_cutoff: f64,
    /// Optional ridge regularization strength.
    pub ridge: Option<f64>,
}

impl PauliExperimentConfig {
    /// Noiseless defaults on a given device: Haar datasets, all three Pauli
    /// observables, curve sizes 5, 10, …, 100.
    pub fn exact(walk: WalkSpec, settings: MeasurementSettings, seed: u64) -> Self {
        PauliExperimentConfig {
            walk,
            settings,
            train: DatasetSpec::new(StateFamily::HaarQubit, 100, seed),
            test: DatasetSpec::new(StateFamily::HaarQubit, 100, seed ^ SEED_DERIVE),
            observables: crate::qelm::pauli_family(),
            feature_mode: FeatureMode::Unconditional,
            intensity_noise: None,
            test_shots: None,
            curve_sizes: default_curve_sizes(),
            noise_seed: seed.wrapping_add(1),
            monte_carlo: None,
            svd_cutoff: DEFAULT_SVD_CUTOFF,
            ridge: None,
        }
    }
}

/// Learning-curve sizes 5, 10, …, 100.
pub fn default_curve_sizes() -> Vec<usize> {
    (1..=20).map(|k| 5 * k).collect()
}

fn require_qubit_family(spec: &DatasetSpec, context: &'static str) -> Result<()> {
    if spec.family != StateFamily::HaarQubit {
        return Err(QelmError::invalid(
            context,
            "single-line experiments need single-qubit datasets",
        ));
    }
    Ok(())
}

fn check_curve_sizes(sizes: &[usize], n_train: usize) -> Result<()> {
    for w in sizes.windows(2) {
        if w[1] <= w[0] {
            return Err(QelmError::invalid(
                "curve sizes",
                "must be strictly increasing",
            ));
        }
    }
    if let Some(&first) = sizes.first() {
        if first == 0 {
            return Err(QelmError::invalid("curve sizes", "must be at least 1"));
        }
    }
    if let Some(&last) = sizes.last() {
        if last > n_train {
            return Err(QelmError::invalid(
                "curve sizes",
                format!("largest size {last} exceeds the training set ({n_train})"),
            ));
        }
    }
    Ok(())
}

/// Trains on classical intensities, tests on single-photon statistics, and
/// reports predictions plus a learning curve.
///
/// Training features follow the classical path (coherent probe, optional
/// intensity noise); test features follow the quantum path (exact
/// probabilities, or Poisson counts when `test_shots` is set).  For each
/// requested curve size the readout is refitted on the first `n` training
/// columns and evaluated on the same fixed test measurements, so curve
/// points differ only in training data.  Overlays comparing two settings
/// are produced by running this twice with different `settings`.
pub fn pauli_transfer_experiment(cfg: &PauliExperimentConfig) -> Result<ExperimentReport> {
    require_qubit_family(&cfg.train, "training dataset")?;
    require_qubit_family(&cfg.test, "test dataset")?;
    check_curve_sizes(&cfg.curve_sizes, cfg.train.size)?;
    if cfg.observables.is_empty() {
        return Err(QelmError::invalid("observables", "need at least one"));
    }
    let walk = cfg.walk.build()?;
    let transfer = effective_transfer(&walk, &cfg.settings);
    let fingerprint = reservoir_fingerprint(&[&cfg.walk], &[&cfg.settings]);
    let mut rng = SimRng::seed_from_u64(cfg.noise_seed);

    // Classical training features.
    let train_states = generate_states(&cfg.train)?;
    let train_densities: Vec<DMatrix<Complex64>> =
        train_states.iter().map(|s| s.density()).collect();
    let mut train_features = DMatrix::zeros(transfer.n_modes(), cfg.train.size);
    for (i, sample) in train_states.iter().enumerate() {
        let StateSample::Qubit(jones) = sample else {
            unreachable!("family checked above")
        };
        let f = classical_line_features(
            &transfer,
            jones,
            cfg.intensity_noise.as_ref(),
            &mut rng,
            cfg.feature_mode,
        )?;
        train_features.set_column(i, &f);
    }
    let train_targets = build_targets(&cfg.observables, &train_densities)?;

    // Quantum test features; counts are kept for Poisson resampling.
    let test_states = generate_states(&cfg.test)?;
    let test_densities: Vec<DMatrix<Complex64>> = test_states.iter().map(|s| s.density()).collect();
    let mut test_features = DMatrix::zeros(transfer.n_modes(), cfg.test.size);
    let mut test_counts: Vec<Vec<u64>> = Vec::new();
    for (i, rho) in test_densities.iter().enumerate() {
        let p = single_photon_probabilities(&transfer, &as_qubit(rho)?)?;
        let f = match cfg.test_shots {
            None => finish(p, cfg.feature_mode)?,
            Some(shots) => {
                let sampled = sample_poisson_frequencies(&p, shots, &mut rng)?;
                let f = counts_to_features(&sampled.counts, shots, cfg.feature_mode)?;
                test_counts.push(sampled.counts);
                f
            }
        };
        test_features.set_column(i, &f);
    }
    let test_targets = build_targets(&cfg.observables, &test_densities)?;

    // Final readout on the full training set.
    let readout = LinearReadout::train(&train_features, &train_targets, cfg.svd_cutoff, cfg.ridge)?
        .with_reservoir_hash(fingerprint);
    let train_predictions = readout.predict_batch(&train_features)?;
    let train_mse = mean_squared_error(&train_predictions, &train_targets)?;
    let test_predictions = readout.predict_batch(&test_features)?;
    let test_mse = mean_squared_error(&test_predictions, &test_targets)?;

    let mut predictions =
        Vec::with_capacity(cfg.observables.len() * (cfg.train.size + cfg.test.size));
    for (j, obs) in cfg.observables.iter().enumerate() {
        for i in 0..cfg.train.size {
            predictions.push(PredictionPair {
                observable: obs.label().to_string(),
                true_value: train_targets[(j, i)],
                predicted: train_predictions[(j, i)],
                split: Split::Train,
            });
        }
        for i in 0..cfg.test.size {
            predictions.push(PredictionPair {
                observable: obs.label().to_string(),
                true_value: test_targets[(j, i)],
                predicted: test_predictions[(j, i)],
                split: Split::Test,
            });
        }
    }

    // Learning curve: refit on prefixes, evaluate on the same measurements.
    let mut learning_curve = Vec::with_capacity(cfg.curve_sizes.len());
    for (point_idx, &n) in cfg.curve_sizes.iter().enumerate() {
        let sub_features = train_features.columns(0, n).into_owned();
        let sub_targets = train_targets.columns(0, n).into_owned();
        let sub_readout =
            LinearReadout::train(&sub_features, &sub_targets, cfg.svd_cutoff, cfg.ridge)?;
        let point_mse =
            mean_squared_error(&sub_readout.predict_batch(&test_features)?, &test_targets)?;
        let sigma = match (&cfg.monte_carlo, cfg.test_shots) {
            (Some(mc), Some(shots)) => {
                mc.validate()?;
                let mut mc_rng = SimRng::seed_from_u64(mc.seed ^ point_idx as u64);
                let mut mses = Vec::with_capacity(mc.resamples);
                for _ in 0..mc.resamples {
                    let mut resampled = DMatrix::zeros(transfer.n_modes(), cfg.test.size);
                    for (i, counts) in test_counts.iter().enumerate() {
                        let redrawn = resample_counts(counts, &mut mc_rng);
                        resampled
                            .set_column(i, &counts_to_features(&redrawn, shots, cfg.feature_mode)?);
                    }
                    mses.push(mean_squared_error(
                        &sub_readout.predict_batch(&resampled)?,
                        &test_targets,
                    )?);
                }
                let mean = mses.iter().sum::<f64>() / mses.len() as f64;
                let var = mses.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
                    / (mses.len() - 1) as f64;
                Some(var.sqrt())
            }
            _ => None,
        };
        learning_curve.push(LearningCurvePoint {
            n_train: n,
            test_mse: point_mse,
            sigma,
        });
    }

    Ok(ExperimentReport {
        train_mse,
        test_mse,
        learning_curve,
        predictions,
        confusion: None,
        training: readout.summary().clone(),
    })
}

/// Configuration of the two-line entanglement-witness experiment.
#[derive(Debug, Clone)]
pub struct WitnessExperimentConfig {
    /// Walk of measurement line 1.
    pub walk1: WalkSpec,
    /// Walk of measurement line 2.
    pub walk2: WalkSpec,
    /// Projection settings of line 1.
    pub settings1: MeasurementSettings,
    /// Projection settings of line 2.
    pub settings2: MeasurementSettings,
    /// Training dataset; family must be `RotatedProduct`.
    pub train: DatasetSpec,
    /// Test dataset; family must be `RotatedSinglet`.
    pub test: DatasetSpec,
    /// The witness observable (4×4) whose sign certifies entanglement.
    pub witness: Observable,
    /// How raw statistics become features.
    pub feature_mode: FeatureMode,
    /// Detector noise on the classical training intensities (applied per
    /// line).
    pub intensity_noise: Option<IntensityNoise>,
    /// Mean total coincidence counts per test state; `None` = exact.
    pub coincidence_shots: Option<f64>,
    /// Seed for all noise draws in this run.
    pub noise_seed: u64,
    /// Relative SVD cutoff of the readout regression.
    pub svd_cutoff: f64,
    /// Optional ridge regularization strength.
    pub ridge: Option<f64>,
}

impl WitnessExperimentConfig {
    /// Noiseless defaults on a pair of devices: 400 product training states
    /// and 58 entangled test states.
    pub fn exact(
        walk1: WalkSpec,
        walk2: WalkSpec,
        settings1: MeasurementSettings,
        settings2: MeasurementSettings,
        witness: Observable,
        seed: u64,
    ) -> Self {
        WitnessExperimentConfig {
            walk1,
            walk2,
            settings1,
            settings2,
            train: DatasetSpec::new(StateFamily::RotatedProduct, WITNESS_DATASET.0, seed),
            test: DatasetSpec::new(StateFamily::RotatedSinglet, WITNESS_DATASET.1, seed ^ SEED_DERIVE),
            witness,
            feature_mode: FeatureMode::Unconditional,
            intensity_noise: None,
            coincidence_shots: None,
            noise_seed: seed.wrapping_add(1),
            svd_cutoff: DEFAULT_SVD_CUTOFF,
            ridge: None,
        }
    }
}

/// Everything a witness run produces beyond its public report: the pieces
/// needed to redraw the test counts and re-apply the trained readout.
struct WitnessRun {
    report: ExperimentReport,
    readout: LinearReadout,
    test_targets: DMatrix<f64>,
    /// Raw coincidence counts per test state; empty when the run was exact.
    test_counts: Vec<Vec<u64>>,
}

fn witness_run(cfg: &WitnessExperimentConfig) -> Result<WitnessRun> {
    if cfg.train.family != StateFamily::RotatedProduct {
        return Err(QelmError::invalid(
            "training dataset",
            "witness training needs product-pair states",
        ));
    }
    if cfg.test.family != StateFamily::RotatedSinglet {
        return Err(QelmError::invalid(
            "test dataset",
            "witness testing needs entangled states",
        ));
    }
    if cfg.witness.dim() != 4 {
        return Err(QelmError::invalid(
            "witness",
            "must act on two polarization qubits",
        ));
    }
    let walk1 = cfg.walk1.build()?;
    let walk2 = cfg.walk2.build()?;
    let pair = two_line_transfer(&walk1, &cfg.settings1, &walk2, &cfg.settings2);
    let fingerprint = reservoir_fingerprint(
        &[&cfg.walk1, &cfg.walk2],
        &[&cfg.settings1, &cfg.settings2],
    );
    let mut rng = SimRng::seed_from_u64(cfg.noise_seed);
    let observables = std::slice::from_ref(&cfg.witness);
    let n_features = pair.line1().n_modes() * pair.line2().n_modes();

    // Classical training features: per-line intensities, outer product.
    let train_states = generate_states(&cfg.train)?;
    let train_densities: Vec<DMatrix<Complex64>> =
        train_states.iter().map(|s| s.density()).collect();
    let mut train_features = DMatrix::zeros(n_features, cfg.train.size);
    for (i, sample) in train_states.iter().enumerate() {
        let StateSample::ProductPair { first, second } = sample else {
            unreachable!("family checked above")
        };
        let f1 = classical_line_features(
            pair.line1(),
            first,
            cfg.intensity_noise.as_ref(),
            &mut rng,
            cfg.feature_mode,
        )?;
        let f2 = classical_line_features(
            pair.line2(),
            second,
            cfg.intensity_noise.as_ref(),
            &mut rng,
            cfg.feature_mode,
        )?;
        let mut joint = DVector::zeros(n_features);
        for m in 0..f1.len() {
            for n in 0..f2.len() {
                joint[m * f2.len() + n] = f1[m] * f2[n];
            }
        }
        train_features.set_column(i, &joint);
    }
    let train_targets = build_targets(observables, &train_densities)?;

    // Quantum test features: coincidence statistics of entangled states.
    let test_states = generate_states(&cfg.test)?;
    let test_densities: Vec<DMatrix<Complex64>> = test_states.iter().map(|s| s.density()).collect();
    let mut test_features = DMatrix::zeros(n_features, cfg.test.size);
    let mut test_counts: Vec<Vec<u64>> = Vec::new();
    for (i, rho) in test_densities.iter().enumerate() {
        let p = flatten_row_major(&coincidence_probabilities(&pair, &as_two_qubit(rho)?)?);
        let f = match cfg.coincidence_shots {
            None => finish(p, cfg.feature_mode)?,
            Some(shots) => {
                let sampled = sample_poisson_frequencies(&p, shots, &mut rng)?;
                let f = counts_to_features(&sampled.counts, shots, cfg.feature_mode)?;
                test_counts.push(sampled.counts);
                f
            }
        };
        test_features.set_column(i, &f);
    }
    let test_targets = build_targets(observables, &test_densities)?;

    let readout = LinearReadout::train(&train_features, &train_targets, cfg.svd_cutoff, cfg.ridge)?
        .with_reservoir_hash(fingerprint);
    let train_predictions = readout.predict_batch(&train_features)?;
    let train_mse = mean_squared_error(&train_predictions, &train_targets)?;
    let test_predictions = readout.predict_batch(&test_features)?;
    let test_mse = mean_squared_error(&test_predictions, &test_targets)?;

    let mut predictions = Vec::with_capacity(cfg.train.size + cfg.test.size);
    for i in 0..cfg.train.size {
        predictions.push(PredictionPair {
            observable: cfg.witness.label().to_string(),
            true_value: train_targets[(0, i)],
            predicted: train_predictions[(0, i)],
            split: Split::Train,
        });
    }
    let mut confusion = [[0u64; 2]; 2];
    for i in 0..cfg.test.size {
        let true_value = test_targets[(0, i)];
        let predicted = test_predictions[(0, i)];
        predictions.push(PredictionPair {
            observable: cfg.witness.label().to_string(),
            true_value,
            predicted,
            split: Split::Test,
        });
        let truly_entangled = true_value < 0.0;
        let called_entangled = predicted < 0.0;
        let row = if truly_entangled { 0 } else { 1 };
        let col = if called_entangled { 0 } else { 1 };
        confusion[row][col] += 1;
    }

    let report = ExperimentReport {
        train_mse,
        test_mse,
        learning_curve: Vec::new(),
        predictions,
        confusion: Some(confusion),
        training: readout.summary().clone(),
    };
    Ok(WitnessRun {
        report,
        readout,
        test_targets,
        test_counts,
    })
}

/// Trains a witness readout on classical product-state data and tests it on
/// entangled coincidence statistics.
///
/// Training features are per-line coherent intensity patterns combined as an
/// outer product (renormalizing each line separately equals renormalizing
/// the joint pattern); test features are two-photon coincidences of rotated
/// singlet states, exact or Poisson-sampled.  A state is classified
/// entangled when the predicted witness value is negative, and the report's
/// confusion matrix compares that call against the true witness sign.
pub fn witness_transfer_experiment(cfg: &WitnessExperimentConfig) -> Result<ExperimentReport> {
    Ok(witness_run(cfg)?.report)
}

/// Runs the witness experiment once, then estimates the counting
/// uncertainty of its test metrics by Poisson-redrawing the recorded
/// coincidence counts and re-applying the fixed trained readout.
///
/// Requires `coincidence_shots` (there is nothing to resample in an exact
/// run).  Each resample reports `test_mse` and `accuracy`, the fraction of
/// test states whose entangled/separable call matches the true witness
/// sign; the summary carries their means and spreads.
pub fn witness_resample_uncertainty(
    cfg: &WitnessExperimentConfig,
    mc: &MonteCarloConfig,
) -> Result<(ExperimentReport, MonteCarloSummary)> {
    let Some(shots) = cfg.coincidence_shots else {
        return Err(QelmError::invalid(
            "coincidence_shots",
            "count resampling needs a sampled run",
        ));
    };
    let run = witness_run(cfg)?;
    let n_test = run.test_counts.len();
    let n_features = run.test_counts.first().map_or(0, Vec::len);
    let summary = monte_carlo_uncertainty(
        |seed| {
            let mut rng = SimRng::seed_from_u64(seed);
            let mut resampled = DMatrix::zeros(n_features, n_test);
            for (i, counts) in run.test_counts.iter().enumerate() {
                let redrawn = resample_counts(counts, &mut rng);
                resampled.set_column(i, &counts_to_features(&redrawn, shots, cfg.feature_mode)?);
            }
            let preds = run.readout.predict_batch(&resampled)?;
            let mse = mean_squared_error(&preds, &run.test_targets)?;
            let correct = (0..n_test)
                .filter(|&i| (preds[(0, i)] < 0.0) == (run.test_targets[(0, i)] < 0.0))
                .count();
            Ok(vec![
                ("test_mse".to_string(), mse),
                ("accuracy".to_string(), correct as f64 / n_test as f64),
            ])
        },
        mc,
    )?;
    Ok((run.report, summary))
}

/// Per-metric mean and spread from Monte-Carlo reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    /// Metric name as reported by the pipeline.
    pub name: String,
    /// Mean over successful resamples.
    pub mean: f64,
    /// Sample standard deviation over successful resamples.
    pub sigma: f64,
}

/// Result of [`monte_carlo_uncertainty`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    /// One entry per metric the pipeline reports.
    pub metrics: Vec<MetricSpread>,
    /// Resamples whose pipeline run failed.
    pub n_failures: usize,
    /// Requested resample count.
    pub resamples: usize,
}

/// Reruns a full analysis pipeline on `resamples` derived seeds and reports
/// each metric's mean and one-standard-deviation spread.
///
/// The pipeline closure receives a derived seed (`cfg.seed ⊕ i`) and
/// returns named metric values; it is expected to hold its base counts
/// fixed as Poisson means and redraw them from the seed, so the spread
/// estimates the counting uncertainty of the original analysis.  Individual
/// failures are tallied, not fatal; runs execute in parallel and the result
/// is scheduling-independent.
pub fn monte_carlo_uncertainty<F>(pipeline: F, cfg: &MonteCarloConfig) -> Result<MonteCarloSummary>
where
    F: Fn(u64) -> Result<Vec<(String, f64)>> + Sync,
{
    cfg.validate()?;
    let runs: Vec<Result<Vec<(String, f64)>>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|i| pipeline(cfg.seed ^ i as u64))
        .collect();
    let n_failures = runs.iter().filter(|r| r.is_err()).count();
    let successes: Vec<&Vec<(String, f64)>> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    if successes.len() < 2 {
        return Err(QelmError::DegenerateInput(format!(
            "only {} of {} resamples succeeded; no spread can be estimated",
            successes.len(),
            cfg.resamples
        )));
    }
    let names: Vec<String> = successes[0].iter().map(|(n, _)| n.clone()).collect();
    for run in &successes {
        let run_names: Vec<&String> = run.iter().map(|(n, _)| n).collect();
        if run_names.len() != names.len() || run_names.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(QelmError::ShapeMismatch {
                context: "monte_carlo_uncertainty",
                expected: format!("metrics {names:?}"),
                found: format!("{run_names:?}"),
            });
        }
    }
    let metrics = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let values: Vec<f64> = successes.iter().map(|run| run[k].1).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (values.len() - 1) as f64;
            MetricSpread {
                name: name.clone(),
                mean,
                sigma: var.sqrt(),
            }
        })
        .collect();
    Ok(MonteCarloSummary {
        metrics,
        n_failures,
        resamples: cfg.resamples,
    })
}

/// Gaussian jitter applied to the reservoir internals for a
/// changed-conditions rerun.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    /// Standard deviation of per-waveplate fast-axis angle offsets, in
    /// degrees.
    pub waveplate_sigma_deg: f64,
    /// Standard deviation of per-q-plate retardation offsets, in radians
    /// (topological charge is lithographed and never jitters).
    pub retardation_sigma_rad: f64,
    /// Seed of the jitter draws.
    pub seed: u64,
    /// `true` draws fresh datasets (derived seeds) for the rerun; `false`
    /// reuses the base datasets unchanged (paired mode).
    pub fresh_data: bool,
}

fn jitter_walk(walk: &WalkSpec, jitter: &JitterSpec, rng: &mut SimRng) -> WalkSpec {
    let mut out = walk.clone();
    for element in &mut out.elements {
        match element {
            OpticalElement::HalfWavePlate { angle_deg }
            | OpticalElement::QuarterWavePlate { angle_deg } => {
                let draw: f64 = StandardNormal.sample(rng);
                *angle_deg += jitter.waveplate_sigma_deg * draw;
            }
            OpticalElement::QPlate {
                retardation_rad, ..
            } => {
                let draw: f64 = StandardNormal.sample(rng);
                *retardation_rad += jitter.retardation_sigma_rad * draw;
            }
        }
    }
    out
}

/// Reruns the witness experiment on a perturbed device and reports both
/// runs side by side.
///
/// Every internal element of both walks receives an independent Gaussian
/// offset, the readout is retrained from scratch on the perturbed device
/// (the tuning procedure never sees a device model, so retraining is all
/// that adapting requires), and — in fresh-data mode — new datasets are
/// drawn from derived seeds.
pub fn robustness_rerun(
    base: &WitnessExperimentConfig,
    jitter: &JitterSpec,
) -> Result<(ExperimentReport, ExperimentReport)> {
    if jitter.waveplate_sigma_deg < 0.0 || jitter.retardation_sigma_rad < 0.0 {
        return Err(QelmError::invalid("jitter", "sigmas must be non-negative"));
    }
    let base_report = witness_transfer_experiment(base)?;
    let mut rng = SimRng::seed_from_u64(jitter.seed);
    let mut perturbed = base.clone();
    perturbed.walk1 = jitter_walk(&base.walk1, jitter, &mut rng);
    perturbed.walk2 = jitter_walk(&base.walk2, jitter, &mut rng);
    if jitter.fresh_data {
        perturbed.train.seed ^= SEED_DERIVE;
        perturbed.test.seed ^= SEED_DERIVE;
        perturbed.noise_seed ^= SEED_DERIVE;
    }
    let perturbed_report = witness_transfer_experiment(&perturbed)?;
    Ok((base_report, perturbed_report))
}

/// Black-box loss for tuning a single line's projection settings (θ, φ):
/// the training MSE of a readout fitted to a fixed mini-batch of classical
/// probes at those settings.
///
/// A low loss means the five outcome intensities at these settings carry
/// enough information for a linear fit of the observables — exactly the
/// quantity the model-free tuning loop can measure on hardware.
pub struct SingleLineFitLoss {
    walk: WalkOperator,
    jones: Vec<JonesVector>,
    targets: DMatrix<f64>,
    mode: FeatureMode,
    svd_cutoff: f64,
    noise: Option<IntensityNoise>,
    rng: SimRng,
}

/// Builds a [`SingleLineFitLoss`] over a Haar mini-batch.
pub fn single_line_fit_loss(
    walk: &WalkSpec,
    minibatch: &DatasetSpec,
    observables: &[Observable],
    mode: FeatureMode,
    noise: Option<IntensityNoise>,
    noise_seed: u64,
) -> Result<SingleLineFitLoss> {
    require_qubit_family(minibatch, "mini-batch")?;
    if observables.is_empty() {
        return Err(QelmError::invalid("observables", "need at least one"));
    }
    let states = generate_states(minibatch)?;
    let densities: Vec<DMatrix<Complex64>> = states.iter().map(|s| s.density()).collect();
    let jones = states
        .iter()
        .map(|s| {
            let StateSample::Qubit(j) = s else {
                unreachable!("family checked above")
            };
            j.clone()
        })
        .collect();
    Ok(SingleLineFitLoss {
        walk: walk.build()?,
        jones,
        targets: build_targets(observables, &densities)?,
        mode,
        svd_cutoff: DEFAULT_SVD_CUTOFF,
        noise,
        rng: SimRng::seed_from_u64(noise_seed),
    })
}

impl LossEvaluator for SingleLineFitLoss {
    fn coordinate_names(&self) -> Vec<String> {
        vec!["theta".into(), "phi".into()]
    }

    fn evaluate(&mut self, angles_deg: &[f64]) -> Result<f64> {
        if angles_deg.len() != 2 {
            return Err(QelmError::ShapeMismatch {
                context: "single-line loss",
                expected: "2 angles".into(),
                found: format!("{}", angles_deg.len()),
            });
        }
        let settings = MeasurementSettings::with_grid(angles_deg[0], angles_deg[1], 0.0)?;
        let transfer = effective_transfer(&self.walk, &settings);
        let mut features = DMatrix::zeros(transfer.n_modes(), self.jones.len());
        for (i, jones) in self.jones.iter().enumerate() {
            let f = classical_line_features(
                &transfer,
                jones,
                self.noise.as_ref(),
                &mut self.rng,
                self.mode,
            )?;
            features.set_column(i, &f);
        }
        let readout = LinearReadout::train(&features, &self.targets, self.svd_cutoff, None)?;
        mean_squared_error(&readout.predict_batch(&features)?, &self.targets)
    }

    fn noiseless(&self) -> bool {
        self.noise.is_none()
    }
}

/// Black-box loss for tuning the two half-wave-plate angles (θ₁, θ₂) of a
/// two-line device, quarter-wave plates held at 0°: the training MSE of a
/// witness readout fitted to a fixed mini-batch of classical product
/// probes.
pub struct TwoLineFitLoss {
    walk1: WalkOperator,
    walk2: WalkOperator,
    pairs: Vec<(JonesVector, JonesVector)>,
    targets: DMatrix<f64>,
    mode: FeatureMode,
    svd_cutoff: f64,
    noise: Option<IntensityNoise>,
    rng: SimRng,
}

/// Builds a [`TwoLineFitLoss`] over a product-state mini-batch.
pub fn two_line_fit_loss(
    walk1: &WalkSpec,
    walk2: &WalkSpec,
    minibatch: &DatasetSpec,
    observables: &[Observable],
    mode: FeatureMode,
    noise: Option<IntensityNoise>,
    noise_seed: u64,
) -> Result<TwoLineFitLoss> {
    if minibatch.family != StateFamily::RotatedProduct {
        return Err(QelmError::invalid(
            "mini-batch",
            "two-line tuning needs product-pair states",
        ));
    }
    if observables.is_empty() {
        return Err(QelmError::invalid("observables", "need at least one"));
    }
    let states = generate_states(minibatch)?;
    let densities: Vec<DMatrix<Complex64>> = states.iter().map(|s| s.density()).collect();
    let pairs = states
        .iter()
        .map(|s| {
            let StateSample::ProductPair { first, second } = s else {
                unreachable!("family checked above")
            };
            (first.clone(), second.clone())
        })
        .collect();
    Ok(TwoLineFitLoss {
        walk1: walk1.build()?,
        walk2: walk2.build()?,
        pairs,
        targets: build_targets(observables, &densities)?,
        mode,
        svd_cutoff: DEFAULT_SVD_CUTOFF,
        noise,
        rng: SimRng::seed_from_u64(noise_seed),
    })
}

impl LossEvaluator for TwoLineFitLoss {
    fn coordinate_names(&self) -> Vec<String> {
        vec!["theta1".into(), "theta2".into()]
    }

    fn evaluate(&mut self, angles_deg: &[f64]) -> Result<f64> {
        if angles_deg.len() != 2 {
            return Err(QelmError::ShapeMismatch {
                context: "two-line loss",
                expected: "2 angles".into(),
                found: format!("{}", angles_deg.len()),
            });
        }
        let s1 = MeasurementSettings::with_grid(angles_deg[0], 0.0, 0.0)?;
        let s2 = MeasurementSettings::with_grid(angles_deg[1], 0.0, 0.0)?;
        let pair = two_line_transfer(&self.walk1, &s1, &self.walk2, &s2);
        let n_features = pair.line1().n_modes() * pair.line2().n_modes();
        let mut features = DMatrix::zeros(n_features, self.pairs.len());
        for (i, (first, second)) in self.pairs.iter().enumerate() {
            let f1 = classical_line_features(
                pair.line1(),
                first,
                self.noise.as_ref(),
                &mut self.rng,
                self.mode,
            )?;
            let f2 = classical_line_features(
                pair.line2(),
                second,
                self.noise.as_ref(),
                &mut self.rng,
                self.mode,
            )?;
            let mut joint = DVector::zeros(n_features);
            for m in 0..f1.len() {
                for n in 0..f2.len() {
                    joint[m * f2.len() + n] = f1[m] * f2[n];
                }
            }
            features.set_column(i, &joint);
        }
        let readout = LinearReadout::train(&features, &self.targets, self.svd_cutoff, None)?;
        mean_squared_error(&readout.predict_batch(&features)?, &self.targets)
    }

    fn noiseless(&self) -> bool {
        self.noise.is_none()
    }
}
