//! The extreme-learning-machine layer: observables, training sets, and the
//! linear readout.
//!
//! The reservoir maps an input state ρ to a feature vector of outcome
//! statistics `p(ρ)`.  Given a family of target observables, training
//! assembles the feature matrix `P` (one column per state) and target matrix
//! `Y` with `Y_{ji} = tr[𝒪_j ρ_i]`, then solves the ridgeless least-squares
//! problem with the Moore–Penrose pseudoinverse, `W = Y·P⁺`.  Because
//! unconditional features depend linearly on ρ, a readout trained on enough
//! generic states reproduces every observable in the span of the measurement
//! operators exactly — no model of the optics is ever consulted.

use crate::error::{QelmError, Result};
use crate::optics::{TransferMatrix, TwoLineTransfer};
use crate::photon::{self, FeatureMode};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Default relative singular-value cutoff for the pseudoinverse: machine
/// precision, suppressing only numerically null directions.
pub const DEFAULT_SVD_CUTOFF: f64 = 1e-12;

fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// A labelled Hermitian observable on one or two polarization qubits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    matrix: DMatrix<Complex64>,
    label: String,
}

impl Observable {
    /// Wraps a Hermitian matrix (hermiticity enforced within 1e-12).
    pub fn new(matrix: DMatrix<Complex64>, label: impl Into<String>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(QelmError::ShapeMismatch {
                context: "observable",
                expected: "square matrix".into(),
                found: format!("{:?}", matrix.shape()),
            });
        }
        let herm_defect = (&matrix - matrix.adjoint())
            .iter()
            .fold(0.0f64, |a, z| a.max(z.norm()));
        if herm_defect > 1e-12 {
            return Err(QelmError::invalid(
                "observable",
                format!("matrix is not hermitian (defect {herm_defect:.3e})"),
            ));
        }
        Ok(Observable {
            matrix,
            label: label.into(),
        })
    }

    /// The observable's matrix.
    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// Human-readable label, used in reports.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// Hilbert-space dimension (2 or 4 in this crate).
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Expectation value tr[𝒪ρ].  The trace of a Hermitian observable
    /// against a density matrix is real; any imaginary residue beyond 1e-10
    /// signals corrupted inputs and is rejected.
    pub fn expectation(&self, rho: &DMatrix<Complex64>) -> Result<f64> {
        if rho.shape() != self.matrix.shape() {
            return Err(QelmError::ShapeMismatch {
                context: "expectation",
                expected: format!("{:?}", self.matrix.shape()),
                found: format!("{:?}", rho.shape()),
            });
        }
        let tr: Complex64 = (&self.matrix * rho).trace();
        if tr.im.abs() > 1e-10 {
            return Err(QelmError::invalid(
                "expectation",
                format!("imaginary residue {:.3e} exceeds tolerance", tr.im),
            ));
        }
        Ok(tr.re)
    }
}

/// σ_x in the (H, V) basis with H ≡ |0⟩.
pub fn pauli_x() -> Observable {
    let m = DMatrix::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(1.0, 0.0), c64(1.0, 0.0), c64(0.0, 0.0)]);
    Observable::new(m, "sigma_x").expect("hermitian")
}

/// σ_y in the (H, V) basis.
pub fn pauli_y() -> Observable {
    let m = DMatrix::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(0.0, -1.0), c64(0.0, 1.0), c64(0.0, 0.0)]);
    Observable::new(m, "sigma_y").expect("hermitian")
}

/// σ_z in the (H, V) basis.
pub fn pauli_z() -> Observable {
    let m = DMatrix::from_row_slice(2, 2, &[c64(1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(-1.0, 0.0)]);
    Observable::new(m, "sigma_z").expect("hermitian")
}

/// All three Pauli observables in (x, y, z) order.
pub fn pauli_family() -> Vec<Observable> {
    vec![pauli_x(), pauli_y(), pauli_z()]
}

/// The four maximally entangled two-qubit Bell states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BellState {
    /// (|HH⟩ + |VV⟩)/√2.
    PhiPlus,
    /// (|HH⟩ − |VV⟩)/√2.
    PhiMinus,
    /// (|HV⟩ + |VH⟩)/√2.
    PsiPlus,
    /// (|HV⟩ − |VH⟩)/√2.
    PsiMinus,
}

impl BellState {
    /// All four states.
    pub const ALL: [BellState; 4] = [
        BellState::PhiPlus,
        BellState::PhiMinus,
        BellState::PsiPlus,
        BellState::PsiMinus,
    ];

    /// Snake-case name used in labels and reports.
    pub fn label(self) -> &'static str {
        match self {
            BellState::PhiPlus => "phi_plus",
            BellState::PhiMinus => "phi_minus",
            BellState::PsiPlus => "psi_plus",
            BellState::PsiMinus => "psi_minus",
        }
    }

    /// Amplitudes in the (HH, HV, VH, VV) basis.
    pub fn state_vector(self) -> Vector4<Complex64> {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let (a, b, c_, d) = match self {
            BellState::PhiPlus => (r, 0.0, 0.0, r),
            BellState::PhiMinus => (r, 0.0, 0.0, -r),
            BellState::PsiPlus => (0.0, r, r, 0.0),
            BellState::PsiMinus => (0.0, r, -r, 0.0),
        };
        Vector4::new(c64(a, 0.0), c64(b, 0.0), c64(c_, 0.0), c64(d, 0.0))
    }

    /// Density matrix |B⟩⟨B|.
    pub fn density(self) -> Matrix4<Complex64> {
        let v = self.state_vector();
        Matrix4::from_fn(|i, j| v[i] * v[j].conj())
    }
}

/// Entanglement witness for a Bell state: 𝒲_B = ½·I − |B⟩⟨B|.
///
/// Every separable state has tr[𝒲_B ρ] ≥ 0, while states close enough to
/// |B⟩ give a strictly negative value, so the sign of the expectation
/// certifies entanglement.
pub fn bell_witness(which: BellState) -> Observable {
    let proj = which.density();
    let m = DMatrix::from_fn(4, 4, |r, c| {
        let id = if r == c { c64(0.5, 0.0) } else { c64(0.0, 0.0) };
        id - proj[(r, c)]
    });
    Observable::new(m, format!("witness_{}", which.label())).expect("hermitian")
}

/// Kronecker product of two single-qubit operators, photon 1 first.
pub fn kron2(a: &Matrix2<Complex64>, b: &Matrix2<Complex64>) -> Matrix4<Complex64> {
    Matrix4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

/// Wootters concurrence of a two-qubit density matrix: an entanglement
/// monotone equal to 0 on separable states and 1 on Bell states.
///
/// Uses the spin-flip construction: with ρ̃ = (σ_y⊗σ_y) ρ* (σ_y⊗σ_y), the
/// concurrence is max(0, √λ₁ − √λ₂ − √λ₃ − √λ₄) over the decreasingly
/// ordered eigenvalues of ρρ̃, computed here through the Hermitian matrix
/// √ρ̃ ρ √ρ̃ which shares its spectrum.
pub fn concurrence(rho: &Matrix4<Complex64>) -> f64 {
    let sy = Matrix2::new(c64(0.0, 0.0), c64(0.0, -1.0), c64(0.0, 1.0), c64(0.0, 0.0));
    let syy = kron2(&sy, &sy);
    let rho_conj = rho.map(|z| z.conj());
    let rho_tilde = syy * rho_conj * syy;
    // Hermitian square root of ρ̃ via its eigendecomposition.
    let eig = nalgebra::SymmetricEigen::new(rho_tilde);
    let mut sqrt_tilde = Matrix4::zeros();
    for k in 0..4 {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        for r in 0..4 {
            for c in 0..4 {
                sqrt_tilde[(r, c)] += v[r] * v[c].conj() * c64(lam, 0.0);
            }
        }
    }
    let herm = sqrt_tilde * rho * sqrt_tilde;
    let eigenvalues = nalgebra::SymmetricEigen::new(herm).eigenvalues;
    // Square roots amplify eigensolver noise around zero (1e-16 → 1e-8), so
    // clamp relatively before taking them.
    let floor = 1e-12 * eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut lams: Vec<f64> = eigenvalues
        .iter()
        .map(|&l| if l < floor { 0.0 } else { l.sqrt() })
        .collect();
    lams.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    (lams[0] - lams[1] - lams[2] - lams[3]).max(0.0)
}

/// Narrowing helper: views a dynamically sized density matrix as a qubit
/// state.
pub fn as_qubit(rho: &DMatrix<Complex64>) -> Result<Matrix2<Complex64>> {
    if rho.shape() != (2, 2) {
        return Err(QelmError::ShapeMismatch {
            context: "as_qubit",
            expected: "(2, 2)".into(),
            found: format!("{:?}", rho.shape()),
        });
    }
    Ok(Matrix2::from_fn(|r, c| rho[(r, c)]))
}

/// Narrowing helper: views a dynamically sized density matrix as a two-qubit
/// state.
pub fn as_two_qubit(rho: &DMatrix<Complex64>) -> Result<Matrix4<Complex64>> {
    if rho.shape() != (4, 4) {
        return Err(QelmError::ShapeMismatch {
            context: "as_two_qubit",
            expected: "(4, 4)".into(),
            found: format!("{:?}", rho.shape()),
        });
    }
    Ok(Matrix4::from_fn(|r, c| rho[(r, c)]))
}

/// Widening helpers for the static state types used by the statistics layer.
pub fn dynamic2(rho: &Matrix2<Complex64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(2, 2, |r, c| rho[(r, c)])
}

/// See [`dynamic2`].
pub fn dynamic4(rho: &Matrix4<Complex64>) -> DMatrix<Complex64> {
    DMatrix::from_fn(4, 4, |r, c| rho[(r, c)])
}

/// Target matrix `Y_{ji} = tr[𝒪_j ρ_i]` for a family of observables over a
/// list of states.
pub fn build_targets(
    observables: &[Observable],
    states: &[DMatrix<Complex64>],
) -> Result<DMatrix<f64>> {
    let mut y = DMatrix::zeros(observables.len(), states.len());
    for (i, rho) in states.iter().enumerate() {
        for (j, obs) in observables.iter().enumerate() {
            y[(j, i)] = obs.expectation(rho)?;
        }
    }
    Ok(y)
}

/// A feature matrix, its targets, and the states that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Feature matrix, one column per state (`n_outcomes × n_states`).
    pub features: DMatrix<f64>,
    /// Target matrix, one column per state (`n_observables × n_states`).
    pub targets: DMatrix<f64>,
    /// The generating density matrices, kept for auditability.
    pub states: Vec<DMatrix<Complex64>>,
    /// How raw statistics were turned into features.
    pub mode: FeatureMode,
}

/// Assembles a training set for single-photon (or equivalently unit
/// coherent) probing of one measurement line.
pub fn single_line_training_set(
    transfer: &TransferMatrix,
    states: &[DMatrix<Complex64>],
    observables: &[Observable],
    mode: FeatureMode,
) -> Result<TrainingSet> {
    let mut features = DMatrix::zeros(transfer.n_modes(), states.len());
    for (i, rho) in states.iter().enumerate() {
        let f = photon::single_line_features(transfer, &as_qubit(rho)?, mode)?;
        features.set_column(i, &f);
    }
    Ok(TrainingSet {
        features,
        targets: build_targets(observables, states)?,
        states: states.to_vec(),
        mode,
    })
}

/// Assembles a training set for photon-pair coincidence probing of a
/// two-line device.
pub fn coincidence_training_set(
    pair: &TwoLineTransfer,
    states: &[DMatrix<Complex64>],
    observables: &[Observable],
    mode: FeatureMode,
) -> Result<TrainingSet> {
    let n_feat = pair.line1().n_modes() * pair.line2().n_modes();
    let mut features = DMatrix::zeros(n_feat, states.len());
    for (i, rho) in states.iter().enumerate() {
        let f = photon::coincidence_features(pair, &as_two_qubit(rho)?, mode)?;
        features.set_column(i, &f);
    }
    Ok(TrainingSet {
        features,
        targets: build_targets(observables, states)?,
        states: states.to_vec(),
        mode,
    })
}

/// Moore–Penrose pseudoinverse by SVD, zeroing singular values below
/// `relative_cutoff · σ_max`.  Returns the pseudoinverse and the numerical
/// rank.
pub fn pseudoinverse(m: &DMatrix<f64>, relative_cutoff: f64) -> Result<(DMatrix<f64>, usize)> {
    if !(relative_cutoff > 0.0 && relative_cutoff < 1.0) {
        return Err(QelmError::invalid(
            "svd cutoff",
            format!("{relative_cutoff} is outside (0, 1)"),
        ));
    }
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let eps = relative_cutoff * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| QelmError::invalid("pseudoinverse", e.to_string()))?;
    Ok((pinv, rank))
}

/// Metadata recorded alongside a trained readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// Feature dimension (number of measurement outcomes).
    pub n_outcomes: usize,
    /// Number of target observables.
    pub n_observables: usize,
    /// Number of training states.
    pub n_examples: usize,
    /// Numerical rank of the feature matrix at the stored cutoff.
    pub rank: usize,
    /// `true` when the feature matrix does not span the full outcome space
    /// (rank < n_outcomes): the training data leave directions of the
    /// readout unconstrained.
    pub degenerate_features: bool,
    /// Relative singular-value cutoff used.
    pub svd_cutoff: f64,
    /// Ridge parameter, when ridge regression was requested instead of the
    /// ridgeless pseudoinverse.
    pub ridge: Option<f64>,
    /// Feature mode the readout was trained for, when known.
    pub feature_mode: Option<FeatureMode>,
    /// Fingerprint of the reservoir (walks + settings) the features came
    /// from, when known; predictions are only meaningful on features from
    /// the same device.
    pub reservoir_hash: Option<String>,
}

/// A trained linear readout `W` with its training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReadout {
    weights: DMatrix<f64>,
    summary: TrainingSummary,
}

impl LinearReadout {
    /// Trains `W` on features `P` (columns = examples) and targets `Y`.
    ///
    /// Ridgeless by default: `W = Y·P⁺`.  With `ridge = Some(λ)`, λ > 0,
    /// solves the ridge-regularized problem `W = Y Pᵀ (P Pᵀ + λI)⁻¹`
    /// instead; the choice is recorded in the summary, never applied
    /// silently.
    pub fn train(
        features: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        svd_cutoff: f64,
        ridge: Option<f64>,
    ) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(QelmError::DegenerateInput(
                "training requires at least one example".into(),
            ));
        }
        if features.ncols() != targets.ncols() {
            return Err(QelmError::ShapeMismatch {
                context: "train",
                expected: format!("targets with {} columns", features.ncols()),
                found: format!("{} columns", targets.ncols()),
            });
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(QelmError::DegenerateInput(
                "training matrices contain non-finite entries".into(),
            ));
        }
        let weights = match ridge {
            None => {
                let (pinv, _) = pseudoinverse(features, svd_cutoff)?;
                targets * pinv
            }
            Some(lambda) => {
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(QelmError::invalid(
                        "ridge",
                        format!("{lambda} is not a positive real"),
                    ));
                }
                let gram = features * features.transpose()
                    + DMatrix::identity(features.nrows(), features.nrows()) * lambda;
                let inv = gram.cholesky().ok_or_else(|| {
                    QelmError::DegenerateInput("ridge normal matrix is not positive definite".into())
                })?;
                targets * features.transpose() * inv.inverse()
            }
        };
        // Rank bookkeeping (also under ridge, where no cutoff is applied).
        let svd = features.clone().svd(false, false);
        let sigma_max = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > svd_cutoff * sigma_max)
            .count();
        let summary = TrainingSummary {
            n_outcomes: features.nrows(),
            n_observables: targets.nrows(),
            n_examples: features.ncols(),
            rank,
            degenerate_features: rank < features.nrows(),
            svd_cutoff,
            ridge,
            feature_mode: None,
            reservoir_hash: None,
        };
        Ok(LinearReadout { weights, summary })
    }

    /// [`LinearReadout::train`] with the default cutoff and no ridge.
    pub fn train_default(features: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Self> {
        LinearReadout::train(features, targets, DEFAULT_SVD_CUTOFF, None)
    }

    /// Trains from an assembled [`TrainingSet`], recording its feature mode.
    pub fn from_training_set(
        set: &TrainingSet,
        svd_cutoff: f64,
        ridge: Option<f64>,
    ) -> Result<Self> {
        let mut readout = LinearReadout::train(&set.features, &set.targets, svd_cutoff, ridge)?;
        readout.summary.feature_mode = Some(set.mode);
        Ok(readout)
    }

    /// Attaches the originating reservoir's fingerprint.
    pub fn with_reservoir_hash(mut self, hash: impl Into<String>) -> Self {
        self.summary.reservoir_hash = Some(hash.into());
        self
    }

    /// The weight matrix (`n_observables × n_outcomes`).
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Training metadata.
    pub fn summary(&self) -> &TrainingSummary {
        &self.summary
    }

    /// Predicts all observables from one feature vector.  Predictions are
    /// not clipped to physical ranges.
    pub fn predict(&self, features: &DVector<f64>) -> Result<DVector<f64>> {
        if features.len() != self.weights.ncols() {
            return Err(QelmError::ShapeMismatch {
                context: "predict",
                expected: format!("feature vector of length {}", self.weights.ncols()),
                found: format!("length {}", features.len()),
            });
        }
        Ok(&self.weights * features)
    }

    /// Predicts for every column of a feature matrix.
    pub fn predict_batch(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.nrows() != self.weights.ncols() {
            return Err(QelmError::ShapeMismatch {
                context: "predict_batch",
                expected: format!("feature matrix with {} rows", self.weights.ncols()),
                found: format!("{} rows", features.nrows()),
            });
        }
        Ok(&self.weights * features)
    }
}

/// Mean of squared entrywise differences.
pub fn mean_squared_error(predictions: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(QelmError::ShapeMismatch {
            context: "mse",
            expected: format!("{:?}", targets.shape()),
            found: format!("{:?}", predictions.shape()),
        });
    }
    let n = (predictions.nrows() * predictions.ncols()) as f64;
    Ok((predictions - targets).map(|d| d * d).sum() / n)
}
