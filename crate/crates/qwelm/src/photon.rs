//! Detection statistics for coherent, single-photon, and two-photon inputs.
//!
//! For the post-selected transfer matrices of [`crate::optics`], classical
//! coherent light, single photons, and photon pairs all probe the same
//! amplitudes:
//!
//! * a coherent beam of unit mean photon number produces mode intensities
//!   identical to the single-photon detection probabilities — this is the
//!   identity that lets the readout be trained with laser light and deployed
//!   on quantum states;
//! * a photon pair sent through two independent lines produces coincidence
//!   probabilities that are linear in the joint two-qubit density matrix and
//!   factorize into the two marginal patterns exactly when the input is a
//!   product state;
//! * indistinguishable photons meeting in a *common* network additionally
//!   show two-photon interference (Hong–Ou–Mandel bunching), captured by the
//!   symmetrized amplitude formula.
//!
//! The module also provides the two experimental noise channels: Poissonian
//! counting statistics for click detectors and Gaussian relative intensity
//! noise for classical detection.

use crate::error::{QelmError, Result};
use crate::optics::{JonesVector, TransferMatrix, TwoLineTransfer};
use crate::SimRng;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, RowVector4};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

/// Tolerance for density-matrix sanity checks (hermiticity, unit trace).
const DENSITY_TOL: f64 = 1e-9;

/// How raw outcome statistics are turned into feature vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Absolute detection probabilities (or unit-amplitude intensities).
    /// Linear in the input density matrix, which is what exact linear-readout
    /// recovery arguments rely on.
    Unconditional,
    /// Probabilities conditioned on a detection inside the window, i.e.
    /// renormalized to sum to one.  This is what an experiment that only
    /// records relative frequencies actually measures; it is mildly
    /// nonlinear in the input state because the post-selection success
    /// probability is state-dependent.
    #[default]
    Renormalized,
}

fn check_hermitian_unit_trace(data: &[Complex64], n: usize, what: &str) -> Result<()> {
    let mut trace = Complex64::new(0.0, 0.0);
    for r in 0..n {
        trace += data[r * n + r];
        for c in 0..n {
            let a = data[c * n + r]; // column-major: (r, c)
            let b = data[r * n + c]; // (c, r)
            if (a - b.conj()).norm() > DENSITY_TOL {
                return Err(QelmError::invalid(
                    "density matrix",
                    format!("{what} is not hermitian at ({r}, {c})"),
                ));
            }
        }
    }
    if (trace - Complex64::new(1.0, 0.0)).norm() > DENSITY_TOL {
        return Err(QelmError::invalid(
            "density matrix",
            format!("{what} has trace {trace} instead of 1"),
        ));
    }
    Ok(())
}

/// Checks that a single-qubit density matrix is hermitian with unit trace.
pub fn validate_qubit_density(rho: &Matrix2<Complex64>) -> Result<()> {
    check_hermitian_unit_trace(rho.as_slice(), 2, "qubit state")
}

/// Checks that a two-qubit density matrix is hermitian with unit trace.
pub fn validate_two_qubit_density(rho: &Matrix4<Complex64>) -> Result<()> {
    check_hermitian_unit_trace(rho.as_slice(), 4, "two-qubit state")
}

/// Mode-resolved single-photon detection probabilities behind the projection
/// stage: `p_m = t_m ρ t_m†` for transfer rows `t_m`.
///
/// The probabilities are unconditional; their sum `tr(T†T ρ) ≤ 1` is the
/// post-selection success probability.
pub fn single_photon_probabilities(
    transfer: &TransferMatrix,
    rho: &Matrix2<Complex64>,
) -> Result<DVector<f64>> {
    validate_qubit_density(rho)?;
    let t = transfer.matrix();
    let mut p = DVector::zeros(transfer.n_modes());
    for m in 0..transfer.n_modes() {
        let t0 = t[(m, 0)];
        let t1 = t[(m, 1)];
        // t_m ρ t_m† expanded over the 2×2 block.
        let val = t0 * rho[(0, 0)] * t0.conj()
            + t0 * rho[(0, 1)] * t1.conj()
            + t1 * rho[(1, 0)] * t0.conj()
            + t1 * rho[(1, 1)] * t1.conj();
        p[m] = val.re.max(0.0);
    }
    Ok(p)
}

/// Mode-resolved mean photon numbers for a coherent input beam of mean
/// photon number `mean_photons` and polarization `pol`.
///
/// At `mean_photons = 1` this equals [`single_photon_probabilities`] of the
/// corresponding pure state exactly.
pub fn coherent_intensities(
    transfer: &TransferMatrix,
    pol: &JonesVector,
    mean_photons: f64,
) -> Result<DVector<f64>> {
    if !mean_photons.is_finite() || mean_photons < 0.0 {
        return Err(QelmError::invalid(
            "mean photon number",
            "must be finite and non-negative",
        ));
    }
    let t = transfer.matrix();
    let c_h = pol.component(crate::optics::Polarization::H);
    let c_v = pol.component(crate::optics::Polarization::V);
    let mut intensities = DVector::zeros(transfer.n_modes());
    for m in 0..transfer.n_modes() {
        let amp = t[(m, 0)] * c_h + t[(m, 1)] * c_v;
        intensities[m] = mean_photons * amp.norm_sqr();
    }
    Ok(intensities)
}

/// Normalizes a nonnegative outcome vector to sum to one.
///
/// A total below 1e-14 means the state is fully extinguished at these
/// settings and conditional frequencies are undefined.
pub fn renormalized(raw: &DVector<f64>) -> Result<DVector<f64>> {
    let total: f64 = raw.iter().sum();
    if !(total >= 1e-14) || !total.is_finite() {
        return Err(QelmError::DegenerateInput(format!(
            "cannot renormalize outcome vector with total {total}"
        )));
    }
    Ok(raw / total)
}

fn finish_features(raw: DVector<f64>, mode: FeatureMode) -> Result<DVector<f64>> {
    match mode {
        FeatureMode::Unconditional => Ok(raw),
        FeatureMode::Renormalized => renormalized(&raw),
    }
}

/// Single-line feature vector of a quantum input state.
pub fn single_line_features(
    transfer: &TransferMatrix,
    rho: &Matrix2<Complex64>,
    mode: FeatureMode,
) -> Result<DVector<f64>> {
    finish_features(single_photon_probabilities(transfer, rho)?, mode)
}

/// Single-line feature vector of a classical coherent probe with the given
/// polarization (unit mean photon number, so unconditional features coincide
/// with single-photon probabilities).
pub fn coherent_line_features(
    transfer: &TransferMatrix,
    pol: &JonesVector,
    mode: FeatureMode,
) -> Result<DVector<f64>> {
    finish_features(coherent_intensities(transfer, pol, 1.0)?, mode)
}

/// Coincidence probabilities `p_{mn}` of a photon pair distributed over two
/// independent measurement lines, as an `L₁ × L₂` matrix.
///
/// Each entry is linear in the joint polarization density matrix:
/// `p_{mn} = k_{mn} ρ k_{mn}†` with `k_{mn} = t¹_m ⊗ t²_n` built from the
/// two lines' transfer rows.  Basis order for ρ is (HH, HV, VH, VV), photon
/// 1 first.
pub fn coincidence_probabilities(
    pair: &TwoLineTransfer,
    rho: &Matrix4<Complex64>,
) -> Result<DMatrix<f64>> {
    validate_two_qubit_density(rho)?;
    let t1 = pair.line1().matrix();
    let t2 = pair.line2().matrix();
    let (l1, l2) = (pair.line1().n_modes(), pair.line2().n_modes());
    let mut p = DMatrix::zeros(l1, l2);
    for m in 0..l1 {
        for n in 0..l2 {
            let k = RowVector4::new(
                t1[(m, 0)] * t2[(n, 0)],
                t1[(m, 0)] * t2[(n, 1)],
                t1[(m, 1)] * t2[(n, 0)],
                t1[(m, 1)] * t2[(n, 1)],
            );
            let val = (k * rho * k.adjoint())[(0, 0)];
            p[(m, n)] = val.re.max(0.0);
        }
    }
    Ok(p)
}

/// Two-line coincidence features, flattened row-major (line-1 mode major).
pub fn coincidence_features(
    pair: &TwoLineTransfer,
    rho: &Matrix4<Complex64>,
    mode: FeatureMode,
) -> Result<DVector<f64>> {
    let p = coincidence_probabilities(pair, rho)?;
    finish_features(flatten_row_major(&p), mode)
}

/// Feature vector measured with two independent coherent probes, one per
/// line: the outer product of the two marginal intensity patterns, flattened
/// row-major.
///
/// In [`FeatureMode::Unconditional`] (unit-amplitude beams) this equals the
/// coincidence features of the corresponding product state; renormalizing
/// the joint pattern is the same as renormalizing each line separately and
/// taking the product.
pub fn coherent_pair_features(
    transfer1: &TransferMatrix,
    pol1: &JonesVector,
    transfer2: &TransferMatrix,
    pol2: &JonesVector,
    mode: FeatureMode,
) -> Result<DVector<f64>> {
    let i1 = coherent_intensities(transfer1, pol1, 1.0)?;
    let i2 = coherent_intensities(transfer2, pol2, 1.0)?;
    let mut joint = DVector::zeros(i1.len() * i2.len());
    for m in 0..i1.len() {
        for n in 0..i2.len() {
            joint[m * i2.len() + n] = i1[m] * i2[n];
        }
    }
    finish_features(joint, mode)
}

/// Flattens an `L₁ × L₂` outcome matrix row-major, matching the Kronecker
/// index convention `(m, n) ↦ m·L₂ + n`.
pub fn flatten_row_major(p: &DMatrix<f64>) -> DVector<f64> {
    let (l1, l2) = p.shape();
    DVector::from_fn(l1 * l2, |i, _| p[(i / l2, i % l2)])
}

/// Coincidence probabilities of two *indistinguishable* photons injected
/// into a common linear network through different input lines.
///
/// `u1[(m, μ)]` (resp. `u2[(n, ν)]`) is the amplitude for a photon entering
/// line 1 (resp. 2) with polarization μ to reach the fully resolved output
/// mode m.  For the pure joint polarization amplitudes `c[(μ, ν)]`, the
/// bosonic two-photon amplitude is `A = u1 · c · u2ᵀ`, and detection in
/// modes m ≠ n occurs with probability `|A_{mn} + A_{nm}|²`, while
/// `p_{mm} = 2|A_{mm}|²`.  Two-photon interference (e.g. the
/// Hong–Ou–Mandel dip) lives in the cross term; when the two lines feed
/// disjoint output modes the formula reduces to the distinguishable
/// coincidence pattern of [`coincidence_probabilities`].
///
/// The returned matrix is symmetric; entry `(m, n)` with m ≤ n is the
/// probability of one photon in m and one in n.
pub fn interference_coincidences(
    u1: &DMatrix<Complex64>,
    u2: &DMatrix<Complex64>,
    amplitudes: &Matrix2<Complex64>,
) -> Result<DMatrix<f64>> {
    if u1.nrows() != u2.nrows() || u1.ncols() != 2 || u2.ncols() != 2 {
        return Err(QelmError::ShapeMismatch {
            context: "interference_coincidences",
            expected: "two M × 2 line matrices with a common output space".into(),
            found: format!("{:?} and {:?}", u1.shape(), u2.shape()),
        });
    }
    let norm_sq: f64 = amplitudes.iter().map(|z| z.norm_sqr()).sum();
    if norm_sq <= 0.0 || !norm_sq.is_finite() {
        return Err(QelmError::DegenerateInput(
            "two-photon amplitudes have zero norm".into(),
        ));
    }
    let c = amplitudes / Complex64::new(norm_sq.sqrt(), 0.0);
    let c_dyn = DMatrix::from_fn(2, 2, |r, col| c[(r, col)]);
    let a = u1 * c_dyn * u2.transpose();
    let m_modes = u1.nrows();
    let mut p = DMatrix::zeros(m_modes, m_modes);
    for m in 0..m_modes {
        p[(m, m)] = 2.0 * a[(m, m)].norm_sqr();
        for n in (m + 1)..m_modes {
            let val = (a[(m, n)] + a[(n, m)]).norm_sqr();
            p[(m, n)] = val;
            p[(n, m)] = val;
        }
    }
    Ok(p)
}

/// Frequencies estimated from one shot-noise-limited counting run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFrequencies {
    /// Relative frequencies `counts / total`; all zero when no photon
    /// arrived.
    pub frequencies: DVector<f64>,
    /// Raw counts per outcome.
    pub counts: Vec<u64>,
    /// Total number of detected events.
    pub total: u64,
    /// `true` when the run recorded no event at all, in which case the
    /// frequency vector is meaningless.
    pub empty: bool,
}

/// Simulates photon counting: each outcome accumulates an independent
/// Poissonian count with mean `mean_total_counts · p_b`, and frequencies are
/// the normalized counts.
///
/// `probabilities` may be unnormalized (e.g. unconditional probabilities
/// summing to the post-selection success); `mean_total_counts` scales the
/// whole vector.
pub fn sample_poisson_frequencies(
    probabilities: &DVector<f64>,
    mean_total_counts: f64,
    rng: &mut SimRng,
) -> Result<SampledFrequencies> {
    if !mean_total_counts.is_finite() || mean_total_counts < 0.0 {
        return Err(QelmError::invalid(
            "mean total counts",
            "must be finite and non-negative",
        ));
    }
    let mut counts = Vec::with_capacity(probabilities.len());
    for &p in probabilities.iter() {
        if p < -1e-12 {
            return Err(QelmError::invalid(
                "outcome probability",
                format!("negative value {p}"),
            ));
        }
        let lambda = mean_total_counts * p.max(0.0);
        let n = if lambda > 0.0 {
            let dist = Poisson::new(lambda)
                .map_err(|e| QelmError::invalid("poisson mean", e.to_string()))?;
            dist.sample(rng) as u64
        } else {
            0
        };
        counts.push(n);
    }
    let total: u64 = counts.iter().sum();
    let frequencies = if total == 0 {
        DVector::zeros(probabilities.len())
    } else {
        DVector::from_iterator(
            counts.len(),
            counts.iter().map(|&n| n as f64 / total as f64),
        )
    };
    Ok(SampledFrequencies {
        frequencies,
        counts,
        total,
        empty: total == 0,
    })
}

/// Gaussian relative intensity noise of a classical detection chain.
///
/// Each mode intensity acquires independent noise of standard deviation
/// `relative_sigma · I_m / √(n_samples · integration_time_s)`: averaging
/// `n_samples` frames of the given duration beats the single-shot relative
/// error down by the usual square root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityNoise {
    /// Single-shot, one-second relative intensity error.
    pub relative_sigma: f64,
    /// Number of averaged acquisition frames.
    pub n_samples: u32,
    /// Duration of each frame, in seconds.
    pub integration_time_s: f64,
}

impl Default for IntensityNoise {
    /// 3% single-shot error, averaged over 10 frames of 10 s.
    fn default() -> Self {
        IntensityNoise {
            relative_sigma: 0.03,
            n_samples: 10,
            integration_time_s: 10.0,
        }
    }
}

impl IntensityNoise {
    /// Checks parameter domains.
    pub fn validate(&self) -> Result<()> {
        if !self.relative_sigma.is_finite() || self.relative_sigma < 0.0 {
            return Err(QelmError::invalid(
                "relative_sigma",
                "must be finite and non-negative",
            ));
        }
        if self.n_samples == 0 {
            return Err(QelmError::invalid("n_samples", "must be at least 1"));
        }
        if !self.integration_time_s.is_finite() || self.integration_time_s <= 0.0 {
            return Err(QelmError::invalid(
                "integration_time_s",
                "must be finite and positive",
            ));
        }
        Ok(())
    }

    /// The relative noise left after averaging.
    pub fn effective_sigma(&self) -> f64 {
        self.relative_sigma / (self.n_samples as f64 * self.integration_time_s).sqrt()
    }
}

/// Applies relative intensity noise to a measured intensity vector, clamping
/// at zero (detectors report no negative power).
pub fn apply_intensity_noise(
    intensities: &DVector<f64>,
    noise: &IntensityNoise,
    rng: &mut SimRng,
) -> Result<DVector<f64>> {
    noise.validate()?;
    let sigma = noise.effective_sigma();
    if sigma == 0.0 {
        return Ok(intensities.clone());
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut noisy = intensities.clone();
    for v in noisy.iter_mut() {
        let draw: f64 = unit.sample(rng);
        *v = (*v + sigma * *v * draw).max(0.0);
    }
    Ok(noisy)
}
