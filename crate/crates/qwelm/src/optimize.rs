//! Model-free tuning of the measurement settings.
//!
//! The device is treated as a black box: the only accessible quantity is a
//! scalar loss (the readout's mean squared error on a mini-batch) measured at
//! chosen plate angles.  Gradients are estimated by central finite
//! differences on the angle grid of the motorized mounts, and one coordinate
//! at a time is descended until its loss stops improving, exactly as one
//! would run the procedure on hardware.  An exhaustive [`landscape_scan`]
//! over a rectangular settings grid provides the reference picture the
//! descent is judged against.
//!
//! Angles are identified modulo 180° (wave-plate Jones matrices repeat every
//! half turn), so loss evaluators must either be half-turn periodic — every
//! physical device is — or be exercised away from the domain boundary.

use crate::error::{QelmError, Result};
use crate::optics::{snap_to_grid, wrap_half_turn, DEFAULT_GRID_STEP_DEG};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Smallest loss decrease that counts as an improvement; anything below is
/// treated as numerical noise.
pub const IMPROVEMENT_FLOOR: f64 = 1e-12;

/// How many times a failed loss evaluation is retried before the run is
/// flagged as failed.
const EVAL_RETRIES: usize = 3;

/// Hyperparameters of the coordinate-descent tuner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Learning rate η multiplying the gradient estimate.
    pub learning_rate: f64,
    /// Half-width ε of the central difference, in degrees.
    pub fd_step_deg: f64,
    /// Resolution of the motorized mounts, in degrees (0 disables
    /// quantization).
    pub angle_grid_deg: f64,
    /// Number of states in the loss mini-batch (consumed by the experiment
    /// layer when it builds the evaluator).
    pub minibatch_size: usize,
    /// Hard cap on descent iterations per coordinate visit.
    pub max_iters_per_coordinate: usize,
    /// Consecutive non-improving iterations tolerated before a coordinate is
    /// abandoned.
    pub patience: usize,
    /// Seed for whatever randomness the loss evaluator carries.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.8,
            fd_step_deg: 2.87,
            angle_grid_deg: DEFAULT_GRID_STEP_DEG,
            minibatch_size: 15,
            max_iters_per_coordinate: 50,
            patience: 1,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Checks hyperparameter domains.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(QelmError::invalid("learning_rate", "must be positive"));
        }
        if !self.angle_grid_deg.is_finite() || self.angle_grid_deg < 0.0 {
            return Err(QelmError::invalid(
                "angle_grid_deg",
                "must be finite and non-negative",
            ));
        }
        if !(self.fd_step_deg > 0.0) || !self.fd_step_deg.is_finite() {
            return Err(QelmError::invalid("fd_step_deg", "must be positive"));
        }
        if self.angle_grid_deg > 0.0 && self.fd_step_deg < self.angle_grid_deg {
            return Err(QelmError::invalid(
                "fd_step_deg",
                format!(
                    "{}° is below the angle grid of {}°",
                    self.fd_step_deg, self.angle_grid_deg
                ),
            ));
        }
        if self.minibatch_size == 0 {
            return Err(QelmError::invalid("minibatch_size", "must be at least 1"));
        }
        if self.max_iters_per_coordinate == 0 {
            return Err(QelmError::invalid("max_iters_per_coordinate", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(QelmError::invalid("patience", "must be at least 1"));
        }
        Ok(())
    }
}

/// A black-box loss: angles in, scalar out.
///
/// Implementations wrap the full measurement pipeline (reservoir build,
/// feature acquisition under the configured noise, readout training, MSE on
/// the mini-batch).  For a fixed internal RNG state and fixed angles the
/// value must be deterministic; noisy evaluators redraw on every call,
/// mirroring repeated acquisitions on hardware.
pub trait LossEvaluator {
    /// Names of the free angle coordinates, in optimization order.
    fn coordinate_names(&self) -> Vec<String>;

    /// Measures the loss at the given angles (degrees, one per coordinate).
    fn evaluate(&mut self, angles_deg: &[f64]) -> Result<f64>;

    /// `true` when repeated evaluation at identical angles provably returns
    /// identical values, enabling result reuse.
    fn noiseless(&self) -> bool {
        false
    }
}

/// Adapter turning a closure into a [`LossEvaluator`].
pub struct FnLoss<F> {
    names: Vec<String>,
    noiseless: bool,
    f: F,
}

/// Wraps `f` as a loss evaluator over the named coordinates.
pub fn fn_loss<F>(names: &[&str], noiseless: bool, f: F) -> FnLoss<F>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    FnLoss {
        names: names.iter().map(|s| s.to_string()).collect(),
        noiseless,
        f,
    }
}

impl<F> LossEvaluator for FnLoss<F>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    fn coordinate_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn evaluate(&mut self, angles_deg: &[f64]) -> Result<f64> {
        (self.f)(angles_deg)
    }

    fn noiseless(&self) -> bool {
        self.noiseless
    }
}

/// Snapped displacement pair `(ν₊, ν₋)` around `center`, rejecting
/// displacements the grid swallows.
fn probe_pair(center_deg: f64, fd_step_deg: f64, grid_step_deg: f64) -> Result<(f64, f64)> {
    let plus = snap_to_grid(center_deg + fd_step_deg, grid_step_deg);
    let minus = snap_to_grid(center_deg - fd_step_deg, grid_step_deg);
    if plus == minus {
        return Err(QelmError::GridCollision {
            angle_deg: center_deg,
            epsilon_deg: fd_step_deg,
            grid_step_deg,
        });
    }
    Ok((plus, minus))
}

/// Central finite-difference estimate of ∂ℒ/∂ν for one coordinate, all
/// others held at their given values.
///
/// Both displaced settings are snapped to the angle grid before evaluation;
/// the divisor is the *realized* span ν₊ − ν₋ (equal to 2ε whenever ε is
/// grid-representable), so the estimate stays exact on quadratics even when
/// snapping moves the sample points.
pub fn finite_diff_gradient<E: LossEvaluator + ?Sized>(
    evaluator: &mut E,
    angles_deg: &[f64],
    coordinate: usize,
    fd_step_deg: f64,
    grid_step_deg: f64,
) -> Result<f64> {
    if coordinate >= angles_deg.len() {
        return Err(QelmError::invalid(
            "coordinate",
            format!(
                "index {coordinate} out of range for {} coordinates",
                angles_deg.len()
            ),
        ));
    }
    let (plus, minus) = probe_pair(angles_deg[coordinate], fd_step_deg, grid_step_deg)?;
    let mut at = angles_deg.to_vec();
    at[coordinate] = plus;
    let loss_plus = evaluator.evaluate(&at)?;
    at[coordinate] = minus;
    let loss_minus = evaluator.evaluate(&at)?;
    Ok((loss_plus - loss_minus) / (plus - minus))
}

/// Why a loss value was measured during descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationKind {
    /// Baseline measurement at the initial settings.
    Initial,
    /// Positive finite-difference displacement.
    ProbePlus,
    /// Negative finite-difference displacement.
    ProbeMinus,
    /// A gradient-descent step.
    Step,
}

/// One recorded loss measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Number of evaluator calls made up to and including this record
    /// (unchanged when the value came from the noiseless cache).
    pub evaluation: usize,
    /// Sweep the record belongs to (1-based).
    pub sweep: usize,
    /// Coordinate being worked, by name ("" for the baseline).
    pub coordinate: String,
    /// What the measurement was for.
    pub kind: EvaluationKind,
    /// Full angle vector at the measurement.
    pub angles_deg: Vec<f64>,
    /// Measured loss.
    pub loss: f64,
    /// Gradient estimate that produced a [`EvaluationKind::Step`] record.
    pub gradient: Option<f64>,
    /// Best loss observed so far, this record included.
    pub best_loss: f64,
    /// `true` when the value was reused from the noiseless cache.
    pub cached: bool,
}

/// Full record of one coordinate-descent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    /// Coordinate names, in optimization order.
    pub coordinate_names: Vec<String>,
    /// Starting angles (recorded explicitly: results are meaningless without
    /// them).
    pub initial_angles_deg: Vec<f64>,
    /// Every loss measurement, in order.
    pub steps: Vec<TraceStep>,
    /// Angles of the best measurement.
    pub best_angles_deg: Vec<f64>,
    /// Smallest loss ever measured.
    pub best_loss: f64,
    /// Total evaluator calls.
    pub n_evaluations: usize,
    /// Completed sweeps over all coordinates.
    pub n_sweeps: usize,
    /// `true` when the run aborted because evaluations kept failing.
    pub failed: bool,
}

/// Bookkeeping shared by every measurement in one descent run.
struct DescentState<'a, E: ?Sized> {
    evaluator: &'a mut E,
    use_cache: bool,
    cache: HashMap<Vec<u64>, f64>,
    grid: f64,
    n_evaluations: usize,
    steps: Vec<TraceStep>,
    best_loss: f64,
    best_angles: Vec<f64>,
    failed: bool,
}

impl<'a, E: LossEvaluator + ?Sized> DescentState<'a, E> {
    /// Canonical domain representative: wrapped to [0°, 180°), then snapped.
    fn canonical(&self, angle_deg: f64) -> f64 {
        snap_to_grid(wrap_half_turn(angle_deg), self.grid)
    }

    /// Measures (or recalls) the loss at `angles`, recording a trace entry.
    /// Returns `None` when evaluation failed beyond the retry budget, which
    /// also sets the failure flag.
    fn measure(
        &mut self,
        angles: &[f64],
        sweep: usize,
        coordinate: &str,
        kind: EvaluationKind,
        gradient: Option<f64>,
    ) -> Option<f64> {
        let canonical: Vec<f64> = angles.iter().map(|&a| self.canonical(a)).collect();
        let key: Vec<u64> = canonical.iter().map(|a| a.to_bits()).collect();
        let (loss, cached) = if self.use_cache && self.cache.contains_key(&key) {
            (self.cache[&key], true)
        } else {
            let mut outcome = None;
            for _ in 0..EVAL_RETRIES {
                match self.evaluator.evaluate(&canonical) {
                    Ok(l) => {
                        self.n_evaluations += 1;
                        outcome = Some(l);
                        break;
                    }
                    Err(_) => {
                        self.n_evaluations += 1;
                    }
                }
            }
            match outcome {
                Some(l) => {
                    if self.use_cache {
                        self.cache.insert(key, l);
                    }
                    (l, false)
                }
                None => {
                    self.failed = true;
                    return None;
                }
            }
        };
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_angles = canonical.clone();
        }
        self.steps.push(TraceStep {
            evaluation: self.n_evaluations,
            sweep,
            coordinate: coordinate.to_string(),
            kind,
            angles_deg: canonical,
            loss,
            gradient,
            best_loss: self.best_loss,
            cached,
        });
        Some(loss)
    }
}

/// Tunes the angles by alternating one-coordinate gradient descent.
///
/// For each coordinate in round-robin order the driver estimates the
/// gradient by central differences, steps `ν ← snap(ν − η·g)` — promoting
/// sub-grid updates to a single grid step in the descent direction so
/// quantization alone can never stall progress — and repeats until the loss
/// fails to improve for `patience` consecutive steps (strict improvement,
/// floored at 1e-12) or the iteration cap is hit.  The coordinate is then
/// fixed at the best value measured during the pass — finite-difference
/// probes included, since their losses were measured all the same — and the
/// next coordinate starts.  Sweeps repeat until one pass over every
/// coordinate brings no improvement.  Angles stay in [0°, 180°).
///
/// Persistent evaluation failures abort the run and are reported through the
/// trace's `failed` flag rather than an error, so partial traces survive.
pub fn coordinate_descent<E: LossEvaluator + ?Sized>(
    evaluator: &mut E,
    initial_angles_deg: &[f64],
    config: &OptimizerConfig,
) -> Result<OptimizationTrace> {
    config.validate()?;
    let names = evaluator.coordinate_names();
    if names.len() != initial_angles_deg.len() {
        return Err(QelmError::ShapeMismatch {
            context: "coordinate_descent",
            expected: format!("{} initial angles", names.len()),
            found: format!("{}", initial_angles_deg.len()),
        });
    }
    if initial_angles_deg.iter().any(|a| !a.is_finite()) {
        return Err(QelmError::invalid("initial angles", "must be finite"));
    }
    let use_cache = evaluator.noiseless();
    let mut state = DescentState {
        evaluator,
        use_cache,
        cache: HashMap::new(),
        grid: config.angle_grid_deg,
        n_evaluations: 0,
        steps: Vec::new(),
        best_loss: f64::INFINITY,
        best_angles: Vec::new(),
        failed: false,
    };
    let mut angles: Vec<f64> = initial_angles_deg
        .iter()
        .map(|&a| state.canonical(a))
        .collect();
    let initial_angles = angles.clone();

    let mut current_loss = match state.measure(&angles, 0, "", EvaluationKind::Initial, None) {
        Some(l) => l,
        None => {
            return Ok(finish_trace(state, names, initial_angles, 0));
        }
    };

    let mut n_sweeps = 0;
    'sweeps: loop {
        n_sweeps += 1;
        let sweep_start_best = state.best_loss;
        for (coord, name) in names.iter().enumerate() {
            // Candidates for pinning this coordinate: (value, loss) pairs
            // measured with all other coordinates at their current values.
            let mut candidates: Vec<(f64, f64)> = vec![(angles[coord], current_loss)];
            let mut pass_best_loss = current_loss;
            let mut bad_streak = 0usize;
            for _ in 0..config.max_iters_per_coordinate {
                let nu = angles[coord];
                let (plus, minus) =
                    probe_pair(nu, config.fd_step_deg, config.angle_grid_deg)?;
                let mut at = angles.clone();
                at[coord] = plus;
                let loss_plus =
                    match state.measure(&at, n_sweeps, name, EvaluationKind::ProbePlus, None) {
                        Some(l) => l,
                        None => break 'sweeps,
                    };
                at[coord] = minus;
                let loss_minus =
                    match state.measure(&at, n_sweeps, name, EvaluationKind::ProbeMinus, None) {
                        Some(l) => l,
                        None => break 'sweeps,
                    };
                candidates.push((plus, loss_plus));
                candidates.push((minus, loss_minus));
                pass_best_loss = pass_best_loss.min(loss_plus).min(loss_minus);
                let gradient = (loss_plus - loss_minus) / (plus - minus);
                if gradient == 0.0 {
                    break; // perfectly flat: nowhere to go
                }
                let raw_update = config.learning_rate * gradient;
                let target = if config.angle_grid_deg > 0.0
                    && raw_update.abs() < config.angle_grid_deg
                {
                    // Promote sub-grid updates to one grid step downhill.
                    nu - raw_update.signum() * config.angle_grid_deg
                } else {
                    nu - raw_update
                };
                let stepped = state.canonical(target);
                if stepped == angles[coord] {
                    break; // quantization or wrap brought us back: stall
                }
                at[coord] = stepped;
                let loss_step = match state.measure(
                    &at,
                    n_sweeps,
                    name,
                    EvaluationKind::Step,
                    Some(gradient),
                ) {
                    Some(l) => l,
                    None => break 'sweeps,
                };
                angles[coord] = stepped;
                candidates.push((stepped, loss_step));
                if pass_best_loss - loss_step > IMPROVEMENT_FLOOR {
                    pass_best_loss = loss_step;
                    bad_streak = 0;
                } else {
                    bad_streak += 1;
                    if bad_streak >= config.patience {
                        break;
                    }
                }
            }
            // Fix the coordinate at the best value measured in this pass.
            let (pin_value, pin_loss) = candidates
                .iter()
                .copied()
                .fold(None, |best: Option<(f64, f64)>, (v, l)| match best {
                    Some((_, bl)) if bl <= l => best,
                    _ => Some((v, l)),
                })
                .expect("at least the starting point is a candidate");
            angles[coord] = state.canonical(pin_value);
            current_loss = pin_loss;
        }
        if sweep_start_best - state.best_loss <= IMPROVEMENT_FLOOR {
            break;
        }
    }
    Ok(finish_trace(state, names, initial_angles, n_sweeps))
}

fn finish_trace<E: LossEvaluator + ?Sized>(
    state: DescentState<'_, E>,
    names: Vec<String>,
    initial_angles: Vec<f64>,
    n_sweeps: usize,
) -> OptimizationTrace {
    let best_angles = if state.best_angles.is_empty() {
        initial_angles.clone()
    } else {
        state.best_angles.clone()
    };
    OptimizationTrace {
        coordinate_names: names,
        initial_angles_deg: initial_angles,
        best_angles_deg: best_angles,
        best_loss: state.best_loss,
        n_evaluations: state.n_evaluations,
        n_sweeps,
        failed: state.failed,
        steps: state.steps,
    }
}

/// One axis of a rectangular settings scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    /// First nominal value, in degrees.
    pub start_deg: f64,
    /// Nominal spacing, in degrees.
    pub step_deg: f64,
    /// Number of cells along the axis.
    pub count: usize,
}

impl GridAxis {
    /// Nominal value of cell `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.start_deg + self.step_deg * i as f64
    }

    /// Checks the axis domain (used by scans and config validation).
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(QelmError::invalid("count", "must be at least 1"));
        }
        if !self.start_deg.is_finite() || !self.step_deg.is_finite() || self.step_deg < 0.0 {
            return Err(QelmError::invalid(
                "grid axis",
                "start_deg and step_deg must be finite, step_deg non-negative",
            ));
        }
        Ok(())
    }
}

/// Specification of a landscape scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    /// Mount resolution the nominal cell angles are snapped to before
    /// evaluation (0 = none).  (Scalar fields come first so the spec
    /// serializes to valid TOML.)
    pub grid_step_deg: f64,
    /// Loss evaluations per cell; values ≥ 2 produce a per-cell uncertainty
    /// (sample standard deviation across redraws).
    pub resamples: usize,
    /// Axis for the first coordinate (rows).
    pub axis1: GridAxis,
    /// Axis for the second coordinate (columns).
    pub axis2: GridAxis,
}

/// One evaluated cell of a landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    /// Row index (axis 1).
    pub row: usize,
    /// Column index (axis 2).
    pub col: usize,
    /// First coordinate actually evaluated (nominal value snapped to the
    /// mount grid).
    pub angle1_deg: f64,
    /// Second coordinate actually evaluated.
    pub angle2_deg: f64,
    /// Mean loss over the resamples; `None` when every attempt failed.
    pub loss: Option<f64>,
    /// Sample standard deviation across resamples (when ≥ 2 succeeded).
    pub uncertainty: Option<f64>,
}

/// A scanned loss landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    /// Row axis.
    pub axis1: GridAxis,
    /// Column axis.
    pub axis2: GridAxis,
    /// All cells, row-major.
    pub cells: Vec<LandscapeCell>,
    /// Row-major indices of the first cell attaining the minimal mean loss;
    /// `None` when no cell evaluated successfully.
    pub argmin: Option<(usize, usize)>,
}

impl LandscapeGrid {
    /// Cell at (row, col).
    pub fn cell(&self, row: usize, col: usize) -> &LandscapeCell {
        &self.cells[row * self.axis2.count + col]
    }

    /// Dense loss matrix with NaN marking failed cells.
    pub fn loss_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.axis1.count, self.axis2.count, |r, c| {
            self.cell(r, c).loss.unwrap_or(f64::NAN)
        })
    }

    /// Mean loss at the argmin cell.
    pub fn min_loss(&self) -> Option<f64> {
        self.argmin.and_then(|(r, c)| self.cell(r, c).loss)
    }
}

/// Maps the loss over a rectangular grid of settings for a two-coordinate
/// evaluator.
///
/// Cells are independent and may run in parallel; each gets its own
/// evaluator built by `factory` from the derived seed `base_seed ⊕ cell
/// index`, so results do not depend on scheduling.  A cell whose
/// evaluations all fail is recorded as missing instead of aborting the
/// scan.  Ties for the minimum resolve to the first cell in row-major
/// order.
pub fn landscape_scan<E, F>(
    factory: F,
    spec: &LandscapeSpec,
    base_seed: u64,
) -> Result<LandscapeGrid>
where
    E: LossEvaluator,
    F: Fn(u64) -> Result<E> + Sync,
{
    spec.axis1.validate()?;
    spec.axis2.validate()?;
    if !spec.grid_step_deg.is_finite() || spec.grid_step_deg < 0.0 {
        return Err(QelmError::invalid(
            "grid step",
            "must be finite and non-negative",
        ));
    }
    let n_cells = spec.axis1.count * spec.axis2.count;
    let reps = spec.resamples.max(1);
    let cells: Vec<LandscapeCell> = (0..n_cells)
        .into_par_iter()
        .map(|idx| {
            let row = idx / spec.axis2.count;
            let col = idx % spec.axis2.count;
            let a1 = snap_to_grid(spec.axis1.value(row), spec.grid_step_deg);
            let a2 = snap_to_grid(spec.axis2.value(col), spec.grid_step_deg);
            let mut losses = Vec::with_capacity(reps);
            if let Ok(mut evaluator) = factory(base_seed ^ idx as u64) {
                for _ in 0..reps {
                    if let Ok(l) = evaluator.evaluate(&[a1, a2]) {
                        losses.push(l);
                    }
                }
            }
            let loss = if losses.is_empty() {
                None
            } else {
                Some(losses.iter().sum::<f64>() / losses.len() as f64)
            };
            let uncertainty = if losses.len() >= 2 {
                let mean = loss.expect("non-empty");
                let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
                    / (losses.len() - 1) as f64;
                Some(var.sqrt())
            } else {
                None
            };
            LandscapeCell {
                row,
                col,
                angle1_deg: a1,
                angle2_deg: a2,
                loss,
                uncertainty,
            }
        })
        .collect();
    let mut argmin = None;
    let mut best = f64::INFINITY;
    for cell in &cells {
        if let Some(l) = cell.loss {
            if l < best {
                best = l;
                argmin = Some((cell.row, cell.col));
            }
        }
    }
    Ok(LandscapeGrid {
        axis1: spec.axis1,
        axis2: spec.axis2,
        cells,
        argmin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn quadratic_bowl(center: (f64, f64), curvature: (f64, f64)) -> impl FnMut(&[f64]) -> Result<f64> {
        move |angles: &[f64]| {
            let d1 = angles[0] - center.0;
            let d2 = angles[1] - center.1;
            Ok(curvature.0 * d1 * d1 + curvature.1 * d2 * d2)
        }
    }

    #[test]
    fn central_difference_is_exact_on_quadratics() {
        let mut eval = fn_loss(&["nu"], true, |a: &[f64]| Ok(a[0] * a[0]));
        let g = finite_diff_gradient(&mut eval, &[1.0], 0, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(g, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut eval = fn_loss(&["nu"], true, |_: &[f64]| Ok(0.37));
        let g = finite_diff_gradient(&mut eval, &[42.0], 0, 2.87, 0.1).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn swallowed_displacement_is_a_grid_collision() {
        let mut eval = fn_loss(&["nu"], true, |a: &[f64]| Ok(a[0]));
        match finite_diff_gradient(&mut eval, &[0.0], 0, 0.04, 0.1) {
            Err(QelmError::GridCollision { .. }) => {}
            other => panic!("expected grid collision, got {other:?}"),
        }
    }

    #[test]
    fn gradient_error_shrinks_quadratically_in_the_step() {
        // Smooth loss with a non-vanishing third derivative along ν, no
        // quantization.  A Richardson extrapolation at a tiny step serves as
        // the reference derivative.
        let f = |a: &[f64]| Ok((3.0 * a[0].to_radians()).sin() + 0.5 * (7.0 * a[0].to_radians()).cos());
        let at = [20.0];
        let mut eval = fn_loss(&["nu"], true, f);
        let d = |eval: &mut FnLoss<_>, eps: f64| {
            finite_diff_gradient(eval, &at, 0, eps, 0.0).unwrap()
        };
        let reference = {
            let fine = d(&mut eval, 0.0625);
            let coarse = d(&mut eval, 0.125);
            (4.0 * fine - coarse) / 3.0
        };
        let errors: Vec<f64> = [2.0, 1.0, 0.5]
            .iter()
            .map(|&eps| (d(&mut eval, eps) - reference).abs())
            .collect();
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (3.5..=4.5).contains(&ratio),
                "halving ε should quarter the error; got ratio {ratio:.3} from {errors:?}"
            );
        }
    }

    #[test]
    fn descent_finds_a_separable_bowl_minimum_quickly() {
        let mut eval = fn_loss(
            &["theta", "phi"],
            true,
            quadratic_bowl((50.3, 120.1), (0.5, 0.7)),
        );
        let config = OptimizerConfig::default();
        let trace = coordinate_descent(&mut eval, &[30.0, 100.0], &config).unwrap();
        assert!(!trace.failed);
        assert!(
            trace.n_evaluations <= 50,
            "bowl should cost at most 50 evaluations, took {}",
            trace.n_evaluations
        );
        assert!(
            (trace.best_angles_deg[0] - 50.3).abs() <= 0.1 + 1e-9,
            "theta ended at {}",
            trace.best_angles_deg[0]
        );
        assert!(
            (trace.best_angles_deg[1] - 120.1).abs() <= 0.1 + 1e-9,
            "phi ended at {}",
            trace.best_angles_deg[1]
        );
    }

    #[test]
    fn initial_grid_minimum_terminates_in_one_sweep() {
        let mut eval = fn_loss(
            &["theta", "phi"],
            true,
            quadratic_bowl((60.0, 90.0), (0.4, 0.4)),
        );
        let trace =
            coordinate_descent(&mut eval, &[60.0, 90.0], &OptimizerConfig::default()).unwrap();
        assert_eq!(trace.n_sweeps, 1);
        assert_eq!(trace.best_angles_deg, vec![60.0, 90.0]);
    }

    #[test]
    fn best_loss_is_monotone_in_evaluation_order() {
        let mut eval = fn_loss(
            &["theta", "phi"],
            true,
            quadratic_bowl((10.0, 170.0), (0.9, 0.3)),
        );
        let trace =
            coordinate_descent(&mut eval, &[88.8, 22.2], &OptimizerConfig::default()).unwrap();
        let mut prev = f64::INFINITY;
        for step in &trace.steps {
            assert!(step.best_loss <= prev + 1e-15);
            assert!(step.best_loss <= step.loss + 1e-15);
            prev = step.best_loss;
        }
        assert_abs_diff_eq!(
            trace.best_loss,
            trace.steps.iter().map(|s| s.loss).fold(f64::INFINITY, f64::min),
            epsilon = 0.0
        );
    }

    #[test]
    fn every_evaluated_angle_lies_on_the_grid() {
        let mut eval = fn_loss(&["theta", "phi"], true, |a: &[f64]| {
            for &angle in a {
                let k = (angle / 0.1).round();
                assert!(
                    (angle - k * 0.1).abs() < 1e-9,
                    "angle {angle} is off the 0.1° grid"
                );
                assert!((0.0..180.0).contains(&angle), "angle {angle} left [0°, 180°)");
            }
            quadratic_bowl((100.0, 40.0), (0.6, 0.6))(a)
        });
        let trace =
            coordinate_descent(&mut eval, &[171.33, 8.05], &OptimizerConfig::default()).unwrap();
        assert!(!trace.failed);
        for step in &trace.steps {
            for &angle in &step.angles_deg {
                assert!((0.0..180.0).contains(&angle));
            }
        }
    }

    #[test]
    fn noiseless_revisits_hit_the_cache() {
        let mut eval = fn_loss(
            &["theta", "phi"],
            true,
            quadratic_bowl((50.0, 100.0), (0.5, 0.5)),
        );
        let trace =
            coordinate_descent(&mut eval, &[40.0, 90.0], &OptimizerConfig::default()).unwrap();
        assert!(
            trace.steps.iter().any(|s| s.cached),
            "descent should revisit at least one settings point"
        );
        let fresh_calls = trace.steps.iter().filter(|s| !s.cached).count();
        assert_eq!(trace.n_evaluations, fresh_calls);
    }

    #[test]
    fn noisy_descent_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let mut rng = crate::SimRng::seed_from_u64(99);
            let noise = Normal::new(0.0, 1e-3).unwrap();
            let mut bowl = quadratic_bowl((70.0, 30.0), (0.5, 0.5));
            let mut eval = fn_loss(&["theta", "phi"], false, move |a: &[f64]| {
                Ok(bowl(a)? + noise.sample(&mut rng))
            });
            let config = OptimizerConfig {
                max_iters_per_coordinate: 10,
                ..OptimizerConfig::default()
            };
            coordinate_descent(&mut eval, &[50.0, 50.0], &config).unwrap()
        };
        let t1 = run();
        let t2 = run();
        assert_eq!(
            serde_json::to_string(&t1).unwrap(),
            serde_json::to_string(&t2).unwrap()
        );
        // Noisy runs must not reuse results.
        assert!(t1.steps.iter().all(|s| !s.cached));
    }

    #[test]
    fn failing_evaluator_sets_the_failure_flag() {
        let mut eval = fn_loss(&["theta", "phi"], false, |_: &[f64]| {
            Err(QelmError::DegenerateInput("detector offline".into()))
        });
        let trace =
            coordinate_descent(&mut eval, &[10.0, 20.0], &OptimizerConfig::default()).unwrap();
        assert!(trace.failed);
        assert!(trace.steps.is_empty());
        assert_eq!(trace.best_angles_deg, vec![10.0, 20.0]);
    }

    #[test]
    fn landscape_scan_recovers_the_bowl_minimum() {
        let spec = LandscapeSpec {
            axis1: GridAxis {
                start_deg: 0.0,
                step_deg: 9.47,
                count: 20,
            },
            axis2: GridAxis {
                start_deg: 0.0,
                step_deg: 9.47,
                count: 20,
            },
            grid_step_deg: 0.1,
            resamples: 1,
        };
        let grid = landscape_scan(
            |_seed| {
                Ok(fn_loss(
                    &["theta", "phi"],
                    true,
                    quadratic_bowl((94.7, 47.35), (1.0, 1.0)),
                ))
            },
            &spec,
            0,
        )
        .unwrap();
        assert_eq!(grid.cells.len(), 400);
        // Axis layout: nominal spacing is preserved, evaluated angles are
        // snapped to the mount grid.
        assert_abs_diff_eq!(grid.axis1.value(3), 28.41, epsilon = 1e-12);
        assert_abs_diff_eq!(grid.cell(3, 0).angle1_deg, 28.4, epsilon = 1e-9);
        // Cell (10, 5) is the nominal center of the bowl.
        assert_eq!(grid.argmin, Some((10, 5)));
        let min = grid.min_loss().unwrap();
        assert!(min < grid.cell(0, 0).loss.unwrap());
    }

    #[test]
    fn constant_landscape_breaks_ties_row_major() {
        let spec = LandscapeSpec {
            axis1: GridAxis {
                start_deg: 0.0,
                step_deg: 10.0,
                count: 4,
            },
            axis2: GridAxis {
                start_deg: 0.0,
                step_deg: 10.0,
                count: 4,
            },
            grid_step_deg: 0.1,
            resamples: 1,
        };
        let grid = landscape_scan(
            |_seed| Ok(fn_loss(&["theta", "phi"], true, |_: &[f64]| Ok(1.0))),
            &spec,
            7,
        )
        .unwrap();
        assert_eq!(grid.argmin, Some((0, 0)));
    }

    #[test]
    fn failed_cells_are_missing_not_fatal() {
        let spec = LandscapeSpec {
            axis1: GridAxis {
                start_deg: 0.0,
                step_deg: 45.0,
                count: 3,
            },
            axis2: GridAxis {
                start_deg: 0.0,
                step_deg: 45.0,
                count: 3,
            },
            grid_step_deg: 0.1,
            resamples: 1,
        };
        let grid = landscape_scan(
            |_seed| {
                Ok(fn_loss(&["theta", "phi"], false, |a: &[f64]| {
                    if a[0] == 45.0 && a[1] == 45.0 {
                        Err(QelmError::DegenerateInput("dead cell".into()))
                    } else {
                        Ok(a[0] + a[1])
                    }
                }))
            },
            &spec,
            0,
        )
        .unwrap();
        assert!(grid.cell(1, 1).loss.is_none());
        assert_eq!(grid.argmin, Some((0, 0)));
        assert_eq!(grid.cells.iter().filter(|c| c.loss.is_some()).count(), 8);
    }

    #[test]
    fn resampled_cells_report_spread_and_derived_seeds_are_stable() {
        let spec = LandscapeSpec {
            axis1: GridAxis {
                start_deg: 10.0,
                step_deg: 5.0,
                count: 2,
            },
            axis2: GridAxis {
                start_deg: 20.0,
                step_deg: 5.0,
                count: 2,
            },
            grid_step_deg: 0.1,
            resamples: 25,
        };
        let factory = |seed: u64| {
            let mut rng = crate::SimRng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.05).unwrap();
            Ok(fn_loss(&["theta", "phi"], false, move |a: &[f64]| {
                Ok(a[0] * 0.01 + noise.sample(&mut rng))
            }))
        };
        let g1 = landscape_scan(factory, &spec, 1234).unwrap();
        let g2 = landscape_scan(factory, &spec, 1234).unwrap();
        assert_eq!(g1, g2, "scans with the same base seed must agree exactly");
        for cell in &g1.cells {
            let sigma = cell.uncertainty.expect("resampled cells carry uncertainty");
            assert!(sigma > 0.01 && sigma < 0.12, "implausible spread {sigma}");
        }
        let g3 = landscape_scan(factory, &spec, 77).unwrap();
        assert_ne!(g1.cells, g3.cells, "different seeds should redraw the noise");
    }

    #[test]
    fn noiseless_resamples_have_zero_spread() {
        let spec = LandscapeSpec {
            axis1: GridAxis {
                start_deg: 0.0,
                step_deg: 30.0,
                count: 2,
            },
            axis2: GridAxis {
                start_deg: 0.0,
                step_deg: 30.0,
                count: 2,
            },
            grid_step_deg: 0.1,
            resamples: 5,
        };
        let grid = landscape_scan(
            |_seed| Ok(fn_loss(&["theta", "phi"], true, |a: &[f64]| Ok(a[0] - a[1]))),
            &spec,
            0,
        )
        .unwrap();
        for cell in &grid.cells {
            assert_abs_diff_eq!(cell.uncertainty.unwrap(), 0.0, epsilon = 0.0);
        }
    }

    #[test]
    fn config_domains_are_enforced() {
        let mut bad = OptimizerConfig::default();
        bad.learning_rate = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = OptimizerConfig::default();
        bad.fd_step_deg = 0.05; // below the 0.1° grid
        assert!(bad.validate().is_err());
        let mut bad = OptimizerConfig::default();
        bad.minibatch_size = 0;
        assert!(bad.validate().is_err());
        let mut ok = OptimizerConfig::default();
        ok.angle_grid_deg = 0.0;
        ok.fd_step_deg = 0.05; // fine on a continuous mount
        assert!(ok.validate().is_ok());
    }
}
