//! Linear optics on the polarization ⊗ OAM space of a single photon.
//!
//! The building blocks are standard Jones-calculus wave plates, which act on
//! polarization only, and q-plates, which convert polarization handedness
//! while shifting the orbital angular momentum (OAM) by ±2q quanta.  A
//! [`WalkSpec`] chains such elements into a quantum walk: wave plates play
//! the role of the coin, q-plates of the conditional shift.
//!
//! # Mode bookkeeping
//!
//! Physical OAM is unbounded, so any finite simulation must pick a register.
//! Here the register declared in a [`WalkSpec`] is the *measurement window*:
//! the set of modes the detectors resolve.  Internally the walk is assembled
//! on a larger register, padded on both sides by the total shift capacity of
//! the element chain, so that amplitudes launched anywhere inside the window
//! propagate without ever touching an artificial boundary.  Columns of the
//! padded walk matrix that start inside the window therefore form an exact
//! isometry.
//!
//! Whether population that *ends* outside the window is acceptable is a
//! policy question: discarding it is harmless for post-selected detection
//! but silently breaks probability normalization.  [`TruncationPolicy`]
//! makes the choice explicit, and the default refuses to discard.
//!
//! Basis conventions: polarization is ordered (H, V) and joint indices are
//! polarization-major, so a state vector on a register of `L` modes has
//! layout `[H(m_min) … H(m_max), V(m_min) … V(m_max)]`.  Circular components
//! are `|L⟩ = (|H⟩ + i|V⟩)/√2` and `|R⟩ = (|H⟩ − i|V⟩)/√2`.

use crate::error::{QelmError, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Default angular resolution of motorized plate mounts, in degrees.
pub const DEFAULT_GRID_STEP_DEG: f64 = 0.1;

/// Numerical tolerance below which an amplitude is treated as absent when
/// tracking which OAM modes a walk can populate.
const SUPPORT_EPS: f64 = 1e-15;

fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Linear polarization basis label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    /// Horizontal.
    H,
    /// Vertical.
    V,
}

impl Polarization {
    /// Position of this basis state in vector/matrix layouts: H = 0, V = 1.
    pub fn index(self) -> usize {
        match self {
            Polarization::H => 0,
            Polarization::V => 1,
        }
    }

    /// Both labels in layout order.
    pub const BOTH: [Polarization; 2] = [Polarization::H, Polarization::V];
}

/// A normalized pure polarization state.
#[derive(Debug, Clone, PartialEq)]
pub struct JonesVector {
    coeffs: Vector2<Complex64>,
}

impl JonesVector {
    /// Builds a state from (possibly unnormalized) H and V amplitudes and
    /// normalizes it.  Fails on a zero or non-finite vector.
    pub fn new(c_h: Complex64, c_v: Complex64) -> Result<Self> {
        let norm_sq = c_h.norm_sqr() + c_v.norm_sqr();
        if !norm_sq.is_finite() {
            return Err(QelmError::invalid("jones vector", "non-finite amplitude"));
        }
        if norm_sq <= 0.0 {
            return Err(QelmError::DegenerateInput(
                "jones vector has zero norm".into(),
            ));
        }
        let scale = norm_sq.sqrt();
        Ok(JonesVector {
            coeffs: Vector2::new(c_h / scale, c_v / scale),
        })
    }

    /// |H⟩.
    pub fn horizontal() -> Self {
        JonesVector::new(c64(1.0, 0.0), c64(0.0, 0.0)).expect("unit vector")
    }

    /// |V⟩.
    pub fn vertical() -> Self {
        JonesVector::new(c64(0.0, 0.0), c64(1.0, 0.0)).expect("unit vector")
    }

    /// |D⟩ = (|H⟩ + |V⟩)/√2.
    pub fn diagonal() -> Self {
        JonesVector::new(c64(1.0, 0.0), c64(1.0, 0.0)).expect("unit vector")
    }

    /// |A⟩ = (|H⟩ − |V⟩)/√2.
    pub fn antidiagonal() -> Self {
        JonesVector::new(c64(1.0, 0.0), c64(-1.0, 0.0)).expect("unit vector")
    }

    /// |L⟩ = (|H⟩ + i|V⟩)/√2.
    pub fn circular_left() -> Self {
        JonesVector::new(c64(1.0, 0.0), c64(0.0, 1.0)).expect("unit vector")
    }

    /// |R⟩ = (|H⟩ − i|V⟩)/√2.
    pub fn circular_right() -> Self {
        JonesVector::new(c64(1.0, 0.0), c64(0.0, -1.0)).expect("unit vector")
    }

    /// Amplitude on the given basis state.
    pub fn component(&self, pol: Polarization) -> Complex64 {
        self.coeffs[pol.index()]
    }

    /// The underlying (H, V) coefficient vector.
    pub fn as_vector(&self) -> &Vector2<Complex64> {
        &self.coeffs
    }

    /// Rank-one density matrix |ψ⟩⟨ψ|.
    pub fn density_matrix(&self) -> Matrix2<Complex64> {
        let v = &self.coeffs;
        Matrix2::from_fn(|r, c| v[r] * v[c].conj())
    }
}

/// A contiguous range of OAM modes `m_min ..= m_max`.
///
/// Registers always contain `m = 0`, the mode on which light enters the walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRegister", into = "RawRegister")]
pub struct OamRegister {
    m_min: i64,
    m_max: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegister {
    m_min: i64,
    m_max: i64,
}

impl TryFrom<RawRegister> for OamRegister {
    type Error = QelmError;
    fn try_from(raw: RawRegister) -> Result<Self> {
        OamRegister::new(raw.m_min, raw.m_max)
    }
}

impl From<OamRegister> for RawRegister {
    fn from(reg: OamRegister) -> Self {
        RawRegister {
            m_min: reg.m_min,
            m_max: reg.m_max,
        }
    }
}

impl OamRegister {
    /// Builds a register spanning `m_min ..= m_max`; the range must bracket
    /// the input mode `m = 0`.
    pub fn new(m_min: i64, m_max: i64) -> Result<Self> {
        if m_min > 0 || m_max < 0 {
            return Err(QelmError::invalid(
                "oam register",
                format!("range [{m_min}, {m_max}] must contain the input mode m = 0"),
            ));
        }
        Ok(OamRegister { m_min, m_max })
    }

    /// Lowest mode.
    pub fn m_min(&self) -> i64 {
        self.m_min
    }

    /// Highest mode.
    pub fn m_max(&self) -> i64 {
        self.m_max
    }

    /// Number of modes.
    pub fn len(&self) -> usize {
        (self.m_max - self.m_min + 1) as usize
    }

    /// `true` iff the register holds exactly one mode (m = 0).
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Iterates modes in increasing order.
    pub fn modes(&self) -> impl Iterator<Item = i64> {
        self.m_min..=self.m_max
    }

    /// Whether `m` lies inside the register.
    pub fn contains(&self, m: i64) -> bool {
        (self.m_min..=self.m_max).contains(&m)
    }

    /// Zero-based position of `m`, if inside.
    pub fn index_of(&self, m: i64) -> Option<usize> {
        self.contains(m).then(|| (m - self.m_min) as usize)
    }

    /// Mode at zero-based position `idx`.
    pub fn mode_at(&self, idx: usize) -> i64 {
        self.m_min + idx as i64
    }

    /// The register grown by `pad` modes on each side.
    pub fn expanded(&self, pad: i64) -> OamRegister {
        OamRegister {
            m_min: self.m_min - pad,
            m_max: self.m_max + pad,
        }
    }
}

impl Default for OamRegister {
    /// The five-mode window `[-2, 2]` resolved by the reference detection
    /// stage.
    fn default() -> Self {
        OamRegister { m_min: -2, m_max: 2 }
    }
}

/// Jones matrix of a half-wave plate with its fast axis at `theta_deg`
/// degrees from horizontal.
pub fn hwp_matrix(theta_deg: f64) -> Matrix2<Complex64> {
    let two_theta = 2.0 * theta_deg.to_radians();
    let (s, c) = two_theta.sin_cos();
    Matrix2::new(c64(c, 0.0), c64(s, 0.0), c64(s, 0.0), c64(-c, 0.0))
}

/// Jones matrix of a quarter-wave plate with its fast axis at `phi_deg`
/// degrees from horizontal.
pub fn qwp_matrix(phi_deg: f64) -> Matrix2<Complex64> {
    let phi = phi_deg.to_radians();
    let (s, c) = phi.sin_cos();
    let off = c64(s * c, -s * c);
    Matrix2::new(
        c64(c * c, s * s),
        off,
        off,
        c64(s * s, c * c),
    )
}

/// Unitary change of basis whose columns are |L⟩ and |R⟩ in (H, V)
/// coordinates: circular coefficients map to linear ones as `x_lin = B x_circ`.
pub fn circular_basis_matrix() -> Matrix2<Complex64> {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    Matrix2::new(c64(r, 0.0), c64(r, 0.0), c64(0.0, r), c64(0.0, -r))
}

/// Flat serialized form of an element; conversion enforces that exactly the
/// fields of the named kind are present, with unknown keys rejected.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    charge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retardation_rad: Option<f64>,
}

impl TryFrom<RawElement> for OpticalElement {
    type Error = QelmError;

    fn try_from(raw: RawElement) -> Result<Self> {
        let require = |field: &'static str, value: Option<f64>| {
            value.ok_or_else(|| {
                QelmError::invalid(field, format!("required for kind \"{}\"", raw.kind))
            })
        };
        let forbid = |field: &'static str, value: Option<f64>| {
            if value.is_some() {
                Err(QelmError::invalid(
                    field,
                    format!("not a parameter of kind \"{}\"", raw.kind),
                ))
            } else {
                Ok(())
            }
        };
        match raw.kind.as_str() {
            "half_wave_plate" | "quarter_wave_plate" => {
                let angle_deg = require("angle_deg", raw.angle_deg)?;
                forbid("charge", raw.charge)?;
                forbid("retardation_rad", raw.retardation_rad)?;
                Ok(if raw.kind == "half_wave_plate" {
                    OpticalElement::HalfWavePlate { angle_deg }
                } else {
                    OpticalElement::QuarterWavePlate { angle_deg }
                })
            }
            "q_plate" => {
                forbid("angle_deg", raw.angle_deg)?;
                Ok(OpticalElement::QPlate {
                    charge: require("charge", raw.charge)?,
                    retardation_rad: require("retardation_rad", raw.retardation_rad)?,
                })
            }
            other => Err(QelmError::invalid(
                "kind",
                format!(
                    "unknown element kind \"{other}\"; expected half_wave_plate, \
                     quarter_wave_plate, or q_plate"
                ),
            )),
        }
    }
}

impl From<OpticalElement> for RawElement {
    fn from(element: OpticalElement) -> Self {
        match element {
            OpticalElement::HalfWavePlate { angle_deg } => RawElement {
                kind: "half_wave_plate".into(),
                angle_deg: Some(angle_deg),
                charge: None,
                retardation_rad: None,
            },
            OpticalElement::QuarterWavePlate { angle_deg } => RawElement {
                kind: "quarter_wave_plate".into(),
                angle_deg: Some(angle_deg),
                charge: None,
                retardation_rad: None,
            },
            OpticalElement::QPlate {
                charge,
                retardation_rad,
            } => RawElement {
                kind: "q_plate".into(),
                angle_deg: None,
                charge: Some(charge),
                retardation_rad: Some(retardation_rad),
            },
        }
    }
}

/// One element of a walk chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawElement", into = "RawElement")]
pub enum OpticalElement {
    /// Half-wave plate; acts on polarization only.
    HalfWavePlate {
        /// Fast-axis angle in degrees.
        angle_deg: f64,
    },
    /// Quarter-wave plate; acts on polarization only.
    QuarterWavePlate {
        /// Fast-axis angle in degrees.
        angle_deg: f64,
    },
    /// q-plate of topological charge `q` and tunable retardation δ.
    ///
    /// In the circular basis it leaves a fraction cos(δ/2) of each amplitude
    /// untouched and converts the rest with handedness flip and OAM shift:
    /// |L, m⟩ → cos(δ/2)|L, m⟩ + i sin(δ/2)|R, m + 2q⟩ and
    /// |R, m⟩ → cos(δ/2)|R, m⟩ + i sin(δ/2)|L, m − 2q⟩.
    QPlate {
        /// Topological charge; must be a half-integer so the OAM shift 2q is
        /// an integer number of quanta.
        charge: f64,
        /// Retardation δ in radians: 0 = inert, π = full conversion.
        retardation_rad: f64,
    },
}

impl OpticalElement {
    /// Checks angle/charge domains.
    pub fn validate(&self) -> Result<()> {
        match *self {
            OpticalElement::HalfWavePlate { angle_deg }
            | OpticalElement::QuarterWavePlate { angle_deg } => {
                if !angle_deg.is_finite() {
                    return Err(QelmError::invalid("plate angle", "must be finite"));
                }
            }
            OpticalElement::QPlate {
                charge,
                retardation_rad,
            } => {
                if !retardation_rad.is_finite() {
                    return Err(QelmError::invalid("q-plate retardation", "must be finite"));
                }
                let doubled = 2.0 * charge;
                if !doubled.is_finite() || (doubled - doubled.round()).abs() > 1e-9 {
                    return Err(QelmError::invalid(
                        "q-plate charge",
                        format!("{charge} is not a half-integer"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Magnitude-signed OAM shift this element applies to converted
    /// amplitudes (0 for pure wave plates, 2q for a q-plate).
    pub fn oam_shift(&self) -> i64 {
        match *self {
            OpticalElement::QPlate { charge, .. } => (2.0 * charge).round() as i64,
            _ => 0,
        }
    }

    /// Matrix of the element on `polarization ⊗ register`, in the
    /// polarization-major linear basis.
    ///
    /// For a q-plate, converted amplitudes whose target mode falls outside
    /// `register` are dropped; embed the element in a sufficiently padded
    /// register (as [`WalkSpec::build`] does) to avoid that.
    pub fn matrix_on(&self, register: &OamRegister) -> DMatrix<Complex64> {
        let l = register.len();
        match *self {
            OpticalElement::HalfWavePlate { angle_deg } => {
                kron_pol(&hwp_matrix(angle_deg), l)
            }
            OpticalElement::QuarterWavePlate { angle_deg } => {
                kron_pol(&qwp_matrix(angle_deg), l)
            }
            OpticalElement::QPlate {
                retardation_rad, ..
            } => {
                let shift = self.oam_shift();
                let half = 0.5 * retardation_rad;
                let keep = c64(half.cos(), 0.0);
                let convert = c64(0.0, half.sin());
                // Assemble in the circular-major basis [L(m…), R(m…)] first.
                let mut q_circ = DMatrix::<Complex64>::zeros(2 * l, 2 * l);
                for (i, m) in register.modes().enumerate() {
                    // |L, m⟩ column.
                    q_circ[(i, i)] = keep;
                    if let Some(t) = register.index_of(m + shift) {
                        q_circ[(l + t, i)] = convert;
                    }
                    // |R, m⟩ column.
                    q_circ[(l + i, l + i)] = keep;
                    if let Some(t) = register.index_of(m - shift) {
                        q_circ[(t, l + i)] = convert;
                    }
                }
                let b = kron_pol(&circular_basis_matrix(), l);
                &b * q_circ * b.adjoint()
            }
        }
    }
}

/// Kronecker product `jones ⊗ I_L` in the polarization-major layout.
fn kron_pol(jones: &Matrix2<Complex64>, l: usize) -> DMatrix<Complex64> {
    let j = DMatrix::from_fn(2, 2, |r, c| jones[(r, c)]);
    j.kronecker(&DMatrix::<Complex64>::identity(l, l))
}

/// What to do when a walk can deposit population outside the measurement
/// window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationPolicy {
    /// Refuse to build the walk (the default): every reachable mode must be
    /// detectable, so outcome probabilities stay complete.
    #[default]
    Error,
    /// Build anyway; amplitudes outside the window are simply never
    /// detected, so measured probabilities may sum to less than one.
    Truncate,
}

/// Declarative description of a walk: an ordered element chain, the OAM
/// measurement window, and the out-of-window policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkSpec {
    /// Policy for population that ends outside the window.  (Scalar fields
    /// come first so the spec serializes to valid TOML.)
    #[serde(default)]
    pub truncation: TruncationPolicy,
    /// OAM modes resolved by the detection stage.
    #[serde(default)]
    pub register: OamRegister,
    /// Elements in the order light traverses them.
    pub elements: Vec<OpticalElement>,
}

impl WalkSpec {
    /// The crate's reference reservoir: a two-step polarization–OAM walk
    /// (coin plate + half-converting q-plate, twice) that spreads the input
    /// mode over all five window modes and whose post-selected detection
    /// statistics are informationally complete for one polarization qubit.
    pub fn reference() -> Self {
        WalkSpec {
            elements: vec![
                OpticalElement::HalfWavePlate { angle_deg: 22.5 },
                OpticalElement::QPlate {
                    charge: 0.5,
                    retardation_rad: std::f64::consts::FRAC_PI_2,
                },
                OpticalElement::QuarterWavePlate { angle_deg: 30.0 },
                OpticalElement::QPlate {
                    charge: 0.5,
                    retardation_rad: std::f64::consts::FRAC_PI_2,
                },
            ],
            register: OamRegister::default(),
            truncation: TruncationPolicy::Error,
        }
    }

    /// Total OAM distance the chain can move an amplitude, i.e. the padding
    /// needed so no in-window input ever reaches the simulation boundary.
    pub fn shift_capacity(&self) -> i64 {
        self.elements.iter().map(|e| e.oam_shift().abs()).sum()
    }

    /// Assembles the walk operator on the padded register and checks the
    /// truncation policy.
    pub fn build(&self) -> Result<WalkOperator> {
        for e in &self.elements {
            e.validate()?;
        }
        let padded = self.register.expanded(self.shift_capacity());
        let dim = 2 * padded.len();
        let mut matrix = DMatrix::<Complex64>::identity(dim, dim);
        // Track which modes an amplitude entering at m = 0 can reach.  The
        // tracking ignores polarization and interference, so it can
        // overestimate the support but never miss a reachable mode.
        let mut support: BTreeSet<i64> = BTreeSet::from([0]);
        for e in &self.elements {
            matrix = e.matrix_on(&padded) * matrix;
            if let OpticalElement::QPlate {
                retardation_rad, ..
            } = e
            {
                let half = 0.5 * retardation_rad;
                let keeps = half.cos().abs() > SUPPORT_EPS;
                let converts = half.sin().abs() > SUPPORT_EPS;
                let shift = e.oam_shift();
                let mut next = BTreeSet::new();
                for &m in &support {
                    if keeps {
                        next.insert(m);
                    }
                    if converts {
                        next.insert(m + shift);
                        next.insert(m - shift);
                    }
                }
                support = next;
            }
        }
        let leaked: Vec<i64> = support
            .iter()
            .copied()
            .filter(|&m| !self.register.contains(m))
            .collect();
        if !leaked.is_empty() && self.truncation == TruncationPolicy::Error {
            return Err(QelmError::Truncation {
                window_min: self.register.m_min(),
                window_max: self.register.m_max(),
                leaked,
            });
        }
        Ok(WalkOperator {
            matrix,
            window: self.register,
            padded,
            reachable: support.into_iter().collect(),
        })
    }
}

/// A walk assembled on its padded register.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkOperator {
    matrix: DMatrix<Complex64>,
    window: OamRegister,
    padded: OamRegister,
    reachable: Vec<i64>,
}

impl WalkOperator {
    /// The full operator on the padded register (polarization-major).
    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// Modes the detection stage resolves.
    pub fn window(&self) -> &OamRegister {
        &self.window
    }

    /// Register the walk was actually assembled on.
    pub fn padded(&self) -> &OamRegister {
        &self.padded
    }

    /// Sorted list of modes an input at m = 0 can populate (conservative:
    /// ignores destructive interference).
    pub fn reachable(&self) -> &[i64] {
        &self.reachable
    }

    /// Row/column index of |pol, m⟩ in the padded layout, if m is inside the
    /// padded register.
    pub fn padded_index(&self, pol: Polarization, m: i64) -> Option<usize> {
        self.padded
            .index_of(m)
            .map(|i| pol.index() * self.padded.len() + i)
    }

    /// The padded-basis column the walk produces from |pol, m = 0⟩.
    pub fn input_column(&self, pol: Polarization) -> DVector<Complex64> {
        let idx = self
            .padded_index(pol, 0)
            .expect("registers always contain m = 0");
        self.matrix.column(idx).into_owned()
    }

    /// Restriction of the walk to inputs inside the measurement window: a
    /// `2·L_padded × 2·L_window` matrix whose columns are exactly isometric
    /// because the padding absorbs every reachable shift.
    pub fn window_isometry(&self) -> DMatrix<Complex64> {
        let lw = self.window.len();
        let mut iso = DMatrix::<Complex64>::zeros(self.matrix.nrows(), 2 * lw);
        for pol in Polarization::BOTH {
            for (i, m) in self.window.modes().enumerate() {
                let src = self
                    .padded_index(pol, m)
                    .expect("window is contained in the padded register");
                iso.set_column(pol.index() * lw + i, &self.matrix.column(src));
            }
        }
        iso
    }
}

/// Snaps an angle to the nearest multiple of `step_deg` (ties away from
/// zero).  A zero step disables snapping.
pub fn snap_to_grid(angle_deg: f64, step_deg: f64) -> f64 {
    if step_deg == 0.0 {
        angle_deg
    } else {
        (angle_deg / step_deg).round() * step_deg
    }
}

/// Reduces an angle to the fundamental half-turn domain `[0°, 180°)`, inside
/// which every wave-plate Jones matrix is periodic.
pub fn wrap_half_turn(angle_deg: f64) -> f64 {
    angle_deg.rem_euclid(180.0)
}

/// Fast-axis angles of the projection stage (HWP followed by QWP) in front
/// of the polarizer, quantized to the mount resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSettings", into = "RawSettings")]
pub struct MeasurementSettings {
    theta_deg: f64,
    phi_deg: f64,
    grid_step_deg: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSettings {
    theta_deg: f64,
    phi_deg: f64,
    #[serde(default = "default_grid")]
    grid_step_deg: f64,
}

fn default_grid() -> f64 {
    DEFAULT_GRID_STEP_DEG
}

impl TryFrom<RawSettings> for MeasurementSettings {
    type Error = QelmError;
    fn try_from(raw: RawSettings) -> Result<Self> {
        MeasurementSettings::with_grid(raw.theta_deg, raw.phi_deg, raw.grid_step_deg)
    }
}

impl From<MeasurementSettings> for RawSettings {
    fn from(s: MeasurementSettings) -> Self {
        RawSettings {
            theta_deg: s.theta_deg,
            phi_deg: s.phi_deg,
            grid_step_deg: s.grid_step_deg,
        }
    }
}

impl MeasurementSettings {
    /// Builds settings on the default 0.1° mount grid; the requested angles
    /// are snapped to the nearest grid node.
    pub fn new(theta_deg: f64, phi_deg: f64) -> Result<Self> {
        MeasurementSettings::with_grid(theta_deg, phi_deg, DEFAULT_GRID_STEP_DEG)
    }

    /// Builds settings on an explicit grid.  `grid_step_deg = 0` disables
    /// quantization (an idealized continuous mount).
    pub fn with_grid(theta_deg: f64, phi_deg: f64, grid_step_deg: f64) -> Result<Self> {
        if !theta_deg.is_finite() || !phi_deg.is_finite() {
            return Err(QelmError::invalid("measurement angle", "must be finite"));
        }
        if !grid_step_deg.is_finite() || grid_step_deg < 0.0 {
            return Err(QelmError::invalid(
                "grid step",
                "must be finite and non-negative",
            ));
        }
        Ok(MeasurementSettings {
            theta_deg: snap_to_grid(theta_deg, grid_step_deg),
            phi_deg: snap_to_grid(phi_deg, grid_step_deg),
            grid_step_deg,
        })
    }

    /// HWP fast-axis angle, in degrees (already snapped).
    pub fn theta_deg(&self) -> f64 {
        self.theta_deg
    }

    /// QWP fast-axis angle, in degrees (already snapped).
    pub fn phi_deg(&self) -> f64 {
        self.phi_deg
    }

    /// Mount resolution, in degrees (0 = continuous).
    pub fn grid_step_deg(&self) -> f64 {
        self.grid_step_deg
    }

    /// Integer grid coordinates `(theta, phi)` in units of the grid step;
    /// `None` on a continuous mount.
    pub fn grid_index(&self) -> Option<(i64, i64)> {
        (self.grid_step_deg > 0.0).then(|| {
            (
                (self.theta_deg / self.grid_step_deg).round() as i64,
                (self.phi_deg / self.grid_step_deg).round() as i64,
            )
        })
    }

    /// Same grid, different angles.
    pub fn with_angles(&self, theta_deg: f64, phi_deg: f64) -> Result<Self> {
        MeasurementSettings::with_grid(theta_deg, phi_deg, self.grid_step_deg)
    }

    /// Jones matrix of the projection stage: QWP(φ) · HWP(θ).  Post-selected
    /// detection keeps the H component of its output.
    pub fn projection_jones(&self) -> Matrix2<Complex64> {
        qwp_matrix(self.phi_deg) * hwp_matrix(self.theta_deg)
    }
}

/// Post-selected single-line transfer matrix.
///
/// Entry `(m, μ)` is the amplitude ⟨H, m| (QWP·HWP ⊗ I) U |μ, m = 0⟩: the
/// walk `U` followed by the projection stage, keeping the horizontal output
/// port, resolved on the OAM measurement window.  Columns are indexed by the
/// input polarization (H, V), rows by window mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    matrix: DMatrix<Complex64>,
    register: OamRegister,
}

impl TransferMatrix {
    /// The `L × 2` amplitude matrix.
    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// OAM window the rows run over.
    pub fn register(&self) -> &OamRegister {
        &self.register
    }

    /// Number of resolved output modes.
    pub fn n_modes(&self) -> usize {
        self.register.len()
    }

    /// Largest singular value; ≤ 1 because the transfer is a compression of
    /// a unitary process (projection discards the V output port and any
    /// out-of-window population).
    pub fn max_singular_value(&self) -> f64 {
        self.matrix
            .clone()
            .singular_values()
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
    }

    /// Measurement operators on the input polarization qubit: detecting mode
    /// m implements the rank-one POVM element E_m = t_m† t_m built from row
    /// m, so p_m = tr(E_m ρ).
    pub fn povm_elements(&self) -> Vec<Matrix2<Complex64>> {
        (0..self.n_modes())
            .map(|r| {
                let t0 = self.matrix[(r, 0)];
                let t1 = self.matrix[(r, 1)];
                Matrix2::new(
                    t0.conj() * t0,
                    t0.conj() * t1,
                    t1.conj() * t0,
                    t1.conj() * t1,
                )
            })
            .collect()
    }
}

/// Computes the post-selected transfer matrix of one walk line at the given
/// projection settings.
pub fn effective_transfer(walk: &WalkOperator, settings: &MeasurementSettings) -> TransferMatrix {
    let proj = settings.projection_jones();
    let lp = walk.padded().len();
    let lw = walk.window().len();
    let mut t = DMatrix::<Complex64>::zeros(lw, 2);
    for pol_in in Polarization::BOTH {
        let col = walk.input_column(pol_in);
        for (row, m) in walk.window().modes().enumerate() {
            let i = walk.padded().index_of(m).expect("window inside padding");
            let h = col[i];
            let v = col[lp + i];
            t[(row, pol_in.index())] = proj[(0, 0)] * h + proj[(0, 1)] * v;
        }
    }
    TransferMatrix {
        matrix: t,
        register: *walk.window(),
    }
}

/// Transfer matrices of both lines of a two-photon interferometer.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLineTransfer {
    line1: TransferMatrix,
    line2: TransferMatrix,
}

impl TwoLineTransfer {
    /// Pairs two independently computed lines; they may differ in walk and
    /// settings but the joint conventions assume both resolve OAM windows.
    pub fn new(line1: TransferMatrix, line2: TransferMatrix) -> Self {
        TwoLineTransfer { line1, line2 }
    }

    /// First line (photon 1).
    pub fn line1(&self) -> &TransferMatrix {
        &self.line1
    }

    /// Second line (photon 2).
    pub fn line2(&self) -> &TransferMatrix {
        &self.line2
    }

    /// Joint transfer on the two-photon amplitudes: the Kronecker product
    /// `T₁ ⊗ T₂` of shape `L₁L₂ × 4`.  Row `(m, n)` sits at `m·L₂ + n`,
    /// column `(μ, ν)` at `2μ + ν`.
    pub fn kron(&self) -> DMatrix<Complex64> {
        self.line1.matrix.kronecker(&self.line2.matrix)
    }
}

/// Builds both lines of a two-photon device from per-line walks and
/// projection settings.
pub fn two_line_transfer(
    walk1: &WalkOperator,
    settings1: &MeasurementSettings,
    walk2: &WalkOperator,
    settings2: &MeasurementSettings,
) -> TwoLineTransfer {
    TwoLineTransfer::new(
        effective_transfer(walk1, settings1),
        effective_transfer(walk2, settings2),
    )
}
