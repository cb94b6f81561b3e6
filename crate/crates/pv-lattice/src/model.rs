//! Domain types and parameter physics: cell/panel/array aggregation and the
//! irradiance/temperature dependence of the five single-diode parameters.
//!
//! All types are immutable after construction and all operations are pure, so
//! everything here is safe to share across threads.

use serde::Serialize;
use thiserror::Error;

/// Elementary charge, C (2019 SI exact value).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Boltzmann constant, J/K (2019 SI exact value).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Boltzmann constant expressed in eV/K, for exponents with band-gap energies.
pub const BOLTZMANN_EV: f64 = BOLTZMANN / ELEMENTARY_CHARGE;

/// Irradiance floor applied before the shunt-resistance scaling law so a dark
/// panel keeps a finite shunt path. Photocurrent still sees the true
/// irradiance, including zero.
pub const SHUNT_IRRADIANCE_FLOOR: f64 = 1.0;

/// Largest admissible magnitude for the saturation-current exponent; beyond
/// this the result is meaningless in f64 and the input is rejected.
const SATURATION_EXP_LIMIT: f64 = 700.0;

/// Physical constants bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysConstants {
    /// Elementary charge (C).
    pub q: f64,
    /// Boltzmann constant (J/K).
    pub k: f64,
}

impl Default for PhysConstants {
    fn default() -> Self {
        Self {
            q: ELEMENTARY_CHARGE,
            k: BOLTZMANN,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name}: {value} ({reason})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("structural count {name} must be >= 1, got {value}")]
    InvalidCount { name: &'static str, value: usize },
    #[error("band gap is singular at T = 1108 K")]
    BandGapSingularity,
    #[error("saturation-current exponent {0} exceeds the overflow guard")]
    SaturationOverflow(f64),
    #[error("environment map is empty")]
    EmptyEnvMap,
    #[error("panel position ({row}, {col}) outside a {rows}x{cols} grid")]
    OutOfGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
}

fn require_positive(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter {
            name,
            value,
            reason: "must be finite and > 0",
        })
    }
}

/// Five-parameter single-diode description of a panel at reference conditions,
/// plus the structural counts and coefficients needed to move it to any
/// operating environment.
///
/// The same struct describes a single cell (`m_c = n_c = 1`), a panel, or an
/// aggregated array, since the model is closed under series/parallel scaling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelParams {
    /// Photocurrent at reference conditions (A).
    pub iph_ref: f64,
    /// Diode reverse saturation current at reference conditions (A).
    pub i0_ref: f64,
    /// Diode ideality factor (dimensionless).
    pub ideality: f64,
    /// Series resistance (Ohm); independent of irradiance and temperature.
    pub rs: f64,
    /// Shunt resistance at reference conditions (Ohm).
    pub rsh_ref: f64,
    /// Junctions in series (cells per string within the panel).
    pub m_c: usize,
    /// Cell strings in parallel within the panel.
    pub n_c: usize,
    /// Relative temperature coefficient of short-circuit current (1/K).
    pub gamma_t: f64,
    /// Reference irradiance (W/m^2).
    pub g_ref: f64,
    /// Reference temperature (K).
    pub t_ref: f64,
    /// Band-gap energy at the reference temperature (eV).
    pub eg_ref: f64,
}

impl PanelParams {
    /// Validates every invariant; call after literal construction.
    pub fn validate(&self) -> Result<(), ModelError> {
        require_positive("iph_ref", self.iph_ref)?;
        require_positive("i0_ref", self.i0_ref)?;
        require_positive("rs", self.rs)?;
        require_positive("rsh_ref", self.rsh_ref)?;
        require_positive("g_ref", self.g_ref)?;
        require_positive("t_ref", self.t_ref)?;
        require_positive("eg_ref", self.eg_ref)?;
        if !(0.5..=2.5).contains(&self.ideality) {
            return Err(ModelError::InvalidParameter {
                name: "ideality",
                value: self.ideality,
                reason: "must lie in [0.5, 2.5]",
            });
        }
        if !self.gamma_t.is_finite() {
            return Err(ModelError::InvalidParameter {
                name: "gamma_t",
                value: self.gamma_t,
                reason: "must be finite",
            });
        }
        if self.m_c == 0 {
            return Err(ModelError::InvalidCount {
                name: "m_c",
                value: 0,
            });
        }
        if self.n_c == 0 {
            return Err(ModelError::InvalidCount {
                name: "n_c",
                value: 0,
            });
        }
        Ok(())
    }
}

/// Plane-of-array irradiance and cell temperature for one panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvCondition {
    /// Irradiance (W/m^2), >= 0.
    pub g: f64,
    /// Cell temperature (K), > 0.
    pub t: f64,
}

impl EnvCondition {
    pub fn new(g: f64, t: f64) -> Result<Self, ModelError> {
        if !g.is_finite() || g < 0.0 {
            return Err(ModelError::InvalidParameter {
                name: "g",
                value: g,
                reason: "must be finite and >= 0",
            });
        }
        require_positive("t", t)?;
        Ok(Self { g, t })
    }
}

/// The five operating-point parameters of one panel after irradiance and
/// temperature adjustment. This is all the solver needs per panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolvedPanel {
    /// Operating photocurrent (A).
    pub iph: f64,
    /// Operating saturation current (A).
    pub i0: f64,
    /// Thermal voltage of the whole junction stack (V).
    pub alpha: f64,
    /// Series resistance (Ohm).
    pub rs: f64,
    /// Operating shunt resistance (Ohm).
    pub rsh: f64,
}

impl ResolvedPanel {
    /// Open-circuit voltage of the internal diode, used for solver seeding and
    /// sweep-range estimation. Zero for a dark panel.
    pub fn open_circuit_estimate(&self) -> f64 {
        if self.iph <= 0.0 {
            0.0
        } else {
            self.alpha * (self.iph / self.i0).ln_1p()
        }
    }
}

/// Saturation current and thermal voltage of a bare diode (used for bypass
/// diodes, and as the argument bundle of the Shockley characteristic).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiodeParams {
    /// Saturation current (A).
    pub i0: f64,
    /// Thermal voltage (V).
    pub alpha: f64,
}

impl DiodeParams {
    pub fn new(i0: f64, alpha: f64) -> Result<Self, ModelError> {
        require_positive("i0", i0)?;
        require_positive("alpha", alpha)?;
        Ok(Self { i0, alpha })
    }

    /// Builds a bypass diode from its conduction threshold: thermal voltage of
    /// an ideality-1 junction at 300 K, saturation current chosen so the diode
    /// carries 1 A at `threshold_v`.
    pub fn from_threshold(threshold_v: f64) -> Result<Self, ModelError> {
        require_positive("threshold_v", threshold_v)?;
        let alpha = BOLTZMANN * 300.0 / ELEMENTARY_CHARGE;
        let i0 = 1.0 / (threshold_v / alpha).exp_m1();
        Ok(Self { i0, alpha })
    }
}

/// Dense row-major grid used for per-panel quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.data.iter()
    }
}

impl<T> std::ops::Index<(usize, usize)> for Grid<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Per-panel environment assignment over an `m_p x n_p` array grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    grid: Grid<EnvCondition>,
}

impl EnvMap {
    pub fn uniform(rows: usize, cols: usize, env: EnvCondition) -> Result<Self, ModelError> {
        if rows == 0 || cols == 0 {
            return Err(ModelError::EmptyEnvMap);
        }
        Ok(Self {
            grid: Grid::filled(rows, cols, env),
        })
    }

    pub fn set(&mut self, row: usize, col: usize, env: EnvCondition) -> Result<(), ModelError> {
        if row >= self.grid.rows() || col >= self.grid.cols() {
            return Err(ModelError::OutOfGrid {
                row,
                col,
                rows: self.grid.rows(),
                cols: self.grid.cols(),
            });
        }
        self.grid[(row, col)] = env;
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> EnvCondition {
        self.grid[(row, col)]
    }

    pub fn rows(&self) -> usize {
        self.grid.rows()
    }

    pub fn cols(&self) -> usize {
        self.grid.cols()
    }

    /// Arithmetic mean irradiance over all panels.
    pub fn mean_g(&self) -> f64 {
        let n = (self.rows() * self.cols()) as f64;
        self.grid.iter().map(|e| e.g).sum::<f64>() / n
    }

    /// Arithmetic mean temperature over all panels.
    pub fn mean_t(&self) -> f64 {
        let n = (self.rows() * self.cols()) as f64;
        self.grid.iter().map(|e| e.t).sum::<f64>() / n
    }
}

/// How the array terminal is driven when solving an operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Drive {
    /// Grid-equivalent load resistance (Ohm) across the terminals.
    Impedance(f64),
    /// Terminal voltage held at a fixed value (V).
    Voltage(f64),
}

impl Drive {
    pub fn validate(&self) -> Result<(), ModelError> {
        match *self {
            Drive::Impedance(z) => require_positive("z_load", z),
            Drive::Voltage(v) => {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err(ModelError::InvalidParameter {
                        name: "v_set",
                        value: v,
                        reason: "must be finite",
                    })
                }
            }
        }
    }
}

/// Which circuit formulation a model (and anything derived from it) represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ModelTag {
    #[serde(rename = "SDM_A")]
    SdmA,
    #[serde(rename = "PPDM_A")]
    PpdmA,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelTag::SdmA => write!(f, "SDM_A"),
            ModelTag::PpdmA => write!(f, "PPDM_A"),
        }
    }
}

/// A fully resolved series/parallel array: `m_p` panels per string, `n_p`
/// strings in parallel, with optional per-panel bypass diodes and ideal
/// per-string block diodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayModel {
    pub m_p: usize,
    pub n_p: usize,
    pub panels: Grid<ResolvedPanel>,
    pub bypass: Option<DiodeParams>,
    pub block_diodes: bool,
    pub drive: Drive,
    pub tag: ModelTag,
}

impl ArrayModel {
    /// Resolves one panel description over an environment map into a per-panel
    /// array model.
    pub fn build(
        panel: &PanelParams,
        env: &EnvMap,
        bypass: Option<DiodeParams>,
        block_diodes: bool,
        drive: Drive,
    ) -> Result<Self, ModelError> {
        panel.validate()?;
        drive.validate()?;
        let mut resolved = Vec::with_capacity(env.rows() * env.cols());
        for r in 0..env.rows() {
            for c in 0..env.cols() {
                resolved.push(resolve_panel(panel, &env.get(r, c))?);
            }
        }
        Ok(Self {
            m_p: env.rows(),
            n_p: env.cols(),
            panels: Grid::from_fn(env.rows(), env.cols(), |r, c| resolved[r * env.cols() + c]),
            bypass,
            block_diodes,
            drive,
            tag: ModelTag::PpdmA,
        })
    }

    /// Wraps already-aggregated, already-resolved array parameters as a 1x1
    /// circuit. Solving it reproduces the three aggregated array equations.
    pub fn aggregated(resolved: ResolvedPanel, drive: Drive) -> Result<Self, ModelError> {
        drive.validate()?;
        Ok(Self {
            m_p: 1,
            n_p: 1,
            panels: Grid::filled(1, 1, resolved),
            bypass: None,
            block_diodes: false,
            drive,
            tag: ModelTag::SdmA,
        })
    }

    /// Same topology and panels, different terminal drive.
    pub fn with_drive(&self, drive: Drive) -> Self {
        Self {
            drive,
            ..self.clone()
        }
    }

    pub fn panel(&self, row: usize, col: usize) -> &ResolvedPanel {
        &self.panels[(row, col)]
    }

    /// Largest per-string open-circuit estimate; an upper bound on the array
    /// open-circuit voltage.
    pub fn open_circuit_estimate(&self) -> f64 {
        (0..self.n_p)
            .map(|j| {
                (0..self.m_p)
                    .map(|i| self.panels[(i, j)].open_circuit_estimate())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Sum of all panel photocurrents divided by panels per string: the scale
    /// of the array short-circuit current, used for tolerance normalization.
    pub fn short_circuit_scale(&self) -> f64 {
        (0..self.n_p)
            .map(|j| {
                (0..self.m_p)
                    .map(|i| self.panels[(i, j)].iph)
                    .fold(f64::INFINITY, f64::min)
                    .max(0.0)
            })
            .sum()
    }
}

fn scaled(
    params: &PanelParams,
    series: usize,
    parallel: usize,
    name_series: &'static str,
    name_parallel: &'static str,
) -> Result<PanelParams, ModelError> {
    params.validate()?;
    if series == 0 {
        return Err(ModelError::InvalidCount {
            name: name_series,
            value: 0,
        });
    }
    if parallel == 0 {
        return Err(ModelError::InvalidCount {
            name: name_parallel,
            value: 0,
        });
    }
    let (m, n) = (series as f64, parallel as f64);
    Ok(PanelParams {
        iph_ref: params.iph_ref * n,
        i0_ref: params.i0_ref * n,
        rs: params.rs * m / n,
        rsh_ref: params.rsh_ref * m / n,
        m_c: params.m_c * series,
        n_c: params.n_c * parallel,
        ..params.clone()
    })
}

/// Scales a single-cell parameter set (`m_c = n_c = 1`) up to a panel with
/// `m_c` cells in series and `n_c` cell strings in parallel: current-like
/// quantities multiply by `n_c`, the thermal voltage by `m_c` (via the stored
/// junction count), and both resistances by `m_c / n_c`.
pub fn aggregate_cells_to_panel(
    cell: &PanelParams,
    m_c: usize,
    n_c: usize,
) -> Result<PanelParams, ModelError> {
    scaled(cell, m_c, n_c, "m_c", "n_c")
}

/// Scales a panel up to an `m_p`-series by `n_p`-parallel array under the
/// uniformity assumption, using the same laws as the cell-to-panel step.
pub fn aggregate_panels_to_array(
    panel: &PanelParams,
    m_p: usize,
    n_p: usize,
) -> Result<PanelParams, ModelError> {
    scaled(panel, m_p, n_p, "m_p", "n_p")
}

/// Photocurrent at the given environment: linear in irradiance with a linear
/// temperature correction.
pub fn photocurrent(params: &PanelParams, env: &EnvCondition) -> f64 {
    params.iph_ref * (env.g / params.g_ref) * (1.0 + params.gamma_t * (env.t - params.t_ref))
}

/// Band-gap energy (eV) as a function of temperature. The empirical form has a
/// pole at 1108 K, far above any operating temperature; that input is rejected.
pub fn band_gap(t: f64) -> Result<f64, ModelError> {
    if !(t > 0.0) {
        return Err(ModelError::InvalidParameter {
            name: "t",
            value: t,
            reason: "must be > 0",
        });
    }
    if t == 1108.0 {
        return Err(ModelError::BandGapSingularity);
    }
    Ok(1.16 - 7.02e-4 * (t * t / (t - 1108.0)))
}

/// Saturation current at temperature `t`: cubic prefactor with a band-gap
/// Boltzmann factor relative to the reference temperature.
pub fn saturation_current(params: &PanelParams, t: f64) -> Result<f64, ModelError> {
    let eg = band_gap(t)?;
    let exponent =
        params.eg_ref / (BOLTZMANN_EV * params.t_ref) - eg / (BOLTZMANN_EV * t);
    if exponent.abs() > SATURATION_EXP_LIMIT {
        return Err(ModelError::SaturationOverflow(exponent));
    }
    Ok(params.i0_ref * (t / params.t_ref).powi(3) * exponent.exp())
}

/// Shunt resistance scales linearly with irradiance. Rejects `g <= 0`; callers
/// that want dark-panel behaviour clamp to [`SHUNT_IRRADIANCE_FLOOR`] first,
/// as [`resolve_panel`] does.
pub fn shunt_resistance(params: &PanelParams, g: f64) -> Result<f64, ModelError> {
    require_positive("g", g)?;
    Ok(params.rsh_ref * (g / params.g_ref))
}

/// Thermal voltage of the panel's junction stack at temperature `t`.
pub fn thermal_voltage(params: &PanelParams, t: f64) -> f64 {
    params.ideality * BOLTZMANN * t * params.m_c as f64 / ELEMENTARY_CHARGE
}

/// Moves a reference parameter set to an operating environment. Photocurrent
/// evaluates at the true irradiance (zero allowed); the shunt law sees the
/// irradiance clamped to [`SHUNT_IRRADIANCE_FLOOR`] so the circuit stays
/// well-posed in the dark. Series resistance is environment-independent.
pub fn resolve_panel(
    params: &PanelParams,
    env: &EnvCondition,
) -> Result<ResolvedPanel, ModelError> {
    params.validate()?;
    if !env.g.is_finite() || env.g < 0.0 {
        return Err(ModelError::InvalidParameter {
            name: "g",
            value: env.g,
            reason: "must be finite and >= 0",
        });
    }
    let iph = photocurrent(params, env).max(0.0);
    let i0 = saturation_current(params, env.t)?;
    let rsh = shunt_resistance(params, env.g.max(SHUNT_IRRADIANCE_FLOOR))?;
    Ok(ResolvedPanel {
        iph,
        i0,
        alpha: thermal_voltage(params, env.t),
        rs: params.rs,
        rsh,
    })
}
