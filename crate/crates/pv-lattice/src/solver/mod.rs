//! Nonlinear DC operating-point solver for series/parallel PV arrays.
//!
//! # Unknowns and equations
//!
//! For an `m x n` array the state consists of one diode-node voltage per panel
//! (`vd`), the panel terminal voltages down each string (`vpv`, with the top
//! row tied to the array terminal and the bottom row grounded), one current
//! per string (`iout`), and the array terminal voltage (`varr`). Each panel
//! contributes two KCL equations:
//!
//! - node D: photocurrent against the diode, the shunt path, and the series
//!   resistance into the panel terminal;
//! - node P: series-resistance current against the string current, plus the
//!   bypass-diode current when bypass diodes are fitted.
//!
//! One more equation balances the string currents against the terminal drive
//! (load impedance or fixed voltage). After eliminating the tied and grounded
//! terminal rows the system has `2 m n + 1` unknowns.
//!
//! # Vector layout
//!
//! [`assemble_residual`], [`assemble_jacobian`], [`state_to_vec`] and
//! [`vec_to_state`] share one ordering: all node-D equations row-major, all
//! node-P equations row-major, then the terminal balance; unknowns are all
//! `vd` row-major, interior `vpv` rows 1..m-1 row-major, the string currents,
//! and `varr` last.
//!
//! # Method
//!
//! Damped Newton: full step, per-iteration cap on every diode-junction step,
//! then step-halving while the residual norm fails to decrease. The Newton
//! matrix is solved per string with a banded LU and the string/terminal
//! couplings are closed through a small dense Schur complement; a dense
//! factorization of the whole system is the fallback. Ideal per-string block
//! diodes are enforced by an active set: any string whose solved current is
//! negative is clamped to zero current with its top terminal voltage freed,
//! and the point is re-solved until the set is stable.

mod linear;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::model::{ArrayModel, DiodeParams, Drive, Grid, ModelError, ResolvedPanel};
use linear::{BandLu, BandMatrix};

/// Exponent ceiling for every diode characteristic. Beyond it the exponential
/// continues as its tangent line so residual and Jacobian stay consistent and
/// finite during early Newton steps.
pub const EXP_ARG_LIMIT: f64 = 60.0;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("newton iteration limit reached (residual {last_norm:.3e}, worst: {worst_equation})")]
    MaxIterations {
        last_norm: f64,
        worst_equation: String,
    },
    #[error("singular jacobian; parameters are degenerate")]
    SingularJacobian,
    #[error("block-diode active set failed to settle")]
    ActiveSetCycle,
    #[error("non-finite residual at {equation}")]
    NonFinite { equation: String },
    #[error("state dimensions {got:?} do not match model {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Newton iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Iteration limit per solve.
    pub max_iters: usize,
    /// Convergence threshold on the residual infinity norm (A).
    pub tol: f64,
    /// Maximum number of step halvings per iteration.
    pub damping: usize,
    /// Cap on the per-iteration change of any diode junction voltage (V).
    /// `None` derives twice the largest panel thermal voltage from the model.
    pub vd_limit: Option<f64>,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-9,
            damping: 30,
            vd_limit: None,
        }
    }
}

impl NewtonOptions {
    fn validate(&self) -> Result<(), SolverError> {
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(SolverError::Model(ModelError::InvalidParameter {
                name: "newton_options",
                value: self.tol,
                reason: "max_iters >= 1 and tol > 0 required",
            }));
        }
        if let Some(v) = self.vd_limit {
            if !(v > 0.0) {
                return Err(SolverError::Model(ModelError::InvalidParameter {
                    name: "vd_limit",
                    value: v,
                    reason: "must be > 0",
                }));
            }
        }
        Ok(())
    }
}

/// Full unknown vector in grid form.
///
/// `vpv` has `m + 1` rows: row `i` is the positive terminal of panel row `i`,
/// row `m` is the grounded bottom of every string. Row 0 equals `varr` for
/// every string whose block diode conducts; a blocked string's top terminal
/// floats below `varr`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverState {
    pub vd: Grid<f64>,
    pub vpv: Grid<f64>,
    pub iout: Vec<f64>,
    pub varr: f64,
}

impl SolverState {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            vd: Grid::filled(m, n, 0.0),
            vpv: Grid::filled(m + 1, n, 0.0),
            iout: vec![0.0; n],
            varr: 0.0,
        }
    }

    fn dims_match(&self, model: &ArrayModel) -> Result<(), SolverError> {
        let ok = self.vd.rows() == model.m_p
            && self.vd.cols() == model.n_p
            && self.vpv.rows() == model.m_p + 1
            && self.vpv.cols() == model.n_p
            && self.iout.len() == model.n_p;
        if ok {
            Ok(())
        } else {
            Err(SolverError::DimensionMismatch {
                expected: (model.m_p, model.n_p),
                got: (self.vd.rows(), self.vd.cols()),
            })
        }
    }
}

/// Equation residuals in the documented ordering, units A (the terminal row is
/// in V under voltage drive).
#[derive(Debug, Clone, PartialEq)]
pub struct Residual(pub Vec<f64>);

impl Residual {
    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// A converged operating point.
#[derive(Debug, Clone, Serialize)]
pub struct OperatingPoint {
    pub state: SolverState,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Per-string flag: `true` while the block diode conducts. All `true`
    /// when block diodes are disabled.
    pub active_blocks: Vec<bool>,
}

impl OperatingPoint {
    pub fn terminal_voltage(&self) -> f64 {
        self.state.varr
    }

    pub fn terminal_current(&self) -> f64 {
        self.state.iout.iter().sum()
    }

    pub fn power(&self) -> f64 {
        self.terminal_voltage() * self.terminal_current()
    }
}

/// Shockley evaluation with the tangent-line continuation past
/// [`EXP_ARG_LIMIT`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiodeEval {
    /// Diode current (A).
    pub current: f64,
    /// dI/dV (S), consistent with `current` everywhere including the clamp.
    pub slope: f64,
    /// Whether the exponent hit the clamp.
    pub clamped: bool,
}

/// Diode current and slope at junction voltage `v`.
pub fn shockley(d: &DiodeParams, v: f64) -> DiodeEval {
    let arg = v / d.alpha;
    if arg > EXP_ARG_LIMIT {
        let e = EXP_ARG_LIMIT.exp();
        DiodeEval {
            current: d.i0 * (e * (1.0 + (arg - EXP_ARG_LIMIT)) - 1.0),
            slope: d.i0 * e / d.alpha,
            clamped: true,
        }
    } else {
        let em1 = arg.exp_m1();
        DiodeEval {
            current: d.i0 * em1,
            slope: d.i0 * (em1 + 1.0) / d.alpha,
            clamped: false,
        }
    }
}

/// Diode current alone; see [`shockley`].
pub fn shockley_current(d: &DiodeParams, v: f64) -> f64 {
    shockley(d, v).current
}

/// Residual values and partial derivatives of one panel's two KCL equations
/// with respect to its adjacent node voltages.
struct PanelEval {
    nd: f64,
    np: f64,
    dnd_dvd: f64,
    dnd_dvp_top: f64,
    dnd_dvp_bot: f64,
    dnp_dvd: f64,
    dnp_dvp_top: f64,
    dnp_dvp_bot: f64,
}

fn eval_panel(
    p: &ResolvedPanel,
    bypass: Option<&DiodeParams>,
    vd: f64,
    vp_top: f64,
    vp_bot: f64,
    iout: f64,
) -> PanelEval {
    let junction = DiodeParams {
        i0: p.i0,
        alpha: p.alpha,
    };
    let d = shockley(&junction, vd - vp_bot);
    let nd = p.iph - d.current - (vd - vp_bot) / p.rsh - (vd - vp_top) / p.rs;
    let mut np = (vd - vp_top) / p.rs - iout;
    let mut dnp_dvp_top = -1.0 / p.rs;
    let mut dnp_dvp_bot = 0.0;
    if let Some(by) = bypass {
        let b = shockley(by, vp_bot - vp_top);
        np += b.current;
        dnp_dvp_top -= b.slope;
        dnp_dvp_bot += b.slope;
    }
    PanelEval {
        nd,
        np,
        dnd_dvd: -d.slope - 1.0 / p.rsh - 1.0 / p.rs,
        dnd_dvp_top: 1.0 / p.rs,
        dnd_dvp_bot: d.slope + 1.0 / p.rsh,
        dnp_dvd: 1.0 / p.rs,
        dnp_dvp_top,
        dnp_dvp_bot,
    }
}

// ---------------------------------------------------------------------------
// Public assembly in the documented ordering
// ---------------------------------------------------------------------------

/// Number of reduced unknowns / equations for a model.
pub fn system_size(model: &ArrayModel) -> usize {
    2 * model.m_p * model.n_p + 1
}

fn public_col_vd(model: &ArrayModel, i: usize, j: usize) -> usize {
    i * model.n_p + j
}

fn public_col_vpv(model: &ArrayModel, i: usize, j: usize) -> usize {
    debug_assert!(i >= 1 && i < model.m_p);
    model.m_p * model.n_p + (i - 1) * model.n_p + j
}

fn public_col_iout(model: &ArrayModel, j: usize) -> usize {
    model.m_p * model.n_p + (model.m_p - 1) * model.n_p + j
}

fn public_col_varr(model: &ArrayModel) -> usize {
    2 * model.m_p * model.n_p
}

/// Flattens a state into the documented unknown ordering.
pub fn state_to_vec(model: &ArrayModel, state: &SolverState) -> Vec<f64> {
    let (m, n) = (model.m_p, model.n_p);
    let mut x = vec![0.0; system_size(model)];
    for i in 0..m {
        for j in 0..n {
            x[public_col_vd(model, i, j)] = state.vd[(i, j)];
        }
    }
    for i in 1..m {
        for j in 0..n {
            x[public_col_vpv(model, i, j)] = state.vpv[(i, j)];
        }
    }
    for j in 0..n {
        x[public_col_iout(model, j)] = state.iout[j];
    }
    x[public_col_varr(model)] = state.varr;
    x
}

/// Rebuilds a state from the documented unknown ordering, re-tying the top
/// terminal row to `varr` and grounding the bottom row.
pub fn vec_to_state(model: &ArrayModel, x: &[f64]) -> SolverState {
    let (m, n) = (model.m_p, model.n_p);
    let varr = x[public_col_varr(model)];
    let mut state = SolverState::zeros(m, n);
    state.varr = varr;
    for j in 0..n {
        state.vpv[(0, j)] = varr;
        state.vpv[(m, j)] = 0.0;
    }
    for i in 0..m {
        for j in 0..n {
            state.vd[(i, j)] = x[public_col_vd(model, i, j)];
        }
    }
    for i in 1..m {
        for j in 0..n {
            state.vpv[(i, j)] = x[public_col_vpv(model, i, j)];
        }
    }
    for j in 0..n {
        state.iout[j] = x[public_col_iout(model, j)];
    }
    state
}

/// Evaluates every KCL residual at the given state. Terminal voltages are used
/// exactly as stored, so a point with blocked strings (top terminals detached
/// from `varr`) evaluates to its true residual.
pub fn assemble_residual(model: &ArrayModel, state: &SolverState) -> Result<Residual, SolverError> {
    state.dims_match(model)?;
    let (m, n) = (model.m_p, model.n_p);
    let mut r = vec![0.0; system_size(model)];
    for i in 0..m {
        for j in 0..n {
            let e = eval_panel(
                model.panel(i, j),
                model.bypass.as_ref(),
                state.vd[(i, j)],
                state.vpv[(i, j)],
                state.vpv[(i + 1, j)],
                state.iout[j],
            );
            r[i * n + j] = e.nd;
            r[m * n + i * n + j] = e.np;
        }
    }
    let total: f64 = state.iout.iter().sum();
    r[2 * m * n] = match model.drive {
        Drive::Impedance(z) => total - state.varr / z,
        Drive::Voltage(v) => state.varr - v,
    };
    Ok(Residual(r))
}

/// Analytic Jacobian of [`assemble_residual`] in the documented ordering,
/// with every string conducting (the top terminal row tied to `varr`).
/// Structurally this is one narrow band per string bordered by the string
/// currents, the terminal voltage, and the terminal balance row.
pub fn assemble_jacobian(
    model: &ArrayModel,
    state: &SolverState,
) -> Result<DMatrix<f64>, SolverError> {
    state.dims_match(model)?;
    let (m, n) = (model.m_p, model.n_p);
    let size = system_size(model);
    let mut jac = DMatrix::zeros(size, size);
    // Routes a terminal-voltage column: row 0 is varr, row m is ground.
    let vpv_col = |i: usize, j: usize| -> Option<usize> {
        if i == 0 {
            Some(public_col_varr(model))
        } else if i == m {
            None
        } else {
            Some(public_col_vpv(model, i, j))
        }
    };
    for i in 0..m {
        for j in 0..n {
            let e = eval_panel(
                model.panel(i, j),
                model.bypass.as_ref(),
                state.vd[(i, j)],
                state.vpv[(i, j)],
                state.vpv[(i + 1, j)],
                state.iout[j],
            );
            let row_nd = i * n + j;
            let row_np = m * n + i * n + j;
            let col_vd = public_col_vd(model, i, j);
            jac[(row_nd, col_vd)] += e.dnd_dvd;
            jac[(row_np, col_vd)] += e.dnp_dvd;
            if let Some(c) = vpv_col(i, j) {
                jac[(row_nd, c)] += e.dnd_dvp_top;
                jac[(row_np, c)] += e.dnp_dvp_top;
            }
            if let Some(c) = vpv_col(i + 1, j) {
                jac[(row_nd, c)] += e.dnd_dvp_bot;
                jac[(row_np, c)] += e.dnp_dvp_bot;
            }
            jac[(row_np, public_col_iout(model, j))] -= 1.0;
        }
    }
    let row_arr = 2 * m * n;
    match model.drive {
        Drive::Impedance(z) => {
            for j in 0..n {
                jac[(row_arr, public_col_iout(model, j))] = 1.0;
            }
            jac[(row_arr, public_col_varr(model))] = -1.0 / z;
        }
        Drive::Voltage(_) => {
            jac[(row_arr, public_col_varr(model))] = 1.0;
        }
    }
    Ok(jac)
}

// ---------------------------------------------------------------------------
// Reduced system under an active set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StringMode {
    Conducting,
    Blocked,
}

/// Index bookkeeping for the reduced vector under a given active set.
///
/// A conducting string stores `[vd_0, vpv_1, vd_1, .., vpv_{m-1}, vd_{m-1}]`
/// (its top terminal is `varr`, its current is a border unknown). A blocked
/// string stores `[vpv_0, vd_0, vpv_1, vd_1, ..]` and is fully decoupled
/// (current identically zero). Border unknowns are the conducting strings'
/// currents followed by `varr`.
struct ActiveLayout {
    m: usize,
    n: usize,
    modes: Vec<StringMode>,
    base: Vec<usize>,
    interior_len: usize,
    /// Conducting string indices, in border order.
    conducting: Vec<usize>,
}

impl ActiveLayout {
    fn new(model: &ArrayModel, modes: Vec<StringMode>) -> Self {
        let (m, n) = (model.m_p, model.n_p);
        let mut base = Vec::with_capacity(n);
        let mut off = 0;
        for mode in &modes {
            base.push(off);
            off += match mode {
                StringMode::Conducting => 2 * m - 1,
                StringMode::Blocked => 2 * m,
            };
        }
        let conducting = (0..n).filter(|&j| modes[j] == StringMode::Conducting).collect();
        Self {
            m,
            n,
            modes,
            base,
            interior_len: off,
            conducting,
        }
    }

    fn len(&self) -> usize {
        self.interior_len + self.conducting.len() + 1
    }

    fn idx_varr(&self) -> usize {
        self.len() - 1
    }

    fn idx_iout(&self, j: usize) -> Option<usize> {
        self.conducting
            .iter()
            .position(|&c| c == j)
            .map(|p| self.interior_len + p)
    }

    fn idx_vd(&self, i: usize, j: usize) -> usize {
        match self.modes[j] {
            StringMode::Conducting => self.base[j] + 2 * i,
            StringMode::Blocked => self.base[j] + 2 * i + 1,
        }
    }

    /// Column of `vpv[i][j]`; `None` for the grounded bottom row.
    fn idx_vpv(&self, i: usize, j: usize) -> Option<usize> {
        if i == self.m {
            return None;
        }
        match self.modes[j] {
            StringMode::Conducting => {
                if i == 0 {
                    Some(self.idx_varr())
                } else {
                    Some(self.base[j] + 2 * i - 1)
                }
            }
            StringMode::Blocked => Some(self.base[j] + 2 * i),
        }
    }

    fn vd(&self, x: &[f64], i: usize, j: usize) -> f64 {
        x[self.idx_vd(i, j)]
    }

    fn vpv(&self, x: &[f64], i: usize, j: usize) -> f64 {
        self.idx_vpv(i, j).map_or(0.0, |c| x[c])
    }

    fn iout(&self, x: &[f64], j: usize) -> f64 {
        self.idx_iout(j).map_or(0.0, |c| x[c])
    }

    /// Equation row of node D / node P for panel (i, j); node P of row 0 in a
    /// conducting string is a border row.
    fn row_nd(&self, i: usize, j: usize) -> usize {
        match self.modes[j] {
            StringMode::Conducting => self.base[j] + 2 * i,
            StringMode::Blocked => self.base[j] + 2 * i + 1,
        }
    }

    fn row_np(&self, i: usize, j: usize) -> Option<usize> {
        match self.modes[j] {
            StringMode::Conducting => {
                if i == 0 {
                    None
                } else {
                    Some(self.base[j] + 2 * i - 1)
                }
            }
            StringMode::Blocked => Some(self.base[j] + 2 * i),
        }
    }

    fn border_row_np0(&self, j: usize) -> Option<usize> {
        self.conducting
            .iter()
            .position(|&c| c == j)
            .map(|p| self.interior_len + p)
    }

    fn row_terminal(&self) -> usize {
        self.len() - 1
    }

    fn pack(&self, state: &SolverState) -> Vec<f64> {
        let mut x = vec![0.0; self.len()];
        for j in 0..self.n {
            for i in 0..self.m {
                x[self.idx_vd(i, j)] = state.vd[(i, j)];
                match self.modes[j] {
                    StringMode::Conducting => {
                        if i >= 1 {
                            x[self.idx_vpv(i, j).unwrap()] = state.vpv[(i, j)];
                        }
                    }
                    StringMode::Blocked => {
                        x[self.idx_vpv(i, j).unwrap()] = state.vpv[(i, j)];
                    }
                }
            }
            if let Some(c) = self.idx_iout(j) {
                x[c] = state.iout[j];
            }
        }
        x[self.idx_varr()] = state.varr;
        x
    }

    fn unpack(&self, x: &[f64]) -> SolverState {
        let mut state = SolverState::zeros(self.m, self.n);
        state.varr = x[self.idx_varr()];
        for j in 0..self.n {
            for i in 0..self.m {
                state.vd[(i, j)] = self.vd(x, i, j);
                state.vpv[(i, j)] = self.vpv(x, i, j);
            }
            state.vpv[(self.m, j)] = 0.0;
            state.iout[j] = self.iout(x, j);
        }
        state
    }

    fn equation_label(&self, row: usize) -> String {
        if row == self.row_terminal() {
            return "terminal current balance".to_string();
        }
        for j in 0..self.n {
            for i in 0..self.m {
                if self.row_nd(i, j) == row {
                    return format!("node D of panel ({}, {})", i + 1, j + 1);
                }
                if self.row_np(i, j) == Some(row) || self.border_row_np0(j) == Some(row) && i == 0 {
                    return format!("node P of panel ({}, {})", i + 1, j + 1);
                }
            }
        }
        format!("equation {row}")
    }
}

fn reduced_residual(layout: &ActiveLayout, model: &ArrayModel, x: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; layout.len()];
    for j in 0..layout.n {
        for i in 0..layout.m {
            let e = eval_panel(
                model.panel(i, j),
                model.bypass.as_ref(),
                layout.vd(x, i, j),
                layout.vpv(x, i, j),
                layout.vpv(x, i + 1, j),
                layout.iout(x, j),
            );
            r[layout.row_nd(i, j)] = e.nd;
            match layout.row_np(i, j) {
                Some(row) => r[row] = e.np,
                None => r[layout.border_row_np0(j).unwrap()] = e.np,
            }
        }
    }
    let total: f64 = (0..layout.n).map(|j| layout.iout(x, j)).sum();
    let varr = x[layout.idx_varr()];
    r[layout.row_terminal()] = match model.drive {
        Drive::Impedance(z) => total - varr / z,
        Drive::Voltage(v) => varr - v,
    };
    r
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// One assembled Newton system in bordered-banded form.
struct BorderedSystem {
    /// Per-string factored diagonal block.
    blocks: Vec<BandLu>,
    /// Per conducting string: `B^-1 e_iout`, `B^-1 e_varr`, `B^-1 f`.
    x_iout: Vec<Vec<f64>>,
    x_varr: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    /// Blocked strings only carry `B^-1 f`.
    schur: DMatrix<f64>,
    schur_rhs: DVector<f64>,
}

fn solve_newton_step(
    layout: &ActiveLayout,
    model: &ArrayModel,
    x: &[f64],
    r: &[f64],
) -> Result<Vec<f64>, SolverError> {
    match bordered_step(layout, model, x, r) {
        Ok(delta) => Ok(delta),
        // The Schur complement can be singular in degenerate corners even
        // when the full matrix is not; retry dense before giving up.
        Err(SolverError::SingularJacobian) => dense_step(layout, model, x, r),
        Err(e) => Err(e),
    }
}

fn bordered_step(
    layout: &ActiveLayout,
    model: &ArrayModel,
    x: &[f64],
    r: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let (m, _n) = (layout.m, layout.n);
    let na = layout.conducting.len();
    let mut sys = BorderedSystem {
        blocks: Vec::with_capacity(layout.n),
        x_iout: vec![Vec::new(); layout.n],
        x_varr: vec![Vec::new(); layout.n],
        y: Vec::with_capacity(layout.n),
        schur: DMatrix::zeros(na + 1, na + 1),
        schur_rhs: DVector::zeros(na + 1),
    };

    for j in 0..layout.n {
        let conducting = layout.modes[j] == StringMode::Conducting;
        let blk = if conducting { 2 * m - 1 } else { 2 * m };
        let ku = if conducting { 1 } else { 2 };
        let mut band = BandMatrix::zeros(blk, 1, ku);
        let mut e_iout = vec![0.0; blk];
        let mut e_varr = vec![0.0; blk];
        let mut f = vec![0.0; blk];
        // Border row of this string (node P of the top panel) over its own
        // interior columns, plus its entries in the Schur block.
        let mut f_row: Vec<(usize, f64)> = Vec::new();
        let mut c_iout = 0.0;
        let mut c_varr = 0.0;
        let mut g_np0 = 0.0;

        let local = |col: usize| col - layout.base[j];
        for i in 0..m {
            let e = eval_panel(
                model.panel(i, j),
                model.bypass.as_ref(),
                layout.vd(x, i, j),
                layout.vpv(x, i, j),
                layout.vpv(x, i + 1, j),
                layout.iout(x, j),
            );
            let col_vd = local(layout.idx_vd(i, j));
            let col_top = layout.idx_vpv(i, j);
            let col_bot = layout.idx_vpv(i + 1, j);
            // Node D row is always interior.
            let row = local(layout.row_nd(i, j));
            f[row] = r[layout.row_nd(i, j)];
            band.add(row, col_vd, e.dnd_dvd);
            match col_top {
                Some(c) if c == layout.idx_varr() => e_varr[row] += e.dnd_dvp_top,
                Some(c) => band.add(row, local(c), e.dnd_dvp_top),
                None => {}
            }
            if let Some(c) = col_bot {
                band.add(row, local(c), e.dnd_dvp_bot);
            }
            // Node P row: interior, or this string's border row for i == 0.
            match layout.row_np(i, j) {
                Some(np_row) => {
                    let row = local(np_row);
                    f[row] = r[np_row];
                    band.add(row, col_vd, e.dnp_dvd);
                    match col_top {
                        Some(c) if c == layout.idx_varr() => e_varr[row] += e.dnp_dvp_top,
                        Some(c) => band.add(row, local(c), e.dnp_dvp_top),
                        None => {}
                    }
                    if let Some(c) = col_bot {
                        band.add(row, local(c), e.dnp_dvp_bot);
                    }
                    if conducting {
                        e_iout[row] -= 1.0;
                    }
                }
                None => {
                    g_np0 = r[layout.border_row_np0(j).unwrap()];
                    f_row.push((col_vd, e.dnp_dvd));
                    // Top terminal of the top panel is varr when conducting.
                    c_varr += e.dnp_dvp_top;
                    c_iout -= 1.0;
                    if let Some(c) = col_bot {
                        f_row.push((local(c), e.dnp_dvp_bot));
                    }
                }
            }
        }

        let lu = band.factor().map_err(|_| SolverError::SingularJacobian)?;
        let mut y = f;
        lu.solve_in_place(&mut y);
        if conducting {
            lu.solve_in_place(&mut e_iout);
            lu.solve_in_place(&mut e_varr);
            let a = layout.conducting.iter().position(|&c| c == j).unwrap();
            let dot = |row: &[(usize, f64)], v: &[f64]| -> f64 {
                row.iter().map(|&(c, w)| w * v[c]).sum()
            };
            sys.schur[(a, a)] = c_iout - dot(&f_row, &e_iout);
            sys.schur[(a, na)] = c_varr - dot(&f_row, &e_varr);
            sys.schur_rhs[a] = -g_np0 + dot(&f_row, &y);
            sys.x_iout[j] = e_iout;
            sys.x_varr[j] = e_varr;
        }
        sys.y.push(y);
        sys.blocks.push(lu);
    }

    // Terminal balance row.
    let g_term = r[layout.row_terminal()];
    match model.drive {
        Drive::Impedance(z) => {
            for a in 0..na {
                sys.schur[(na, a)] = 1.0;
            }
            sys.schur[(na, na)] = -1.0 / z;
        }
        Drive::Voltage(_) => {
            sys.schur[(na, na)] = 1.0;
        }
    }
    sys.schur_rhs[na] = -g_term;

    let dw = sys
        .schur
        .clone()
        .lu()
        .solve(&sys.schur_rhs)
        .ok_or(SolverError::SingularJacobian)?;

    let mut delta = vec![0.0; layout.len()];
    delta[layout.idx_varr()] = dw[na];
    for a in 0..na {
        delta[layout.interior_len + a] = dw[a];
    }
    for j in 0..layout.n {
        let blk = sys.y[j].len();
        let base = layout.base[j];
        for row in 0..blk {
            let mut d = -sys.y[j][row];
            if layout.modes[j] == StringMode::Conducting {
                let a = layout.conducting.iter().position(|&c| c == j).unwrap();
                d -= sys.x_iout[j][row] * dw[a] + sys.x_varr[j][row] * dw[na];
            }
            delta[base + row] = d;
        }
    }
    Ok(delta)
}

/// Dense fallback: same entries scattered into a full matrix.
fn dense_step(
    layout: &ActiveLayout,
    model: &ArrayModel,
    x: &[f64],
    r: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let size = layout.len();
    let mut jac = DMatrix::zeros(size, size);
    for j in 0..layout.n {
        for i in 0..layout.m {
            let e = eval_panel(
                model.panel(i, j),
                model.bypass.as_ref(),
                layout.vd(x, i, j),
                layout.vpv(x, i, j),
                layout.vpv(x, i + 1, j),
                layout.iout(x, j),
            );
            let row_nd = layout.row_nd(i, j);
            let row_np = layout.row_np(i, j).or_else(|| layout.border_row_np0(j)).unwrap();
            let col_vd = layout.idx_vd(i, j);
            jac[(row_nd, col_vd)] += e.dnd_dvd;
            jac[(row_np, col_vd)] += e.dnp_dvd;
            if let Some(c) = layout.idx_vpv(i, j) {
                jac[(row_nd, c)] += e.dnd_dvp_top;
                jac[(row_np, c)] += e.dnp_dvp_top;
            }
            if let Some(c) = layout.idx_vpv(i + 1, j) {
                jac[(row_nd, c)] += e.dnd_dvp_bot;
                jac[(row_np, c)] += e.dnp_dvp_bot;
            }
            if let Some(c) = layout.idx_iout(j) {
                jac[(row_np, c)] -= 1.0;
            }
        }
    }
    let row_t = layout.row_terminal();
    match model.drive {
        Drive::Impedance(z) => {
            for j in 0..layout.n {
                if let Some(c) = layout.idx_iout(j) {
                    jac[(row_t, c)] = 1.0;
                }
            }
            jac[(row_t, layout.idx_varr())] = -1.0 / z;
        }
        Drive::Voltage(_) => jac[(row_t, layout.idx_varr())] = 1.0,
    }
    let rhs = DVector::from_iterator(size, r.iter().map(|v| -v));
    let delta = jac.lu().solve(&rhs).ok_or(SolverError::SingularJacobian)?;
    Ok(delta.as_slice().to_vec())
}

fn newton_solve(
    layout: &ActiveLayout,
    model: &ArrayModel,
    x: &mut Vec<f64>,
    options: &NewtonOptions,
    vd_limit: f64,
) -> Result<(usize, f64), SolverError> {
    let mut r = reduced_residual(layout, model, x);
    let mut norm = inf_norm(&r);
    if !norm.is_finite() {
        let worst = worst_equation(layout, &r);
        return Err(SolverError::NonFinite { equation: worst });
    }
    let mut iters = 0;
    while norm > options.tol {
        if iters >= options.max_iters {
            return Err(SolverError::MaxIterations {
                last_norm: norm,
                worst_equation: worst_equation(layout, &r),
            });
        }
        let delta = solve_newton_step(layout, model, x, &r)?;

        // Cap every diode-junction step, preserving the step direction.
        let mut scale = 1.0_f64;
        for j in 0..layout.n {
            for i in 0..layout.m {
                let dj = delta[layout.idx_vd(i, j)]
                    - layout.idx_vpv(i + 1, j).map_or(0.0, |c| delta[c]);
                if dj.abs() * scale > vd_limit {
                    scale = vd_limit / dj.abs();
                }
            }
        }

        let mut lambda = scale;
        let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _ in 0..=options.damping {
            let trial: Vec<f64> = x
                .iter()
                .zip(delta.iter())
                .map(|(xv, dv)| xv + lambda * dv)
                .collect();
            let r_trial = reduced_residual(layout, model, &trial);
            let n_trial = inf_norm(&r_trial);
            if n_trial.is_finite() && n_trial < norm {
                best = Some((trial, r_trial, n_trial));
                break;
            }
            if n_trial.is_finite() && best.is_none() {
                best = Some((trial, r_trial, n_trial));
            }
            lambda *= 0.5;
        }
        match best {
            Some((trial, r_trial, n_trial)) => {
                *x = trial;
                r = r_trial;
                norm = n_trial;
            }
            None => {
                return Err(SolverError::NonFinite {
                    equation: worst_equation(layout, &r),
                })
            }
        }
        iters += 1;
    }
    Ok((iters, norm))
}

fn worst_equation(layout: &ActiveLayout, r: &[f64]) -> String {
    let idx = r
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    layout.equation_label(idx)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Seeds a cold start: panel terminal voltages laid out as a ladder down each
/// string in proportion to the per-panel open-circuit estimates, junctions at
/// the matching fraction of their open-circuit value, string currents at 90 %
/// of the weakest panel photocurrent.
fn initial_state(model: &ArrayModel) -> SolverState {
    let (m, n) = (model.m_p, model.n_p);
    let varr0 = match model.drive {
        Drive::Voltage(v) => v,
        Drive::Impedance(_) => 0.8 * model.open_circuit_estimate(),
    };
    let mut state = SolverState::zeros(m, n);
    state.varr = varr0;
    for j in 0..n {
        let vocs: Vec<f64> = (0..m)
            .map(|i| model.panel(i, j).open_circuit_estimate())
            .collect();
        let total: f64 = vocs.iter().sum();
        let share = |i: usize| -> f64 {
            if total > 0.0 {
                varr0 * vocs[i] / total
            } else {
                varr0 / m as f64
            }
        };
        let junction_scale = if total > 0.0 {
            (varr0 / total).clamp(0.0, 1.0)
        } else {
            0.0
        };
        state.vpv[(m, j)] = 0.0;
        for i in (0..m).rev() {
            state.vpv[(i, j)] = state.vpv[(i + 1, j)] + share(i);
        }
        state.vpv[(0, j)] = varr0;
        for i in 0..m {
            state.vd[(i, j)] = state.vpv[(i + 1, j)] + vocs[i] * junction_scale;
        }
        let min_iph = (0..m)
            .map(|i| model.panel(i, j).iph)
            .fold(f64::INFINITY, f64::min);
        state.iout[j] = 0.9 * min_iph.max(0.0);
    }
    state
}

fn warmed_state(model: &ArrayModel, init: &SolverState) -> Result<SolverState, SolverError> {
    init.dims_match(model)?;
    let mut state = init.clone();
    if let Drive::Voltage(v) = model.drive {
        state.varr = v;
    }
    for j in 0..model.n_p {
        state.vpv[(0, j)] = state.varr;
        state.vpv[(model.m_p, j)] = 0.0;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Top-level solves
// ---------------------------------------------------------------------------

/// Solves the DC operating point of a per-panel array model under its drive.
///
/// With block diodes enabled, strings that would carry negative current are
/// clamped to zero current (top terminal freed) and the point is re-solved
/// until the active set settles; reported solutions never carry negative
/// string current.
pub fn solve_operating_point(
    model: &ArrayModel,
    options: &NewtonOptions,
    init: Option<&SolverState>,
) -> Result<OperatingPoint, SolverError> {
    options.validate()?;
    model.drive.validate()?;
    let vd_limit = options.vd_limit.unwrap_or_else(|| {
        2.0 * model
            .panels
            .iter()
            .map(|p| p.alpha)
            .fold(0.0, f64::max)
            .max(1e-3)
    });

    let mut state = match init {
        Some(s) => warmed_state(model, s)?,
        None => initial_state(model),
    };
    let mut modes = vec![StringMode::Conducting; model.n_p];
    let mut total_iters = 0;
    let max_rounds = 2 * model.n_p + 2;

    for _round in 0..max_rounds {
        let layout = ActiveLayout::new(model, modes.clone());
        let mut x = layout.pack(&state);
        let (iters, norm) = newton_solve(&layout, model, &mut x, options, vd_limit)?;
        total_iters += iters.max(1);
        state = layout.unpack(&x);

        if !model.block_diodes {
            return Ok(OperatingPoint {
                residual_norm: norm,
                iterations: total_iters,
                active_blocks: vec![true; model.n_p],
                state,
            });
        }

        let mut changed = false;
        let unblock_tol = 1e-12 * state.varr.abs().max(1.0);
        for j in 0..model.n_p {
            match modes[j] {
                StringMode::Conducting if state.iout[j] < 0.0 => {
                    modes[j] = StringMode::Blocked;
                    state.iout[j] = 0.0;
                    changed = true;
                }
                StringMode::Blocked if state.vpv[(0, j)] > state.varr + unblock_tol => {
                    modes[j] = StringMode::Conducting;
                    state.vpv[(0, j)] = state.varr;
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            return Ok(OperatingPoint {
                residual_norm: norm,
                iterations: total_iters,
                active_blocks: modes
                    .iter()
                    .map(|m| *m == StringMode::Conducting)
                    .collect(),
                state,
            });
        }
    }
    Err(SolverError::ActiveSetCycle)
}

/// Solves the aggregated array model: the same Newton machinery applied to the
/// equivalent 1x1 circuit built from aggregated, environment-adjusted
/// parameters.
pub fn solve_sdm_array(
    aggregated: &ResolvedPanel,
    drive: Drive,
    options: &NewtonOptions,
) -> Result<OperatingPoint, SolverError> {
    let model = ArrayModel::aggregated(*aggregated, drive)?;
    solve_operating_point(&model, options, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        aggregate_panels_to_array, band_gap, resolve_panel, EnvCondition, EnvMap, PanelParams,
    };
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn reference_panel() -> PanelParams {
        let t_ref = 298.15;
        PanelParams {
            iph_ref: 10.4,
            i0_ref: 2.4416e-11,
            ideality: 1.02,
            rs: 0.3719,
            rsh_ref: 807.2,
            m_c: 72,
            n_c: 1,
            gamma_t: 5e-4,
            g_ref: 1000.0,
            t_ref,
            eg_ref: band_gap(t_ref).unwrap(),
        }
    }

    fn stc() -> EnvCondition {
        EnvCondition::new(1000.0, 298.15).unwrap()
    }

    fn uniform_model(m: usize, n: usize, drive: Drive) -> ArrayModel {
        let map = EnvMap::uniform(m, n, stc()).unwrap();
        ArrayModel::build(&reference_panel(), &map, None, true, drive).unwrap()
    }

    /// Independent scalar solve of the two panel equations at terminal
    /// voltage `v`: bisection on the diode-node voltage.
    fn panel_current_bisection(p: &ResolvedPanel, v: f64) -> f64 {
        let f = |vd: f64| {
            p.iph - p.i0 * ((vd - 0.0) / p.alpha).exp_m1() - vd / p.rsh - (vd - v) / p.rs
        };
        let mut lo = -v.abs() - 20.0;
        let mut hi = p.alpha * (p.iph / p.i0 + 2.0).ln() + v.abs() + 20.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let vd = 0.5 * (lo + hi);
        (vd - v) / p.rs
    }

    #[test]
    fn shockley_basics() {
        let d = DiodeParams::new(2.4416e-11, 1.9).unwrap();
        assert_eq!(shockley_current(&d, 0.0), 0.0);
        // Deep reverse bias saturates at -i0.
        assert_relative_eq!(shockley_current(&d, -1e3), -d.i0, max_relative = 1e-12);
        let v = 44.3;
        let direct = d.i0 * ((v / d.alpha).exp() - 1.0);
        assert_relative_eq!(shockley_current(&d, v), direct, max_relative = 1e-12);
        assert!(direct > 0.0);
    }

    #[test]
    fn shockley_clamp_is_consistent_with_slope() {
        let d = DiodeParams::new(1e-11, 1.0).unwrap();
        let eval = shockley(&d, 75.0);
        assert!(eval.clamped);
        // The continuation is linear, so a finite difference matches the slope
        // to machine precision.
        let h = 0.5;
        let fd = (shockley_current(&d, 75.0 + h) - shockley_current(&d, 75.0 - h)) / (2.0 * h);
        assert_relative_eq!(eval.slope, fd, max_relative = 1e-12);
        // Value and slope are continuous at the clamp.
        let below = shockley(&d, EXP_ARG_LIMIT - 1e-9);
        let above = shockley(&d, EXP_ARG_LIMIT + 1e-9);
        assert_relative_eq!(below.current, above.current, max_relative = 1e-6);
        assert_relative_eq!(below.slope, above.slope, max_relative = 1e-6);
    }

    #[test]
    fn dark_array_zero_state_is_solution() {
        let p = reference_panel();
        let dark = EnvMap::uniform(3, 2, EnvCondition::new(0.0, 298.15).unwrap()).unwrap();
        let model = ArrayModel::build(&p, &dark, None, false, Drive::Voltage(0.0)).unwrap();
        let state = SolverState::zeros(3, 2);
        let r = assemble_residual(&model, &state).unwrap();
        assert!(r.norm_inf() < 1e-15, "norm {}", r.norm_inf());
    }

    #[test]
    fn converged_point_has_small_public_residual() {
        let model = uniform_model(4, 2, Drive::Voltage(120.0));
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        let r = assemble_residual(&model, &op.state).unwrap();
        assert!(r.norm_inf() <= 1e-9, "norm {}", r.norm_inf());
        assert!(op.residual_norm <= 1e-9);
    }

    #[test]
    fn single_panel_matches_bisection_oracle() {
        let p = resolve_panel(&reference_panel(), &stc()).unwrap();
        let model = uniform_model(1, 1, Drive::Voltage(30.0));
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        let oracle = panel_current_bisection(&p, 30.0);
        assert_abs_diff_eq!(op.terminal_current(), oracle, epsilon = 1e-9);
    }

    #[test]
    fn uniform_short_circuit_current_is_three_panels() {
        let p = resolve_panel(&reference_panel(), &stc()).unwrap();
        let model = uniform_model(10, 3, Drive::Voltage(0.0));
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        let isc = panel_current_bisection(&p, 0.0);
        assert_abs_diff_eq!(op.terminal_current(), 3.0 * isc, epsilon = 1e-8);
    }

    #[test]
    fn uniform_open_circuit_current_is_zero() {
        let p = resolve_panel(&reference_panel(), &stc()).unwrap();
        // Panel open-circuit voltage by bisection on the terminal current.
        let (mut lo, mut hi) = (0.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if panel_current_bisection(&p, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let voc = 0.5 * (lo + hi);
        let model = uniform_model(10, 3, Drive::Voltage(10.0 * voc));
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        assert_abs_diff_eq!(op.terminal_current(), 0.0, epsilon = 1e-7);
    }

    #[test]
    fn block_diodes_clamp_negative_strings() {
        let model = uniform_model(10, 3, Drive::Voltage(560.0)); // above open circuit
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        for (j, &i) in op.state.iout.iter().enumerate() {
            assert!(i >= 0.0, "string {j} carries {i} A");
        }
        assert!(op.terminal_current() <= 1e-12);
        assert!(op.active_blocks.iter().all(|a| !a));
        // Blocked string tops float below the terminal.
        for j in 0..3 {
            assert!(op.state.vpv[(0, j)] < op.state.varr);
        }
        // And the reported state still satisfies the full KCL set.
        let r = assemble_residual(&model, &op.state).unwrap();
        assert!(r.norm_inf() <= 1e-9, "norm {}", r.norm_inf());
    }

    #[test]
    fn without_block_diodes_strings_may_absorb() {
        let map = EnvMap::uniform(10, 3, stc()).unwrap();
        let model =
            ArrayModel::build(&reference_panel(), &map, None, false, Drive::Voltage(560.0))
                .unwrap();
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        assert!(op.terminal_current() < -1e-3);
    }

    #[test]
    fn impedance_drive_closes_ohms_law() {
        let model = uniform_model(10, 3, Drive::Impedance(13.7));
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        assert_relative_eq!(
            op.terminal_voltage() / op.terminal_current(),
            13.7,
            max_relative = 1e-10
        );
        assert!(op.power() > 0.0);
    }

    #[test]
    fn sdm_solve_matches_one_by_one_circuit() {
        let p = reference_panel();
        let agg = resolve_panel(&aggregate_panels_to_array(&p, 1, 1).unwrap(), &stc()).unwrap();
        let op_sdm = solve_sdm_array(&agg, Drive::Voltage(30.0), &NewtonOptions::default()).unwrap();
        let model = uniform_model(1, 1, Drive::Voltage(30.0));
        let op_ppdm = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        assert_abs_diff_eq!(
            op_sdm.terminal_current(),
            op_ppdm.terminal_current(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn warm_start_converges_quickly() {
        let model = uniform_model(10, 3, Drive::Voltage(400.0));
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        let model2 = model.with_drive(Drive::Voltage(405.0));
        let warm =
            solve_operating_point(&model2, &NewtonOptions::default(), Some(&op.state)).unwrap();
        assert!(warm.iterations <= 5, "took {} iterations", warm.iterations);
    }

    #[test]
    fn iteration_limit_reports_diagnostics() {
        let model = uniform_model(10, 3, Drive::Voltage(400.0));
        let opts = NewtonOptions {
            max_iters: 1,
            ..Default::default()
        };
        match solve_operating_point(&model, &opts, None) {
            Err(SolverError::MaxIterations {
                last_norm,
                worst_equation,
            }) => {
                assert!(last_norm.is_finite());
                assert!(!worst_equation.is_empty());
            }
            other => panic!("expected iteration limit, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = uniform_model(3, 2, Drive::Voltage(10.0));
        let state = SolverState::zeros(2, 2);
        assert!(matches!(
            assemble_residual(&model, &state),
            Err(SolverError::DimensionMismatch { .. })
        ));
    }

    fn fd_jacobian(model: &ArrayModel, state: &SolverState) -> DMatrix<f64> {
        let x0 = state_to_vec(model, state);
        let size = x0.len();
        let mut jac = DMatrix::zeros(size, size);
        for col in 0..size {
            let h = 1e-6 * x0[col].abs().max(1.0);
            let mut xp = x0.clone();
            xp[col] += h;
            let mut xm = x0.clone();
            xm[col] -= h;
            let rp = assemble_residual(model, &vec_to_state(model, &xp)).unwrap();
            let rm = assemble_residual(model, &vec_to_state(model, &xm)).unwrap();
            for row in 0..size {
                jac[(row, col)] = (rp.0[row] - rm.0[row]) / (2.0 * h);
            }
        }
        jac
    }

    fn max_rel_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let mut worst = 0.0_f64;
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            worst = worst.max((x - y).abs() / denom);
        }
        worst
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for bypass in [None, Some(DiodeParams::from_threshold(0.7).unwrap())] {
            let map = EnvMap::uniform(3, 2, stc()).unwrap();
            let model = ArrayModel::build(
                &reference_panel(),
                &map,
                bypass,
                true,
                Drive::Impedance(40.0),
            )
            .unwrap();
            let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..20 {
                let mut x = state_to_vec(&model, &op.state);
                for v in x.iter_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
                let state = vec_to_state(&model, &x);
                let analytic = assemble_jacobian(&model, &state).unwrap();
                let numeric = fd_jacobian(&model, &state);
                let err = max_rel_error(&analytic, &numeric);
                assert!(err < 1e-6, "jacobian mismatch {err}");
            }
        }
    }

    #[test]
    fn jacobian_blocks_identical_across_uniform_strings() {
        let model = uniform_model(3, 3, Drive::Voltage(90.0));
        let op = solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        let jac = assemble_jacobian(&model, &op.state).unwrap();
        // Same-panel entries for different strings must match.
        for i in 0..3 {
            let d0 = jac[(i * 3, public_col_vd(&model, i, 0))];
            let d1 = jac[(i * 3 + 1, public_col_vd(&model, i, 1))];
            let d2 = jac[(i * 3 + 2, public_col_vd(&model, i, 2))];
            assert_relative_eq!(d0, d1, max_relative = 1e-12);
            assert_relative_eq!(d0, d2, max_relative = 1e-12);
        }
    }

    #[test]
    fn bordered_step_matches_dense_step() {
        let bypass = Some(DiodeParams::from_threshold(0.7).unwrap());
        let map = EnvMap::uniform(4, 3, stc()).unwrap();
        let model =
            ArrayModel::build(&reference_panel(), &map, bypass, true, Drive::Impedance(25.0))
                .unwrap();
        let layout = ActiveLayout::new(&model, vec![StringMode::Conducting; 3]);
        let state = initial_state(&model);
        let x = layout.pack(&state);
        let r = reduced_residual(&layout, &model, &x);
        let d1 = bordered_step(&layout, &model, &x, &r).unwrap();
        let d2 = dense_step(&layout, &model, &x, &r).unwrap();
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-8, epsilon = 1e-10);
        }
        // Mixed active set exercises the blocked block shape as well.
        let layout = ActiveLayout::new(
            &model,
            vec![
                StringMode::Conducting,
                StringMode::Blocked,
                StringMode::Conducting,
            ],
        );
        let x = layout.pack(&state);
        let r = reduced_residual(&layout, &model, &x);
        let d1 = bordered_step(&layout, &model, &x, &r).unwrap();
        let d2 = dense_step(&layout, &model, &x, &r).unwrap();
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-8, epsilon = 1e-10);
        }
    }
}
