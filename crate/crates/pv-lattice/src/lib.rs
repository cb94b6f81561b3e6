//! Circuit-level photovoltaic array simulation.
//!
//! Two models of the same physical array are provided:
//!
//! - an aggregated single-diode model that collapses the whole array into one
//!   equivalent circuit (`SDM_A`), and
//! - a per-panel diode model that keeps one single-diode circuit per panel and
//!   interconnects them in series strings and parallel columns (`PPDM_A`),
//!   with optional bypass diodes per panel and ideal block diodes per string.
//!
//! On top of the nonlinear DC solver sit IV/PV curve tracing, maximum power
//! point search for both models, and an audit of the conditions under which
//! the aggregated model is exact.
//!
//! The aggregated model is lossless only for a uniform array; under partial
//! shading or hot spots the two models diverge, and [`mppt::compare_models`]
//! quantifies the gap.

pub mod equivalence;
pub mod model;
pub mod mppt;
pub mod solver;
pub mod sweep;

pub use equivalence::{audit_subequalities, build_aggregate_input, is_uniform, EquivalenceReport};
pub use model::{
    aggregate_cells_to_panel, aggregate_panels_to_array, band_gap, photocurrent, resolve_panel,
    saturation_current, shunt_resistance, ArrayModel, DiodeParams, Drive, EnvCondition, EnvMap,
    Grid, ModelError, ModelTag, PanelParams, PhysConstants, ResolvedPanel,
};
pub use mppt::{compare_models, ppdm_mpp, sdm_mpp, ModelComparison, MppResult};
pub use solver::{
    assemble_jacobian, assemble_residual, shockley, solve_operating_point, solve_sdm_array,
    DiodeEval, NewtonOptions, OperatingPoint, Residual, SolverError, SolverState,
};
pub use sweep::{find_peaks, trace_impedance, trace_iv, trace_iv_with, IVCurve, IvSample, Peak,
    PeakSet, SweepError, SweepOptions, SweepStats};
