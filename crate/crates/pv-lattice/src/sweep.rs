//! IV / PV curve tracing and power-peak detection.
//!
//! A trace sweeps the terminal voltage over `[0, v_max]` and solves one
//! operating point per sample. The default mode warm-starts each solve from
//! the previous solution (continuation); cold-start mode solves every point
//! independently and in parallel. Both modes produce the same curve, the
//! choice only affects speed.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ArrayModel, Drive, ModelTag};
use crate::solver::{solve_operating_point, NewtonOptions, SolverError, SolverState};

/// Default number of sweep samples; resolves multi-peak power curves on
/// shaded arrays while keeping a full trace sub-second.
pub const DEFAULT_SWEEP_POINTS: usize = 500;

/// Margin applied to the open-circuit estimate when `v_max` is not given.
const V_MAX_MARGIN: f64 = 1.05;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("a sweep needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("sweep voltage limit must be > 0, got {0}")]
    InvalidVMax(f64),
    #[error("solve failed at terminal voltage {voltage} V: {source}")]
    Solver {
        voltage: f64,
        source: SolverError,
    },
    #[error("curve with {0} samples is too short for peak detection")]
    CurveTooShort(usize),
}

/// One swept sample; `p` is exactly `v * i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IvSample {
    pub v: f64,
    pub i: f64,
    pub p: f64,
}

/// A traced IV/PV characteristic with strictly increasing voltage.
#[derive(Debug, Clone, Serialize)]
pub struct IVCurve {
    pub samples: Vec<IvSample>,
    pub model_tag: ModelTag,
    pub scenario_id: String,
}

impl IVCurve {
    pub fn with_scenario(mut self, id: impl Into<String>) -> Self {
        self.scenario_id = id.into();
        self
    }

    /// Sample with the highest power.
    pub fn max_power_sample(&self) -> Option<IvSample> {
        self.samples
            .iter()
            .copied()
            .max_by(|a, b| a.p.total_cmp(&b.p))
    }
}

/// A local maximum of the power curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Peak {
    pub index: usize,
    pub v: f64,
    pub p: f64,
}

/// Interior local power maxima of a curve, in ascending voltage order.
#[derive(Debug, Clone, Serialize)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
}

impl PeakSet {
    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    pub fn best(&self) -> Option<Peak> {
        self.peaks.iter().copied().max_by(|a, b| a.p.total_cmp(&b.p))
    }
}

/// Sweep controls beyond the two required parameters.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Upper sweep voltage; estimated from the model when `None`.
    pub v_max: Option<f64>,
    pub n_points: usize,
    /// Solve every point independently (in parallel) instead of continuing
    /// from the previous solution.
    pub cold_start: bool,
    pub newton: NewtonOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            v_max: None,
            n_points: DEFAULT_SWEEP_POINTS,
            cold_start: false,
            newton: NewtonOptions::default(),
        }
    }
}

/// Solver effort bookkeeping for reports.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SweepStats {
    pub solves: usize,
    pub newton_iterations: usize,
    pub max_newton_iterations: usize,
    pub cold_start: bool,
}

/// Traces the IV curve by voltage sweep with warm-started continuation.
pub fn trace_iv(
    model: &ArrayModel,
    v_max: Option<f64>,
    n_points: usize,
) -> Result<IVCurve, SweepError> {
    trace_iv_with(
        model,
        &SweepOptions {
            v_max,
            n_points,
            ..Default::default()
        },
    )
    .map(|(curve, _)| curve)
}

/// Traces the IV curve with full control and effort statistics.
pub fn trace_iv_with(
    model: &ArrayModel,
    options: &SweepOptions,
) -> Result<(IVCurve, SweepStats), SweepError> {
    if options.n_points < 2 {
        return Err(SweepError::TooFewPoints(options.n_points));
    }
    let v_max = match options.v_max {
        Some(v) if v > 0.0 => v,
        Some(v) => return Err(SweepError::InvalidVMax(v)),
        None => V_MAX_MARGIN * model.open_circuit_estimate(),
    };
    if !(v_max > 0.0) {
        return Err(SweepError::InvalidVMax(v_max));
    }
    let n = options.n_points;
    let voltages: Vec<f64> = (0..n)
        .map(|k| v_max * k as f64 / (n - 1) as f64)
        .collect();

    let mut samples = Vec::with_capacity(n);
    let mut stats = SweepStats {
        solves: 0,
        newton_iterations: 0,
        max_newton_iterations: 0,
        cold_start: options.cold_start,
    };

    if options.cold_start {
        let points: Vec<Result<(f64, f64, usize), SweepError>> = voltages
            .par_iter()
            .map(|&v| {
                let point = solve_operating_point(
                    &model.with_drive(Drive::Voltage(v)),
                    &options.newton,
                    None,
                )
                .map_err(|source| SweepError::Solver { voltage: v, source })?;
                Ok((v, point.terminal_current(), point.iterations))
            })
            .collect();
        for point in points {
            let (v, i, iters) = point?;
            stats.solves += 1;
            stats.newton_iterations += iters;
            stats.max_newton_iterations = stats.max_newton_iterations.max(iters);
            samples.push(IvSample { v, i, p: v * i });
        }
    } else {
        let mut prev: Option<SolverState> = None;
        for &v in &voltages {
            let point = solve_operating_point(
                &model.with_drive(Drive::Voltage(v)),
                &options.newton,
                prev.as_ref(),
            )
            .map_err(|source| SweepError::Solver { voltage: v, source })?;
            stats.solves += 1;
            stats.newton_iterations += point.iterations;
            stats.max_newton_iterations = stats.max_newton_iterations.max(point.iterations);
            samples.push(IvSample {
                v,
                i: point.terminal_current(),
                p: v * point.terminal_current(),
            });
            prev = Some(point.state);
        }
    }

    Ok((
        IVCurve {
            samples,
            model_tag: model.tag,
            scenario_id: String::new(),
        },
        stats,
    ))
}

/// Traces the curve by sweeping the load impedance instead of the terminal
/// voltage: each sample is the operating point of one impedance value, spaced
/// logarithmically around the characteristic impedance. Samples come out in
/// ascending voltage order.
pub fn trace_impedance(
    model: &ArrayModel,
    n_points: usize,
    newton: &NewtonOptions,
) -> Result<(IVCurve, SweepStats), SweepError> {
    if n_points < 2 {
        return Err(SweepError::TooFewPoints(n_points));
    }
    let voc = model.open_circuit_estimate();
    let isc = model.short_circuit_scale().max(1e-6);
    if !(voc > 0.0) {
        return Err(SweepError::InvalidVMax(voc));
    }
    let z_char = voc / isc;
    let (log_lo, log_hi) = ((z_char * 1e-2).ln(), (z_char * 1e3).ln());
    let mut stats = SweepStats {
        solves: 0,
        newton_iterations: 0,
        max_newton_iterations: 0,
        cold_start: false,
    };
    let mut samples = Vec::with_capacity(n_points);
    let mut prev: Option<SolverState> = None;
    for k in 0..n_points {
        let z = (log_lo + (log_hi - log_lo) * k as f64 / (n_points - 1) as f64).exp();
        let point = solve_operating_point(
            &model.with_drive(Drive::Impedance(z)),
            newton,
            prev.as_ref(),
        )
        .map_err(|source| SweepError::Solver { voltage: z, source })?;
        stats.solves += 1;
        stats.newton_iterations += point.iterations;
        stats.max_newton_iterations = stats.max_newton_iterations.max(point.iterations);
        let (v, i) = (point.terminal_voltage(), point.terminal_current());
        samples.push(IvSample { v, i, p: v * i });
        prev = Some(point.state);
    }
    samples.sort_by(|a, b| a.v.total_cmp(&b.v));
    samples.dedup_by(|a, b| a.v == b.v);
    Ok((
        IVCurve {
            samples,
            model_tag: model.tag,
            scenario_id: String::new(),
        },
        stats,
    ))
}

/// Interior local maxima of the power samples by three-point comparison.
/// A plateau counts once, at its lower-voltage edge.
pub fn find_peaks(curve: &IVCurve) -> Result<PeakSet, SweepError> {
    let n = curve.samples.len();
    if n < 3 {
        return Err(SweepError::CurveTooShort(n));
    }
    let mut peaks = Vec::new();
    for k in 1..n - 1 {
        let (prev, here, next) = (
            curve.samples[k - 1].p,
            curve.samples[k].p,
            curve.samples[k + 1].p,
        );
        if here > prev && here >= next {
            peaks.push(Peak {
                index: k,
                v: curve.samples[k].v,
                p: here,
            });
        }
    }
    Ok(PeakSet { peaks })
}
