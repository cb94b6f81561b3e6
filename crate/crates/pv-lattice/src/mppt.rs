//! Maximum power point computation for both array models.
//!
//! The aggregated model admits a scalar characterization of the MPP: setting
//! d(IV)/dV to zero turns the two circuit equations into one equation in the
//! diode-node voltage, solved here by safeguarded bisection. The per-panel
//! model has no closed form (and can be multi-peaked under shading), so its
//! MPP is found globally: a coarse voltage sweep picks the best power peak and
//! golden-section search refines it, with every power evaluation a fully
//! converged operating-point solve.

use serde::Serialize;
use thiserror::Error;

use crate::model::{ArrayModel, Drive, ModelTag, ResolvedPanel};
use crate::solver::{solve_operating_point, NewtonOptions, SolverError, SolverState};
use crate::sweep::{find_peaks, trace_iv_with, SweepError, SweepOptions};

/// Samples for the coarse global stage; spaces samples a few volts apart on a
/// ten-panel string so distinct bypass-diode peaks cannot be skipped.
pub const COARSE_SWEEP_POINTS: usize = 200;

/// Golden-section termination: bracket width in volts.
pub const REFINE_V_TOL: f64 = 1e-4;

const GOLDEN_RATIO: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Error)]
pub enum MpptError {
    #[error("no power maximum inside (0, open-circuit); parameters are degenerate")]
    NoRoot,
    #[error("baseline quantity is zero; comparison undefined")]
    ZeroBaseline,
    #[error("solve failed inside refinement bracket [{lo} V, {hi} V]: {source}")]
    Refinement {
        lo: f64,
        hi: f64,
        source: SolverError,
    },
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// A maximum power point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MppResult {
    pub p_mpp: f64,
    pub v_mpp: f64,
    pub i_mpp: f64,
    pub model_tag: ModelTag,
    pub refinement_iters: usize,
}

/// Percentage errors of the aggregated model against the per-panel baseline.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelComparison {
    pub p_err_pct: f64,
    pub v_err_pct: f64,
    pub i_err_pct: f64,
}

/// Terminal current of the aggregated circuit as a function of its diode-node
/// voltage.
fn sdm_current_of_vd(p: &ResolvedPanel, vd: f64) -> f64 {
    p.iph - p.i0 * (vd / p.alpha).exp_m1() - vd / p.rsh
}

/// The MPP condition for the aggregated circuit, as a root problem in the
/// diode-node voltage: terminal current minus the current demanded by
/// d(IV)/dV = 0.
fn sdm_mpp_residual(p: &ResolvedPanel, vd: f64) -> f64 {
    let chi = (vd / p.alpha).exp();
    let iout = sdm_current_of_vd(p, vd);
    let vpv = vd - p.rs * iout;
    let demanded = vpv * (p.i0 * p.rsh * chi + p.alpha)
        / (p.i0 * p.rs * p.rsh * chi + p.alpha * (p.rs + p.rsh));
    iout - demanded
}

/// Maximum power point of the aggregated array model from its resolved,
/// aggregated parameters.
pub fn sdm_mpp(aggregated: &ResolvedPanel) -> Result<MppResult, MpptError> {
    if !(aggregated.iph > 0.0) {
        return Err(MpptError::NoRoot);
    }
    // Open-circuit diode voltage: the terminal current is strictly decreasing
    // in vd, so bisection brackets cleanly.
    let mut lo = 0.0;
    let mut hi = aggregated.alpha * (aggregated.iph / aggregated.i0).ln_1p() + 5.0;
    if sdm_current_of_vd(aggregated, hi) > 0.0 {
        return Err(MpptError::NoRoot);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sdm_current_of_vd(aggregated, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let vd_oc = 0.5 * (lo + hi);

    // The MPP residual is positive at the short-circuit end and negative at
    // open circuit; bisect between them.
    let mut lo = 1e-9 * vd_oc;
    let mut hi = vd_oc;
    if !(sdm_mpp_residual(aggregated, lo) > 0.0 && sdm_mpp_residual(aggregated, hi) < 0.0) {
        return Err(MpptError::NoRoot);
    }
    let mut iters = 0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sdm_mpp_residual(aggregated, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
        if (hi - lo) <= 1e-14 * vd_oc {
            break;
        }
    }
    let vd = 0.5 * (lo + hi);
    let i_mpp = sdm_current_of_vd(aggregated, vd);
    let v_mpp = vd - aggregated.rs * i_mpp;
    Ok(MppResult {
        p_mpp: v_mpp * i_mpp,
        v_mpp,
        i_mpp,
        model_tag: ModelTag::SdmA,
        refinement_iters: iters,
    })
}

/// Power of the per-panel model at a fixed terminal voltage; every evaluation
/// is a converged solve of the full circuit.
fn power_at(
    model: &ArrayModel,
    v: f64,
    newton: &NewtonOptions,
    warm: &mut Option<SolverState>,
) -> Result<f64, SolverError> {
    let point = solve_operating_point(&model.with_drive(Drive::Voltage(v)), newton, warm.as_ref())?;
    let p = point.power();
    *warm = Some(point.state);
    Ok(p)
}

/// Global maximum power point of the per-panel array model: coarse sweep,
/// best-peak selection, golden-section refinement inside the bracketing
/// samples.
pub fn ppdm_mpp(model: &ArrayModel) -> Result<MppResult, MpptError> {
    ppdm_mpp_with(model, &NewtonOptions::default(), COARSE_SWEEP_POINTS)
}

/// [`ppdm_mpp`] with explicit solver options and coarse resolution.
pub fn ppdm_mpp_with(
    model: &ArrayModel,
    newton: &NewtonOptions,
    coarse_points: usize,
) -> Result<MppResult, MpptError> {
    let (curve, _) = trace_iv_with(
        model,
        &SweepOptions {
            n_points: coarse_points.max(3),
            newton: *newton,
            ..Default::default()
        },
    )?;
    let peaks = find_peaks(&curve)?;
    let best_index = peaks
        .best()
        .map(|p| p.index)
        .or_else(|| {
            curve
                .samples
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.p.total_cmp(&b.1.p))
                .map(|(k, _)| k)
        })
        .ok_or(MpptError::NoRoot)?;
    let lo_idx = best_index.saturating_sub(1);
    let hi_idx = (best_index + 1).min(curve.samples.len() - 1);
    let mut a = curve.samples[lo_idx].v;
    let mut b = curve.samples[hi_idx].v;
    let bracket = (a, b);

    let mut warm: Option<SolverState> = None;
    let eval = move |v: f64, warm: &mut Option<SolverState>| -> Result<f64, MpptError> {
        power_at(model, v, newton, warm).map_err(|source| MpptError::Refinement {
            lo: bracket.0,
            hi: bracket.1,
            source,
        })
    };

    let mut x1 = b - GOLDEN_RATIO * (b - a);
    let mut x2 = a + GOLDEN_RATIO * (b - a);
    let mut f1 = eval(x1, &mut warm)?;
    let mut f2 = eval(x2, &mut warm)?;
    let mut iters = 2;
    while b - a > REFINE_V_TOL {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN_RATIO * (b - a);
            f2 = eval(x2, &mut warm)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN_RATIO * (b - a);
            f1 = eval(x1, &mut warm)?;
        }
        iters += 1;
    }
    let v_mpp = if f1 > f2 { x1 } else { x2 };
    let point = solve_operating_point(
        &model.with_drive(Drive::Voltage(v_mpp)),
        newton,
        warm.as_ref(),
    )?;
    Ok(MppResult {
        p_mpp: point.power(),
        v_mpp: point.terminal_voltage(),
        i_mpp: point.terminal_current(),
        model_tag: ModelTag::PpdmA,
        refinement_iters: iters,
    })
}

/// Percentage errors of the aggregated result against the per-panel baseline,
/// exact arithmetic over the two inputs.
pub fn compare_models(sdm: &MppResult, ppdm: &MppResult) -> Result<ModelComparison, MpptError> {
    if ppdm.p_mpp == 0.0 || ppdm.v_mpp == 0.0 || ppdm.i_mpp == 0.0 {
        return Err(MpptError::ZeroBaseline);
    }
    Ok(ModelComparison {
        p_err_pct: 100.0 * (sdm.p_mpp - ppdm.p_mpp) / ppdm.p_mpp,
        v_err_pct: 100.0 * (sdm.v_mpp - ppdm.v_mpp) / ppdm.v_mpp,
        i_err_pct: 100.0 * (sdm.i_mpp - ppdm.i_mpp) / ppdm.i_mpp,
    })
}
