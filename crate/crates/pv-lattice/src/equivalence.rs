//! Audit of when the aggregated array model is an exact stand-in for the
//! per-panel model.
//!
//! Matching the two models' terminal currents at equal terminal voltage
//! forces five families of additive sub-equalities between the aggregated
//! quantities and the per-string sums, row by row: photocurrents, saturation
//! currents, the exponential diode terms, the shunt currents, and the series
//! currents. They all hold exactly when every panel is identical; any
//! parameter non-uniformity breaks at least one of them. This module checks
//! each family at a converged per-panel operating point against the
//! aggregated circuit solved at the same terminal voltage.

use serde::Serialize;
use thiserror::Error;

use crate::model::{
    aggregate_panels_to_array, ArrayModel, DiodeParams, Drive, EnvCondition, EnvMap, ModelError,
    PanelParams, ResolvedPanel,
};
use crate::solver::{shockley, solve_sdm_array, NewtonOptions, OperatingPoint, SolverError};

/// A converged point must satisfy its own equations at least this well before
/// an audit of it is meaningful.
const CONVERGENCE_GATE: f64 = 1e-6;

/// Pass threshold for each condition, relative to the aggregated
/// short-circuit current scale.
const CONDITION_REL_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EquivalenceError {
    #[error("operating point is not converged (residual {0:.3e})")]
    NotConverged(f64),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One sub-equality family: worst absolute mismatch across rows, and whether
/// it stays within tolerance.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConditionCheck {
    pub max_violation: f64,
    pub pass: bool,
}

/// Outcome of an equivalence audit at one operating point.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    /// Whether every resolved panel matches panel (1, 1) within the uniformity
    /// tolerance used by the audit.
    pub uniform: bool,
    /// Absolute tolerance applied to each condition (A).
    pub tolerance: f64,
    /// Photocurrent sums.
    pub photocurrent: ConditionCheck,
    /// Exponential diode-term alignment.
    pub exponential: ConditionCheck,
    /// Saturation-current sums.
    pub saturation: ConditionCheck,
    /// Shunt-current sums.
    pub shunt: ConditionCheck,
    /// Series-resistance current sums.
    pub series: ConditionCheck,
}

impl EquivalenceReport {
    pub fn all_pass(&self) -> bool {
        self.photocurrent.pass
            && self.exponential.pass
            && self.saturation.pass
            && self.shunt.pass
            && self.series.pass
    }
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// True iff every resolved panel's five parameters match panel (1, 1) within
/// `rel_tol`.
pub fn is_uniform(model: &ArrayModel, rel_tol: f64) -> bool {
    let first = model.panel(0, 0);
    model.panels.iter().all(|p| {
        rel_diff(p.iph, first.iph) <= rel_tol
            && rel_diff(p.i0, first.i0) <= rel_tol
            && rel_diff(p.alpha, first.alpha) <= rel_tol
            && rel_diff(p.rs, first.rs) <= rel_tol
            && rel_diff(p.rsh, first.rsh) <= rel_tol
    })
}

/// Builds the inputs the aggregated model uses for a non-uniform scenario:
/// the panel scaled up by the array dimensions, to be resolved at the
/// arithmetic-mean irradiance and temperature of the map.
pub fn build_aggregate_input(
    env: &EnvMap,
    panel: &PanelParams,
) -> Result<(PanelParams, EnvCondition), ModelError> {
    let aggregated = aggregate_panels_to_array(panel, env.rows(), env.cols())?;
    let mean = EnvCondition::new(env.mean_g(), env.mean_t())?;
    Ok((aggregated, mean))
}

/// `i0 * exp(v / alpha)`, sharing the solver's clamped exponential so audit
/// and solver cannot disagree at extreme arguments.
fn exp_term(i0: f64, alpha: f64, v: f64) -> f64 {
    let d = DiodeParams { i0, alpha };
    shockley(&d, v).current + i0
}

/// Evaluates the five sub-equality families at a converged per-panel point.
///
/// `aggregated` is the resolved aggregated parameter set (array scale); the
/// aggregated circuit is solved internally at the point's terminal voltage so
/// both sides are compared on the same terminal condition.
pub fn audit_subequalities(
    model: &ArrayModel,
    aggregated: &ResolvedPanel,
    point: &OperatingPoint,
) -> Result<EquivalenceReport, EquivalenceError> {
    if !(point.residual_norm <= CONVERGENCE_GATE) {
        return Err(EquivalenceError::NotConverged(point.residual_norm));
    }
    let sdm = solve_sdm_array(
        aggregated,
        Drive::Voltage(point.state.varr),
        &NewtonOptions::default(),
    )?;
    let vd_a = sdm.state.vd[(0, 0)];
    let vpv_a = sdm.state.varr;

    let lhs_exp = exp_term(aggregated.i0, aggregated.alpha, vd_a);
    let lhs_shunt = vd_a / aggregated.rsh;
    let lhs_series = (vd_a - vpv_a) / aggregated.rs;

    let (m, n) = (model.m_p, model.n_p);
    let state = &point.state;
    let mut worst = [0.0_f64; 5];
    for i in 0..m {
        let mut sum_iph = 0.0;
        let mut sum_i0 = 0.0;
        let mut sum_exp = 0.0;
        let mut sum_shunt = 0.0;
        let mut sum_series = 0.0;
        for j in 0..n {
            let p = model.panel(i, j);
            let junction = state.vd[(i, j)] - state.vpv[(i + 1, j)];
            sum_iph += p.iph;
            sum_i0 += p.i0;
            sum_exp += exp_term(p.i0, p.alpha, junction);
            sum_shunt += junction / p.rsh;
            sum_series += (state.vd[(i, j)] - state.vpv[(i, j)]) / p.rs;
        }
        worst[0] = worst[0].max((aggregated.iph - sum_iph).abs());
        worst[1] = worst[1].max((lhs_exp - sum_exp).abs());
        worst[2] = worst[2].max((aggregated.i0 - sum_i0).abs());
        worst[3] = worst[3].max((lhs_shunt - sum_shunt).abs());
        worst[4] = worst[4].max((lhs_series - sum_series).abs());
    }

    let tolerance = CONDITION_REL_TOL * aggregated.iph.max(f64::MIN_POSITIVE);
    let check = |v: f64| ConditionCheck {
        max_violation: v,
        pass: v <= tolerance,
    };
    Ok(EquivalenceReport {
        uniform: is_uniform(model, 1e-9),
        tolerance,
        photocurrent: check(worst[0]),
        exponential: check(worst[1]),
        saturation: check(worst[2]),
        shunt: check(worst[3]),
        series: check(worst[4]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{band_gap, resolve_panel, ArrayModel, EnvCondition, EnvMap};
    use crate::solver::solve_operating_point;
    use approx::assert_relative_eq;
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

    fn psc_map() -> EnvMap {
        let mut map = EnvMap::uniform(10, 3, EnvCondition::new(1000.0, 298.0).unwrap()).unwrap();
        map.set(0, 0, EnvCondition::new(400.0, 298.0).unwrap()).unwrap();
        map.set(0, 1, EnvCondition::new(500.0, 298.0).unwrap()).unwrap();
        map.set(1, 0, EnvCondition::new(500.0, 298.0).unwrap()).unwrap();
        map.set(1, 1, EnvCondition::new(600.0, 298.0).unwrap()).unwrap();
        map
    }

    fn hotspot_map() -> EnvMap {
        let mut map = EnvMap::uniform(10, 3, EnvCondition::new(1000.0, 288.0).unwrap()).unwrap();
        map.set(0, 0, EnvCondition::new(1000.0, 348.0).unwrap()).unwrap();
        for (r, c) in [(0, 1), (1, 0), (1, 1)] {
            map.set(r, c, EnvCondition::new(1000.0, 328.0).unwrap()).unwrap();
        }
        for (r, c) in [(0, 2), (1, 2), (2, 0), (2, 1), (2, 2)] {
            map.set(r, c, EnvCondition::new(1000.0, 298.0).unwrap()).unwrap();
        }
        map
    }

    #[test]
    fn uniform_array_is_uniform() {
        let map = EnvMap::uniform(10, 3, stc()).unwrap();
        let model =
            ArrayModel::build(&reference_panel(), &map, None, true, Drive::Voltage(0.0)).unwrap();
        assert!(is_uniform(&model, 1e-9));
    }

    #[test]
    fn shading_breaks_uniformity() {
        let model =
            ArrayModel::build(&reference_panel(), &psc_map(), None, true, Drive::Voltage(0.0))
                .unwrap();
        assert!(!is_uniform(&model, 1e-9));
    }

    #[test]
    fn uniformity_tolerance_semantics() {
        let map = EnvMap::uniform(2, 2, stc()).unwrap();
        let mut model =
            ArrayModel::build(&reference_panel(), &map, None, true, Drive::Voltage(0.0)).unwrap();
        let mut p = *model.panel(1, 1);
        p.rsh *= 1.0 + 1e-12;
        model.panels[(1, 1)] = p;
        assert!(is_uniform(&model, 1e-9));
        assert!(!is_uniform(&model, 1e-14));
    }

    #[test]
    fn aggregate_input_means() {
        let (agg, mean) = build_aggregate_input(&psc_map(), &reference_panel()).unwrap();
        assert_relative_eq!(mean.g, 28000.0 / 30.0, max_relative = 1e-15);
        assert!((mean.g - 933.3).abs() < 0.05);
        assert_eq!(mean.t, 298.0);
        assert_relative_eq!(agg.iph_ref, 31.2, max_relative = 1e-15);

        let (_, hot_mean) = build_aggregate_input(&hotspot_map(), &reference_panel()).unwrap();
        assert!((hot_mean.t - 295.7).abs() < 0.05, "mean T {}", hot_mean.t);
        assert_eq!(hot_mean.g, 1000.0);

        let uniform = EnvMap::uniform(4, 4, stc()).unwrap();
        let (_, u_mean) = build_aggregate_input(&uniform, &reference_panel()).unwrap();
        assert_eq!(u_mean.g, 1000.0);
    }

    #[test]
    fn uniform_array_passes_all_conditions_at_random_points() {
        let panel = reference_panel();
        let map = EnvMap::uniform(10, 3, stc()).unwrap();
        let model = ArrayModel::build(&panel, &map, None, true, Drive::Voltage(0.0)).unwrap();
        let (agg_params, mean) = build_aggregate_input(&map, &panel).unwrap();
        let agg = resolve_panel(&agg_params, &mean).unwrap();
        let voc = model.open_circuit_estimate();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let v = rng.random_range(0.05..0.98) * voc;
            let point = solve_operating_point(
                &model.with_drive(Drive::Voltage(v)),
                &NewtonOptions::default(),
                None,
            )
            .unwrap();
            let report = audit_subequalities(&model, &agg, &point).unwrap();
            assert!(report.uniform);
            assert!(report.all_pass(), "violation at {v} V: {report:?}");
        }
    }

    #[test]
    fn shading_breaks_exponential_alignment() {
        let panel = reference_panel();
        let map = psc_map();
        let bypass = DiodeParams::from_threshold(0.7).unwrap();
        let model =
            ArrayModel::build(&panel, &map, Some(bypass), true, Drive::Voltage(0.0)).unwrap();
        let (agg_params, mean) = build_aggregate_input(&map, &panel).unwrap();
        let agg = resolve_panel(&agg_params, &mean).unwrap();
        let mpp = crate::mppt::ppdm_mpp(&model).unwrap();
        let point = solve_operating_point(
            &model.with_drive(Drive::Voltage(mpp.v_mpp)),
            &NewtonOptions::default(),
            None,
        )
        .unwrap();
        let report = audit_subequalities(&model, &agg, &point).unwrap();
        assert!(!report.uniform);
        assert!(!report.exponential.pass);
        assert!(report.exponential.max_violation > report.tolerance);
        // Mean-irradiance aggregation keeps the photocurrent sums aligned per
        // array, but not per row.
        assert!(!report.photocurrent.pass);
    }

    #[test]
    fn hot_spot_breaks_saturation_sums() {
        let panel = reference_panel();
        let map = hotspot_map();
        let bypass = DiodeParams::from_threshold(0.7).unwrap();
        let model =
            ArrayModel::build(&panel, &map, Some(bypass), true, Drive::Voltage(0.0)).unwrap();
        let (agg_params, mean) = build_aggregate_input(&map, &panel).unwrap();
        let agg = resolve_panel(&agg_params, &mean).unwrap();
        let voc = model.open_circuit_estimate();
        let point = solve_operating_point(
            &model.with_drive(Drive::Voltage(0.8 * voc)),
            &NewtonOptions::default(),
            None,
        )
        .unwrap();
        let report = audit_subequalities(&model, &agg, &point).unwrap();
        assert!(!report.uniform);
        assert!(!report.saturation.pass);
        assert!(report.saturation.max_violation > 0.0);
    }

    #[test]
    fn non_converged_point_rejected() {
        let map = EnvMap::uniform(2, 2, stc()).unwrap();
        let panel = reference_panel();
        let model = ArrayModel::build(&panel, &map, None, true, Drive::Voltage(50.0)).unwrap();
        let (agg_params, mean) = build_aggregate_input(&map, &panel).unwrap();
        let agg = resolve_panel(&agg_params, &mean).unwrap();
        let mut point =
            solve_operating_point(&model, &NewtonOptions::default(), None).unwrap();
        point.residual_norm = 1.0;
        assert!(matches!(
            audit_subequalities(&model, &agg, &point),
            Err(EquivalenceError::NotConverged(_))
        ));
    }
}
