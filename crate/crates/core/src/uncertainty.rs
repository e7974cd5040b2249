//! Chance-constraint machinery: normal quantiles, deterministic
//! equivalents, scenario sampling and Monte Carlo reliability checks.
//!
//! A chance constraint `P(reserve >= deviation) >= 1 - eps` with a
//! normal deviation of aggregate standard deviation `sigma` reduces to
//! the linear margin row `reserve >= Phi^{-1}(1 - eps) * sigma`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::model::{Instance, LowerDecision, UpperDecision};
use crate::qp::LinRow;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("quantile argument {0} outside (0, 1)")]
    QuantileDomain(f64),
    #[error("chance spec invalid: {0}")]
    BadSpec(String),
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    standard_normal().cdf(z)
}

/// Standard normal quantile, Newton-polished to ~1e-15 residual.
pub fn normal_quantile(p: f64) -> Result<f64, UncertaintyError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(UncertaintyError::QuantileDomain(p));
    }
    let n = standard_normal();
    let mut z = n.inverse_cdf(p);
    for _ in 0..4 {
        let pdf = n.pdf(z);
        if pdf < 1e-300 {
            break;
        }
        z -= (n.cdf(z) - p) / pdf;
    }
    Ok(z)
}

/// Root-sum-square aggregation of independent nodal deviations.
pub fn rss(sigmas: &[f64]) -> f64 {
    sigmas.iter().map(|s| s * s).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginDirection {
    /// Participating terms must exceed the margin (reserve adequacy).
    AtLeast,
    /// Participating terms must stay below the negated margin.
    AtMost,
}

/// One chance constraint before conversion: the linear body that must
/// cover the (1-eps)-quantile of an aggregate normal deviation.
#[derive(Debug, Clone)]
pub struct ChanceSpec {
    pub direction: MarginDirection,
    pub island: usize,
    pub slot: usize,
    /// Variable-index/coefficient pairs forming the reserve body.
    pub terms: Vec<(usize, f64)>,
    /// Aggregate sigma (MW), root-sum-square over participating nodes.
    pub sigma: f64,
    pub epsilon: f64,
}

/// Converts a chance constraint to its deterministic margin row, in
/// `a'x <= rhs` form.
pub fn deterministic_equivalent(spec: &ChanceSpec) -> Result<LinRow, UncertaintyError> {
    if spec.sigma < 0.0 {
        return Err(UncertaintyError::BadSpec(format!(
            "sigma {} < 0",
            spec.sigma
        )));
    }
    if !(spec.epsilon > 0.0 && spec.epsilon < 0.5) {
        return Err(UncertaintyError::BadSpec(format!(
            "epsilon {} outside (0, 0.5)",
            spec.epsilon
        )));
    }
    let margin = normal_quantile(1.0 - spec.epsilon)? * spec.sigma;
    let row = match spec.direction {
        // body >= margin  <=>  -body <= -margin
        MarginDirection::AtLeast => LinRow::new(
            spec.terms.iter().map(|&(i, c)| (i, -c)).collect(),
            -margin,
        ),
        // body <= -margin
        MarginDirection::AtMost => LinRow::new(spec.terms.clone(), -margin),
    };
    Ok(row)
}

/// Per-scenario realized deviations, reproducible from (seed, index).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub n: usize,
    pub seed: u64,
    /// `wind[s][node][slot]` deviation from forecast, MW.
    pub wind: Vec<Vec<Vec<f64>>>,
    /// `load[s][node][slot]` deviation from forecast, MW.
    pub load: Vec<Vec<Vec<f64>>>,
}

/// A strictly-in-(0,1) uniform from 53 random bits.
fn open_unit(rng: &mut ChaCha12Rng) -> f64 {
    let u: u64 = rng.gen();
    ((u >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

/// Draws one scenario's deviations for a sigma table, using a
/// dedicated substream so scenarios are order-independent.
pub fn sample_deviations(
    sigma: &[Vec<f64>],
    seed: u64,
    stream: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    sigma
        .iter()
        .map(|row| {
            row.iter()
                .map(|&s| {
                    let u = open_unit(&mut rng);
                    // sigma = 0 still consumes a draw, keeping node/slot
                    // alignment independent of which sigmas vanish
                    let z = normal_quantile(u).expect("u in (0,1)");
                    s * z
                })
                .collect()
        })
        .collect()
}

/// Per-slot sigma tables over all nodes, flattened in (island, node)
/// order.
fn sigma_tables(inst: &Instance) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut wind = Vec::new();
    let mut load = Vec::new();
    for isl in &inst.islands {
        for node in &isl.nodes {
            wind.push(
                node.wind
                    .as_ref()
                    .map_or(vec![0.0; inst.horizon], |w| w.std.clone()),
            );
            load.push(node.load.std.clone());
        }
    }
    (wind, load)
}

/// Draws `n` independent scenarios of nodal wind/load deviations.
pub fn sample_scenarios(inst: &Instance, n: usize, seed: u64) -> ScenarioSet {
    let (wind_sigma, load_sigma) = sigma_tables(inst);
    let mut wind = Vec::with_capacity(n);
    let mut load = Vec::with_capacity(n);
    for s in 0..n {
        wind.push(sample_deviations(&wind_sigma, seed, 2 * s as u64));
        load.push(sample_deviations(&load_sigma, seed, 2 * s as u64 + 1));
    }
    ScenarioSet { n, seed, wind, load }
}

/// Monte Carlo reserve-adequacy report for a fixed schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub n: usize,
    pub seed: u64,
    /// Fraction of (scenario, constraint) pairs violated.
    pub per_constraint_violation: f64,
    /// Fraction of scenarios with at least one violated slot.
    pub whole_schedule_violation: f64,
    /// 1 − per-constraint violation (headline metric).
    pub reliability: f64,
    pub whole_schedule_reliability: f64,
    pub wind_up_violation: f64,
    pub wind_dn_violation: f64,
    pub load_up_violation: f64,
    pub load_dn_violation: f64,
}

/// Checks the realized bodies of Eqs. (12)-(13) and (33)-(34) per
/// island/slot for every scenario.
pub fn monte_carlo_reliability(
    inst: &Instance,
    u: &UpperDecision,
    l: &LowerDecision,
    scenarios: &ScenarioSet,
) -> ReliabilityReport {
    let t_all = inst.horizon;
    // global node offsets per island, matching sigma_tables order
    let mut offsets = Vec::with_capacity(inst.islands.len());
    let mut off = 0;
    for isl in &inst.islands {
        offsets.push(off);
        off += isl.nodes.len();
    }

    let mut checked = 0u64;
    let mut violated = 0u64;
    let mut whole_violated = 0u64;
    let mut fam = [[0u64; 2]; 4]; // [family][violated, checked]

    for s in 0..scenarios.n {
        let mut any = false;
        for (ii, isl) in inst.islands.iter().enumerate() {
            let has_ess = isl.nodes.iter().any(|n| n.ess.is_some());
            let is_load_island = isl.role == crate::model::IslandRole::Load;
            for t in 0..t_all {
                // load adequacy (Eqs. 33-34): microgrid islands only
                if is_load_island {
                    let mut body = 0.0;
                    let mut rdg_up = 0.0;
                    let mut rdg_dn = 0.0;
                    let mut xi_l = 0.0;
                    for (ni, node) in isl.nodes.iter().enumerate() {
                        body += u.p_dg[ii][ni][t] + u.p_shed[ii][ni][t] - l.p_agg[ii][ni][t]
                            - node.load.mean[t];
                        rdg_up += u.r_dg_up[ii][ni][t];
                        rdg_dn += u.r_dg_dn[ii][ni][t];
                        xi_l += scenarios.load[s][offsets[ii] + ni][t];
                    }
                    let up_ok = body + rdg_up + l.r_agg_up[ii][t] >= xi_l - 1e-9;
                    let dn_ok = body - rdg_dn - l.r_agg_dn[ii][t] <= xi_l + 1e-9;
                    for (k, ok) in [(2, up_ok), (3, dn_ok)] {
                        fam[k][1] += 1;
                        checked += 1;
                        if !ok {
                            fam[k][0] += 1;
                            violated += 1;
                            any = true;
                        }
                    }
                }

                // wind coverage (Eqs. 12-13)
                if !has_ess {
                    continue;
                }
                let mut wbody = 0.0;
                let mut ress_up = 0.0;
                let mut ress_dn = 0.0;
                let mut xi_w = 0.0;
                for (ni, node) in isl.nodes.iter().enumerate() {
                    if node.ess.is_none() {
                        continue;
                    }
                    let mu_w = node.wind.as_ref().map_or(0.0, |w| w.mean[t]);
                    wbody += mu_w + l.p_agg[ii][ni][t] - l.p_ess[ii][ni][t];
                    ress_up += l.r_ess_up[ii][ni][t];
                    ress_dn += l.r_ess_dn[ii][ni][t];
                    xi_w += scenarios.wind[s][offsets[ii] + ni][t];
                }
                let up_ok = wbody + xi_w + l.r_agg_up[ii][t] <= ress_up + 1e-9;
                let dn_ok = wbody + xi_w - l.r_agg_dn[ii][t] >= -ress_dn - 1e-9;
                for (k, ok) in [(0, up_ok), (1, dn_ok)] {
                    fam[k][1] += 1;
                    checked += 1;
                    if !ok {
                        fam[k][0] += 1;
                        violated += 1;
                        any = true;
                    }
                }
            }
        }
        if any {
            whole_violated += 1;
        }
    }

    let frac = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let pcv = frac(violated, checked);
    let wsv = frac(whole_violated, scenarios.n as u64);
    ReliabilityReport {
        n: scenarios.n,
        seed: scenarios.seed,
        per_constraint_violation: pcv,
        whole_schedule_violation: wsv,
        reliability: 1.0 - pcv,
        whole_schedule_reliability: 1.0 - wsv,
        wind_up_violation: frac(fam[0][0], fam[0][1]),
        wind_dn_violation: frac(fam[1][0], fam[1][1]),
        load_up_violation: frac(fam[2][0], fam[2][1]),
        load_dn_violation: frac(fam[3][0], fam[3][1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn quantile_median_is_zero() {
        assert_close(normal_quantile(0.5).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn quantile_tabulated_values() {
        assert_close(normal_quantile(0.95).unwrap(), 1.6449, 1e-4);
        assert_close(normal_quantile(0.97725).unwrap(), 2.0000, 1e-4);
    }

    #[test]
    fn quantile_domain_errors() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(-0.2).is_err());
    }

    #[test]
    fn quantile_cdf_round_trip() {
        // 10^3 points across (0.001, 0.999)
        for k in 0..1000 {
            let p = 0.001 + 0.998 * (k as f64 + 0.5) / 1000.0;
            let z = normal_quantile(p).unwrap();
            assert_close(normal_cdf(z), p, 1e-8);
        }
    }

    #[test]
    fn deterministic_equivalent_margin() {
        // eps = 0.05, sigma = 1 -> margin 1.6449
        let spec = ChanceSpec {
            direction: MarginDirection::AtLeast,
            island: 0,
            slot: 0,
            terms: vec![(0, 1.0), (1, 1.0)],
            sigma: 1.0,
            epsilon: 0.05,
        };
        let row = deterministic_equivalent(&spec).unwrap();
        assert_close(-row.rhs, 1.6449, 1e-4);
        // body = 1.6449 sits exactly on the row
        let x = [1.0, 0.6449];
        assert_close(row.eval(&x), row.rhs, 1e-4);
    }

    #[test]
    fn deterministic_equivalent_zero_sigma() {
        let spec = ChanceSpec {
            direction: MarginDirection::AtLeast,
            island: 0,
            slot: 0,
            terms: vec![(0, 1.0)],
            sigma: 0.0,
            epsilon: 0.05,
        };
        let row = deterministic_equivalent(&spec).unwrap();
        assert_close(row.rhs, 0.0, 1e-12);
    }

    #[test]
    fn rss_aggregation() {
        assert_close(rss(&[0.3, 0.4]), 0.5, 1e-12);
        assert_close(rss(&[]), 0.0, 1e-12);
    }

    #[test]
    fn sampling_deterministic_and_order_independent() {
        let sigma = vec![vec![0.2, 0.3], vec![0.1, 0.4]];
        let a5 = sample_deviations(&sigma, 7, 5);
        let b5 = sample_deviations(&sigma, 7, 5);
        assert_eq!(a5, b5);
        // a different substream gives different draws
        let a6 = sample_deviations(&sigma, 7, 6);
        assert_ne!(a5, a6);
        // zero sigma pins the deviation without shifting others
        let mut sigma0 = sigma.clone();
        sigma0[0][0] = 0.0;
        let c5 = sample_deviations(&sigma0, 7, 5);
        assert_eq!(c5[0][0], 0.0);
        assert_eq!(c5[1][1], a5[1][1]);
    }

    use crate::model::{
        DieselGen, Instance, Island, IslandRole, LowerDecision, Node, StochProfile,
        UpperDecision,
    };

    /// Single load island, one DG node with unit load.
    fn toy_inst(t: usize, sigma: f64) -> Instance {
        Instance {
            horizon: t,
            slot_hours: 1.0,
            epsilon: 0.05,
            carbon_cap_tons: 1e6,
            carbon_price: 15.0,
            xi: 0.01,
            battery_mwh: 0.15,
            vessel_capacity: 1,
            service_fee: 10.0,
            transit_slots: vec![0],
            islands: vec![Island {
                role: IslandRole::Load,
                nodes: vec![Node {
                    dg: Some(DieselGen {
                        a: 4.05,
                        b: 38.64,
                        c: 12.45,
                        a_em: 0.1,
                        b_em: 0.4,
                        c_em: 0.0,
                        p_min: 0.0,
                        p_max: 5.0,
                        ramp: 5.0,
                        c_r_up: 91.5,
                        c_r_dn: 91.5,
                    }),
                    ess: None,
                    wind: None,
                    load: StochProfile {
                        mean: vec![1.0; t],
                        std: vec![sigma; t],
                    },
                    k_shed: 250.0,
                    q_bound: 0.0,
                    vessels: vec![0; t],
                }],
                lines: vec![],
                v_min: 0.95,
                v_max: 1.05,
                price_min: vec![30.0; t],
                price_max: vec![100.0; t],
                rprice_min: vec![0.0; t],
                rprice_max: vec![40.0; t],
            }],
        }
    }

    #[test]
    fn scenario_sampling_contract() {
        let inst = toy_inst(4, 0.1);
        let a = sample_scenarios(&inst, 16, 9);
        let b = sample_scenarios(&inst, 16, 9);
        assert_eq!(a.load, b.load);
        assert_eq!(a.wind, b.wind);
        // no wind profile -> zero wind deviations
        assert!(a.wind.iter().flatten().flatten().all(|&d| d == 0.0));
        assert!(a.load.iter().flatten().flatten().any(|&d| d != 0.0));
    }

    #[test]
    fn reliability_zero_variance() {
        let inst = toy_inst(4, 0.0);
        let mut u = UpperDecision::zeros(&inst);
        for t in 0..4 {
            u.p_dg[0][0][t] = 1.0;
        }
        let l = LowerDecision::zeros(&inst);
        let sc = sample_scenarios(&inst, 200, 1);
        let rep = monte_carlo_reliability(&inst, &u, &l, &sc);
        assert_eq!(rep.per_constraint_violation, 0.0);
        assert_eq!(rep.whole_schedule_reliability, 1.0);
    }

    #[test]
    fn reliability_at_exact_quantile_margin() {
        let inst = toy_inst(1, 1.0);
        let q = normal_quantile(0.95).unwrap();
        let mut u = UpperDecision::zeros(&inst);
        u.p_dg[0][0][0] = 1.0;
        u.r_dg_up[0][0][0] = q;
        u.r_dg_dn[0][0][0] = q;
        let l = LowerDecision::zeros(&inst);
        let sc = sample_scenarios(&inst, 100_000, 7);
        let rep = monte_carlo_reliability(&inst, &u, &l, &sc);
        assert!(
            (rep.load_up_violation - 0.05).abs() <= 0.005,
            "load-up violation {}",
            rep.load_up_violation
        );
        assert!(
            (rep.load_dn_violation - 0.05).abs() <= 0.005,
            "load-dn violation {}",
            rep.load_dn_violation
        );
    }

    #[test]
    fn reliability_without_reserves_collapses() {
        let inst = toy_inst(24, 0.1);
        let mut u = UpperDecision::zeros(&inst);
        for t in 0..24 {
            u.p_dg[0][0][t] = 1.0;
        }
        let l = LowerDecision::zeros(&inst);
        let sc = sample_scenarios(&inst, 2_000, 3);
        let rep = monte_carlo_reliability(&inst, &u, &l, &sc);
        assert!(
            (rep.per_constraint_violation - 0.5).abs() < 0.02,
            "per-constraint {}",
            rep.per_constraint_violation
        );
        assert!(rep.whole_schedule_reliability < 0.01);
    }

    #[test]
    fn sampling_clt_mean() {
        let sigma = vec![vec![0.15]];
        let n = 100_000;
        let mut sum = 0.0;
        for s in 0..n {
            sum += sample_deviations(&sigma, 42, s as u64)[0][0];
        }
        let mean = sum / n as f64;
        let bound = 3.0 * 0.15 / (n as f64).sqrt();
        assert!(mean.abs() <= bound, "mean {mean} exceeds CLT bound {bound}");
    }
}
