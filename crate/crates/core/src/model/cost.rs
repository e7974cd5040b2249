//! Decision containers, objective evaluation for both levels and the
//! exact battery-count dynamics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::types::Instance;

/// Upper-level (microgrid operator) decisions. All nodal arrays are
/// indexed `[island][node][slot]`; prices are market-wide per slot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UpperDecision {
    pub p_dg: Vec<Vec<Vec<f64>>>,
    pub p_shed: Vec<Vec<Vec<f64>>>,
    pub r_dg_up: Vec<Vec<Vec<f64>>>,
    pub r_dg_dn: Vec<Vec<Vec<f64>>>,
    pub voltage: Vec<Vec<Vec<f64>>>,
    pub angle: Vec<Vec<Vec<f64>>>,
    pub q_inj: Vec<Vec<Vec<f64>>>,
    /// Transaction price, $/MWh per slot.
    pub price: Vec<f64>,
    pub rprice_up: Vec<f64>,
    pub rprice_dn: Vec<f64>,
}

/// Lower-level (aggregator) decisions. `p_agg > 0` means power flows
/// from the microgrid into the aggregator's ESS.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LowerDecision {
    pub p_agg: Vec<Vec<Vec<f64>>>,
    pub p_ess: Vec<Vec<Vec<f64>>>,
    pub r_ess_up: Vec<Vec<Vec<f64>>>,
    pub r_ess_dn: Vec<Vec<Vec<f64>>>,
    /// Aggregator reserve sold per island and slot.
    pub r_agg_up: Vec<Vec<f64>>,
    pub r_agg_dn: Vec<Vec<f64>>,
    /// Batteries swapped: positive = swapped out to a vessel.
    pub n_swap: Vec<Vec<Vec<i64>>>,
    /// Floor auxiliary of Eqs. (7)-(9).
    pub kappa: Vec<Vec<Vec<i64>>>,
}

impl UpperDecision {
    /// All-zero decisions shaped like the instance.
    pub fn zeros(inst: &Instance) -> Self {
        let shape = |_: usize| {
            inst.islands
                .iter()
                .map(|isl| vec![vec![0.0; inst.horizon]; isl.nodes.len()])
                .collect::<Vec<_>>()
        };
        UpperDecision {
            p_dg: shape(0),
            p_shed: shape(0),
            r_dg_up: shape(0),
            r_dg_dn: shape(0),
            voltage: shape(0),
            angle: shape(0),
            q_inj: shape(0),
            price: vec![0.0; inst.horizon],
            rprice_up: vec![0.0; inst.horizon],
            rprice_dn: vec![0.0; inst.horizon],
        }
    }
}

impl LowerDecision {
    pub fn zeros(inst: &Instance) -> Self {
        let nodal = || {
            inst.islands
                .iter()
                .map(|isl| vec![vec![0.0; inst.horizon]; isl.nodes.len()])
                .collect::<Vec<_>>()
        };
        let nodal_i = || {
            inst.islands
                .iter()
                .map(|isl| vec![vec![0i64; inst.horizon]; isl.nodes.len()])
                .collect::<Vec<_>>()
        };
        LowerDecision {
            p_agg: nodal(),
            p_ess: nodal(),
            r_ess_up: nodal(),
            r_ess_dn: nodal(),
            r_agg_up: vec![vec![0.0; inst.horizon]; inst.islands.len()],
            r_agg_dn: vec![vec![0.0; inst.horizon]; inst.islands.len()],
            n_swap: nodal_i(),
            kappa: nodal_i(),
        }
    }
}

/// Whole microgrid cost, Σ (f_DG + f_EM + f_shed + f_agg + f_DG,r +
/// f_agg,r). The energy-exchange term is −π·P_agg: the operator is
/// paid when the aggregator draws power.
pub fn upper_cost(inst: &Instance, u: &UpperDecision, l: &LowerDecision) -> f64 {
    let mut total = 0.0;
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            for t in 0..inst.horizon {
                if let Some(dg) = &node.dg {
                    let p = u.p_dg[ii][ni][t];
                    total += dg.a * p * p + dg.b * p + dg.c;
                    total += inst.carbon_price
                        * (dg.a_em * p * p + dg.b_em * p + dg.c_em);
                    total += dg.c_r_up * u.r_dg_up[ii][ni][t]
                        + dg.c_r_dn * u.r_dg_dn[ii][ni][t];
                }
                let shed = u.p_shed[ii][ni][t];
                total += node.k_shed * shed * shed;
                total -= u.price[t] * l.p_agg[ii][ni][t];
            }
        }
        for t in 0..inst.horizon {
            total += u.rprice_up[t] * l.r_agg_up[ii][t]
                + u.rprice_dn[t] * l.r_agg_dn[ii][t];
        }
    }
    total
}

/// Aggregator cost (Eq. 1 minimization objective); the profit reported
/// externally is its negation. Service fees accrue on swap-outs only.
pub fn lower_cost(inst: &Instance, u: &UpperDecision, l: &LowerDecision) -> f64 {
    let mut total = 0.0;
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            for t in 0..inst.horizon {
                total += u.price[t] * l.p_agg[ii][ni][t];
                if let Some(ess) = &node.ess {
                    let p = l.p_ess[ii][ni][t];
                    let (ru, rd) = (l.r_ess_up[ii][ni][t], l.r_ess_dn[ii][ni][t]);
                    total += ess.k_ess * p * p
                        + ess.c_r_up * ru * ru
                        + ess.c_r_dn * rd * rd;
                }
                total += inst.service_fee * l.n_swap[ii][ni][t].max(0) as f64;
            }
        }
        for t in 0..inst.horizon {
            total -= u.rprice_up[t] * l.r_agg_up[ii][t]
                + u.rprice_dn[t] * l.r_agg_dn[ii][t];
        }
    }
    total
}

/// Total carbon emitted by the schedule, tons (body of Eq. 25).
pub fn carbon_total(inst: &Instance, u: &UpperDecision) -> f64 {
    let mut total = 0.0;
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            if let Some(dg) = &node.dg {
                for t in 0..inst.horizon {
                    let p = u.p_dg[ii][ni][t];
                    total += dg.a_em * p * p + dg.b_em * p + dg.c_em;
                }
            }
        }
    }
    total
}

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("battery count would become negative: full {0}, depleted {1}")]
    NegativeCount(i64, i64),
}

/// One step of the exact battery dynamics, Eqs. (7)-(10). The floor is
/// toward negative infinity; returns the updated counts, in-use energy
/// residue and total stored energy.
pub fn battery_dynamics_step(
    n_full: i64,
    n_depleted: i64,
    e_inuse: f64,
    n_swap: i64,
    p_ess: f64,
    dt: f64,
    e: f64,
) -> Result<(i64, i64, f64, f64), DynamicsError> {
    let charged = e_inuse + p_ess * dt;
    // nudge protects exact multiples of e from fp round-down
    let kappa = (charged / e + 1e-9).floor() as i64;
    let n_full2 = n_full - n_swap + kappa;
    let n_dep2 = n_depleted + n_swap - kappa;
    if n_full2 < 0 || n_dep2 < 0 {
        return Err(DynamicsError::NegativeCount(n_full2, n_dep2));
    }
    let e_inuse2 = charged - e * kappa as f64;
    let e_ess2 = e_inuse2 + n_full2 as f64 * e;
    Ok((n_full2, n_dep2, e_inuse2, e_ess2))
}
