//! Flat variable registry over an instance: upper-level block first,
//! then lower-level continuous, then lower-level integers, in a fixed
//! deterministic order.

use std::collections::HashMap;
use std::ops::Range;

use super::cost::{LowerDecision, UpperDecision};
use super::types::{Instance, IslandRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    // upper level, nodal
    PDg(usize, usize, usize),
    PShed(usize, usize, usize),
    RDgUp(usize, usize, usize),
    RDgDn(usize, usize, usize),
    Voltage(usize, usize, usize),
    Angle(usize, usize, usize),
    QInj(usize, usize, usize),
    // upper level, market-wide per slot
    Price(usize),
    RPriceUp(usize),
    RPriceDn(usize),
    // lower level, continuous
    PAgg(usize, usize, usize),
    PEss(usize, usize, usize),
    REssUp(usize, usize, usize),
    REssDn(usize, usize, usize),
    RAggUp(usize, usize),
    RAggDn(usize, usize),
    /// Σ_nodes P_agg at a slot (pricing aggregate).
    SAgg(usize),
    /// Σ_islands R_agg at a slot.
    AAggUp(usize),
    AAggDn(usize),
    // lower level, integer
    NSwap(usize, usize, usize),
    Kappa(usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Registry {
    pub vars: Vec<Var>,
    pub bounds: Vec<(f64, f64)>,
    index: HashMap<Var, usize>,
    pub upper: Range<usize>,
    pub lower_cont: Range<usize>,
    pub lower_int: Range<usize>,
}

impl Registry {
    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn idx(&self, v: Var) -> usize {
        *self
            .index
            .get(&v)
            .unwrap_or_else(|| panic!("variable {v:?} not registered"))
    }

    pub fn get(&self, v: Var) -> Option<usize> {
        self.index.get(&v).copied()
    }

    pub fn is_upper(&self, i: usize) -> bool {
        self.upper.contains(&i)
    }

    pub fn is_lower_cont(&self, i: usize) -> bool {
        self.lower_cont.contains(&i)
    }

    pub fn is_lower_int(&self, i: usize) -> bool {
        self.lower_int.contains(&i)
    }
}

/// Static bound for the signed swap count at a node/slot: role decides
/// the sign, vessel availability the magnitude, and shipments that
/// cannot arrive within the horizon are forbidden.
pub fn swap_bounds(inst: &Instance, ii: usize, ni: usize, t: usize) -> (f64, f64) {
    let isl = &inst.islands[ii];
    let cap = (isl.nodes[ni].vessels[t] as f64) * inst.vessel_capacity as f64;
    match isl.role {
        IslandRole::Resource => {
            if t + inst.transit_slots[ii] >= inst.horizon {
                (0.0, 0.0)
            } else {
                (0.0, cap)
            }
        }
        IslandRole::Load => (-cap, 0.0),
    }
}

pub fn build_registry(inst: &Instance) -> Registry {
    let t_all = inst.horizon;
    let mut vars = Vec::new();
    let mut bounds = Vec::new();
    let push = |vars: &mut Vec<Var>, bounds: &mut Vec<(f64, f64)>, v: Var, b: (f64, f64)| {
        vars.push(v);
        bounds.push(b);
    };

    // ---- upper level ----
    for (ii, isl) in inst.islands.iter().enumerate() {
        let lined = !isl.lines.is_empty();
        for (ni, node) in isl.nodes.iter().enumerate() {
            for t in 0..t_all {
                if let Some(dg) = &node.dg {
                    push(&mut vars, &mut bounds, Var::PDg(ii, ni, t), (dg.p_min, dg.p_max));
                    let rcap = dg.p_max - dg.p_min;
                    push(&mut vars, &mut bounds, Var::RDgUp(ii, ni, t), (0.0, rcap));
                    push(&mut vars, &mut bounds, Var::RDgDn(ii, ni, t), (0.0, rcap));
                }
                if isl.role == IslandRole::Load && node.load.mean[t] > 0.0 {
                    push(
                        &mut vars,
                        &mut bounds,
                        Var::PShed(ii, ni, t),
                        (0.0, node.load.mean[t]),
                    );
                }
                if lined {
                    let vb = if ni == 0 {
                        (1.0, 1.0) // slack bus
                    } else {
                        (isl.v_min, isl.v_max)
                    };
                    push(&mut vars, &mut bounds, Var::Voltage(ii, ni, t), vb);
                    let ab = if ni == 0 { (0.0, 0.0) } else { (-0.5, 0.5) };
                    push(&mut vars, &mut bounds, Var::Angle(ii, ni, t), ab);
                    if node.q_bound > 0.0 {
                        push(
                            &mut vars,
                            &mut bounds,
                            Var::QInj(ii, ni, t),
                            (-node.q_bound, node.q_bound),
                        );
                    }
                }
            }
        }
    }
    for t in 0..t_all {
        push(&mut vars, &mut bounds, Var::Price(t), inst.price_bounds(t));
        push(&mut vars, &mut bounds, Var::RPriceUp(t), inst.rprice_bounds(t));
        push(&mut vars, &mut bounds, Var::RPriceDn(t), inst.rprice_bounds(t));
    }
    let upper = 0..vars.len();

    // ---- lower level, continuous ----
    let mut s_lo = vec![0.0; t_all];
    let mut s_hi = vec![0.0; t_all];
    let mut a_hi = vec![0.0; t_all];
    for (ii, isl) in inst.islands.iter().enumerate() {
        // market exchange exists only where the aggregator shares a
        // network with the microgrid: resource islands have no cable,
        // their wind charges the swap station directly
        let trades = isl.role == IslandRole::Load;
        let mut island_rcap = 0.0;
        for (ni, node) in isl.nodes.iter().enumerate() {
            let Some(ess) = &node.ess else { continue };
            let rcap = ess.p_max - ess.p_min;
            island_rcap += rcap;
            for t in 0..t_all {
                if trades {
                    let wind = node.wind.as_ref().map_or(0.0, |w| w.mean[t]);
                    // P_agg = P_ess - wind exactly (Eq. 4), so its box
                    // follows the ESS power box shifted by the forecast
                    let pb = (ess.p_min - wind, ess.p_max - wind);
                    s_lo[t] += pb.0;
                    s_hi[t] += pb.1;
                    push(&mut vars, &mut bounds, Var::PAgg(ii, ni, t), pb);
                }
                push(&mut vars, &mut bounds, Var::PEss(ii, ni, t), (ess.p_min, ess.p_max));
                push(&mut vars, &mut bounds, Var::REssUp(ii, ni, t), (0.0, rcap));
                push(&mut vars, &mut bounds, Var::REssDn(ii, ni, t), (0.0, rcap));
            }
        }
        if trades && island_rcap > 0.0 {
            for t in 0..t_all {
                a_hi[t] += island_rcap;
                push(&mut vars, &mut bounds, Var::RAggUp(ii, t), (0.0, island_rcap));
                push(&mut vars, &mut bounds, Var::RAggDn(ii, t), (0.0, island_rcap));
            }
        }
    }
    for t in 0..t_all {
        push(&mut vars, &mut bounds, Var::SAgg(t), (s_lo[t], s_hi[t]));
        push(&mut vars, &mut bounds, Var::AAggUp(t), (0.0, a_hi[t]));
        push(&mut vars, &mut bounds, Var::AAggDn(t), (0.0, a_hi[t]));
    }
    let lower_cont = upper.end..vars.len();

    // ---- lower level, integer ----
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            let Some(ess) = &node.ess else { continue };
            for t in 0..t_all {
                push(
                    &mut vars,
                    &mut bounds,
                    Var::NSwap(ii, ni, t),
                    swap_bounds(inst, ii, ni, t),
                );
                let k_lo = (ess.p_min * inst.slot_hours / inst.battery_mwh).floor() - 1.0;
                let k_hi = (ess.p_max * inst.slot_hours / inst.battery_mwh).ceil() + 1.0;
                push(&mut vars, &mut bounds, Var::Kappa(ii, ni, t), (k_lo, k_hi));
            }
        }
    }
    let lower_int = lower_cont.end..vars.len();

    let index = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i))
        .collect::<HashMap<_, _>>();
    assert_eq!(index.len(), vars.len(), "duplicate variable registration");
    Registry {
        vars,
        bounds,
        index,
        upper,
        lower_cont,
        lower_int,
    }
}

impl Registry {
    /// Unpacks a flat solver vector into decision structs.
    pub fn unpack(&self, inst: &Instance, x: &[f64]) -> (UpperDecision, LowerDecision) {
        let mut u = UpperDecision::zeros(inst);
        let mut l = LowerDecision::zeros(inst);
        for (i, &v) in self.vars.iter().enumerate() {
            let val = x[i];
            match v {
                Var::PDg(a, b, t) => u.p_dg[a][b][t] = val,
                Var::PShed(a, b, t) => u.p_shed[a][b][t] = val,
                Var::RDgUp(a, b, t) => u.r_dg_up[a][b][t] = val,
                Var::RDgDn(a, b, t) => u.r_dg_dn[a][b][t] = val,
                Var::Voltage(a, b, t) => u.voltage[a][b][t] = val,
                Var::Angle(a, b, t) => u.angle[a][b][t] = val,
                Var::QInj(a, b, t) => u.q_inj[a][b][t] = val,
                Var::Price(t) => u.price[t] = val,
                Var::RPriceUp(t) => u.rprice_up[t] = val,
                Var::RPriceDn(t) => u.rprice_dn[t] = val,
                Var::PAgg(a, b, t) => l.p_agg[a][b][t] = val,
                Var::PEss(a, b, t) => l.p_ess[a][b][t] = val,
                Var::REssUp(a, b, t) => l.r_ess_up[a][b][t] = val,
                Var::REssDn(a, b, t) => l.r_ess_dn[a][b][t] = val,
                Var::RAggUp(a, t) => l.r_agg_up[a][t] = val,
                Var::RAggDn(a, t) => l.r_agg_dn[a][t] = val,
                Var::SAgg(_) | Var::AAggUp(_) | Var::AAggDn(_) => {}
                Var::NSwap(a, b, t) => l.n_swap[a][b][t] = val.round() as i64,
                Var::Kappa(a, b, t) => l.kappa[a][b][t] = val.round() as i64,
            }
        }
        (u, l)
    }

    /// Packs decision structs back into a flat vector (aggregates are
    /// recomputed from their definitions).
    pub fn pack(&self, inst: &Instance, u: &UpperDecision, l: &LowerDecision) -> Vec<f64> {
        let mut x = vec![0.0; self.len()];
        for (i, &v) in self.vars.iter().enumerate() {
            x[i] = match v {
                Var::PDg(a, b, t) => u.p_dg[a][b][t],
                Var::PShed(a, b, t) => u.p_shed[a][b][t],
                Var::RDgUp(a, b, t) => u.r_dg_up[a][b][t],
                Var::RDgDn(a, b, t) => u.r_dg_dn[a][b][t],
                Var::Voltage(a, b, t) => u.voltage[a][b][t],
                Var::Angle(a, b, t) => u.angle[a][b][t],
                Var::QInj(a, b, t) => u.q_inj[a][b][t],
                Var::Price(t) => u.price[t],
                Var::RPriceUp(t) => u.rprice_up[t],
                Var::RPriceDn(t) => u.rprice_dn[t],
                Var::PAgg(a, b, t) => l.p_agg[a][b][t],
                Var::PEss(a, b, t) => l.p_ess[a][b][t],
                Var::REssUp(a, b, t) => l.r_ess_up[a][b][t],
                Var::REssDn(a, b, t) => l.r_ess_dn[a][b][t],
                Var::RAggUp(a, t) => l.r_agg_up[a][t],
                Var::RAggDn(a, t) => l.r_agg_dn[a][t],
                Var::SAgg(t) => inst
                    .islands
                    .iter()
                    .enumerate()
                    .map(|(a, isl)| {
                        (0..isl.nodes.len()).map(|b| l.p_agg[a][b][t]).sum::<f64>()
                    })
                    .sum(),
                Var::AAggUp(t) => (0..inst.islands.len()).map(|a| l.r_agg_up[a][t]).sum(),
                Var::AAggDn(t) => (0..inst.islands.len()).map(|a| l.r_agg_dn[a][t]).sum(),
                Var::NSwap(a, b, t) => l.n_swap[a][b][t] as f64,
                Var::Kappa(a, b, t) => l.kappa[a][b][t] as f64,
            };
        }
        x
    }
}
