//! Constraint-block and objective assembly: turns an instance into the
//! compact two-block form
//!
//! ```text
//!   upper:  A x_u + B x_l + C y_l <= b_u   (+ one quadratic carbon row)
//!   lower:  D x_l + E y_l <= b_l           (no upper variables at all)
//! ```
//!
//! with both objectives split into convex quadratic/linear parts plus a
//! shared list of price-times-quantity bilinear terms.

use thiserror::Error;

use crate::qp::{LinRow, QuadRow};
use crate::uncertainty::{deterministic_equivalent, normal_quantile, rss, ChanceSpec, MarginDirection};

use super::registry::{build_registry, swap_bounds, Registry, Var};
use super::types::{Instance, IslandRole};

/// Strictness margin realizing the open side of `E_inuse < e`, MWh.
pub const DELTA_FLOOR: f64 = 1e-6;

/// Reactive draw per MW of load at power factor 0.95.
fn q_per_mw() -> f64 {
    (1.0 / 0.95f64.powi(2) - 1.0).sqrt()
}

/// One bilinear objective term `price * qty`, entering the two
/// objectives with opposite signs (Eqs. 17/19 vs Eq. 1).
#[derive(Debug, Clone, Copy)]
pub struct BilinearObjTerm {
    pub price: usize,
    pub qty: usize,
    pub upper_coef: f64,
    pub lower_coef: f64,
}

/// Separable objective: diagonal quadratic + linear + constant.
#[derive(Debug, Clone, Default)]
pub struct ObjTerms {
    pub quad: Vec<(usize, f64)>,
    pub lin: Vec<(usize, f64)>,
    pub constant: f64,
}

impl ObjTerms {
    fn add_quad(&mut self, i: usize, c: f64) {
        if c != 0.0 {
            self.quad.push((i, c));
        }
    }
    fn add_lin(&mut self, i: usize, c: f64) {
        if c != 0.0 {
            self.lin.push((i, c));
        }
    }
    pub fn eval(&self, x: &[f64]) -> f64 {
        let q: f64 = self.quad.iter().map(|&(i, c)| c * x[i] * x[i]).sum();
        let l: f64 = self.lin.iter().map(|&(i, c)| c * x[i]).sum();
        q + l + self.constant
    }
}

#[derive(Debug, Clone)]
pub struct ModelBlocks {
    pub reg: Registry,
    pub upper_ineq: Vec<LinRow>,
    pub upper_eq: Vec<LinRow>,
    /// Carbon cap (Eq. 25).
    pub upper_quad: Vec<QuadRow>,
    pub lower_ineq: Vec<LinRow>,
    pub lower_eq: Vec<LinRow>,
    pub upper_obj: ObjTerms,
    pub lower_obj: ObjTerms,
    pub bilinear: Vec<BilinearObjTerm>,
}

impl ModelBlocks {
    pub fn eval_upper(&self, x: &[f64]) -> f64 {
        self.upper_obj.eval(x)
            + self
                .bilinear
                .iter()
                .map(|b| b.upper_coef * x[b.price] * x[b.qty])
                .sum::<f64>()
    }

    pub fn eval_lower(&self, x: &[f64]) -> f64 {
        self.lower_obj.eval(x)
            + self
                .bilinear
                .iter()
                .map(|b| b.lower_coef * x[b.price] * x[b.qty])
                .sum::<f64>()
    }
}

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("lower-level constraint references upper-level variable {var:?} (row: {row})")]
    UpperVarInLowerBlock { var: Var, row: String },
    #[error(transparent)]
    Uncertainty(#[from] crate::uncertainty::UncertaintyError),
}

pub fn assemble(inst: &Instance) -> Result<ModelBlocks, AssembleError> {
    let reg = build_registry(inst);
    let t_all = inst.horizon;
    let dt = inst.slot_hours;
    let e = inst.battery_mwh;
    let _q = normal_quantile(1.0 - inst.epsilon)?;

    let mut upper_ineq = Vec::new();
    let mut upper_eq = Vec::new();
    let mut lower_ineq = Vec::new();
    let mut lower_eq = Vec::new();
    let mut upper_obj = ObjTerms::default();
    let mut lower_obj = ObjTerms::default();
    let mut bilinear = Vec::new();

    // ---------- upper objective ----------
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            for t in 0..t_all {
                if let Some(dg) = &node.dg {
                    let p = reg.idx(Var::PDg(ii, ni, t));
                    upper_obj.add_quad(p, dg.a + inst.carbon_price * dg.a_em);
                    upper_obj.add_lin(p, dg.b + inst.carbon_price * dg.b_em);
                    upper_obj.constant += dg.c + inst.carbon_price * dg.c_em;
                    upper_obj.add_lin(reg.idx(Var::RDgUp(ii, ni, t)), dg.c_r_up);
                    upper_obj.add_lin(reg.idx(Var::RDgDn(ii, ni, t)), dg.c_r_dn);
                }
                if let Some(s) = reg.get(Var::PShed(ii, ni, t)) {
                    upper_obj.add_quad(s, node.k_shed);
                }
            }
        }
    }
    for t in 0..t_all {
        bilinear.push(BilinearObjTerm {
            price: reg.idx(Var::Price(t)),
            qty: reg.idx(Var::SAgg(t)),
            upper_coef: -1.0,
            lower_coef: 1.0,
        });
        bilinear.push(BilinearObjTerm {
            price: reg.idx(Var::RPriceUp(t)),
            qty: reg.idx(Var::AAggUp(t)),
            upper_coef: 1.0,
            lower_coef: -1.0,
        });
        bilinear.push(BilinearObjTerm {
            price: reg.idx(Var::RPriceDn(t)),
            qty: reg.idx(Var::AAggDn(t)),
            upper_coef: 1.0,
            lower_coef: -1.0,
        });
    }

    // ---------- lower objective ----------
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            let Some(ess) = &node.ess else { continue };
            for t in 0..t_all {
                lower_obj.add_quad(reg.idx(Var::PEss(ii, ni, t)), ess.k_ess);
                lower_obj.add_quad(reg.idx(Var::REssUp(ii, ni, t)), ess.c_r_up);
                lower_obj.add_quad(reg.idx(Var::REssDn(ii, ni, t)), ess.c_r_dn);
                if isl.role == IslandRole::Resource {
                    lower_obj.add_lin(reg.idx(Var::NSwap(ii, ni, t)), inst.service_fee);
                }
            }
        }
    }

    // ---------- upper constraints ----------
    let mut carbon = QuadRow {
        sq: Vec::new(),
        lin: Vec::new(),
        rhs: inst.carbon_cap_tons,
    };
    for (ii, isl) in inst.islands.iter().enumerate() {
        let lined = !isl.lines.is_empty();
        for (ni, node) in isl.nodes.iter().enumerate() {
            if let Some(dg) = &node.dg {
                for t in 0..t_all {
                    let p = reg.idx(Var::PDg(ii, ni, t));
                    let ru = reg.idx(Var::RDgUp(ii, ni, t));
                    let rd = reg.idx(Var::RDgDn(ii, ni, t));
                    // Eqs. (21)-(22)
                    upper_ineq.push(LinRow::new(vec![(p, -1.0), (rd, 1.0)], -dg.p_min));
                    upper_ineq.push(LinRow::new(vec![(p, 1.0), (ru, 1.0)], dg.p_max));
                    // Eq. (23)
                    if t >= 1 {
                        let pm = reg.idx(Var::PDg(ii, ni, t - 1));
                        let lim = dg.ramp * dt;
                        upper_ineq.push(LinRow::new(vec![(p, 1.0), (pm, -1.0)], lim));
                        upper_ineq.push(LinRow::new(vec![(p, -1.0), (pm, 1.0)], lim));
                    }
                    if dg.a_em != 0.0 {
                        carbon.sq.push((p, dg.a_em));
                    }
                    if dg.b_em != 0.0 {
                        carbon.lin.push((p, dg.b_em));
                    }
                    carbon.rhs -= dg.c_em;
                }
            }
        }

        // the microgrid exists only on the load island: balance, flow
        // and reserve-adequacy rows apply there alone
        if isl.role != IslandRole::Load {
            continue;
        }

        // nodal balance and linearized flow (Eqs. 28-30), or a single
        // island-wide balance when the island has no lines
        for t in 0..t_all {
            if lined {
                for (ni, node) in isl.nodes.iter().enumerate() {
                    let mut prow: Vec<(usize, f64)> = Vec::new();
                    let mut qrow: Vec<(usize, f64)> = Vec::new();
                    if let Some(p) = reg.get(Var::PDg(ii, ni, t)) {
                        prow.push((p, 1.0));
                    }
                    if let Some(s) = reg.get(Var::PShed(ii, ni, t)) {
                        prow.push((s, 1.0));
                    }
                    if let Some(a) = reg.get(Var::PAgg(ii, ni, t)) {
                        prow.push((a, -1.0));
                    }
                    if let Some(qv) = reg.get(Var::QInj(ii, ni, t)) {
                        qrow.push((qv, 1.0));
                    }
                    for line in &isl.lines {
                        let (m, n) = (line.from, line.to);
                        let other = if m == ni {
                            n
                        } else if n == ni {
                            m
                        } else {
                            continue;
                        };
                        let den = line.r * line.r + line.x * line.x;
                        let bf = line.x / den;
                        let gf = line.r / den;
                        let th_m = reg.idx(Var::Angle(ii, ni, t));
                        let th_n = reg.idx(Var::Angle(ii, other, t));
                        let v_m = reg.idx(Var::Voltage(ii, ni, t));
                        let v_n = reg.idx(Var::Voltage(ii, other, t));
                        // P_m += bf (th_m - th_n) + gf (v_m - v_n)
                        prow.push((th_m, -bf));
                        prow.push((th_n, bf));
                        prow.push((v_m, -gf));
                        prow.push((v_n, gf));
                        // Q_m += -gf (th_m - th_n) + bf (v_m - v_n)
                        qrow.push((th_m, gf));
                        qrow.push((th_n, -gf));
                        qrow.push((v_m, -bf));
                        qrow.push((v_n, bf));
                    }
                    upper_eq.push(LinRow::new(prow, node.load.mean[t]));
                    upper_eq.push(LinRow::new(qrow, node.load.mean[t] * q_per_mw()));
                }
            } else {
                let mut row: Vec<(usize, f64)> = Vec::new();
                let mut rhs = 0.0;
                for (ni, node) in isl.nodes.iter().enumerate() {
                    if let Some(p) = reg.get(Var::PDg(ii, ni, t)) {
                        row.push((p, 1.0));
                    }
                    if let Some(s) = reg.get(Var::PShed(ii, ni, t)) {
                        row.push((s, 1.0));
                    }
                    if let Some(a) = reg.get(Var::PAgg(ii, ni, t)) {
                        row.push((a, -1.0));
                    }
                    rhs += node.load.mean[t];
                }
                upper_eq.push(LinRow::new(row, rhs));
            }
        }

        // load chance constraints (Eqs. 33-34 via Eqs. 35-36)
        for t in 0..t_all {
            let sigma = rss(&isl
                .nodes
                .iter()
                .map(|n| n.load.std[t])
                .collect::<Vec<_>>());
            let mut terms_up: Vec<(usize, f64)> = Vec::new();
            let mut terms_dn: Vec<(usize, f64)> = Vec::new();
            let mut mu = 0.0;
            for (ni, node) in isl.nodes.iter().enumerate() {
                mu += node.load.mean[t];
                if let Some(p) = reg.get(Var::PDg(ii, ni, t)) {
                    terms_up.push((p, 1.0));
                    terms_dn.push((p, 1.0));
                    terms_up.push((reg.idx(Var::RDgUp(ii, ni, t)), 1.0));
                    terms_dn.push((reg.idx(Var::RDgDn(ii, ni, t)), -1.0));
                }
                if let Some(s) = reg.get(Var::PShed(ii, ni, t)) {
                    terms_up.push((s, 1.0));
                    terms_dn.push((s, 1.0));
                }
                if let Some(a) = reg.get(Var::PAgg(ii, ni, t)) {
                    terms_up.push((a, -1.0));
                    terms_dn.push((a, -1.0));
                }
            }
            if let Some(r) = reg.get(Var::RAggUp(ii, t)) {
                terms_up.push((r, 1.0));
            }
            if let Some(r) = reg.get(Var::RAggDn(ii, t)) {
                terms_dn.push((r, -1.0));
            }
            // up: supply + upward reserve covers load + q*sigma
            let mut row = deterministic_equivalent(&ChanceSpec {
                direction: MarginDirection::AtLeast,
                island: ii,
                slot: t,
                terms: terms_up,
                sigma,
                epsilon: inst.epsilon,
            })?;
            row.rhs -= mu; // body >= mu + q*sigma
            upper_ineq.push(row);
            // down: supply minus downward reserve stays under load - q*sigma
            let mut row = deterministic_equivalent(&ChanceSpec {
                direction: MarginDirection::AtMost,
                island: ii,
                slot: t,
                terms: terms_dn,
                sigma,
                epsilon: inst.epsilon,
            })?;
            row.rhs += mu;
            upper_ineq.push(row);
        }
    }
    let upper_quad = vec![carbon];

    // ---------- lower constraints ----------
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            let Some(ess) = &node.ess else { continue };
            let e0 = ess.n_full0 as f64 * e + ess.e_inuse0;
            for t in 0..t_all {
                let pe = reg.idx(Var::PEss(ii, ni, t));
                let ru = reg.idx(Var::REssUp(ii, ni, t));
                let rd = reg.idx(Var::REssDn(ii, ni, t));
                // Eqs. (2)-(3)
                lower_ineq.push(LinRow::new(vec![(pe, 1.0), (ru, 1.0)], ess.p_max));
                lower_ineq.push(LinRow::new(vec![(pe, -1.0), (rd, 1.0)], -ess.p_min));
                lower_ineq.push(LinRow::new(vec![(ru, -1.0)], 0.0));
                lower_ineq.push(LinRow::new(vec![(rd, -1.0)], 0.0));
                // Eq. (4) where exchange exists; on resource islands
                // the wind feeds the swap station directly
                let wind = node.wind.as_ref().map_or(0.0, |w| w.mean[t]);
                match reg.get(Var::PAgg(ii, ni, t)) {
                    Some(pa) => lower_eq.push(LinRow::new(vec![(pe, 1.0), (pa, -1.0)], wind)),
                    None => lower_eq.push(LinRow::new(vec![(pe, 1.0)], wind)),
                }
                // Eq. (5) with role-signed swaps
                let ns = reg.idx(Var::NSwap(ii, ni, t));
                let (lo, hi) = swap_bounds(inst, ii, ni, t);
                lower_ineq.push(LinRow::new(vec![(ns, 1.0)], hi));
                lower_ineq.push(LinRow::new(vec![(ns, -1.0)], -lo));

                // cumulative battery rows: prefix sums over 0..=t
                let pfx_p: Vec<(usize, f64)> = (0..=t)
                    .map(|tau| (reg.idx(Var::PEss(ii, ni, tau)), dt))
                    .collect();
                let pfx_k: Vec<(usize, f64)> = (0..=t)
                    .map(|tau| (reg.idx(Var::Kappa(ii, ni, tau)), 1.0))
                    .collect();
                let pfx_n: Vec<(usize, f64)> = (0..=t)
                    .map(|tau| (reg.idx(Var::NSwap(ii, ni, tau)), 1.0))
                    .collect();
                let scale = |v: &[(usize, f64)], s: f64| {
                    v.iter().map(|&(i, c)| (i, c * s)).collect::<Vec<_>>()
                };
                let cat = |a: Vec<(usize, f64)>, b: Vec<(usize, f64)>| {
                    let mut out = a;
                    out.extend(b);
                    out
                };
                // 0 <= E_inuse(t) <= e - delta  (floor band, Eq. 9)
                lower_ineq.push(LinRow::new(
                    cat(scale(&pfx_p, -1.0), pfx_k.iter().map(|&(i, _)| (i, e)).collect()),
                    ess.e_inuse0,
                ));
                lower_ineq.push(LinRow::new(
                    cat(pfx_p.clone(), scale(&pfx_k, -e)),
                    e - DELTA_FLOOR - ess.e_inuse0,
                ));
                // N_full(t) >= 0, N_depleted(t) >= 0 (Eqs. 7-8)
                lower_ineq.push(LinRow::new(
                    cat(pfx_n.clone(), scale(&pfx_k, -1.0)),
                    ess.n_full0 as f64,
                ));
                lower_ineq.push(LinRow::new(
                    cat(scale(&pfx_n, -1.0), pfx_k.clone()),
                    ess.n_depleted0 as f64,
                ));
                // E_min <= E_ess(t) <= E_max (Eq. 10 bounds)
                lower_ineq.push(LinRow::new(
                    cat(pfx_p.clone(), scale(&pfx_n, -e)),
                    ess.e_max - e0,
                ));
                lower_ineq.push(LinRow::new(
                    cat(scale(&pfx_p, -1.0), scale(&pfx_n, e)),
                    e0 - ess.e_min,
                ));
                // next-day readiness: terminal energy >= initial
                if t == t_all - 1 {
                    lower_ineq.push(LinRow::new(
                        cat(scale(&pfx_p, -1.0), scale(&pfx_n, e)),
                        0.0,
                    ));
                }
            }
        }

        // wind chance constraints (Eqs. 12-13 via Eqs. 37-38)
        let ess_nodes: Vec<usize> = isl
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.ess.is_some())
            .map(|(ni, _)| ni)
            .collect();
        if ess_nodes.is_empty() {
            continue;
        }
        for t in 0..t_all {
            let sigma = rss(&isl
                .nodes
                .iter()
                .filter_map(|n| n.wind.as_ref().map(|w| w.std[t]))
                .collect::<Vec<_>>());
            let mu_w: f64 = isl
                .nodes
                .iter()
                .filter_map(|n| n.wind.as_ref().map(|w| w.mean[t]))
                .sum();
            let mut terms_up = Vec::new();
            let mut terms_dn = Vec::new();
            if let Some(rau) = reg.get(Var::RAggUp(ii, t)) {
                lower_ineq.push(LinRow::new(vec![(rau, -1.0)], 0.0));
                terms_up.push((rau, -1.0));
            }
            if let Some(rad) = reg.get(Var::RAggDn(ii, t)) {
                lower_ineq.push(LinRow::new(vec![(rad, -1.0)], 0.0));
                terms_dn.push((rad, -1.0));
            }
            for &ni in &ess_nodes {
                let pe = reg.idx(Var::PEss(ii, ni, t));
                if let Some(pa) = reg.get(Var::PAgg(ii, ni, t)) {
                    terms_up.push((pa, -1.0));
                    terms_dn.push((pa, 1.0));
                }
                terms_up.push((pe, 1.0));
                terms_up.push((reg.idx(Var::REssUp(ii, ni, t)), 1.0));
                terms_dn.push((pe, -1.0));
                terms_dn.push((reg.idx(Var::REssDn(ii, ni, t)), 1.0));
            }
            // up (Eq. 12): sum(P_ess + R_ess+) - sum(wind + P_agg) - R_agg+
            // must cover q*sigma
            let mut row = deterministic_equivalent(&ChanceSpec {
                direction: MarginDirection::AtLeast,
                island: ii,
                slot: t,
                terms: terms_up,
                sigma,
                epsilon: inst.epsilon,
            })?;
            row.rhs -= mu_w;
            lower_ineq.push(row);
            // down (Eq. 13): sum(wind + P_agg) - sum(P_ess - R_ess-) - R_agg-
            // must cover q*sigma
            let mut row = deterministic_equivalent(&ChanceSpec {
                direction: MarginDirection::AtLeast,
                island: ii,
                slot: t,
                terms: terms_dn,
                sigma,
                epsilon: inst.epsilon,
            })?;
            row.rhs += mu_w;
            lower_ineq.push(row);
        }
    }

    // aggregate definitions (pricing quantities)
    for t in 0..t_all {
        let mut srow = vec![(reg.idx(Var::SAgg(t)), 1.0)];
        let mut urow = vec![(reg.idx(Var::AAggUp(t)), 1.0)];
        let mut drow = vec![(reg.idx(Var::AAggDn(t)), 1.0)];
        for (ii, isl) in inst.islands.iter().enumerate() {
            for ni in 0..isl.nodes.len() {
                if let Some(pa) = reg.get(Var::PAgg(ii, ni, t)) {
                    srow.push((pa, -1.0));
                }
            }
            if let Some(r) = reg.get(Var::RAggUp(ii, t)) {
                urow.push((r, -1.0));
            }
            if let Some(r) = reg.get(Var::RAggDn(ii, t)) {
                drow.push((r, -1.0));
            }
        }
        lower_eq.push(LinRow::new(srow, 0.0));
        lower_eq.push(LinRow::new(urow, 0.0));
        lower_eq.push(LinRow::new(drow, 0.0));
    }

    // vessel pipeline: resource swap-outs arrive on the load island
    // after the transit delay; unmatched arrival slots pin N_swap to 0
    if let Some(li) = inst.load_island() {
        let load_ess: Vec<usize> = inst.islands[li]
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.ess.is_some())
            .map(|(ni, _)| ni)
            .collect();
        if !load_ess.is_empty() {
            for t in 0..t_all {
                let mut row: Vec<(usize, f64)> = load_ess
                    .iter()
                    .map(|&ni| (reg.idx(Var::NSwap(li, ni, t)), 1.0))
                    .collect();
                for (ii, isl) in inst.islands.iter().enumerate() {
                    if isl.role != IslandRole::Resource {
                        continue;
                    }
                    let d = inst.transit_slots[ii];
                    if t < d {
                        continue;
                    }
                    for (ni, node) in isl.nodes.iter().enumerate() {
                        if node.ess.is_some() {
                            row.push((reg.idx(Var::NSwap(ii, ni, t - d)), 1.0));
                        }
                    }
                }
                lower_eq.push(LinRow::new(row, 0.0));
            }
        }
    }

    // structural guard: the lower block must be free of upper-level
    // variables (precondition of the decomposition)
    for (rows, kind) in [(&lower_ineq, "ineq"), (&lower_eq, "eq")] {
        for (ri, row) in rows.iter().enumerate() {
            for &(i, _) in &row.terms {
                if reg.is_upper(i) {
                    return Err(AssembleError::UpperVarInLowerBlock {
                        var: reg.vars[i],
                        row: format!("lower {kind} row {ri}"),
                    });
                }
            }
        }
    }

    Ok(ModelBlocks {
        reg,
        upper_ineq,
        upper_eq,
        upper_quad,
        lower_ineq,
        lower_eq,
        upper_obj,
        lower_obj,
        bilinear,
    })
}
