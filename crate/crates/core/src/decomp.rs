//! Reformulation-and-decomposition solver for the bi-level problem
//! (Algorithm 1): master problem with value-function tightening rows,
//! lower-level subproblem SP, feasibility/upper-bound subproblem SP2,
//! upper-bound tightening from the integer-relaxed KKT reformulation,
//! plus the enumeration oracle and a bilevel-feasibility checker.
//!
//! Value-function rows are realized through Wolfe duality: for a known
//! integer combination y^j, any multipliers satisfying the lower
//! level's stationarity system give the valid cut
//!
//! ```text
//!   f_l(x_u, x_l, y_l) + 1/2 u' H u + pi' r_j + nu' r_eq_j <= c_y(y_j)
//! ```
//!
//! which the master tightens to the exact lower optimal value by
//! maximizing the dual side (strong duality holds: convex QP over a
//! nonempty polyhedron). This keeps every subproblem a convex QP plus
//! integer and shared-bilinear branching.

use std::collections::HashSet;
use std::ops::Range;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bnb::{
    solve_miqp, solve_nonconvex, solve_nonconvex_cutoff, BilinearTerm, BnbError, BnbLimits,
    BnbStatus, CompPair, MiqpProblem, NonconvexProblem,
};
use crate::model::{assemble, AssembleError, Instance, ModelBlocks};
use crate::qp::{solve_qp, LinRow, QpProblem, QpStatus, QuadRow};

/// Slack used when comparing lower objectives against θ_k.
const THETA_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecompError {
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error(transparent)]
    Bnb(#[from] BnbError),
    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),
    #[error("master problem infeasible: the bilevel problem has no solution")]
    BilevelInfeasible,
    #[error("master problem produced no incumbent within limits")]
    NoMasterIncumbent,
    #[error("lower-level subproblem infeasible: instance is infeasible")]
    LowerInfeasible,
    #[error("oracle guard: {0} integer combinations exceed the 1e5 limit")]
    OracleTooLarge(f64),
}

/// The compact two-block bilevel program of Eq. (39).
#[derive(Debug, Clone)]
pub struct CompactBilevel {
    pub inst: Instance,
    pub blocks: ModelBlocks,
}

pub fn compactify(inst: &Instance) -> Result<CompactBilevel, DecompError> {
    let blocks = assemble(inst)?;
    Ok(CompactBilevel {
        inst: inst.clone(),
        blocks,
    })
}

impl CompactBilevel {
    pub fn xu(&self) -> Range<usize> {
        self.blocks.reg.upper.clone()
    }
    pub fn xl(&self) -> Range<usize> {
        self.blocks.reg.lower_cont.clone()
    }
    pub fn yl(&self) -> Range<usize> {
        self.blocks.reg.lower_int.clone()
    }

    /// Rounded integer combination extracted from a full point.
    pub fn combination(&self, x: &[f64]) -> Vec<i64> {
        self.yl().map(|i| x[i].round() as i64).collect()
    }

    /// Diagonal quadratic coefficient of f_l per variable (f = c x^2).
    fn lower_quad_diag(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.blocks.reg.len()];
        for &(i, c) in &self.blocks.lower_obj.quad {
            h[i] += c;
        }
        h
    }
}

/// Base single-level relaxation: both blocks, bounds, the upper
/// objective with bilinear products replaced by shared w variables.
struct Extended {
    qp: QpProblem,
    bilinear: Vec<BilinearTerm>,
    integers: Vec<usize>,
    /// w index per blocks.bilinear entry.
    w_of: Vec<usize>,
}

fn product_bounds(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let c = [a.0 * b.0, a.0 * b.1, a.1 * b.0, a.1 * b.1];
    (
        c.iter().cloned().fold(f64::INFINITY, f64::min),
        c.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    )
}

fn extended_base(cb: &CompactBilevel, include_upper_rows: bool) -> Extended {
    let blocks = &cb.blocks;
    let n0 = blocks.reg.len();
    let nb = blocks.bilinear.len();
    let mut qp = QpProblem::new(n0 + nb);
    qp.bounds[..n0].copy_from_slice(&blocks.reg.bounds);

    let mut bilinear = Vec::with_capacity(nb);
    let mut w_of = Vec::with_capacity(nb);
    for (k, b) in blocks.bilinear.iter().enumerate() {
        let w = n0 + k;
        let xb = blocks.reg.bounds[b.price];
        let yb = blocks.reg.bounds[b.qty];
        qp.bounds[w] = product_bounds(xb, yb);
        bilinear.push(BilinearTerm {
            x: b.price,
            y: b.qty,
            w,
            x_bounds: xb,
            y_bounds: yb,
        });
        w_of.push(w);
    }

    for &(i, c) in &blocks.upper_obj.quad {
        qp.add_quad(i, i, 2.0 * c);
    }
    for &(i, c) in &blocks.upper_obj.lin {
        qp.add_lin(i, c);
    }
    qp.constant = blocks.upper_obj.constant;
    for (k, b) in blocks.bilinear.iter().enumerate() {
        qp.add_lin(w_of[k], b.upper_coef);
    }

    if include_upper_rows {
        qp.ineq.extend(blocks.upper_ineq.iter().cloned());
        qp.eq.extend(blocks.upper_eq.iter().cloned());
        qp.quad_rows.extend(blocks.upper_quad.iter().cloned());
    }
    qp.ineq.extend(blocks.lower_ineq.iter().cloned());
    qp.eq.extend(blocks.lower_eq.iter().cloned());

    let integers: Vec<usize> = cb.yl().collect();
    Extended {
        qp,
        bilinear,
        integers,
        w_of,
    }
}

/// Linear value of c_y at a fixed combination.
fn c_y_value(cb: &CompactBilevel, combo: &[i64]) -> f64 {
    let y0 = cb.yl().start;
    cb.blocks
        .lower_obj
        .lin
        .iter()
        .filter(|(i, _)| cb.blocks.reg.is_lower_int(*i))
        .map(|&(i, c)| c * combo[i - y0] as f64)
        .sum()
}

/// Variable indices of one value-function dual system, keyed by the
/// lower row / coordinate they belong to.
struct VfLayout {
    /// (index into lower_ineq, multiplier var)
    pi: Vec<(usize, usize)>,
    /// (index into lower_eq, multiplier var)
    nu: Vec<(usize, usize)>,
    /// (registry coordinate, Lagrangian-minimizer var)
    u: Vec<(usize, usize)>,
}

/// Appends the Wolfe-dual tightening system for one known integer
/// combination y_j: multipliers, stationarity rows and the
/// value-function quadratic row (realization of Eqs. 45-46).
fn add_value_function_rows(cb: &CompactBilevel, ext: &mut Extended, combo: &[i64]) -> VfLayout {
    let blocks = &cb.blocks;
    let h = cb.lower_quad_diag();
    let y0 = cb.yl().start;
    let residual = |row: &LinRow| {
        let mut r = row.rhs;
        for &(i, c) in &row.terms {
            if blocks.reg.is_lower_int(i) {
                r -= c * combo[i - y0] as f64;
            }
        }
        r
    };
    let touches_xl =
        |row: &LinRow| row.terms.iter().any(|&(i, _)| blocks.reg.is_lower_cont(i));

    // stationarity accumulator per lower continuous coordinate
    let nxl = cb.xl().len();
    let xl0 = cb.xl().start;
    let mut stat: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nxl];
    let mut vf = QuadRow {
        sq: Vec::new(),
        lin: Vec::new(),
        rhs: c_y_value(cb, combo),
    };

    // f_l(real point) on the left-hand side
    for &(i, c) in &blocks.lower_obj.quad {
        vf.sq.push((i, c));
    }
    for &(i, c) in &blocks.lower_obj.lin {
        vf.lin.push((i, c));
    }
    vf.rhs -= blocks.lower_obj.constant;
    for (k, b) in blocks.bilinear.iter().enumerate() {
        vf.lin.push((ext.w_of[k], b.lower_coef));
        // price gradient on the aggregate coordinate
        stat[b.qty - xl0].push((b.price, b.lower_coef));
    }
    // multipliers for every lower row touching x_l
    let grow = |ext: &mut Extended, bounds: (f64, f64)| {
        let i = ext.qp.num_vars;
        ext.qp.num_vars += 1;
        ext.qp.bounds.push(bounds);
        ext.qp.lin.push(0.0);
        i
    };
    let mut layout = VfLayout {
        pi: Vec::new(),
        nu: Vec::new(),
        u: Vec::new(),
    };
    for (ri, row) in blocks.lower_ineq.iter().enumerate() {
        if !touches_xl(row) {
            continue;
        }
        let pi = grow(ext, (0.0, f64::INFINITY));
        layout.pi.push((ri, pi));
        vf.lin.push((pi, residual(row)));
        for &(i, c) in &row.terms {
            if blocks.reg.is_lower_cont(i) {
                stat[i - xl0].push((pi, c));
            }
        }
    }
    for (ei, row) in blocks.lower_eq.iter().enumerate() {
        if !touches_xl(row) {
            continue;
        }
        let nu = grow(ext, (f64::NEG_INFINITY, f64::INFINITY));
        layout.nu.push((ei, nu));
        vf.lin.push((nu, residual(row)));
        for &(i, c) in &row.terms {
            if blocks.reg.is_lower_cont(i) {
                stat[i - xl0].push((nu, c));
            }
        }
    }

    // Lagrangian minimizer u per strictly-quadratic coordinate
    for i in cb.xl() {
        if h[i] > 0.0 {
            let u = grow(ext, (f64::NEG_INFINITY, f64::INFINITY));
            layout.u.push((i, u));
            stat[i - xl0].push((u, 2.0 * h[i]));
            vf.sq.push((u, h[i]));
        }
    }

    // stationarity: 2 h_i u_i + d_i(x_u) + (D' pi)_i + (Deq' nu)_i = 0
    let mut d0 = vec![0.0; nxl];
    for &(i, c) in &blocks.lower_obj.lin {
        if blocks.reg.is_lower_cont(i) {
            d0[i - xl0] += c;
        }
    }
    for (j, terms) in stat.into_iter().enumerate() {
        ext.qp.eq.push(LinRow::new(terms, -d0[j]));
    }
    ext.qp.quad_rows.push(vf);
    layout
}

/// Bilevel value restricted to the aggregator answering with `combo`:
/// the combination is pinned, lower optimality in the continuous part
/// is enforced through the KKT system (stationarity plus disjunctive
/// complementarity), and value-function rows keep `combo` no worse
/// than any other feasible combination. Expressing the transfer
/// payment through the lower dual value keeps the objective free of
/// bilinear products, so branching stays finite.
struct Restricted {
    prob: NonconvexProblem,
    w_of: Vec<usize>,
    kkt_pi: Vec<(usize, usize)>,
    kkt_nu: Vec<(usize, usize)>,
    rivals: Vec<(Vec<i64>, VfLayout)>,
}

fn build_restricted(
    cb: &CompactBilevel,
    combo: &[i64],
    all_combos: &[Vec<i64>],
    xu: Option<&[f64]>,
) -> Restricted {
    let blocks = &cb.blocks;
    let h = cb.lower_quad_diag();
    let mut ext = extended_base(cb, true);
    let y0 = cb.yl().start;
    for (j, &v) in combo.iter().enumerate() {
        ext.qp.bounds[y0 + j] = (v as f64, v as f64);
    }
    // only the announced prices are pinned: the rest of the upper
    // dispatch may rebalance around the exact lower response
    if let Some(xu) = xu {
        for b in &blocks.bilinear {
            ext.qp.bounds[b.price] = (xu[b.price], xu[b.price]);
        }
    }
    // strip the w products from the objective; the transfer comes back
    // below as f_phys - dual value, which is exact at KKT points
    for (k, b) in blocks.bilinear.iter().enumerate() {
        ext.qp.lin[ext.w_of[k]] -= b.upper_coef;
    }
    // F = c_up + (f_phys - f_l) with f_l = c_y - pi'r - nu'r_eq - sum h x^2
    // at the KKT multipliers (u coincides with x_l there)
    for &(i, c) in &blocks.lower_obj.quad {
        let dup = if blocks.reg.is_lower_cont(i) { 2.0 } else { 1.0 };
        ext.qp.add_quad(i, i, 2.0 * dup * c);
    }
    for &(i, c) in &blocks.lower_obj.lin {
        ext.qp.add_lin(i, c);
    }
    ext.qp.constant += blocks.lower_obj.constant - c_y_value(cb, combo);

    let residual = |row: &LinRow| {
        let mut r = row.rhs;
        for &(i, c) in &row.terms {
            if blocks.reg.is_lower_int(i) {
                r -= c * combo[i - y0] as f64;
            }
        }
        r
    };
    let touches_xl =
        |row: &LinRow| row.terms.iter().any(|&(i, _)| blocks.reg.is_lower_cont(i));
    let grow = |ext: &mut Extended, bounds: (f64, f64)| {
        let i = ext.qp.num_vars;
        ext.qp.num_vars += 1;
        ext.qp.bounds.push(bounds);
        ext.qp.lin.push(0.0);
        i
    };

    // stationarity in the real x_l: 2 h_i x_i + d_i(x_u) + A' mu = 0
    let nxl = cb.xl().len();
    let xl0 = cb.xl().start;
    let mut stat: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nxl];
    for i in cb.xl() {
        if h[i] != 0.0 {
            stat[i - xl0].push((i, 2.0 * h[i]));
        }
    }
    for b in &blocks.bilinear {
        stat[b.qty - xl0].push((b.price, b.lower_coef));
    }
    let mut comp = Vec::new();
    for (ri, row) in blocks.lower_ineq.iter().enumerate() {
        if !touches_xl(row) {
            continue;
        }
        let pi = grow(&mut ext, (0.0, f64::INFINITY));
        ext.qp.add_lin(pi, residual(row));
        for &(i, c) in &row.terms {
            if blocks.reg.is_lower_cont(i) {
                stat[i - xl0].push((pi, c));
            }
        }
        // lower rows sit behind the upper block in the extended QP
        comp.push(CompPair {
            row: blocks.upper_ineq.len() + ri,
            var: pi,
        });
    }
    let mut nu_vars = Vec::new();
    for (ei, row) in blocks.lower_eq.iter().enumerate() {
        if !touches_xl(row) {
            continue;
        }
        let nu = grow(&mut ext, (f64::NEG_INFINITY, f64::INFINITY));
        nu_vars.push((ei, nu));
        ext.qp.add_lin(nu, residual(row));
        for &(i, c) in &row.terms {
            if blocks.reg.is_lower_cont(i) {
                stat[i - xl0].push((nu, c));
            }
        }
    }
    let mut d0 = vec![0.0; nxl];
    for &(i, c) in &blocks.lower_obj.lin {
        if blocks.reg.is_lower_cont(i) {
            d0[i - xl0] += c;
        }
    }
    for (j, terms) in stat.into_iter().enumerate() {
        ext.qp.eq.push(LinRow::new(terms, -d0[j]));
    }

    let mut rival_systems: Vec<(Vec<i64>, VfLayout)> = Vec::new();
    for other in all_combos {
        if other.as_slice() != combo {
            let lay = add_value_function_rows(cb, &mut ext, other);
            rival_systems.push((other.clone(), lay));
        }
    }
    // the KKT multiplier layout of the real copy, for the heuristic
    let kkt_pi: Vec<(usize, usize)> = comp
        .iter()
        .map(|p| (p.row - blocks.upper_ineq.len(), p.var))
        .collect();
    let kkt_nu = nu_vars;
    let w_of = ext.w_of.clone();
    // without rival rows nothing references the w products
    let bilinear = if rival_systems.is_empty() {
        Vec::new()
    } else {
        ext.bilinear
    };

    Restricted {
        prob: NonconvexProblem {
            qp: ext.qp,
            integers: ext.integers,
            bilinear,
            complementarity: comp,
        },
        w_of,
        kkt_pi,
        kkt_nu,
        rivals: rival_systems,
    }
}

/// Builds the full-space candidate the KKT system expects from a point
/// whose prices are taken as announced: the lower response and every
/// dual block come from convex solves at those prices. When `keep_reg`
/// the registry part of `xnode` is kept verbatim instead of re-solving
/// the upper dispatch.
fn restricted_candidate(
    cb: &CompactBilevel,
    combo: &[i64],
    r: &Restricted,
    xnode: &[f64],
    keep_reg: bool,
) -> Option<Vec<f64>> {
    let blocks = &cb.blocks;
    let n0 = blocks.reg.len();
    let total_vars = r.prob.qp.num_vars;
    let mut cand = vec![0.0; total_vars];
    let lqp = lower_qp_at_prices(cb, combo, xnode);
    let ls = solve_qp(&lqp, 1e-9).ok()?;
    if ls.status != QpStatus::Optimal {
        return None;
    }
    if keep_reg {
        cand[..n0].copy_from_slice(&xnode[..n0]);
    } else {
        // upper dispatch with prices and the lower response pinned
        let mut uqp = QpProblem::new(n0);
        uqp.bounds.copy_from_slice(&blocks.reg.bounds);
        for i in cb.xl().chain(cb.yl()) {
            uqp.bounds[i] = (ls.x[i], ls.x[i]);
        }
        for b in &blocks.bilinear {
            uqp.bounds[b.price] = (xnode[b.price], xnode[b.price]);
        }
        uqp.ineq.extend(blocks.upper_ineq.iter().cloned());
        uqp.eq.extend(blocks.upper_eq.iter().cloned());
        uqp.quad_rows.extend(blocks.upper_quad.iter().cloned());
        for &(i, c) in &blocks.upper_obj.quad {
            uqp.add_quad(i, i, 2.0 * c);
        }
        for &(i, c) in &blocks.upper_obj.lin {
            uqp.add_lin(i, c);
        }
        let us = solve_qp(&uqp, 1e-9).ok()?;
        if us.status != QpStatus::Optimal {
            return None;
        }
        cand[..n0].copy_from_slice(&us.x[..n0]);
    }
    for (k, b) in blocks.bilinear.iter().enumerate() {
        cand[r.w_of[k]] = cand[b.price] * cand[b.qty];
    }
    for &(ri, var) in &r.kkt_pi {
        cand[var] = ls.duals.ineq[ri];
    }
    for &(ei, var) in &r.kkt_nu {
        cand[var] = ls.duals.eq[ei];
    }
    for (other, lay) in &r.rivals {
        let rqp = lower_qp_at_prices(cb, other, xnode);
        let rs = solve_qp(&rqp, 1e-9).ok()?;
        if rs.status != QpStatus::Optimal {
            return None;
        }
        for &(ri, var) in &lay.pi {
            cand[var] = rs.duals.ineq[ri];
        }
        for &(ei, var) in &lay.nu {
            cand[var] = rs.duals.eq[ei];
        }
        for &(i, var) in &lay.u {
            cand[var] = rs.x[i];
        }
    }
    Some(cand)
}

fn solve_response_restricted(
    cb: &CompactBilevel,
    combo: &[i64],
    all_combos: &[Vec<i64>],
    gap_tol: f64,
    limits: &BnbLimits,
    cutoff: f64,
) -> Result<(BnbStatus, Option<(f64, Vec<f64>)>, f64), DecompError> {
    let blocks = &cb.blocks;
    let r = build_restricted(cb, combo, all_combos, None);

    // primal heuristic: evaluate the restricted bilevel exactly at the
    // node's announced prices (lower response, rival duals, upper
    // dispatch are all convex solves)
    let heur =
        |xnode: &[f64]| -> Option<Vec<f64>> { restricted_candidate(cb, combo, &r, xnode, false) };

    let sol = solve_nonconvex_cutoff(&r.prob, gap_tol, limits, Some(&heur), cutoff)?;
    let value = if sol.x.is_empty() {
        None
    } else {
        Some((sol.objective, sol.x[..blocks.reg.len()].to_vec()))
    };
    Ok((sol.status, value, sol.bound))
}

/// Temporary diagnostic: evaluates the candidate built from `x` against
/// every constraint of the restricted problem and reports violations.
#[doc(hidden)]
pub fn debug_restricted_at(
    cb: &CompactBilevel,
    combo: &[i64],
    all_combos: &[Vec<i64>],
    x: &[f64],
) -> (Option<f64>, Vec<String>) {
    let r = build_restricted(cb, combo, all_combos, None);
    let Some(cand) = restricted_candidate(cb, combo, &r, x, true) else {
        return (None, vec!["candidate construction failed".into()]);
    };
    let qp = &r.prob.qp;
    let mut report = Vec::new();
    let eval = |row: &LinRow| -> f64 { row.terms.iter().map(|&(i, c)| c * cand[i]).sum() };
    for (j, row) in qp.ineq.iter().enumerate() {
        let v = eval(row) - row.rhs;
        if v > 1e-7 {
            report.push(format!("ineq {j}: excess {v:.3e}"));
        }
    }
    for (j, row) in qp.eq.iter().enumerate() {
        let v = eval(row) - row.rhs;
        if v.abs() > 1e-7 {
            report.push(format!("eq {j}: residual {v:.3e}"));
        }
    }
    for (j, row) in qp.quad_rows.iter().enumerate() {
        let mut v = -row.rhs;
        for &(i, c) in &row.sq {
            v += c * cand[i] * cand[i];
        }
        for &(i, c) in &row.lin {
            v += c * cand[i];
        }
        if v > 1e-7 {
            report.push(format!("quad {j}: excess {v:.3e}"));
        }
    }
    for (i, &v) in cand.iter().enumerate() {
        let (lo, hi) = qp.bounds[i];
        if v < lo - 1e-7 || v > hi + 1e-7 {
            report.push(format!("bound {i}: v {v} box ({lo},{hi})"));
        }
    }
    (Some(qp.objective(&cand)), report)
}

/// Lower-level QP at announced prices taken from a full point, with
/// the integer combination pinned. The x_l boxes are dropped (the
/// explicit rows imply them), so the entire dual mass lands on the
/// rows and the multipliers satisfy the row-only stationarity system.
fn lower_qp_at_prices(cb: &CompactBilevel, combo: &[i64], x: &[f64]) -> QpProblem {
    let blocks = &cb.blocks;
    let mut qp = QpProblem::new(blocks.reg.len());
    qp.bounds.copy_from_slice(&blocks.reg.bounds);
    for i in cb.xu() {
        qp.bounds[i] = (x[i], x[i]);
    }
    for i in cb.xl() {
        qp.bounds[i] = (f64::NEG_INFINITY, f64::INFINITY);
    }
    let y0 = cb.yl().start;
    for (j, &v) in combo.iter().enumerate() {
        qp.bounds[y0 + j] = (v as f64, v as f64);
    }
    qp.ineq.extend(blocks.lower_ineq.iter().cloned());
    qp.eq.extend(blocks.lower_eq.iter().cloned());
    lower_objective_fixed_prices(cb, x, &mut qp);
    qp
}

/// Result of one master solve.
#[derive(Debug, Clone)]
pub struct MpResult {
    pub x: Vec<f64>,
    /// Valid lower bound (global branch-and-bound bound).
    pub lb: f64,
    pub objective: f64,
}

/// Solves the Mod-MP (Eq. 46) for a set of known combinations.
pub fn solve_mp(
    cb: &CompactBilevel,
    combos: &[Vec<i64>],
    gap_tol: f64,
    limits: &BnbLimits,
) -> Result<MpResult, DecompError> {
    let mut ext = extended_base(cb, true);
    for combo in combos {
        add_value_function_rows(cb, &mut ext, combo);
    }
    let prob = NonconvexProblem {
        qp: ext.qp,
        integers: ext.integers,
        bilinear: ext.bilinear,
        complementarity: vec![],
    };
    let sol = solve_nonconvex(&prob, gap_tol, limits)?;
    match sol.status {
        BnbStatus::Infeasible => Err(DecompError::BilevelInfeasible),
        _ if sol.x.is_empty() => Err(DecompError::NoMasterIncumbent),
        _ => Ok(MpResult {
            x: sol.x,
            lb: sol.bound,
            objective: sol.objective,
        }),
    }
}

#[derive(Debug, Clone)]
pub struct SpResult {
    pub theta: f64,
    pub x: Vec<f64>,
    pub combo: Vec<i64>,
}

/// Builds f_l as explicit QP terms at fixed prices.
fn lower_objective_fixed_prices(cb: &CompactBilevel, xu: &[f64], qp: &mut QpProblem) {
    let blocks = &cb.blocks;
    for &(i, c) in &blocks.lower_obj.quad {
        qp.add_quad(i, i, 2.0 * c);
    }
    for &(i, c) in &blocks.lower_obj.lin {
        qp.add_lin(i, c);
    }
    qp.constant += blocks.lower_obj.constant;
    for b in &blocks.bilinear {
        qp.add_lin(b.qty, b.lower_coef * xu[b.price]);
    }
}

/// Solves the lower-level MIQP (Eq. 43) at announced prices.
pub fn solve_sp(
    cb: &CompactBilevel,
    xu: &[f64],
    limits: &BnbLimits,
) -> Result<SpResult, DecompError> {
    let blocks = &cb.blocks;
    let n = blocks.reg.len();
    let mut qp = QpProblem::new(n);
    qp.bounds.copy_from_slice(&blocks.reg.bounds);
    for i in cb.xu() {
        qp.bounds[i] = (xu[i], xu[i]);
    }
    lower_objective_fixed_prices(cb, xu, &mut qp);
    qp.ineq.extend(blocks.lower_ineq.iter().cloned());
    qp.eq.extend(blocks.lower_eq.iter().cloned());
    let prob = MiqpProblem {
        qp,
        integers: cb.yl().collect(),
    };
    let sol = solve_miqp(&prob, 1e-8, limits)?;
    if sol.status == BnbStatus::Infeasible || sol.x.is_empty() {
        return Err(DecompError::LowerInfeasible);
    }
    let combo = cb.combination(&sol.x);
    Ok(SpResult {
        theta: sol.objective,
        x: sol.x,
        combo,
    })
}

/// Solves SP2 (Eq. 44): best upper cost over lower responses that are
/// lower-optimal at the announced prices. `None` means infeasible.
pub fn solve_sp2(
    cb: &CompactBilevel,
    xu: &[f64],
    theta: f64,
    limits: &BnbLimits,
) -> Result<Option<(f64, Vec<f64>)>, DecompError> {
    let blocks = &cb.blocks;
    let n = blocks.reg.len();
    let mut qp = QpProblem::new(n);
    qp.bounds.copy_from_slice(&blocks.reg.bounds);
    for i in cb.xu() {
        qp.bounds[i] = (xu[i], xu[i]);
    }
    // upper objective with prices fixed
    for &(i, c) in &blocks.upper_obj.quad {
        qp.add_quad(i, i, 2.0 * c);
    }
    for &(i, c) in &blocks.upper_obj.lin {
        qp.add_lin(i, c);
    }
    qp.constant = blocks.upper_obj.constant;
    for b in &blocks.bilinear {
        qp.add_lin(b.qty, b.upper_coef * xu[b.price]);
    }
    qp.ineq.extend(blocks.upper_ineq.iter().cloned());
    qp.eq.extend(blocks.upper_eq.iter().cloned());
    qp.quad_rows.extend(blocks.upper_quad.iter().cloned());
    qp.ineq.extend(blocks.lower_ineq.iter().cloned());
    qp.eq.extend(blocks.lower_eq.iter().cloned());
    // lower-optimality: f_l <= theta. The row is scaled up so the
    // absolute incumbent tolerance translates into a much smaller
    // permitted lower-level regret (regret leaks into the upper
    // objective at a square-root rate).
    const SCALE: f64 = 1e3;
    let mut vf = QuadRow {
        sq: Vec::new(),
        lin: Vec::new(),
        rhs: SCALE * (theta + THETA_TOL - blocks.lower_obj.constant),
    };
    for &(i, c) in &blocks.lower_obj.quad {
        vf.sq.push((i, SCALE * c));
    }
    for &(i, c) in &blocks.lower_obj.lin {
        vf.lin.push((i, SCALE * c));
    }
    for b in &blocks.bilinear {
        vf.lin.push((b.qty, SCALE * b.lower_coef * xu[b.price]));
    }
    qp.quad_rows.push(vf);

    let prob = MiqpProblem {
        qp,
        integers: cb.yl().collect(),
    };
    let sol = solve_miqp(&prob, 1e-8, limits)?;
    if sol.status == BnbStatus::Infeasible || sol.x.is_empty() {
        return Ok(None);
    }

    // The MIQP point is only epsilon-optimal for the lower level, and
    // that regret leaks into the upper objective at a square-root rate.
    // Re-solving the chosen combination through its exact KKT system
    // (a small QPCC: prices and integers pinned) removes the bias.
    let y2 = cb.combination(&sol.x);
    let own = vec![y2.clone()];
    let r = build_restricted(cb, &y2, &own, Some(xu));
    let heur = |xnode: &[f64]| -> Option<Vec<f64>> { restricted_candidate(cb, &y2, &r, xnode, false) };
    let polish_limits = BnbLimits::with_nodes(2_000);
    if let Ok(ps) = solve_nonconvex_cutoff(&r.prob, 1e-8, &polish_limits, Some(&heur), f64::INFINITY)
    {
        if ps.status == BnbStatus::Optimal && !ps.x.is_empty() {
            let n = blocks.reg.len();
            let px = ps.x[..n].to_vec();
            // keep only if the exact response stays globally lower-optimal
            let regret = blocks.eval_lower(&px) - theta;
            if regret <= THETA_TOL.max(1e-7 * theta.abs()) {
                return Ok(Some((ps.objective, px)));
            }
        }
    }
    Ok(Some((sol.objective, sol.x)))
}

/// Integer-relaxed KKT tightening (Eqs. 47-48 via Wolfe duality):
/// solves the single-level relaxation, then certifies a true upper
/// bound by repairing through SP/SP2. Returns (UB0, y0, incumbent).
pub fn tighten_upper_bound(
    cb: &CompactBilevel,
    limits: &BnbLimits,
) -> Result<(f64, Option<Vec<i64>>, Option<Vec<f64>>), DecompError> {
    let blocks = &cb.blocks;
    let h = cb.lower_quad_diag();
    let mut ext = extended_base(cb, true);

    let n_lower = cb.xl().len() + cb.yl().len();
    let l0 = cb.xl().start;
    let mut stat: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_lower];
    let mut gap_row = QuadRow {
        sq: Vec::new(),
        lin: Vec::new(),
        rhs: -blocks.lower_obj.constant,
    };
    for &(i, c) in &blocks.lower_obj.quad {
        gap_row.sq.push((i, c));
    }
    for &(i, c) in &blocks.lower_obj.lin {
        gap_row.lin.push((i, c));
    }
    for (k, b) in blocks.bilinear.iter().enumerate() {
        gap_row.lin.push((ext.w_of[k], b.lower_coef));
        stat[b.qty - l0].push((b.price, b.lower_coef));
    }

    let grow = |ext: &mut Extended, bounds: (f64, f64)| {
        let i = ext.qp.num_vars;
        ext.qp.num_vars += 1;
        ext.qp.bounds.push(bounds);
        ext.qp.lin.push(0.0);
        i
    };
    let is_lower = |i: usize| i >= l0 && i < cb.yl().end;
    for row in &blocks.lower_ineq {
        let pi = grow(&mut ext, (0.0, f64::INFINITY));
        gap_row.lin.push((pi, row.rhs));
        for &(i, c) in &row.terms {
            if is_lower(i) {
                stat[i - l0].push((pi, c));
            }
        }
    }
    for row in &blocks.lower_eq {
        let nu = grow(&mut ext, (f64::NEG_INFINITY, f64::INFINITY));
        gap_row.lin.push((nu, row.rhs));
        for &(i, c) in &row.terms {
            if is_lower(i) {
                stat[i - l0].push((nu, c));
            }
        }
    }
    // relaxed integers keep their box constraints inside the duality
    for i in cb.yl() {
        let (lo, hi) = blocks.reg.bounds[i];
        let pi_hi = grow(&mut ext, (0.0, f64::INFINITY));
        gap_row.lin.push((pi_hi, hi));
        stat[i - l0].push((pi_hi, 1.0));
        let pi_lo = grow(&mut ext, (0.0, f64::INFINITY));
        gap_row.lin.push((pi_lo, -lo));
        stat[i - l0].push((pi_lo, -1.0));
    }
    for i in cb.xl() {
        if h[i] > 0.0 {
            let u = grow(&mut ext, (f64::NEG_INFINITY, f64::INFINITY));
            stat[i - l0].push((u, 2.0 * h[i]));
            gap_row.sq.push((u, h[i]));
        }
    }
    let mut d0 = vec![0.0; n_lower];
    for &(i, c) in &blocks.lower_obj.lin {
        if is_lower(i) {
            d0[i - l0] += c;
        }
    }
    for (j, terms) in stat.into_iter().enumerate() {
        ext.qp.eq.push(LinRow::new(terms, -d0[j]));
    }
    ext.qp.quad_rows.push(gap_row);

    // relaxed y: try integral branching first, fall back to continuous
    let with_ints = NonconvexProblem {
        qp: ext.qp.clone(),
        integers: ext.integers.clone(),
        bilinear: ext.bilinear.clone(),
        complementarity: vec![],
    };
    let mut sol = solve_nonconvex(&with_ints, 1e-4, limits)?;
    if sol.x.is_empty() {
        let relaxed = NonconvexProblem {
            qp: ext.qp,
            integers: vec![],
            bilinear: ext.bilinear,
            complementarity: vec![],
        };
        sol = solve_nonconvex(&relaxed, 1e-4, limits)?;
    }
    if sol.x.is_empty() {
        return Ok((f64::INFINITY, None, None));
    }

    // repair: the tightening point fixes prices; the true lower
    // response and an SP2 pass certify the bound
    let sp = solve_sp(cb, &sol.x, limits)?;
    match solve_sp2(cb, &sol.x, sp.theta, limits)? {
        Some((ub0, x2)) => {
            let combo = cb.combination(&x2);
            Ok((ub0, Some(combo), Some(x2)))
        }
        None => Ok((f64::INFINITY, Some(sp.combo), None)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Proposed,
    PlainRbrd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gap,
    Duplicate,
    IterationLimit,
    TimeLimit,
}

#[derive(Debug, Clone)]
pub struct IterRecord {
    pub k: usize,
    pub lb: f64,
    pub ub: f64,
    pub theta: f64,
    pub sp2_feasible: bool,
    pub fresh_combination: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub iterations: Vec<IterRecord>,
    pub termination: Termination,
}

impl SolveTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,lb,ub,gap,sp_value,sp2_status,wall_ms\n");
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.k,
                r.lb,
                r.ub,
                r.ub - r.lb,
                r.theta,
                if r.sp2_feasible { "feasible" } else { "infeasible" },
                r.wall_ms
            ));
        }
        out.push_str(&format!(
            "# termination: {}\n",
            match self.termination {
                Termination::Gap => "gap",
                Termination::Duplicate => "duplicate-combination",
                Termination::IterationLimit => "iteration-limit",
                Termination::TimeLimit => "time-limit",
            }
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct AlgoLimits {
    pub max_iters: usize,
    pub time_limit: Option<Duration>,
    pub mp_limits: BnbLimits,
    pub sub_limits: BnbLimits,
    /// Budget for the upper-bound tightening solve; its result is
    /// certified through SP/SP2 afterwards, so a coarse solve suffices.
    pub tighten_limits: BnbLimits,
    /// Relative MIQP gap for master solves.
    pub mp_gap: f64,
}

impl Default for AlgoLimits {
    fn default() -> Self {
        AlgoLimits {
            max_iters: 500,
            time_limit: None,
            mp_limits: BnbLimits::with_nodes(30_000),
            sub_limits: BnbLimits::default(),
            tighten_limits: BnbLimits::with_nodes(3_000),
            mp_gap: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BilevelSolution {
    pub x: Vec<f64>,
    pub upper_objective: f64,
    pub lower_objective: f64,
    pub lb: f64,
    pub ub: f64,
    pub gap: f64,
    pub iterations: usize,
}

/// Algorithm 1: iterate MP -> SP -> SP2 until the relative gap closes
/// or a combination repeats (Lemma 2).
pub fn run_algorithm1(
    cb: &CompactBilevel,
    xi: f64,
    mode: Mode,
    limits: &AlgoLimits,
) -> Result<(BilevelSolution, SolveTrace), DecompError> {
    let start = Instant::now();
    let mut z: Vec<Vec<i64>> = Vec::new();
    let mut zset: HashSet<Vec<i64>> = HashSet::new();
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut best_x: Option<Vec<f64>> = None;

    if mode == Mode::Proposed {
        let (ub0, y0, x0) = tighten_upper_bound(cb, &limits.tighten_limits)?;
        if ub0 < ub {
            ub = ub0;
            best_x = x0;
        }
        if let Some(y0) = y0 {
            if zset.insert(y0.clone()) {
                z.push(y0);
            }
        }
    }

    let mut trace = Vec::new();
    let gap_closed = |lb: f64, ub: f64| ub.is_finite() && ub - lb <= xi * ub.abs().max(1.0);
    let mut termination = Termination::IterationLimit;

    for k in 0..limits.max_iters {
        if gap_closed(lb, ub) {
            termination = Termination::Gap;
            break;
        }
        if let Some(t) = limits.time_limit {
            if start.elapsed() > t {
                termination = Termination::TimeLimit;
                break;
            }
        }
        let iter_start = Instant::now();
        let mp = solve_mp(cb, &z, limits.mp_gap, &limits.mp_limits)?;
        lb = lb.max(mp.lb);

        let sp = solve_sp(cb, &mp.x, &limits.sub_limits)?;
        let sp2 = solve_sp2(cb, &mp.x, sp.theta, &limits.sub_limits)?;
        let (yk, sp2_feasible) = match &sp2 {
            Some((val, x2)) => {
                if *val < ub {
                    ub = *val;
                    best_x = Some(x2.clone());
                }
                (cb.combination(x2), true)
            }
            None => (sp.combo.clone(), false),
        };
        let fresh = zset.insert(yk.clone());
        trace.push(IterRecord {
            k,
            lb,
            ub,
            theta: sp.theta,
            sp2_feasible,
            fresh_combination: fresh,
            wall_ms: iter_start.elapsed().as_secs_f64() * 1000.0,
        });
        if gap_closed(lb, ub) {
            termination = Termination::Gap;
            break;
        }
        if !fresh {
            // Lemma 2: the MP already carries y_k's value-function row,
            // so its own point is bilevel feasible and hence optimal
            termination = Termination::Duplicate;
            let n0 = cb.blocks.reg.len();
            let mp_point = mp.x[..n0].to_vec();
            let f_l = cb.blocks.eval_lower(&mp_point);
            if f_l <= sp.theta + THETA_TOL.max(1e-6 * sp.theta.abs()) {
                let f_u = cb.blocks.eval_upper(&mp_point);
                if f_u < ub {
                    ub = f_u;
                    best_x = Some(mp_point);
                }
            } else if best_x.is_none() {
                best_x = Some(sp.x.clone());
            }
            break;
        }
        z.push(yk);
    }

    let x = best_x.ok_or(DecompError::NoMasterIncumbent)?;
    let n0 = cb.blocks.reg.len();
    let x = x[..n0].to_vec();
    let upper_objective = cb.blocks.eval_upper(&x);
    let lower_objective = cb.blocks.eval_lower(&x);
    Ok((
        BilevelSolution {
            upper_objective,
            lower_objective,
            lb,
            ub,
            gap: ub - lb,
            iterations: trace.len(),
            x,
        },
        SolveTrace {
            iterations: trace,
            termination,
        },
    ))
}

/// Exhaustive ground truth (Eq. 41): imposes the value-function row of
/// every feasible integer combination simultaneously.
pub fn enumerate_oracle(cb: &CompactBilevel) -> Result<(f64, Vec<f64>), DecompError> {
    let yl: Vec<usize> = cb.yl().collect();
    let mut count = 1.0f64;
    for &i in &yl {
        let (lo, hi) = cb.blocks.reg.bounds[i];
        count *= hi - lo + 1.0;
        if count > 1e5 {
            return Err(DecompError::OracleTooLarge(count));
        }
    }

    // enumerate assignments in lexicographic order
    let mut combos = Vec::new();
    let mut cur: Vec<i64> = yl
        .iter()
        .map(|&i| cb.blocks.reg.bounds[i].0.round() as i64)
        .collect();
    let his: Vec<i64> = yl
        .iter()
        .map(|&i| cb.blocks.reg.bounds[i].1.round() as i64)
        .collect();
    let los: Vec<i64> = cur.clone();
    'outer: loop {
        if combination_feasible(cb, &cur)? {
            combos.push(cur.clone());
        }
        let mut pos = yl.len();
        loop {
            if pos == 0 {
                break 'outer;
            }
            pos -= 1;
            if cur[pos] < his[pos] {
                cur[pos] += 1;
                for (j, v) in cur.iter_mut().enumerate().skip(pos + 1) {
                    *v = los[j];
                }
                break;
            }
        }
    }

    // optimistic bilevel value: best over the response combinations,
    // each solved exactly through its KKT-restricted problem. A cheap
    // no-rival pre-pass ranks the candidates and provides lower bounds
    // so dominated combinations are skipped or cut off early.
    let pre_limits = BnbLimits::with_nodes(2_000);
    let mut ranked: Vec<(f64, &Vec<i64>)> = Vec::with_capacity(combos.len());
    for combo in &combos {
        let one = std::slice::from_ref(combo);
        let (_, _, bound) =
            solve_response_restricted(cb, combo, one, 1e-4, &pre_limits, f64::INFINITY)?;
        ranked.push((bound, combo));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pending = ranked;
    for budget in [3_000usize, 30_000] {
        pending.sort_by(|a, b| a.0.total_cmp(&b.0));
        let limits = BnbLimits::with_nodes(budget);
        let mut unresolved = Vec::new();
        for &(lo, combo) in &pending {
            let cut = best.as_ref().map_or(f64::INFINITY, |(v, _)| *v);
            if lo >= cut {
                continue;
            }
            let t0 = Instant::now();
            let (status, value, bound) =
                solve_response_restricted(cb, combo, &combos, 1e-6, &limits, cut)?;
            eprintln!(
                "oracle combo {combo:?} budget {budget}: {status:?} val {:?} bound {bound:.6} cut {cut:.6} [{:?}]",
                value.as_ref().map(|(v, _)| *v),
                t0.elapsed()
            );
            if let Some((v, x)) = value {
                if best.as_ref().map_or(true, |(bv, _)| v < *bv) {
                    best = Some((v, x));
                }
            }
            if status == BnbStatus::LimitReached {
                let cut = best.as_ref().map_or(f64::INFINITY, |(v, _)| *v);
                if bound < cut {
                    unresolved.push((bound, combo));
                }
            }
        }
        pending = unresolved;
        if pending.is_empty() {
            break;
        }
    }
    if !pending.is_empty() {
        return Err(DecompError::NoMasterIncumbent);
    }
    best.ok_or(DecompError::BilevelInfeasible)
}

/// Quick feasibility check of a combination against the lower block.
fn combination_feasible(cb: &CompactBilevel, combo: &[i64]) -> Result<bool, DecompError> {
    let blocks = &cb.blocks;
    let n = blocks.reg.len();
    let mut qp = QpProblem::new(n);
    qp.bounds.copy_from_slice(&blocks.reg.bounds);
    let y0 = cb.yl().start;
    for (j, &v) in combo.iter().enumerate() {
        qp.bounds[y0 + j] = (v as f64, v as f64);
    }
    // interval prefilter: a row whose best case over the variable
    // boxes already fails rules the combination out without a solve
    let range = |row: &LinRow| {
        let (mut lo, mut hi) = (0.0, 0.0);
        for &(i, c) in &row.terms {
            let (bl, bh) = qp.bounds[i];
            let (a, b) = (c * bl, c * bh);
            lo += a.min(b);
            hi += a.max(b);
        }
        (lo, hi)
    };
    for row in &blocks.lower_ineq {
        if range(row).0 > row.rhs + 1e-9 {
            return Ok(false);
        }
    }
    for row in &blocks.lower_eq {
        let (lo, hi) = range(row);
        if lo > row.rhs + 1e-9 || hi < row.rhs - 1e-9 {
            return Ok(false);
        }
    }
    qp.ineq.extend(blocks.lower_ineq.iter().cloned());
    qp.eq.extend(blocks.lower_eq.iter().cloned());
    // tiny regularization keeps the feasibility solve well-posed
    for i in cb.xl() {
        qp.add_quad(i, i, 1e-6);
    }
    let sol = solve_qp(&qp, 1e-4)?;
    Ok(sol.status != QpStatus::Infeasible)
}

#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub passed: bool,
    /// f_l(candidate) − θ(x_u): how much the aggregator could gain by
    /// deviating.
    pub lower_regret: f64,
    pub violations: Vec<String>,
}

/// Re-solves SP at the candidate's prices and checks every constraint
/// of both blocks (Eq. 40's bilevel-feasibility condition).
pub fn verify_bilevel_feasibility(
    cb: &CompactBilevel,
    x: &[f64],
    tol: f64,
    limits: &BnbLimits,
) -> Result<FeasibilityReport, DecompError> {
    let blocks = &cb.blocks;
    let mut violations = Vec::new();
    for (i, &(lo, hi)) in blocks.reg.bounds.iter().enumerate() {
        if x[i] < lo - tol || x[i] > hi + tol {
            violations.push(format!("bound on {:?} violated: {}", blocks.reg.vars[i], x[i]));
        }
    }
    for (name, rows) in [("upper", &blocks.upper_ineq), ("lower", &blocks.lower_ineq)] {
        for (ri, row) in rows.iter().enumerate() {
            if row.eval(x) > row.rhs + tol {
                violations.push(format!("{name} inequality row {ri} violated"));
            }
        }
    }
    for (name, rows) in [("upper", &blocks.upper_eq), ("lower", &blocks.lower_eq)] {
        for (ri, row) in rows.iter().enumerate() {
            if (row.eval(x) - row.rhs).abs() > tol {
                violations.push(format!("{name} equality row {ri} violated"));
            }
        }
    }
    for qr in &blocks.upper_quad {
        if qr.eval(x) > qr.rhs + tol {
            violations.push("carbon emission cap (Eq. 25) violated".into());
        }
    }
    for i in cb.yl() {
        if (x[i] - x[i].round()).abs() > tol {
            violations.push(format!("integrality of {:?} violated", blocks.reg.vars[i]));
        }
    }

    let sp = solve_sp(cb, x, limits)?;
    let f_l = blocks.eval_lower(x);
    let lower_regret = f_l - sp.theta;
    if lower_regret > tol.max(1e-6 * sp.theta.abs()) {
        violations.push(format!(
            "lower level is not optimal: regret {lower_regret:.6}"
        ));
    }
    Ok(FeasibilityReport {
        passed: violations.is_empty(),
        lower_regret,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_instance, DieselGen, EssFleet, Instance, Island, IslandRole, Node, StochProfile};

    fn profile(mean: Vec<f64>, std: Vec<f64>) -> StochProfile {
        StochProfile { mean, std }
    }

    fn small_dg() -> DieselGen {
        DieselGen {
            a: 2.0,
            b: 10.0,
            c: 0.0,
            a_em: 0.02,
            b_em: 0.1,
            c_em: 0.0,
            p_min: 0.0,
            p_max: 2.0,
            ramp: 2.0,
            c_r_up: 3.0,
            c_r_dn: 3.0,
        }
    }

    fn small_ess() -> EssFleet {
        EssFleet {
            n_total: 4,
            p_min: -0.35,
            p_max: 0.35,
            e_min: 0.2,
            e_max: 1.8,
            k_ess: 20.0,
            c_r_up: 15.0,
            c_r_dn: 15.0,
            n_full0: 2,
            n_depleted0: 1,
            n_inuse0: 1,
            e_inuse0: 0.1,
        }
    }

    /// Two islands, two slots, no shipping: the only integers are the
    /// resource island's rollover counters.
    fn toy_a() -> Instance {
        let t = 2;
        let inst = Instance {
            horizon: t,
            slot_hours: 1.0,
            epsilon: 0.05,
            carbon_cap_tons: 100.0,
            carbon_price: 15.0,
            xi: 0.001,
            battery_mwh: 0.5,
            vessel_capacity: 1,
            service_fee: 2.0,
            transit_slots: vec![0, 0],
            islands: vec![
                Island {
                    role: IslandRole::Load,
                    nodes: vec![Node {
                        dg: Some(small_dg()),
                        ess: None,
                        wind: None,
                        load: profile(vec![0.8, 1.0], vec![0.04, 0.05]),
                        k_shed: 200.0,
                        q_bound: 0.0,
                        vessels: vec![0; t],
                    }],
                    lines: vec![],
                    v_min: 0.95,
                    v_max: 1.05,
                    price_min: vec![10.0; t],
                    price_max: vec![60.0; t],
                    rprice_min: vec![0.0; t],
                    rprice_max: vec![20.0; t],
                },
                Island {
                    role: IslandRole::Resource,
                    nodes: vec![Node {
                        dg: None,
                        ess: Some(small_ess()),
                        wind: Some(profile(vec![0.3, 0.25], vec![0.02, 0.02])),
                        load: profile(vec![0.0, 0.0], vec![0.0, 0.0]),
                        k_shed: 200.0,
                        q_bound: 0.0,
                        vessels: vec![0; t],
                    }],
                    lines: vec![],
                    v_min: 0.95,
                    v_max: 1.05,
                    price_min: vec![10.0; t],
                    price_max: vec![60.0; t],
                    rprice_min: vec![0.0; t],
                    rprice_max: vec![20.0; t],
                },
            ],
        };
        assert!(validate_instance(&inst).is_empty());
        inst
    }

    /// Adds an ESS node on the load island and one shippable battery,
    /// so swap logistics and the market interact.
    fn toy_b() -> Instance {
        let mut inst = toy_a();
        inst.transit_slots = vec![0, 1];
        let mut ess = small_ess();
        ess.p_max = 0.4;
        inst.islands[0].nodes.push(Node {
            dg: None,
            ess: Some(ess.clone()),
            wind: Some(profile(vec![0.1, 0.05], vec![0.02, 0.02])),
            load: profile(vec![0.0, 0.0], vec![0.0, 0.0]),
            k_shed: 200.0,
            q_bound: 0.0,
            vessels: vec![1; 2],
        });
        let res = &mut inst.islands[1].nodes[0];
        res.ess = Some(ess);
        res.wind = Some(profile(vec![0.35, 0.3], vec![0.02, 0.02]));
        res.vessels = vec![1; 2];
        assert!(validate_instance(&inst).is_empty());
        inst
    }

    fn mid_prices(cb: &CompactBilevel) -> Vec<f64> {
        let mut x = vec![0.0; cb.blocks.reg.len()];
        for i in cb.xu() {
            let (lo, hi) = cb.blocks.reg.bounds[i];
            x[i] = 0.5 * (lo + hi);
        }
        x
    }

    /// Independent check of SP: enumerate combinations and solve the
    /// continuous lower QP for each, taking the best.
    fn grid_lower_optimum(cb: &CompactBilevel, xu: &[f64]) -> f64 {
        let yl: Vec<usize> = cb.yl().collect();
        let mut best = f64::INFINITY;
        let mut cur: Vec<i64> = yl
            .iter()
            .map(|&i| cb.blocks.reg.bounds[i].0.round() as i64)
            .collect();
        let his: Vec<i64> = yl
            .iter()
            .map(|&i| cb.blocks.reg.bounds[i].1.round() as i64)
            .collect();
        let los = cur.clone();
        'outer: loop {
            let blocks = &cb.blocks;
            let n = blocks.reg.len();
            let mut qp = QpProblem::new(n);
            qp.bounds.copy_from_slice(&blocks.reg.bounds);
            for i in cb.xu() {
                qp.bounds[i] = (xu[i], xu[i]);
            }
            for (j, &v) in cur.iter().enumerate() {
                qp.bounds[cb.yl().start + j] = (v as f64, v as f64);
            }
            lower_objective_fixed_prices(cb, xu, &mut qp);
            qp.ineq.extend(blocks.lower_ineq.iter().cloned());
            qp.eq.extend(blocks.lower_eq.iter().cloned());
            if let Ok(sol) = solve_qp(&qp, 1e-6) {
                if sol.status == QpStatus::Optimal {
                    best = best.min(sol.objective);
                }
            }
            let mut pos = yl.len();
            loop {
                if pos == 0 {
                    break 'outer;
                }
                pos -= 1;
                if cur[pos] < his[pos] {
                    cur[pos] += 1;
                    for (j, v) in cur.iter_mut().enumerate().skip(pos + 1) {
                        *v = los[j];
                    }
                    break;
                }
            }
        }
        best
    }

    #[test]
    fn sp_matches_grid_enumeration() {
        let cb = compactify(&toy_a()).unwrap();
        let xu = mid_prices(&cb);
        let sp = solve_sp(&cb, &xu, &BnbLimits::default()).unwrap();
        let grid = grid_lower_optimum(&cb, &xu);
        assert!(
            (sp.theta - grid).abs() <= 1e-5 * grid.abs().max(1.0),
            "sp {} vs grid {}",
            sp.theta,
            grid
        );
        // SP's point evaluates to its reported objective
        let f_l = cb.blocks.eval_lower(&sp.x);
        assert!((f_l - sp.theta).abs() <= 1e-6 * grid.abs().max(1.0));
    }

    #[test]
    fn sp2_respects_lower_optimality() {
        let cb = compactify(&toy_a()).unwrap();
        // SP2 needs an upper-feasible announcement, not box midpoints
        let mp = solve_mp(&cb, &[], 1e-6, &BnbLimits::default()).unwrap();
        let xu = mp.x[..cb.blocks.reg.len()].to_vec();
        let limits = BnbLimits::default();
        let sp = solve_sp(&cb, &xu, &limits).unwrap();
        let (val, x2) = solve_sp2(&cb, &xu, sp.theta, &limits).unwrap().unwrap();
        assert!(cb.blocks.eval_lower(&x2) <= sp.theta + 1e-5);
        assert!((cb.blocks.eval_upper(&x2) - val).abs() <= 1e-6 * val.abs().max(1.0));
        for row in &cb.blocks.upper_ineq {
            assert!(row.eval(&x2) <= row.rhs + 1e-6);
        }
        for row in &cb.blocks.upper_eq {
            assert!((row.eval(&x2) - row.rhs).abs() <= 1e-6);
        }
    }

    #[test]
    fn mp_lower_bounds_the_oracle() {
        let cb = compactify(&toy_a()).unwrap();
        let (oracle, _) = enumerate_oracle(&cb).unwrap();
        let mp = solve_mp(&cb, &[], 1e-6, &BnbLimits::default()).unwrap();
        assert!(
            mp.lb <= oracle + 1e-5 * oracle.abs().max(1.0),
            "mp lb {} above oracle {}",
            mp.lb,
            oracle
        );
    }

    #[test]
    fn algorithm_matches_oracle_on_toy_a() {
        let cb = compactify(&toy_a()).unwrap();
        let (oracle, _) = enumerate_oracle(&cb).unwrap();
        let limits = AlgoLimits::default();
        let (sol, trace) = run_algorithm1(&cb, 1e-4, Mode::Proposed, &limits).unwrap();
        assert!(
            (sol.ub - oracle).abs() <= 1e-4 * oracle.abs().max(1.0),
            "algorithm {} vs oracle {} ({:?})",
            sol.ub,
            oracle,
            trace.termination
        );
        let report =
            verify_bilevel_feasibility(&cb, &sol.x, 1e-5, &limits.sub_limits).unwrap();
        assert!(report.passed, "{:?}", report.violations);
    }

    #[test]
    fn plain_mode_agrees_and_proposed_dominates() {
        let cb = compactify(&toy_a()).unwrap();
        let limits = AlgoLimits::default();
        let (prop, _) = run_algorithm1(&cb, 1e-4, Mode::Proposed, &limits).unwrap();
        let (plain, plain_trace) = run_algorithm1(&cb, 1e-4, Mode::PlainRbrd, &limits).unwrap();
        assert!((prop.ub - plain.ub).abs() <= 1e-4 * plain.ub.abs().max(1.0));
        // tightening can only start the upper bound lower
        for r in &plain_trace.iterations {
            if r.k == 0 {
                assert!(prop.ub <= r.ub + 1e-6 * r.ub.abs().max(1.0));
            }
        }
    }

    #[test]
    fn bounds_are_monotone() {
        let cb = compactify(&toy_b()).unwrap();
        let (_, trace) = run_algorithm1(&cb, 1e-4, Mode::PlainRbrd, &AlgoLimits::default()).unwrap();
        let mut prev_lb = f64::NEG_INFINITY;
        let mut prev_ub = f64::INFINITY;
        for r in &trace.iterations {
            assert!(r.lb >= prev_lb - 1e-9);
            assert!(r.ub <= prev_ub + 1e-9);
            prev_lb = r.lb;
            prev_ub = r.ub;
        }
    }

    #[test]
    fn algorithm_solution_is_bilevel_feasible_on_toy_b() {
        let cb = compactify(&toy_b()).unwrap();
        let limits = AlgoLimits::default();
        let (sol, _) = run_algorithm1(&cb, 1e-4, Mode::Proposed, &limits).unwrap();
        let report =
            verify_bilevel_feasibility(&cb, &sol.x, 1e-5, &limits.sub_limits).unwrap();
        assert!(report.passed, "{:?}", report.violations);
        assert!(sol.lb <= sol.ub + 1e-9);
    }

    #[test]
    fn tightening_gives_valid_upper_bound() {
        let cb = compactify(&toy_a()).unwrap();
        let (oracle, _) = enumerate_oracle(&cb).unwrap();
        let (ub0, y0, _) = tighten_upper_bound(&cb, &BnbLimits::default()).unwrap();
        assert!(ub0 >= oracle - 1e-5 * oracle.abs().max(1.0));
        assert!(y0.is_some());
    }

    #[test]
    fn trace_csv_format() {
        let cb = compactify(&toy_a()).unwrap();
        let (_, trace) = run_algorithm1(&cb, 1e-4, Mode::Proposed, &AlgoLimits::default()).unwrap();
        let csv = trace.to_csv();
        assert!(csv.starts_with("k,lb,ub,gap,sp_value,sp2_status,wall_ms\n"));
        assert!(csv.contains("# termination:"));
    }
}

