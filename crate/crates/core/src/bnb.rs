//! Best-first branch and bound over convex QP relaxations.
//!
//! Three nonconvexity sources are handled by branching:
//!   * integer variables (most-fractional branching),
//!   * bilinear products `w = x*y` relaxed by McCormick envelopes
//!     (bisect the box of the factor with the largest envelope gap),
//!   * complementarity pairs `0 <= slack(row) ⊥ var >= 0` branched
//!     disjunctively (force the row to equality, or fix the var to 0).
//!
//! Ties break on the lowest variable index and nodes of equal bound
//! pop FIFO, so identical inputs explore identical trees.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::qp::{solve_qp, LinRow, QpProblem, QpStatus};

const INT_TOL: f64 = 1e-6;
const BILIN_TOL: f64 = 1e-7;
const COMP_TOL: f64 = 1e-7;
const FEAS_TOL: f64 = 1e-6;

/// A product `w = x * y` of two boxed variables.
#[derive(Debug, Clone)]
pub struct BilinearTerm {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
}

/// Complementarity between the slack of an inequality row and a
/// nonnegative variable: `(rhs - a'x) * x_var = 0`.
#[derive(Debug, Clone, Copy)]
pub struct CompPair {
    pub row: usize,
    pub var: usize,
}

#[derive(Debug, Clone)]
pub struct MiqpProblem {
    pub qp: QpProblem,
    pub integers: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NonconvexProblem {
    pub qp: QpProblem,
    pub integers: Vec<usize>,
    pub bilinear: Vec<BilinearTerm>,
    pub complementarity: Vec<CompPair>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BnbLimits {
    /// Node evaluation limit (0 = default 200_000).
    pub max_nodes: usize,
    pub time_limit: Option<Duration>,
}

impl BnbLimits {
    pub fn with_nodes(max_nodes: usize) -> Self {
        BnbLimits {
            max_nodes,
            time_limit: None,
        }
    }
    fn nodes(&self) -> usize {
        if self.max_nodes == 0 {
            200_000
        } else {
            self.max_nodes
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnbStatus {
    Optimal,
    Infeasible,
    /// Node or time limit hit; incumbent (if any) plus proof gap returned.
    LimitReached,
}

#[derive(Debug, Clone)]
pub struct BnbSolution {
    pub status: BnbStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Global lower bound at termination.
    pub bound: f64,
    pub gap: f64,
    pub nodes: usize,
    pub branched: usize,
}

#[derive(Debug, Error)]
pub enum BnbError {
    #[error("integer variable {0} has non-finite bounds")]
    UnboundedInteger(usize),
    #[error("bilinear factor {0} has non-finite bounds")]
    UnboundedFactor(usize),
    #[error("complementarity pair references inequality row {0}, but there are only {1}")]
    BadCompRow(usize, usize),
    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),
}

/// The four McCormick envelope inequalities for `w = x*y` on a box.
/// Expressed as rows over the variable indices of the term.
pub fn mccormick(term: &BilinearTerm) -> Vec<LinRow> {
    mccormick_boxed(term.x, term.y, term.w, term.x_bounds, term.y_bounds)
}

fn mccormick_boxed(
    x: usize,
    y: usize,
    w: usize,
    (xl, xu): (f64, f64),
    (yl, yu): (f64, f64),
) -> Vec<LinRow> {
    vec![
        // w >= xl*y + yl*x - xl*yl
        LinRow::new(vec![(w, -1.0), (y, xl), (x, yl)], xl * yl),
        // w >= xu*y + yu*x - xu*yu
        LinRow::new(vec![(w, -1.0), (y, xu), (x, yu)], xu * yu),
        // w <= xu*y + yl*x - xu*yl
        LinRow::new(vec![(w, 1.0), (y, -xu), (x, -yl)], -xu * yl),
        // w <= xl*y + yu*x - xl*yu
        LinRow::new(vec![(w, 1.0), (y, -xl), (x, -yu)], -xl * yu),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CompFix {
    Free,
    SlackZero,
    DualZero,
}

#[derive(Debug)]
enum Delta {
    Bound { var: usize, lo: f64, hi: f64 },
    Comp { idx: usize, fix: CompFix },
}

struct NodeState {
    parent: Option<Arc<NodeState>>,
    delta: Delta,
}

struct Node {
    state: Option<Arc<NodeState>>,
    bound: f64,
    seq: u64,
    depth: u32,
}

impl Node {
    fn materialize(
        &self,
        base: &[(f64, f64)],
        n_comp: usize,
    ) -> (Vec<(f64, f64)>, Vec<CompFix>) {
        let mut bounds = base.to_vec();
        let mut comp = vec![CompFix::Free; n_comp];
        let mut seen_b = vec![false; base.len()];
        let mut seen_c = vec![false; n_comp];
        let mut cur = self.state.clone();
        while let Some(s) = cur {
            match s.delta {
                Delta::Bound { var, lo, hi } => {
                    if !seen_b[var] {
                        seen_b[var] = true;
                        bounds[var] = (lo, hi);
                    }
                }
                Delta::Comp { idx, fix } => {
                    if !seen_c[idx] {
                        seen_c[idx] = true;
                        comp[idx] = fix;
                    }
                }
            }
            cur = s.parent.clone();
        }
        (bounds, comp)
    }
}

struct HeapEntry {
    node: Node,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.node.bound == other.node.bound && self.node.seq == other.node.seq
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // BinaryHeap is a max-heap: invert so the smallest bound pops
    // first, FIFO on ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .node
            .bound
            .total_cmp(&self.node.bound)
            .then(other.node.seq.cmp(&self.node.seq))
    }
}

pub fn solve_miqp(
    p: &MiqpProblem,
    gap_tol: f64,
    limits: &BnbLimits,
) -> Result<BnbSolution, BnbError> {
    let nc = NonconvexProblem {
        qp: p.qp.clone(),
        integers: p.integers.clone(),
        bilinear: Vec::new(),
        complementarity: Vec::new(),
    };
    solve_nonconvex(&nc, gap_tol, limits)
}

/// Problem-specific primal heuristic: maps a node relaxation point to
/// a candidate feasible point (checked exactly before acceptance).
pub type PrimalHeuristic<'h> = dyn Fn(&[f64]) -> Option<Vec<f64>> + 'h;

struct Searcher<'a> {
    prob: &'a NonconvexProblem,
    gap_tol: f64,
    heap: BinaryHeap<HeapEntry>,
    seq: u64,
    incumbent: Option<(Vec<f64>, f64)>,
    nodes: usize,
    branched: usize,
    num_failures: usize,
    heuristic: Option<&'a PrimalHeuristic<'a>>,
    /// External upper cutoff: values at or above it are uninteresting.
    cutoff_init: f64,
}

enum NodeOutcome {
    Pruned,
    Fathomed,
    Branched,
}

impl<'a> Searcher<'a> {
    fn push(&mut self, state: Option<Arc<NodeState>>, bound: f64, depth: u32) {
        self.seq += 1;
        self.heap.push(HeapEntry {
            node: Node {
                state,
                bound,
                seq: self.seq,
                depth,
            },
        });
    }

    fn incumbent_obj(&self) -> f64 {
        self.incumbent.as_ref().map_or(f64::INFINITY, |(_, v)| *v)
    }

    /// Prune threshold: incumbent minus the relative gap tolerance, or
    /// the external cutoff if that is stricter.
    fn cutoff(&self) -> f64 {
        let inc = self.incumbent_obj();
        let own = if inc.is_finite() {
            inc - self.gap_tol * inc.abs().max(1.0)
        } else {
            inc
        };
        own.min(self.cutoff_init)
    }

    /// Builds the relaxation QP for a node.
    fn node_qp(&self, bounds: &[(f64, f64)], comp: &[CompFix]) -> Option<QpProblem> {
        let mut qp = self.prob.qp.clone();
        qp.bounds = bounds.to_vec();
        for (idx, fix) in comp.iter().enumerate() {
            match fix {
                CompFix::Free => {}
                CompFix::SlackZero => {
                    let row = self.prob.qp.ineq[self.prob.complementarity[idx].row].clone();
                    qp.eq.push(row);
                }
                CompFix::DualZero => {
                    let v = self.prob.complementarity[idx].var;
                    let (lo, hi) = qp.bounds[v];
                    let nlo = lo.max(0.0);
                    let nhi = hi.min(0.0);
                    if nlo > nhi + 1e-12 {
                        return None;
                    }
                    qp.bounds[v] = (nlo, nhi.max(nlo));
                }
            }
        }
        for term in &self.prob.bilinear {
            let xb = bounds[term.x];
            let yb = bounds[term.y];
            qp.ineq
                .extend(mccormick_boxed(term.x, term.y, term.w, xb, yb));
        }
        Some(qp)
    }

    // temporary diagnostic: first violated constraint of a candidate
    fn reject_reason(&self, x: &[f64]) -> String {
        let mut cand = x.to_vec();
        for &i in &self.prob.integers {
            cand[i] = cand[i].round();
        }
        for term in &self.prob.bilinear {
            cand[term.w] = cand[term.x] * cand[term.y];
        }
        let qp = &self.prob.qp;
        for (i, &(lo, hi)) in qp.bounds.iter().enumerate() {
            if cand[i] < lo - FEAS_TOL || cand[i] > hi + FEAS_TOL {
                return format!("bound {i}: {} not in [{lo},{hi}]", cand[i]);
            }
        }
        for (r, row) in qp.eq.iter().enumerate() {
            if (row.eval(&cand) - row.rhs).abs() > FEAS_TOL {
                return format!("eq {r}: residual {}", row.eval(&cand) - row.rhs);
            }
        }
        for (r, row) in qp.ineq.iter().enumerate() {
            if row.eval(&cand) - row.rhs > FEAS_TOL {
                return format!("ineq {r}: excess {}", row.eval(&cand) - row.rhs);
            }
        }
        for (r, qr) in qp.quad_rows.iter().enumerate() {
            if qr.eval(&cand) - qr.rhs > FEAS_TOL {
                return format!("quad {r}: excess {}", qr.eval(&cand) - qr.rhs);
            }
        }
        for (r, pair) in self.prob.complementarity.iter().enumerate() {
            let slack = qp.ineq[pair.row].rhs - qp.ineq[pair.row].eval(&cand);
            if slack.min(cand[pair.var]) > COMP_TOL.max(FEAS_TOL) {
                return format!("comp {r}: min {}", slack.min(cand[pair.var]));
            }
        }
        format!("feasible, obj {}", qp.objective(&cand))
    }

    /// Exact feasibility check of a candidate point against the
    /// original problem (true products, rounded integers).
    fn try_incumbent(&mut self, x: &[f64], bounds: &[(f64, f64)]) -> bool {
        let mut cand = x.to_vec();
        for &i in &self.prob.integers {
            cand[i] = cand[i].round();
        }
        for term in &self.prob.bilinear {
            cand[term.w] = cand[term.x] * cand[term.y];
        }
        let qp = &self.prob.qp;
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if cand[i] < lo - FEAS_TOL || cand[i] > hi + FEAS_TOL {
                return false;
            }
        }
        for row in &qp.eq {
            if (row.eval(&cand) - row.rhs).abs() > FEAS_TOL {
                return false;
            }
        }
        for row in &qp.ineq {
            if row.eval(&cand) - row.rhs > FEAS_TOL {
                return false;
            }
        }
        for qr in &qp.quad_rows {
            if qr.eval(&cand) - qr.rhs > FEAS_TOL {
                return false;
            }
        }
        for pair in &self.prob.complementarity {
            let slack = qp.ineq[pair.row].rhs - qp.ineq[pair.row].eval(&cand);
            if slack.min(cand[pair.var]) > COMP_TOL.max(FEAS_TOL) {
                return false;
            }
        }
        let obj = qp.objective(&cand);
        if obj < self.incumbent_obj() - 1e-12 {
            self.incumbent = Some((cand, obj));
            true
        } else {
            false
        }
    }

    /// Fix bilinear x-factors and the observed complementarity pattern,
    /// then solve the remaining convex MIQP to manufacture a feasible
    /// point early.
    fn polish(&mut self, x: &[f64], bounds: &[(f64, f64)], comp: &[CompFix]) {
        if self.prob.bilinear.is_empty() && self.prob.complementarity.is_empty() {
            return;
        }
        let mut qp = self.prob.qp.clone();
        qp.bounds = bounds.to_vec();
        for term in &self.prob.bilinear {
            let (lo, hi) = bounds[term.x];
            let v = x[term.x].clamp(lo, hi);
            qp.bounds[term.x] = (v, v);
            qp.eq.push(LinRow::new(vec![(term.w, 1.0), (term.y, -v)], 0.0));
        }
        for (idx, pair) in self.prob.complementarity.iter().enumerate() {
            if comp[idx] != CompFix::Free {
                // already fixed on this node path; node_qp handled it
            }
            let slack = qp.ineq[pair.row].rhs - qp.ineq[pair.row].eval(x);
            if slack <= x[pair.var] {
                let row = self.prob.qp.ineq[pair.row].clone();
                qp.eq.push(row);
            } else {
                let (lo, hi) = qp.bounds[pair.var];
                qp.bounds[pair.var] = (lo.max(0.0), hi.min(0.0).max(lo.max(0.0)));
            }
        }
        let sub = NonconvexProblem {
            qp,
            integers: self.prob.integers.clone(),
            bilinear: Vec::new(),
            complementarity: Vec::new(),
        };
        let lim = BnbLimits::with_nodes(2_000);
        if let Ok(sol) = solve_nonconvex(&sub, self.gap_tol.max(1e-8), &lim) {
            if sol.status != BnbStatus::Infeasible && !sol.x.is_empty() {
                self.try_incumbent(&sol.x, &self.prob.qp.bounds);
            }
        }
    }

    fn process(&mut self, node: &Node) -> Result<NodeOutcome, BnbError> {
        let (bounds, comp) = node.materialize(&self.prob.qp.bounds, self.prob.complementarity.len());
        let qp = match self.node_qp(&bounds, &comp) {
            Some(qp) => qp,
            None => return Ok(NodeOutcome::Pruned),
        };
        let sol = solve_qp(&qp, 1e-8)?;
        self.nodes += 1;
        let (relax_obj, x) = match sol.status {
            QpStatus::Infeasible => return Ok(NodeOutcome::Pruned),
            QpStatus::Unbounded => (f64::NEG_INFINITY, sol.x),
            QpStatus::Optimal => (sol.objective, sol.x),
            QpStatus::NumericalTrouble => {
                self.num_failures += 1;
                (node.bound, sol.x)
            }
        };
        // relaxation soundness: a child can never undercut its parent
        // beyond solver noise; clamp to keep the tree bound monotone
        debug_assert!(
            relax_obj >= node.bound - 1e-4 * (1.0 + node.bound.abs()),
            "child relaxation {relax_obj} below parent bound {}",
            node.bound
        );
        let relax_obj = relax_obj.max(node.bound);
        if relax_obj >= self.cutoff() {
            return Ok(NodeOutcome::Pruned);
        }
        if x.is_empty() {
            return Ok(NodeOutcome::Pruned);
        }

        // pick the branching entity
        let mut int_var: Option<(usize, f64)> = None;
        for &i in &self.prob.integers {
            if (bounds[i].1 - bounds[i].0).abs() < 0.5 {
                continue;
            }
            let frac = (x[i] - x[i].round()).abs();
            if frac > INT_TOL && int_var.map_or(true, |(_, f)| frac > f) {
                int_var = Some((i, frac));
            }
        }
        let mut bilin: Option<(usize, f64)> = None;
        if int_var.is_none() {
            for (t, term) in self.prob.bilinear.iter().enumerate() {
                let viol = (x[term.w] - x[term.x] * x[term.y]).abs();
                if viol > BILIN_TOL && bilin.map_or(true, |(_, v)| viol > v) {
                    bilin = Some((t, viol));
                }
            }
        }
        let mut comp_idx: Option<(usize, f64)> = None;
        if int_var.is_none() && bilin.is_none() {
            for (idx, pair) in self.prob.complementarity.iter().enumerate() {
                if comp[idx] != CompFix::Free {
                    continue;
                }
                let slack = qp.ineq[pair.row].rhs - qp.ineq[pair.row].eval(&x);
                let viol = slack.min(x[pair.var]);
                if viol > COMP_TOL && comp_idx.map_or(true, |(_, v)| viol > v) {
                    comp_idx = Some((idx, viol));
                }
            }
        }

        if int_var.is_none() && bilin.is_none() && comp_idx.is_none() {
            self.try_incumbent(&x, &bounds);
            return Ok(NodeOutcome::Fathomed);
        }

        let parent = node.state.clone();
        let depth = node.depth + 1;
        if let Some((i, _)) = int_var {
            let (lo, hi) = bounds[i];
            let v = x[i].clamp(lo, hi);
            let down = v.floor();
            let up = v.ceil();
            let (down, up) = if (v - v.round()).abs() <= INT_TOL {
                (v.round() - 1.0, v.round() + 1.0) // shouldn't happen; guard
            } else {
                (down, up)
            };
            if down >= lo - 1e-9 {
                self.push(
                    Some(Arc::new(NodeState {
                        parent: parent.clone(),
                        delta: Delta::Bound {
                            var: i,
                            lo,
                            hi: down,
                        },
                    })),
                    relax_obj,
                    depth,
                );
            }
            if up <= hi + 1e-9 {
                self.push(
                    Some(Arc::new(NodeState {
                        parent,
                        delta: Delta::Bound { var: i, lo: up, hi },
                    })),
                    relax_obj,
                    depth,
                );
            }
        } else if let Some((t, _)) = bilin {
            let term = &self.prob.bilinear[t];
            // bisect the wider factor box, at the relaxation point
            // clamped away from the edges
            let wx = bounds[term.x].1 - bounds[term.x].0;
            let wy = bounds[term.y].1 - bounds[term.y].0;
            let var = if wx >= wy { term.x } else { term.y };
            let (lo, hi) = bounds[var];
            let width = hi - lo;
            let v = x[var].clamp(lo + 0.2 * width, hi - 0.2 * width);
            self.push(
                Some(Arc::new(NodeState {
                    parent: parent.clone(),
                    delta: Delta::Bound { var, lo, hi: v },
                })),
                relax_obj,
                depth,
            );
            self.push(
                Some(Arc::new(NodeState {
                    parent,
                    delta: Delta::Bound { var, lo: v, hi },
                })),
                relax_obj,
                depth,
            );
        } else if let Some((idx, _)) = comp_idx {
            self.push(
                Some(Arc::new(NodeState {
                    parent: parent.clone(),
                    delta: Delta::Comp {
                        idx,
                        fix: CompFix::SlackZero,
                    },
                })),
                relax_obj,
                depth,
            );
            self.push(
                Some(Arc::new(NodeState {
                    parent,
                    delta: Delta::Comp {
                        idx,
                        fix: CompFix::DualZero,
                    },
                })),
                relax_obj,
                depth,
            );
        }
        self.branched += 1;
        if let Some(heur) = self.heuristic {
            if self.nodes == 1 || self.nodes % 200 == 0 {
                if let Some(cand) = heur(&x) {
                    let acc = self.try_incumbent(&cand, &self.prob.qp.bounds);
                    if self.nodes < 1000 {
                        eprintln!(
                            "    heur node {}: acc={} inc={} why={}",
                            self.nodes,
                            acc,
                            self.incumbent_obj(),
                            self.reject_reason(&cand)
                        );
                    }
                } else if self.nodes < 1000 {
                    eprintln!("    heur node {}: produced none", self.nodes);
                }
            }
        }
        if self.nodes == 1 || self.nodes % 2_000 == 0 {
            self.polish(&x, &bounds, &comp);
        }
        Ok(NodeOutcome::Branched)
    }
}

/// Globally minimizes a convex QP with integer variables, bilinear
/// products and complementarity pairs by best-first branch and bound.
pub fn solve_nonconvex(
    p: &NonconvexProblem,
    gap_tol: f64,
    limits: &BnbLimits,
) -> Result<BnbSolution, BnbError> {
    solve_nonconvex_with(p, gap_tol, limits, None)
}

/// Like [`solve_nonconvex`], with an optional primal heuristic that is
/// offered node relaxation points to turn into incumbents.
pub fn solve_nonconvex_with(
    p: &NonconvexProblem,
    gap_tol: f64,
    limits: &BnbLimits,
    heuristic: Option<&PrimalHeuristic>,
) -> Result<BnbSolution, BnbError> {
    solve_nonconvex_cutoff(p, gap_tol, limits, heuristic, f64::INFINITY)
}

/// Like [`solve_nonconvex_with`], discarding any solution at or above
/// `cutoff`: exhausting the tree without an incumbent then proves the
/// problem is infeasible or dominated, which callers scanning several
/// candidate problems treat the same way.
pub fn solve_nonconvex_cutoff(
    p: &NonconvexProblem,
    gap_tol: f64,
    limits: &BnbLimits,
    heuristic: Option<&PrimalHeuristic>,
    cutoff: f64,
) -> Result<BnbSolution, BnbError> {
    for &i in &p.integers {
        let (lo, hi) = p.qp.bounds[i];
        if !lo.is_finite() || !hi.is_finite() {
            return Err(BnbError::UnboundedInteger(i));
        }
    }
    for term in &p.bilinear {
        for &v in &[term.x, term.y] {
            let (lo, hi) = p.qp.bounds[v];
            if !lo.is_finite() || !hi.is_finite() {
                return Err(BnbError::UnboundedFactor(v));
            }
        }
    }
    for pair in &p.complementarity {
        if pair.row >= p.qp.ineq.len() {
            return Err(BnbError::BadCompRow(pair.row, p.qp.ineq.len()));
        }
    }

    let start = Instant::now();
    let mut s = Searcher {
        prob: p,
        gap_tol,
        heap: BinaryHeap::new(),
        seq: 0,
        incumbent: None,
        nodes: 0,
        branched: 0,
        num_failures: 0,
        heuristic,
        cutoff_init: cutoff,
    };
    s.push(None, f64::NEG_INFINITY, 0);

    let mut limit_hit = false;
    let mut best_open = f64::INFINITY;
    while let Some(entry) = s.heap.pop() {
        best_open = entry.node.bound;
        if best_open >= s.cutoff() {
            best_open = best_open.min(s.incumbent_obj());
            // everything remaining is dominated
            s.heap.clear();
            break;
        }
        if s.nodes >= limits.nodes()
            || limits.time_limit.map_or(false, |t| start.elapsed() > t)
        {
            limit_hit = true;
            break;
        }
        s.process(&entry.node)?;
        best_open = f64::INFINITY;
    }

    let bound = if limit_hit {
        best_open.min(s.incumbent_obj())
    } else if s.heap.is_empty() && best_open.is_infinite() && best_open > 0.0 {
        s.incumbent_obj()
    } else {
        best_open.min(s.incumbent_obj())
    };

    let (status, x, objective) = match (&s.incumbent, limit_hit) {
        (Some((x, obj)), false) => (BnbStatus::Optimal, x.clone(), *obj),
        (Some((x, obj)), true) => (BnbStatus::LimitReached, x.clone(), *obj),
        (None, true) => (BnbStatus::LimitReached, Vec::new(), f64::INFINITY),
        (None, false) => {
            if s.num_failures > 0 {
                (BnbStatus::LimitReached, Vec::new(), f64::INFINITY)
            } else {
                (BnbStatus::Infeasible, Vec::new(), f64::INFINITY)
            }
        }
    };
    let gap = if objective.is_finite() {
        (objective - bound).max(0.0)
    } else {
        f64::INFINITY
    };
    Ok(BnbSolution {
        status,
        x,
        objective,
        bound,
        gap,
        nodes: s.nodes,
        branched: s.branched,
    })
}
