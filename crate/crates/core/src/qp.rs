//! Dense-friendly convex quadratic programming with dual extraction.
//!
//! Problems are stated as
//!
//! ```text
//!     minimize    1/2 x' Q x + c' x + k
//!     subject to  G x <= h          (inequality rows)
//!                 A x  = b          (equality rows)
//!                 sum_i d_i x_i^2 + a' x <= r   (convex quadratic rows)
//!                 lb <= x <= ub
//! ```
//!
//! with Q positive semidefinite and every `d_i >= 0`. The conic
//! interior-point backend (Clarabel) does the heavy lifting; quadratic
//! rows are lowered to second-order cones. KKT residuals of every
//! reported optimum are recomputed here, independently of the backend.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use thiserror::Error;

/// A linear row `a' x (<=|=) rhs`, with sparse coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinRow {
    pub fn new(terms: Vec<(usize, f64)>, rhs: f64) -> Self {
        LinRow { terms, rhs }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum()
    }
}

/// A convex quadratic row `sum d_i x_i^2 + a' x <= rhs` with `d_i >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRow {
    pub sq: Vec<(usize, f64)>,
    pub lin: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl QuadRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let q: f64 = self.sq.iter().map(|&(i, d)| d * x[i] * x[i]).sum();
        let l: f64 = self.lin.iter().map(|&(i, a)| a * x[i]).sum();
        q + l
    }
}

/// Convex QP with linear and convex-quadratic constraints.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub num_vars: usize,
    /// Upper-triangular entries (i <= j) of the symmetric Hessian Q;
    /// the objective is 1/2 x'Qx + c'x + constant.
    pub quad: Vec<(usize, usize, f64)>,
    pub lin: Vec<f64>,
    pub constant: f64,
    pub ineq: Vec<LinRow>,
    pub eq: Vec<LinRow>,
    pub quad_rows: Vec<QuadRow>,
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("hessian diagonal entry {0} is {1}, below the PSD repair threshold")]
    IndefiniteHessian(usize, f64),
    #[error("variable index {0} out of range (num_vars = {1})")]
    BadIndex(usize, usize),
    #[error("quadratic row {0} has negative square coefficient {1}")]
    NonconvexQuadRow(usize, f64),
    #[error("inconsistent bounds on variable {0}: [{1}, {2}]")]
    EmptyBounds(usize, f64, f64),
}

impl QpProblem {
    pub fn new(num_vars: usize) -> Self {
        QpProblem {
            num_vars,
            quad: Vec::new(),
            lin: vec![0.0; num_vars],
            constant: 0.0,
            ineq: Vec::new(),
            eq: Vec::new(),
            quad_rows: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); num_vars],
        }
    }

    /// Adds `coef * x_i * x_j` to the quadratic form x'Qx (so the
    /// objective gains `coef/2 * 2 = coef` ... the caller supplies the
    /// coefficient of the monomial in the *objective*, e.g. for
    /// `a*x^2` call `add_quad(i, i, 2.0 * a)`).
    pub fn add_quad(&mut self, i: usize, j: usize, coef: f64) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.quad.push((i, j, coef));
    }

    pub fn add_lin(&mut self, i: usize, coef: f64) {
        self.lin[i] += coef;
    }

    /// Objective value 1/2 x'Qx + c'x + k at a point.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v = self.constant;
        for (i, c) in self.lin.iter().enumerate() {
            v += c * x[i];
        }
        for &(i, j, q) in &self.quad {
            if i == j {
                v += 0.5 * q * x[i] * x[i];
            } else {
                v += q * x[i] * x[j];
            }
        }
        v
    }

    /// Gradient of the objective.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.lin.clone();
        for &(i, j, q) in &self.quad {
            if i == j {
                g[i] += q * x[i];
            } else {
                g[i] += q * x[j];
                g[j] += q * x[i];
            }
        }
        g
    }

    /// Validates dimensions and convexity, clamping slightly negative
    /// diagonal Hessian entries (above -1e-8) to zero.
    pub fn validate(&mut self) -> Result<(), QpError> {
        let n = self.num_vars;
        for &(i, j, _) in &self.quad {
            if i >= n || j >= n {
                return Err(QpError::BadIndex(i.max(j), n));
            }
        }
        for (i, j, v) in self.quad.iter_mut() {
            if i == j && *v < 0.0 {
                if *v < -1e-8 {
                    return Err(QpError::IndefiniteHessian(*i, *v));
                }
                *v = 0.0;
            }
        }
        for row in self.ineq.iter().chain(self.eq.iter()) {
            for &(i, _) in &row.terms {
                if i >= n {
                    return Err(QpError::BadIndex(i, n));
                }
            }
        }
        for (r, row) in self.quad_rows.iter().enumerate() {
            for &(i, d) in &row.sq {
                if i >= n {
                    return Err(QpError::BadIndex(i, n));
                }
                if d < 0.0 {
                    return Err(QpError::NonconvexQuadRow(r, d));
                }
            }
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo > hi + 1e-12 {
                return Err(QpError::EmptyBounds(i, lo, hi));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalTrouble,
}

/// KKT residuals of a (point, multiplier) pair.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub dual_nonneg: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual_nonneg)
            .max(self.complementarity)
    }
}

/// Multipliers, one per constraint of the corresponding kind.
#[derive(Debug, Clone, Default)]
pub struct QpDuals {
    pub ineq: Vec<f64>,
    pub eq: Vec<f64>,
    pub quad: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    pub duals: QpDuals,
    pub objective: f64,
    pub kkt: KktReport,
    /// Farkas ray (infeasible) or unbounded descent ray.
    pub certificate: Option<Vec<f64>>,
}

fn csc_from_triplets(m: usize, n: usize, trips: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(r, c, v) in trips {
        if v != 0.0 {
            by_col[c].push((r, v));
        }
    }
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for col in by_col.iter_mut() {
        col.sort_by_key(|&(r, _)| r);
        // merge duplicates
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
        for &(r, v) in col.iter() {
            if let Some(last) = merged.last_mut() {
                if last.0 == r {
                    last.1 += v;
                    continue;
                }
            }
            merged.push((r, v));
        }
        for (r, v) in merged {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Solves a convex QP, returning primal point, multipliers for every
/// constraint family, and independently recomputed KKT residuals.
pub fn solve_qp(p: &QpProblem, tol_kkt: f64) -> Result<QpSolution, QpError> {
    let mut p = p.clone();
    p.validate()?;
    let n = p.num_vars;

    // Objective: clarabel wants 1/2 x'Px + q'x with P upper-triangular.
    let ptrips: Vec<(usize, usize, f64)> =
        p.quad.iter().map(|&(i, j, v)| (i, j, v)).collect();
    let pmat = csc_from_triplets(n, n, &ptrips);

    // Constraint stacking: zero cone (eq), nonneg cone (ineq + finite
    // bounds), then one SOC per quadratic row.
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut row = 0usize;

    for r in &p.eq {
        for &(i, a) in &r.terms {
            trips.push((row, i, a));
        }
        b.push(r.rhs);
        row += 1;
    }
    let n_eq = row;

    for r in &p.ineq {
        for &(i, a) in &r.terms {
            trips.push((row, i, a));
        }
        b.push(r.rhs);
        row += 1;
    }
    // finite bounds become nonneg-cone rows; remember which
    let mut lb_rows: Vec<(usize, usize)> = Vec::new(); // (var, row)
    let mut ub_rows: Vec<(usize, usize)> = Vec::new();
    for (i, &(lo, hi)) in p.bounds.iter().enumerate() {
        if lo.is_finite() {
            trips.push((row, i, -1.0));
            b.push(-lo);
            lb_rows.push((i, row));
            row += 1;
        }
        if hi.is_finite() {
            trips.push((row, i, 1.0));
            b.push(hi);
            ub_rows.push((i, row));
            row += 1;
        }
    }
    let n_nonneg = row - n_eq;

    // each quadratic row: s0 = 1 + (rhs - a'x), s1 = 1 - (rhs - a'x),
    // s_{2+k} = 2 sqrt(d_k) x_k, with s in a second-order cone.
    let mut soc_starts: Vec<usize> = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_eq));
    }
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }
    for qr in &p.quad_rows {
        soc_starts.push(row);
        for &(i, a) in &qr.lin {
            trips.push((row, i, a));
        }
        b.push(1.0 + qr.rhs);
        row += 1;
        for &(i, a) in &qr.lin {
            trips.push((row, i, -a));
        }
        b.push(1.0 - qr.rhs);
        row += 1;
        for &(i, d) in &qr.sq {
            trips.push((row, i, -2.0 * d.sqrt()));
            b.push(0.0);
            row += 1;
        }
        cones.push(SupportedConeT::SecondOrderConeT(2 + qr.sq.len()));
    }

    let amat = csc_from_triplets(row, n, &trips);
    let settings = DefaultSettings {
        verbose: false,
        max_iter: 200,
        tol_gap_abs: 1e-10,
        tol_gap_rel: 1e-10,
        tol_feas: 1e-10,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&pmat, &p.lin, &amat, &b, &cones, settings);
    solver.solve();
    let sol = &solver.solution;

    let extract_duals = |z: &[f64]| -> QpDuals {
        let mut duals = QpDuals {
            ineq: z[n_eq..n_eq + p.ineq.len()].to_vec(),
            eq: z[..n_eq].to_vec(),
            quad: Vec::with_capacity(p.quad_rows.len()),
            lower: vec![0.0; n],
            upper: vec![0.0; n],
        };
        for &(i, r) in &lb_rows {
            duals.lower[i] = z[r];
        }
        for &(i, r) in &ub_rows {
            duals.upper[i] = z[r];
        }
        for &s in &soc_starts {
            duals.quad.push(z[s] - z[s + 1]);
        }
        duals
    };

    let finish_optimal = |x: Vec<f64>, duals: QpDuals| -> QpSolution {
        let objective = p.objective(&x);
        let kkt = check_kkt(&p, &x, &duals);
        QpSolution {
            status: QpStatus::Optimal,
            x,
            duals,
            objective,
            kkt,
            certificate: None,
        }
    };

    let out = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            finish_optimal(sol.x.clone(), extract_duals(&sol.z))
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => QpSolution {
            status: QpStatus::Infeasible,
            x: sol.x.clone(),
            duals: QpDuals::default(),
            objective: f64::INFINITY,
            kkt: KktReport::default(),
            certificate: Some(sol.z.clone()),
        },
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => QpSolution {
            status: QpStatus::Unbounded,
            x: sol.x.clone(),
            duals: QpDuals::default(),
            objective: f64::NEG_INFINITY,
            kkt: KktReport::default(),
            certificate: Some(sol.x.clone()),
        },
        _ => {
            // iteration limit or numerical trouble: accept the iterate
            // if it verifies against our own KKT check, else report.
            let duals = extract_duals(&sol.z);
            let kkt = check_kkt(&p, &sol.x, &duals);
            if kkt.max() <= tol_kkt.max(1e-6) {
                finish_optimal(sol.x.clone(), duals)
            } else {
                QpSolution {
                    status: QpStatus::NumericalTrouble,
                    x: sol.x.clone(),
                    duals,
                    objective: p.objective(&sol.x),
                    kkt,
                    certificate: None,
                }
            }
        }
    };
    Ok(out)
}

/// Recomputes the four KKT residual families for a candidate
/// (point, multipliers) pair. Entirely independent of the backend.
pub fn check_kkt(p: &QpProblem, x: &[f64], duals: &QpDuals) -> KktReport {
    let mut grad = p.gradient(x);
    let mut primal: f64 = 0.0;
    let mut dual_nonneg: f64 = 0.0;
    let mut compl: f64 = 0.0;

    for (r, row) in p.eq.iter().enumerate() {
        let v = row.eval(x) - row.rhs;
        primal = primal.max(v.abs());
        let nu = duals.eq.get(r).copied().unwrap_or(0.0);
        for &(i, a) in &row.terms {
            grad[i] += nu * a;
        }
    }
    for (r, row) in p.ineq.iter().enumerate() {
        let g = row.eval(x) - row.rhs;
        primal = primal.max(g.max(0.0));
        let mu = duals.ineq.get(r).copied().unwrap_or(0.0);
        dual_nonneg = dual_nonneg.max(-mu);
        compl = compl.max((mu * g).abs());
        for &(i, a) in &row.terms {
            grad[i] += mu * a;
        }
    }
    for (r, qr) in p.quad_rows.iter().enumerate() {
        let g = qr.eval(x) - qr.rhs;
        primal = primal.max(g.max(0.0));
        let lam = duals.quad.get(r).copied().unwrap_or(0.0);
        dual_nonneg = dual_nonneg.max(-lam);
        compl = compl.max((lam * g).abs());
        for &(i, d) in &qr.sq {
            grad[i] += lam * 2.0 * d * x[i];
        }
        for &(i, a) in &qr.lin {
            grad[i] += lam * a;
        }
    }
    for (i, &(lo, hi)) in p.bounds.iter().enumerate() {
        if lo.is_finite() {
            let g = lo - x[i];
            primal = primal.max(g.max(0.0));
            let mu = duals.lower.get(i).copied().unwrap_or(0.0);
            dual_nonneg = dual_nonneg.max(-mu);
            compl = compl.max((mu * g).abs());
            grad[i] -= mu;
        }
        if hi.is_finite() {
            let g = x[i] - hi;
            primal = primal.max(g.max(0.0));
            let mu = duals.upper.get(i).copied().unwrap_or(0.0);
            dual_nonneg = dual_nonneg.max(-mu);
            compl = compl.max((mu * g).abs());
            grad[i] += mu;
        }
    }

    let stationarity = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    KktReport {
        stationarity,
        primal,
        dual_nonneg,
        complementarity: compl,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn min_x_squared_above_one() {
        // min x^2 s.t. x >= 1  ->  x*=1, bound dual 2, objective 1
        let mut p = QpProblem::new(1);
        p.add_quad(0, 0, 2.0);
        p.bounds[0] = (1.0, f64::INFINITY);
        let s = solve_qp(&p, 1e-8).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_close(s.x[0], 1.0, 1e-7);
        assert_close(s.duals.lower[0], 2.0, 1e-6);
        assert_close(s.objective, 1.0, 1e-7);
        assert!(s.kkt.max() <= 1e-6);
    }

    #[test]
    fn projection_onto_halfplane() {
        // min (x-3)^2 + (y-2)^2 s.t. x+y <= 4 -> (2.5, 1.5), dual 1, obj 0.5
        let mut p = QpProblem::new(2);
        p.add_quad(0, 0, 2.0);
        p.add_quad(1, 1, 2.0);
        p.lin = vec![-6.0, -4.0];
        p.constant = 13.0;
        p.ineq.push(LinRow::new(vec![(0, 1.0), (1, 1.0)], 4.0));
        let s = solve_qp(&p, 1e-8).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_close(s.x[0], 2.5, 1e-7);
        assert_close(s.x[1], 1.5, 1e-7);
        assert_close(s.duals.ineq[0], 1.0, 1e-6);
        assert_close(s.objective, 0.5, 1e-7);
    }

    #[test]
    fn unconstrained_minimum() {
        let mut p = QpProblem::new(1);
        p.add_quad(0, 0, 2.0);
        let s = solve_qp(&p, 1e-8).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_close(s.x[0], 0.0, 1e-7);
        assert_close(s.objective, 0.0, 1e-9);
    }

    #[test]
    fn infeasible_box() {
        let mut p = QpProblem::new(1);
        p.add_quad(0, 0, 2.0);
        p.ineq.push(LinRow::new(vec![(0, 1.0)], -1.0)); // x <= -1
        p.bounds[0] = (0.0, f64::INFINITY);
        let s = solve_qp(&p, 1e-8).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        assert!(s.certificate.is_some());
    }

    #[test]
    fn unbounded_linear() {
        let mut p = QpProblem::new(1);
        p.lin = vec![1.0];
        p.bounds[0] = (f64::NEG_INFINITY, 0.0);
        let s = solve_qp(&p, 1e-8).unwrap();
        assert_eq!(s.status, QpStatus::Unbounded);
    }

    #[test]
    fn equality_constrained() {
        // min x^2 + y^2 s.t. x + y = 2 -> (1,1)
        let mut p = QpProblem::new(2);
        p.add_quad(0, 0, 2.0);
        p.add_quad(1, 1, 2.0);
        p.eq.push(LinRow::new(vec![(0, 1.0), (1, 1.0)], 2.0));
        let s = solve_qp(&p, 1e-8).unwrap();
        assert_close(s.x[0], 1.0, 1e-7);
        assert_close(s.x[1], 1.0, 1e-7);
        assert_close(s.duals.eq[0], -2.0, 1e-6);
    }

    #[test]
    fn quadratic_row_binding() {
        // min -x s.t. x^2 <= 4 -> x = 2, quad dual 1/(2x) = 0.25
        let mut p = QpProblem::new(1);
        p.lin = vec![-1.0];
        p.quad_rows.push(QuadRow {
            sq: vec![(0, 1.0)],
            lin: vec![],
            rhs: 4.0,
        });
        let s = solve_qp(&p, 1e-8).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_close(s.x[0], 2.0, 1e-6);
        assert_close(s.duals.quad[0], 0.25, 1e-5);
        assert!(s.kkt.max() <= 1e-5, "kkt {:?}", s.kkt);
    }

    #[test]
    fn kkt_flags_perturbed_point() {
        // perturbed primal x = 1.1 on (min x^2, x >= 1):
        // complementarity residual = mu * g = 2 * 0.1 ... with the
        // optimal dual mu = 2 held fixed, residual 0.2; with mu = 2.2
        // (the stationarity-consistent dual) residual 0.22 = 0.2*1.1.
        let mut p = QpProblem::new(1);
        p.add_quad(0, 0, 2.0);
        p.bounds[0] = (1.0, f64::INFINITY);
        let duals = QpDuals {
            lower: vec![2.2],
            upper: vec![0.0],
            ..Default::default()
        };
        let rep = check_kkt(&p, &[1.1], &duals);
        assert_close(rep.complementarity, 0.2 * 1.1, 1e-12);
        assert_close(rep.stationarity, 0.0, 1e-12);
    }

    #[test]
    fn kkt_missing_multiplier() {
        // zero duals on an active constraint: stationarity = |grad f|
        let mut p = QpProblem::new(1);
        p.add_quad(0, 0, 2.0);
        p.bounds[0] = (1.0, f64::INFINITY);
        let rep = check_kkt(&p, &[1.0], &QpDuals {
            lower: vec![0.0],
            upper: vec![0.0],
            ..Default::default()
        });
        assert_close(rep.stationarity, 2.0, 1e-12);
    }

    #[test]
    fn weak_duality_and_sensitivity() {
        // perturb a binding rhs by +delta: optimum changes by ~ -mu*delta
        let mut p = QpProblem::new(2);
        p.add_quad(0, 0, 2.0);
        p.add_quad(1, 1, 2.0);
        p.lin = vec![-6.0, -4.0];
        p.constant = 13.0;
        p.ineq.push(LinRow::new(vec![(0, 1.0), (1, 1.0)], 4.0));
        let s0 = solve_qp(&p, 1e-8).unwrap();
        let mu = s0.duals.ineq[0];
        let delta = 1e-4;
        p.ineq[0].rhs += delta;
        let s1 = solve_qp(&p, 1e-8).unwrap();
        let predicted = s0.objective - mu * delta;
        assert!((s1.objective - predicted).abs() < 1e-6);
    }
}
