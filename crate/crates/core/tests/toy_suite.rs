//! Oracle-equivalence and trace-property checks over the toy corpus.

mod common;

use std::time::Instant;

use islandgrid::decomp::{
    compactify, enumerate_oracle, run_algorithm1, verify_bilevel_feasibility, AlgoLimits, Mode,
    Termination,
};

#[test]
fn algorithm_matches_oracle_on_corpus() {
    let limits = AlgoLimits::default();
    let start = Instant::now();
    for (name, inst) in common::toy_corpus() {
        let t0 = Instant::now();
        let cb = compactify(&inst).unwrap_or_else(|e| panic!("{name}: {e}"));
        let (oracle, _) = enumerate_oracle(&cb).unwrap_or_else(|e| panic!("{name}: {e}"));
        let (sol, trace) = run_algorithm1(&cb, 1e-4, Mode::Proposed, &limits)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let tol = 1e-4 * oracle.abs().max(1.0);
        assert!(
            (sol.ub - oracle).abs() <= tol,
            "{name}: algorithm {} vs oracle {} ({:?})",
            sol.ub,
            oracle,
            trace.termination
        );

        // trace properties: fresh combinations until the terminal
        // iteration, monotone bounds
        let n = trace.iterations.len();
        let mut prev_lb = f64::NEG_INFINITY;
        let mut prev_ub = f64::INFINITY;
        for (i, r) in trace.iterations.iter().enumerate() {
            if i + 1 < n {
                assert!(r.fresh_combination, "{name}: stale combination at {}", r.k);
            }
            assert!(r.lb >= prev_lb - 1e-9, "{name}: LB regressed at {}", r.k);
            assert!(r.ub <= prev_ub + 1e-9, "{name}: UB regressed at {}", r.k);
            prev_lb = r.lb;
            prev_ub = r.ub;
        }

        if trace.termination == Termination::Duplicate {
            let report = verify_bilevel_feasibility(&cb, &sol.x, 1e-5, &limits.sub_limits)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(report.passed, "{name}: {:?}", report.violations);
        }
        eprintln!("{name}: ok in {:?} (oracle {:.4})", t0.elapsed(), oracle);
    }
    eprintln!("corpus total: {:?}", start.elapsed());
}
