//! Domain model for the bi-level island microgrid-group scheduling
//! problem: instance data, decision containers, objective evaluation,
//! battery-swap dynamics and constraint-block assembly.

mod assemble;
mod cost;
mod default_instance;
mod registry;
mod types;

pub use assemble::{assemble, AssembleError, BilinearObjTerm, ModelBlocks, ObjTerms, DELTA_FLOOR};
pub use cost::{
    battery_dynamics_step, carbon_total, lower_cost, upper_cost, DynamicsError, LowerDecision,
    UpperDecision,
};
pub use default_instance::default_instance;
pub use registry::{build_registry, swap_bounds, Registry, Var};
pub use types::{
    validate_instance, DieselGen, EssFleet, Instance, Island, IslandRole, Line, Node,
    StochProfile, Violation,
};

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn default_instance_is_valid() {
        let inst = default_instance();
        let v = validate_instance(&inst);
        assert!(v.is_empty(), "unexpected violations: {v:?}");
    }

    #[test]
    fn validation_catches_count_mismatch() {
        let mut inst = default_instance();
        inst.islands[1].nodes[0].ess.as_mut().unwrap().n_full0 += 1;
        let v = validate_instance(&inst);
        assert!(v.iter().any(|x| x.path.contains("ess.n_total")), "{v:?}");
    }

    #[test]
    fn validation_catches_epsilon_range() {
        let mut inst = default_instance();
        inst.epsilon = 0.7;
        let v = validate_instance(&inst);
        assert!(v.iter().any(|x| x.path == "epsilon"), "{v:?}");
    }

    #[test]
    fn upper_cost_constant_terms_only() {
        let inst = default_instance();
        let u = UpperDecision::zeros(&inst);
        let l = LowerDecision::zeros(&inst);
        // one DG with c = 12.45, c_em = 0 over 24 slots
        assert_close(upper_cost(&inst, &u, &l), 24.0 * 12.45, 1e-9);
    }

    #[test]
    fn upper_cost_single_dg_slot() {
        let inst = default_instance();
        let mut u = UpperDecision::zeros(&inst);
        let l = LowerDecision::zeros(&inst);
        u.p_dg[0][0][0] = 1.0;
        // 4.05 + 38.64 + 12.45 = 55.14 fuel, 15*(0.1+0.4) emission,
        // plus the 23 remaining constant slots
        let expect = 55.14 + 7.5 + 23.0 * 12.45;
        assert_close(upper_cost(&inst, &u, &l), expect, 1e-9);
    }

    #[test]
    fn upper_cost_energy_payment() {
        let inst = default_instance();
        let mut u = UpperDecision::zeros(&inst);
        let mut l = LowerDecision::zeros(&inst);
        u.price[0] = 100.0;
        l.p_agg[1][0][0] = 0.5;
        let baseline = 24.0 * 12.45;
        assert_close(upper_cost(&inst, &u, &l), baseline - 50.0, 1e-9);
    }

    #[test]
    fn lower_cost_components() {
        let inst = default_instance();
        let u = UpperDecision::zeros(&inst);
        let mut l = LowerDecision::zeros(&inst);
        assert_close(lower_cost(&inst, &u, &l), 0.0, 1e-12);
        l.n_swap[1][0][3] = 1;
        assert_close(lower_cost(&inst, &u, &l), 10.0, 1e-12);
        l.p_ess[1][0][0] = 1.0;
        assert_close(lower_cost(&inst, &u, &l), 10.0 + 24.45, 1e-12);
    }

    #[test]
    fn transfer_terms_cancel() {
        // Eq. 17/19 are exactly opposite to Eq. 1's price terms, so the
        // combined cost must not depend on prices at all.
        let inst = default_instance();
        let mut u = UpperDecision::zeros(&inst);
        let mut l = LowerDecision::zeros(&inst);
        l.p_agg[1][0][2] = 0.7;
        l.p_agg[0][1][2] = -0.3;
        l.r_agg_up[1][4] = 0.5;
        l.r_agg_dn[2][5] = 0.25;
        let total = |u: &UpperDecision| upper_cost(&inst, u, &l) + lower_cost(&inst, u, &l);
        let base = total(&u);
        u.price = vec![77.0; inst.horizon];
        u.rprice_up = vec![13.0; inst.horizon];
        u.rprice_dn = vec![29.0; inst.horizon];
        assert_close(total(&u), base, 1e-9);
    }

    #[test]
    fn dynamics_identity_case() {
        let (nf, nd, ei, ee) = battery_dynamics_step(3, 2, 0.0, 0, 0.0, 1.0, 0.15).unwrap();
        assert_eq!((nf, nd), (3, 2));
        assert_close(ei, 0.0, 1e-12);
        assert_close(ee, 0.45, 1e-12);
    }

    #[test]
    fn dynamics_rollover() {
        let (nf, nd, ei, _) = battery_dynamics_step(3, 2, 0.10, 0, 0.14, 1.0, 0.15).unwrap();
        assert_eq!((nf, nd), (4, 1));
        assert_close(ei, 0.09, 1e-12);
    }

    #[test]
    fn dynamics_negative_floor() {
        let (nf, nd, ei, _) = battery_dynamics_step(3, 2, 0.05, 2, -0.10, 1.0, 0.15).unwrap();
        assert_eq!((nf, nd), (0, 5));
        assert_close(ei, 0.10, 1e-12);
    }

    #[test]
    fn dynamics_rejects_negative_counts() {
        assert!(battery_dynamics_step(0, 2, 0.0, 1, 0.0, 1.0, 0.15).is_err());
    }

    #[test]
    fn registry_pack_unpack_roundtrip() {
        let inst = default_instance();
        let reg = build_registry(&inst);
        let mut u = UpperDecision::zeros(&inst);
        let mut l = LowerDecision::zeros(&inst);
        u.p_dg[0][0][5] = 1.25;
        u.price[5] = 42.0;
        u.voltage[0][2][5] = 1.01;
        l.p_ess[2][0][7] = -0.5;
        l.n_swap[1][0][3] = 1;
        l.kappa[1][0][3] = -2;
        l.r_agg_up[0][9] = 0.4;
        let x = reg.pack(&inst, &u, &l);
        let (u2, l2) = reg.unpack(&inst, &x);
        assert_eq!(u.p_dg, u2.p_dg);
        assert_eq!(u.price, u2.price);
        assert_eq!(u.voltage, u2.voltage);
        assert_eq!(l.p_ess, l2.p_ess);
        assert_eq!(l.n_swap, l2.n_swap);
        assert_eq!(l.kappa, l2.kappa);
        assert_eq!(l.r_agg_up, l2.r_agg_up);
    }

    #[test]
    fn assembled_objectives_match_cost_functions() {
        let inst = default_instance();
        let blocks = assemble(&inst).unwrap();
        let reg = &blocks.reg;
        let mut u = UpperDecision::zeros(&inst);
        let mut l = LowerDecision::zeros(&inst);
        u.price = (0..inst.horizon).map(|t| 40.0 + t as f64).collect();
        u.rprice_up = vec![11.0; inst.horizon];
        u.rprice_dn = vec![7.0; inst.horizon];
        for t in 0..inst.horizon {
            u.p_dg[0][0][t] = 0.5 + 0.01 * t as f64;
            u.p_shed[0][2][t] = 0.05;
            u.r_dg_up[0][0][t] = 0.2;
            l.p_ess[0][1][t] = 0.3;
            l.p_agg[0][1][t] = -0.1;
            l.r_ess_up[2][0][t] = 0.15;
            l.r_agg_up[0][t] = 0.1;
        }
        l.n_swap[1][0][3] = 1;
        l.n_swap[0][1][5] = -1;
        let x = reg.pack(&inst, &u, &l);
        assert_close(blocks.eval_upper(&x), upper_cost(&inst, &u, &l), 1e-8);
        assert_close(blocks.eval_lower(&x), lower_cost(&inst, &u, &l), 1e-8);
    }

    #[test]
    fn lower_block_is_free_of_upper_variables() {
        let inst = default_instance();
        let blocks = assemble(&inst).unwrap();
        for row in blocks.lower_ineq.iter().chain(blocks.lower_eq.iter()) {
            for &(i, _) in &row.terms {
                assert!(!blocks.reg.is_upper(i));
            }
        }
    }

    #[test]
    fn flow_rows_sum_to_zero_over_island() {
        // lossless linearized network: summing the nodal P flow
        // expressions cancels every line term, leaving the island-wide
        // balance
        let inst = default_instance();
        let blocks = assemble(&inst).unwrap();
        let reg = &blocks.reg;
        let n = reg.len();
        // random-ish but deterministic assignment
        let x: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 1000) as f64 / 997.0).collect();
        for t in 0..inst.horizon {
            // P rows of the lined island are the first 2*4 eq rows per
            // slot in assembly order (P,Q per node); pick them out by
            // reconstructing the flow parts
            let isl = &inst.islands[0];
            let mut flow_sum = 0.0;
            for ni in 0..isl.nodes.len() {
                for line in &isl.lines {
                    let other = if line.from == ni {
                        line.to
                    } else if line.to == ni {
                        line.from
                    } else {
                        continue;
                    };
                    let den = line.r * line.r + line.x * line.x;
                    let bf = line.x / den;
                    let gf = line.r / den;
                    let th_m = x[reg.idx(Var::Angle(0, ni, t))];
                    let th_n = x[reg.idx(Var::Angle(0, other, t))];
                    let v_m = x[reg.idx(Var::Voltage(0, ni, t))];
                    let v_n = x[reg.idx(Var::Voltage(0, other, t))];
                    flow_sum += bf * (th_m - th_n) + gf * (v_m - v_n);
                }
            }
            assert_close(flow_sum, 0.0, 1e-9);
        }
    }

    #[test]
    fn json_round_trip() {
        let inst = default_instance();
        let s = serde_json::to_string(&inst).unwrap();
        let back: Instance = serde_json::from_str(&s).unwrap();
        assert!(validate_instance(&back).is_empty());
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }
}
