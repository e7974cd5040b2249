//! Built-in three-island test system: island 0 is a 4-bus load island,
//! islands 1-2 are single-node resource islands. Profiles are smooth
//! synthetic day curves (load peaking midday on the load island, wind
//! stronger at night on the resource islands).

use std::f64::consts::PI;

use super::types::{
    DieselGen, EssFleet, Instance, Island, IslandRole, Line, Node, StochProfile,
};

const T: usize = 24;

fn day_shape(t: usize) -> f64 {
    (PI * (t as f64 - 6.0) / 12.0).sin().max(0.0)
}

fn night_shape(t: usize) -> f64 {
    (2.0 * PI * t as f64 / 24.0).cos()
}

fn load_profile(base: f64, amp: f64) -> StochProfile {
    let mean: Vec<f64> = (0..T).map(|t| base + amp * day_shape(t)).collect();
    let std = mean.iter().map(|m| 0.10 * m).collect();
    StochProfile { mean, std }
}

fn wind_profile(base: f64, amp: f64) -> StochProfile {
    let mean: Vec<f64> = (0..T).map(|t| base + amp * night_shape(t)).collect();
    let std = mean.iter().map(|m| 0.15 * m).collect();
    StochProfile { mean, std }
}

fn zero_load() -> StochProfile {
    StochProfile {
        mean: vec![0.0; T],
        std: vec![0.0; T],
    }
}

fn ess() -> EssFleet {
    EssFleet {
        n_total: 40,
        p_min: -1.875,
        p_max: 1.875,
        e_min: 1.125,
        e_max: 10.125,
        k_ess: 24.45,
        c_r_up: 31.5,
        c_r_dn: 31.5,
        n_full0: 12,
        n_depleted0: 27,
        n_inuse0: 1,
        e_inuse0: 0.075,
    }
}

fn dg() -> DieselGen {
    DieselGen {
        a: 4.05,
        b: 38.64,
        c: 12.45,
        a_em: 0.1,
        b_em: 0.4,
        c_em: 0.0,
        p_min: 0.0,
        p_max: 2.25,
        ramp: 0.75,
        c_r_up: 91.5,
        c_r_dn: 91.5,
    }
}

fn plain_node(load: StochProfile) -> Node {
    Node {
        dg: None,
        ess: None,
        wind: None,
        load,
        k_shed: 250.0,
        q_bound: 0.0,
        vessels: vec![0; T],
    }
}

/// Deterministic stand-in for the paper's case-study system.
pub fn default_instance() -> Instance {
    let price_min = vec![30.0; T];
    let price_max = vec![100.0; T];
    let rprice_min = vec![0.0; T];
    let rprice_max = vec![40.0; T];

    // load island: slack DG bus, one aggregator (ESS+wind) bus, two
    // pure load buses, connected in a ring
    let load_island = Island {
        role: IslandRole::Load,
        nodes: vec![
            Node {
                dg: Some(dg()),
                q_bound: 1.125,
                ..plain_node(zero_load())
            },
            Node {
                ess: Some(ess()),
                wind: Some(wind_profile(0.25, 0.15)),
                q_bound: 0.9375,
                vessels: vec![2; T],
                ..plain_node(load_profile(0.55, 0.35))
            },
            plain_node(load_profile(0.5, 0.45)),
            plain_node(load_profile(0.4, 0.35)),
        ],
        lines: vec![
            Line { from: 0, to: 1, r: 0.01, x: 0.05 },
            Line { from: 1, to: 2, r: 0.01, x: 0.05 },
            Line { from: 2, to: 3, r: 0.01, x: 0.05 },
            Line { from: 3, to: 0, r: 0.01, x: 0.05 },
        ],
        v_min: 0.95,
        v_max: 1.05,
        price_min: price_min.clone(),
        price_max: price_max.clone(),
        rprice_min: rprice_min.clone(),
        rprice_max: rprice_max.clone(),
    };

    let resource_island = |vessel_slots: &[usize], wind_base: f64| {
        let mut vessels = vec![0u32; T];
        for &s in vessel_slots {
            vessels[s] = 1;
        }
        Island {
            role: IslandRole::Resource,
            nodes: vec![Node {
                ess: Some(ess()),
                wind: Some(wind_profile(wind_base, 0.10)),
                vessels,
                ..plain_node(zero_load())
            }],
            lines: vec![],
            v_min: 0.95,
            v_max: 1.05,
            price_min: price_min.clone(),
            price_max: price_max.clone(),
            rprice_min: rprice_min.clone(),
            rprice_max: rprice_max.clone(),
        }
    };

    Instance {
        horizon: T,
        slot_hours: 1.0,
        epsilon: 0.05,
        carbon_cap_tons: 30.0,
        carbon_price: 15.0,
        xi: 0.01,
        battery_mwh: 0.15,
        vessel_capacity: 1,
        service_fee: 10.0,
        transit_slots: vec![0, 2, 2],
        islands: vec![
            load_island,
            resource_island(&[3, 7, 11, 15, 19], 0.16),
            resource_island(&[5, 9, 13, 17, 21], 0.15),
        ],
    }
}
