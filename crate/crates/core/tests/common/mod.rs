//! Shared toy-instance corpus for the integration suites: small
//! one/two-island systems with few enough integer variables that the
//! enumeration oracle stays cheap.

use islandgrid::model::{
    validate_instance, DieselGen, EssFleet, Instance, Island, IslandRole, Line, Node, StochProfile,
};

pub fn profile(mean: Vec<f64>, std: Vec<f64>) -> StochProfile {
    StochProfile { mean, std }
}

pub fn dg(p_max: f64, ramp: f64) -> DieselGen {
    DieselGen {
        a: 2.0,
        b: 10.0,
        c: 0.0,
        a_em: 0.02,
        b_em: 0.1,
        c_em: 0.0,
        p_min: 0.0,
        p_max,
        ramp,
        c_r_up: 3.0,
        c_r_dn: 3.0,
    }
}

pub fn ess() -> EssFleet {
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

pub fn zero(t: usize) -> StochProfile {
    profile(vec![0.0; t], vec![0.0; t])
}

pub fn plain_node(t: usize, load: StochProfile) -> Node {
    Node {
        dg: None,
        ess: None,
        wind: None,
        load,
        k_shed: 200.0,
        q_bound: 0.0,
        vessels: vec![0; t],
    }
}

pub struct ToyCfg {
    pub t: usize,
    pub load: Vec<f64>,
    pub load_std: Vec<f64>,
    pub dg_max: f64,
    /// Load-island ESS node: (wind mean, wind std, vessels per slot).
    pub load_ess: Option<(Vec<f64>, Vec<f64>, Vec<u32>)>,
    /// Resource island: (wind mean, wind std, vessels per slot).
    pub resource: Option<(Vec<f64>, Vec<f64>, Vec<u32>)>,
    /// Connect load-island nodes in a chain when true.
    pub lines: bool,
    pub price: (f64, f64),
    pub rprice: (f64, f64),
    pub epsilon: f64,
    pub transit: usize,
    pub e_inuse0: f64,
}

impl Default for ToyCfg {
    fn default() -> Self {
        ToyCfg {
            t: 2,
            load: vec![0.8, 1.0],
            load_std: vec![0.04, 0.05],
            dg_max: 2.0,
            load_ess: None,
            resource: None,
            lines: false,
            price: (20.0, 40.0),
            rprice: (0.0, 8.0),
            epsilon: 0.05,
            transit: 0,
            e_inuse0: 0.1,
        }
    }
}

pub fn build(cfg: &ToyCfg) -> Instance {
    let t = cfg.t;
    let mk_prices = |isl: &mut Island| {
        isl.price_min = vec![cfg.price.0; t];
        isl.price_max = vec![cfg.price.1; t];
        isl.rprice_min = vec![cfg.rprice.0; t];
        isl.rprice_max = vec![cfg.rprice.1; t];
    };

    let mut load_nodes = vec![Node {
        dg: Some(dg(cfg.dg_max, cfg.dg_max)),
        q_bound: if cfg.lines { 1.0 } else { 0.0 },
        ..plain_node(t, profile(cfg.load.clone(), cfg.load_std.clone()))
    }];
    if let Some((wind, std, vessels)) = &cfg.load_ess {
        let mut fleet = ess();
        fleet.e_inuse0 = cfg.e_inuse0;
        load_nodes.push(Node {
            ess: Some(fleet),
            wind: Some(profile(wind.clone(), std.clone())),
            vessels: vessels.clone(),
            q_bound: if cfg.lines { 1.0 } else { 0.0 },
            ..plain_node(t, zero(t))
        });
    }
    let lines = if cfg.lines {
        (1..load_nodes.len())
            .map(|i| Line {
                from: i - 1,
                to: i,
                r: 0.01,
                x: 0.05,
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut load_island = Island {
        role: IslandRole::Load,
        nodes: load_nodes,
        lines,
        v_min: 0.95,
        v_max: 1.05,
        price_min: vec![],
        price_max: vec![],
        rprice_min: vec![],
        rprice_max: vec![],
    };
    mk_prices(&mut load_island);

    let mut islands = vec![load_island];
    let mut transit_slots = vec![0];
    if let Some((wind, std, vessels)) = &cfg.resource {
        let mut fleet = ess();
        fleet.e_inuse0 = cfg.e_inuse0;
        let mut isl = Island {
            role: IslandRole::Resource,
            nodes: vec![Node {
                ess: Some(fleet),
                wind: Some(profile(wind.clone(), std.clone())),
                vessels: vessels.clone(),
                ..plain_node(t, zero(t))
            }],
            lines: vec![],
            v_min: 0.95,
            v_max: 1.05,
            price_min: vec![],
            price_max: vec![],
            rprice_min: vec![],
            rprice_max: vec![],
        };
        mk_prices(&mut isl);
        islands.push(isl);
        transit_slots.push(cfg.transit);
    }

    let inst = Instance {
        horizon: t,
        slot_hours: 1.0,
        epsilon: cfg.epsilon,
        carbon_cap_tons: 100.0,
        carbon_price: 15.0,
        xi: 0.001,
        battery_mwh: 0.5,
        vessel_capacity: 1,
        service_fee: 2.0,
        transit_slots,
        islands,
    };
    let violations = validate_instance(&inst);
    assert!(violations.is_empty(), "bad toy: {violations:?}");
    inst
}

/// The oracle-equivalence corpus: ≥ 20 named toys covering resource
/// logistics, the load-island market, shipping and network variants.
pub fn toy_corpus() -> Vec<(String, Instance)> {
    let mut out: Vec<(String, Instance)> = Vec::new();
    let mut add = |name: &str, cfg: ToyCfg| {
        out.push((name.to_string(), build(&cfg)));
    };

    // resource-island logistics, no market
    add(
        "res-basic",
        ToyCfg {
            resource: Some((vec![0.3, 0.25], vec![0.02, 0.02], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "res-t3",
        ToyCfg {
            t: 3,
            load: vec![0.8, 1.0, 0.9],
            load_std: vec![0.04, 0.05, 0.04],
            resource: Some((vec![0.3, 0.2, 0.1], vec![0.02; 3], vec![0; 3])),
            ..ToyCfg::default()
        },
    );
    add(
        "res-loose-eps",
        ToyCfg {
            epsilon: 0.10,
            resource: Some((vec![0.27, 0.25], vec![0.04, 0.04], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "res-residue",
        ToyCfg {
            e_inuse0: 0.3,
            resource: Some((vec![0.25, 0.15], vec![0.02, 0.02], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "res-vessel-noop",
        ToyCfg {
            // a vessel calls but no load-side station exists, so the
            // pipeline forces the shipment to stay home
            resource: Some((vec![0.3, 0.25], vec![0.02, 0.02], vec![1, 0])),
            transit: 1,
            ..ToyCfg::default()
        },
    );

    // load-island market, no resource island
    add(
        "mkt-basic",
        ToyCfg {
            load_ess: Some((vec![0.1, 0.05], vec![0.02, 0.02], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "mkt-wide-prices",
        ToyCfg {
            price: (10.0, 60.0),
            rprice: (0.0, 20.0),
            load_ess: Some((vec![0.1, 0.05], vec![0.02, 0.02], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "mkt-no-wind",
        ToyCfg {
            load_ess: Some((vec![0.0, 0.0], vec![0.0, 0.0], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "mkt-reserve-heavy",
        ToyCfg {
            load_std: vec![0.08, 0.10],
            load_ess: Some((vec![0.1, 0.05], vec![0.04, 0.04], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "mkt-tight-dg",
        ToyCfg {
            dg_max: 1.2,
            load_ess: Some((vec![0.15, 0.1], vec![0.02, 0.02], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "mkt-lined",
        ToyCfg {
            lines: true,
            load_ess: Some((vec![0.1, 0.05], vec![0.02, 0.02], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "mkt-t3",
        ToyCfg {
            t: 3,
            load: vec![0.8, 1.0, 0.7],
            load_std: vec![0.04, 0.05, 0.04],
            load_ess: Some((vec![0.1, 0.05, 0.1], vec![0.02; 3], vec![0; 3])),
            ..ToyCfg::default()
        },
    );

    // market + resource island, with and without shipping
    add(
        "ship-none",
        ToyCfg {
            load_ess: Some((vec![0.1, 0.05], vec![0.02, 0.02], vec![0, 0])),
            resource: Some((vec![0.3, 0.25], vec![0.02, 0.02], vec![0, 0])),
            ..ToyCfg::default()
        },
    );
    add(
        "ship-instant",
        ToyCfg {
            load_ess: Some((vec![0.1, 0.05], vec![0.02, 0.02], vec![1, 1])),
            resource: Some((vec![0.3, 0.25], vec![0.02, 0.02], vec![1, 1])),
            transit: 0,
            ..ToyCfg::default()
        },
    );
    add(
        "ship-lagged",
        ToyCfg {
            load_ess: Some((vec![0.1, 0.05], vec![0.02, 0.02], vec![1, 1])),
            resource: Some((vec![0.35, 0.3], vec![0.02, 0.02], vec![1, 1])),
            transit: 1,
            ..ToyCfg::default()
        },
    );

    // parameter sweeps
    for (i, scale) in [0.7, 0.9, 1.1].iter().enumerate() {
        add(
            &format!("sweep-load-{i}"),
            ToyCfg {
                load: vec![0.8 * scale, 1.0 * scale],
                load_ess: Some((vec![0.1, 0.05], vec![0.02, 0.02], vec![0, 0])),
                ..ToyCfg::default()
            },
        );
    }
    for (i, scale) in [0.5, 0.8, 1.1].iter().enumerate() {
        add(
            &format!("sweep-wind-{i}"),
            ToyCfg {
                resource: Some((vec![0.3 * scale, 0.25 * scale], vec![0.02, 0.02], vec![0, 0])),
                ..ToyCfg::default()
            },
        );
    }
    for (i, (lo, hi)) in [(25.0, 35.0), (15.0, 55.0)].iter().enumerate() {
        add(
            &format!("sweep-price-{i}"),
            ToyCfg {
                price: (*lo, *hi),
                load_ess: Some((vec![0.12, 0.08], vec![0.02, 0.02], vec![0, 0])),
                ..ToyCfg::default()
            },
        );
    }

    out
}
