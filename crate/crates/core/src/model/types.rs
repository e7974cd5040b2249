//! Instance data model: islands, nodes, devices and per-slot profiles,
//! plus structural validation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IslandRole {
    Load,
    Resource,
}

/// Diesel generator: quadratic fuel cost, quadratic emission curve,
/// output/ramp limits and linear reserve offer costs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DieselGen {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub a_em: f64,
    pub b_em: f64,
    pub c_em: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Ramp limit between consecutive slots, MW/h.
    pub ramp: f64,
    pub c_r_up: f64,
    pub c_r_dn: f64,
}

/// Battery-swap ESS fleet at one node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EssFleet {
    pub n_total: i64,
    pub p_min: f64,
    pub p_max: f64,
    pub e_min: f64,
    pub e_max: f64,
    /// Quadratic throughput cost, $/MWh^2.
    pub k_ess: f64,
    /// Quadratic reserve provision costs, $/MW^2.
    pub c_r_up: f64,
    pub c_r_dn: f64,
    pub n_full0: i64,
    pub n_depleted0: i64,
    pub n_inuse0: i64,
    /// Partial charge of the in-use battery at t=0, MWh.
    pub e_inuse0: f64,
}

/// Per-slot mean/std pair (MW).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StochProfile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    #[serde(default)]
    pub dg: Option<DieselGen>,
    #[serde(default)]
    pub ess: Option<EssFleet>,
    #[serde(default)]
    pub wind: Option<StochProfile>,
    pub load: StochProfile,
    /// Quadratic shedding penalty, $/MW^2.
    pub k_shed: f64,
    /// Symmetric reactive capability of the local source, MVAr.
    pub q_bound: f64,
    /// Vessels available for battery swaps at this node, per slot.
    pub vessels: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Per-unit resistance/reactance.
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Island {
    pub role: IslandRole,
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub lines: Vec<Line>,
    pub v_min: f64,
    pub v_max: f64,
    /// Transaction-price bounds offered on this island, $/MWh per slot.
    pub price_min: Vec<f64>,
    pub price_max: Vec<f64>,
    /// Reserve-price bounds, $/MW per slot (same for up/down).
    pub rprice_min: Vec<f64>,
    pub rprice_max: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Instance {
    /// Number of slots.
    pub horizon: usize,
    pub slot_hours: f64,
    pub epsilon: f64,
    /// Eq-wide daily carbon cap, tons.
    pub carbon_cap_tons: f64,
    /// Carbon price, $/ton.
    pub carbon_price: f64,
    /// Outer convergence tolerance (relative gap).
    pub xi: f64,
    /// Battery energy, MWh.
    pub battery_mwh: f64,
    /// Batteries per vessel.
    pub vessel_capacity: u32,
    /// Fee per battery swapped out, $.
    pub service_fee: f64,
    /// Per-island transit delay to the load island, slots.
    pub transit_slots: Vec<usize>,
    pub islands: Vec<Island>,
}

impl Instance {
    /// The (single) load island index.
    pub fn load_island(&self) -> Option<usize> {
        self.islands
            .iter()
            .position(|i| i.role == IslandRole::Load)
    }

    /// Effective market price bounds at a slot: the intersection of
    /// every island's offered range.
    pub fn price_bounds(&self, t: usize) -> (f64, f64) {
        let lo = self
            .islands
            .iter()
            .map(|i| i.price_min[t])
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = self
            .islands
            .iter()
            .map(|i| i.price_max[t])
            .fold(f64::INFINITY, f64::min);
        (lo, hi)
    }

    pub fn rprice_bounds(&self, t: usize) -> (f64, f64) {
        let lo = self
            .islands
            .iter()
            .map(|i| i.rprice_min[t])
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = self
            .islands
            .iter()
            .map(|i| i.rprice_max[t])
            .fold(f64::INFINITY, f64::min);
        (lo, hi)
    }
}

/// One validation finding: a path to the offending field plus the rule
/// it breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn check(out: &mut Vec<Violation>, ok: bool, path: String, message: impl Into<String>) {
    if !ok {
        out.push(Violation {
            path,
            message: message.into(),
        });
    }
}

/// Checks every structural invariant; an empty list means well-formed.
pub fn validate_instance(inst: &Instance) -> Vec<Violation> {
    let mut v = Vec::new();
    let t = inst.horizon;
    check(&mut v, t >= 1, "horizon".into(), "horizon must be >= 1");
    check(
        &mut v,
        inst.slot_hours > 0.0,
        "slot_hours".into(),
        "slot duration must be positive",
    );
    check(
        &mut v,
        inst.epsilon > 0.0 && inst.epsilon < 0.5,
        "epsilon".into(),
        "violation probability must lie in (0, 0.5)",
    );
    check(
        &mut v,
        inst.battery_mwh > 0.0,
        "battery_mwh".into(),
        "battery energy must be positive",
    );
    check(
        &mut v,
        inst.vessel_capacity >= 1,
        "vessel_capacity".into(),
        "each vessel must carry at least one battery",
    );
    check(
        &mut v,
        inst.xi >= 0.0,
        "xi".into(),
        "tolerance must be nonnegative",
    );
    check(
        &mut v,
        inst.transit_slots.len() == inst.islands.len(),
        "transit_slots".into(),
        "one transit delay per island required",
    );
    let n_load = inst
        .islands
        .iter()
        .filter(|i| i.role == IslandRole::Load)
        .count();
    check(
        &mut v,
        n_load == 1,
        "islands".into(),
        format!("exactly one load island required, found {n_load}"),
    );

    for (ii, isl) in inst.islands.iter().enumerate() {
        let ip = format!("islands[{ii}]");
        check(
            &mut v,
            isl.v_min <= isl.v_max,
            format!("{ip}.v_min"),
            "voltage bounds inverted",
        );
        for arr in [
            ("price_min", &isl.price_min),
            ("price_max", &isl.price_max),
            ("rprice_min", &isl.rprice_min),
            ("rprice_max", &isl.rprice_max),
        ] {
            check(
                &mut v,
                arr.1.len() == t,
                format!("{ip}.{}", arr.0),
                format!("expected {t} slots, found {}", arr.1.len()),
            );
        }
        for k in 0..t.min(isl.price_min.len()).min(isl.price_max.len()) {
            check(
                &mut v,
                isl.price_min[k] <= isl.price_max[k],
                format!("{ip}.price_min[{k}]"),
                "price bounds inverted",
            );
        }
        for (li, line) in isl.lines.iter().enumerate() {
            let lp = format!("{ip}.lines[{li}]");
            check(
                &mut v,
                line.from < isl.nodes.len() && line.to < isl.nodes.len(),
                lp.clone(),
                "line endpoint out of range",
            );
            check(
                &mut v,
                line.r * line.r + line.x * line.x > 0.0,
                lp,
                "line impedance must be nonzero",
            );
        }
        if isl.nodes.len() > 1 && !isl.lines.is_empty() {
            // connectivity over the line graph
            let mut seen = vec![false; isl.nodes.len()];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(n) = stack.pop() {
                for l in &isl.lines {
                    if l.from >= isl.nodes.len() || l.to >= isl.nodes.len() {
                        continue;
                    }
                    let other = if l.from == n {
                        l.to
                    } else if l.to == n {
                        l.from
                    } else {
                        continue;
                    };
                    if !seen[other] {
                        seen[other] = true;
                        stack.push(other);
                    }
                }
            }
            check(
                &mut v,
                seen.iter().all(|&s| s),
                format!("{ip}.lines"),
                "network is not connected",
            );
        }
        if isl.role == IslandRole::Resource {
            // resource islands host aggregator assets only: no cable to
            // the microgrid, so no generation dispatch, loads or lines
            check(
                &mut v,
                isl.lines.is_empty(),
                format!("{ip}.lines"),
                "resource islands carry no network",
            );
            for (ni, node) in isl.nodes.iter().enumerate() {
                check(
                    &mut v,
                    node.dg.is_none(),
                    format!("{ip}.nodes[{ni}].dg"),
                    "resource islands host no diesel generation",
                );
                check(
                    &mut v,
                    node.load.mean.iter().chain(node.load.std.iter()).all(|&x| x == 0.0),
                    format!("{ip}.nodes[{ni}].load"),
                    "resource islands carry no microgrid load",
                );
            }
        }
        for (ni, node) in isl.nodes.iter().enumerate() {
            let np = format!("{ip}.nodes[{ni}]");
            check(
                &mut v,
                node.load.mean.len() == t && node.load.std.len() == t,
                format!("{np}.load"),
                format!("expected {t} slots"),
            );
            check(
                &mut v,
                node.load.std.iter().all(|&s| s >= 0.0),
                format!("{np}.load.std"),
                "standard deviations must be nonnegative",
            );
            check(
                &mut v,
                node.vessels.len() == t,
                format!("{np}.vessels"),
                format!("expected {t} slots"),
            );
            if let Some(w) = &node.wind {
                check(
                    &mut v,
                    w.mean.len() == t && w.std.len() == t,
                    format!("{np}.wind"),
                    format!("expected {t} slots"),
                );
                check(
                    &mut v,
                    w.std.iter().all(|&s| s >= 0.0),
                    format!("{np}.wind.std"),
                    "standard deviations must be nonnegative",
                );
                check(
                    &mut v,
                    node.ess.is_some(),
                    format!("{np}.wind"),
                    "wind must be paired with an ESS node (aggregator asset)",
                );
            }
            if let Some(dg) = &node.dg {
                check(
                    &mut v,
                    dg.a >= 0.0,
                    format!("{np}.dg.a"),
                    "quadratic fuel coefficient must be nonnegative",
                );
                check(
                    &mut v,
                    dg.p_min <= dg.p_max,
                    format!("{np}.dg.p_min"),
                    "output bounds inverted",
                );
                check(
                    &mut v,
                    dg.ramp >= 0.0,
                    format!("{np}.dg.ramp"),
                    "ramp limit must be nonnegative",
                );
            }
            if let Some(ess) = &node.ess {
                check(
                    &mut v,
                    ess.n_full0 + ess.n_depleted0 + ess.n_inuse0 == ess.n_total,
                    format!("{np}.ess.n_total"),
                    "initial battery counts must sum to the fleet total",
                );
                check(
                    &mut v,
                    ess.e_inuse0 >= 0.0 && ess.e_inuse0 < inst.battery_mwh,
                    format!("{np}.ess.e_inuse0"),
                    "in-use energy must lie in [0, battery_mwh)",
                );
                check(
                    &mut v,
                    ess.p_min <= ess.p_max,
                    format!("{np}.ess.p_min"),
                    "power bounds inverted",
                );
                let e0 = ess.n_full0 as f64 * inst.battery_mwh + ess.e_inuse0;
                check(
                    &mut v,
                    ess.e_min <= e0 && e0 <= ess.e_max,
                    format!("{np}.ess.e_min"),
                    format!("initial stored energy {e0} outside [e_min, e_max]"),
                );
                check(
                    &mut v,
                    ess.n_full0 >= 0 && ess.n_depleted0 >= 0 && ess.n_inuse0 >= 0,
                    format!("{np}.ess.n_full0"),
                    "battery counts must be nonnegative",
                );
            }
        }
    }
    v
}
