//! Command-line surface: instance ingestion, solver orchestration,
//! Monte Carlo simulation, comparison runs and plot-data emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use islandgrid::decomp::{
    compactify, enumerate_oracle, run_algorithm1, AlgoLimits, CompactBilevel, DecompError, Mode,
    Termination,
};
use islandgrid::model::{
    carbon_total, default_instance, lower_cost, upper_cost, validate_instance, Instance,
    LowerDecision, UpperDecision,
};
use islandgrid::qp::{solve_qp, QpProblem, QpStatus};
use islandgrid::uncertainty::{monte_carlo_reliability, sample_scenarios};

#[derive(Parser)]
#[command(name = "islandgrid", about = "Bi-level scheduling for island microgrid groups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Proposed,
    Rbrd,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the bi-level problem and write schedule/trace/summary.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value = "proposed")]
        mode: ModeArg,
        /// Relative convergence tolerance xi (defaults to the instance's).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        time_limit_s: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Exhaustive enumeration ground truth (small instances only).
    Oracle {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Monte Carlo reliability of a solved schedule.
    Simulate {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "10000")]
        samples: usize,
        #[arg(long, default_value = "2024")]
        seed: u64,
        /// Ablation: zero every reserve before simulating.
        #[arg(long)]
        no_reserve: bool,
        /// Ablation: strip the aggregator and re-dispatch DG alone.
        #[arg(long)]
        no_rsa: bool,
    },
    /// Run both modes with equal budgets and report per-iteration gaps.
    Compare {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        time_limit_s: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the built-in three-island case-study instance.
    MakeDefaultInstance {
        #[arg(long, default_value = "instance.json")]
        out: PathBuf,
    },
    /// Emit per-figure CSVs from a solved schedule.
    EmitPlots {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum CliError {
    /// Bad input (missing file, malformed JSON, invalid instance).
    Input(String),
    /// Solver hit its iteration/node/time budget; artifacts written.
    Limit(String),
    /// Internal solver failure.
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Limit(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Limit(m) | CliError::Solver(m) => m,
        }
    }
}

fn solver_error(e: DecompError) -> CliError {
    match e {
        DecompError::OracleTooLarge(n) => {
            CliError::Input(format!("instance too large for the oracle: {n} combinations"))
        }
        DecompError::BilevelInfeasible | DecompError::LowerInfeasible => {
            CliError::Input(format!("{e}"))
        }
        other => CliError::Solver(format!("{other}")),
    }
}

#[derive(Serialize, Deserialize)]
struct Schedule {
    upper: UpperDecision,
    lower: LowerDecision,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    mode: String,
    tol: f64,
    upper_cost: f64,
    /// RSA profit is the negated lower objective.
    rsa_profit: f64,
    lower_cost: f64,
    lb: f64,
    ub: f64,
    gap: f64,
    relative_gap: f64,
    iterations: usize,
    wall_time_s: f64,
    carbon_total_tons: f64,
    termination: String,
}

fn load_instance(path: &Path) -> Result<Instance, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let inst: Instance = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("malformed instance {}: {e}", path.display())))?;
    let violations = validate_instance(&inst);
    if !violations.is_empty() {
        let mut msg = format!("invalid instance {}:", path.display());
        for v in violations {
            msg.push_str(&format!("\n  {}: {}", v.path, v.message));
        }
        return Err(CliError::Input(msg));
    }
    Ok(inst)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Solver(format!("serialization: {e}")))?;
    fs::write(path, text)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::Gap => "gap",
        Termination::Duplicate => "duplicate-combination",
        Termination::IterationLimit => "iteration-limit",
        Termination::TimeLimit => "time-limit",
    }
}

fn cents(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn build_limits(max_iters: Option<usize>, time_limit_s: Option<f64>) -> AlgoLimits {
    let mut limits = AlgoLimits::default();
    if let Some(n) = max_iters {
        limits.max_iters = n;
    }
    if let Some(s) = time_limit_s {
        limits.time_limit = Some(Duration::from_secs_f64(s));
    }
    limits
}

fn cmd_solve(
    instance: &Path,
    mode: ModeArg,
    tol: Option<f64>,
    max_iters: Option<usize>,
    time_limit_s: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let inst = load_instance(instance)?;
    let xi = tol.unwrap_or(inst.xi);
    if xi < 0.0 {
        return Err(CliError::Input("tolerance must be nonnegative".into()));
    }
    let cb = compactify(&inst).map_err(solver_error)?;
    let limits = build_limits(max_iters, time_limit_s);
    let algo_mode = match mode {
        ModeArg::Proposed => Mode::Proposed,
        ModeArg::Rbrd => Mode::PlainRbrd,
    };
    let start = Instant::now();
    let (sol, trace) = run_algorithm1(&cb, xi, algo_mode, &limits).map_err(solver_error)?;
    let wall = start.elapsed().as_secs_f64();

    ensure_dir(out)?;
    let (u, l) = cb.blocks.reg.unpack(&inst, &sol.x);
    let summary = Summary {
        mode: match mode {
            ModeArg::Proposed => "proposed".into(),
            ModeArg::Rbrd => "rbrd".into(),
        },
        tol: xi,
        upper_cost: upper_cost(&inst, &u, &l),
        rsa_profit: -lower_cost(&inst, &u, &l),
        lower_cost: lower_cost(&inst, &u, &l),
        lb: sol.lb,
        ub: sol.ub,
        gap: sol.gap,
        relative_gap: sol.gap / sol.ub.abs().max(1.0),
        iterations: sol.iterations,
        wall_time_s: wall,
        carbon_total_tons: carbon_total(&inst, &u),
        termination: termination_name(trace.termination).into(),
    };
    write_json(&out.join("schedule.json"), &Schedule { upper: u, lower: l })?;
    fs::write(out.join("trace.csv"), trace.to_csv())
        .map_err(|e| CliError::Input(format!("cannot write trace.csv: {e}")))?;
    write_json(&out.join("summary.json"), &summary)?;

    println!(
        "upper cost ${:.2}  RSA profit ${:.2}  gap {:.4}%  {} iterations  {:.1}s  [{}]",
        cents(summary.upper_cost),
        cents(summary.rsa_profit),
        100.0 * summary.relative_gap,
        summary.iterations,
        wall,
        summary.termination,
    );
    match trace.termination {
        Termination::IterationLimit | Termination::TimeLimit => Err(CliError::Limit(format!(
            "stopped at {} with relative gap {:.4}",
            termination_name(trace.termination),
            summary.relative_gap
        ))),
        _ => Ok(()),
    }
}

fn cmd_oracle(instance: &Path, out: &Path) -> Result<(), CliError> {
    let inst = load_instance(instance)?;
    let cb = compactify(&inst).map_err(solver_error)?;
    let start = Instant::now();
    let (objective, x) = enumerate_oracle(&cb).map_err(solver_error)?;
    let wall = start.elapsed().as_secs_f64();
    ensure_dir(out)?;
    let (u, l) = cb.blocks.reg.unpack(&inst, &x);
    let summary = Summary {
        mode: "oracle".into(),
        tol: 0.0,
        upper_cost: upper_cost(&inst, &u, &l),
        rsa_profit: -lower_cost(&inst, &u, &l),
        lower_cost: lower_cost(&inst, &u, &l),
        lb: objective,
        ub: objective,
        gap: 0.0,
        relative_gap: 0.0,
        iterations: 0,
        wall_time_s: wall,
        carbon_total_tons: carbon_total(&inst, &u),
        termination: "enumeration".into(),
    };
    write_json(&out.join("schedule.json"), &Schedule { upper: u, lower: l })?;
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "oracle objective ${:.2} in {:.1}s",
        cents(objective),
        wall
    );
    Ok(())
}

fn load_schedule(out: &Path) -> Result<Schedule, CliError> {
    let path = out.join("schedule.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("malformed schedule {}: {e}", path.display())))
}

/// DG-only single-level dispatch with the aggregator stripped: upper
/// block only, every lower variable pinned to zero.
fn solve_without_rsa(cb: &CompactBilevel) -> Result<(UpperDecision, LowerDecision), CliError> {
    let blocks = &cb.blocks;
    let n = blocks.reg.len();
    let mut qp = QpProblem::new(n);
    qp.bounds.copy_from_slice(&blocks.reg.bounds);
    for i in cb.xl().chain(cb.yl()) {
        qp.bounds[i] = (0.0, 0.0);
    }
    for &(i, c) in &blocks.upper_obj.quad {
        qp.add_quad(i, i, 2.0 * c);
    }
    for &(i, c) in &blocks.upper_obj.lin {
        qp.add_lin(i, c);
    }
    qp.constant = blocks.upper_obj.constant;
    qp.ineq.extend(blocks.upper_ineq.iter().cloned());
    qp.eq.extend(blocks.upper_eq.iter().cloned());
    qp.quad_rows.extend(blocks.upper_quad.iter().cloned());
    let sol = solve_qp(&qp, 1e-8).map_err(|e| CliError::Solver(format!("{e}")))?;
    if sol.status != QpStatus::Optimal {
        return Err(CliError::Input(
            "DG-only dispatch infeasible: demand cannot be met without the aggregator".into(),
        ));
    }
    Ok(cb.blocks.reg.unpack(&cb.inst, &sol.x))
}

#[derive(Serialize)]
struct SimulationOutput {
    samples: usize,
    seed: u64,
    no_reserve: bool,
    no_rsa: bool,
    total_cost: f64,
    upper_cost: f64,
    rsa_profit: f64,
    reliability: f64,
    whole_schedule_reliability: f64,
    per_constraint_violation: f64,
    whole_schedule_violation: f64,
}

fn cmd_simulate(
    instance: &Path,
    out: &Path,
    samples: usize,
    seed: u64,
    no_reserve: bool,
    no_rsa: bool,
) -> Result<(), CliError> {
    let inst = load_instance(instance)?;
    let (mut u, mut l) = if no_rsa {
        let cb = compactify(&inst).map_err(solver_error)?;
        solve_without_rsa(&cb)?
    } else {
        let s = load_schedule(out)?;
        (s.upper, s.lower)
    };
    if no_reserve {
        for arr in [&mut u.r_dg_up, &mut u.r_dg_dn, &mut l.r_ess_up, &mut l.r_ess_dn] {
            for isl in arr.iter_mut() {
                for node in isl.iter_mut() {
                    node.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        for arr in [&mut l.r_agg_up, &mut l.r_agg_dn] {
            for isl in arr.iter_mut() {
                isl.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let scenarios = sample_scenarios(&inst, samples, seed);
    let report = monte_carlo_reliability(&inst, &u, &l, &scenarios);
    let output = SimulationOutput {
        samples,
        seed,
        no_reserve,
        no_rsa,
        total_cost: upper_cost(&inst, &u, &l) + lower_cost(&inst, &u, &l),
        upper_cost: upper_cost(&inst, &u, &l),
        rsa_profit: -lower_cost(&inst, &u, &l),
        reliability: report.reliability,
        whole_schedule_reliability: report.whole_schedule_reliability,
        per_constraint_violation: report.per_constraint_violation,
        whole_schedule_violation: report.whole_schedule_violation,
    };
    ensure_dir(out)?;
    let name = match (no_reserve, no_rsa) {
        (false, false) => "reliability.json",
        (true, false) => "reliability_no_reserve.json",
        (false, true) => "reliability_no_rsa.json",
        (true, true) => "reliability_no_reserve_no_rsa.json",
    };
    write_json(&out.join(name), &output)?;
    write_json(&out.join("reliability_detail.json"), &report)?;
    println!(
        "reliability {:.2}%  whole-schedule {:.2}%  total cost ${:.2}",
        100.0 * output.reliability,
        100.0 * output.whole_schedule_reliability,
        cents(output.total_cost),
    );
    Ok(())
}

fn cmd_compare(
    instance: &Path,
    tol: Option<f64>,
    max_iters: Option<usize>,
    time_limit_s: Option<f64>,
    out: &Path,
) -> Result<(), CliError> {
    let inst = load_instance(instance)?;
    let xi = tol.unwrap_or(inst.xi);
    let cb = compactify(&inst).map_err(solver_error)?;
    let limits = build_limits(max_iters, time_limit_s);
    let (prop, prop_trace) = run_algorithm1(&cb, xi, Mode::Proposed, &limits).map_err(solver_error)?;
    let (plain, plain_trace) =
        run_algorithm1(&cb, xi, Mode::PlainRbrd, &limits).map_err(solver_error)?;
    ensure_dir(out)?;
    fs::write(out.join("trace_proposed.csv"), prop_trace.to_csv())
        .map_err(|e| CliError::Input(format!("cannot write trace: {e}")))?;
    fs::write(out.join("trace_rbrd.csv"), plain_trace.to_csv())
        .map_err(|e| CliError::Input(format!("cannot write trace: {e}")))?;

    #[derive(Serialize)]
    struct SideBySide {
        xi: f64,
        proposed_ub: f64,
        rbrd_ub: f64,
        proposed_gap: f64,
        rbrd_gap: f64,
        proposed_iterations: usize,
        rbrd_iterations: usize,
    }
    let cmp = SideBySide {
        xi,
        proposed_ub: prop.ub,
        rbrd_ub: plain.ub,
        proposed_gap: prop.gap / prop.ub.abs().max(1.0),
        rbrd_gap: plain.gap / plain.ub.abs().max(1.0),
        proposed_iterations: prop.iterations,
        rbrd_iterations: plain.iterations,
    };
    write_json(&out.join("compare.json"), &cmp)?;
    println!(
        "proposed: ${:.2} gap {:.4}% in {} iters | rbrd: ${:.2} gap {:.4}% in {} iters",
        cents(prop.ub),
        100.0 * cmp.proposed_gap,
        prop.iterations,
        cents(plain.ub),
        100.0 * cmp.rbrd_gap,
        plain.iterations,
    );
    Ok(())
}

fn csv_write(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn cmd_emit_plots(instance: &Path, out: &Path) -> Result<(), CliError> {
    let inst = load_instance(instance)?;
    let s = load_schedule(out)?;
    let (u, l) = (&s.upper, &s.lower);
    ensure_dir(out)?;
    let t_all = if u.price.len() == inst.horizon {
        inst.horizon
    } else {
        0
    };

    let mut dg = Vec::new();
    let mut exchange = Vec::new();
    let mut reserve = Vec::new();
    let mut volts = Vec::new();
    let mut carbon = Vec::new();
    let mut prices = Vec::new();
    let mut swaps = Vec::new();
    let mut energy = Vec::new();
    for t in 0..t_all {
        prices.push(format!(
            "{t},{},{},{}",
            u.price[t], u.rprice_up[t], u.rprice_dn[t]
        ));
        let mut em = 0.0;
        for (ii, isl) in inst.islands.iter().enumerate() {
            let mut agg_up = 0.0;
            let mut agg_dn = 0.0;
            for (ni, node) in isl.nodes.iter().enumerate() {
                if let Some(d) = &node.dg {
                    let p = u.p_dg[ii][ni][t];
                    dg.push(format!("{t},{ii},{ni},{p},{},{}", u.r_dg_up[ii][ni][t], u.r_dg_dn[ii][ni][t]));
                    em += d.a_em * p * p + d.b_em * p + d.c_em;
                }
                if node.ess.is_some() {
                    exchange.push(format!(
                        "{t},{ii},{ni},{},{}",
                        l.p_agg[ii][ni][t], l.p_ess[ii][ni][t]
                    ));
                    swaps.push(format!(
                        "{t},{ii},{ni},{},{}",
                        l.n_swap[ii][ni][t], l.kappa[ii][ni][t]
                    ));
                    agg_up += l.r_ess_up[ii][ni][t];
                    agg_dn += l.r_ess_dn[ii][ni][t];
                }
                if !isl.lines.is_empty() {
                    volts.push(format!("{t},{ii},{ni},{},{}", u.voltage[ii][ni][t], u.angle[ii][ni][t]));
                }
            }
            if isl.nodes.iter().any(|n| n.ess.is_some()) {
                reserve.push(format!(
                    "{t},{ii},{agg_up},{agg_dn},{},{}",
                    l.r_agg_up[ii][t], l.r_agg_dn[ii][t]
                ));
            }
        }
        carbon.push(format!("{t},{em}"));
    }
    // stored energy reconstructed through the exact dynamics
    for (ii, isl) in inst.islands.iter().enumerate() {
        for (ni, node) in isl.nodes.iter().enumerate() {
            let Some(ess) = &node.ess else { continue };
            let (mut nf, mut nd, mut ei) = (ess.n_full0, ess.n_depleted0, ess.e_inuse0);
            for t in 0..t_all {
                let step = islandgrid::model::battery_dynamics_step(
                    nf,
                    nd,
                    ei,
                    l.n_swap[ii][ni][t],
                    l.p_ess[ii][ni][t],
                    inst.slot_hours,
                    inst.battery_mwh,
                )
                .map_err(|e| CliError::Input(format!("schedule violates dynamics: {e}")))?;
                let e_ess;
                (nf, nd, ei, e_ess) = step;
                energy.push(format!("{t},{ii},{ni},{nf},{nd},{ei},{e_ess}"));
            }
        }
    }

    csv_write(&out.join("plot_dg.csv"), "slot,island,node,p_dg,r_dg_up,r_dg_dn", &dg)?;
    csv_write(&out.join("plot_exchange.csv"), "slot,island,node,p_agg,p_ess", &exchange)?;
    csv_write(&out.join("plot_prices.csv"), "slot,price,rprice_up,rprice_dn", &prices)?;
    csv_write(
        &out.join("plot_reserve.csv"),
        "slot,island,r_ess_up,r_ess_dn,r_agg_up,r_agg_dn",
        &reserve,
    )?;
    csv_write(&out.join("plot_voltages.csv"), "slot,island,node,voltage,angle", &volts)?;
    csv_write(&out.join("plot_carbon.csv"), "slot,emission_tons", &carbon)?;
    csv_write(&out.join("plot_swaps.csv"), "slot,island,node,n_swap,kappa", &swaps)?;
    csv_write(
        &out.join("plot_energy.csv"),
        "slot,island,node,n_full,n_depleted,e_inuse,e_ess",
        &energy,
    )?;
    println!("plot CSVs written to {}", out.display());
    Ok(())
}

fn cmd_make_default_instance(out: &Path) -> Result<(), CliError> {
    let inst = default_instance();
    let text = serde_json::to_string_pretty(&inst)
        .map_err(|e| CliError::Solver(format!("serialization: {e}")))?;
    fs::write(out, text)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", out.display())))?;
    println!("instance written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve {
            instance,
            mode,
            tol,
            max_iters,
            time_limit_s,
            out,
        } => cmd_solve(&instance, mode, tol, max_iters, time_limit_s, &out),
        Command::Oracle { instance, out } => cmd_oracle(&instance, &out),
        Command::Simulate {
            instance,
            out,
            samples,
            seed,
            no_reserve,
            no_rsa,
        } => cmd_simulate(&instance, &out, samples, seed, no_reserve, no_rsa),
        Command::Compare {
            instance,
            tol,
            max_iters,
            time_limit_s,
            out,
        } => cmd_compare(&instance, tol, max_iters, time_limit_s, &out),
        Command::MakeDefaultInstance { out } => cmd_make_default_instance(&out),
        Command::EmitPlots { instance, out } => cmd_emit_plots(&instance, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
