//! End-to-end acceptance checks. Each test prints one `criterion N: PASS` or
//! `criterion N: FAIL` line before asserting, so
//! `cargo test --test acceptance -- --nocapture` gives a readable report.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use dispatch_core::consensus::{
    consensus_spread_bound, consensus_step, discover_priority_depth, encode_assignment,
    encoded_spread_bound, iteration_budget, l2_spread, ConsensusState,
};
use dispatch_core::edp::run_edp;
use dispatch_core::feasibility::{default_share_cap, run_feasibility, FeasibilityConfig};
use dispatch_core::oracle::{
    brute_force_grid, minimum_shortage, solve_edp_centralized, solve_feasibility_centralized,
    solve_shedding_centralized, GridProblem,
};
use dispatch_core::random::{
    random_connected_graph, random_edp_instance, random_overload_instance, random_priorities,
    random_shed_instance, seeded,
};
use dispatch_core::scenario::{load_scenario_with, Adjustments, ScenarioConfig};
use dispatch_core::shed::{partition_priorities, run_shedding_to_budget, ShedProblem};
use dispatch_core::{
    balance_residual, compute_u_bound, evaluate_loss, metropolis_weights, BusSpec, Error,
    LossModel, StepSchedule, StopRule,
};

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn ieee30(adjust: &Adjustments) -> ScenarioConfig {
    load_scenario_with(&scenario_dir().join("ieee30.scn"), adjust).expect("bundled scenario loads")
}

fn report(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

fn generation(buses: &[BusSpec], x: &[f64]) -> Vec<f64> {
    buses
        .iter()
        .zip(x)
        .filter(|(b, _)| b.is_generator)
        .map(|(_, &v)| v)
        .collect()
}

/// `Υ(x) + Σd − Σx` computed straight from the loss matrix.
fn mismatch(buses: &[BusSpec], loss: &LossModel, x: &[f64]) -> f64 {
    let demand: f64 = buses.iter().map(|b| b.demand).sum();
    evaluate_loss(&loss.b, x).unwrap() + demand - x.iter().sum::<f64>()
}

const DEMAND_ROWS: [f64; 3] = [36.0, 48.0, 55.2];

const CENTRALIZED_TABLE: [[f64; 6]; 3] = [
    [5.0, 6.0836, 8.8734, 7.31, 8.2366, 6.57],
    [5.0, 7.406, 14.844, 11.544, 10.0, 8.0],
    [5.0, 9.4079, 19.5281, 15.0, 10.0, 8.0],
];

const DISTRIBUTED_TABLE: [[f64; 6]; 3] = [
    [5.0, 6.05, 8.82, 7.34, 8.2323, 6.6437],
    [5.0, 7.38, 14.78, 11.64, 10.0, 8.0],
    [5.0, 9.407, 19.5321, 15.0, 10.0, 8.0],
];

fn at_demand(total: f64) -> ScenarioConfig {
    ieee30(&Adjustments {
        demand_scale: Some(total / 48.0),
        ..Adjustments::default()
    })
}

#[test]
fn criterion_1_centralized_dispatch_table() {
    let mut pass = true;
    let mut detail = String::new();
    for (total, expect) in DEMAND_ROWS.iter().zip(&CENTRALIZED_TABLE) {
        let config = at_demand(*total);
        let start = Instant::now();
        let sol =
            solve_edp_centralized(&config.buses, &config.loss, 1e-8).expect("dispatch is feasible");
        let elapsed = start.elapsed();
        let x = sol.primal("x");
        let gen = generation(&config.buses, x);
        let delta = max_abs_diff(&gen, expect);
        let balance = mismatch(&config.buses, &config.loss, x).abs();
        let ok = delta <= 1e-2 && balance <= 1e-2 && elapsed < Duration::from_secs(5);
        pass &= ok;
        detail += &format!(
            "[d={total}: max dev {delta:.4}, balance {balance:.1e}, {:.2}s, x={:?}] ",
            elapsed.as_secs_f64(),
            gen.iter()
                .map(|v| (v * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
    }
    report(1, pass, &detail);
}

#[test]
fn criterion_2_distributed_dispatch_table() {
    let start = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    for (total, expect) in DEMAND_ROWS.iter().zip(&DISTRIBUTED_TABLE) {
        let config = at_demand(*total);
        let mixing = metropolis_weights(&config.graph);
        let u_max = compute_u_bound(&config.loss, &config.buses).u_max;
        let schedule = StepSchedule::HarmonicPower {
            c: 100.0,
            exponent: 0.6,
        };
        let out = run_edp(
            &config.buses,
            &config.loss,
            &mixing,
            u_max,
            &schedule,
            &config.edp.stop,
            1000,
        );
        match out {
            Ok(out) => {
                let gen = generation(&config.buses, &out.x);
                let delta = max_abs_diff(&gen, expect);
                let residual = balance_residual(&config.buses, &config.loss, &out.x)
                    .unwrap()
                    .abs();
                let ok = delta <= 0.1 && residual <= 5e-3 * total;
                pass &= ok;
                detail += &format!(
                    "[d={total}: max dev {delta:.4}, residual {residual:.1e}, {} rounds] ",
                    out.iterations
                );
            }
            Err(e) => {
                pass = false;
                detail += &format!("[d={total}: {e}] ");
            }
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    detail += &format!("total {:.1}s", elapsed.as_secs_f64());
    report(2, pass, &detail);
}

#[test]
fn criterion_3_priority_shedding() {
    let start = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    for y_tot in [1.0, 1.8, 4.0, 6.0] {
        let config = ieee30(&Adjustments {
            y_tot: Some(y_tot),
            ..Adjustments::default()
        });
        let network = &config.shed_network;
        // Members are numbered from bus 7 upwards: 7, 8, 9, 10, then regulars.
        let bus_pos = |bus: usize| network.members.iter().position(|&i| i == bus - 1).unwrap();
        let mixing = metropolis_weights(&network.graph);
        let schedule = StepSchedule::ShiftedHarmonic {
            c: 1000.0,
            shift: 500.0,
        };
        let problem = ShedProblem {
            assignment: &network.assignment,
            params: &network.params,
            mixing: &mixing,
            kappa: 40.0,
            y_tot,
        };
        let out =
            run_shedding_to_budget(problem, &schedule, &config.shedding.stop, 10_000).unwrap();
        let y = |bus: usize| out.y[bus_pos(bus)];
        let regular: f64 = network
            .members
            .iter()
            .enumerate()
            .filter(|(_, &i)| config.priorities[i].is_none())
            .map(|(k, _)| out.y[k])
            .sum();
        let budget = (out.y.iter().sum::<f64>() - y_tot).abs();
        let near = |v: f64, target: f64| (v - target).abs() <= 0.05;
        let ok = budget <= 0.05
            && match y_tot {
                t if t == 1.0 => y(8) <= 0.05 && y(9) <= 0.05 && y(10) <= 0.05 && regular <= 0.05,
                t if t == 1.8 => near(y(7), 1.2) && near(y(8), 0.3) && near(y(9), 0.3),
                t if t == 4.0 => {
                    near(y(7), 1.2) && near(y(8), 1.2) && near(y(9), 1.2) && near(y(10), 0.4)
                }
                _ => [7, 8, 9, 10].iter().all(|&b| near(y(b), 1.2)) && near(regular, 1.2),
            };
        pass &= ok;
        detail += &format!(
            "[y_tot={y_tot}: y7..10=[{:.3}, {:.3}, {:.3}, {:.3}] regular {regular:.3} budget {budget:.3} {} rounds] ",
            y(7),
            y(8),
            y(9),
            y(10),
            out.iterations
        );
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    detail += &format!("total {:.1}s", elapsed.as_secs_f64());
    report(3, pass, &detail);
}

#[test]
fn criterion_4_relaxation_is_tight() {
    let start = Instant::now();
    let mut rng = seeded(4);
    let mut worst_balance = 0.0f64;
    let mut least_lambda = f64::INFINITY;
    let mut failures = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let inst = random_edp_instance(&mut rng, n);
        let sol =
            solve_edp_centralized(&inst.buses, &inst.loss, 1e-8).expect("instance is feasible");
        let x = sol.primal("x");
        let u = sol.primal("u");
        let relaxed: f64 = inst
            .buses
            .iter()
            .zip(x.iter().zip(u))
            .map(|(b, (x, u))| u * u + b.demand - x)
            .sum();
        let active = relaxed
            .abs()
            .max(mismatch(&inst.buses, &inst.loss, x).abs());
        let lambda = sol.dual("lambda")[0];
        worst_balance = worst_balance.max(active);
        least_lambda = least_lambda.min(lambda);
        if active > 1e-4 || lambda < 1e-4 {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && elapsed < Duration::from_secs(60);
    report(
        4,
        pass,
        &format!(
            "200 instances, worst balance {worst_balance:.1e}, least multiplier {least_lambda:.3e}, {failures} failures, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_5_distributed_matches_oracles() {
    let start = Instant::now();
    let mut rng = seeded(5);
    let mut worst_edp = 0.0f64;
    let mut worst_shed = 0.0f64;
    let mut worst_grid = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for case in 0..50 {
        let n = rng.gen_range(2..=4);
        let graph = random_connected_graph(&mut rng, n, 0.3);
        let mixing = metropolis_weights(&graph);

        let inst = random_edp_instance(&mut rng, n);
        let oracle = solve_edp_centralized(&inst.buses, &inst.loss, 1e-8).unwrap();
        let u_max = compute_u_bound(&inst.loss, &inst.buses).u_max;
        // Sparse graphs average only approximately, so the multipliers keep
        // disagreeing in proportion to the step; a small step run to the
        // full budget keeps that below the tolerance.
        let stop = StopRule {
            max_iterations: 1_000_000,
            change_tol: 0.0,
            ..StopRule::default()
        };
        let schedule = StepSchedule::HarmonicPower {
            c: 0.5,
            exponent: 0.6,
        };
        let dist = run_edp(
            &inst.buses,
            &inst.loss,
            &mixing,
            u_max,
            &schedule,
            &stop,
            1000,
        );
        let edp_dev = match &dist {
            Ok(out) => max_abs_diff(&out.x, oracle.primal("x")),
            Err(_) => f64::INFINITY,
        };
        let grid = brute_force_grid(
            &GridProblem::Edp {
                buses: &inst.buses,
                loss: &inst.loss,
            },
            0.05,
        )
        .unwrap();
        let edp_gap = (oracle.objective - grid.objective).abs() - grid.slack_bound;

        let m = rng.gen_range(0..n.min(4));
        let shed = random_shed_instance(&mut rng, n, m);
        let shed_oracle = solve_shedding_centralized(
            &shed.assignment,
            &shed.params,
            shed.kappa,
            shed.y_tot,
            1e-8,
        )
        .unwrap();
        let shed_stop = StopRule {
            max_iterations: 1_000_000,
            ..StopRule::default()
        };
        let problem = ShedProblem {
            assignment: &shed.assignment,
            params: &shed.params,
            mixing: &mixing,
            kappa: shed.kappa,
            y_tot: shed.y_tot,
        };
        let shed_out =
            run_shedding_to_budget(problem, &StepSchedule::shedding_default(), &shed_stop, 1000)
                .unwrap();
        let shed_dev = max_abs_diff(&shed_out.y, shed_oracle.primal("y"));
        let shed_grid = brute_force_grid(
            &GridProblem::Shedding {
                assignment: &shed.assignment,
                params: &shed.params,
                kappa: shed.kappa,
                y_tot: shed.y_tot,
            },
            0.01,
        )
        .unwrap();
        let shed_gap = (shed_oracle.objective - shed_grid.objective).abs() - shed_grid.slack_bound;

        worst_edp = worst_edp.max(edp_dev);
        worst_shed = worst_shed.max(shed_dev);
        worst_grid = worst_grid.max(edp_gap).max(shed_gap);
        if edp_dev > 0.05 || shed_dev > 0.05 || edp_gap > 0.0 || shed_gap > 0.0 {
            failures.push(format!(
                "case {case} (n={n}, m={m}): edp {edp_dev:.3}, shed {shed_dev:.3}"
            ));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    report(
        5,
        pass,
        &format!(
            "50 instances, worst dispatch dev {worst_edp:.4}, worst shedding dev {worst_shed:.4}, \
             worst oracle-grid excess {worst_grid:.2e}, {:.1}s {failures:?}",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_ladder_depth_decoding() {
    let start = Instant::now();
    let mut rng = seeded(6);
    let mut failures = Vec::new();
    let mut bound_checks = 0u64;
    for case in 0..100 {
        let n = rng.gen_range(2..=50);
        let m = rng.gen_range(0..n.min(6));
        let extra = rng.gen_range(0.0..0.3);
        let graph = random_connected_graph(&mut rng, n, extra);
        let assignment = partition_priorities(&random_priorities(&mut rng, n, m)).unwrap();
        match discover_priority_depth(&graph, &assignment, 0.4, 1000) {
            Ok(d) if d.m == m => {}
            Ok(d) => failures.push(format!("case {case}: decoded {} for {m}", d.m)),
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
        // Distance to the average after every round against the a-priori bound.
        let initial = encode_assignment(&assignment).unwrap();
        let spread0 = l2_spread(&initial);
        let rounds = iteration_budget(n, encoded_spread_bound(n), 0.4);
        let mut state = ConsensusState::new(initial);
        for k in 1..=rounds {
            state = consensus_step(&state, &graph, n);
            bound_checks += 1;
            if l2_spread(&state.theta) > consensus_spread_bound(n, k, spread0) + 1e-9 {
                failures.push(format!("case {case}: bound violated at round {k}"));
                break;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60);
    report(
        6,
        pass,
        &format!(
            "100 graphs, {bound_checks} bound checks, {:.1}s {failures:?}",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_feasibility_restoration() {
    let start = Instant::now();
    let mut rng = seeded(7);
    let mut failures = Vec::new();
    let mut worst_spread = 0.0f64;
    let mut worst_residual = 0.0f64;
    for case in 0..20 {
        let n = rng.gen_range(2..=5);
        let graph = random_connected_graph(&mut rng, n, 0.3);
        let mixing = metropolis_weights(&graph);
        let inst = random_overload_instance(&mut rng, n);
        let (least, _) = minimum_shortage(&inst.buses, &inst.loss);
        let s_cap = default_share_cap(&inst.buses);

        // Shortage totals of the relaxed problem as the penalty shrinks.
        let mut totals = Vec::new();
        for tau in [1e-2, 1e-3, 1e-4] {
            let sol =
                solve_feasibility_centralized(&inst.buses, &inst.loss, tau, s_cap, 1e-9).unwrap();
            totals.push(sol.primal("s").iter().sum::<f64>());
        }
        let monotone = totals.windows(2).all(|w| w[1] <= w[0] + 1e-6)
            && totals.iter().all(|&t| t >= least - 1e-6);

        let u_max = compute_u_bound(&inst.loss, &inst.buses).u_max;
        let config = FeasibilityConfig {
            tau: 1e-2,
            s_cap,
            schedule: StepSchedule::HarmonicPower {
                c: 20.0,
                exponent: 0.9,
            },
            stop: StopRule {
                max_iterations: 6_000_000,
                residual_tol: 1e-4,
                change_tol: 0.0,
                ..StopRule::default()
            },
        };
        let shares = match run_feasibility(
            &inst.buses,
            &inst.loss,
            &mixing,
            vec![u_max; n],
            &config,
            1000,
        ) {
            Ok(out) => out.s,
            Err(e) => {
                failures.push(format!("case {case}: shortage run {e}"));
                continue;
            }
        };
        let mean = shares.iter().sum::<f64>() / n as f64;
        let spread = shares.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            - shares.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        worst_spread = worst_spread.max(spread / mean.max(1.0));

        let reduced: Vec<BusSpec> = inst
            .buses
            .iter()
            .zip(&shares)
            .map(|(b, s)| b.clone().with_demand(b.demand - s))
            .collect();
        // Best balance any dispatch inside the boxes can reach after shedding.
        let residual = match solve_edp_centralized(&reduced, &inst.loss, 1e-8) {
            Ok(sol) => mismatch(&reduced, &inst.loss, sol.primal("x")).abs(),
            Err(Error::Infeasible(_)) => minimum_shortage(&reduced, &inst.loss).0,
            Err(e) => {
                failures.push(format!("case {case}: post-shed oracle {e}"));
                continue;
            }
        };
        worst_residual = worst_residual.max(residual);
        if !monotone || spread > 1e-3 * mean.max(1.0) || residual > 5e-3 {
            failures.push(format!(
                "case {case}: totals {totals:?} vs {least:.4}, spread {spread:.1e}, residual {residual:.1e}"
            ));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    report(
        7,
        pass,
        &format!(
            "20 overloads, worst relative share spread {worst_spread:.1e}, worst post-shed residual {worst_residual:.1e}, \
             {:.1}s {failures:?}",
            elapsed.as_secs_f64()
        ),
    );
}

fn run_cli(scenario: &Path, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let status = Command::new(env!("CARGO_BIN_EXE_dispatch"))
        .arg("run")
        .arg("--scenario")
        .arg(scenario)
        .arg("--trace")
        .arg(dir.join("run.csv"))
        .arg("--summary")
        .arg(dir.join("summary.toml"))
        .status()
        .expect("binary runs");
    assert!(status.code().is_some(), "terminated by a signal");
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_8_runs_are_reproducible() {
    let mut scenarios: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    scenarios.sort();
    let mut pass = !scenarios.is_empty();
    let mut detail = String::new();
    for scenario in &scenarios {
        let first = tempfile::tempdir().unwrap();
        let second = tempfile::tempdir().unwrap();
        let a = run_cli(scenario, first.path());
        let b = run_cli(scenario, second.path());
        let same = !a.is_empty() && a == b;
        pass &= same;
        detail += &format!(
            "[{}: {} files {}] ",
            scenario.file_name().unwrap().to_string_lossy(),
            a.len(),
            if same { "identical" } else { "differ" }
        );
    }
    report(8, pass, &detail);
}
