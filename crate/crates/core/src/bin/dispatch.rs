use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dispatch_core::algorithm::{emit_stage_traces, emit_summary, run_algorithm1, RunOptions};
use dispatch_core::consensus::discover_priority_depth;
use dispatch_core::edp::{run_edp, DualOutcome};
use dispatch_core::feasibility::{default_share_cap, run_feasibility, FeasibilityConfig};
use dispatch_core::oracle::{solve_edp_centralized, solve_shedding_centralized, OracleSolution};
use dispatch_core::scenario::{load_scenario_with, random_scenario, Adjustments, ScenarioConfig};
use dispatch_core::shed::{run_shedding, ShedProblem};
use dispatch_core::{compute_u_bound, emit_trace, metropolis_weights, Error, Result};

/// Distributed economic dispatch and priority load shedding simulator.
#[derive(Parser)]
#[command(name = "dispatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Scenario file, or `random` to draw one from `--seed`.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// CSV trace output; the full pipeline writes one file per stage.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Summary output (TOML); printed to stdout when omitted.
    #[arg(long, global = true)]
    summary: Option<PathBuf>,
    /// Iteration budget for every iterative stage.
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Relative residual tolerance for every iterative stage.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Seed for `--scenario random`.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Number of buses for `--scenario random`.
    #[arg(long, global = true, default_value_t = 5)]
    buses: usize,
    /// Shedding budget override.
    #[arg(long, global = true)]
    y_tot: Option<f64>,
    /// Multiplies every demand in the scenario.
    #[arg(long, global = true)]
    demand_scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: ladder depth, shortage, then dispatch and shedding.
    Run {
        /// Also solve each stage centrally and report the differences.
        #[arg(long)]
        oracle: bool,
    },
    /// Distributed dispatch on the scenario's demands.
    Edp,
    /// Distributed shedding of the scenario's budget.
    Shed,
    /// Ladder-depth discovery by consensus.
    Consensus,
    /// Distributed shortage estimation.
    Feasibility,
    /// Centralized reference solutions.
    Oracle,
    /// Load and check the scenario without solving it.
    Validate,
}

fn load(common: &Common) -> Result<ScenarioConfig> {
    let adjust = Adjustments {
        demand_scale: common.demand_scale,
        y_tot: common.y_tot,
        max_iterations: common.max_iters,
        residual_tol: common.tol,
    };
    match common.scenario.as_deref() {
        Some(p) if p == Path::new("random") => {
            let mut config = random_scenario(common.seed, common.buses)?;
            for s in [
                &mut config.edp,
                &mut config.shedding,
                &mut config.feasibility,
            ] {
                if let Some(k) = adjust.max_iterations {
                    s.stop.max_iterations = k;
                }
                if let Some(t) = adjust.residual_tol {
                    s.stop.residual_tol = t;
                }
            }
            if let Some(y) = adjust.y_tot {
                config.y_tot = y;
            }
            Ok(config)
        }
        Some(p) => load_scenario_with(p, &adjust),
        None => Err(Error::InvalidParameter("--scenario is required".into())),
    }
}

fn write_report<T: Serialize>(report: &T, path: Option<&Path>) -> Result<()> {
    let text = toml::to_string(report).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct DualReport {
    iterations: usize,
    converged: bool,
    threshold: f64,
    balance_residual: f64,
    relaxed_residual: f64,
    lambda_spread: f64,
    xi_spread: f64,
    x: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    s: Vec<f64>,
}

impl DualReport {
    fn new(out: &DualOutcome, with_shares: bool) -> Self {
        DualReport {
            iterations: out.iterations,
            converged: out.stopped_early,
            threshold: out.threshold,
            balance_residual: out.balance_residual,
            relaxed_residual: out.relaxed_residual,
            lambda_spread: out.lambda_spread,
            xi_spread: out.xi_spread,
            x: out.x.clone(),
            s: if with_shares {
                out.s.clone()
            } else {
                Vec::new()
            },
        }
    }
}

#[derive(Serialize)]
struct OracleReport {
    objective: f64,
    duality_gap: f64,
    primal: std::collections::BTreeMap<String, Vec<f64>>,
    dual: std::collections::BTreeMap<String, Vec<f64>>,
    kkt_residuals: std::collections::BTreeMap<String, f64>,
}

impl From<OracleSolution> for OracleReport {
    fn from(s: OracleSolution) -> Self {
        OracleReport {
            objective: s.objective,
            duality_gap: s.duality_gap(),
            primal: s.primal,
            dual: s.dual,
            kkt_residuals: s.kkt_residuals,
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let config = load(common)?;
    let summary_path = common
        .summary
        .clone()
        .or_else(|| config.summary_path.clone());
    let trace_path = common.trace.clone().or_else(|| config.trace_path.clone());
    let mixing = metropolis_weights(&config.graph);
    let n = config.buses.len();
    match cli.command {
        Command::Run { oracle } => {
            let out = run_algorithm1(
                &config,
                &RunOptions {
                    with_oracle: oracle,
                },
            )?;
            if let Some(p) = &trace_path {
                emit_stage_traces(&out.traces, p)?;
            }
            match &summary_path {
                Some(p) => emit_summary(&out.summary, p)?,
                None => print!("{}", out.summary.to_toml()),
            }
            out.summary.check(&out.traces)
        }
        Command::Edp => {
            let u_max = compute_u_bound(&config.loss, &config.buses).u_max;
            let result = run_edp(
                &config.buses,
                &config.loss,
                &mixing,
                u_max,
                &config.edp.schedule,
                &config.edp.stop,
                config.trace_stride,
            );
            finish_dual(
                result,
                trace_path.as_deref(),
                summary_path.as_deref(),
                false,
            )
        }
        Command::Feasibility => {
            let u_max = compute_u_bound(&config.loss, &config.buses).u_max;
            let cfg = FeasibilityConfig {
                tau: config.tau,
                s_cap: config
                    .s_cap
                    .unwrap_or_else(|| default_share_cap(&config.buses)),
                schedule: config.feasibility.schedule,
                stop: config.feasibility.stop,
            };
            let result = run_feasibility(
                &config.buses,
                &config.loss,
                &mixing,
                vec![u_max; n],
                &cfg,
                config.trace_stride,
            );
            finish_dual(result, trace_path.as_deref(), summary_path.as_deref(), true)
        }
        Command::Shed => {
            let network = &config.shed_network;
            let shed_mixing = metropolis_weights(&network.graph);
            let problem = ShedProblem {
                assignment: &network.assignment,
                params: &network.params,
                mixing: &shed_mixing,
                kappa: config.kappa,
                y_tot: config.y_tot,
            };
            let out = run_shedding(
                problem,
                &config.shedding.schedule,
                &config.shedding.stop,
                config.trace_stride,
            )
            .map_err(|e| write_failed_trace(e, trace_path.as_deref()))?;
            if let Some(p) = &trace_path {
                emit_trace(&out.trace, p)?;
            }
            #[derive(Serialize)]
            struct ShedReport {
                iterations: usize,
                converged: bool,
                y_tot: f64,
                budget_residual: f64,
                constraint_violation: f64,
                y: Vec<f64>,
                z: Vec<f64>,
            }
            write_report(
                &ShedReport {
                    iterations: out.iterations,
                    converged: out.stopped_early,
                    y_tot: config.y_tot,
                    budget_residual: out.y.iter().sum::<f64>() - config.y_tot,
                    constraint_violation: out.constraint_violation,
                    y: network.scatter(&out.y, n),
                    z: network.scatter(&out.z, n),
                },
                summary_path.as_deref(),
            )
        }
        Command::Consensus => {
            let d = discover_priority_depth(
                &config.graph,
                &config.assignment,
                config.epsilon,
                config.trace_stride,
            )?;
            if let Some(p) = &trace_path {
                emit_trace(&d.trace, p)?;
            }
            #[derive(Serialize)]
            struct ConsensusReport {
                m: usize,
                rounds: usize,
                theta: Vec<f64>,
            }
            write_report(
                &ConsensusReport {
                    m: d.m,
                    rounds: d.rounds,
                    theta: d.theta,
                },
                summary_path.as_deref(),
            )
        }
        Command::Oracle => {
            let tol = common.tol.unwrap_or(1e-6);
            let network = &config.shed_network;
            #[derive(Serialize)]
            struct Both {
                dispatch: OracleReport,
                shedding: OracleReport,
            }
            let dispatch = solve_edp_centralized(&config.buses, &config.loss, tol)?.into();
            let shedding = solve_shedding_centralized(
                &network.assignment,
                &network.params,
                config.kappa,
                config.y_tot,
                tol,
            )?
            .into();
            write_report(&Both { dispatch, shedding }, summary_path.as_deref())
        }
        Command::Validate => {
            #[derive(Serialize)]
            struct Finding {
                assumption: String,
                holds: bool,
                overridden: bool,
                detail: String,
            }
            #[derive(Serialize)]
            struct Report {
                scenario: String,
                buses: usize,
                generators: usize,
                levels: usize,
                findings: Vec<Finding>,
            }
            let report = Report {
                scenario: config.name.clone(),
                buses: n,
                generators: config.buses.iter().filter(|b| b.is_generator).count(),
                levels: config.assignment.m(),
                findings: config
                    .findings
                    .iter()
                    .map(|f| Finding {
                        assumption: f.assumption.clone(),
                        holds: f.holds,
                        overridden: config.overrides.contains(&f.assumption),
                        detail: f.detail.clone(),
                    })
                    .collect(),
            };
            write_report(&report, summary_path.as_deref())
        }
    }
}

/// Keeps the trace of a run that missed its threshold.
fn write_failed_trace(err: Error, path: Option<&Path>) -> Error {
    if let (Error::NotConverged(nc), Some(p)) = (&err, path) {
        if let Err(io) = emit_trace(&nc.trace, p) {
            return io;
        }
    }
    err
}

fn finish_dual(
    result: Result<DualOutcome>,
    trace: Option<&Path>,
    summary: Option<&Path>,
    shares: bool,
) -> Result<()> {
    let out = result.map_err(|e| write_failed_trace(e, trace))?;
    if let Some(p) = trace {
        emit_trace(&out.trace, p)?;
    }
    write_report(&DualReport::new(&out, shares), summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
