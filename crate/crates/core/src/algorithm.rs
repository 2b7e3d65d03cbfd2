//! The staged pipeline: discover the priority depth, estimate the shortage,
//! then dispatch generation and shed load on a shared round clock.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::consensus::{average_consensus_scaled, discover_priority_depth};
use crate::edp::{DualOutcome, DualProblem, DualRun, LocalProblem};
use crate::error::{Error, NotConverged, Result, Stage};
use crate::feasibility::{default_share_cap, run_feasibility_to_budget, FeasibilityConfig};
use crate::graph::metropolis_weights;
use crate::oracle::{
    solve_edp_centralized, solve_feasibility_centralized, solve_shedding_centralized,
};
use crate::power::{balance_residual, total_cost, BusSpec};
use crate::scenario::ScenarioConfig;
use crate::shed::{ShedOutcome, ShedProblem, ShedRun};
use crate::trace::{emit_trace, IterationTrace};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Also solve every stage centrally and report the differences.
    pub with_oracle: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FindingReport {
    pub assumption: String,
    pub holds: bool,
    pub overridden: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrioritySummary {
    pub m: usize,
    pub rounds: usize,
    pub consensus_min: f64,
    pub consensus_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossBoundSummary {
    pub exact: f64,
    pub estimate_min: f64,
    pub estimate_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShortageSummary {
    pub iterations: usize,
    pub converged: bool,
    pub threshold: f64,
    pub total: f64,
    pub share_spread: f64,
    pub balance_residual: f64,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DispatchSummary {
    pub iterations: usize,
    pub converged: bool,
    pub threshold: f64,
    pub demand: f64,
    pub balance_residual: f64,
    pub relaxed_residual: f64,
    pub cost: f64,
    pub lambda_mean: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SheddingSummary {
    pub iterations: usize,
    pub converged: bool,
    pub threshold: f64,
    pub y_tot: f64,
    pub budget_residual: f64,
    pub constraint_violation: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleDeltas {
    pub shortage_total: f64,
    pub shortage_delta: f64,
    pub dispatch_cost: f64,
    pub dispatch_max_delta: f64,
    pub shedding_max_delta: f64,
}

/// Final report of a pipeline run. Every residual is recomputed from the
/// final iterates.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub buses: usize,
    pub assumptions: Vec<FindingReport>,
    pub priority: PrioritySummary,
    pub loss_bound: LossBoundSummary,
    pub shortage: ShortageSummary,
    pub dispatch: DispatchSummary,
    pub shedding: SheddingSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleDeltas>,
}

impl RunSummary {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary fields are plain data")
    }

    /// First stage, in pipeline order, that missed its threshold.
    pub fn check(&self, traces: &[IterationTrace]) -> Result<()> {
        let trace_of = |stage| {
            traces
                .iter()
                .find(|t| t.stage == stage)
                .cloned()
                .unwrap_or_else(|| IterationTrace::new(stage, Vec::new(), 1))
        };
        let misses = [
            (
                Stage::Feasibility,
                self.shortage.iterations,
                self.shortage.balance_residual,
                self.shortage.threshold,
            ),
            (
                Stage::Edp,
                self.dispatch.iterations,
                self.dispatch.balance_residual,
                self.dispatch.threshold,
            ),
            (
                Stage::Shedding,
                self.shedding.iterations,
                self.shedding.constraint_violation,
                self.shedding.threshold,
            ),
        ];
        for (stage, iterations, residual, threshold) in misses {
            if !(residual.abs() <= threshold) {
                return Err(Error::NotConverged(Box::new(NotConverged {
                    stage,
                    iterations,
                    residual,
                    threshold,
                    trace: trace_of(stage),
                }))
                .in_stage(stage));
            }
        }
        Ok(())
    }
}

pub fn emit_summary(summary: &RunSummary, path: &Path) -> Result<()> {
    std::fs::write(path, summary.to_toml())?;
    Ok(())
}

/// `run.csv` becomes `run-edp.csv` and so on.
pub fn stage_trace_path(base: &Path, stage: Stage) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let ext = base.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    base.with_file_name(format!("{stem}-{stage}.{ext}"))
}

pub fn emit_stage_traces(traces: &[IterationTrace], base: &Path) -> Result<()> {
    for t in traces {
        emit_trace(t, &stage_trace_path(base, t.stage))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    /// Consensus, feasibility, dispatch and shedding, in that order.
    pub traces: Vec<IterationTrace>,
    pub shortage: DualOutcome,
    pub dispatch: DualOutcome,
    pub shedding: ShedOutcome,
    /// Demands after subtracting each agent's share.
    pub reduced_buses: Vec<BusSpec>,
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Per-agent bounds on `|u_i|`: each agent's consensus estimate of the sum
/// of `r_i^max·x_i^max`, padded by the consensus accuracy.
pub fn distributed_u_bounds(config: &ScenarioConfig) -> Result<(Vec<f64>, f64)> {
    let n = config.buses.len();
    let terms: Vec<f64> = config
        .buses
        .iter()
        .map(|b| config.loss.r_max(b.index) * b.x_max)
        .collect();
    let exact: f64 = terms.iter().sum();
    let estimates =
        average_consensus_scaled(&config.graph, &terms, n, config.sum_tolerance / n as f64)?;
    Ok((
        estimates.iter().map(|e| e + config.sum_tolerance).collect(),
        exact,
    ))
}

pub fn run_algorithm1(config: &ScenarioConfig, options: &RunOptions) -> Result<RunOutput> {
    let n = config.buses.len();
    let stride = config.trace_stride;
    let mixing = metropolis_weights(&config.graph);

    // Stage 1a: every agent learns the ladder depth.
    let discovery =
        discover_priority_depth(&config.graph, &config.assignment, config.epsilon, stride)
            .map_err(|e| e.in_stage(Stage::Consensus))?;
    if discovery.m != config.assignment.m() {
        return Err(Error::InvalidParameter(format!(
            "decoded ladder depth {} but the scenario has {}",
            discovery.m,
            config.assignment.m()
        ))
        .in_stage(Stage::Consensus));
    }
    let (u_bounds, u_exact) =
        distributed_u_bounds(config).map_err(|e| e.in_stage(Stage::Consensus))?;
    let (u_lo, u_hi) = min_max(&u_bounds);

    // Stage 1b: shortage shares.
    let s_cap = config
        .s_cap
        .unwrap_or_else(|| default_share_cap(&config.buses));
    let feas_config = FeasibilityConfig {
        tau: config.tau,
        s_cap,
        schedule: config.feasibility.schedule,
        stop: config.feasibility.stop,
    };
    let shortage = run_feasibility_to_budget(
        &config.buses,
        &config.loss,
        &mixing,
        u_bounds.clone(),
        &feas_config,
        stride,
    )
    .map_err(|e| e.in_stage(Stage::Feasibility))?;

    // Stage 2: shed each agent's share from its demand, then run both
    // problems side by side.
    let reduced: Vec<BusSpec> = config
        .buses
        .iter()
        .zip(&shortage.s)
        .map(|(b, s)| b.clone().with_demand(b.demand - s))
        .collect();
    let y_tot: f64 = shortage.s.iter().sum();
    let mut dispatch_run = DualRun::new(
        DualProblem {
            buses: &reduced,
            loss: &config.loss,
            mixing: &mixing,
            u_max: u_bounds,
            local: LocalProblem::Dispatch,
        },
        &config.edp.schedule,
        &config.edp.stop,
        Stage::Edp,
        stride,
    )
    .map_err(|e| e.in_stage(Stage::Edp))?;
    let network = &config.shed_network;
    let shed_mixing = metropolis_weights(&network.graph);
    let mut shed_run = ShedRun::new(
        ShedProblem {
            assignment: &network.assignment,
            params: &network.params,
            mixing: &shed_mixing,
            kappa: config.kappa,
            y_tot,
        },
        &config.shedding.schedule,
        &config.shedding.stop,
        stride,
    )
    .map_err(|e| e.in_stage(Stage::Shedding))?;
    loop {
        let a = dispatch_run.advance().map_err(|e| e.in_stage(Stage::Edp))?;
        let b = shed_run
            .advance()
            .map_err(|e| e.in_stage(Stage::Shedding))?;
        if !a && !b {
            break;
        }
    }
    let dispatch = dispatch_run.finish()?;
    let shedding = shed_run.finish()?;

    let oracle = if options.with_oracle {
        let tol = 1e-6;
        let short =
            solve_feasibility_centralized(&config.buses, &config.loss, config.tau, s_cap, tol)
                .map_err(|e| e.in_stage(Stage::Oracle))?;
        let short_total: f64 = short.primal("s").iter().sum();
        let edp = solve_edp_centralized(&reduced, &config.loss, tol)
            .map_err(|e| e.in_stage(Stage::Oracle))?;
        let shed = solve_shedding_centralized(
            &network.assignment,
            &network.params,
            config.kappa,
            y_tot,
            tol,
        )
        .map_err(|e| e.in_stage(Stage::Oracle))?;
        let max_delta = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
        };
        Some(OracleDeltas {
            shortage_total: short_total,
            shortage_delta: y_tot - short_total,
            dispatch_cost: edp.objective,
            dispatch_max_delta: max_delta(&dispatch.x, edp.primal("x")),
            shedding_max_delta: max_delta(&shedding.y, shed.primal("y")),
        })
    } else {
        None
    };

    let (s_lo, s_hi) = min_max(&shortage.s);
    let (t_lo, t_hi) = min_max(&discovery.theta);
    let original_demand: f64 = config.buses.iter().map(|b| b.demand).sum();
    let shortage_balance = balance_residual(&config.buses, &config.loss, &shortage.x)? - y_tot;
    let summary = RunSummary {
        scenario: config.name.clone(),
        buses: n,
        assumptions: config
            .findings
            .iter()
            .map(|f| FindingReport {
                assumption: f.assumption.clone(),
                holds: f.holds,
                overridden: config.overrides.contains(&f.assumption),
                detail: f.detail.clone(),
            })
            .collect(),
        priority: PrioritySummary {
            m: discovery.m,
            rounds: discovery.rounds,
            consensus_min: t_lo,
            consensus_max: t_hi,
        },
        loss_bound: LossBoundSummary {
            exact: u_exact,
            estimate_min: u_lo,
            estimate_max: u_hi,
        },
        shortage: ShortageSummary {
            iterations: shortage.iterations,
            converged: shortage.stopped_early,
            threshold: shortage.threshold,
            total: y_tot,
            share_spread: s_hi - s_lo,
            balance_residual: shortage_balance,
            s: shortage.s.clone(),
        },
        dispatch: DispatchSummary {
            iterations: dispatch.iterations,
            converged: dispatch.stopped_early,
            threshold: dispatch.threshold,
            demand: original_demand - y_tot,
            balance_residual: balance_residual(&reduced, &config.loss, &dispatch.x)?,
            relaxed_residual: dispatch
                .u
                .iter()
                .zip(&reduced)
                .zip(&dispatch.x)
                .map(|((u, b), x)| u * u + b.demand - x)
                .sum(),
            cost: total_cost(&reduced, &dispatch.x),
            lambda_mean: dispatch.lambda.iter().sum::<f64>() / n as f64,
            x: dispatch.x.clone(),
        },
        shedding: SheddingSummary {
            iterations: shedding.iterations,
            converged: shedding.stopped_early,
            threshold: shedding.threshold,
            y_tot,
            budget_residual: shedding.y.iter().sum::<f64>() - y_tot,
            constraint_violation: shedding.constraint_violation,
            y: network.scatter(&shedding.y, n),
            z: network.scatter(&shedding.z, n),
        },
        oracle,
    };
    let traces = vec![
        discovery.trace,
        shortage.trace.clone(),
        dispatch.trace.clone(),
        shedding.trace.clone(),
    ];
    Ok(RunOutput {
        summary,
        traces,
        shortage,
        dispatch,
        shedding,
        reduced_buses: reduced,
    })
}
