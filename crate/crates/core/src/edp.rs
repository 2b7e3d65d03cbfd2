//! Distributed dual subgradient solver for the loss-aware dispatch problem.
//!
//! Each agent keeps an estimate of the balance multiplier `λ` and of the
//! coupling multipliers `ξ` (one per bus, tying `u = Rx`). A round mixes
//! the estimates with neighbors, minimizes the local Lagrangian in closed
//! form, and takes a projected subgradient step.

use crate::error::{Error, NotConverged, Result, Stage};
use crate::graph::MixingMatrix;
use crate::power::{BusSpec, LossModel};
use crate::step::{ChangeMonitor, StepSchedule, StopRule};
use crate::trace::IterationTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct EdpAgentState {
    pub index: usize,
    pub x: f64,
    pub u: f64,
    pub lambda: f64,
    pub xi: Vec<f64>,
    pub v: f64,
    pub w: Vec<f64>,
    pub r_col: Vec<f64>,
    pub r_max: f64,
    pub bus: BusSpec,
}

impl EdpAgentState {
    pub fn new(index: usize, bus: BusSpec, model: &LossModel) -> Self {
        let n = model.n();
        EdpAgentState {
            index,
            x: 0.0,
            u: 0.0,
            lambda: 0.0,
            xi: vec![0.0; n],
            v: 0.0,
            w: vec![0.0; n],
            r_col: model.r.column(index).iter().copied().collect(),
            r_max: model.r_max(index),
            bus,
        }
    }
}

/// Minimizer of `−v·x + ⟨w, r_col⟩·x + cost(x)` over the generator box.
fn local_x(bus: &BusSpec, linear: f64, curvature: f64) -> f64 {
    if !bus.is_generator {
        return 0.0;
    }
    (linear / curvature).clamp(bus.x_min, bus.x_max)
}

/// Minimizer of `v·u² − w_i·u` over `[−u_max, u_max]`.
pub(crate) fn local_u(v: f64, w_i: f64, u_max: f64) -> f64 {
    if v > 0.0 {
        (w_i / (2.0 * v)).clamp(-u_max, u_max)
    } else if w_i == 0.0 {
        0.0
    } else {
        u_max * w_i.signum()
    }
}

pub(crate) fn coupling(w: &[f64], r_col: &[f64]) -> f64 {
    w.iter().zip(r_col).map(|(a, b)| a * b).sum()
}

pub fn edp_primal_step(state: &EdpAgentState, v: f64, w: &[f64], u_max: f64) -> (f64, f64) {
    let bus = &state.bus;
    let x = local_x(
        bus,
        v - bus.cost_b - coupling(w, &state.r_col),
        2.0 * bus.cost_a,
    );
    (x, local_u(v, w[state.index], u_max))
}

/// `(u² + d − x, g)` with `g_j = r_ji·x` and the `−u` correction on `g_i`.
pub fn edp_subgradient(state: &EdpAgentState, x: f64, u: f64) -> (f64, Vec<f64>) {
    let mut g: Vec<f64> = state.r_col.iter().map(|r| r * x).collect();
    g[state.index] -= u;
    (u * u + state.bus.demand - x, g)
}

pub fn edp_dual_step(
    v: f64,
    w: &[f64],
    balance_term: f64,
    g: &[f64],
    alpha: f64,
) -> (f64, Vec<f64>) {
    let lambda = (v + alpha * balance_term).max(0.0);
    let xi = w.iter().zip(g).map(|(wj, gj)| wj + alpha * gj).collect();
    (lambda, xi)
}

pub use crate::power::balance_residual;

/// Which local problem the agents solve each round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalProblem {
    /// Minimize generation cost.
    Dispatch,
    /// Minimize `s² + τx²` with a nonnegative shortage `s ≤ s_cap` entering
    /// the balance term.
    Shortage { tau: f64, s_cap: f64 },
}

/// Static data for one distributed dual run.
#[derive(Debug, Clone)]
pub struct DualProblem<'a> {
    pub buses: &'a [BusSpec],
    pub loss: &'a LossModel,
    pub mixing: &'a MixingMatrix,
    /// Each agent's own bound on `|u_i|`.
    pub u_max: Vec<f64>,
    pub local: LocalProblem,
}

/// Lockstep simulation of all agents, stored as flat buffers.
#[derive(Debug, Clone)]
pub struct DualEngine<'a> {
    problem: DualProblem<'a>,
    n: usize,
    pub k: usize,
    pub lambda: Vec<f64>,
    /// Row `i` holds agent `i`'s estimate of the coupling multipliers.
    pub xi: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub balance: Vec<f64>,
    r_cols: Vec<f64>,
}

impl<'a> DualEngine<'a> {
    pub fn new(problem: DualProblem<'a>) -> Result<Self> {
        let n = problem.buses.len();
        for m in [problem.loss.n(), problem.mixing.n(), problem.u_max.len()] {
            if m != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: m,
                });
            }
        }
        let mut r_cols = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                r_cols[i * n + j] = problem.loss.r[(j, i)];
            }
        }
        Ok(DualEngine {
            problem,
            n,
            k: 0,
            lambda: vec![0.0; n],
            xi: vec![0.0; n * n],
            v: vec![0.0; n],
            w: vec![0.0; n * n],
            x: vec![0.0; n],
            u: vec![0.0; n],
            s: vec![0.0; n],
            balance: vec![0.0; n],
            r_cols,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn problem(&self) -> &DualProblem<'a> {
        &self.problem
    }

    pub fn r_col(&self, i: usize) -> &[f64] {
        &self.r_cols[i * self.n..(i + 1) * self.n]
    }

    /// One round: mix, local minimization, subgradient step with `alpha`.
    pub fn step(&mut self, alpha: f64) {
        let n = self.n;
        let mixing = self.problem.mixing;
        self.v = mixing.mix_scalars(&self.lambda);
        mixing.mix_flat(&self.xi, n, &mut self.w);
        for i in 0..n {
            let u_max = self.problem.u_max[i];
            let bus = &self.problem.buses[i];
            let v = self.v[i];
            let w = &self.w[i * n..(i + 1) * n];
            let r_col = &self.r_cols[i * n..(i + 1) * n];
            let c = coupling(w, r_col);
            let (x, s) = match self.problem.local {
                LocalProblem::Dispatch => (local_x(bus, v - bus.cost_b - c, 2.0 * bus.cost_a), 0.0),
                LocalProblem::Shortage { tau, s_cap } => {
                    (local_x(bus, v - c, 2.0 * tau), (v / 2.0).clamp(0.0, s_cap))
                }
            };
            let u = local_u(v, w[i], u_max);
            let bal = u * u + bus.demand - x - s;
            self.x[i] = x;
            self.u[i] = u;
            self.s[i] = s;
            self.balance[i] = bal;
            self.lambda[i] = (v + alpha * bal).max(0.0);
            let xi = &mut self.xi[i * n..(i + 1) * n];
            for j in 0..n {
                xi[j] = w[j] + alpha * r_col[j] * x;
            }
            xi[i] -= alpha * u;
        }
        self.k += 1;
    }

    /// `Σ_i (u_i² + d_i − x_i − s_i)` at the latest primal iterate.
    pub fn relaxed_residual(&self) -> f64 {
        self.balance.iter().sum()
    }

    /// `Υ(x) + Σ(d − s) − Σx`, recomputed from the primal iterate.
    pub fn balance_residual(&self) -> f64 {
        let loss = self.problem.loss.evaluate(&self.x).unwrap_or(f64::NAN);
        let demand: f64 = self.problem.buses.iter().map(|b| b.demand).sum();
        loss + demand - self.s.iter().sum::<f64>() - self.x.iter().sum::<f64>()
    }

    /// Largest disagreement among the mixed multiplier estimates `(v, w)`.
    pub fn multiplier_spread(&self) -> (f64, f64) {
        (spread(&self.v), block_spread(&self.w, self.n))
    }

    /// Largest disagreement among the raw estimates `(λ, ξ)`.
    pub fn raw_multiplier_spread(&self) -> (f64, f64) {
        (spread(&self.lambda), block_spread(&self.xi, self.n))
    }

    pub fn agent_state(&self, i: usize) -> EdpAgentState {
        let n = self.n;
        EdpAgentState {
            index: i,
            x: self.x[i],
            u: self.u[i],
            lambda: self.lambda[i],
            xi: self.xi[i * n..(i + 1) * n].to_vec(),
            v: self.v[i],
            w: self.w[i * n..(i + 1) * n].to_vec(),
            r_col: self.r_col(i).to_vec(),
            r_max: self.problem.loss.r_max(i),
            bus: self.problem.buses[i].clone(),
        }
    }

    fn primal_snapshot(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(3 * self.n);
        p.extend_from_slice(&self.x);
        p.extend_from_slice(&self.u);
        if matches!(self.problem.local, LocalProblem::Shortage { .. }) {
            p.extend_from_slice(&self.s);
        }
        p
    }

    fn trace_columns(&self) -> Vec<String> {
        let n = self.n;
        let mut cols: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        cols.extend((0..n).map(|i| format!("u{i}")));
        cols.extend((0..n).map(|i| format!("lambda{i}")));
        if matches!(self.problem.local, LocalProblem::Shortage { .. }) {
            cols.extend((0..n).map(|i| format!("s{i}")));
        }
        cols.extend(["residual", "lambda_spread", "xi_spread"].map(String::from));
        cols
    }

    fn trace_values(&self) -> Vec<f64> {
        let mut vals = Vec::with_capacity(4 * self.n + 3);
        vals.extend_from_slice(&self.x);
        vals.extend_from_slice(&self.u);
        vals.extend_from_slice(&self.lambda);
        if matches!(self.problem.local, LocalProblem::Shortage { .. }) {
            vals.extend_from_slice(&self.s);
        }
        let (ls, xs) = self.multiplier_spread();
        vals.extend([self.relaxed_residual(), ls, xs]);
        vals
    }
}

pub(crate) fn spread(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// `max_{i,j} ‖row_i − row_j‖∞` for a row-major `n × dim` buffer.
pub(crate) fn block_spread(values: &[f64], dim: usize) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    (0..dim)
        .map(|c| {
            spread(
                &values
                    .iter()
                    .skip(c)
                    .step_by(dim)
                    .copied()
                    .collect::<Vec<_>>(),
            )
        })
        .fold(0.0, f64::max)
}

/// Terminal state of a distributed dual run.
#[derive(Debug, Clone)]
pub struct DualOutcome {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub lambda: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Both the residual and the iterate-change criteria were met.
    pub stopped_early: bool,
    pub relaxed_residual: f64,
    pub balance_residual: f64,
    pub threshold: f64,
    pub lambda_spread: f64,
    pub xi_spread: f64,
    pub trace: IterationTrace,
}

impl DualOutcome {
    /// Whichever of the relaxed and recomputed balance residuals is larger
    /// in magnitude.
    pub fn worst_residual(&self) -> f64 {
        if self.balance_residual.abs() > self.relaxed_residual.abs() {
            self.balance_residual
        } else {
            self.relaxed_residual
        }
    }
}

/// A dual run that can be advanced one round at a time, so that several runs
/// can share a round clock.
#[derive(Debug, Clone)]
pub struct DualRun<'a> {
    engine: DualEngine<'a>,
    schedule: StepSchedule,
    stop: StopRule,
    trace: IterationTrace,
    monitor: ChangeMonitor,
    threshold: f64,
    alpha: f64,
    finished: bool,
    stopped_early: bool,
}

impl<'a> DualRun<'a> {
    pub fn new(
        problem: DualProblem<'a>,
        schedule: &StepSchedule,
        stop: &StopRule,
        stage: Stage,
        trace_stride: usize,
    ) -> Result<Self> {
        schedule.validate()?;
        let engine = DualEngine::new(problem)?;
        let demand: f64 = engine.problem.buses.iter().map(|b| b.demand).sum();
        Ok(DualRun {
            trace: IterationTrace::new(stage, engine.trace_columns(), trace_stride),
            monitor: ChangeMonitor::new(stop.window, &engine.primal_snapshot()),
            threshold: stop.threshold(demand),
            alpha: schedule.alpha(0),
            schedule: *schedule,
            stop: *stop,
            engine,
            finished: false,
            stopped_early: false,
        })
    }

    pub fn engine(&self) -> &DualEngine<'a> {
        &self.engine
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Runs one round unless the run has finished; returns whether it is
    /// still active afterwards.
    pub fn advance(&mut self) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        if self.engine.k >= self.stop.max_iterations {
            self.finished = true;
            return Ok(false);
        }
        let engine = &mut self.engine;
        self.alpha = self.schedule.alpha(engine.k);
        engine.step(self.alpha);
        let round = engine.k;
        if self.trace.wants(round) {
            self.trace.push(round, self.alpha, engine.trace_values())?;
        }
        let change = self.monitor.observe(round, &engine.primal_snapshot());
        // The relaxed residual can vanish while the loss estimates still
        // disagree with the generation, so both residuals must be small.
        if change <= self.stop.change_tol
            && engine.relaxed_residual().abs() <= self.threshold
            && engine.balance_residual().abs() <= self.threshold
        {
            self.stopped_early = true;
            self.finished = true;
        }
        Ok(!self.finished)
    }

    pub fn finish(mut self) -> Result<DualOutcome> {
        let engine = self.engine;
        self.trace
            .push_final(engine.k, self.alpha, engine.trace_values())?;
        let n = engine.n;
        let (lambda_spread, xi_spread) = engine.multiplier_spread();
        Ok(DualOutcome {
            relaxed_residual: engine.relaxed_residual(),
            balance_residual: engine.balance_residual(),
            iterations: engine.k,
            stopped_early: self.stopped_early,
            threshold: self.threshold,
            lambda_spread,
            xi_spread,
            xi: engine.xi.chunks(n).map(<[f64]>::to_vec).collect(),
            x: engine.x,
            u: engine.u,
            s: engine.s,
            lambda: engine.lambda,
            trace: self.trace,
        })
    }
}

/// Runs rounds until the stop rule fires or the budget is exhausted, without
/// turning a missed threshold into an error.
pub fn run_dual_to_budget(
    problem: DualProblem<'_>,
    schedule: &StepSchedule,
    stop: &StopRule,
    stage: Stage,
    trace_stride: usize,
) -> Result<DualOutcome> {
    let mut run = DualRun::new(problem, schedule, stop, stage, trace_stride)?;
    while run.advance()? {}
    run.finish()
}

/// Budget-exhausted runs whose residual is still above threshold become
/// [`Error::NotConverged`].
pub fn require_residual(outcome: DualOutcome, stage: Stage) -> Result<DualOutcome> {
    let residual = outcome.worst_residual();
    if residual.abs() > outcome.threshold {
        return Err(Error::NotConverged(Box::new(NotConverged {
            stage,
            iterations: outcome.iterations,
            residual,
            threshold: outcome.threshold,
            trace: outcome.trace,
        })));
    }
    Ok(outcome)
}

pub fn run_edp(
    buses: &[BusSpec],
    loss: &LossModel,
    mixing: &MixingMatrix,
    u_max: f64,
    schedule: &StepSchedule,
    stop: &StopRule,
    trace_stride: usize,
) -> Result<DualOutcome> {
    let problem = DualProblem {
        buses,
        loss,
        mixing,
        u_max: vec![u_max; buses.len()],
        local: LocalProblem::Dispatch,
    };
    let outcome = run_dual_to_budget(problem, schedule, stop, Stage::Edp, trace_stride)?;
    require_residual(outcome, Stage::Edp)
}
