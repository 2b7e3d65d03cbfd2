//! Priority-ordered load shedding solved by distributed dual subgradients.
//!
//! Buses in the priority ladder `M_1, …, M_m` carry a slack `z` that passes
//! the unserved remainder of the shedding budget down the ladder; regular
//! buses absorb whatever reaches the bottom. The `m + 1` chained equality
//! constraints get free multipliers, so the dual step has no projection.

use serde::Serialize;

use crate::edp::block_spread;
use crate::error::{Error, NotConverged, Result, Stage};
use crate::graph::MixingMatrix;
use crate::step::{ChangeMonitor, StepSchedule, StopRule};
use crate::trace::IterationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    /// Member of `M_level`; shed before every later level.
    Prioritized {
        level: u32,
    },
    Regular,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorityAssignment {
    pub categories: Vec<Category>,
    /// `levels[ℓ−1]` lists the buses of `M_ℓ` in ascending order.
    pub levels: Vec<Vec<usize>>,
}

impl PriorityAssignment {
    pub fn m(&self) -> usize {
        self.levels.len()
    }

    pub fn n(&self) -> usize {
        self.categories.len()
    }

    pub fn regular_count(&self) -> usize {
        self.categories
            .iter()
            .filter(|c| **c == Category::Regular)
            .count()
    }

    /// Size of the set the bus belongs to (`|M_ℓ|` or the regular count).
    pub fn own_cardinality(&self, i: usize) -> usize {
        match self.categories[i] {
            Category::Prioritized { level } => self.levels[level as usize - 1].len(),
            Category::Regular => self.regular_count(),
        }
    }
}

/// Builds the ladder from optional per-bus priority orders (`None` = regular).
pub fn partition_priorities(priorities: &[Option<u32>]) -> Result<PriorityAssignment> {
    let m = priorities.iter().flatten().copied().max().unwrap_or(0) as usize;
    let mut levels = vec![Vec::new(); m];
    let mut categories = Vec::with_capacity(priorities.len());
    for (i, p) in priorities.iter().enumerate() {
        match *p {
            Some(0) => {
                return Err(Error::InvalidParameter(format!(
                    "bus {}: priority orders start at 1",
                    i + 1
                )))
            }
            Some(level) => {
                levels[level as usize - 1].push(i);
                categories.push(Category::Prioritized { level });
            }
            None => categories.push(Category::Regular),
        }
    }
    if let Some(gap) = levels.iter().position(Vec::is_empty) {
        return Err(Error::EmptyPriorityLevel(gap as u32 + 1));
    }
    Ok(PriorityAssignment { categories, levels })
}

/// Local cost parameters of one bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShedParams {
    pub y_max: f64,
    /// Curvature of the regular-bus disutility `q/2·y²`.
    pub q: f64,
    /// Unit reward for shedding at a regular bus.
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShedAgentState {
    pub index: usize,
    pub n: usize,
    pub m: usize,
    pub category: Category,
    pub params: ShedParams,
    pub kappa: f64,
    /// This agent's share `y_tot / n` of the total shedding.
    pub share: f64,
    pub y: f64,
    pub z: f64,
    pub eta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ShedAgentState {
    pub fn new(
        index: usize,
        assignment: &PriorityAssignment,
        params: ShedParams,
        kappa: f64,
        share: f64,
    ) -> Self {
        let m = assignment.m();
        ShedAgentState {
            index,
            n: assignment.n(),
            m,
            category: assignment.categories[index],
            params,
            kappa,
            share,
            y: 0.0,
            z: 0.0,
            eta: vec![0.0; m + 1],
            phi: vec![0.0; m + 1],
        }
    }

    /// Upper end of the slack box, `n · share`.
    pub fn z_cap(&self) -> f64 {
        self.n as f64 * self.share
    }

    /// Where an unconstrained prioritized bus would settle: `n·share / p`.
    pub fn target(&self) -> f64 {
        match self.category {
            Category::Prioritized { level } => self.z_cap() / level as f64,
            Category::Regular => 0.0,
        }
    }
}

/// Contribution of one bus to each of the `m + 1` chained constraints.
pub fn shed_constraint_g(state: &ShedAgentState, z: f64, y: f64, m: usize) -> Vec<f64> {
    let mut g = vec![0.0; m + 1];
    write_constraint_g(state.category, state.share, z, y, m, &mut g);
    g
}

fn write_constraint_g(category: Category, share: f64, z: f64, y: f64, m: usize, g: &mut [f64]) {
    g.fill(0.0);
    if m == 0 {
        g[0] = share - y;
        return;
    }
    g[0] = share;
    match category {
        Category::Prioritized { level } => {
            let l = level as usize;
            g[l - 1] -= y + z;
            g[l] += z;
        }
        Category::Regular => g[m] -= y,
    }
}

/// Closed-form minimizer `(z, y)` of the local Lagrangian at multipliers `phi`.
pub fn shed_primal_step(state: &ShedAgentState, phi: &[f64]) -> (f64, f64) {
    local_minimizer(
        state.category,
        &state.params,
        state.kappa,
        state.z_cap(),
        state.target(),
        state.m,
        phi,
    )
}

fn local_minimizer(
    category: Category,
    params: &ShedParams,
    kappa: f64,
    z_cap: f64,
    target: f64,
    m: usize,
    phi: &[f64],
) -> (f64, f64) {
    match category {
        Category::Regular => (
            0.0,
            ((params.r + phi[m]) / params.q).clamp(0.0, params.y_max),
        ),
        Category::Prioritized { level } => {
            let l = level as usize;
            let y = (target + phi[l - 1] / 2.0).clamp(0.0, params.y_max);
            let z = ((phi[l - 1] - phi[l]) / (2.0 * kappa)).clamp(0.0, z_cap.max(0.0));
            (z, y)
        }
    }
}

pub fn shed_dual_step(phi: &[f64], g: &[f64], alpha: f64) -> Vec<f64> {
    phi.iter().zip(g).map(|(p, gi)| p + alpha * gi).collect()
}

/// Slack penalty guaranteeing `κ` exceeds every regular marginal disutility
/// plus reward, with a factor of ten in hand.
pub fn default_kappa(params: &[ShedParams]) -> f64 {
    let worst = params
        .iter()
        .map(|p| p.q * p.y_max + p.r.abs())
        .fold(0.0, f64::max);
    (10.0 * worst).max(1.0)
}

#[derive(Debug, Clone)]
pub struct ShedProblem<'a> {
    pub assignment: &'a PriorityAssignment,
    pub params: &'a [ShedParams],
    pub mixing: &'a MixingMatrix,
    pub kappa: f64,
    pub y_tot: f64,
}

impl ShedProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        let n = self.assignment.n();
        for len in [self.params.len(), self.mixing.n()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: len,
                });
            }
        }
        if !(self.kappa >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa {} must be at least 1",
                self.kappa
            )));
        }
        if !(self.y_tot >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "y_tot {} must be nonnegative",
                self.y_tot
            )));
        }
        if let Some(p) = self
            .params
            .iter()
            .find(|p| !(p.q > 0.0) || !(p.y_max >= 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "shedding parameters need q > 0 and y_max >= 0, got {p:?}"
            )));
        }
        let capacity: f64 = self.params.iter().map(|p| p.y_max).sum();
        if capacity <= self.y_tot {
            return Err(Error::InfeasibleShedding {
                capacity,
                requested: self.y_tot,
            });
        }
        Ok(())
    }

    pub fn share(&self) -> f64 {
        self.y_tot / self.assignment.n() as f64
    }
}

/// Lockstep simulation of all shedding agents over flat buffers.
#[derive(Debug, Clone)]
pub struct ShedEngine<'a> {
    problem: ShedProblem<'a>,
    n: usize,
    dim: usize,
    pub k: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub eta: Vec<f64>,
    pub phi: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> ShedEngine<'a> {
    pub fn new(problem: ShedProblem<'a>) -> Result<Self> {
        problem.validate()?;
        let n = problem.assignment.n();
        let dim = problem.assignment.m() + 1;
        Ok(ShedEngine {
            problem,
            n,
            dim,
            k: 0,
            y: vec![0.0; n],
            z: vec![0.0; n],
            eta: vec![0.0; n * dim],
            phi: vec![0.0; n * dim],
            g: vec![0.0; dim],
        })
    }

    pub fn m(&self) -> usize {
        self.dim - 1
    }

    pub fn agent_state(&self, i: usize) -> ShedAgentState {
        let mut st = ShedAgentState::new(
            i,
            self.problem.assignment,
            self.problem.params[i],
            self.problem.kappa,
            self.problem.share(),
        );
        st.y = self.y[i];
        st.z = self.z[i];
        st.eta = self.eta[i * self.dim..(i + 1) * self.dim].to_vec();
        st.phi = self.phi[i * self.dim..(i + 1) * self.dim].to_vec();
        st
    }

    /// Primal minimization at `φ(k)`, dual step to `η(k+1)`, then mixing to
    /// `φ(k+1)`.
    pub fn step(&mut self, alpha: f64) {
        let dim = self.dim;
        let m = dim - 1;
        let share = self.problem.share();
        let z_cap = self.n as f64 * share;
        for i in 0..self.n {
            let category = self.problem.assignment.categories[i];
            let target = match category {
                Category::Prioritized { level } => z_cap / level as f64,
                Category::Regular => 0.0,
            };
            let phi = &self.phi[i * dim..(i + 1) * dim];
            let (z, y) = local_minimizer(
                category,
                &self.problem.params[i],
                self.problem.kappa,
                z_cap,
                target,
                m,
                phi,
            );
            self.y[i] = y;
            self.z[i] = z;
            write_constraint_g(category, share, z, y, m, &mut self.g);
            let eta = &mut self.eta[i * dim..(i + 1) * dim];
            for (nu, e) in eta.iter_mut().enumerate() {
                *e = phi[nu] + alpha * self.g[nu];
            }
        }
        self.problem.mixing.mix_flat(&self.eta, dim, &mut self.phi);
        self.k += 1;
    }

    /// `Σy − y_tot`.
    pub fn budget_residual(&self) -> f64 {
        self.y.iter().sum::<f64>() - self.problem.y_tot
    }

    /// Largest violation among the `m + 1` chained equalities.
    pub fn constraint_violation(&self) -> f64 {
        let m = self.m();
        let share = self.problem.share();
        let mut total = vec![0.0; self.dim];
        let mut g = vec![0.0; self.dim];
        for i in 0..self.n {
            write_constraint_g(
                self.problem.assignment.categories[i],
                share,
                self.z[i],
                self.y[i],
                m,
                &mut g,
            );
            for (t, gi) in total.iter_mut().zip(&g) {
                *t += gi;
            }
        }
        total.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn eta_spread(&self) -> f64 {
        block_spread(&self.eta, self.dim)
    }

    pub fn phi_spread(&self) -> f64 {
        block_spread(&self.phi, self.dim)
    }

    fn primal_snapshot(&self) -> Vec<f64> {
        let mut p = self.y.clone();
        p.extend_from_slice(&self.z);
        p
    }

    fn trace_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = (0..self.n).map(|i| format!("y{i}")).collect();
        cols.extend((0..self.n).map(|i| format!("z{i}")));
        cols.extend(["eta_spread", "budget_residual"].map(String::from));
        cols
    }

    fn trace_values(&self) -> Vec<f64> {
        let mut v = self.primal_snapshot();
        v.push(self.eta_spread());
        v.push(self.budget_residual());
        v
    }
}

#[derive(Debug, Clone)]
pub struct ShedOutcome {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub eta: Vec<Vec<f64>>,
    pub iterations: usize,
    pub stopped_early: bool,
    pub budget_residual: f64,
    pub constraint_violation: f64,
    pub threshold: f64,
    pub eta_spread: f64,
    pub trace: IterationTrace,
}

/// A shedding run that can be advanced one round at a time.
#[derive(Debug, Clone)]
pub struct ShedRun<'a> {
    engine: ShedEngine<'a>,
    schedule: StepSchedule,
    stop: StopRule,
    trace: IterationTrace,
    monitor: ChangeMonitor,
    threshold: f64,
    alpha: f64,
    finished: bool,
    stopped_early: bool,
}

impl<'a> ShedRun<'a> {
    pub fn new(
        problem: ShedProblem<'a>,
        schedule: &StepSchedule,
        stop: &StopRule,
        trace_stride: usize,
    ) -> Result<Self> {
        schedule.validate()?;
        let threshold = stop.threshold(problem.y_tot);
        let engine = ShedEngine::new(problem)?;
        Ok(ShedRun {
            trace: IterationTrace::new(Stage::Shedding, engine.trace_columns(), trace_stride),
            monitor: ChangeMonitor::new(stop.window, &engine.primal_snapshot()),
            threshold,
            alpha: schedule.alpha(0),
            schedule: *schedule,
            stop: *stop,
            engine,
            finished: false,
            stopped_early: false,
        })
    }

    pub fn engine(&self) -> &ShedEngine<'a> {
        &self.engine
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

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
        if engine.constraint_violation() <= self.threshold && change <= self.stop.change_tol {
            self.stopped_early = true;
            self.finished = true;
        }
        Ok(!self.finished)
    }

    pub fn finish(mut self) -> Result<ShedOutcome> {
        let engine = self.engine;
        self.trace
            .push_final(engine.k, self.alpha, engine.trace_values())?;
        Ok(ShedOutcome {
            budget_residual: engine.budget_residual(),
            constraint_violation: engine.constraint_violation(),
            iterations: engine.k,
            stopped_early: self.stopped_early,
            threshold: self.threshold,
            eta_spread: engine.eta_spread(),
            eta: engine.eta.chunks(engine.dim).map(<[f64]>::to_vec).collect(),
            y: engine.y,
            z: engine.z,
            trace: self.trace,
        })
    }
}

pub fn run_shedding_to_budget(
    problem: ShedProblem<'_>,
    schedule: &StepSchedule,
    stop: &StopRule,
    trace_stride: usize,
) -> Result<ShedOutcome> {
    let mut run = ShedRun::new(problem, schedule, stop, trace_stride)?;
    while run.advance()? {}
    run.finish()
}

/// Turns a run that missed its threshold into [`Error::NotConverged`].
pub fn require_constraints(out: ShedOutcome) -> Result<ShedOutcome> {
    if out.constraint_violation > out.threshold {
        return Err(Error::NotConverged(Box::new(NotConverged {
            stage: Stage::Shedding,
            iterations: out.iterations,
            residual: out.constraint_violation,
            threshold: out.threshold,
            trace: out.trace,
        })));
    }
    Ok(out)
}

pub fn run_shedding(
    problem: ShedProblem<'_>,
    schedule: &StepSchedule,
    stop: &StopRule,
    trace_stride: usize,
) -> Result<ShedOutcome> {
    require_constraints(run_shedding_to_budget(
        problem,
        schedule,
        stop,
        trace_stride,
    )?)
}
