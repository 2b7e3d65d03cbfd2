//! Shortage estimation: how much load every agent must shed so that the
//! dispatch problem becomes feasible.
//!
//! Agents solve a convex surrogate in which a common per-agent shortage `s`
//! enters the balance and is penalized quadratically, together with a small
//! `τ·x²` term that keeps the generation step well defined. The loop is the
//! dispatch loop with a different local minimizer.

use crate::edp::{
    coupling, local_u, require_residual, run_dual_to_budget, DualOutcome, DualProblem, LocalProblem,
};
use crate::error::{Result, Stage};
use crate::graph::MixingMatrix;
use crate::power::{BusSpec, LossModel};
use crate::step::{StepSchedule, StopRule};

pub const DEFAULT_TAU: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityAgentState {
    pub index: usize,
    pub x: f64,
    pub u: f64,
    pub s: f64,
    pub lambda: f64,
    pub xi: Vec<f64>,
    pub tau: f64,
    pub s_cap: f64,
    pub r_col: Vec<f64>,
    pub bus: BusSpec,
}

impl FeasibilityAgentState {
    pub fn new(index: usize, bus: BusSpec, model: &LossModel, tau: f64, s_cap: f64) -> Self {
        FeasibilityAgentState {
            index,
            x: 0.0,
            u: 0.0,
            s: 0.0,
            lambda: 0.0,
            xi: vec![0.0; model.n()],
            tau,
            s_cap,
            r_col: model.r.column(index).iter().copied().collect(),
            bus,
        }
    }
}

/// Twice the mean demand; never binding at the optimum since `Σs ≤ Σd`.
pub fn default_share_cap(buses: &[BusSpec]) -> f64 {
    let n = buses.len().max(1) as f64;
    2.0 * buses.iter().map(|b| b.demand).sum::<f64>() / n
}

/// Closed-form `(x, u, s)` minimizing the local Lagrangian.
pub fn feasibility_primal_step(
    state: &FeasibilityAgentState,
    v: f64,
    w: &[f64],
    u_max: f64,
) -> (f64, f64, f64) {
    let s = (v / 2.0).clamp(0.0, state.s_cap);
    let x = if state.bus.is_generator {
        ((v - coupling(w, &state.r_col)) / (2.0 * state.tau))
            .clamp(state.bus.x_min, state.bus.x_max)
    } else {
        0.0
    };
    (x, local_u(v, w[state.index], u_max), s)
}

#[derive(Debug, Clone)]
pub struct FeasibilityConfig {
    pub tau: f64,
    pub s_cap: f64,
    pub schedule: StepSchedule,
    pub stop: StopRule,
}

pub fn run_feasibility_to_budget(
    buses: &[BusSpec],
    loss: &LossModel,
    mixing: &MixingMatrix,
    u_max: Vec<f64>,
    config: &FeasibilityConfig,
    trace_stride: usize,
) -> Result<DualOutcome> {
    if !(config.tau > 0.0) {
        return Err(crate::Error::InvalidParameter(format!(
            "tau {} must be positive",
            config.tau
        )));
    }
    let problem = DualProblem {
        buses,
        loss,
        mixing,
        u_max,
        local: LocalProblem::Shortage {
            tau: config.tau,
            s_cap: config.s_cap,
        },
    };
    run_dual_to_budget(
        problem,
        &config.schedule,
        &config.stop,
        Stage::Feasibility,
        trace_stride,
    )
}

pub fn run_feasibility(
    buses: &[BusSpec],
    loss: &LossModel,
    mixing: &MixingMatrix,
    u_max: Vec<f64>,
    config: &FeasibilityConfig,
    trace_stride: usize,
) -> Result<DualOutcome> {
    let out = run_feasibility_to_budget(buses, loss, mixing, u_max, config, trace_stride)?;
    require_residual(out, Stage::Feasibility)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{metropolis_weights, Graph};
    use crate::oracle::{minimum_shortage, solve_feasibility_centralized};

    fn agent(cap: f64) -> FeasibilityAgentState {
        let bus = BusSpec::generator(0, 0.0, 10.0, 0.1, 1.0);
        FeasibilityAgentState::new(0, bus, &LossModel::zero(1), DEFAULT_TAU, cap)
    }

    #[test]
    fn share_follows_multiplier() {
        let st = agent(10.0);
        assert_eq!(feasibility_primal_step(&st, 0.0, &[0.0], 0.0).2, 0.0);
        assert_eq!(feasibility_primal_step(&st, 3.0, &[0.0], 0.0).2, 1.5);
        assert_eq!(
            feasibility_primal_step(&agent(1.0), 3.0, &[0.0], 0.0).2,
            1.0
        );
    }

    fn two_bus(d0: f64, d1: f64) -> Vec<BusSpec> {
        vec![
            BusSpec::generator(0, 0.0, 3.0, 0.1, 1.0).with_demand(d0),
            BusSpec::load(1, d1),
        ]
    }

    fn config(buses: &[BusSpec], tau: f64, schedule: StepSchedule) -> FeasibilityConfig {
        FeasibilityConfig {
            tau,
            s_cap: default_share_cap(buses),
            schedule,
            stop: StopRule {
                max_iterations: 400_000,
                residual_tol: 1e-4,
                ..StopRule::default()
            },
        }
    }

    #[test]
    fn toy_shortage_matches_capacity_gap() {
        let buses = two_bus(2.5, 1.5);
        let loss = LossModel::zero(2);
        let mixing = metropolis_weights(&Graph::complete(2).unwrap());
        let cfg = config(&buses, DEFAULT_TAU, StepSchedule::edp_default());
        let out = run_feasibility(&buses, &loss, &mixing, vec![0.0; 2], &cfg, 1000).unwrap();
        let total: f64 = out.s.iter().sum();
        assert!((total - 1.0).abs() <= 1e-2, "{total}");
        let oracle =
            solve_feasibility_centralized(&buses, &loss, DEFAULT_TAU, cfg.s_cap, 1e-9).unwrap();
        assert!((total - oracle.primal("s").iter().sum::<f64>()).abs() <= 1e-2);
        assert!((out.s[0] - out.s[1]).abs() <= 1e-3);
    }

    #[test]
    fn no_shortage_without_overload() {
        let buses = two_bus(1.0, 1.0);
        let loss = LossModel::zero(2);
        let mixing = metropolis_weights(&Graph::complete(2).unwrap());
        let schedule = StepSchedule::HarmonicPower {
            c: 0.1,
            exponent: 1.0,
        };
        let cfg = config(&buses, DEFAULT_TAU, schedule);
        let out = run_feasibility(&buses, &loss, &mixing, vec![0.0; 2], &cfg, 1000).unwrap();
        assert_eq!(minimum_shortage(&buses, &loss).0, 0.0);
        for s in &out.s {
            assert!(*s <= 1e-3, "{:?}", out.s);
        }
    }

    #[test]
    fn smaller_penalty_sheds_less() {
        let buses = two_bus(2.5, 1.5);
        let loss = LossModel::zero(2);
        let mixing = metropolis_weights(&Graph::complete(2).unwrap());
        let floor = minimum_shortage(&buses, &loss).0;
        let mut last = f64::INFINITY;
        for tau in [1e-2, 1e-3, 1e-4] {
            let cfg = config(&buses, tau, StepSchedule::edp_default());
            let out = run_feasibility(&buses, &loss, &mixing, vec![0.0; 2], &cfg, 1000).unwrap();
            let total: f64 = out.s.iter().sum();
            assert!(
                total <= last + 1e-6 && total >= floor - 1e-3,
                "{tau}: {total}"
            );
            last = total;
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn share_stays_in_its_box(v in 0.0f64..1e3, w in -1e3f64..1e3, cap in 0.01f64..50.0) {
                let st = agent(cap);
                let (x, _, s) = feasibility_primal_step(&st, v, &[w], 1.0);
                prop_assert!((0.0..=cap).contains(&s));
                prop_assert!((st.bus.x_min..=st.bus.x_max).contains(&x));
            }
        }
    }
}
