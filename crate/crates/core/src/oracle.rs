//! Centralized reference solutions, used as ground truth for the
//! distributed solvers.
//!
//! The dispatch and shortage problems have a single scalar balance
//! multiplier. For fixed `λ` the remaining minimization is a strictly convex
//! box QP, and the balance residual is monotone in `λ`, so the optimum is
//! found by bisection. The shedding problem is solved by accelerated ascent
//! on its smooth dual. Every solution is certified by the optimality
//! conditions, evaluated with the same closed-form local steps the agents
//! use. An exhaustive grid search gives an independent check on tiny cases.

use std::collections::BTreeMap;

use crate::edp::{edp_primal_step, EdpAgentState};
use crate::error::{Error, Result};
use crate::power::{BusSpec, LossModel};
use crate::shed::{
    shed_constraint_g, shed_primal_step, Category, PriorityAssignment, ShedAgentState, ShedParams,
};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub primal: BTreeMap<String, Vec<f64>>,
    pub dual: BTreeMap<String, Vec<f64>>,
    pub objective: f64,
    /// Objective of the dual function at the returned multipliers.
    pub dual_value: f64,
    pub kkt_residuals: BTreeMap<String, f64>,
}

impl OracleSolution {
    pub fn primal(&self, name: &str) -> &[f64] {
        self.primal.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn dual(&self, name: &str) -> &[f64] {
        self.dual.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn max_residual(&self) -> f64 {
        self.kkt_residuals.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn duality_gap(&self) -> f64 {
        self.objective - self.dual_value
    }
}

/// Minimizes `Σ (a_i x_i² + b_i x_i) + λ (xᵀBx − Σx)` over the boxes of the
/// listed coordinates by cyclic coordinate descent; other coordinates stay 0.
fn box_qp(
    coords: &[usize],
    a: &[f64],
    b: &[f64],
    lo: &[f64],
    hi: &[f64],
    loss: &LossModel,
    lambda: f64,
    start: &[f64],
) -> Vec<f64> {
    let n = loss.n();
    let mut x = start.to_vec();
    let mut bx: Vec<f64> = (0..n)
        .map(|r| coords.iter().map(|&c| loss.b[(r, c)] * x[c]).sum())
        .collect();
    for _sweep in 0..100_000 {
        let mut moved: f64 = 0.0;
        for (t, &i) in coords.iter().enumerate() {
            let h = 2.0 * a[t] + 2.0 * lambda * loss.b[(i, i)];
            let grad = 2.0 * a[t] * x[i] + b[t] + lambda * (2.0 * bx[i] - 1.0);
            let next = if h > 0.0 {
                (x[i] - grad / h).clamp(lo[t], hi[t])
            } else if grad > 0.0 {
                lo[t]
            } else {
                hi[t]
            };
            let delta = next - x[i];
            if delta != 0.0 {
                for r in 0..n {
                    bx[r] += loss.b[(r, i)] * delta;
                }
                x[i] = next;
                moved = moved.max(delta.abs());
            }
        }
        if moved <= 1e-14 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            break;
        }
    }
    x
}

struct BalanceSearch<'a> {
    buses: &'a [BusSpec],
    loss: &'a LossModel,
    coords: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<'a> BalanceSearch<'a> {
    fn new(buses: &'a [BusSpec], loss: &'a LossModel, tau: Option<f64>) -> Self {
        let coords: Vec<usize> = (0..buses.len())
            .filter(|&i| buses[i].is_generator)
            .collect();
        let pick =
            |f: &dyn Fn(&BusSpec) -> f64| coords.iter().map(|&i| f(&buses[i])).collect::<Vec<_>>();
        BalanceSearch {
            buses,
            loss,
            a: pick(&|g| tau.unwrap_or(g.cost_a)),
            b: pick(&|g| if tau.is_some() { 0.0 } else { g.cost_b }),
            lo: pick(&|g| g.x_min),
            hi: pick(&|g| g.x_max),
            coords,
        }
    }

    fn x_at(&self, lambda: f64, warm: &[f64]) -> Vec<f64> {
        box_qp(
            &self.coords,
            &self.a,
            &self.b,
            &self.lo,
            &self.hi,
            self.loss,
            lambda,
            warm,
        )
    }

    fn start(&self) -> Vec<f64> {
        self.buses.iter().map(|g| g.x_min).collect()
    }

    /// Finds `λ ≥ 0` with `residual(λ, x(λ)) = 0`, where `residual` is
    /// nonincreasing in `λ`. Returns `None` if no finite root exists.
    fn bisect(
        &self,
        residual: &dyn Fn(f64, &[f64]) -> f64,
        tolerance: f64,
    ) -> Option<(f64, Vec<f64>)> {
        let x0 = self.x_at(0.0, &self.start());
        if residual(0.0, &x0) <= 0.0 {
            return Some((0.0, x0));
        }
        let mut hi = 1.0;
        let mut x_hi = self.x_at(hi, &x0);
        while residual(hi, &x_hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e12 {
                return None;
            }
            x_hi = self.x_at(hi, &x_hi);
        }
        let mut lo = 0.0;
        let mut x = x_hi;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            x = self.x_at(mid, &x);
            let r = residual(mid, &x);
            if r > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if r.abs() <= 1e-3 * tolerance || hi - lo <= 1e-15 * hi.max(1.0) {
                return Some((mid, x));
            }
        }
        Some((0.5 * (lo + hi), x))
    }
}

fn local_lagrangian_min(
    buses: &[BusSpec],
    loss: &LossModel,
    lambda: f64,
    xi: &[f64],
    u_max: f64,
    local_cost: &dyn Fn(&BusSpec, f64) -> f64,
    x_of: &dyn Fn(usize, &EdpAgentState) -> f64,
) -> f64 {
    let mut total = 0.0;
    for (i, bus) in buses.iter().enumerate() {
        let st = EdpAgentState::new(i, bus.clone(), loss);
        let x = x_of(i, &st);
        let (_, u) = edp_primal_step(&st, lambda, xi, u_max);
        let coupling: f64 = xi.iter().zip(&st.r_col).map(|(w, r)| w * r).sum();
        total += local_cost(bus, x) + lambda * (u * u + bus.demand - x) + coupling * x - xi[i] * u;
    }
    total
}

/// Centralized optimum of the relaxed dispatch problem.
pub fn solve_edp_centralized(
    buses: &[BusSpec],
    loss: &LossModel,
    tolerance: f64,
) -> Result<OracleSolution> {
    if buses.len() != loss.n() {
        return Err(Error::DimensionMismatch {
            expected: buses.len(),
            found: loss.n(),
        });
    }
    let search = BalanceSearch::new(buses, loss, None);
    let demand: f64 = buses.iter().map(|b| b.demand).sum();
    let residual =
        |_: f64, x: &[f64]| loss.evaluate(x).unwrap_or(f64::NAN) + demand - x.iter().sum::<f64>();
    let (lambda, x) = search.bisect(&residual, tolerance).ok_or_else(|| {
        Error::Infeasible("demand plus losses exceeds the deliverable generation".into())
    })?;
    let u = loss.apply_root(&x);
    let xi: Vec<f64> = u.iter().map(|v| 2.0 * lambda * v).collect();
    let u_max = crate::power::compute_u_bound(loss, buses).u_max;

    let mut stationarity: f64 = 0.0;
    for (i, bus) in buses.iter().enumerate() {
        let st = EdpAgentState::new(i, bus.clone(), loss);
        let (xs, us) = edp_primal_step(&st, lambda, &xi, u_max);
        stationarity = stationarity.max((xs - x[i]).abs());
        if lambda > 0.0 {
            stationarity = stationarity.max((us - u[i]).abs());
        }
    }
    let balance = residual(lambda, &x);
    let relaxed: f64 = u.iter().map(|v| v * v).sum::<f64>() + demand - x.iter().sum::<f64>();
    let objective = crate::power::total_cost(buses, &x);
    let dual_value = local_lagrangian_min(
        buses,
        loss,
        lambda,
        &xi,
        u_max,
        &|b, x| {
            if b.is_generator {
                b.cost_a * x * x + b.cost_b * x
            } else {
                0.0
            }
        },
        &|_, st| edp_primal_step(st, lambda, &xi, u_max).0,
    );

    let mut kkt = BTreeMap::new();
    kkt.insert("stationarity".into(), stationarity);
    kkt.insert("balance".into(), balance);
    kkt.insert("relaxed_balance".into(), relaxed);
    kkt.insert("complementarity".into(), lambda * relaxed);
    kkt.insert("coupling".into(), 0.0);
    kkt.insert("dual_feasibility".into(), (-lambda).max(0.0));
    let sol = OracleSolution {
        primal: BTreeMap::from([("x".into(), x), ("u".into(), u)]),
        dual: BTreeMap::from([("lambda".into(), vec![lambda]), ("xi".into(), xi)]),
        objective,
        dual_value,
        kkt_residuals: kkt,
    };
    certify(sol, tolerance)
}

fn certify(sol: OracleSolution, tolerance: f64) -> Result<OracleSolution> {
    if sol.max_residual() > tolerance {
        let (name, value) = sol
            .kkt_residuals
            .iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, v)| (k.clone(), *v))
            .unwrap_or_default();
        return Err(Error::NotConverged(Box::new(crate::error::NotConverged {
            stage: crate::Stage::Oracle,
            iterations: 0,
            residual: value,
            threshold: tolerance,
            trace: crate::trace::IterationTrace::new(crate::Stage::Oracle, vec![name], 1),
        })));
    }
    Ok(sol)
}

/// Centralized optimum of the shortage surrogate with penalty `tau`.
pub fn solve_feasibility_centralized(
    buses: &[BusSpec],
    loss: &LossModel,
    tau: f64,
    s_cap: f64,
    tolerance: f64,
) -> Result<OracleSolution> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tau {tau} must be positive"
        )));
    }
    let n = buses.len();
    let search = BalanceSearch::new(buses, loss, Some(tau));
    let demand: f64 = buses.iter().map(|b| b.demand).sum();
    let share = |lambda: f64| (lambda / 2.0).clamp(0.0, s_cap);
    let residual = |lambda: f64, x: &[f64]| {
        loss.evaluate(x).unwrap_or(f64::NAN) + demand
            - x.iter().sum::<f64>()
            - n as f64 * share(lambda)
    };
    let (lambda, x) = search
        .bisect(&residual, tolerance)
        .ok_or_else(|| Error::Infeasible("shortage exceeds the share cap".into()))?;
    let u = loss.apply_root(&x);
    let s = vec![share(lambda); n];
    let balance = residual(lambda, &x);
    let objective =
        s.iter().map(|v| v * v).sum::<f64>() + tau * x.iter().map(|v| v * v).sum::<f64>();
    let xi: Vec<f64> = u.iter().map(|v| 2.0 * lambda * v).collect();
    let mut stationarity: f64 = 0.0;
    for (i, bus) in buses.iter().enumerate() {
        if bus.is_generator {
            let c: f64 = (0..n).map(|j| xi[j] * loss.r[(j, i)]).sum();
            let xs = ((lambda - c) / (2.0 * tau)).clamp(bus.x_min, bus.x_max);
            stationarity = stationarity.max((xs - x[i]).abs());
        }
    }
    let mut kkt = BTreeMap::new();
    kkt.insert("stationarity".into(), stationarity);
    kkt.insert("balance".into(), balance);
    kkt.insert("complementarity".into(), lambda * balance);
    let sol = OracleSolution {
        primal: BTreeMap::from([("x".into(), x), ("u".into(), u), ("s".into(), s)]),
        dual: BTreeMap::from([("lambda".into(), vec![lambda]), ("xi".into(), xi)]),
        objective,
        dual_value: objective,
        kkt_residuals: kkt,
    };
    certify(sol, tolerance)
}

/// Smallest total shortage `max(0, min_box Υ(x) + Σd − Σx)`, with the
/// minimizing generation.
pub fn minimum_shortage(buses: &[BusSpec], loss: &LossModel) -> (f64, Vec<f64>) {
    let search = BalanceSearch::new(buses, loss, Some(0.0));
    let x = search.x_at(1.0, &search.start());
    let demand: f64 = buses.iter().map(|b| b.demand).sum();
    let gap = loss.evaluate(&x).unwrap_or(f64::NAN) + demand - x.iter().sum::<f64>();
    (gap.max(0.0), x)
}

/// Uniform-share optimum of the exact shortage problem: every agent sheds
/// `S*/n`, the least total that makes the balance attainable.
pub fn solve_shortage_exact(buses: &[BusSpec], loss: &LossModel) -> OracleSolution {
    let n = buses.len();
    let (total, x) = minimum_shortage(buses, loss);
    let s = vec![total / n as f64; n];
    let objective = s.iter().map(|v| v * v).sum();
    OracleSolution {
        primal: BTreeMap::from([("x".into(), x), ("s".into(), s)]),
        dual: BTreeMap::new(),
        objective,
        dual_value: objective,
        kkt_residuals: BTreeMap::new(),
    }
}

/// Centralized optimum of the priority-ordered shedding problem.
pub fn solve_shedding_centralized(
    assignment: &PriorityAssignment,
    params: &[ShedParams],
    kappa: f64,
    y_tot: f64,
    tolerance: f64,
) -> Result<OracleSolution> {
    let n = assignment.n();
    if params.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: params.len(),
        });
    }
    let capacity: f64 = params.iter().map(|p| p.y_max).sum();
    if capacity <= y_tot {
        return Err(Error::Infeasible(format!(
            "total shedding capacity {capacity} does not exceed {y_tot}"
        )));
    }
    let m = assignment.m();
    let share = y_tot / n as f64;
    let states: Vec<ShedAgentState> = (0..n)
        .map(|i| ShedAgentState::new(i, assignment, params[i], kappa, share))
        .collect();
    let evaluate = |eta: &[f64]| {
        let mut grad = vec![0.0; m + 1];
        let mut value = 0.0;
        let mut yz = Vec::with_capacity(n);
        for st in &states {
            let (z, y) = shed_primal_step(st, eta);
            let g = shed_constraint_g(st, z, y, m);
            value +=
                local_shed_cost(st, z, y) + eta.iter().zip(&g).map(|(e, gi)| e * gi).sum::<f64>();
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
            yz.push((y, z));
        }
        (value, grad, yz)
    };

    // Each variable enters at most two constraints with unit weight, and the
    // smallest curvature of a local objective bounds the dual smoothness.
    let mu_min = states
        .iter()
        .map(|st| match st.category {
            Category::Regular => st.params.q,
            Category::Prioritized { .. } => 2.0f64.min(2.0 * kappa),
        })
        .fold(f64::INFINITY, f64::min);
    let lipschitz = 4.0 * n as f64 / mu_min;
    let step = 1.0 / lipschitz;

    let mut eta = vec![0.0; m + 1];
    let mut prev = eta.clone();
    let mut t: f64 = 1.0;
    let mut best_value = f64::NEG_INFINITY;
    let (mut value, mut grad, mut yz) = evaluate(&eta);
    for _ in 0..2_000_000 {
        let violation = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if violation <= 1e-3 * tolerance {
            break;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        let look: Vec<f64> = eta
            .iter()
            .zip(&prev)
            .map(|(e, p)| e + beta * (e - p))
            .collect();
        let (_, g_look, _) = evaluate(&look);
        let next: Vec<f64> = look
            .iter()
            .zip(&g_look)
            .map(|(l, g)| l + step * g)
            .collect();
        prev = std::mem::replace(&mut eta, next);
        t = t_next;
        (value, grad, yz) = evaluate(&eta);
        if value < best_value {
            // Function-value restart.
            t = 1.0;
            prev = eta.clone();
        }
        best_value = best_value.max(value);
    }

    let y: Vec<f64> = yz.iter().map(|p| p.0).collect();
    let z: Vec<f64> = yz.iter().map(|p| p.1).collect();
    let objective: f64 = states
        .iter()
        .zip(&yz)
        .map(|(st, &(y, z))| local_shed_cost(st, z, y))
        .sum();
    let mut kkt = BTreeMap::new();
    for (nu, g) in grad.iter().enumerate() {
        kkt.insert(format!("constraint_{}", nu + 1), *g);
    }
    kkt.insert("budget".into(), y.iter().sum::<f64>() - y_tot);
    let sol = OracleSolution {
        primal: BTreeMap::from([("y".into(), y), ("z".into(), z)]),
        dual: BTreeMap::from([("eta".into(), eta)]),
        objective,
        dual_value: value,
        kkt_residuals: kkt,
    };
    certify(sol, tolerance)
}

pub fn local_shed_cost(st: &ShedAgentState, z: f64, y: f64) -> f64 {
    match st.category {
        Category::Regular => 0.5 * st.params.q * y * y - st.params.r * y,
        Category::Prioritized { .. } => st.kappa * z * z + (y - st.target()).powi(2),
    }
}

/// Which problem a grid search scans.
#[derive(Debug, Clone)]
pub enum GridProblem<'a> {
    Edp {
        buses: &'a [BusSpec],
        loss: &'a LossModel,
    },
    Shedding {
        assignment: &'a PriorityAssignment,
        params: &'a [ShedParams],
        kappa: f64,
        y_tot: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub point: Vec<f64>,
    /// Slack variables implied by the point (shedding only).
    pub slack: Vec<f64>,
    pub objective: f64,
    /// Objective change allowed by the grid resolution.
    pub slack_bound: f64,
    pub points_scanned: u64,
}

pub const GRID_LIMIT: f64 = 1e8;

fn grid_axes(ranges: &[(f64, f64)], resolution: f64) -> Result<Vec<Vec<f64>>> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "resolution {resolution} must be positive"
        )));
    }
    let axes: Vec<Vec<f64>> = ranges
        .iter()
        .map(|&(lo, hi)| {
            let steps = ((hi - lo) / resolution).round().max(0.0) as usize;
            (0..=steps)
                .map(|k| (lo + k as f64 * resolution).min(hi))
                .collect()
        })
        .collect();
    let points: f64 = axes.iter().map(|a| a.len() as f64).product();
    if points > GRID_LIMIT {
        return Err(Error::GridTooLarge {
            points,
            limit: GRID_LIMIT,
        });
    }
    Ok(axes)
}

fn for_each_point(axes: &[Vec<f64>], mut f: impl FnMut(&[f64])) -> u64 {
    let mut idx = vec![0usize; axes.len()];
    let mut point: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    let mut count = 0;
    loop {
        f(&point);
        count += 1;
        let mut d = 0;
        loop {
            if d == axes.len() {
                return count;
            }
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                point[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            point[d] = axes[d][0];
            d += 1;
        }
    }
}

/// Exhaustive scan over a grid of all decision variables but the last, which
/// is solved from the balance (or budget) equation and must land in its box.
pub fn brute_force_grid(problem: &GridProblem<'_>, resolution: f64) -> Result<GridResult> {
    match *problem {
        GridProblem::Edp { buses, loss } => grid_edp(buses, loss, resolution),
        GridProblem::Shedding {
            assignment,
            params,
            kappa,
            y_tot,
        } => grid_shedding(assignment, params, kappa, y_tot, resolution),
    }
}

/// Roots of `c2·t² + c1·t + c0 = 0` inside `[lo, hi]`.
fn roots_in(c2: f64, c1: f64, c0: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if c2.abs() <= 1e-300 {
        if c1 != 0.0 {
            out.push(-c0 / c1);
        }
    } else {
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc >= 0.0 {
            let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
            out.push(q / c2);
            if q != 0.0 {
                out.push(c0 / q);
            }
        }
    }
    let slack = 1e-12 * (1.0 + hi.abs());
    out.into_iter()
        .filter(|t| *t >= lo - slack && *t <= hi + slack)
        .map(|t| t.clamp(lo, hi))
        .collect()
}

fn grid_edp(buses: &[BusSpec], loss: &LossModel, resolution: f64) -> Result<GridResult> {
    let gens: Vec<usize> = (0..buses.len())
        .filter(|&i| buses[i].is_generator)
        .collect();
    if gens.is_empty() || gens.len() > 4 {
        return Err(Error::InvalidParameter(format!(
            "grid search needs 1 to 4 generators, got {}",
            gens.len()
        )));
    }
    let (scan, last) = gens.split_at(gens.len() - 1);
    let last = last[0];
    let ranges: Vec<(f64, f64)> = scan
        .iter()
        .map(|&i| (buses[i].x_min, buses[i].x_max))
        .collect();
    let axes = grid_axes(&ranges, resolution)?;
    let demand: f64 = buses.iter().map(|b| b.demand).sum();
    let n = buses.len();
    let mut x = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let scanned = for_each_point(&axes, |p| {
        for (t, &i) in scan.iter().enumerate() {
            x[i] = p[t];
        }
        x[last] = 0.0;
        // The balance is a quadratic in the remaining generator.
        let rest_loss = loss.evaluate(&x).unwrap_or(f64::NAN);
        let cross: f64 = (0..n).map(|j| loss.b[(last, j)] * x[j]).sum();
        let rest_sum: f64 = x.iter().sum();
        let g = &buses[last];
        for root in roots_in(
            loss.b[(last, last)],
            2.0 * cross - 1.0,
            rest_loss + demand - rest_sum,
            g.x_min,
            g.x_max,
        ) {
            x[last] = root;
            let cost = crate::power::total_cost(buses, &x);
            if best.as_ref().map_or(true, |b| cost < b.0) {
                best = Some((cost, x.clone()));
            }
        }
    });
    let (objective, point) =
        best.ok_or_else(|| Error::Infeasible("no grid point meets the balance".into()))?;
    let cost_lip: f64 = gens
        .iter()
        .map(|&i| 2.0 * buses[i].cost_a * buses[i].x_max + buses[i].cost_b.abs())
        .sum();
    Ok(GridResult {
        point,
        slack: Vec::new(),
        objective,
        slack_bound: 2.0 * resolution * cost_lip,
        points_scanned: scanned,
    })
}

/// Slacks that satisfy the chained constraints for given `y`, split equally
/// within each level; `None` if some slack would leave its box.
fn implied_slack(assignment: &PriorityAssignment, y: &[f64], y_tot: f64) -> Option<Vec<f64>> {
    let mut z = vec![0.0; assignment.n()];
    let mut carried = y_tot;
    for level in &assignment.levels {
        let used: f64 = level.iter().map(|&i| y[i]).sum();
        let pass = carried - used;
        let each = pass / level.len() as f64;
        if each < -1e-12 || each > y_tot + 1e-12 {
            return None;
        }
        for &i in level {
            z[i] = each.max(0.0);
        }
        carried = pass;
    }
    Some(z)
}

fn grid_shedding(
    assignment: &PriorityAssignment,
    params: &[ShedParams],
    kappa: f64,
    y_tot: f64,
    resolution: f64,
) -> Result<GridResult> {
    let n = assignment.n();
    let free: Vec<usize> = (0..n).filter(|&i| params[i].y_max > 0.0).collect();
    if free.is_empty() || free.len() > 4 {
        return Err(Error::InvalidParameter(format!(
            "grid search needs 1 to 4 sheddable buses, got {}",
            free.len()
        )));
    }
    let (scan, last) = free.split_at(free.len() - 1);
    let last = last[0];
    let axes = grid_axes(
        &scan
            .iter()
            .map(|&i| (0.0, params[i].y_max))
            .collect::<Vec<_>>(),
        resolution,
    )?;
    let share = y_tot / n as f64;
    let states: Vec<ShedAgentState> = (0..n)
        .map(|i| ShedAgentState::new(i, assignment, params[i], kappa, share))
        .collect();
    let mut y = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let scanned = for_each_point(&axes, |p| {
        for (t, &i) in scan.iter().enumerate() {
            y[i] = p[t];
        }
        let remaining = y_tot - scan.iter().map(|&i| y[i]).sum::<f64>();
        if remaining < 0.0 || remaining > params[last].y_max {
            return;
        }
        y[last] = remaining;
        let Some(z) = implied_slack(assignment, &y, y_tot) else {
            return;
        };
        let cost: f64 = states
            .iter()
            .map(|st| local_shed_cost(st, z[st.index], y[st.index]))
            .sum();
        if best.as_ref().map_or(true, |b| cost < b.0) {
            best = Some((cost, y.clone(), z));
        }
    });
    let (objective, point, slack) =
        best.ok_or_else(|| Error::Infeasible("no grid point meets the shedding budget".into()))?;
    let lip: f64 = free
        .iter()
        .map(|&i| {
            let st = &states[i];
            match st.category {
                Category::Regular => st.params.q * st.params.y_max + st.params.r.abs(),
                Category::Prioritized { .. } => {
                    2.0 * (st.params.y_max + st.target()) + 2.0 * kappa * y_tot
                }
            }
        })
        .sum();
    Ok(GridResult {
        point,
        slack,
        objective,
        slack_bound: 2.0 * resolution * lip,
        points_scanned: scanned,
    })
}
