//! Two-variable accelerated average consensus, the priority-depth encoding
//! built on it, and a summing variant used to distribute global constants.

use serde::Serialize;

use crate::error::{Error, Result, Stage};
use crate::graph::Graph;
use crate::shed::{Category, PriorityAssignment};
use crate::trace::IterationTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
}

impl ConsensusState {
    /// Starts with `θ(0) = ω(0)`.
    pub fn new(initial: Vec<f64>) -> Self {
        ConsensusState {
            theta: initial.clone(),
            omega: initial,
        }
    }

    pub fn max_deviation(&self, target: f64) -> f64 {
        self.theta
            .iter()
            .fold(0.0, |m, t| m.max((t - target).abs()))
    }
}

/// The only thing an agent ever sends: its current `ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsensusMessage {
    pub from: usize,
    pub round: usize,
    pub omega: f64,
}

pub fn outgoing_messages(state: &ConsensusState, round: usize) -> Vec<ConsensusMessage> {
    state
        .omega
        .iter()
        .enumerate()
        .map(|(from, &omega)| ConsensusMessage { from, round, omega })
        .collect()
}

pub fn consensus_step(state: &ConsensusState, graph: &Graph, n: usize) -> ConsensusState {
    let momentum = 1.0 - 2.0 / (9.0 * n as f64 + 1.0);
    let mut theta = Vec::with_capacity(graph.n());
    let mut omega = Vec::with_capacity(graph.n());
    for i in 0..graph.n() {
        let wi = state.omega[i];
        let di = graph.degree(i);
        let pull: f64 = graph
            .neighbors(i)
            .iter()
            .map(|&j| (state.omega[j] - wi) / di.max(graph.degree(j)) as f64)
            .sum();
        let next = wi + 0.5 * pull;
        theta.push(next);
        omega.push(state.theta[i] + momentum * (next - state.theta[i]));
    }
    ConsensusState { theta, omega }
}

/// Initial value whose network average is `1 + Σ_{ℓ≤m} ℓ`.
pub fn encode_priority_initial(category: Category, own_set_size: usize, n: usize) -> Result<f64> {
    if own_set_size == 0 {
        return Err(Error::ZeroCardinality);
    }
    let n = n as f64;
    Ok(match category {
        Category::Prioritized { level } => n * level as f64 / own_set_size as f64,
        Category::Regular => n / own_set_size as f64,
    })
}

/// The average `1 + Σℓ` counts the regular set once, so it must be nonempty.
pub fn encode_assignment(assignment: &PriorityAssignment) -> Result<Vec<f64>> {
    let n = assignment.n();
    if assignment.regular_count() == 0 {
        return Err(Error::ZeroCardinality);
    }
    (0..n)
        .map(|i| {
            encode_priority_initial(assignment.categories[i], assignment.own_cardinality(i), n)
        })
        .collect()
}

/// `(2 + m(m+1)) / 2`.
pub fn theta_steady(m: usize) -> f64 {
    (2.0 + (m * (m + 1)) as f64) / 2.0
}

/// Nearest ladder depth to `theta`, accepted only within `epsilon`.
pub fn decode_m(theta: f64, epsilon: f64, n: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "decoding band {epsilon} must lie in (0, 0.5)"
        )));
    }
    // θ_ss(m) is increasing, so invert the quadratic and check both neighbours.
    let guess = ((-1.0 + (1.0 + 8.0 * (theta - 1.0).max(0.0)).sqrt()) / 2.0).floor() as usize;
    let nearest = [guess.saturating_sub(1), guess, guess + 1]
        .into_iter()
        .filter(|&m| m <= n)
        .min_by(|&a, &b| {
            (theta - theta_steady(a))
                .abs()
                .total_cmp(&(theta - theta_steady(b)).abs())
        })
        .unwrap_or(n);
    let distance = (theta - theta_steady(nearest)).abs();
    if distance > epsilon {
        return Err(Error::Undecodable {
            theta,
            nearest,
            distance,
            epsilon,
        });
    }
    Ok(nearest)
}

/// Rounds after which every `θ_i` is within `epsilon` of the average, given
/// `spread0 = ‖θ(0) − θ_ss·1‖₂`.
///
/// From `‖θ(k) − θ_ss·1‖² ≤ 2(1 − 1/(9n))^{k−1}·spread0²` and
/// `−ln(1 − 1/(9n)) ≥ 1/(9n)`.
pub fn iteration_budget(n: usize, spread0: f64, epsilon: f64) -> usize {
    if spread0 <= epsilon {
        return 1;
    }
    let rounds = 18.0 * n as f64 * (spread0 * std::f64::consts::SQRT_2 / epsilon).ln();
    rounds.ceil() as usize + 1
}

/// Right-hand side of the per-iterate convergence bound at round `k ≥ 1`.
pub fn consensus_spread_bound(n: usize, k: usize, spread0: f64) -> f64 {
    let rho = 1.0 - 1.0 / (9.0 * n as f64);
    2.0 * rho.powf((k as f64 - 1.0) / 2.0) * spread0
}

pub fn l2_spread(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    values
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn run_consensus(graph: &Graph, initial: Vec<f64>, rounds: usize) -> ConsensusState {
    let n = graph.n();
    let mut state = ConsensusState::new(initial);
    for _ in 0..rounds {
        state = consensus_step(&state, graph, n);
    }
    state
}

/// Per-agent estimates of `Σ_i local_values_i`: consensus on the values,
/// then each agent scales its average by `n`. Every estimate is within
/// `n·epsilon` of the true sum.
pub fn average_consensus_scaled(
    graph: &Graph,
    local_values: &[f64],
    n: usize,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if local_values.len() != graph.n() {
        return Err(Error::DimensionMismatch {
            expected: graph.n(),
            found: local_values.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon {epsilon} must be positive"
        )));
    }
    let rounds = iteration_budget(n, l2_spread(local_values), epsilon);
    let state = run_consensus(graph, local_values.to_vec(), rounds);
    Ok(state.theta.iter().map(|t| t * n as f64).collect())
}

/// Outcome of discovering the ladder depth by consensus.
#[derive(Debug, Clone)]
pub struct PriorityDiscovery {
    pub m: usize,
    pub theta: Vec<f64>,
    pub rounds: usize,
    pub trace: IterationTrace,
}

/// Spread bound usable without global knowledge: every encoded value lies
/// in `[0, n²]` and the average is at least 1.
pub fn encoded_spread_bound(n: usize) -> f64 {
    let n = n as f64;
    n.sqrt() * n * n
}

/// Encodes the ladder, runs consensus for the a-priori budget and lets every
/// agent decode. Fails if any agent cannot decode or agents disagree.
pub fn discover_priority_depth(
    graph: &Graph,
    assignment: &PriorityAssignment,
    epsilon: f64,
    trace_stride: usize,
) -> Result<PriorityDiscovery> {
    let n = graph.n();
    if assignment.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: assignment.n(),
        });
    }
    let initial = encode_assignment(assignment)?;
    let rounds = iteration_budget(n, encoded_spread_bound(n), epsilon);
    let mut trace = IterationTrace::new(
        Stage::Consensus,
        (0..n)
            .map(|i| format!("theta{i}"))
            .chain(["theta_spread".to_string()])
            .collect(),
        trace_stride,
    );
    let row = |s: &ConsensusState| {
        let mut v = s.theta.clone();
        v.push(crate::edp::spread(&s.theta));
        v
    };
    let mut state = ConsensusState::new(initial);
    trace.push(0, 0.0, row(&state))?;
    for k in 1..=rounds {
        state = consensus_step(&state, graph, n);
        if trace.wants(k) {
            trace.push(k, 0.0, row(&state))?;
        }
    }
    trace.push_final(rounds, 0.0, row(&state))?;
    let decoded = state
        .theta
        .iter()
        .map(|&t| decode_m(t, epsilon, n))
        .collect::<Result<Vec<_>>>()?;
    let m = decoded[0];
    if let Some(&other) = decoded.iter().find(|&&d| d != m) {
        return Err(Error::InvalidParameter(format!(
            "agents decoded different ladder depths {m} and {other}"
        )));
    }
    Ok(PriorityDiscovery {
        m,
        theta: state.theta,
        rounds,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shed::partition_priorities;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_point_and_two_nodes() {
        let g = Graph::ring(6).unwrap();
        let s = run_consensus(&g, vec![2.5; 6], 50);
        assert!(s.theta.iter().all(|&t| t == 2.5));

        let p = Graph::path(2).unwrap();
        let s = consensus_step(&ConsensusState::new(vec![0.0, 2.0]), &p, 2);
        assert_eq!(s.theta, vec![1.0, 1.0]);
    }

    #[test]
    fn ring_meets_band_at_budget() {
        let g = Graph::ring(30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init: Vec<f64> = (0..30).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mean = init.iter().sum::<f64>() / 30.0;
        let rounds = iteration_budget(30, l2_spread(&init), 0.4);
        let s = run_consensus(&g, init, rounds);
        assert!(s.max_deviation(mean) <= 0.4);
    }

    #[test]
    fn encoding_examples() {
        let a = partition_priorities(&[None; 30]).unwrap();
        let init = encode_assignment(&a).unwrap();
        assert!(init.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert_eq!(theta_steady(0), 1.0);

        let mut p = vec![None; 30];
        p[6] = Some(1);
        p[7] = Some(2);
        p[8] = Some(2);
        p[9] = Some(3);
        let a = partition_priorities(&p).unwrap();
        let init = encode_assignment(&a).unwrap();
        assert_eq!(init[6], 30.0);
        assert_eq!(init[7], 30.0);
        assert_eq!(init[9], 90.0);
        assert!((init[0] - 30.0 / 26.0).abs() < 1e-15);
        let mean = init.iter().sum::<f64>() / 30.0;
        assert!((mean - 7.0).abs() < 1e-12);
        assert_eq!(theta_steady(3), 7.0);

        assert!(matches!(
            encode_priority_initial(Category::Prioritized { level: 1 }, 0, 30),
            Err(Error::ZeroCardinality)
        ));
    }

    #[test]
    fn decoding_examples() {
        assert_eq!(decode_m(1.1, 0.4, 30).unwrap(), 0);
        assert_eq!(decode_m(7.05, 0.4, 30).unwrap(), 3);
        assert!(matches!(
            decode_m(1.6, 0.3, 30),
            Err(Error::Undecodable { .. })
        ));
        assert!(decode_m(1.0, 0.5, 30).is_err());
        for m in 0..=40 {
            assert_eq!(decode_m(theta_steady(m) - 0.39, 0.4, 40).unwrap(), m);
        }
    }

    #[test]
    fn budget_examples() {
        assert_eq!(iteration_budget(30, 0.3, 0.4), 1);
        let k = iteration_budget(30, 100.0, 0.4);
        assert!(k > 1000 && k < 10_000, "{k}");
        let g = Graph::ring(30).unwrap();
        let mut init = vec![0.0; 30];
        init[0] = 100.0 * (30.0f64 / 29.0).sqrt();
        let mean = init[0] / 30.0;
        assert!((l2_spread(&init) - 100.0).abs() < 1e-9);
        assert!(run_consensus(&g, init, k).max_deviation(mean) <= 0.4);

        let k = iteration_budget(2, 2.0, 0.4);
        assert!(k < 100);
        let p = Graph::path(2).unwrap();
        let init = vec![0.0, 2.0 * 2f64.sqrt()];
        let s = run_consensus(&p, init.clone(), k);
        assert!(s.max_deviation(init[1] / 2.0) <= 0.4);
    }

    #[test]
    fn summing_consensus() {
        let g = Graph::path(3).unwrap();
        assert!(average_consensus_scaled(&g, &[0.0; 3], 3, 0.01)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        for est in average_consensus_scaled(&g, &[1.0, 2.0, 3.0], 3, 1e-4).unwrap() {
            assert!((est - 6.0).abs() <= 3e-4);
        }
    }

    #[test]
    fn messages_carry_no_category() {
        let mut p = vec![None; 4];
        p[1] = Some(1);
        let a = partition_priorities(&p).unwrap();
        let state = ConsensusState::new(encode_assignment(&a).unwrap());
        for msg in outgoing_messages(&state, 0) {
            let text = toml::to_string(&msg).unwrap();
            let keys: Vec<&str> = text
                .lines()
                .filter_map(|l| l.split('=').next())
                .map(str::trim)
                .collect();
            assert_eq!(keys, ["from", "round", "omega"]);
        }
    }

    #[test]
    fn discovers_reference_ladder() {
        let mut p = vec![None; 30];
        p[6] = Some(1);
        p[7] = Some(2);
        p[8] = Some(2);
        p[9] = Some(3);
        let a = partition_priorities(&p).unwrap();
        let found = discover_priority_depth(&Graph::complete(30).unwrap(), &a, 0.4, 1000).unwrap();
        assert_eq!(found.m, 3);
        let found = discover_priority_depth(&Graph::ring(30).unwrap(), &a, 0.4, 1000).unwrap();
        assert_eq!(found.m, 3);
    }

    proptest! {
        #[test]
        fn spread_bound_holds_on_random_trees(
            n in 2usize..25,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
            let g = Graph::new(n, &edges).unwrap();
            let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mean = init.iter().sum::<f64>() / n as f64;
            let s0 = l2_spread(&init);
            let mut st = ConsensusState::new(init);
            for k in 1..400 {
                st = consensus_step(&st, &g, n);
                prop_assert!(st.max_deviation(mean) <= consensus_spread_bound(n, k, s0) + 1e-12);
            }
        }
    }
}
