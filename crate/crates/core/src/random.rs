//! Seeded generators of random test instances. The solvers themselves are
//! deterministic; only these generators consume randomness.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::oracle::minimum_shortage;
use crate::power::{factor_loss_matrix, BusSpec, LossModel};
use crate::shed::{partition_priorities, PriorityAssignment, ShedParams};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random spanning tree plus each remaining pair with probability `extra`.
pub fn random_connected_graph<R: Rng>(rng: &mut R, n: usize, extra: f64) -> Graph {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for k in 1..n {
        let parent = order[rng.gen_range(0..k)];
        edges.push((parent.min(order[k]), parent.max(order[k])));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.contains(&(i, j)) && rng.gen_bool(extra.clamp(0.0, 1.0)) {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, &edges).expect("a spanning tree is connected")
}

/// `M·Mᵀ` scaled so that the largest entry is about `scale`; rank is random.
pub fn random_psd<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    let rank = rng.gen_range(1..=n);
    let m = DMatrix::from_fn(n, rank, |_, _| rng.gen_range(-1.0..1.0));
    let b = &m * m.transpose();
    let peak = b.iter().fold(0.0f64, |a, v: &f64| a.max(v.abs()));
    if peak > 0.0 {
        b * (scale / peak)
    } else {
        b
    }
}

#[derive(Debug, Clone)]
pub struct EdpInstance {
    pub buses: Vec<BusSpec>,
    pub loss: LossModel,
}

fn random_generators<R: Rng>(rng: &mut R, n: usize, gens: usize) -> (Vec<BusSpec>, LossModel) {
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let mut buses: Vec<BusSpec> = (0..n).map(|i| BusSpec::load(i, 0.0)).collect();
    for &i in &slots[..gens] {
        let lo = rng.gen_range(0.0..3.0);
        buses[i] = BusSpec::generator(
            i,
            lo,
            lo + rng.gen_range(5.0..15.0),
            rng.gen_range(0.02..0.1),
            rng.gen_range(1.0..4.0),
        );
    }
    // Loss coefficients only couple generator buses.
    let scale = rng.gen_range(1e-3..1e-2);
    let dense = random_psd(rng, gens, scale);
    let mut b = DMatrix::zeros(n, n);
    for (r, &i) in slots[..gens].iter().enumerate() {
        for (c, &j) in slots[..gens].iter().enumerate() {
            b[(i, j)] = dense[(r, c)];
        }
    }
    (
        buses,
        factor_loss_matrix(&b, 1e-12).expect("Gram matrices are PSD"),
    )
}

fn spread_demand<R: Rng>(rng: &mut R, buses: &mut [BusSpec], total: f64) {
    let weights: Vec<f64> = buses.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
    let sum: f64 = weights.iter().sum();
    for (b, w) in buses.iter_mut().zip(weights) {
        b.demand = total * w / sum;
    }
}

/// Feasible dispatch instance with `n` buses, at least one generator, and
/// total demand strictly between what the boxes can and must deliver.
pub fn random_edp_instance<R: Rng>(rng: &mut R, n: usize) -> EdpInstance {
    loop {
        let gens = rng.gen_range(1..=n);
        let (mut buses, loss) = random_generators(rng, n, gens);
        let lo: Vec<f64> = buses.iter().map(|b| b.x_min).collect();
        let hi: Vec<f64> = buses.iter().map(|b| b.x_max).collect();
        let floor = lo.iter().sum::<f64>() - loss.evaluate(&lo).unwrap_or(0.0);
        let ceiling = hi.iter().sum::<f64>() - loss.evaluate(&hi).unwrap_or(0.0);
        if ceiling - floor < 1.0 {
            continue;
        }
        let total = floor + rng.gen_range(0.1..0.9) * (ceiling - floor);
        spread_demand(rng, &mut buses, total);
        return EdpInstance { buses, loss };
    }
}

/// Instance whose demand exceeds the deliverable generation by 5 to 40
/// percent of it.
pub fn random_overload_instance<R: Rng>(rng: &mut R, n: usize) -> EdpInstance {
    loop {
        let gens = rng.gen_range(1..=n);
        let (mut buses, loss) = random_generators(rng, n, gens);
        let hi: Vec<f64> = buses.iter().map(|b| b.x_max).collect();
        let ceiling = hi.iter().sum::<f64>() - loss.evaluate(&hi).unwrap_or(0.0);
        let factor = rng.gen_range(1.05..1.4);
        spread_demand(rng, &mut buses, ceiling * factor);
        if minimum_shortage(&buses, &loss).0 > 0.01 {
            return EdpInstance { buses, loss };
        }
    }
}

/// Ladder of `m` nonempty levels placed on random buses, leaving at least
/// one regular bus. Requires `m < n`.
pub fn random_priorities<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<Option<u32>> {
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let prioritized = if m == 0 { 0 } else { rng.gen_range(m..n) };
    let mut out = vec![None; n];
    for (k, &i) in slots[..prioritized].iter().enumerate() {
        let level = if k < m { k + 1 } else { rng.gen_range(1..=m) };
        out[i] = Some(level as u32);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ShedInstance {
    pub assignment: PriorityAssignment,
    pub params: Vec<ShedParams>,
    pub kappa: f64,
    pub y_tot: f64,
}

/// Shedding instance with `m` levels and a budget below total capacity.
pub fn random_shed_instance<R: Rng>(rng: &mut R, n: usize, m: usize) -> ShedInstance {
    let assignment =
        partition_priorities(&random_priorities(rng, n, m)).expect("levels are nonempty");
    let params: Vec<ShedParams> = (0..n)
        .map(|_| ShedParams {
            y_max: rng.gen_range(0.5..1.5),
            q: rng.gen_range(0.5..4.0),
            r: rng.gen_range(0.0..3.0),
        })
        .collect();
    let capacity: f64 = params.iter().map(|p| p.y_max).sum();
    ShedInstance {
        assignment,
        params,
        kappa: rng.gen_range(1.0..5.0),
        y_tot: capacity * rng.gen_range(0.1..0.8),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power::check_power_assumptions;

    #[test]
    fn generators_are_reproducible() {
        let a = random_edp_instance(&mut seeded(7), 5);
        let b = random_edp_instance(&mut seeded(7), 5);
        assert_eq!(a.buses, b.buses);
        assert_eq!(a.loss.b, b.loss.b);
    }

    #[test]
    fn instances_meet_their_contracts() {
        let mut rng = seeded(11);
        for _ in 0..50 {
            let g = random_connected_graph(&mut rng, 12, 0.1);
            assert_eq!(g.n(), 12);
            let inst = random_edp_instance(&mut rng, 6);
            assert!(check_power_assumptions(&inst.buses, &inst.loss)
                .iter()
                .all(|f| f.holds));
            let over = random_overload_instance(&mut rng, 4);
            assert!(minimum_shortage(&over.buses, &over.loss).0 > 0.0);
            let m = rng.gen_range(0..=4);
            assert!(random_priorities(&mut rng, 5, m).contains(&None));
            let shed = random_shed_instance(&mut rng, 6, m);
            assert_eq!(shed.assignment.m(), m);
        }
    }
}
