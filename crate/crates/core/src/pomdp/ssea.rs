//! Belief-set growth by explorative simulation: from every belief in the
//! set, try each action once and keep the successor farthest from the set.

use rand::Rng;

use super::{admissible_actions, update_belief, Belief, Pomdp};

/// Draws an index from sparse `(index, prob)` pairs.
pub fn sample_sparse<R: Rng + ?Sized>(pairs: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, p) in pairs {
        acc += p;
        if u < acc {
            return i;
        }
    }
    pairs.iter().rev().find(|x| x.1 > 0.0).map_or(0, |x| x.0)
}

/// Smallest L1 distance from `b` to any member of `set`.
pub fn distance_to_set(b: &Belief, set: &[Belief]) -> f64 {
    set.iter().map(|x| b.l1_distance(x)).fold(f64::INFINITY, f64::min)
}

/// Largest distance from a reference belief to its nearest set member.
pub fn coverage_radius(set: &[Belief], reference: &[Belief]) -> f64 {
    reference.iter().map(|b| distance_to_set(b, set)).fold(0.0, f64::max)
}

/// Picks the sampled successor farthest from `set`; `None` when every
/// candidate is already in the set.
pub fn ssea_sample<M: Pomdp + ?Sized, R: Rng + ?Sized>(set: &[Belief], model: &M, rng: &mut R) -> Option<(Belief, f64)> {
    let mut best: Option<(Belief, f64)> = None;
    let mut trans = Vec::new();
    let mut obs = Vec::new();
    for b in set {
        for a in admissible_actions(model, b) {
            let s = sample_sparse(b.entries(), rng);
            model.transitions(s, a, &mut trans);
            let s2 = sample_sparse(&trans, rng);
            model.observations(s2, a, &mut obs);
            let o = sample_sparse(&obs, rng);
            let Ok(cand) = update_belief(model, b, a, o) else { continue };
            let d = distance_to_set(&cand, set);
            if d > 1e-12 && best.as_ref().is_none_or(|x| d > x.1) {
                best = Some((cand, d));
            }
        }
    }
    best
}

/// Grows `{b0}` by up to `count` SSEA additions.
pub fn ssea_grow<M: Pomdp + ?Sized, R: Rng + ?Sized>(b0: &Belief, model: &M, count: usize, rng: &mut R) -> Vec<Belief> {
    let mut set = vec![b0.clone()];
    for _ in 0..count {
        match ssea_sample(&set, model, rng) {
            Some((b, _)) => set.push(b),
            None => break,
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::TabularPomdp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_set_adds_nothing() {
        // fully observed cycle: every successor of a corner is a corner already held
        let m = TabularPomdp::fully_observed(2, vec![vec![vec![(1, 1.0)], vec![(0, 1.0)]]], vec![vec![0.0]; 2], 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(ssea_sample(&[Belief::unit(0), Belief::unit(1)], &m, &mut rng).is_none());
    }

    #[test]
    fn single_candidate_distance() {
        // from (0.5, 0.5) the only successor is (0.8, 0.2): L1 distance 0.6
        let m = TabularPomdp {
            n_states: 2,
            n_actions: 1,
            n_obs: 1,
            discount: 0.9,
            transition: vec![vec![vec![(0, 0.8), (1, 0.2)], vec![(0, 0.8), (1, 0.2)]]],
            observation: vec![vec![vec![(0, 1.0)], vec![(0, 1.0)]]],
            reward: vec![vec![0.0]; 2],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, d) = ssea_sample(&[Belief::uniform(2)], &m, &mut rng).unwrap();
        assert!((d - 0.6).abs() < 1e-12);
        assert!((b.prob(0) - 0.8).abs() < 1e-12);
    }
}
