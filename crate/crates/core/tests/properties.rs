use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use swipt_pomdp::dynamics::{energy_overflow, step_energy, step_queue};
use swipt_pomdp::harness::baselines::baseline_policy;
use swipt_pomdp::harness::episode::{episode_trace, monte_carlo, run_episode};
use swipt_pomdp::harness::{Calibration, PolicyKind, ScenarioConfig};
use swipt_pomdp::control::Policy;
use swipt_pomdp::pomdp::{observation_prob, update_belief, AlphaVector, Belief, Hsvi, HsviConfig, LowerBound, TabularPomdp, UpperBound, UpperInit};

fn belief(n: usize) -> impl Strategy<Value = Belief> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("all-zero weights", |w| {
        let entries: Vec<(usize, f64)> = w.into_iter().enumerate().filter(|x| x.1 > 1e-6).collect();
        Belief::normalized(entries).ok()
    })
}

fn desk() -> &'static (ScenarioConfig, Calibration, Policy) {
    static DESK: OnceLock<(ScenarioConfig, Calibration, Policy)> = OnceLock::new();
    DESK.get_or_init(|| {
        let mut c = ScenarioConfig::desk("props");
        c.model.calibration_slots = 500;
        let cal = Calibration::run(&c);
        let p = baseline_policy(PolicyKind::POpt, &c, &cal).unwrap().policy;
        (c, cal, p)
    })
}

proptest! {
    #[test]
    fn upper_insert_never_raises_the_bound(
        corners in prop::collection::vec(0.0f64..10.0, 4),
        point in belief(4),
        cut in 0.0f64..1.0,
        probes in prop::collection::vec(belief(4), 1..8),
    ) {
        let mut ub = UpperBound::new(corners, 4).unwrap();
        let at = ub.value(&point);
        let before: Vec<f64> = probes.iter().map(|b| ub.value(b)).collect();
        ub.insert(point, at * cut);
        for (b, v) in probes.iter().zip(before) {
            prop_assert!(ub.value(b) <= v + 1e-9);
        }
    }

    #[test]
    fn lower_bound_is_convex(
        vals in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
        a in belief(3),
        b in belief(3),
        lambda in 0.0f64..1.0,
    ) {
        let lb = LowerBound::new(vals.into_iter().enumerate().map(|(i, values)| AlphaVector { values, action: i }).collect());
        let mix: Vec<(usize, f64)> = (0..3).map(|s| (s, lambda * a.prob(s) + (1.0 - lambda) * b.prob(s))).collect();
        let m = Belief::normalized(mix).unwrap();
        let v = |x: &Belief| lb.value(x).unwrap().0;
        prop_assert!(v(&m) <= lambda * v(&a) + (1.0 - lambda) * v(&b) + 1e-9);
    }

    #[test]
    fn updated_beliefs_are_normalized(seed in any::<u64>(), start in belief(5), a in 0usize..3, o in 0usize..3) {
        let m = TabularPomdp::random(5, 3, 3, 0.9, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assume!(observation_prob(&m, o, a, &start) > 1e-12);
        let next = update_belief(&m, &start, a, o).unwrap();
        let total: f64 = next.entries().iter().map(|x| x.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(next.entries().iter().all(|x| x.1 >= 0.0));
    }

    #[test]
    fn buffers_stay_in_range(q in 0u32..40, served in 0u32..40, arrived in 0u32..40, e in 0u32..12, used in 0u32..12, h in 0u32..12) {
        prop_assert!(step_queue(q.min(30), served, arrived, 30) <= 30);
        if used <= e.min(10) {
            let e = e.min(10);
            let next = step_energy(e, used, h, 10).unwrap();
            prop_assert_eq!(next + energy_overflow(e, used, h, 10), e - used + h);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn root_gap_log_is_monotone(seed in any::<u64>(), n in 2usize..5) {
        let m = TabularPomdp::random(n, 2, 2, 0.9, &mut ChaCha8Rng::seed_from_u64(seed));
        let b0 = Belief::uniform(n);
        let cfg = HsviConfig { eps: 1e-2, max_iterations: 200, upper_init: UpperInit::FastInformed, ..Default::default() };
        let r = Hsvi::new(&m, cfg, None, &b0).unwrap().solve(&b0).unwrap();
        for w in r.log.windows(2) {
            prop_assert!(w[1].root_upper - w[1].root_lower <= w[0].root_upper - w[0].root_lower + 1e-12);
            prop_assert!(w[1].root_lower >= w[0].root_lower - 1e-12);
            prop_assert!(w[1].root_upper <= w[0].root_upper + 1e-12);
        }
        prop_assert!(r.root_lower <= r.root_upper + 1e-8);
    }

    #[test]
    fn episodes_conserve_energy_and_replay(seed in any::<u64>(), episode in 0usize..1000) {
        let (c, cal, p) = desk();
        let trace = episode_trace(c, seed, episode, 200);
        let a = run_episode(c, cal, p, &trace).unwrap();
        prop_assert!(a.energy_balanced());
        let b = run_episode(c, cal, p, &episode_trace(c, seed, episode, 200)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn confidence_half_width_shrinks_with_episodes() {
    let (c, cal, p) = desk();
    let few = monte_carlo(c, cal, p, 30, 200, 9).unwrap();
    let many = monte_carlo(c, cal, p, 120, 200, 9).unwrap();
    // power is constant under this policy, delay is not
    let ratio = few.delay_ms_ci / many.delay_ms_ci;
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}
