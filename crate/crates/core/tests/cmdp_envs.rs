#![allow(clippy::needless_range_loop)]

use causal_shaping::cmdp::*;
use causal_shaping::data::{collect, estimate_tabular, EmpiricalTabularModel, TabularDims};
use causal_shaping::envs::*;
use causal_shaping::solver::{naive_vi, oracle_interventional_vi, Coverage, SolveOptions};
use proptest::prelude::*;

fn two_noise_cmdp() -> TabularCMDP {
    TabularCMDP {
        n_states: 3,
        n_actions: 2,
        n_noise: 2,
        noise_probs: vec![0.5, 0.5],
        transition: vec![vec![vec![1, 2], vec![0, 0]]; 3],
        behavior: vec![vec![0, 0]; 3],
        reward: vec![vec![vec![0.0, 1.0], vec![0.5, 0.5]]; 3],
        gamma: 0.9,
        reward_bound: 1.0,
        initial_state_probs: vec![1.0, 0.0, 0.0],
    }
}

#[test]
fn noise_frequencies_match_probabilities() {
    let c = two_noise_cmdp();
    let mut rng = seeded(1);
    let n = 100_000;
    let ones = (0..n).filter(|_| c.behavioral_step(0, &mut rng).unwrap().noise == 1).count();
    assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
}

#[test]
fn degenerate_confounder_fixes_the_action() {
    let mut c = two_noise_cmdp();
    c.n_noise = 1;
    c.noise_probs = vec![1.0];
    c.transition = vec![vec![vec![1], vec![2]]; 3];
    c.reward = vec![vec![vec![1.0], vec![1.0]]; 3];
    c.behavior = vec![vec![1]; 3];
    c.validate().unwrap();
    let mut rng = seeded(0);
    for _ in 0..50 {
        let out = c.behavioral_step(0, &mut rng).unwrap();
        assert_eq!((out.action, out.reward, out.next_state), (1, 1.0, 2));
    }
}

#[test]
fn intervention_overrides_behavior() {
    let c = two_noise_cmdp();
    let mut rng = seeded(3);
    for _ in 0..20 {
        let (y, s2) = c.interventional_step(1, 1, &mut rng).unwrap();
        assert_eq!((y, s2), (0.5, 0));
    }
    assert!(c.interventional_step(3, 0, &mut rng).is_err());
    assert!(c.interventional_step(0, 2, &mut rng).is_err());
    assert!(c.behavioral_step(9, &mut rng).is_err());
}

#[test]
fn interventional_frequencies_match_exact_model() {
    let c = gen_random_tabular(&RandomCMDPConfig { seed: 5, ..Default::default() }).unwrap();
    let model = c.exact_interventional_model();
    let mut rng = seeded(11);
    let n = 100_000;
    for (s, x) in [(0, 0), (3, 2), (7, 1)] {
        let mut freq = vec![0.0; c.n_states];
        for _ in 0..n {
            freq[c.interventional_step(s, x, &mut rng).unwrap().1] += 1.0 / n as f64;
        }
        // direct summation over u
        let mut exact = vec![0.0; c.n_states];
        for u in 0..c.n_noise {
            exact[c.transition[s][x][u]] += c.noise_probs[u];
        }
        for s2 in 0..c.n_states {
            assert!((freq[s2] - exact[s2]).abs() < 0.01);
            assert!((model.transition[s][x][s2] - exact[s2]).abs() < 1e-15);
        }
    }
}

#[test]
fn exact_model_splits_symmetric_noise() {
    let m = two_noise_cmdp().exact_interventional_model();
    assert_eq!(m.transition[0][0], vec![0.0, 0.5, 0.5]);
    assert_eq!(m.reward[0][0], 0.5);
}

#[test]
fn interventional_step_is_reproducible() {
    let c = gen_random_tabular(&RandomCMDPConfig { seed: 8, ..Default::default() }).unwrap();
    let run = || {
        let mut rng = seeded(42);
        (0..100).map(|i| c.interventional_step(i % 8, i % 3, &mut rng).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn masking_examples() {
    assert_eq!(mask_observation(&[1.0, 2.0, 3.0], &MaskSpec::none(3)).unwrap(), vec![1.0, 2.0, 3.0]);
    let m = MaskSpec::new(3, [1]).unwrap();
    assert_eq!(m.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 3.0]);
    let hopper = MaskSpec::new(11, [1]).unwrap();
    assert_eq!(hopper.apply(&[0.0; 11]).unwrap().len(), 10);
    assert!(m.apply(&[1.0, 2.0]).is_err());
    assert!(MaskSpec::new(3, [3]).is_err());
}

#[test]
fn json_round_trip_is_exact() {
    for seed in 0..20 {
        let c = gen_random_tabular(&RandomCMDPConfig { seed, n_noise: 6, ..Default::default() }).unwrap();
        let back = TabularCMDP::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }
    let doc: serde_json::Value = serde_json::from_str(&two_noise_cmdp().to_json().unwrap()).unwrap();
    for key in ["version", "n_states", "noise_probs", "transition", "behavior", "reward", "gamma", "b", "init"] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    let bad = two_noise_cmdp().to_json().unwrap().replace("\"version\":1", "\"version\":7");
    assert!(TabularCMDP::from_json(&bad).is_err());
}

/// Observational `P(s' | s, x)` by counting behavioral rollouts.
fn observational_counts(c: &TabularCMDP, steps: usize, seed: u64) -> EmpiricalTabularModel {
    let ds = collect(&mut TabularBehavior::new(c, 50, false), &MaskSpec::none(1), steps, seed).unwrap();
    estimate_tabular(&ds, TabularDims::from(c), 0.0).unwrap()
}

#[test]
fn unconfounded_behavior_matches_interventional_kernel() {
    let c = gen_random_tabular(&RandomCMDPConfig { seed: 2, confound_strength: 0.0, ..Default::default() }).unwrap();
    let m = observational_counts(&c, 200_000, 4);
    let exact = c.exact_interventional_model();
    for s in 0..c.n_states {
        for x in 0..c.n_actions {
            if m.counts_sx[s * c.n_actions + x] < 2000.0 {
                continue;
            }
            let obs = m.next_state_dist(s, x);
            for s2 in 0..c.n_states {
                assert!((obs[s2] - exact.transition[s][x][s2]).abs() < 0.03, "({s},{x},{s2})");
            }
        }
    }
}

#[test]
fn confounded_behavior_differs_from_interventional_kernel() {
    let c = gen_random_tabular(&RandomCMDPConfig { seed: 2, confound_strength: 1.0, ..Default::default() }).unwrap();
    let est = EmpiricalTabularModel::exact_population(&c).estimates();
    let exact = c.exact_interventional_model();
    let mut gap: f64 = 0.0;
    for s in 0..c.n_states {
        for x in 0..c.n_actions {
            for s2 in 0..c.n_states {
                gap = gap.max((est.transition[s][x][s2] - exact.transition[s][x][s2]).abs());
            }
        }
    }
    assert!(gap > 0.2, "gap {gap}");
}

#[test]
fn unconfounded_naive_vi_recovers_optimal_values() {
    for seed in 0..10 {
        let c = gen_random_tabular(&RandomCMDPConfig { seed, confound_strength: 0.0, n_actions: 1, ..Default::default() }).unwrap();
        let est = EmpiricalTabularModel::exact_population(&c).estimates();
        let (naive, _) = naive_vi(&est, c.gamma, Coverage::Exclude, SolveOptions::default()).unwrap();
        let (vstar, _) = oracle_interventional_vi(&c, SolveOptions::default()).unwrap();
        assert!(naive.sup_distance(&vstar) < 1e-8);
    }
}

#[test]
fn point_mass_at_rest_stays_put() {
    let mut env = make_point_mass(PointMassConfig { drift_std: 0.0, ..Default::default() }).unwrap();
    let s0 = env.reset(5);
    let d0 = ((s0[0] - 1.0).powi(2) + (s0[1] - 1.0).powi(2)).sqrt();
    let out = env.step(&[0.0, 0.0]);
    assert_eq!(&out.obs[..2], &s0[..2]);
    assert_eq!(out.reward, -d0);
}

#[test]
fn point_mass_rewards_never_exceed_zero() {
    let mut env = make_point_mass(PointMassConfig::default()).unwrap();
    let mut rng = seeded(0);
    let ctrl = scripted_behavior(Skill::Simple);
    for ep in 0..50 {
        env.reset(ep);
        for _ in 0..200 {
            let a = ctrl.act(&env, &mut rng);
            assert!(env.step(&a).reward <= 0.0);
        }
    }
}

#[test]
fn point_mass_reset_is_deterministic() {
    let mut a = make_point_mass(PointMassConfig::default()).unwrap();
    let mut b = a.clone();
    assert_eq!(a.reset(17), b.reset(17));
    assert_eq!(a.wind(), b.wind());
}

#[test]
fn expert_reaches_the_goal() {
    let mut env = make_point_mass(PointMassConfig::default()).unwrap();
    let ctrl = scripted_behavior(Skill::Expert);
    let mut rng = seeded(0);
    for ep in 0..20 {
        env.reset(100 + ep);
        for _ in 0..200 {
            let a = ctrl.act(&env, &mut rng);
            env.step(&a);
        }
        assert!(env.distance_to_goal() < 0.05, "episode {ep}: {}", env.distance_to_goal());
    }
}

#[test]
fn simple_actions_are_uniform() {
    let env = make_point_mass(PointMassConfig::default()).unwrap();
    let ctrl = scripted_behavior(Skill::Simple);
    let mut rng = seeded(9);
    let n = 10_000;
    let mut xs: Vec<f64> = (0..n).map(|_| ctrl.act(&env, &mut rng)[0]).collect();
    xs.sort_by(f64::total_cmp);
    // KS distance against U(-1, 1)
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x + 1.0) / 2.0;
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.63 / (n as f64).sqrt(), "KS distance {d}");
}

#[test]
fn skill_levels_are_ordered() {
    let env = make_point_mass(PointMassConfig::default()).unwrap();
    let mean = |s| {
        let r = causal_shaping::agent::evaluate_scripted(&env, s, 100, 3);
        r.iter().sum::<f64>() / r.len() as f64
    };
    let (e, m, s) = (mean(Skill::Expert), mean(Skill::Medium), mean(Skill::Simple));
    assert!(e > m && m > s, "{e} {m} {s}");
}

#[test]
fn push_and_reverse_returns_to_start() {
    let cfg = PointMassConfig { drift_std: 0.0, damping: 0.0, ..Default::default() };
    let mut env = make_point_mass(cfg).unwrap();
    env.reset(0);
    env.set_state([0.2, -0.3], [0.0, 0.0]);
    env.step(&[0.5, -0.25]);
    env.step(&[0.0, 0.0]);
    env.step(&[-0.5, 0.25]);
    // the impulse is cancelled: velocity is zero again and the drift is
    // undone by replaying the motion backwards
    let mid = env.state();
    assert!(mid[2].abs() < 1e-12 && mid[3].abs() < 1e-12);
    env.step(&[-0.5, 0.25]);
    env.step(&[0.0, 0.0]);
    env.step(&[0.5, -0.25]);
    let end = env.state();
    assert!((end[0] - 0.2).abs() < 1e-9 && (end[1] + 0.3).abs() < 1e-9, "{end:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_models_satisfy_invariants(
        seed in any::<u64>(),
        ns in 1usize..12,
        na in 1usize..5,
        nu in 1usize..7,
        kappa in 0.0f64..=1.0,
    ) {
        let cfg = RandomCMDPConfig { n_states: ns, n_actions: na, n_noise: nu, confound_strength: kappa, seed, ..Default::default() };
        let c = gen_random_tabular(&cfg).unwrap();
        prop_assert!(c.validate().is_ok());
        let m = c.exact_interventional_model();
        for s in 0..ns {
            for x in 0..na {
                let total: f64 = m.transition[s][x].iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masking_preserves_order(full in prop::collection::vec(-10.0f64..10.0, 1..12), picks in prop::collection::vec(any::<prop::sample::Index>(), 0..5)) {
        let d = full.len();
        let hidden: Vec<usize> = picks.iter().map(|i| i.index(d)).collect();
        let m = MaskSpec::new(d, hidden.iter().copied()).unwrap();
        let out = m.apply(&full).unwrap();
        prop_assert_eq!(out.len(), m.masked_dim());
        let expect: Vec<f64> = (0..d).filter(|i| !hidden.contains(i)).map(|i| full[i]).collect();
        prop_assert_eq!(out, expect);
    }
}
