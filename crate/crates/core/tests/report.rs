use causal_shaping::agent::CurvePoint;
use causal_shaping::cmdp::seeded;
use causal_shaping::report::*;
use proptest::prelude::*;
use rand::Rng;

fn oracle_iqm(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cut = s.len() / 4;
    let kept: Vec<f64> = s.into_iter().skip(cut).collect();
    let kept = &kept[..kept.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn oracle_smooth(v: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= w {
            acc -= v[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn summary(method: &str, env: &str, bests: &[f64]) -> RunSummary {
    RunSummary {
        method: method.into(),
        env: env.into(),
        seeds: bests.iter().enumerate().map(|(i, &b)| SeedSummary { seed: i as u64, best: b, final_return: b, steps_to_best: 0 }).collect(),
    }
}

#[test]
fn iqm_and_smooth_match_oracles() {
    let mut rng = seeded(77);
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        assert!((iqm(&v).unwrap() - oracle_iqm(&v)).abs() < 1e-12);
        let w = rng.random_range(1..15);
        for (a, b) in smooth(&v, w).unwrap().iter().zip(oracle_smooth(&v, w)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn aggregate_matches_oracle() {
    let mut rng = seeded(78);
    for _ in 0..1000 {
        let n_env = rng.random_range(1..8);
        let mut runs = Vec::new();
        let mut bases = Vec::new();
        let mut ratios = Vec::new();
        for e in 0..n_env {
            let env = format!("env{e}");
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(1.0..50.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(1.0..50.0)).collect();
            ratios.push((a.iter().sum::<f64>() / 5.0) / (b.iter().sum::<f64>() / 5.0));
            runs.push(summary("m", &env, &a));
            bases.push(summary("base", &env, &b));
        }
        bases.reverse();
        let row = aggregate(&runs, &bases).unwrap();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let mut sorted = ratios.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = sorted.len();
        let median = if k % 2 == 1 { sorted[k / 2] } else { (sorted[k / 2 - 1] + sorted[k / 2]) / 2.0 };
        assert!((row.mean - mean).abs() < 1e-12);
        assert!((row.median - median).abs() < 1e-12);
        assert!((row.iqm - oracle_iqm(&ratios)).abs() < 1e-12);
    }
}

#[test]
fn aggregate_examples() {
    let base = summary("base", "pm", &[-10.0, -20.0]);
    let row = aggregate(std::slice::from_ref(&base), std::slice::from_ref(&base)).unwrap();
    assert_eq!((row.mean, row.median, row.iqm), (1.0, 1.0, 1.0));
    let doubled = summary("m", "pm", &[-20.0, -40.0]);
    assert_eq!(aggregate(&[doubled], &[base]).unwrap().mean, 2.0);
    let zero = summary("base", "pm", &[0.0]);
    assert!(aggregate(&[summary("m", "pm", &[1.0])], &[zero]).is_err());
    let csv = aggregate_to_csv("m", &row);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, ["statistic,m", "normalized_mean,1.0000", "normalized_median,1.0000", "normalized_iqm,1.0000"]);
}

#[test]
fn seed_summary_uses_smoothed_best() {
    let curve: Vec<CurvePoint> = [0.0, 10.0, -10.0, 4.0]
        .iter()
        .enumerate()
        .map(|(i, &m)| CurvePoint { step: (i + 1) * 100, eval_mean: m, eval_std: 0.0, episodes: i })
        .collect();
    let s = SeedSummary::from_curve(3, &curve, 2).unwrap();
    assert_eq!(s.best, 5.0);
    assert_eq!(s.steps_to_best, 200);
    assert_eq!(s.final_return, 4.0);
}

proptest! {
    #[test]
    fn iqm_lies_between_extremes(v in prop::collection::vec(-1e6f64..1e6, 1..60)) {
        let q = iqm(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(q >= lo - 1e-9 && q <= hi + 1e-9);
    }
}
