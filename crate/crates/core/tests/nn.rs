use causal_shaping::cmdp::seeded;
use causal_shaping::data::collect;
use causal_shaping::envs::{make_point_mass, PointMassBehavior, PointMassConfig, Skill};
use causal_shaping::nn::*;
use causal_shaping::potential::{train_env_models, PotentialTrainConfig};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn reparam_moments() {
    let mut rng = seeded(5);
    let (mu, sigma) = (1.5, 2.0);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| reparam_sample(&[mu], &[sigma], &standard_normal(&mut rng, 1)).unwrap()[0]).collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((m - mu).abs() < 0.02, "{m}");
    assert!((sd - sigma).abs() < 0.02, "{sd}");
}

#[test]
fn log_prob_stationary_at_mean() {
    let g = gaussian_log_prob_grad(&[0.3, -1.0], &[0.1, -0.4], &[0.3, -1.0]);
    assert_eq!(g.d_mu, vec![0.0, 0.0]);
}

#[test]
fn three_dim_log_prob_factorizes() {
    let (mu, sd, x) = ([0.1, -0.2, 2.0], [0.5, 1.0, 3.0], [1.0, 0.0, -1.0]);
    let joint = gaussian_log_prob(&mu, &sd, &x).unwrap();
    let parts: f64 = (0..3).map(|i| gaussian_log_prob(&mu[i..=i], &sd[i..=i], &x[i..=i]).unwrap()).sum();
    assert!((joint - parts).abs() < 1e-12);
}

/// `mean_i sum_j MLP(mu + exp(log_std) * eps_i)_j` as a function of `[mu, log_std, mlp params]`.
struct PathwiseLoss<'a> {
    mlp: &'a Mlp,
    eps: &'a [f64],
    d: usize,
}

impl Objective for PathwiseLoss<'_> {
    fn loss_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let d = self.d;
        let (mu, ls, w) = (&params[..d], &params[d..2 * d], &params[2 * d..]);
        let n = self.eps.len() / d;
        let mut x = Vec::with_capacity(n * d);
        for i in 0..n {
            let sigma: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
            x.extend(reparam_sample(mu, &sigma, &self.eps[i * d..(i + 1) * d]).unwrap());
        }
        let (y, cache) = self.mlp.forward_batch(w, &x, n).unwrap();
        let out = self.mlp.spec.output_dim;
        let dy = vec![1.0 / n as f64; n * out];
        let mut g = vec![0.0; params.len()];
        let dx = self.mlp.backward(w, &cache, &dy, &mut g[2 * d..], true).unwrap();
        for i in 0..n {
            for j in 0..d {
                g[j] += dx[i * d + j];
                g[d + j] += dx[i * d + j] * ls[j].exp() * self.eps[i * d + j];
            }
        }
        (y.iter().sum::<f64>() / n as f64, g)
    }
}

#[test]
fn pathwise_gradient_through_reparam() {
    let mut rng = seeded(2);
    let spec = MlpSpec { input_dim: 3, output_dim: 2, hidden_dim: 6, n_residual_blocks: 2 };
    let (mlp, mut store) = Mlp::new(spec).unwrap();
    mlp.init(&mut store.data, &mut rng);
    // nonzero block outputs so every path carries gradient
    for v in store.data.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let eps = standard_normal(&mut rng, 5 * 3);
    let mut params = vec![0.2, -0.4, 0.9, -0.3, 0.1, 0.0];
    params.extend(&store.data);
    let err = check_objective(&PathwiseLoss { mlp: &mlp, eps: &eps, d: 3 }, &params, 1e-5);
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn log_prob_input_gradient() {
    // d/dx of the log-density equals -d/dmu at unit scale
    let g = gaussian_log_prob_grad(&[0.5], &[0.0], &[1.5]);
    assert!((g.d_x[0] + g.d_mu[0]).abs() < 1e-15);
    let f = |x: &[f64]| gaussian_log_prob(&[0.5], &[1.0], x).unwrap();
    let fd = finite_difference(&f, &[1.5], 1e-5);
    assert!(max_relative_error(&g.d_x, &fd) < 1e-8);
}

#[test]
fn env_model_training_is_bit_reproducible() {
    let env = make_point_mass(PointMassConfig::default()).unwrap();
    let ds = collect(&mut PointMassBehavior::new(env, Skill::Medium), &PointMassConfig::velocity_mask(), 600, 4).unwrap();
    let cfg = PotentialTrainConfig { env_model_epochs: 2, batch_size: 128, hidden_dim: 8, n_residual_blocks: 1, seed: 9, ..Default::default() };
    let a = train_env_models(&ds, &cfg).unwrap();
    let b = train_env_models(&ds, &cfg).unwrap();
    assert_eq!(a.policy.params.data, b.policy.params.data);
    assert_eq!(a.statediff.params.data, b.statediff.params.data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mlp_squared_loss_gradcheck(seed in any::<u64>(), input in 1usize..5, hidden in 1usize..8, blocks in 0usize..3, n in 1usize..6) {
        let mut rng = seeded(seed);
        let spec = MlpSpec { input_dim: input, output_dim: 1, hidden_dim: hidden, n_residual_blocks: blocks };
        let (mlp, mut store) = Mlp::new(spec).unwrap();
        mlp.init(&mut store.data, &mut rng);
        for v in store.data.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        let inputs: Vec<f64> = (0..n * input).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_objective(&SquaredError { mlp: &mlp, inputs: &inputs, targets: &targets }, &store.data, 1e-5);
        prop_assert!(err <= 1e-4, "{}", err);
    }

    #[test]
    fn log_std_stays_clamped(seed in any::<u64>(), scale in 1.0f64..1e3) {
        let mut rng = seeded(seed);
        let mut reg = GaussianRegressor::new(2, 2, 4, 1, &mut rng).unwrap();
        for v in reg.params.data.iter_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
        let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let (_, sigma) = reg.predict(&x).unwrap();
        for s in sigma {
            prop_assert!((-5.0f64).exp() <= s && s <= 2.0f64.exp());
        }
        let (_, ls) = reg.predict_rows(&x, 1).unwrap();
        for l in ls {
            prop_assert!((-5.0..=2.0).contains(&l));
        }
    }

    #[test]
    fn soft_update_is_convex(seed in any::<u64>(), tau in 0.0f64..=1.0) {
        let mut rng = seeded(seed);
        let (mlp, mut a) = Mlp::new(MlpSpec { input_dim: 2, output_dim: 1, hidden_dim: 3, n_residual_blocks: 1 }).unwrap();
        let mut b = a.clone();
        mlp.init(&mut a.data, &mut rng);
        mlp.init(&mut b.data, &mut rng);
        let before = a.clone();
        soft_update(&mut a, &b, tau).unwrap();
        for i in 0..a.len() {
            let lo = before.data[i].min(b.data[i]);
            let hi = before.data[i].max(b.data[i]);
            prop_assert!(a.data[i] >= lo - 1e-15 && a.data[i] <= hi + 1e-15);
        }
    }
}
