use metatailor::cn_mlp::{init_params, ModelConfig};
use metatailor::rng;
use metatailor::theory_checks::{
    check_condition, cn_last_layer_system, cn_least_squares, forward_last_layer, monte_carlo,
    numerical_rank, perturbed_weights, random_unit_augmentations, MonteCarloConfig, OracleConfig,
};
use proptest::prelude::*;

fn net(seed: u64) -> (ModelConfig, metatailor::cn_mlp::MlpParams) {
    let config = ModelConfig::new(vec![3, 6, 6, 1], false)
        .unwrap()
        .last_layer_cn();
    let w = init_params(&config, seed);
    (config, w)
}

#[test]
fn small_monte_carlo_has_full_rank_and_exact_fits() {
    let cfg = MonteCarloConfig {
        draws: 12,
        oracle: OracleConfig {
            restarts: 2,
            steps: 200,
            ..OracleConfig::default()
        },
        ..MonteCarloConfig::default()
    };
    let report = monte_carlo(&cfg).unwrap();
    assert_eq!(report.condition_held, 12);
    assert_eq!(report.rank_ok, 12);
    assert_eq!(report.violations, 0);
    assert!(report.cn_residual_quantiles[2] <= 1e-8);
    assert_eq!(report, monte_carlo(&cfg).unwrap());
}

#[test]
fn monte_carlo_rejects_too_narrow_last_layer() {
    let cfg = MonteCarloConfig {
        widths: vec![3, 6, 2, 1],
        ..MonteCarloConfig::default()
    };
    assert!(monte_carlo(&cfg).is_err());
}

#[test]
fn more_augmentations_than_cn_parameters_cap_the_rank() {
    let (config, w) = net(2);
    let aug = random_unit_augmentations(15, 3, 8);
    let system = cn_last_layer_system(&config, &w, &aug).unwrap();
    assert!(numerical_rank(&system.matrix) <= 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_system_agrees_with_the_network(seed in 0u64..10_000) {
        let (config, w_hat) = net(1);
        let w = perturbed_weights(&w_hat, 0.1, seed);
        let aug = random_unit_augmentations(4, 3, seed + 1);
        let system = cn_last_layer_system(&config, &w, &aug).unwrap();
        let mut r = rng::seeded(seed + 2);
        let gamma: Vec<f64> = (0..6).map(|_| rng::normal(&mut r)).collect();
        let beta: Vec<f64> = (0..6).map(|_| rng::normal(&mut r)).collect();
        let lin = system.predict(&gamma, &beta);
        let net = forward_last_layer(&config, &w, &aug, &gamma, &beta).unwrap();
        for (a, b) in lin.iter().zip(&net) {
            prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn full_rank_cn_fit_hits_arbitrary_targets(seed in 0u64..10_000) {
        let (config, w_hat) = net(1);
        let w = perturbed_weights(&w_hat, 0.1, seed);
        let aug = random_unit_augmentations(4, 3, seed + 3);
        prop_assert!(check_condition(&aug));
        let system = cn_last_layer_system(&config, &w, &aug).unwrap();
        prop_assume!(numerical_rank(&system.matrix) == 4);
        let mut r = rng::seeded(seed + 4);
        let targets: Vec<f64> = (0..4).map(|_| 3.0 * rng::normal(&mut r)).collect();
        let (gamma, beta, sse) = cn_least_squares(&system, &targets);
        prop_assert!(sse <= 1e-16);
        let out = forward_last_layer(&config, &w, &aug, &gamma, &beta).unwrap();
        for (o, t) in out.iter().zip(&targets) {
            prop_assert!((o - t).abs() <= 1e-8);
        }
    }
}
