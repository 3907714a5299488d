use metatailor::autodiff::{finite_diff_check, Graph, Tensor};
use metatailor::losses::{
    invariants_of, pendulum_energy_loss, Body, ConservationLoss, NormStats, PendulumEnergyLoss,
    PendulumParams, PerRowLoss, SystemState, MOMENTUM_WEIGHT,
};
use metatailor::rng;
use proptest::prelude::*;

fn random_state(seed: u64) -> SystemState {
    let mut r = rng::seeded(seed);
    let bodies = (0..5)
        .map(|i| Body {
            x: 100.0 * i as f64 + rng::uniform(&mut r, 0.0, 50.0),
            y: rng::uniform(&mut r, 50.0, 250.0),
            vx: rng::normal(&mut r),
            vy: rng::normal(&mut r),
            m: rng::uniform(&mut r, 0.15, 0.25),
        })
        .collect();
    SystemState { bodies }
}

fn unit_stats(d: usize) -> NormStats {
    NormStats {
        mean: vec![0.0; d],
        std: vec![1.0; d],
    }
}

fn row(s: &SystemState) -> Tensor {
    let f = s.to_flat();
    Tensor::matrix(1, f.len(), f)
}

#[test]
fn conservation_loss_gradient_matches_finite_differences() {
    let x = random_state(1);
    let mut y = random_state(2);
    // Keep the prediction near the input so distances stay well separated.
    for (a, b) in y.bodies.iter_mut().zip(&x.bodies) {
        a.x = b.x + 0.3 * a.vx;
        a.y = b.y + 0.3 * a.vy;
    }
    let loss = ConservationLoss::new(unit_stats(25), 1.0).unwrap();
    let xt = row(&x);
    let err = finite_diff_check(
        |g, yhat| loss.mean(g.leaf(xt.clone()), yhat),
        &row(&y),
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn doubled_velocities_violate_energy_and_momentum_as_predicted() {
    let x = random_state(3);
    let mut y = x.clone();
    for b in &mut y.bodies {
        b.vx *= 2.0;
        b.vy *= 2.0;
    }
    let inv = invariants_of(&x, 1.0).unwrap();
    let kinetic: f64 = x
        .bodies
        .iter()
        .map(|b| 0.5 * b.m * (b.vx * b.vx + b.vy * b.vy))
        .sum();
    // Kinetic energy quadruples and momentum doubles; potential is unchanged.
    let want = 3.0 * kinetic + MOMENTUM_WEIGHT * (inv.momentum[0].abs() + inv.momentum[1].abs());
    let loss = ConservationLoss::new(unit_stats(25), 1.0).unwrap();
    let g = Graph::new();
    let got = loss.per_row(g.leaf(row(&x)), g.leaf(row(&y))).item();
    assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
}

#[test]
fn conservation_loss_ignores_predicted_masses() {
    let x = random_state(4);
    let mut y = x.clone();
    for b in &mut y.bodies {
        b.m *= 3.0;
    }
    let loss = ConservationLoss::new(unit_stats(25), 1.0).unwrap();
    let g = Graph::new();
    assert_eq!(loss.per_row(g.leaf(row(&x)), g.leaf(row(&y))).item(), 0.0);
}

#[test]
fn pendulum_loss_matches_the_direct_formula() {
    let p = PendulumParams {
        mass: 1.3,
        length: 0.8,
        gravity: 9.81,
    };
    let states = [[0.3, -1.1], [-2.0, 0.4], [1.0, 0.0], [0.0, 2.5]];
    let preds = [[0.35, -1.0], [-1.9, 0.1], [1.2, 0.3], [0.1, 2.4]];
    let flat = |s: &[[f64; 2]]| Tensor::matrix(s.len(), 2, s.iter().flatten().copied().collect());
    let g = Graph::new();
    let per_row =
        PendulumEnergyLoss { params: p }.per_row(g.leaf(flat(&states)), g.leaf(flat(&preds)));
    let mean = pendulum_energy_loss(g.leaf(flat(&states)), g.leaf(flat(&preds)), p).item();
    let energy = |t: f64, w: f64| 0.5 * 1.3 * 0.64 * w * w + 1.3 * 9.81 * 0.8 * (1.0 - t.cos());
    let mut total = 0.0;
    for (i, (s, q)) in states.iter().zip(&preds).enumerate() {
        let want = (energy(q[0], q[1]) - energy(s[0], s[1])).abs();
        assert!((per_row.value().data()[i] - want).abs() <= 1e-12);
        assert!((p.energy(s[0], s[1]) - energy(s[0], s[1])).abs() <= 1e-12);
        total += want;
    }
    assert!((mean - total / 4.0).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conserved_predictions_have_zero_loss(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        // A rigid translation keeps every invariant.
        let x = random_state(seed);
        let mut y = x.clone();
        for b in &mut y.bodies {
            b.x += shift;
            b.y -= shift;
        }
        let loss = ConservationLoss::new(unit_stats(25), 1.0).unwrap();
        let g = Graph::new();
        let v = loss.per_row(g.leaf(row(&x)), g.leaf(row(&y))).item();
        let scale = invariants_of(&x, 1.0).unwrap().energy.abs().max(1.0);
        prop_assert!(v <= 1e-12 * scale, "{v}");
    }

    #[test]
    fn conservation_loss_is_normalization_invariant(seed in 0u64..10_000) {
        // Evaluating on normalized rows with the matching stats gives the raw value.
        let x = random_state(seed);
        let y = random_state(seed + 1);
        let mut r = rng::seeded(seed);
        let stats = NormStats {
            mean: (0..25).map(|_| rng::uniform(&mut r, -5.0, 5.0)).collect(),
            std: (0..25).map(|_| rng::uniform(&mut r, 0.5, 3.0)).collect(),
        };
        let norm = |s: &SystemState| Tensor::matrix(1, 25, stats.normalize(&s.to_flat()));
        let g = Graph::new();
        let raw = ConservationLoss::new(unit_stats(25), 1.0).unwrap().per_row(g.leaf(row(&x)), g.leaf(row(&y))).item();
        let scaled = ConservationLoss::new(stats.clone(), 1.0).unwrap().per_row(g.leaf(norm(&x)), g.leaf(norm(&y))).item();
        prop_assert!((raw - scaled).abs() <= 1e-9 * raw.abs().max(1.0));
    }
}
