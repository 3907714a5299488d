use std::f64::consts::PI;

use metatailor::losses::{invariants_of, Body, PendulumParams, SystemState};
use metatailor::physics_data::{
    build_dataset, build_pendulum_dataset, rk4_step, simulate_pendulum, validate, Dataset,
    GeneratorConfig, PendulumDataConfig, Split,
};

/// Two unit masses two apart, circling their midpoint at speed 1/2 (G = 1).
/// The orbit radius is 1, so the period is `2 pi r / v = 4 pi`.
fn binary() -> SystemState {
    SystemState {
        bodies: vec![
            Body {
                x: 1.0,
                y: 0.0,
                vx: 0.0,
                vy: 0.5,
                m: 1.0,
            },
            Body {
                x: -1.0,
                y: 0.0,
                vx: 0.0,
                vy: -0.5,
                m: 1.0,
            },
        ],
    }
}

/// Largest position error against the exact orbit after one period in `n` steps.
fn orbit_error(n: usize) -> (f64, f64) {
    let period = 4.0 * PI;
    let dt = period / n as f64;
    let mut s = binary();
    let e0 = invariants_of(&s, 1.0).unwrap().energy;
    let mut worst = 0.0f64;
    let mut drift = 0.0f64;
    for k in 1..=n {
        s = rk4_step(&s, dt, 1.0, 0.0).unwrap();
        let phase = 0.5 * dt * k as f64;
        let (c, sn) = (phase.cos(), phase.sin());
        let err = ((s.bodies[0].x - c).powi(2) + (s.bodies[0].y - sn).powi(2)).sqrt();
        worst = worst.max(err);
        let e = invariants_of(&s, 1.0).unwrap().energy;
        drift = drift.max(((e - e0) / e0).abs());
    }
    (worst, drift)
}

#[test]
fn circular_binary_follows_the_exact_orbit() {
    let (err, drift) = orbit_error(200);
    assert!(err <= 1e-4, "position error {err}");
    assert!(drift <= 1e-6, "energy drift {drift}");
}

#[test]
fn integrator_is_fourth_order() {
    let e: Vec<f64> = [50, 100, 200].iter().map(|&n| orbit_error(n).0).collect();
    for w in e.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(
            (3.5..=4.5).contains(&order),
            "observed order {order} from {e:?}"
        );
    }
}

#[test]
fn undamped_pendulum_conserves_energy() {
    let p = PendulumParams::default();
    let traj = simulate_pendulum(&p, 0.0, 0.01, 1000, 1.2, -0.4).unwrap();
    let e0 = p.energy(traj[0][0], traj[0][1]);
    let drift = traj
        .iter()
        .map(|s| ((p.energy(s[0], s[1]) - e0) / e0).abs())
        .fold(0.0, f64::max);
    assert!(drift <= 1e-6, "relative drift {drift}");
}

#[test]
fn damped_pendulum_loses_energy_every_step() {
    let p = PendulumParams::default();
    let traj = simulate_pendulum(&p, 0.1, 0.02, 500, 0.8, 1.5).unwrap();
    let energies: Vec<f64> = traj.iter().map(|s| p.energy(s[0], s[1])).collect();
    assert!(energies.windows(2).all(|w| w[1] < w[0]));
}

fn small_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_trajectories: 6,
        horizon: 40,
        kept_steps: 20,
        seed,
        ..GeneratorConfig::default()
    }
}

#[test]
fn small_dataset_validates_and_is_reproducible() {
    let ds = build_dataset(&small_generator(7)).unwrap();
    let report = validate(&ds, 1e-4).unwrap();
    assert!(report.passed, "{:?}", report.failures);
    assert_eq!(report.replay_mismatches, 0);
    assert!(report.splits_disjoint);
    assert_eq!(ds, build_dataset(&small_generator(7)).unwrap());
    assert_ne!(
        ds.trajectories,
        build_dataset(&small_generator(8)).unwrap().trajectories
    );
    let (x, y) = ds.pairs(Split::Train);
    assert_eq!(x.rows(), ds.train.len() * 20);
    assert_eq!(x.shape(), y.shape());
}

#[test]
fn dataset_roundtrips_through_a_file() {
    let ds = build_dataset(&small_generator(7)).unwrap();
    let dir = std::env::temp_dir().join(format!("metatailor-physics-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ds.bin");
    ds.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(ds, back);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(Dataset::load(&path).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn tampered_dataset_fails_validation() {
    let mut ds = build_dataset(&small_generator(5)).unwrap();
    ds.trajectories[0][3].bodies[0].vx += 1e-3;
    let report = validate(&ds, 1e-4).unwrap();
    assert!(!report.passed);
    assert!(report.replay_mismatches >= 1);
}

#[test]
fn pendulum_dataset_shapes_and_noise() {
    let clean = PendulumDataConfig {
        train_trajectories: 3,
        test_trajectories: 2,
        steps_per_trajectory: 10,
        ..PendulumDataConfig::default()
    };
    let a = build_pendulum_dataset(&clean).unwrap();
    assert_eq!(a.train.len(), 3);
    assert!(a.train.iter().chain(&a.test).all(|t| t.len() == 11));
    let noisy = build_pendulum_dataset(&PendulumDataConfig {
        observation_noise: 0.05,
        ..clean.clone()
    })
    .unwrap();
    // Noise perturbs every recorded state but not the underlying start.
    let diff: Vec<f64> = a.train[0]
        .iter()
        .zip(&noisy.train[0])
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .collect();
    assert!(diff.iter().all(|&d| d > 0.0 && d < 0.5));
    assert_eq!(a, build_pendulum_dataset(&clean).unwrap());
}
