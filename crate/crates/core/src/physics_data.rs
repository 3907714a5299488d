//! N-body and pendulum trajectory generation.
//!
//! Planetary systems are integrated with classical RK4 inside a bounded
//! grid. Unstable random starts are repaired by a greedy perturbation search
//! that keeps a perturbed start only when it survives strictly longer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::container;
use crate::error::{Error, Result};
use crate::losses::{invariants_of, NormStats, PendulumParams, SystemState, BODY_FIELDS};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub grid_width: f64,
    pub grid_height: f64,
    pub n_bodies: usize,
    pub mass_min: f64,
    pub mass_max: f64,
    pub velocity_std: f64,
    pub dt: f64,
    pub gravity: f64,
    /// Minimum allowed distance between two bodies.
    pub critical_distance: f64,
    /// Steps a system must survive to be accepted.
    pub horizon: usize,
    /// Steps kept from each accepted trajectory (`kept_steps + 1` states).
    pub kept_steps: usize,
    /// Perturbation std as a fraction of each field's scale.
    pub perturbation_frac: f64,
    pub max_retries: usize,
    /// Fresh random starts tried per trajectory before giving up.
    pub max_restarts: usize,
    pub mean_mass_threshold: f64,
    pub train_fraction: f64,
    pub softening: f64,
    pub n_trajectories: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            grid_width: 600.0,
            grid_height: 300.0,
            n_bodies: 5,
            mass_min: 0.15,
            mass_max: 0.25,
            velocity_std: 1.0,
            dt: 0.5,
            gravity: 1.0,
            critical_distance: 10.0,
            horizon: 200,
            kept_steps: 100,
            perturbation_frac: 0.01,
            max_retries: 500,
            max_restarts: 20,
            mean_mass_threshold: 0.2,
            train_fraction: 0.8,
            softening: 1e-3,
            n_trajectories: 200,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_width", self.grid_width),
            ("grid_height", self.grid_height),
            ("mass_min", self.mass_min),
            ("velocity_std", self.velocity_std),
            ("dt", self.dt),
            ("gravity", self.gravity),
            ("critical_distance", self.critical_distance),
            ("perturbation_frac", self.perturbation_frac),
            ("mean_mass_threshold", self.mean_mass_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.mass_max < self.mass_min {
            return Err(Error::Config("mass_max below mass_min".into()));
        }
        if self.kept_steps > self.horizon || self.kept_steps == 0 {
            return Err(Error::Config(format!(
                "kept_steps {} must be in 1..={}",
                self.kept_steps, self.horizon
            )));
        }
        if self.n_bodies == 0 || self.softening < 0.0 {
            return Err(Error::Config(
                "need bodies and non-negative softening".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.n_bodies * BODY_FIELDS
    }
}

/// Softened Newtonian accelerations `(ax, ay)` of each body.
pub fn accelerations(state: &SystemState, gravity: f64, softening: f64) -> Vec<[f64; 2]> {
    let n = state.len();
    let mut acc = vec![[0.0; 2]; n];
    let eps2 = softening * softening;
    for i in 0..n {
        let bi = &state.bodies[i];
        for j in i + 1..n {
            let bj = &state.bodies[j];
            let (dx, dy) = (bj.x - bi.x, bj.y - bi.y);
            let r2 = dx * dx + dy * dy + eps2;
            let inv3 = 1.0 / (r2 * r2.sqrt());
            let (fx, fy) = (gravity * dx * inv3, gravity * dy * inv3);
            acc[i][0] += bj.m * fx;
            acc[i][1] += bj.m * fy;
            acc[j][0] -= bi.m * fx;
            acc[j][1] -= bi.m * fy;
        }
    }
    acc
}

fn derivative(s: &SystemState, gravity: f64, softening: f64) -> Vec<f64> {
    let acc = accelerations(s, gravity, softening);
    s.bodies
        .iter()
        .zip(&acc)
        .flat_map(|(b, a)| [b.vx, b.vy, a[0], a[1], 0.0])
        .collect()
}

fn offset(base: &[f64], k: &[f64], h: f64) -> SystemState {
    let flat: Vec<f64> = base.iter().zip(k).map(|(b, d)| b + h * d).collect();
    SystemState::from_flat(&flat).expect("state layout")
}

/// One classical Runge-Kutta step. Masses are carried through unchanged.
pub fn rk4_step(state: &SystemState, dt: f64, gravity: f64, softening: f64) -> Result<SystemState> {
    let y = state.to_flat();
    let k1 = derivative(state, gravity, softening);
    let k2 = derivative(&offset(&y, &k1, dt / 2.0), gravity, softening);
    let k3 = derivative(&offset(&y, &k2, dt / 2.0), gravity, softening);
    let k4 = derivative(&offset(&y, &k3, dt), gravity, softening);
    let next: Vec<f64> = (0..y.len())
        .map(|i| {
            if i % BODY_FIELDS == 4 {
                y[i]
            } else {
                y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            }
        })
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "rk4_step".into(),
        });
    }
    SystemState::from_flat(&next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStatus {
    Ok,
    Collision,
    Escaped,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    /// Initial state followed by every state that passed the checks.
    pub states: Vec<SystemState>,
    pub steps_survived: usize,
    pub status: SimStatus,
}

fn violation(state: &SystemState, cfg: &GeneratorConfig) -> Option<SimStatus> {
    let outside = state
        .bodies
        .iter()
        .any(|b| !(b.x >= 0.0 && b.x <= cfg.grid_width && b.y >= 0.0 && b.y <= cfg.grid_height));
    if outside {
        return Some(SimStatus::Escaped);
    }
    let close = min_pair_distance(state) < cfg.critical_distance;
    close.then_some(SimStatus::Collision)
}

pub fn min_pair_distance(state: &SystemState) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in state.bodies.iter().enumerate() {
        for b in &state.bodies[i + 1..] {
            best = best.min(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt());
        }
    }
    best
}

/// Integrates until `cfg.horizon` steps or the first collision / escape.
pub fn simulate(init: &SystemState, cfg: &GeneratorConfig) -> Simulation {
    let mut states = vec![init.clone()];
    if let Some(status) = violation(init, cfg) {
        return Simulation {
            states,
            steps_survived: 0,
            status,
        };
    }
    let mut current = init.clone();
    for step in 0..cfg.horizon {
        let next = match rk4_step(&current, cfg.dt, cfg.gravity, cfg.softening) {
            Ok(s) => s,
            // Only reachable through a near-singular encounter.
            Err(_) => {
                return Simulation {
                    states,
                    steps_survived: step,
                    status: SimStatus::Collision,
                }
            }
        };
        if let Some(status) = violation(&next, cfg) {
            return Simulation {
                states,
                steps_survived: step,
                status,
            };
        }
        states.push(next.clone());
        current = next;
    }
    Simulation {
        states,
        steps_survived: cfg.horizon,
        status: SimStatus::Ok,
    }
}

/// Random start: positions uniform over the central half of the grid.
pub fn random_system(cfg: &GeneratorConfig, rng: &mut Rng) -> SystemState {
    let (w, h) = (cfg.grid_width, cfg.grid_height);
    let bodies = (0..cfg.n_bodies)
        .map(|_| crate::losses::Body {
            x: rng::uniform(rng, w / 4.0, 3.0 * w / 4.0),
            y: rng::uniform(rng, h / 4.0, 3.0 * h / 4.0),
            vx: cfg.velocity_std * rng::normal(rng),
            vy: cfg.velocity_std * rng::normal(rng),
            m: rng::uniform(rng, cfg.mass_min, cfg.mass_max),
        })
        .collect();
    SystemState { bodies }
}

/// Gaussian perturbation of positions and velocities; masses are kept.
fn perturb(state: &SystemState, cfg: &GeneratorConfig, rng: &mut Rng) -> SystemState {
    let f = cfg.perturbation_frac;
    let (sx, sy) = (f * cfg.grid_width / 2.0, f * cfg.grid_height / 2.0);
    let sv = f * cfg.velocity_std;
    let bodies = state
        .bodies
        .iter()
        .map(|b| crate::losses::Body {
            x: b.x + sx * rng::normal(rng),
            y: b.y + sy * rng::normal(rng),
            vx: b.vx + sv * rng::normal(rng),
            vy: b.vy + sv * rng::normal(rng),
            m: b.m,
        })
        .collect();
    SystemState { bodies }
}

#[derive(Clone, Debug)]
pub struct StableSearch {
    pub init: SystemState,
    /// Survival length of every accepted start, in acceptance order.
    pub accepted_lengths: Vec<usize>,
    pub attempts: usize,
}

/// Greedy search for a start that survives the full horizon.
pub fn find_stable_system(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<StableSearch> {
    let mut best = random_system(cfg, rng);
    let mut best_len = simulate(&best, cfg).steps_survived;
    let mut accepted_lengths = vec![best_len];
    let mut attempts = 0;
    while best_len < cfg.horizon {
        if attempts >= cfg.max_retries {
            return Err(Error::Generation {
                index: 0,
                reason: format!(
                    "no stable system after {attempts} perturbations (best {best_len} steps)"
                ),
            });
        }
        attempts += 1;
        let candidate = perturb(&best, cfg, rng);
        let len = simulate(&candidate, cfg).steps_survived;
        if len > best_len {
            best = candidate;
            best_len = len;
            accepted_lengths.push(len);
        }
    }
    Ok(StableSearch {
        init: best,
        accepted_lengths,
        attempts,
    })
}

/// Generates trajectory `index`: a stable start and its first
/// `kept_steps + 1` states.
pub fn generate_trajectory(cfg: &GeneratorConfig, index: usize) -> Result<Vec<SystemState>> {
    for restart in 0..cfg.max_restarts.max(1) {
        let stream = (index as u64) << 16 | restart as u64;
        let mut r = rng::substream(cfg.seed, stream);
        match find_stable_system(cfg, &mut r) {
            Ok(found) => {
                let sim = simulate(&found.init, cfg);
                debug_assert_eq!(sim.status, SimStatus::Ok);
                return Ok(sim.states[..=cfg.kept_steps].to_vec());
            }
            Err(_) => continue,
        }
    }
    Err(Error::Generation {
        index,
        reason: format!("{} restarts exhausted", cfg.max_restarts),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized state-to-next-state pairs plus the raw trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub stats: NormStats,
    /// Raw trajectories, `kept_steps + 1` states each.
    pub trajectories: Vec<Vec<SystemState>>,
    /// Index into `trajectories` of each generated trajectory that passed the
    /// mean-mass filter, per split.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn mean_mass(state: &SystemState) -> f64 {
    state.bodies.iter().map(|b| b.m).sum::<f64>() / state.len() as f64
}

/// Generates, filters, splits and normalizes a planetary dataset.
pub fn build_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.n_trajectories < 2 {
        return Err(Error::Config("need at least two trajectories".into()));
    }
    let mut trajectories = Vec::new();
    for i in 0..cfg.n_trajectories {
        let t = generate_trajectory(cfg, i)?;
        if mean_mass(&t[0]) < cfg.mean_mass_threshold {
            trajectories.push(t);
        }
    }
    if trajectories.len() < 2 {
        return Err(Error::Generation {
            index: cfg.n_trajectories,
            reason: format!(
                "only {} trajectories below the mass threshold",
                trajectories.len()
            ),
        });
    }
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    let mut r = rng::substream(cfg.seed, u64::MAX);
    rng::shuffle(&mut r, &mut order);
    let n_train = ((trajectories.len() as f64 * cfg.train_fraction).round() as usize)
        .clamp(1, trajectories.len() - 1);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    let stats = fit_stats(&trajectories, &train, cfg.kept_steps)?;
    Ok(Dataset {
        config: cfg.clone(),
        stats,
        trajectories,
        train,
        test,
    })
}

fn fit_stats(trajectories: &[Vec<SystemState>], train: &[usize], kept: usize) -> Result<NormStats> {
    let rows: Vec<Vec<f64>> = train
        .iter()
        .flat_map(|&t| trajectories[t][..kept].iter().map(SystemState::to_flat))
        .collect();
    NormStats::fit(rows.iter().map(Vec::as_slice))
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Raw `(input, target)` rows of a split, `kept_steps` pairs per trajectory.
    pub fn raw_pairs(&self, split: Split) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &t in self.split_indices(split) {
            let traj = &self.trajectories[t];
            for w in traj.windows(2) {
                xs.push(w[0].to_flat());
                ys.push(w[1].to_flat());
            }
        }
        (xs, ys)
    }

    /// Normalized `(X, Y)` matrices of a split.
    pub fn pairs(&self, split: Split) -> (Tensor, Tensor) {
        let (xs, ys) = self.raw_pairs(split);
        let norm = |rows: Vec<Vec<f64>>| {
            let d = self.stats.dim();
            let n = rows.len();
            let data = rows.iter().flat_map(|r| self.stats.normalize(r)).collect();
            Tensor::matrix(n, d, data)
        };
        (norm(xs), norm(ys))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: 1,
            config: self.config.clone(),
            stats: self.stats.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
            n_trajectories: self.trajectories.len(),
            states_per_trajectory: self.config.kept_steps + 1,
            state_dim: self.config.state_dim(),
        };
        let payload: Vec<f64> = self
            .trajectories
            .iter()
            .flatten()
            .flat_map(SystemState::to_flat)
            .collect();
        container::write(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let (h, payload): (DatasetHeader, Vec<f64>) = container::read(path)?;
        if h.format != DATASET_FORMAT || h.version != 1 {
            return Err(Error::Format(format!(
                "unsupported dataset {} v{}",
                h.format, h.version
            )));
        }
        let per = h.states_per_trajectory * h.state_dim;
        if payload.len() != h.n_trajectories * per || h.state_dim != h.config.state_dim() {
            return Err(Error::Format("dataset payload size mismatch".into()));
        }
        let trajectories = payload
            .chunks_exact(per)
            .map(|t| {
                t.chunks_exact(h.state_dim)
                    .map(SystemState::from_flat)
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let n = trajectories.len();
        if h.train.iter().chain(&h.test).any(|&i| i >= n) {
            return Err(Error::Format("split index out of range".into()));
        }
        Ok(Dataset {
            config: h.config,
            stats: h.stats,
            trajectories,
            train: h.train,
            test: h.test,
        })
    }
}

const DATASET_FORMAT: &str = "metatailor-nbody";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    config: GeneratorConfig,
    stats: NormStats,
    train: Vec<usize>,
    test: Vec<usize>,
    n_trajectories: usize,
    states_per_trajectory: usize,
    state_dim: usize,
}

/// Relative energy and momentum drift of one raw trajectory: the largest
/// deviation from the initial value, relative to `KE + |PE|` and
/// `sum m|v|` of the initial state.
pub fn trajectory_drift(states: &[SystemState], gravity: f64) -> Result<(f64, f64)> {
    let first = &states[0];
    let inv0 = invariants_of(first, gravity)?;
    let kinetic: f64 = first
        .bodies
        .iter()
        .map(|b| 0.5 * b.m * (b.vx * b.vx + b.vy * b.vy))
        .sum();
    let energy_scale = kinetic + (inv0.energy - kinetic).abs();
    let momentum_scale: f64 = first
        .bodies
        .iter()
        .map(|b| b.m * (b.vx * b.vx + b.vy * b.vy).sqrt())
        .sum();
    let mut de = 0.0f64;
    let mut dp = 0.0f64;
    for s in &states[1..] {
        let inv = invariants_of(s, gravity)?;
        de = de.max((inv.energy - inv0.energy).abs());
        let d = ((inv.momentum[0] - inv0.momentum[0]).powi(2)
            + (inv.momentum[1] - inv0.momentum[1]).powi(2))
        .sqrt();
        dp = dp.max(d);
    }
    Ok((
        de / energy_scale,
        dp / momentum_scale.max(f64::MIN_POSITIVE),
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub trajectories: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub replay_mismatches: usize,
    pub max_energy_drift: f64,
    pub max_momentum_drift: f64,
    pub min_pair_distance: f64,
    pub bodies_outside_grid: usize,
    pub max_abs_train_mean: f64,
    pub max_abs_train_std_error: f64,
    pub splits_disjoint: bool,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Replays every stored trajectory and re-checks every dataset invariant.
pub fn validate(ds: &Dataset, drift_tolerance: f64) -> Result<ValidationReport> {
    let cfg = &ds.config;
    let mut replay_mismatches = 0;
    let mut max_e = 0.0f64;
    let mut max_p = 0.0f64;
    let mut min_dist = f64::INFINITY;
    let mut outside = 0;
    for traj in &ds.trajectories {
        if traj.len() != cfg.kept_steps + 1 {
            return Err(Error::Validation(format!(
                "trajectory has {} states, expected {}",
                traj.len(),
                cfg.kept_steps + 1
            )));
        }
        for w in traj.windows(2) {
            let next = rk4_step(&w[0], cfg.dt, cfg.gravity, cfg.softening)?;
            if next
                .to_flat()
                .iter()
                .zip(w[1].to_flat())
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                replay_mismatches += 1;
            }
        }
        for s in traj {
            min_dist = min_dist.min(min_pair_distance(s));
            outside += s
                .bodies
                .iter()
                .filter(|b| {
                    !(b.x >= 0.0 && b.x <= cfg.grid_width && b.y >= 0.0 && b.y <= cfg.grid_height)
                })
                .count();
        }
        let (e, p) = trajectory_drift(traj, cfg.gravity)?;
        max_e = max_e.max(e);
        max_p = max_p.max(p);
    }

    let (x_train, _) = ds.pairs(Split::Train);
    let (n, d) = (x_train.rows(), x_train.cols());
    let mut max_mean = 0.0f64;
    let mut max_std_err = 0.0f64;
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x_train.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        max_mean = max_mean.max(mean.abs());
        max_std_err = max_std_err.max((std - 1.0).abs());
    }
    let disjoint = ds.train.iter().all(|i| !ds.test.contains(i));

    let mut failures = Vec::new();
    if replay_mismatches > 0 {
        failures.push(format!(
            "{replay_mismatches} transitions differ from RK4 replay"
        ));
    }
    if max_e > drift_tolerance || max_p > drift_tolerance {
        failures.push(format!(
            "drift energy {max_e:.3e} momentum {max_p:.3e} exceeds {drift_tolerance:e}"
        ));
    }
    if min_dist < cfg.critical_distance {
        failures.push(format!("bodies within {min_dist:.3} of each other"));
    }
    if outside > 0 {
        failures.push(format!("{outside} body positions outside the grid"));
    }
    if max_mean > 1e-6 || max_std_err > 1e-6 {
        failures.push(format!(
            "train normalization off: |mean| {max_mean:.3e}, |std-1| {max_std_err:.3e}"
        ));
    }
    if !disjoint {
        failures.push("train and test splits overlap".into());
    }
    let (x_test, _) = ds.pairs(Split::Test);
    Ok(ValidationReport {
        trajectories: ds.trajectories.len(),
        train_pairs: n,
        test_pairs: x_test.rows(),
        replay_mismatches,
        max_energy_drift: max_e,
        max_momentum_drift: max_p,
        min_pair_distance: min_dist,
        bodies_outside_grid: outside,
        max_abs_train_mean: max_mean,
        max_abs_train_std_error: max_std_err,
        splits_disjoint: disjoint,
        passed: failures.is_empty(),
        failures,
    })
}

/// RK4 trajectory of `theta' = omega`, `omega' = -(g/l) sin(theta) - c omega`,
/// `n_steps + 1` states including the start.
pub fn simulate_pendulum(
    params: &PendulumParams,
    damping: f64,
    dt: f64,
    n_steps: usize,
    theta0: f64,
    omega0: f64,
) -> Result<Vec<[f64; 2]>> {
    if damping < 0.0 {
        return Err(Error::Config(format!("damping {damping} must be >= 0")));
    }
    let k = params.gravity / params.length;
    let f = |s: [f64; 2]| [s[1], -k * s[0].sin() - damping * s[1]];
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut s = [theta0, omega0];
    out.push(s);
    for _ in 0..n_steps {
        let k1 = f(s);
        let k2 = f([s[0] + dt / 2.0 * k1[0], s[1] + dt / 2.0 * k1[1]]);
        let k3 = f([s[0] + dt / 2.0 * k2[0], s[1] + dt / 2.0 * k2[1]]);
        let k4 = f([s[0] + dt * k3[0], s[1] + dt * k3[1]]);
        s = [
            s[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            s[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumDataConfig {
    pub params: PendulumParams,
    pub damping: f64,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps between recorded states.
    pub stride: usize,
    /// Recorded transitions per trajectory.
    pub steps_per_trajectory: usize,
    pub train_trajectories: usize,
    pub test_trajectories: usize,
    /// Initial energy range, as a fraction of the separatrix energy `2 m g l`.
    pub energy_min_frac: f64,
    pub energy_max_frac: f64,
    /// Standard deviation of Gaussian noise added to recorded states (the
    /// underlying simulation stays exact).
    pub observation_noise: f64,
    pub seed: u64,
}

impl Default for PendulumDataConfig {
    fn default() -> Self {
        PendulumDataConfig {
            params: PendulumParams::default(),
            damping: 0.05,
            dt: 0.02,
            stride: 5,
            steps_per_trajectory: 60,
            train_trajectories: 20,
            test_trajectories: 10,
            energy_min_frac: 0.1,
            energy_max_frac: 0.6,
            observation_noise: 0.0,
            seed: 0,
        }
    }
}

/// Recorded `(theta, omega)` trajectories of a damped pendulum.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumDataset {
    pub config: PendulumDataConfig,
    pub train: Vec<Vec<[f64; 2]>>,
    pub test: Vec<Vec<[f64; 2]>>,
}

pub fn build_pendulum_dataset(cfg: &PendulumDataConfig) -> Result<PendulumDataset> {
    if cfg.stride == 0 || cfg.steps_per_trajectory == 0 || !(cfg.dt > 0.0) {
        return Err(Error::Config(
            "pendulum stride, steps and dt must be positive".into(),
        ));
    }
    if !(cfg.observation_noise >= 0.0 && cfg.observation_noise.is_finite()) {
        return Err(Error::Config(
            "observation_noise must be finite and >= 0".into(),
        ));
    }
    let p = &cfg.params;
    let separatrix = 2.0 * p.mass * p.gravity * p.length;
    let make = |index: u64| -> Result<Vec<[f64; 2]>> {
        let mut r = rng::substream(cfg.seed, index);
        let energy = separatrix * rng::uniform(&mut r, cfg.energy_min_frac, cfg.energy_max_frac);
        // Split the energy randomly between potential and kinetic parts.
        let share = rng::uniform(&mut r, 0.0, 1.0);
        let potential = share * energy;
        let cos_theta = 1.0 - potential / (p.mass * p.gravity * p.length);
        let mut theta = cos_theta.clamp(-1.0, 1.0).acos();
        let kinetic = energy - potential;
        let mut omega = (2.0 * kinetic / (p.mass * p.length * p.length)).sqrt();
        if rng::uniform(&mut r, 0.0, 1.0) < 0.5 {
            theta = -theta;
        }
        if rng::uniform(&mut r, 0.0, 1.0) < 0.5 {
            omega = -omega;
        }
        let full = simulate_pendulum(
            p,
            cfg.damping,
            cfg.dt,
            cfg.steps_per_trajectory * cfg.stride,
            theta,
            omega,
        )?;
        let mut noise = rng::substream(cfg.seed ^ 0x006e_6f69_7365, index);
        Ok(full
            .into_iter()
            .step_by(cfg.stride)
            .map(|[t, w]| {
                if cfg.observation_noise > 0.0 {
                    [
                        t + cfg.observation_noise * rng::normal(&mut noise),
                        w + cfg.observation_noise * rng::normal(&mut noise),
                    ]
                } else {
                    [t, w]
                }
            })
            .collect())
    };
    let train = (0..cfg.train_trajectories as u64)
        .map(make)
        .collect::<Result<_>>()?;
    let test = (0..cfg.test_trajectories as u64)
        .map(|i| make(1_000_000 + i))
        .collect::<Result<_>>()?;
    Ok(PendulumDataset {
        config: cfg.clone(),
        train,
        test,
    })
}

impl PendulumDataset {
    /// `(X, Y)` transition matrices over a set of trajectories.
    pub fn pairs(trajectories: &[Vec<[f64; 2]>]) -> (Tensor, Tensor) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in trajectories {
            for w in t.windows(2) {
                xs.extend_from_slice(&w[0]);
                ys.extend_from_slice(&w[1]);
            }
        }
        let n = xs.len() / 2;
        (Tensor::matrix(n, 2, xs), Tensor::matrix(n, 2, ys))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Body;

    fn two(m: f64, sep: f64, v: f64) -> SystemState {
        SystemState {
            bodies: vec![
                Body {
                    x: 300.0 - sep / 2.0,
                    y: 150.0,
                    vx: 0.0,
                    vy: -v,
                    m,
                },
                Body {
                    x: 300.0 + sep / 2.0,
                    y: 150.0,
                    vx: 0.0,
                    vy: v,
                    m,
                },
            ],
        }
    }

    #[test]
    fn single_body_feels_nothing() {
        let s = SystemState {
            bodies: vec![Body {
                x: 1.0,
                y: 2.0,
                vx: 0.0,
                vy: 0.0,
                m: 3.0,
            }],
        };
        assert_eq!(accelerations(&s, 1.0, 1e-3), vec![[0.0, 0.0]]);
    }

    #[test]
    fn equal_masses_accelerate_oppositely() {
        let s = two(0.7, 13.0, 0.0);
        let a = accelerations(&s, 2.5, 1e-3);
        assert!((a[0][0] + a[1][0]).abs() < 1e-14);
        assert!((a[0][1] + a[1][1]).abs() < 1e-14);
        assert!(a[0][0] > 0.0);
    }

    #[test]
    fn frozen_system_stays_put() {
        let mut s = two(0.2, 50.0, 0.0);
        s.bodies[0].vy = 0.0;
        s.bodies[1].vy = 0.0;
        let next = rk4_step(&s, 0.5, 0.0, 1e-3).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn head_on_collision_detected() {
        let mut s = two(0.2, 100.0, 0.0);
        s.bodies[0].vx = 2.0;
        s.bodies[1].vx = -2.0;
        let sim = simulate(&s, &GeneratorConfig::default());
        assert_eq!(sim.status, SimStatus::Collision);
        assert!(sim.steps_survived < 200);
    }

    #[test]
    fn fast_body_escapes() {
        let mut s = two(0.2, 100.0, 0.0);
        s.bodies[0].vx = -20.0;
        let sim = simulate(&s, &GeneratorConfig::default());
        assert_eq!(sim.status, SimStatus::Escaped);
    }

    #[test]
    fn stable_search_is_monotone_and_reproducible() {
        let cfg = GeneratorConfig::default();
        let a = find_stable_system(&cfg, &mut rng::seeded(11)).unwrap();
        let b = find_stable_system(&cfg, &mut rng::seeded(11)).unwrap();
        assert_eq!(a.init, b.init);
        assert!(a.accepted_lengths.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(simulate(&a.init, &cfg).status, SimStatus::Ok);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.kept_steps = 300;
        assert!(cfg.validate().is_err());
        let cfg = GeneratorConfig {
            gravity: 0.0,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pendulum_equilibrium_and_damping() {
        let p = PendulumParams::default();
        let still = simulate_pendulum(&p, 0.1, 0.02, 100, 0.0, 0.0).unwrap();
        assert!(still.iter().all(|s| *s == [0.0, 0.0]));
        let damped = simulate_pendulum(&p, 0.1, 0.02, 500, 0.8, 0.0).unwrap();
        for w in damped.windows(2) {
            assert!(p.energy(w[1][0], w[1][1]) < p.energy(w[0][0], w[0][1]));
        }
        assert!(simulate_pendulum(&p, -1.0, 0.02, 1, 0.0, 0.0).is_err());
    }
}
