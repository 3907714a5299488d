//! Supervised, auxiliary and tailoring losses.
//!
//! Tailoring losses are exposed per row (`b x 1`) so that the caller decides
//! how rows are pooled; the scalar versions are batch means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Fields per body in a flat state row: `x, y, vx, vy, m`.
pub const BODY_FIELDS: usize = 5;
/// Pairs closer than this are treated as coincident.
pub const MIN_SEPARATION: f64 = 1e-6;
/// Weight of the momentum terms relative to the energy term.
pub const MOMENTUM_WEIGHT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub m: f64,
}

/// Positions, velocities and masses of every body, in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub bodies: Vec<Body>,
}

impl SystemState {
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(BODY_FIELDS) {
            return Err(Error::contract(
                "SystemState",
                format!("{} values is not a whole number of bodies", flat.len()),
            ));
        }
        let bodies = flat
            .chunks_exact(BODY_FIELDS)
            .map(|c| Body {
                x: c[0],
                y: c[1],
                vx: c[2],
                vy: c[3],
                m: c[4],
            })
            .collect();
        Ok(SystemState { bodies })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.bodies
            .iter()
            .flat_map(|b| [b.x, b.y, b.vx, b.vy, b.m])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.bodies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bodies.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Invariants {
    pub energy: f64,
    pub momentum: [f64; 2],
}

/// Total Newtonian energy and linear momentum.
pub fn invariants_of(state: &SystemState, g: f64) -> Result<Invariants> {
    let mut kinetic = 0.0;
    let mut momentum = [0.0; 2];
    for b in &state.bodies {
        kinetic += 0.5 * b.m * (b.vx * b.vx + b.vy * b.vy);
        momentum[0] += b.m * b.vx;
        momentum[1] += b.m * b.vy;
    }
    let mut potential = 0.0;
    for (i, a) in state.bodies.iter().enumerate() {
        for b in &state.bodies[i + 1..] {
            let (dx, dy) = (a.x - b.x, a.y - b.y);
            let d2 = dx * dx + dy * dy;
            if d2.sqrt() < MIN_SEPARATION {
                return Err(Error::NonFinite {
                    op: "invariants_of: coincident bodies".into(),
                });
            }
            potential -= g * a.m * b.m / (d2 + MIN_SEPARATION * MIN_SEPARATION).sqrt();
        }
    }
    Ok(Invariants {
        energy: kinetic + potential,
        momentum,
    })
}

/// Per-dimension normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and (population) standard deviation of each column.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
            }
            for (s, v) in sum.iter_mut().zip(*r) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::contract("NormStats::fit", "no rows"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for r in &rows {
            for ((acc, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        let stats = NormStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::contract("NormStats", "mean/std length mismatch"));
        }
        if let Some(i) = self.std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::contract(
                "NormStats",
                format!("dimension {i} has std {}", self.std[i]),
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    /// Graph version of [`NormStats::denormalize`] for `b x dim` rows.
    pub fn denormalize_var<'g>(&self, x: Var<'g>) -> Var<'g> {
        let g = x.graph();
        let rows = x.shape()[0];
        let std = g.leaf(Tensor::vector(self.std.clone())).broadcast_row(rows);
        let mean = g
            .leaf(Tensor::vector(self.mean.clone()))
            .broadcast_row(rows);
        x * std + mean
    }
}

/// Mean squared error over all entries.
pub fn mse<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(Error::contract(
            "mse",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok((pred - target).square().mean())
}

/// Concrete MSE.
pub fn mse_value(pred: &Tensor, target: &Tensor) -> f64 {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.len() as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// `sup + weight * phys`.
pub fn aux_regularized_loss<'g>(sup: Var<'g>, phys: Var<'g>, weight: f64) -> Var<'g> {
    if weight == 0.0 {
        sup
    } else {
        sup + phys.scale(weight)
    }
}

/// An unsupervised loss of an input and the prediction made for it.
pub trait PerRowLoss {
    /// Loss of each row, shape `b x 1`.
    fn per_row<'g>(&self, x: Var<'g>, yhat: Var<'g>) -> Var<'g>;

    /// Batch mean.
    fn mean<'g>(&self, x: Var<'g>, yhat: Var<'g>) -> Var<'g> {
        self.per_row(x, yhat).mean()
    }
}

/// Energy, x-momentum and y-momentum of each raw state row, each `b x 1`.
pub fn invariants_rows<'g>(raw: Var<'g>, n_bodies: usize, g: f64) -> (Var<'g>, Var<'g>, Var<'g>) {
    let field = |f: usize| -> Vec<usize> { (0..n_bodies).map(|i| i * BODY_FIELDS + f).collect() };
    let xs = raw.select_cols(&field(0));
    let ys = raw.select_cols(&field(1));
    let vx = raw.select_cols(&field(2));
    let vy = raw.select_cols(&field(3));
    let m = raw.select_cols(&field(4));

    let kinetic = (m * (vx.square() + vy.square())).sum_cols().scale(0.5);
    let px = (m * vx).sum_cols();
    let py = (m * vy).sum_cols();
    if n_bodies < 2 {
        return (kinetic, px, py);
    }
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..n_bodies {
        for j in i + 1..n_bodies {
            left.push(i);
            right.push(j);
        }
    }
    let dx = xs.select_cols(&left) - xs.select_cols(&right);
    let dy = ys.select_cols(&left) - ys.select_cols(&right);
    let r = (dx.square() + dy.square())
        .add_scalar(MIN_SEPARATION * MIN_SEPARATION)
        .sqrt();
    let potential = (m.select_cols(&left) * m.select_cols(&right) / r)
        .sum_cols()
        .scale(-g);
    (kinetic + potential, px, py)
}

/// L1 violation of energy and momentum conservation between an input state
/// and the predicted next state, evaluated in raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationLoss {
    pub stats: NormStats,
    pub gravity: f64,
    pub n_bodies: usize,
    pub momentum_weight: f64,
}

impl ConservationLoss {
    pub fn new(stats: NormStats, gravity: f64) -> Result<Self> {
        stats.validate()?;
        if !stats.dim().is_multiple_of(BODY_FIELDS) {
            return Err(Error::contract(
                "ConservationLoss",
                format!("{} dimensions is not a whole number of bodies", stats.dim()),
            ));
        }
        Ok(ConservationLoss {
            n_bodies: stats.dim() / BODY_FIELDS,
            stats,
            gravity,
            momentum_weight: MOMENTUM_WEIGHT,
        })
    }

    fn mass_masks(&self) -> (Tensor, Tensor) {
        let d = self.stats.dim();
        let keep: Vec<f64> = (0..d)
            .map(|j| if j % BODY_FIELDS == 4 { 0.0 } else { 1.0 })
            .collect();
        let take: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        (Tensor::vector(keep), Tensor::vector(take))
    }
}

impl PerRowLoss for ConservationLoss {
    fn per_row<'g>(&self, x: Var<'g>, yhat: Var<'g>) -> Var<'g> {
        assert_eq!(x.shape(), yhat.shape(), "conservation loss shape mismatch");
        assert_eq!(
            x.shape()[1],
            self.stats.dim(),
            "conservation loss width mismatch"
        );
        let g = x.graph();
        let rows = x.shape()[0];
        let x_raw = self.stats.denormalize_var(x);
        let y_raw = self.stats.denormalize_var(yhat);
        // Masses are constants of motion: use the input's.
        let (keep, take) = self.mass_masks();
        let y_raw =
            y_raw * g.leaf(keep).broadcast_row(rows) + x_raw * g.leaf(take).broadcast_row(rows);
        let (e0, px0, py0) = invariants_rows(x_raw, self.n_bodies, self.gravity);
        let (e1, px1, py1) = invariants_rows(y_raw, self.n_bodies, self.gravity);
        (e0 - e1).abs() + ((px0 - px1).abs() + (py0 - py1).abs()).scale(self.momentum_weight)
    }
}

/// Mean conservation violation over a batch of normalized rows.
pub fn conservation_tailor_loss<'g>(
    x_norm: Var<'g>,
    yhat_norm: Var<'g>,
    stats: &NormStats,
    gravity: f64,
) -> Result<Var<'g>> {
    let loss = ConservationLoss::new(stats.clone(), gravity)?;
    if x_norm.shape() != yhat_norm.shape() || x_norm.shape().get(1) != Some(&stats.dim()) {
        return Err(Error::contract(
            "conservation_tailor_loss",
            format!(
                "inputs {:?}/{:?} for {} dimensions",
                x_norm.shape(),
                yhat_norm.shape(),
                stats.dim()
            ),
        ));
    }
    Ok(loss.mean(x_norm, yhat_norm))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 3.0,
        }
    }
}

impl PendulumParams {
    /// `E = m l^2 w^2 / 2 + m g l (1 - cos theta)`.
    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        let PendulumParams {
            mass,
            length,
            gravity,
        } = *self;
        0.5 * mass * length * length * omega * omega + mass * gravity * length * (1.0 - theta.cos())
    }

    fn energy_rows<'g>(&self, s: Var<'g>) -> Var<'g> {
        let PendulumParams {
            mass,
            length,
            gravity,
        } = *self;
        let theta = s.select_cols(&[0]);
        let omega = s.select_cols(&[1]);
        omega.square().scale(0.5 * mass * length * length)
            + (-theta.cos())
                .add_scalar(1.0)
                .scale(mass * gravity * length)
    }
}

/// `|E(yhat) - E(x)|` on `(theta, omega)` rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PendulumEnergyLoss {
    pub params: PendulumParams,
}

impl PerRowLoss for PendulumEnergyLoss {
    fn per_row<'g>(&self, x: Var<'g>, yhat: Var<'g>) -> Var<'g> {
        assert_eq!(x.shape(), yhat.shape(), "pendulum loss shape mismatch");
        assert_eq!(x.shape()[1], 2, "pendulum states are (theta, omega)");
        (self.params.energy_rows(yhat) - self.params.energy_rows(x)).abs()
    }
}

pub fn pendulum_energy_loss<'g>(x: Var<'g>, yhat: Var<'g>, params: PendulumParams) -> Var<'g> {
    PendulumEnergyLoss { params }.mean(x, yhat)
}

const COSINE_EPS: f64 = 1e-12;

/// `1 - cos(a_i, b_i)` for each row pair, `b x 1`.
pub fn cosine_distance_rows<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let dot = (a * b).sum_cols();
    let na = a
        .square()
        .sum_cols()
        .add_scalar(COSINE_EPS * COSINE_EPS)
        .sqrt();
    let nb = b
        .square()
        .sum_cols()
        .add_scalar(COSINE_EPS * COSINE_EPS)
        .sqrt();
    (-(dot / (na * nb))).add_scalar(1.0)
}

/// Gaussian input perturbations used by the smoothness loss: `(b * n) x d`,
/// rows grouped by source row.
pub fn smoothness_noise(rows: usize, dim: usize, nu: f64, n_samples: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let data = (0..rows * n_samples * dim)
        .map(|_| nu * rng::normal(&mut r))
        .collect();
    Tensor::matrix(rows * n_samples, dim, data)
}

/// Mean cosine distance between the features of each input and of
/// `n_samples` Gaussian perturbations of it, per row (`b x 1`).
///
/// `features(inputs, k)` must return penultimate features for `inputs`,
/// where each group of `k` consecutive rows belongs to one original row.
pub fn smoothness_per_row<'g, F>(
    features: F,
    x: Var<'g>,
    nu: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Var<'g>>
where
    F: Fn(Var<'g>, usize) -> Var<'g>,
{
    if !(nu > 0.0) || n_samples == 0 {
        return Err(Error::contract(
            "smoothness_tailor_loss",
            format!("needs nu > 0 and n_samples >= 1, got {nu} and {n_samples}"),
        ));
    }
    let g: &'g Graph = x.graph();
    let shape = x.shape();
    let noise = smoothness_noise(shape[0], shape[1], nu, n_samples, seed);
    let perturbed = x.repeat_rows(n_samples) + g.leaf(noise);
    let clean = features(x, 1).repeat_rows(n_samples);
    let noisy = features(perturbed, n_samples);
    Ok(cosine_distance_rows(clean, noisy)
        .sum_row_groups(n_samples)
        .scale(1.0 / n_samples as f64))
}

/// Batch mean of [`smoothness_per_row`].
pub fn smoothness_tailor_loss<'g, F>(
    features: F,
    x: Var<'g>,
    nu: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Var<'g>>
where
    F: Fn(Var<'g>, usize) -> Var<'g>,
{
    Ok(smoothness_per_row(features, x, nu, n_samples, seed)?.mean())
}
