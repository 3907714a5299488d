//! Expressivity of last-layer CN adaptation.
//!
//! For a single-output network with CN on the last hidden layer, the outputs
//! at a set of augmented inputs are affine in that layer's `(gamma, beta)`:
//! `f(g_i) = [W ∘ a(g_i), W] [gamma; beta] + b`, where `a` is the last hidden
//! activation with every other CN layer at identity. When this system has
//! full row rank, CN-only adaptation reaches any target outputs exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::cn_mlp::{
    features, forward, forward_cn, identity_cn, init_params, CnParams, CnVars, MlpParams,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::rng;

/// Relative SVD tolerance for numerical rank.
pub const RANK_TOL: f64 = 1e-8;

/// Precomputed augmented inputs `g_1(x) .. g_n(x)` of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSet {
    pub query: Vec<f64>,
    /// `n_g x m_0`.
    pub augmented: Tensor,
}

impl AugmentationSet {
    pub fn len(&self) -> usize {
        self.augmented.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `|g_i|^2 - g_i . g_j > 0` for every ordered pair `i != j`.
pub fn check_condition(aug: &AugmentationSet) -> bool {
    let g = &aug.augmented;
    let dot =
        |i: usize, j: usize| -> f64 { g.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum() };
    (0..g.rows()).all(|i| {
        let n2 = dot(i, i);
        (0..g.rows()).all(|j| i == j || n2 - dot(i, j) > 0.0)
    })
}

/// `n_g` distinct random unit vectors; they always satisfy the condition.
pub fn random_unit_augmentations(n_g: usize, dim: usize, seed: u64) -> AugmentationSet {
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(n_g * dim);
    for _ in 0..n_g {
        let v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        data.extend(v.iter().map(|a| a / n));
    }
    let augmented = Tensor::matrix(n_g, dim, data);
    AugmentationSet {
        query: augmented.row(0).to_vec(),
        augmented,
    }
}

/// Outputs at the augmented inputs as an affine map of the last hidden
/// layer's `(gamma, beta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CnLinearSystem {
    /// `n_g x 2 m_H`: `[W ∘ a(g_i), W]` per row.
    pub matrix: Tensor,
    /// Output bias, shared by every row.
    pub offset: f64,
}

impl CnLinearSystem {
    pub fn predict(&self, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let theta: Vec<f64> = gamma.iter().chain(beta).copied().collect();
        (0..self.matrix.rows())
            .map(|i| {
                self.matrix
                    .row(i)
                    .iter()
                    .zip(&theta)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.offset
            })
            .collect()
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.matrix.rows(), self.matrix.cols(), self.matrix.data())
    }
}

fn check_preconditions(
    config: &ModelConfig,
    w: &MlpParams,
    aug: &AugmentationSet,
) -> Result<(usize, usize)> {
    config.validate()?;
    w.check_shapes(config)?;
    let h = config.hidden_layers();
    let fail = |d: &str| Err(Error::contract("cn_last_layer_system", d.to_string()));
    if config.output_dim() != 1 {
        return fail("needs a single output unit");
    }
    if config.residual {
        return fail("residual networks are not covered");
    }
    if h == 0 || !config.cn_layers[h - 1] {
        return fail("needs CN on the last hidden layer");
    }
    if aug.is_empty() || aug.augmented.cols() != config.input_dim() {
        return fail("augmentations do not match the input width");
    }
    let offsets = config.cn_offsets();
    let (start, width) = offsets[h - 1].expect("checked above");
    Ok((start, width))
}

/// CN parameters with identity everywhere except the last hidden layer.
pub fn last_layer_cn(config: &ModelConfig, rows: usize, gamma: &[f64], beta: &[f64]) -> CnParams {
    let h = config.hidden_layers();
    let (start, width) = config.cn_offsets()[h - 1].expect("last layer has CN");
    assert_eq!(gamma.len(), width);
    assert_eq!(beta.len(), width);
    let mut cn = identity_cn(rows, config);
    for r in 0..rows {
        cn.gamma.row_mut(r)[start..start + width].copy_from_slice(gamma);
        cn.beta.row_mut(r)[start..start + width].copy_from_slice(beta);
    }
    cn
}

pub fn cn_last_layer_system(
    config: &ModelConfig,
    w: &MlpParams,
    aug: &AugmentationSet,
) -> Result<CnLinearSystem> {
    check_preconditions(config, w, aug)?;
    let h = config.hidden_layers();
    let n = aug.len();
    let g = Graph::new();
    let wv = w.bind(&g);
    let cn = identity_cn(n, config).bind(&g);
    let act = features(config, &wv, Some(&cn), g.leaf(aug.augmented.clone()));
    g.check()?;
    let act = act.value();
    let out_w = w.weights[h].row(0);
    let m = out_w.len();
    let mut data = Vec::with_capacity(n * 2 * m);
    for i in 0..n {
        data.extend(act.row(i).iter().zip(out_w).map(|(a, wk)| a * wk));
        data.extend_from_slice(out_w);
    }
    Ok(CnLinearSystem {
        matrix: Tensor::matrix(n, 2 * m, data),
        offset: w.biases[h].data()[0],
    })
}

/// Numerical rank with tolerance `RANK_TOL * sigma_max`.
pub fn numerical_rank(m: &Tensor) -> usize {
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let sv = a.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            restarts: 20,
            steps: 2000,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityGap {
    /// Sum of squared errors of the best CN-only fit.
    pub cn_residual: f64,
    /// Best sum of squared errors reached by optimizing every parameter.
    pub joint_residual: f64,
    pub rank_ok: bool,
    pub rank: usize,
}

fn sse(pred: &[f64], targets: &[f64]) -> f64 {
    pred.iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

/// Least-squares CN-only fit of `targets`; returns `(gamma, beta, sse)`.
pub fn cn_least_squares(system: &CnLinearSystem, targets: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let a = system.to_nalgebra();
    let rhs = DVector::from_iterator(targets.len(), targets.iter().map(|t| t - system.offset));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let theta = svd
        .solve(&rhs, RANK_TOL * smax.max(f64::MIN_POSITIVE))
        .expect("both singular vector sets were computed");
    let m = system.matrix.cols() / 2;
    let gamma = theta.as_slice()[..m].to_vec();
    let beta = theta.as_slice()[m..].to_vec();
    let res = sse(&system.predict(&gamma, &beta), targets);
    (gamma, beta, res)
}

/// Multi-restart gradient descent over all weights and the last-layer CN.
/// Restart 0 starts from `w`; the rest from fresh initializations.
pub fn joint_oracle(
    config: &ModelConfig,
    w: &MlpParams,
    aug: &AugmentationSet,
    targets: &[f64],
    oracle: &OracleConfig,
) -> f64 {
    let n = aug.len();
    let width = config.widths[config.hidden_layers()];
    let mut best = f64::INFINITY;
    for restart in 0..oracle.restarts.max(1) {
        let mut params = if restart == 0 {
            w.clone()
        } else {
            init_params(config, oracle.seed.wrapping_add(restart as u64))
        };
        let mut gamma = Tensor::ones(&[1, width]);
        let mut beta = Tensor::zeros(&[1, width]);
        for step in 0..=oracle.steps {
            let g = Graph::new();
            let wv = params.bind(&g);
            let (gv, bv) = (g.leaf(gamma.clone()), g.leaf(beta.clone()));
            let cn = expand_last_layer(config, &g, gv, bv, n);
            let y = forward(config, &wv, Some(&cn), g.leaf(aug.augmented.clone()));
            let t = g.leaf(Tensor::matrix(n, 1, targets.to_vec()));
            let loss = (y - t).square().sum();
            if g.check().is_err() {
                break;
            }
            best = best.min(loss.item());
            if step == oracle.steps {
                break;
            }
            let mut vars = wv.all();
            vars.push(gv);
            vars.push(bv);
            let Ok(grads) = g.gradient(loss, &vars, false) else {
                break;
            };
            let grads: Vec<Tensor> = grads.iter().map(|v| (*v.value()).clone()).collect();
            let k = grads.len();
            params.sgd_step(&grads[..k - 2], oracle.lr);
            gamma.axpy(-oracle.lr, &grads[k - 2]);
            beta.axpy(-oracle.lr, &grads[k - 1]);
            if !params.is_finite() || !gamma.is_finite() || !beta.is_finite() {
                break;
            }
        }
    }
    best
}

/// Full-width CN vars: identity except the last hidden layer, which takes
/// the (broadcast) `gamma`/`beta` rows.
fn expand_last_layer<'g>(
    config: &ModelConfig,
    g: &'g Graph,
    gamma: crate::autodiff::Var<'g>,
    beta: crate::autodiff::Var<'g>,
    rows: usize,
) -> CnVars<'g> {
    let h = config.hidden_layers();
    let d = config.cn_dim();
    let (start, width) = config.cn_offsets()[h - 1].expect("last layer has CN");
    let idx: Vec<usize> = (start..start + width).collect();
    let mut keep = vec![1.0; d];
    for &i in &idx {
        keep[i] = 0.0;
    }
    let keep = g.leaf(Tensor::vector(keep)).broadcast_row(rows);
    let ones = keep;
    let place = |v: crate::autodiff::Var<'g>| {
        g.apply(
            crate::autodiff::OpKind::ScatterCols {
                idx: idx.clone().into(),
                cols: d,
            },
            &[v],
        )
        .expect("scatter within width")
        .repeat_rows(rows)
    };
    CnVars {
        gamma: ones + place(gamma),
        beta: place(beta),
    }
}

/// CN-only least squares versus the all-parameter oracle.
pub fn expressivity_gap(
    config: &ModelConfig,
    w: &MlpParams,
    aug: &AugmentationSet,
    targets: &[f64],
    oracle: &OracleConfig,
) -> Result<ExpressivityGap> {
    if targets.len() != aug.len() {
        return Err(Error::contract(
            "expressivity_gap",
            format!("{} targets for {} augmentations", targets.len(), aug.len()),
        ));
    }
    let system = cn_last_layer_system(config, w, aug)?;
    let rank = numerical_rank(&system.matrix);
    let (_, _, cn_residual) = cn_least_squares(&system, targets);
    let joint_residual = joint_oracle(config, w, aug, targets, oracle);
    Ok(ExpressivityGap {
        cn_residual,
        joint_residual,
        rank_ok: rank == aug.len(),
        rank,
    })
}

/// `w_hat + delta` with `delta ~ N(0, sigma^2)` elementwise.
pub fn perturbed_weights(w_hat: &MlpParams, sigma: f64, seed: u64) -> MlpParams {
    let mut r = rng::seeded(seed);
    let mut w = w_hat.clone();
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            *v += sigma * rng::normal(&mut r);
        }
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub widths: Vec<usize>,
    pub n_g: usize,
    pub draws: usize,
    pub sigma: f64,
    pub oracle: OracleConfig,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            widths: vec![3, 6, 6, 1],
            n_g: 4,
            draws: 100,
            sigma: 0.1,
            oracle: OracleConfig {
                restarts: 20,
                steps: 2000,
                lr: 1e-2,
                seed: 0,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressivityReport {
    pub draws: usize,
    pub condition_held: usize,
    pub rank_ok: usize,
    pub rank_ok_rate: f64,
    /// Draws with full rank whose CN residual exceeds `1e-8` or the oracle's
    /// residual by more than `1e-8`.
    pub violations: usize,
    /// `[min, median, max]`.
    pub cn_residual_quantiles: [f64; 3],
    pub joint_residual_quantiles: [f64; 3],
    pub gaps: Vec<ExpressivityGap>,
}

fn quantiles(mut v: Vec<f64>) -> [f64; 3] {
    if v.is_empty() {
        return [f64::NAN; 3];
    }
    v.sort_by(f64::total_cmp);
    [v[0], v[v.len() / 2], v[v.len() - 1]]
}

/// Draws `w = w_hat + delta`, random unit augmentations and Gaussian
/// targets, and records rank and residuals for each draw.
pub fn monte_carlo(cfg: &MonteCarloConfig) -> Result<ExpressivityReport> {
    let config = ModelConfig::new(cfg.widths.clone(), false)?.last_layer_cn();
    if config.hidden_layers() == 0 || config.widths[config.hidden_layers()] < cfg.n_g {
        return Err(Error::Config(format!(
            "last hidden width must be at least n_g = {}",
            cfg.n_g
        )));
    }
    let w_hat = init_params(&config, cfg.seed);
    let mut gaps = Vec::with_capacity(cfg.draws);
    let mut condition_held = 0;
    for d in 0..cfg.draws {
        let seed = rng::derive_seed(cfg.seed, d as u64);
        let w = perturbed_weights(&w_hat, cfg.sigma, seed);
        let aug = random_unit_augmentations(cfg.n_g, config.input_dim(), seed ^ 0x5151);
        if check_condition(&aug) {
            condition_held += 1;
        }
        let mut r = rng::seeded(seed ^ 0xA5A5);
        let targets: Vec<f64> = (0..cfg.n_g).map(|_| rng::normal(&mut r)).collect();
        let oracle = OracleConfig {
            seed: seed ^ 0x77,
            ..cfg.oracle
        };
        gaps.push(expressivity_gap(&config, &w, &aug, &targets, &oracle)?);
    }
    let rank_ok = gaps.iter().filter(|g| g.rank_ok).count();
    let violations = gaps
        .iter()
        .filter(|g| g.rank_ok && (g.cn_residual > 1e-8 || g.cn_residual > g.joint_residual + 1e-8))
        .count();
    Ok(ExpressivityReport {
        draws: cfg.draws,
        condition_held,
        rank_ok,
        rank_ok_rate: rank_ok as f64 / cfg.draws.max(1) as f64,
        violations,
        cn_residual_quantiles: quantiles(gaps.iter().map(|g| g.cn_residual).collect()),
        joint_residual_quantiles: quantiles(gaps.iter().map(|g| g.joint_residual).collect()),
        gaps,
    })
}

/// `forward_cn` outputs at the augmented inputs with the given last-layer CN.
pub fn forward_last_layer(
    config: &ModelConfig,
    w: &MlpParams,
    aug: &AugmentationSet,
    gamma: &[f64],
    beta: &[f64],
) -> Result<Vec<f64>> {
    let cn = last_layer_cn(config, aug.len(), gamma, beta);
    Ok(forward_cn(config, w, &cn, &aug.augmented)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> (ModelConfig, MlpParams) {
        let config = ModelConfig::new(vec![3, 5, 4, 1], false).unwrap();
        let w = init_params(&config, 2);
        (config, w)
    }

    #[test]
    fn orthonormal_and_duplicate_conditions() {
        let aug = AugmentationSet {
            query: vec![1.0, 0.0, 0.0],
            augmented: Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
        };
        assert!(check_condition(&aug));
        let dup = AugmentationSet {
            query: vec![1.0, 0.0],
            augmented: Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]),
        };
        assert!(!check_condition(&dup));
    }

    #[test]
    fn identity_cn_reproduces_forward() {
        let (config, w) = net();
        let aug = random_unit_augmentations(3, 3, 1);
        let sys = cn_last_layer_system(&config, &w, &aug).unwrap();
        let m = config.widths[2];
        let via = sys.predict(&vec![1.0; m], &vec![0.0; m]);
        let direct = crate::cn_mlp::forward_plain(&config, &w, &aug.augmented).unwrap();
        for (a, b) in via.iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn preconditions_enforced() {
        let config = ModelConfig::new(vec![3, 5, 2], false).unwrap();
        let w = init_params(&config, 0);
        let aug = random_unit_augmentations(2, 3, 0);
        assert!(cn_last_layer_system(&config, &w, &aug).is_err());
        let resid = ModelConfig::new(vec![1, 4, 1], true).unwrap();
        let w = init_params(&resid, 0);
        let aug = random_unit_augmentations(2, 1, 0);
        assert!(cn_last_layer_system(&resid, &w, &aug).is_err());
    }

    #[test]
    fn zero_weights_have_rank_zero() {
        let (config, mut w) = net();
        for t in w.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let aug = random_unit_augmentations(3, 3, 5);
        let sys = cn_last_layer_system(&config, &w, &aug).unwrap();
        assert_eq!(numerical_rank(&sys.matrix), 0);
    }

    #[test]
    fn joint_oracle_does_not_increase_from_start() {
        let (config, w) = net();
        let aug = random_unit_augmentations(3, 3, 7);
        let t = [0.3, -0.2, 0.9];
        let start = sse(
            &crate::cn_mlp::forward_plain(&config, &w, &aug.augmented)
                .unwrap()
                .into_data(),
            &t,
        );
        let oracle = OracleConfig {
            restarts: 2,
            steps: 200,
            lr: 1e-2,
            seed: 1,
        };
        assert!(joint_oracle(&config, &w, &aug, &t, &oracle) <= start);
    }
}
