//! Feed-forward network with per-sample conditional-normalization (CN)
//! layers.
//!
//! Hidden layer `l` computes `h = gamma_l * act(W_l h_prev + b_l) + beta_l`
//! when CN is enabled for it. The weights `w` (every `W_l`, `b_l`) are shared
//! across samples; `gamma`/`beta` carry one row per sample.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::container;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Softplus { alpha: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Softplus { alpha: 1.0 }
    }
}

impl Activation {
    fn apply<'g>(&self, z: Var<'g>) -> Var<'g> {
        match *self {
            Activation::Softplus { alpha } => z.softplus(alpha),
            Activation::Tanh => z.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layer widths `m_0 ..= m_{H+1}`: input, hidden layers, output.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Adds the input to the network output.
    #[serde(default)]
    pub residual: bool,
    /// Which hidden layers carry CN parameters; one flag per hidden layer.
    pub cn_layers: Vec<bool>,
}

impl ModelConfig {
    /// Softplus network with CN on every hidden layer.
    pub fn new(widths: Vec<usize>, residual: bool) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        let cfg = ModelConfig {
            widths,
            activation: Activation::default(),
            residual,
            cn_layers: vec![true; hidden],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Keeps CN only on the last hidden layer.
    pub fn last_layer_cn(mut self) -> Self {
        let h = self.hidden_layers();
        self.cn_layers = (0..h).map(|l| l + 1 == h).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Config(format!(
                "need at least one hidden layer, widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.cn_layers.len() != self.hidden_layers() {
            return Err(Error::Config(format!(
                "cn_layers has {} flags for {} hidden layers",
                self.cn_layers.len(),
                self.hidden_layers()
            )));
        }
        if self.residual && self.input_dim() != self.output_dim() {
            return Err(Error::Config(format!(
                "residual output needs equal input/output widths, got {} and {}",
                self.input_dim(),
                self.output_dim()
            )));
        }
        if let Activation::Softplus { alpha } = self.activation {
            if !(alpha > 0.0) {
                return Err(Error::Config(format!("softplus alpha {alpha} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total CN width: sum of the widths of CN-enabled hidden layers.
    pub fn cn_dim(&self) -> usize {
        self.cn_offsets().iter().flatten().map(|&(_, w)| w).sum()
    }

    /// Column range `(start, width)` of each hidden layer inside the CN
    /// parameter rows, or `None` for layers without CN.
    pub fn cn_offsets(&self) -> Vec<Option<(usize, usize)>> {
        let mut start = 0;
        (0..self.hidden_layers())
            .map(|l| {
                if self.cn_layers[l] {
                    let w = self.widths[l + 1];
                    let r = Some((start, w));
                    start += w;
                    r
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Outer-loop weights: `W_l` is `m_l x m_{l-1}`, `b_l` has length `m_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Weights drawn from `N(0, 1/fan_in)`, biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> MlpParams {
    let mut rng = rng::seeded(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in config.widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * rng::normal(&mut rng))
            .collect();
        weights.push(Tensor::matrix(fan_out, fan_in, data));
        biases.push(Tensor::zeros(&[fan_out]));
    }
    MlpParams { weights, biases }
}

impl MlpParams {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Tensors in canonical order `W_1, b_1, W_2, b_2, ...`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Rebuilds parameters with `config`'s shapes from a flat vector.
    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.param_count() {
            return Err(Error::Format(format!(
                "{} values for {} parameters",
                flat.len(),
                config.param_count()
            )));
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = flat[offset..offset + n].to_vec();
            offset += n;
            s
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in config.widths.windows(2) {
            weights.push(Tensor::matrix(pair[1], pair[0], take(pair[0] * pair[1])));
            biases.push(Tensor::vector(take(pair[1])));
        }
        Ok(MlpParams { weights, biases })
    }

    /// `w <- w - lr * grad`, grads in [`MlpParams::tensors`] order.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) {
        let mut targets = self.tensors_mut();
        assert_eq!(targets.len(), grads.len(), "gradient count mismatch");
        for (t, g) in targets.iter_mut().zip(grads) {
            t.axpy(-lr, g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let ok = self.weights.len() == config.widths.len() - 1
            && self.biases.len() == self.weights.len()
            && config.widths.windows(2).enumerate().all(|(l, p)| {
                self.weights[l].shape() == [p[1], p[0]] && self.biases[l].shape() == [p[1]]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::contract(
                "mlp",
                "parameter shapes do not match the model config",
            ))
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> MlpVars<'g> {
        MlpVars {
            weights: self.weights.iter().map(|w| g.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| g.leaf(b.clone())).collect(),
        }
    }
}

/// Weights recorded in a graph.
#[derive(Clone, Debug)]
pub struct MlpVars<'g> {
    pub weights: Vec<Var<'g>>,
    pub biases: Vec<Var<'g>>,
}

impl<'g> MlpVars<'g> {
    pub fn all(&self) -> Vec<Var<'g>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }

    /// Rebuilds from a list in [`MlpVars::all`] order.
    pub fn from_all(vars: &[Var<'g>]) -> Self {
        MlpVars {
            weights: vars.iter().step_by(2).copied().collect(),
            biases: vars.iter().skip(1).step_by(2).copied().collect(),
        }
    }
}

/// Per-sample CN parameters, `rows x cn_dim` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `gamma = 1`, `beta = 0`: the CN layers are the identity map.
pub fn identity_cn(batch: usize, config: &ModelConfig) -> CnParams {
    assert!(batch >= 1, "identity_cn needs at least one row");
    let d = config.cn_dim();
    CnParams {
        gamma: Tensor::ones(&[batch, d]),
        beta: Tensor::zeros(&[batch, d]),
    }
}

impl CnParams {
    pub fn rows(&self) -> usize {
        self.gamma.rows()
    }

    pub fn is_identity(&self) -> bool {
        self.gamma.data().iter().all(|&v| v == 1.0) && self.beta.data().iter().all(|&v| v == 0.0)
    }

    /// Each row repeated `k` times (shares one CN row across `k` inputs).
    pub fn expand(&self, k: usize) -> CnParams {
        let idx: Vec<usize> = (0..self.rows())
            .flat_map(|r| std::iter::repeat_n(r, k))
            .collect();
        CnParams {
            gamma: self.gamma.select_rows(&idx),
            beta: self.beta.select_rows(&idx),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> CnVars<'g> {
        CnVars {
            gamma: g.leaf(self.gamma.clone()),
            beta: g.leaf(self.beta.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CnVars<'g> {
    pub gamma: Var<'g>,
    pub beta: Var<'g>,
}

impl<'g> CnVars<'g> {
    pub fn repeat_rows(&self, k: usize) -> CnVars<'g> {
        CnVars {
            gamma: self.gamma.repeat_rows(k),
            beta: self.beta.repeat_rows(k),
        }
    }

    pub fn to_params(&self) -> CnParams {
        CnParams {
            gamma: (*self.gamma.value()).clone(),
            beta: (*self.beta.value()).clone(),
        }
    }
}

/// Last hidden representation `h^(H)` (after CN).
pub fn features<'g>(
    config: &ModelConfig,
    w: &MlpVars<'g>,
    cn: Option<&CnVars<'g>>,
    x: Var<'g>,
) -> Var<'g> {
    let rows = x.shape()[0];
    if let Some(cn) = cn {
        assert_eq!(cn.gamma.shape()[0], rows, "CN rows must match the batch");
    }
    let offsets = config.cn_offsets();
    let mut h = x;
    for l in 0..config.hidden_layers() {
        let z = h.matmul_t(&w.weights[l]) + w.biases[l].broadcast_row(rows);
        let a = config.activation.apply(z);
        h = match (cn, offsets[l]) {
            (Some(cn), Some((start, width))) => {
                let gamma = cn.gamma.slice_cols(start, width);
                let beta = cn.beta.slice_cols(start, width);
                gamma * a + beta
            }
            _ => a,
        };
    }
    h
}

/// Network output; with `cn = None` the CN layers are skipped entirely.
pub fn forward<'g>(
    config: &ModelConfig,
    w: &MlpVars<'g>,
    cn: Option<&CnVars<'g>>,
    x: Var<'g>,
) -> Var<'g> {
    let rows = x.shape()[0];
    let h = features(config, w, cn, x);
    let last = config.hidden_layers();
    let out = h.matmul_t(&w.weights[last]) + w.biases[last].broadcast_row(rows);
    if config.residual {
        out + x
    } else {
        out
    }
}

/// Concrete forward pass with explicit CN parameters.
pub fn forward_cn(
    config: &ModelConfig,
    w: &MlpParams,
    cn: &CnParams,
    x: &Tensor,
) -> Result<Tensor> {
    check_input(config, x)?;
    if cn.rows() != x.rows() || cn.gamma.cols() != config.cn_dim() {
        return Err(Error::contract(
            "forward_cn",
            format!(
                "CN params {:?} for input {:?} (cn_dim {})",
                cn.gamma.shape(),
                x.shape(),
                config.cn_dim()
            ),
        ));
    }
    let g = Graph::new();
    let wv = w.bind(&g);
    let cv = cn.bind(&g);
    let y = forward(config, &wv, Some(&cv), g.leaf(x.clone()));
    g.check()?;
    Ok((*y.value()).clone())
}

/// Concrete forward pass without CN layers.
pub fn forward_plain(config: &ModelConfig, w: &MlpParams, x: &Tensor) -> Result<Tensor> {
    check_input(config, x)?;
    let g = Graph::new();
    let wv = w.bind(&g);
    let y = forward(config, &wv, None, g.leaf(x.clone()));
    g.check()?;
    Ok((*y.value()).clone())
}

fn check_input(config: &ModelConfig, x: &Tensor) -> Result<()> {
    match x.shape() {
        [_, d] if *d == config.input_dim() => Ok(()),
        s => Err(Error::contract(
            "forward",
            format!("input shape {s:?}, expected [b, {}]", config.input_dim()),
        )),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    /// Payload order, e.g. `["W1", "b1", "W2", ...]`, with shapes.
    layout: Vec<(String, Vec<usize>)>,
}

const CHECKPOINT_FORMAT: &str = "metatailor-checkpoint";

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &MlpParams) -> Result<()> {
    params.check_shapes(config)?;
    let layout = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let name = if i % 2 == 0 { "W" } else { "b" };
            (format!("{name}{}", i / 2 + 1), t.shape().to_vec())
        })
        .collect();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        config: config.clone(),
        layout,
    };
    container::write(path, &header, &params.flatten())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, MlpParams)> {
    let (header, payload): (CheckpointHeader, Vec<f64>) = container::read(path)?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    let params = MlpParams::from_flat(&header.config, &payload)?;
    for ((_, shape), t) in header.layout.iter().zip(params.tensors()) {
        if shape.as_slice() != t.shape() {
            return Err(Error::Format(
                "checkpoint layout disagrees with config".into(),
            ));
        }
    }
    Ok((header.config, params))
}
