//! Inner/outer optimization: per-query CN tailoring, meta-tailoring
//! training (CNGrad and MAMmoTh), inductive training, CN meta-learning and
//! the prediction-time baselines.
//!
//! Pooling convention: the inner objective is the sum over CN rows of the
//! mean per-input loss of the inputs sharing that row. Per-row tailoring is
//! therefore independent of the batch size, and whole-batch pooling
//! minimizes the batch mean.

use std::cell::OnceCell;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::cn_mlp::{
    features, forward, forward_cn, identity_cn, init_params, CnParams, CnVars, MlpParams, MlpVars,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::losses::{aux_regularized_loss, mse, mse_value, PerRowLoss};
use crate::rng::{self, Rng};

/// Divergence threshold on the supervised loss.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    First,
    Second,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    PerRow,
    WholeBatch,
    /// Each CN row is shared by `k` consecutive input rows.
    Interleave(usize),
}

impl PoolMode {
    /// `(cn_rows, group)` for a batch of `b` inputs.
    pub fn layout(&self, b: usize) -> Result<(usize, usize)> {
        match *self {
            _ if b == 0 => Err(Error::contract("tailor", "empty batch")),
            PoolMode::PerRow => Ok((b, 1)),
            PoolMode::WholeBatch => Ok((1, b)),
            PoolMode::Interleave(k) if k >= 1 && b.is_multiple_of(k) => Ok((b / k, k)),
            PoolMode::Interleave(k) => Err(Error::contract(
                "tailor",
                format!("batch of {b} rows cannot be interleaved in groups of {k}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TailorConfig {
    pub steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub order: Order,
    pub detach_between_steps: bool,
    pub pool: PoolMode,
}

impl Default for TailorConfig {
    fn default() -> Self {
        TailorConfig::new(2, 1e-3, 1e-3, Order::First)
    }
}

impl TailorConfig {
    /// Detaching between steps is on for first order and off for second.
    pub fn new(steps: usize, inner_lr: f64, outer_lr: f64, order: Order) -> Self {
        TailorConfig {
            steps,
            inner_lr,
            outer_lr,
            order,
            detach_between_steps: order == Order::First,
            pool: PoolMode::PerRow,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_pool(mut self, pool: PoolMode) -> Self {
        self.pool = pool;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let PoolMode::Interleave(0) = self.pool {
            return Err(Error::Config("interleave group must be >= 1".into()));
        }
        Ok(())
    }

    /// True when inner adaptation cannot change anything.
    pub fn is_inert(&self) -> bool {
        self.steps == 0 || self.inner_lr == 0.0
    }

    fn create_graph(&self) -> bool {
        self.order == Order::Second
    }
}

/// Forward-pass context handed to tailoring losses. The network output is
/// computed once and shared by every caller.
pub struct CnForward<'a, 'g> {
    pub config: &'a ModelConfig,
    pub w: &'a MlpVars<'g>,
    /// `None` runs the network without CN layers.
    pub cn: Option<CnVars<'g>>,
    pub x: Var<'g>,
    /// Input rows per CN row.
    pub group: usize,
    output: OnceCell<Var<'g>>,
}

impl<'a, 'g> CnForward<'a, 'g> {
    pub fn new(
        config: &'a ModelConfig,
        w: &'a MlpVars<'g>,
        cn: Option<CnVars<'g>>,
        x: Var<'g>,
        group: usize,
    ) -> Self {
        CnForward {
            config,
            w,
            cn,
            x,
            group,
            output: OnceCell::new(),
        }
    }

    pub fn output(&self) -> Var<'g> {
        *self.output.get_or_init(|| {
            let cn = self.cn.map(|c| c.repeat_rows(self.group));
            forward(self.config, self.w, cn.as_ref(), self.x)
        })
    }

    /// Penultimate features of `inputs`, where every `k` consecutive rows
    /// belong to one row of `x`.
    pub fn features(&self, inputs: Var<'g>, k: usize) -> Var<'g> {
        let cn = self.cn.map(|c| c.repeat_rows(self.group * k));
        features(self.config, self.w, cn.as_ref(), inputs)
    }
}

/// An unsupervised objective evaluated per input row (`b x 1`).
pub trait TailorLoss {
    fn per_row<'g>(&self, ctx: &CnForward<'_, 'g>) -> Result<Var<'g>>;
}

impl<L: PerRowLoss + ?Sized> TailorLoss for L {
    fn per_row<'g>(&self, ctx: &CnForward<'_, 'g>) -> Result<Var<'g>> {
        Ok(PerRowLoss::per_row(self, ctx.x, ctx.output()))
    }
}

/// Feature-smoothness loss under Gaussian input noise. The noise draw is
/// fixed by `seed`, so it is the same at every inner step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessLoss {
    pub nu: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl TailorLoss for SmoothnessLoss {
    fn per_row<'g>(&self, ctx: &CnForward<'_, 'g>) -> Result<Var<'g>> {
        crate::losses::smoothness_per_row(
            |inp, k| ctx.features(inp, k),
            ctx.x,
            self.nu,
            self.n_samples,
            self.seed,
        )
    }
}

fn pooled<'g>(per_row: Var<'g>, group: usize) -> Var<'g> {
    if group == 1 {
        per_row.sum()
    } else {
        per_row
            .sum_row_groups(group)
            .sum()
            .scale(1.0 / group as f64)
    }
}

fn step_fault(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::TailorStep { step },
        other => other,
    }
}

/// One simultaneous update of `gamma` and `beta`, both gradients taken at
/// the current point. Returns the new CN and the per-row loss before it.
#[allow(clippy::too_many_arguments)]
fn inner_step<'g, L: TailorLoss + ?Sized>(
    g: &'g Graph,
    config: &ModelConfig,
    w: &MlpVars<'g>,
    cn: CnVars<'g>,
    x: Var<'g>,
    group: usize,
    loss: &L,
    lr: f64,
    create_graph: bool,
    step: usize,
) -> Result<(CnVars<'g>, Var<'g>)> {
    let ctx = CnForward::new(config, w, Some(cn), x, group);
    let per_row = loss.per_row(&ctx)?;
    let grads = g
        .gradient(pooled(per_row, group), &[cn.gamma, cn.beta], create_graph)
        .map_err(step_fault(step))?;
    let next = CnVars {
        gamma: cn.gamma - grads[0].scale(lr),
        beta: cn.beta - grads[1].scale(lr),
    };
    g.check().map_err(step_fault(step))?;
    Ok((next, per_row))
}

/// Result of adapting CN parameters to a batch of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct TailorTrace {
    /// `gamma_s, beta_s` for `s = 0..=steps` (only the last when the
    /// sequence was not requested).
    pub cn: Vec<CnParams>,
    /// Per-input-row tailoring loss at each `s = 0..=steps`.
    pub losses: Vec<Vec<f64>>,
    /// Input rows per CN row.
    pub group: usize,
}

impl TailorTrace {
    pub fn final_cn(&self) -> &CnParams {
        self.cn.last().expect("trace holds at least one CN state")
    }

    /// Final CN expanded to one row per input.
    pub fn final_cn_per_input(&self) -> CnParams {
        self.final_cn().expand(self.group)
    }

    /// Mean tailoring loss over rows at each step.
    pub fn mean_losses(&self) -> Vec<f64> {
        self.losses
            .iter()
            .map(|l| l.iter().sum::<f64>() / l.len() as f64)
            .collect()
    }
}

fn check_query(config: &ModelConfig, w: &MlpParams, cfg: &TailorConfig, x: &Tensor) -> Result<()> {
    cfg.validate()?;
    w.check_shapes(config)?;
    if x.rank() != 2 || x.cols() != config.input_dim() {
        return Err(Error::contract(
            "tailor",
            format!(
                "input shape {:?}, expected [b, {}]",
                x.shape(),
                config.input_dim()
            ),
        ));
    }
    if !x.is_finite() {
        return Err(Error::contract(
            "tailor",
            "input contains non-finite values",
        ));
    }
    Ok(())
}

fn run_tailor<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
    keep_all: bool,
) -> Result<TailorTrace> {
    check_query(config, w, cfg, x)?;
    let (rows, group) = cfg.pool.layout(x.rows())?;
    let mut cn = identity_cn(rows, config);
    let mut seq = vec![cn.clone()];
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 1..=cfg.steps {
        let g = Graph::new();
        let wv = w.bind(&g);
        let (next, per_row) = inner_step(
            &g,
            config,
            &wv,
            cn.bind(&g),
            g.leaf(x.clone()),
            group,
            loss,
            cfg.inner_lr,
            false,
            step,
        )?;
        losses.push(per_row.value().data().to_vec());
        cn = next.to_params();
        if keep_all {
            seq.push(cn.clone());
        } else {
            seq[0] = cn.clone();
        }
    }
    // Loss at the final point.
    let g = Graph::new();
    let wv = w.bind(&g);
    let ctx = CnForward::new(config, &wv, Some(cn.bind(&g)), g.leaf(x.clone()), group);
    let last = loss.per_row(&ctx)?;
    g.check().map_err(step_fault(cfg.steps))?;
    losses.push(last.value().data().to_vec());
    Ok(TailorTrace {
        cn: seq,
        losses,
        group,
    })
}

/// Adapts CN parameters to `x`, starting from the identity; returns every
/// intermediate `gamma_s, beta_s`.
pub fn tailor<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
) -> Result<TailorTrace> {
    run_tailor(config, w, loss, cfg, x, true)
}

/// Like [`tailor`] but keeps only the final CN state.
pub fn tailor_final<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
) -> Result<TailorTrace> {
    run_tailor(config, w, loss, cfg, x, false)
}

/// Tailored prediction and its trace.
pub fn predict_tailored_trace<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
) -> Result<(Tensor, TailorTrace)> {
    let trace = tailor_final(config, w, loss, cfg, x)?;
    let y = forward_cn(config, w, &trace.final_cn_per_input(), x)?;
    Ok((y, trace))
}

/// Tailors CN to `x`, then predicts with the final CN.
pub fn predict_tailored<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        check_query(config, w, cfg, x)?;
        return forward_cn(config, w, &identity_cn(x.rows(), config), x);
    }
    Ok(predict_tailored_trace(config, w, loss, cfg, x)?.0)
}

/// One shared CN row adapted on the mean loss over all of `x_all`.
pub fn batch_ttt<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x_all: &Tensor,
) -> Result<Tensor> {
    let cfg = cfg.clone().with_pool(PoolMode::WholeBatch);
    predict_tailored(config, w, loss, &cfg, x_all)
}

/// Per-row loss values of concrete predictions.
pub fn per_row_values<L: PerRowLoss + ?Sized>(
    loss: &L,
    x: &Tensor,
    y: &Tensor,
) -> Result<Vec<f64>> {
    let g = Graph::new();
    let l = loss.per_row(g.leaf(x.clone()), g.leaf(y.clone()));
    g.check()?;
    Ok(l.value().data().to_vec())
}

/// Gradient descent on the batch-mean physics loss directly in output space.
pub fn optimize_output<L: PerRowLoss + ?Sized>(
    yhat0: &Tensor,
    x: &Tensor,
    loss: &L,
    steps: usize,
    lr: f64,
) -> Result<Tensor> {
    if yhat0.shape() != x.shape() && yhat0.rows() != x.rows() {
        return Err(Error::contract(
            "optimize_output",
            format!("{:?} predictions for {:?} inputs", yhat0.shape(), x.shape()),
        ));
    }
    let mut y = yhat0.clone();
    for step in 1..=steps {
        let g = Graph::new();
        let yv = g.leaf(y.clone());
        let obj = loss.mean(g.leaf(x.clone()), yv);
        let grad = g.gradient(obj, &[yv], false).map_err(step_fault(step))?;
        y.axpy(-lr, &grad[0].value());
        if !y.is_finite() {
            return Err(Error::TailorStep { step });
        }
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Training

/// Supervised data with an optional held-out split for per-epoch logging.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x: Tensor,
    pub y: Tensor,
    pub test: Option<(Tensor, Tensor)>,
}

impl TrainData {
    pub fn new(x: Tensor, y: Tensor) -> Self {
        TrainData { x, y, test: None }
    }

    pub fn with_test(mut self, x: Tensor, y: Tensor) -> Self {
        self.test = Some((x, y));
        self
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ok = |x: &Tensor, y: &Tensor| {
            x.rank() == 2
                && y.rank() == 2
                && x.rows() == y.rows()
                && x.rows() > 0
                && x.cols() == config.input_dim()
                && y.cols() == config.output_dim()
                && x.is_finite()
                && y.is_finite()
        };
        let test_ok = self.test.as_ref().is_none_or(|(x, y)| ok(x, y));
        if ok(&self.x, &self.y) && test_ok {
            Ok(())
        } else {
            Err(Error::contract(
                "train",
                "data shapes do not match the model or contain non-finite values",
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Log held-out loss every this many epochs (0 = never; the final epoch
    /// is always logged otherwise).
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 200,
            batch_size: 64,
            seed: 0,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_sup: f64,
    pub test_sup: Option<f64>,
    pub tailor_before: Option<f64>,
    pub tailor_after: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_json_lines(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json_lines()?.as_bytes())?;
        Ok(())
    }

    /// Equality of everything except wall-clock times.
    pub fn same_values(&self, other: &TrainLog) -> bool {
        let strip = |l: &TrainLog| -> Vec<EpochRecord> {
            l.records
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect()
        };
        strip(self) == strip(other)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Loss summary of one outer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub sup: f64,
    pub tailor_before: Option<f64>,
    pub tailor_after: Option<f64>,
}

/// Outer objective value, its gradient in [`MlpParams::tensors`] order and
/// a summary.
pub type OuterGradient = (f64, Vec<Tensor>, BatchStats);

fn grads_to_tensors(grads: &[Var<'_>]) -> Vec<Tensor> {
    grads.iter().map(|g| (*g.value()).clone()).collect()
}

fn batch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(rng, &mut order);
    order
}

fn divergence(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Divergence { .. } => e,
        e => Error::Divergence {
            epoch,
            batch,
            reason: e.to_string(),
        },
    }
}

/// Shared minibatch loop: shuffling, divergence checks and logging.
fn run_epochs<B, E>(
    config: &ModelConfig,
    data: &TrainData,
    opts: &TrainOptions,
    mut params: MlpParams,
    mut batch_step: B,
    evaluate: E,
) -> Result<(MlpParams, TrainLog)>
where
    B: FnMut(&MlpParams, &Tensor, &Tensor) -> Result<(Vec<Tensor>, f64, BatchStats)>,
    E: Fn(&MlpParams, &Tensor) -> Result<Tensor>,
{
    data.validate(config)?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut shuffle_rng = rng::substream(opts.seed, 1);
    let n = data.x.rows();
    let start = Instant::now();
    let mut log = TrainLog::default();
    for epoch in 1..=opts.epochs {
        let order = batch_order(n, &mut shuffle_rng);
        let mut sums = [0.0f64; 3];
        let mut tailored = false;
        let mut seen = 0usize;
        for (bi, idx) in order.chunks(opts.batch_size).enumerate() {
            let xb = data.x.select_rows(idx);
            let yb = data.y.select_rows(idx);
            let (grads, lr, stats) =
                batch_step(&params, &xb, &yb).map_err(divergence(epoch, bi))?;
            if !stats.sup.is_finite() || stats.sup > DIVERGENCE_LOSS {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    reason: format!("supervised loss {}", stats.sup),
                });
            }
            params.sgd_step(&grads, lr);
            if !params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    reason: "non-finite weights after update".into(),
                });
            }
            let m = idx.len() as f64;
            sums[0] += m * stats.sup;
            if let (Some(b), Some(a)) = (stats.tailor_before, stats.tailor_after) {
                tailored = true;
                sums[1] += m * b;
                sums[2] += m * a;
            }
            seen += idx.len();
        }
        let due = opts.eval_every > 0 && (epoch % opts.eval_every == 0 || epoch == opts.epochs);
        let test_sup = match (&data.test, due) {
            (Some((xt, yt)), true) => {
                let pred = evaluate(&params, xt).map_err(divergence(epoch, 0))?;
                Some(mse_value(&pred, yt))
            }
            _ => None,
        };
        let seen = seen as f64;
        log.records.push(EpochRecord {
            epoch,
            train_sup: sums[0] / seen,
            test_sup,
            tailor_before: tailored.then(|| sums[1] / seen),
            tailor_after: tailored.then(|| sums[2] / seen),
            wall_time_s: start.elapsed().as_secs_f64(),
            seed: opts.seed,
        });
    }
    Ok((params, log))
}

/// Gradient of `mse + aux_weight * mean aux` with CN layers left out.
pub fn inductive_gradient(
    config: &ModelConfig,
    w: &MlpParams,
    aux: Option<(&dyn TailorLoss, f64)>,
    x: &Tensor,
    y: &Tensor,
) -> Result<OuterGradient> {
    let g = Graph::new();
    let wv = w.bind(&g);
    let ctx = CnForward::new(config, &wv, None, g.leaf(x.clone()), 1);
    let sup = mse(ctx.output(), g.leaf(y.clone()))?;
    let total = match aux {
        Some((loss, weight)) if weight != 0.0 => {
            aux_regularized_loss(sup, loss.per_row(&ctx)?.mean(), weight)
        }
        _ => sup,
    };
    let grads = g.gradient(total, &wv.all(), false)?;
    let stats = BatchStats {
        sup: sup.item(),
        tailor_before: None,
        tailor_after: None,
    };
    Ok((total.item(), grads_to_tensors(&grads), stats))
}

/// Plain minibatch gradient descent on the supervised loss, optionally
/// regularized by `aux_weight` times a physics loss.
pub fn train_inductive(
    data: &TrainData,
    config: &ModelConfig,
    aux: Option<(&dyn TailorLoss, f64)>,
    outer_lr: f64,
    opts: &TrainOptions,
) -> Result<(MlpParams, TrainLog)> {
    config.validate()?;
    run_epochs(
        config,
        data,
        opts,
        init_params(config, opts.seed),
        |w, x, y| {
            let (_, grads, stats) = inductive_gradient(config, w, aux, x, y)?;
            Ok((grads, outer_lr, stats))
        },
        |w, x| crate::cn_mlp::forward_plain(config, w, x),
    )
}

/// Outer gradient of one CNGrad batch: the sum over inner steps `s` of the
/// supervised loss after step `s`, differentiated with respect to `w`.
pub fn cngrad_outer_gradient<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
    y: &Tensor,
) -> Result<OuterGradient> {
    let (rows, group) = cfg.pool.layout(x.rows())?;
    let g = Graph::new();
    let wv = w.bind(&g);
    let xv = g.leaf(x.clone());
    let yv = g.leaf(y.clone());
    let mut cn = identity_cn(rows, config).bind(&g);
    let mut total: Option<Var<'_>> = None;
    let mut sup_last = 0.0;
    let mut before = 0.0;
    for step in 1..=cfg.steps {
        let (next, per_row) = inner_step(
            &g,
            config,
            &wv,
            cn,
            xv,
            group,
            loss,
            cfg.inner_lr,
            cfg.create_graph(),
            step,
        )?;
        if step == 1 {
            before = per_row.mean().item();
        }
        cn = if cfg.detach_between_steps {
            CnVars {
                gamma: next.gamma.detach(),
                beta: next.beta.detach(),
            }
        } else {
            next
        };
        let pred = forward(config, &wv, Some(&cn.repeat_rows(group)), xv);
        let sup = mse(pred, yv)?;
        sup_last = sup.item();
        total = Some(match total {
            Some(t) => t + sup,
            None => sup,
        });
    }
    let total =
        total.ok_or_else(|| Error::Config("CNGrad needs at least one inner step".into()))?;
    let after = {
        let ctx = CnForward::new(config, &wv, Some(cn), xv, group);
        loss.per_row(&ctx)?.mean().item()
    };
    let grads = g.gradient(total, &wv.all(), false)?;
    let stats = BatchStats {
        sup: sup_last,
        tailor_before: Some(before),
        tailor_after: Some(after),
    };
    Ok((total.item(), grads_to_tensors(&grads), stats))
}

/// Meta-tailoring with CN-only inner adaptation. With `steps = 0` or
/// `inner_lr = 0` this is exactly [`train_inductive`] without aux loss.
pub fn train_cngrad<L: TailorLoss + ?Sized>(
    data: &TrainData,
    config: &ModelConfig,
    loss: &L,
    cfg: &TailorConfig,
    opts: &TrainOptions,
) -> Result<(MlpParams, TrainLog)> {
    config.validate()?;
    cfg.validate()?;
    if cfg.is_inert() {
        return train_inductive(data, config, None, cfg.outer_lr, opts);
    }
    run_epochs(
        config,
        data,
        opts,
        init_params(config, opts.seed),
        |w, x, y| {
            let (_, grads, stats) = cngrad_outer_gradient(config, w, loss, cfg, x, y)?;
            Ok((grads, cfg.outer_lr, stats))
        },
        |w, x| predict_tailored(config, w, loss, cfg, x),
    )
}

/// Full-parameter adaptation of `w` to a single query `x` (one row).
fn adapt_all<'g, L: TailorLoss + ?Sized>(
    g: &'g Graph,
    config: &ModelConfig,
    w: &MlpVars<'g>,
    x: Var<'g>,
    loss: &L,
    cfg: &TailorConfig,
) -> Result<(MlpVars<'g>, f64)> {
    let mut theta = w.clone();
    let mut first = None;
    for step in 1..=cfg.steps {
        let ctx = CnForward::new(config, &theta, None, x, 1);
        let l = loss.per_row(&ctx)?.sum();
        first.get_or_insert(l.item());
        let all = theta.all();
        let grads = g
            .gradient(l, &all, cfg.create_graph())
            .map_err(step_fault(step))?;
        let next: Vec<Var<'g>> = all
            .iter()
            .zip(&grads)
            .map(|(p, gp)| *p - gp.scale(cfg.inner_lr))
            .collect();
        theta = MlpVars::from_all(&next);
    }
    Ok((theta, first.unwrap_or(0.0)))
}

/// Per-query full-parameter adaptation of a trained model, then prediction.
pub fn predict_mammoth<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
) -> Result<Tensor> {
    check_query(config, w, cfg, x)?;
    let mut out = Vec::with_capacity(x.rows() * config.output_dim());
    for i in 0..x.rows() {
        let g = Graph::new();
        let wv = w.bind(&g);
        let xi = g.leaf(x.select_rows(&[i]));
        let first_order = TailorConfig {
            order: Order::First,
            ..cfg.clone()
        };
        let (theta, _) = adapt_all(&g, config, &wv, xi, loss, &first_order)?;
        let y = forward(config, &theta, None, xi);
        g.check()?;
        out.extend_from_slice(y.value().data());
    }
    Ok(Tensor::matrix(x.rows(), config.output_dim(), out))
}

/// Outer gradient of one MAMmoTh batch: mean over rows of the supervised
/// loss of each row's adapted copy.
pub fn mammoth_outer_gradient<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    cfg: &TailorConfig,
    x: &Tensor,
    y: &Tensor,
) -> Result<OuterGradient> {
    let b = x.rows();
    let g = Graph::new();
    let wv = w.bind(&g);
    let mut total: Option<Var<'_>> = None;
    let mut before = 0.0;
    let mut after = 0.0;
    for i in 0..b {
        let xi = g.leaf(x.select_rows(&[i]));
        let yi = g.leaf(y.select_rows(&[i]));
        let (theta, l0) = adapt_all(&g, config, &wv, xi, loss, cfg)?;
        before += l0;
        let ctx = CnForward::new(config, &theta, None, xi, 1);
        after += loss.per_row(&ctx)?.item();
        let sup = mse(ctx.output(), yi)?;
        total = Some(match total {
            Some(t) => t + sup,
            None => sup,
        });
    }
    let total = total
        .ok_or_else(|| Error::contract("mammoth", "empty batch"))?
        .scale(1.0 / b as f64);
    let grads = g.gradient(total, &wv.all(), false)?;
    let stats = BatchStats {
        sup: total.item(),
        tailor_before: Some(before / b as f64),
        tailor_after: Some(after / b as f64),
    };
    Ok((total.item(), grads_to_tensors(&grads), stats))
}

/// Meta-tailoring with full-parameter per-query adaptation. With `steps = 0`
/// or `inner_lr = 0` this is exactly [`train_inductive`].
pub fn train_mammoth<L: TailorLoss + ?Sized>(
    data: &TrainData,
    config: &ModelConfig,
    loss: &L,
    cfg: &TailorConfig,
    opts: &TrainOptions,
) -> Result<(MlpParams, TrainLog)> {
    config.validate()?;
    cfg.validate()?;
    if cfg.is_inert() {
        return train_inductive(data, config, None, cfg.outer_lr, opts);
    }
    run_epochs(
        config,
        data,
        opts,
        init_params(config, opts.seed),
        |w, x, y| {
            let (_, grads, stats) = mammoth_outer_gradient(config, w, loss, cfg, x, y)?;
            Ok((grads, cfg.outer_lr, stats))
        },
        |w, x| predict_mammoth(config, w, loss, cfg, x),
    )
}

// ---------------------------------------------------------------------------
// Few-shot meta-learning

/// Support and query samples of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
}

pub trait TaskSampler {
    fn sample(&self, rng: &mut Rng, k: usize, k_query: usize) -> Task;
}

/// `y = a sin(x + phi)` regression tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinusoidTasks {
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    pub input_range: (f64, f64),
}

impl Default for SinusoidTasks {
    fn default() -> Self {
        SinusoidTasks {
            amplitude: (0.1, 5.0),
            phase: (0.0, std::f64::consts::PI),
            input_range: (-5.0, 5.0),
        }
    }
}

impl TaskSampler for SinusoidTasks {
    fn sample(&self, rng: &mut Rng, k: usize, k_query: usize) -> Task {
        let a = rng::uniform(rng, self.amplitude.0, self.amplitude.1);
        let phi = rng::uniform(rng, self.phase.0, self.phase.1);
        let mut draw = |n: usize| {
            let xs: Vec<f64> = (0..n)
                .map(|_| rng::uniform(rng, self.input_range.0, self.input_range.1))
                .collect();
            let ys = xs.iter().map(|x| a * (x + phi).sin()).collect();
            (Tensor::matrix(n, 1, xs), Tensor::matrix(n, 1, ys))
        };
        let (support_x, support_y) = draw(k);
        let (query_x, query_y) = draw(k_query);
        Task {
            support_x,
            support_y,
            query_x,
            query_y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaOptions {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub tasks_per_batch: usize,
    /// Support samples per task.
    pub k: usize,
    /// Query samples per task.
    pub k_query: usize,
    pub seed: u64,
}

impl Default for MetaOptions {
    fn default() -> Self {
        MetaOptions {
            epochs: 100,
            batches_per_epoch: 20,
            tasks_per_batch: 25,
            k: 5,
            k_query: 10,
            seed: 0,
        }
    }
}

/// Supervised loss as a per-row tailoring loss (for inner meta-learning
/// steps on labelled support rows).
struct SupportLoss<'t> {
    targets: &'t Tensor,
}

impl TailorLoss for SupportLoss<'_> {
    fn per_row<'g>(&self, ctx: &CnForward<'_, 'g>) -> Result<Var<'g>> {
        let y = ctx.x.graph().leaf(self.targets.clone());
        let d = self.targets.cols() as f64;
        Ok((ctx.output() - y).square().sum_cols().scale(1.0 / d))
    }
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::matrix(data.len() / cols, cols, data)
}

/// One meta-training batch: for each inner step, adapt the per-task CN on
/// the support loss, then update `w` on the query loss at the adapted CN.
/// Returns the updated weights and the per-step query losses.
pub fn meta_batch_update(
    config: &ModelConfig,
    w: &MlpParams,
    cfg: &TailorConfig,
    tasks: &[Task],
) -> Result<(MlpParams, Vec<f64>, (f64, f64))> {
    let b = tasks.len();
    let k = tasks[0].support_x.rows();
    let kq = tasks[0].query_x.rows();
    if tasks
        .iter()
        .any(|t| t.support_x.rows() != k || t.query_x.rows() != kq)
    {
        return Err(Error::contract(
            "meta_learn",
            "tasks differ in sample counts",
        ));
    }
    let sx = concat_rows(&tasks.iter().map(|t| &t.support_x).collect::<Vec<_>>());
    let sy = concat_rows(&tasks.iter().map(|t| &t.support_y).collect::<Vec<_>>());
    let qx = concat_rows(&tasks.iter().map(|t| &t.query_x).collect::<Vec<_>>());
    let qy = concat_rows(&tasks.iter().map(|t| &t.query_y).collect::<Vec<_>>());
    let support = SupportLoss { targets: &sy };
    let mut w = w.clone();
    let mut cn = identity_cn(b, config);
    let mut query_losses = Vec::with_capacity(cfg.steps);
    let mut support_first = 0.0;
    let mut support_last = 0.0;
    for step in 1..=cfg.steps {
        let g = Graph::new();
        let wv = w.bind(&g);
        let (next, per_row) = inner_step(
            &g,
            config,
            &wv,
            cn.bind(&g),
            g.leaf(sx.clone()),
            k,
            &support,
            cfg.inner_lr,
            cfg.create_graph(),
            step,
        )?;
        let l = per_row.mean().item();
        if step == 1 {
            support_first = l;
        }
        support_last = l;
        let pred = forward(config, &wv, Some(&next.repeat_rows(kq)), g.leaf(qx.clone()));
        let q = mse(pred, g.leaf(qy.clone()))?;
        query_losses.push(q.item());
        let grads = g.gradient(q, &wv.all(), false)?;
        w.sgd_step(&grads_to_tensors(&grads), cfg.outer_lr);
        // Detached before the next step.
        cn = next.to_params();
    }
    Ok((w, query_losses, (support_first, support_last)))
}

/// CN meta-learning over a task distribution: one CN row per task, shared
/// by its `k` support rows in the inner loop and its `k_query` query rows
/// in the outer loop.
pub fn meta_learn_cngrad<S: TaskSampler + ?Sized>(
    tasks: &S,
    config: &ModelConfig,
    cfg: &TailorConfig,
    opts: &MetaOptions,
) -> Result<(MlpParams, TrainLog)> {
    config.validate()?;
    cfg.validate()?;
    if cfg.steps == 0 || opts.k == 0 || opts.k_query == 0 || opts.tasks_per_batch == 0 {
        return Err(Error::Config(
            "meta-learning needs steps, k, k_query and tasks >= 1".into(),
        ));
    }
    let mut w = init_params(config, opts.seed);
    let mut task_rng = rng::substream(opts.seed, 2);
    let start = Instant::now();
    let mut log = TrainLog::default();
    for epoch in 1..=opts.epochs {
        let mut sums = [0.0; 3];
        for bi in 0..opts.batches_per_epoch {
            let batch: Vec<Task> = (0..opts.tasks_per_batch)
                .map(|_| tasks.sample(&mut task_rng, opts.k, opts.k_query))
                .collect();
            let (next, q, (s0, s1)) =
                meta_batch_update(config, &w, cfg, &batch).map_err(divergence(epoch, bi))?;
            let last = *q.last().expect("at least one step");
            if !last.is_finite() || last > DIVERGENCE_LOSS || !next.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    reason: format!("query loss {last}"),
                });
            }
            w = next;
            sums[0] += last;
            sums[1] += s0;
            sums[2] += s1;
        }
        let n = opts.batches_per_epoch.max(1) as f64;
        log.records.push(EpochRecord {
            epoch,
            train_sup: sums[0] / n,
            test_sup: None,
            tailor_before: Some(sums[1] / n),
            tailor_after: Some(sums[2] / n),
            wall_time_s: start.elapsed().as_secs_f64(),
            seed: opts.seed,
        });
    }
    Ok((w, log))
}

/// Adapts one CN row on a task's support set and predicts its queries.
pub fn meta_test(
    config: &ModelConfig,
    w: &MlpParams,
    cfg: &TailorConfig,
    support_x: &Tensor,
    support_y: &Tensor,
    query_x: &Tensor,
) -> Result<Tensor> {
    let k = support_x.rows();
    let support = SupportLoss { targets: support_y };
    let cfg = cfg.clone().with_pool(PoolMode::WholeBatch);
    let trace = tailor_final(config, w, &support, &cfg, support_x)?;
    let cn = trace.final_cn().expand(query_x.rows());
    debug_assert_eq!(trace.group, k);
    forward_cn(config, w, &cn, query_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cn_mlp::forward_plain;

    /// `sum (yhat - c)^2` per row.
    struct Quadratic(f64);

    impl PerRowLoss for Quadratic {
        fn per_row<'g>(&self, _x: Var<'g>, yhat: Var<'g>) -> Var<'g> {
            yhat.add_scalar(-self.0).square().sum_cols()
        }
    }

    fn small() -> (ModelConfig, MlpParams, Tensor) {
        let config = ModelConfig::new(vec![3, 5, 4, 2], false).unwrap();
        let w = init_params(&config, 4);
        let mut r = rng::seeded(9);
        let x = Tensor::matrix(6, 3, (0..18).map(|_| rng::normal(&mut r)).collect());
        (config, w, x)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (config, w, x) = small();
        let cfg = TailorConfig::new(0, 0.1, 0.1, Order::First);
        let trace = tailor(&config, &w, &Quadratic(1.0), &cfg, &x).unwrap();
        assert_eq!(trace.cn.len(), 1);
        assert!(trace.final_cn().is_identity());
        let y = predict_tailored(&config, &w, &Quadratic(1.0), &cfg, &x).unwrap();
        assert_eq!(y, forward_plain(&config, &w, &x).unwrap());
    }

    #[test]
    fn zero_lr_keeps_identity_bitwise() {
        let (config, w, x) = small();
        let cfg = TailorConfig::new(3, 0.0, 0.1, Order::First);
        let y = predict_tailored(&config, &w, &Quadratic(1.0), &cfg, &x).unwrap();
        assert_eq!(y, forward_plain(&config, &w, &x).unwrap());
    }

    #[test]
    fn sequence_has_all_steps_and_loss_decreases() {
        let (config, w, x) = small();
        let cfg = TailorConfig::new(4, 0.01, 0.1, Order::First);
        let trace = tailor(&config, &w, &Quadratic(2.0), &cfg, &x).unwrap();
        assert_eq!(trace.cn.len(), 5);
        assert_eq!(trace.losses.len(), 5);
        let m = trace.mean_losses();
        assert!(m.windows(2).all(|p| p[1] < p[0]), "{m:?}");
    }

    #[test]
    fn whole_batch_shares_one_row() {
        let (config, w, x) = small();
        let cfg = TailorConfig::new(2, 0.01, 0.1, Order::First).with_pool(PoolMode::WholeBatch);
        let trace = tailor(&config, &w, &Quadratic(2.0), &cfg, &x).unwrap();
        assert_eq!(trace.final_cn().rows(), 1);
        assert_eq!(trace.group, 6);
        assert!(PoolMode::Interleave(4).layout(6).is_err());
        assert_eq!(PoolMode::Interleave(3).layout(6).unwrap(), (2, 3));
    }

    #[test]
    fn single_row_batch_ttt_equals_per_row() {
        let (config, w, x) = small();
        let x1 = x.select_rows(&[2]);
        let cfg = TailorConfig::new(3, 0.05, 0.1, Order::First);
        let a = batch_ttt(&config, &w, &Quadratic(0.5), &cfg, &x1).unwrap();
        let b = predict_tailored(&config, &w, &Quadratic(0.5), &cfg, &x1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn per_row_tailoring_ignores_batch_neighbours() {
        let (config, w, x) = small();
        let cfg = TailorConfig::new(3, 0.05, 0.1, Order::First);
        let all = predict_tailored(&config, &w, &Quadratic(0.5), &cfg, &x).unwrap();
        let one =
            predict_tailored(&config, &w, &Quadratic(0.5), &cfg, &x.select_rows(&[4])).unwrap();
        assert!(all
            .row(4)
            .iter()
            .zip(one.row(0))
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn output_optimization_reduces_loss() {
        let y0 = Tensor::matrix(2, 2, vec![0.0, 1.0, 3.0, -1.0]);
        let x = Tensor::zeros(&[2, 2]);
        let q = Quadratic(1.0);
        let y = optimize_output(&y0, &x, &q, 1, 0.5).unwrap();
        // Mean over two rows of (y-1)^2: gradient (y-1); y - 0.5 (y - 1) = (y + 1) / 2.
        assert_eq!(y.data(), &[0.5, 1.0, 2.0, 0.0]);
        let same = optimize_output(&Tensor::ones(&[2, 2]), &x, &q, 5, 0.25).unwrap();
        assert_eq!(same, Tensor::ones(&[2, 2]));
    }

    #[test]
    fn inert_cngrad_is_inductive() {
        let (config, _, x) = small();
        let y = forward_plain(&config, &init_params(&config, 1), &x).unwrap();
        let data = TrainData::new(x, y.map(|v| v * 0.5));
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 4,
            seed: 3,
            eval_every: 0,
        };
        let (wi, li) = train_inductive(&data, &config, None, 0.05, &opts).unwrap();
        let cfg = TailorConfig::new(2, 0.0, 0.05, Order::First);
        let (wc, lc) = train_cngrad(&data, &config, &Quadratic(0.0), &cfg, &opts).unwrap();
        assert_eq!(wi, wc);
        assert!(li.same_values(&lc));
    }

    #[test]
    fn divergence_is_reported() {
        let (config, _, x) = small();
        let y = Tensor::full(&[6, 2], 1e5);
        let data = TrainData::new(x, y);
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 6,
            seed: 0,
            eval_every: 0,
        };
        match train_inductive(&data, &config, None, 10.0, &opts) {
            Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sinusoid_tasks_respect_ranges() {
        let s = SinusoidTasks::default();
        let t = s.sample(&mut rng::seeded(1), 5, 7);
        assert_eq!(t.support_x.shape(), &[5, 1]);
        assert_eq!(t.query_y.shape(), &[7, 1]);
        assert!(t.support_x.data().iter().all(|x| (-5.0..=5.0).contains(x)));
        assert!(t.query_y.data().iter().all(|y| y.abs() <= 5.0));
    }
}
