//! Experiment driver: configuration, training in every mode, evaluation
//! ladders, reports and trend gates.
//!
//! Reports are deterministic functions of the config: wall-clock times are
//! written to a separate `timing.json` so that `report.json` is
//! byte-identical across reruns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cn_mlp::{forward_cn, forward_plain, Activation, MlpParams, ModelConfig};
use crate::error::{at_stage, Error, Result};
use crate::losses::{mse_value, ConservationLoss, PendulumEnergyLoss, PerRowLoss};
use crate::physics_data::{
    self, build_dataset, build_pendulum_dataset, Dataset, GeneratorConfig, PendulumDataConfig,
    PendulumDataset, Split,
};
use crate::rng;
use crate::tailoring::{
    batch_ttt, meta_learn_cngrad, meta_test, optimize_output, per_row_values, predict_mammoth,
    predict_tailored, tailor, train_cngrad, train_inductive, train_mammoth, MetaOptions, Order,
    SinusoidTasks, TailorConfig, TailorLoss, TaskSampler, TrainData, TrainOptions,
};

/// Drift tolerance used when validating a dataset loaded from disk.
pub const DATASET_DRIFT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Inductive,
    InductiveAux,
    Mammoth1,
    Mammoth2,
    Cngrad1,
    Cngrad2,
    Metalearn,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Inductive,
        Mode::InductiveAux,
        Mode::Mammoth1,
        Mode::Mammoth2,
        Mode::Cngrad1,
        Mode::Cngrad2,
        Mode::Metalearn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Inductive => "inductive",
            Mode::InductiveAux => "inductive_aux",
            Mode::Mammoth1 => "mammoth1",
            Mode::Mammoth2 => "mammoth2",
            Mode::Cngrad1 => "cngrad1",
            Mode::Cngrad2 => "cngrad2",
            Mode::Metalearn => "metalearn",
        }
    }

    pub fn order(&self) -> Order {
        match self {
            Mode::Mammoth2 | Mode::Cngrad2 => Order::Second,
            _ => Order::First,
        }
    }

    fn is_meta(&self) -> bool {
        matches!(
            self,
            Mode::Mammoth1 | Mode::Mammoth2 | Mode::Cngrad1 | Mode::Cngrad2
        )
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Flat experiment configuration. The generator fields are inlined; note
/// that `seed` is the dataset seed while `seeds` are the training seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// `run` (single mode against its inductive baseline) or `ladder`.
    pub command: String,
    /// Dataset file; generated from the inline generator fields when absent.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub eval_steps: Vec<usize>,

    pub width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub residual: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub outer_lr: f64,
    /// Inner steps during meta-training.
    pub train_steps: usize,
    pub inner_lr: f64,
    /// Weight of the physics loss for `inductive_aux`.
    pub aux_weight: f64,

    /// Ladder baselines.
    pub output_opt_steps: usize,
    pub ttt_steps: usize,
    pub tailor_steps: usize,
    /// Candidate step sizes for the ladder's test-time baselines, chosen by
    /// improvement on (a subsample of) the training split.
    pub lr_grid: Vec<f64>,
    pub selection_rows: usize,

    #[serde(flatten)]
    pub generator: GeneratorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: "ladder".into(),
            dataset: None,
            out_dir: PathBuf::from("runs"),
            mode: Mode::Cngrad1,
            seeds: vec![0, 1, 2],
            eval_steps: vec![0, 1, 2, 5, 10],
            width: 128,
            hidden_layers: 3,
            activation: Activation::default(),
            residual: true,
            epochs: 200,
            batch_size: 64,
            outer_lr: 5e-2,
            train_steps: 2,
            // The L1 conservation loss has constant-size gradients, so larger
            // steps overshoot per query within a few steps.
            inner_lr: 3e-5,
            aux_weight: 1e-3,
            output_opt_steps: 50,
            ttt_steps: 50,
            tailor_steps: 10,
            lr_grid: vec![1e-4, 1e-3, 1e-2, 1e-1],
            selection_rows: 2000,
            generator: GeneratorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_steps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("eval_steps must be sorted".into()));
        }
        if self.width == 0 || self.hidden_layers == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "width, hidden_layers and batch_size must be >= 1".into(),
            ));
        }
        check_grid(&self.lr_grid)?;
        for (name, v) in [
            ("outer_lr", self.outer_lr),
            ("inner_lr", self.inner_lr),
            ("aux_weight", self.aux_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if let Some(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "dataset {} does not exist",
                    p.display()
                )));
            }
        }
        self.generator.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = self.generator.state_dim();
        let mut widths = vec![d];
        widths.extend(std::iter::repeat_n(self.width, self.hidden_layers));
        widths.push(d);
        Ok(ModelConfig::new(widths, self.residual)?.with_activation(self.activation))
    }

    /// Inner-loop settings for `mode` with `steps` steps.
    pub fn tailor_config(&self, mode: Mode, steps: usize) -> TailorConfig {
        TailorConfig::new(steps, self.inner_lr, self.outer_lr, mode.order())
    }

    fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            eval_every: 0,
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config(
            "lr_grid must be non-empty and positive".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports

/// One evaluated (method, eval steps, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub eval_steps: usize,
    pub seed: u64,
    pub test_mse: f64,
    /// `(baseline - test_mse) / baseline` against the same seed's baseline.
    pub relative: f64,
    pub tailor_before: Option<f64>,
    pub tailor_after: Option<f64>,
    /// Step size used at evaluation (selected or configured).
    pub step_size: Option<f64>,
    /// Rollout energy drift (pendulum only).
    pub energy_drift: Option<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Mean and standard error across seeds of one (method, eval steps) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub eval_steps: usize,
    pub n_seeds: usize,
    pub mean_mse: f64,
    pub stderr_mse: f64,
    pub mean_relative: f64,
    pub stderr_relative: f64,
}

/// Mean tailoring loss and test MSE after `step` evaluation-time steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub seed: u64,
    pub method: String,
    pub step: usize,
    pub tailor_loss: f64,
    pub test_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub seed: u64,
    pub method: String,
    pub start_loss: f64,
    pub end_loss: f64,
    /// Fraction of queries whose tailoring loss never increased.
    pub monotone_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    /// Fully resolved configuration, defaults included.
    pub config: serde_json::Value,
    pub results: Vec<MethodResult>,
    pub aggregates: Vec<Aggregate>,
    pub curves: Vec<CurvePoint>,
    pub curve_summaries: Vec<CurveSummary>,
}

/// One row of the summary table: method, mean loss, relative improvement
/// and its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub loss: f64,
    pub relative: f64,
    pub stderr: f64,
}

/// Row label: bare method name for untailored baselines, `method@steps`
/// otherwise.
pub fn label(method: &str, steps: usize) -> String {
    if steps == 0 && matches!(method, "inductive" | "inductive_aux") {
        method.to_string()
    } else {
        format!("{method}@{steps}")
    }
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl RunReport {
    fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        Ok(RunReport {
            kind: kind.into(),
            config: serde_json::to_value(config)?,
            ..Default::default()
        })
    }

    /// Recomputes aggregates from results, in first-appearance order.
    pub fn aggregate(&mut self) {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &self.results {
            let k = (r.method.clone(), r.eval_steps);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        self.aggregates = keys
            .into_iter()
            .map(|(method, eval_steps)| {
                let rs: Vec<&MethodResult> = self
                    .results
                    .iter()
                    .filter(|r| r.method == method && r.eval_steps == eval_steps)
                    .collect();
                let (mean_mse, stderr_mse) =
                    mean_stderr(&rs.iter().map(|r| r.test_mse).collect::<Vec<_>>());
                let (mean_relative, stderr_relative) =
                    mean_stderr(&rs.iter().map(|r| r.relative).collect::<Vec<_>>());
                Aggregate {
                    method,
                    eval_steps,
                    n_seeds: rs.len(),
                    mean_mse,
                    stderr_mse,
                    mean_relative,
                    stderr_relative,
                }
            })
            .collect();
    }

    pub fn table(&self) -> Vec<TableRow> {
        self.aggregates
            .iter()
            .map(|a| TableRow {
                method: label(&a.method, a.eval_steps),
                loss: a.mean_mse,
                relative: a.mean_relative,
                stderr: a.stderr_relative,
            })
            .collect()
    }

    pub fn find(&self, method: &str, steps: usize) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.eval_steps == steps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table_csv(&self) -> String {
        let mut s = String::from("method,loss,relative,stderr\n");
        for r in self.table() {
            let _ = writeln!(
                s,
                "{},{:.6e},{:.6},{:.6}",
                r.method, r.loss, r.relative, r.stderr
            );
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("seed,method,step,tailor_loss,test_mse\n");
        for c in &self.curves {
            let _ = writeln!(
                s,
                "{},{},{},{:.6e},{:.6e}",
                c.seed, c.method, c.step, c.tailor_loss, c.test_mse
            );
        }
        s
    }

    fn timing_json(&self) -> Result<String> {
        let rows: Vec<serde_json::Value> = self
            .results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "method": r.method, "eval_steps": r.eval_steps,
                    "seed": r.seed, "wall_time_s": r.wall_time_s,
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    /// Writes `report.json`, `table.csv`, `curves.csv` and `timing.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("table.csv"), self.table_csv())?;
        fs::write(dir.join("curves.csv"), self.curves_csv())?;
        fs::write(dir.join("timing.json"), self.timing_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

// ---------------------------------------------------------------------------
// Trend gate

/// `higher` must beat `lower` in relative improvement by more than zero and
/// by at least `margin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPair {
    pub lower: String,
    pub higher: String,
    pub margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub pairs: Vec<TrendPair>,
}

impl Expectation {
    /// Each method must beat its predecessor by `margin`.
    pub fn chain(methods: &[&str], margin: f64) -> Self {
        Expectation {
            pairs: methods
                .windows(2)
                .map(|w| TrendPair {
                    lower: w[0].into(),
                    higher: w[1].into(),
                    margin,
                })
                .collect(),
        }
    }

    pub fn require(mut self, lower: &str, higher: &str, margin: f64) -> Self {
        self.pairs.push(TrendPair {
            lower: lower.into(),
            higher: higher.into(),
            margin,
        });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub lower: String,
    pub higher: String,
    pub lower_relative: f64,
    pub higher_relative: f64,
    pub gap: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub pass: bool,
    pub pairs: Vec<PairVerdict>,
}

impl TrendVerdict {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Checks pairwise orderings of relative improvement over table rows.
pub fn compare_trend(rows: &[TableRow], expected: &Expectation) -> Result<TrendVerdict> {
    let get = |name: &str| {
        rows.iter()
            .find(|r| r.method == name)
            .map(|r| r.relative)
            .ok_or_else(|| Error::contract("compare_trend", format!("report has no `{name}` row")))
    };
    let mut pairs = Vec::with_capacity(expected.pairs.len());
    for p in &expected.pairs {
        let lo = get(&p.lower)?;
        let hi = get(&p.higher)?;
        let gap = hi - lo;
        pairs.push(PairVerdict {
            lower: p.lower.clone(),
            higher: p.higher.clone(),
            lower_relative: lo,
            higher_relative: hi,
            gap,
            margin: p.margin,
            pass: gap > 0.0 && gap >= p.margin,
        });
    }
    Ok(TrendVerdict {
        pass: pairs.iter().all(|p| p.pass),
        pairs,
    })
}

// ---------------------------------------------------------------------------
// N-body runs

/// Loads and validates `cfg.dataset`, or generates one from the inline
/// generator settings.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => {
            let ds = Dataset::load(path).map_err(at_stage("load-data"))?;
            let report =
                physics_data::validate(&ds, DATASET_DRIFT_TOL).map_err(at_stage("validate"))?;
            if !report.passed {
                return Err(at_stage("validate")(Error::Validation(
                    report.failures.join("; "),
                )));
            }
            Ok(ds)
        }
        None => build_dataset(&cfg.generator).map_err(at_stage("gen-data")),
    }
}

/// Train/test tensors plus the physics loss of a dataset.
pub struct Problem {
    pub config: ModelConfig,
    pub loss: ConservationLoss,
    pub train: TrainData,
    pub test_x: Tensor,
    pub test_y: Tensor,
}

impl Problem {
    pub fn new(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Self> {
        let (x, y) = ds.pairs(Split::Train);
        let (test_x, test_y) = ds.pairs(Split::Test);
        Ok(Problem {
            config: cfg.model_config()?,
            loss: ConservationLoss::new(ds.stats.clone(), ds.config.gravity)?,
            train: TrainData::new(x, y),
            test_x,
            test_y,
        })
    }

    /// Every `n / rows`-th training row, for step-size selection.
    fn selection_split(&self, rows: usize) -> (Tensor, Tensor) {
        let n = self.train.x.rows();
        let stride = n.div_ceil(rows.max(1)).max(1);
        let idx: Vec<usize> = (0..n).step_by(stride).collect();
        (
            self.train.x.select_rows(&idx),
            self.train.y.select_rows(&idx),
        )
    }
}

/// Trains `mode` on the problem's training split.
pub fn train_mode(
    cfg: &ExperimentConfig,
    problem: &Problem,
    mode: Mode,
    seed: u64,
) -> Result<MlpParams> {
    let opts = cfg.train_options(seed);
    let tc = cfg.tailor_config(mode, cfg.train_steps);
    let (config, data, loss) = (&problem.config, &problem.train, &problem.loss);
    let out = match mode {
        Mode::Inductive => train_inductive(data, config, None, cfg.outer_lr, &opts),
        Mode::InductiveAux => train_inductive(
            data,
            config,
            Some((loss, cfg.aux_weight)),
            cfg.outer_lr,
            &opts,
        ),
        Mode::Cngrad1 | Mode::Cngrad2 => train_cngrad(data, config, loss, &tc, &opts),
        Mode::Mammoth1 | Mode::Mammoth2 => train_mammoth(data, config, loss, &tc, &opts),
        Mode::Metalearn => {
            return Err(Error::Config(
                "metalearn trains on sinusoid tasks, not on the n-body data".into(),
            ))
        }
    };
    Ok(out.map_err(at_stage(format!("train:{mode}")))?.0)
}

/// Predictions of a trained model after `steps` evaluation-time tailoring
/// steps, with the mean tailoring loss before and after.
pub fn evaluate_mode<L: TailorLoss + PerRowLoss>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    mode: Mode,
    tc: &TailorConfig,
    x: &Tensor,
) -> Result<(Tensor, f64, f64)> {
    let before = mean(&per_row_values(loss, x, &forward_plain(config, w, x)?)?);
    let pred = match mode {
        Mode::Mammoth1 | Mode::Mammoth2 if tc.steps > 0 => predict_mammoth(config, w, loss, tc, x)?,
        _ => predict_tailored(config, w, loss, tc, x)?,
    };
    let after = mean(&per_row_values(loss, x, &pred)?);
    Ok((pred, before, after))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn relative(baseline: f64, value: f64) -> f64 {
    (baseline - value) / baseline
}

/// Tailoring curve of a trained model on `x`: per step, mean loss and MSE;
/// plus the fraction of rows whose loss never increased.
pub fn tailoring_curve<L: TailorLoss + ?Sized>(
    config: &ModelConfig,
    w: &MlpParams,
    loss: &L,
    tc: &TailorConfig,
    x: &Tensor,
    y: &Tensor,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let trace = tailor(config, w, loss, tc, x)?;
    let losses = trace.mean_losses();
    let mut points = Vec::with_capacity(trace.cn.len());
    for (s, cn) in trace.cn.iter().enumerate() {
        let pred = forward_cn(config, w, &cn.expand(trace.group), x)?;
        points.push((losses[s], mse_value(&pred, y)));
    }
    let rows = trace.losses[0].len();
    let monotone = (0..rows)
        .filter(|&i| trace.losses.windows(2).all(|w| w[1][i] <= w[0][i]))
        .count();
    Ok((points, monotone as f64 / rows as f64))
}

/// Step size from `grid` giving the largest relative improvement of
/// `predict` over `baseline_mse`; candidates that fail are skipped.
pub fn select_step_size<F>(
    grid: &[f64],
    baseline_mse: f64,
    y: &Tensor,
    mut predict: F,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<Tensor>,
{
    check_grid(grid)?;
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let Ok(pred) = predict(lr) else { continue };
        let m = mse_value(&pred, y);
        if !m.is_finite() {
            continue;
        }
        let rel = relative(baseline_mse, m);
        if best.is_none_or(|(_, b)| rel > b) {
            best = Some((lr, rel));
        }
    }
    best.ok_or_else(|| Error::Validation("every step-size candidate failed".into()))
}

/// Dispatches on `cfg.command` (`run` or `ladder`) and writes the report to
/// `cfg.out_dir`. On failure whatever finished is flushed to
/// `report.partial.json` before the error is returned.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut report = match cfg.command.as_str() {
        "ladder" => RunReport::new("ladder", cfg)?,
        "run" => RunReport::new("run", cfg)?,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    let outcome = if cfg.mode == Mode::Metalearn && cfg.command == "run" {
        let mc = MetaLearnConfig::from_experiment(cfg);
        sinusoid_experiment(&mc).map(|r| {
            report = RunReport {
                config: report.config.clone(),
                ..r
            }
        })
    } else {
        prepare_dataset(cfg).and_then(|ds| {
            let problem = Problem::new(cfg, &ds)?;
            for &seed in &cfg.seeds {
                if cfg.command == "ladder" {
                    ladder_seed(cfg, &problem, seed, &mut report)?;
                } else {
                    run_seed(cfg, &problem, seed, &mut report)?;
                }
            }
            Ok(())
        })
    };
    report.aggregate();
    if let Err(e) = outcome {
        let _ = fs::create_dir_all(&cfg.out_dir);
        let _ = report
            .to_json()
            .map(|j| fs::write(cfg.out_dir.join("report.partial.json"), j));
        return Err(e);
    }
    report.write(&cfg.out_dir).map_err(at_stage("report"))?;
    Ok(report)
}

/// Trains `cfg.mode` and its matched inductive baseline, then evaluates the
/// mode at every eval step.
fn run_seed(cfg: &ExperimentConfig, p: &Problem, seed: u64, report: &mut RunReport) -> Result<()> {
    let t = Instant::now();
    let base_w = train_mode(cfg, p, Mode::Inductive, seed)?;
    let base_pred = forward_plain(&p.config, &base_w, &p.test_x)?;
    let baseline = mse_value(&base_pred, &p.test_y);
    let base_time = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let w = if cfg.mode == Mode::Inductive {
        base_w
    } else {
        train_mode(cfg, p, cfg.mode, seed)?
    };
    let train_time = t.elapsed().as_secs_f64();
    for &steps in &cfg.eval_steps {
        let t = Instant::now();
        let tc = cfg.tailor_config(cfg.mode, steps);
        let (pred, before, after) = evaluate_mode(&p.config, &w, &p.loss, cfg.mode, &tc, &p.test_x)
            .map_err(at_stage(format!("eval:{}@{steps}", cfg.mode)))?;
        let m = mse_value(&pred, &p.test_y);
        report.results.push(MethodResult {
            method: cfg.mode.name().into(),
            eval_steps: steps,
            seed,
            test_mse: m,
            relative: relative(baseline, m),
            tailor_before: Some(before),
            tailor_after: Some(after),
            step_size: (steps > 0).then_some(cfg.inner_lr),
            energy_drift: None,
            wall_time_s: train_time + t.elapsed().as_secs_f64(),
        });
    }
    if cfg.mode != Mode::Inductive {
        report.results.push(plain_result(
            "inductive",
            seed,
            baseline,
            baseline,
            base_time,
        ));
    }
    Ok(())
}

fn plain_result(method: &str, seed: u64, baseline: f64, m: f64, wall: f64) -> MethodResult {
    MethodResult {
        method: method.into(),
        eval_steps: 0,
        seed,
        test_mse: m,
        relative: relative(baseline, m),
        tailor_before: None,
        tailor_after: None,
        step_size: None,
        energy_drift: None,
        wall_time_s: wall,
    }
}

/// The full comparison for one seed: inductive, aux-regularized inductive,
/// output optimization, batch TTT, tailoring and meta-tailoring.
fn ladder_seed(
    cfg: &ExperimentConfig,
    p: &Problem,
    seed: u64,
    report: &mut RunReport,
) -> Result<()> {
    if !cfg.mode.is_meta() {
        return Err(Error::Config(format!(
            "the ladder's meta-tailoring arm needs a meta-tailoring mode, got `{}`",
            cfg.mode
        )));
    }
    let (config, loss) = (&p.config, &p.loss);
    let t = Instant::now();
    let w = train_mode(cfg, p, Mode::Inductive, seed)?;
    let base_pred = forward_plain(config, &w, &p.test_x)?;
    let baseline = mse_value(&base_pred, &p.test_y);
    report.results.push(plain_result(
        "inductive",
        seed,
        baseline,
        baseline,
        t.elapsed().as_secs_f64(),
    ));

    let t = Instant::now();
    let w_aux = train_mode(cfg, p, Mode::InductiveAux, seed)?;
    let m = mse_value(&forward_plain(config, &w_aux, &p.test_x)?, &p.test_y);
    report.results.push(plain_result(
        "inductive_aux",
        seed,
        baseline,
        m,
        t.elapsed().as_secs_f64(),
    ));

    // Test-time baselines on the inductive model, step sizes chosen on the
    // training split.
    let (sx, sy) = p.selection_split(cfg.selection_rows);
    let s_pred = forward_plain(config, &w, &sx)?;
    let s_base = mse_value(&s_pred, &sy);
    let first = |steps: usize, lr: f64| TailorConfig::new(steps, lr, 0.0, Order::First);

    let t = Instant::now();
    let (lr, _) = select_step_size(&cfg.lr_grid, s_base, &sy, |lr| {
        optimize_output(&s_pred, &sx, loss, cfg.output_opt_steps, lr)
    })
    .map_err(at_stage("select:output_opt"))?;
    let pred = optimize_output(&base_pred, &p.test_x, loss, cfg.output_opt_steps, lr)
        .map_err(at_stage("eval:output_opt"))?;
    report.results.push(tailored_result(
        "output_opt",
        cfg.output_opt_steps,
        seed,
        baseline,
        &pred,
        p,
        &base_pred,
        lr,
        t,
    )?);

    let t = Instant::now();
    let (lr, _) = select_step_size(&cfg.lr_grid, s_base, &sy, |lr| {
        batch_ttt(config, &w, loss, &first(cfg.ttt_steps, lr), &sx)
    })
    .map_err(at_stage("select:batch_ttt"))?;
    let pred = batch_ttt(config, &w, loss, &first(cfg.ttt_steps, lr), &p.test_x)
        .map_err(at_stage("eval:batch_ttt"))?;
    report.results.push(tailored_result(
        "batch_ttt",
        cfg.ttt_steps,
        seed,
        baseline,
        &pred,
        p,
        &base_pred,
        lr,
        t,
    )?);

    let t = Instant::now();
    let (tailor_lr, _) = select_step_size(&cfg.lr_grid, s_base, &sy, |lr| {
        predict_tailored(config, &w, loss, &first(cfg.tailor_steps, lr), &sx)
    })
    .map_err(at_stage("select:tailoring"))?;
    let select_time = t.elapsed().as_secs_f64();
    let max_steps = cfg
        .eval_steps
        .last()
        .copied()
        .unwrap_or(0)
        .max(cfg.tailor_steps);
    let (curve, monotone) = tailoring_curve(
        config,
        &w,
        loss,
        &first(max_steps, tailor_lr),
        &p.test_x,
        &p.test_y,
    )
    .map_err(at_stage("eval:tailoring"))?;
    let mut tailor_steps: Vec<usize> = cfg.eval_steps.iter().copied().filter(|&s| s > 0).collect();
    if !tailor_steps.contains(&cfg.tailor_steps) {
        tailor_steps.push(cfg.tailor_steps);
        tailor_steps.sort_unstable();
    }
    for s in tailor_steps {
        report.results.push(MethodResult {
            method: "tailoring".into(),
            eval_steps: s,
            seed,
            test_mse: curve[s].1,
            relative: relative(baseline, curve[s].1),
            tailor_before: Some(curve[0].0),
            tailor_after: Some(curve[s].0),
            step_size: Some(tailor_lr),
            energy_drift: None,
            wall_time_s: select_time,
        });
    }
    push_curve(report, seed, "tailoring", &curve, monotone);

    let t = Instant::now();
    let wm = train_mode(cfg, p, cfg.mode, seed)?;
    let train_time = t.elapsed().as_secs_f64();
    let name = "meta_tailoring";
    if matches!(cfg.mode, Mode::Cngrad1 | Mode::Cngrad2) {
        let tc = TailorConfig::new(max_steps, cfg.inner_lr, 0.0, Order::First);
        let (curve, monotone) = tailoring_curve(config, &wm, loss, &tc, &p.test_x, &p.test_y)
            .map_err(at_stage("eval:meta_tailoring"))?;
        for &s in &cfg.eval_steps {
            report.results.push(MethodResult {
                method: name.into(),
                eval_steps: s,
                seed,
                test_mse: curve[s].1,
                relative: relative(baseline, curve[s].1),
                tailor_before: Some(curve[0].0),
                tailor_after: Some(curve[s].0),
                step_size: (s > 0).then_some(cfg.inner_lr),
                energy_drift: None,
                wall_time_s: train_time,
            });
        }
        push_curve(report, seed, name, &curve, monotone);
    } else {
        for &s in &cfg.eval_steps {
            let tc = cfg.tailor_config(cfg.mode, s);
            let (pred, before, after) = evaluate_mode(config, &wm, loss, cfg.mode, &tc, &p.test_x)
                .map_err(at_stage(format!("eval:{name}@{s}")))?;
            let m = mse_value(&pred, &p.test_y);
            report.results.push(MethodResult {
                method: name.into(),
                eval_steps: s,
                seed,
                test_mse: m,
                relative: relative(baseline, m),
                tailor_before: Some(before),
                tailor_after: Some(after),
                step_size: (s > 0).then_some(cfg.inner_lr),
                energy_drift: None,
                wall_time_s: train_time,
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn tailored_result(
    method: &str,
    steps: usize,
    seed: u64,
    baseline: f64,
    pred: &Tensor,
    p: &Problem,
    base_pred: &Tensor,
    lr: f64,
    t: Instant,
) -> Result<MethodResult> {
    let m = mse_value(pred, &p.test_y);
    Ok(MethodResult {
        method: method.into(),
        eval_steps: steps,
        seed,
        test_mse: m,
        relative: relative(baseline, m),
        tailor_before: Some(mean(&per_row_values(&p.loss, &p.test_x, base_pred)?)),
        tailor_after: Some(mean(&per_row_values(&p.loss, &p.test_x, pred)?)),
        step_size: Some(lr),
        energy_drift: None,
        wall_time_s: t.elapsed().as_secs_f64(),
    })
}

fn push_curve(
    report: &mut RunReport,
    seed: u64,
    method: &str,
    curve: &[(f64, f64)],
    monotone: f64,
) {
    for (step, &(tailor_loss, test_mse)) in curve.iter().enumerate() {
        report.curves.push(CurvePoint {
            seed,
            method: method.into(),
            step,
            tailor_loss,
            test_mse,
        });
    }
    report.curve_summaries.push(CurveSummary {
        seed,
        method: method.into(),
        start_loss: curve[0].0,
        end_loss: curve[curve.len() - 1].0,
        monotone_fraction: monotone,
    });
}

// ---------------------------------------------------------------------------
// Sinusoid meta-learning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaLearnConfig {
    pub seeds: Vec<u64>,
    pub eval_steps: Vec<usize>,
    pub width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub train_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub tasks_per_batch: usize,
    pub k: usize,
    pub k_query: usize,
    pub test_tasks: usize,
    pub tasks: SinusoidTasks,
}

impl Default for MetaLearnConfig {
    fn default() -> Self {
        let m = MetaOptions::default();
        MetaLearnConfig {
            seeds: vec![0],
            eval_steps: vec![0, 3],
            width: 40,
            hidden_layers: 2,
            activation: Activation::Tanh,
            train_steps: 3,
            inner_lr: 0.1,
            outer_lr: 1e-2,
            epochs: 1000,
            batches_per_epoch: m.batches_per_epoch,
            tasks_per_batch: m.tasks_per_batch,
            k: m.k,
            k_query: m.k_query,
            test_tasks: 100,
            tasks: SinusoidTasks::default(),
        }
    }
}

impl MetaLearnConfig {
    fn from_experiment(cfg: &ExperimentConfig) -> Self {
        MetaLearnConfig {
            seeds: cfg.seeds.clone(),
            eval_steps: cfg.eval_steps.clone(),
            width: cfg.width,
            hidden_layers: cfg.hidden_layers,
            activation: cfg.activation,
            train_steps: cfg.train_steps,
            inner_lr: cfg.inner_lr,
            outer_lr: cfg.outer_lr,
            epochs: cfg.epochs,
            ..Default::default()
        }
    }
}

/// Few-shot sinusoid regression with CN meta-learning. The baseline of each
/// seed is the same model evaluated without adaptation (0 steps).
pub fn sinusoid_experiment(cfg: &MetaLearnConfig) -> Result<RunReport> {
    let mut report = RunReport::new("metalearn", cfg)?;
    let mut widths = vec![1];
    widths.extend(std::iter::repeat_n(cfg.width, cfg.hidden_layers));
    widths.push(1);
    let config = ModelConfig::new(widths, false)?.with_activation(cfg.activation);
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let tc = TailorConfig::new(cfg.train_steps, cfg.inner_lr, cfg.outer_lr, Order::First);
        let opts = MetaOptions {
            epochs: cfg.epochs,
            batches_per_epoch: cfg.batches_per_epoch,
            tasks_per_batch: cfg.tasks_per_batch,
            k: cfg.k,
            k_query: cfg.k_query,
            seed,
        };
        let (w, _) = meta_learn_cngrad(&cfg.tasks, &config, &tc, &opts)
            .map_err(at_stage("train:metalearn"))?;
        let train_time = t.elapsed().as_secs_f64();
        let mut task_rng = rng::substream(seed, 3);
        let tasks: Vec<_> = (0..cfg.test_tasks)
            .map(|_| cfg.tasks.sample(&mut task_rng, cfg.k, cfg.k_query))
            .collect();
        let mut per_step = Vec::with_capacity(cfg.eval_steps.len());
        for &s in &cfg.eval_steps {
            let tc = tc.clone().with_steps(s);
            let mut total = 0.0;
            for task in &tasks {
                let pred = meta_test(
                    &config,
                    &w,
                    &tc,
                    &task.support_x,
                    &task.support_y,
                    &task.query_x,
                )
                .map_err(at_stage("eval:metalearn"))?;
                total += mse_value(&pred, &task.query_y);
            }
            per_step.push((s, total / tasks.len().max(1) as f64));
        }
        let baseline = match per_step.iter().find(|(s, _)| *s == 0) {
            Some(&(_, b)) => b,
            None => {
                let mut total = 0.0;
                for task in &tasks {
                    total += mse_value(&forward_plain(&config, &w, &task.query_x)?, &task.query_y);
                }
                total / tasks.len().max(1) as f64
            }
        };
        for (s, m) in per_step {
            report.results.push(MethodResult {
                method: "metalearn".into(),
                eval_steps: s,
                seed,
                test_mse: m,
                relative: relative(baseline, m),
                tailor_before: None,
                tailor_after: None,
                step_size: (s > 0).then_some(cfg.inner_lr),
                energy_drift: None,
                wall_time_s: train_time,
            });
        }
    }
    report.aggregate();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Pendulum

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumExperimentConfig {
    #[serde(flatten)]
    pub data: PendulumDataConfig,
    pub seeds: Vec<u64>,
    pub width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub outer_lr: f64,
    /// Outer step size of meta-training; its objective sums the supervised
    /// loss over `steps` inner steps.
    pub meta_outer_lr: f64,
    pub steps: usize,
    pub lr_grid: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for PendulumExperimentConfig {
    fn default() -> Self {
        // Few, noisy, long trajectories: a stand-in for measured data.
        PendulumExperimentConfig {
            data: PendulumDataConfig {
                observation_noise: 0.02,
                train_trajectories: 5,
                steps_per_trajectory: 200,
                ..PendulumDataConfig::default()
            },
            seeds: vec![0, 1, 2],
            width: 64,
            hidden_layers: 2,
            activation: Activation::default(),
            epochs: 300,
            batch_size: 32,
            outer_lr: 5e-2,
            meta_outer_lr: 5e-2 / 3.0,
            steps: 3,
            lr_grid: vec![1e-3, 1e-2, 1e-1, 1.0],
            out_dir: PathBuf::from("runs/pendulum"),
        }
    }
}

impl PendulumExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check_grid(&self.lr_grid)?;
        if self.seeds.is_empty() || self.steps == 0 || self.width == 0 || self.hidden_layers == 0 {
            return Err(Error::Config(
                "pendulum needs seeds, steps, width and layers >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut widths = vec![2];
        widths.extend(std::iter::repeat_n(self.width, self.hidden_layers));
        widths.push(2);
        Ok(ModelConfig::new(widths, true)?.with_activation(self.activation))
    }
}

/// Autoregressive rollout from each trajectory's first state; returns the
/// MSE against the recorded states and the predicted states per step.
pub fn rollout<F>(trajectories: &[Vec<[f64; 2]>], mut step: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let n = trajectories.len();
    let h = trajectories
        .iter()
        .map(|t| t.len())
        .min()
        .unwrap_or(0)
        .saturating_sub(1);
    if n == 0 || h == 0 {
        return Err(Error::contract(
            "rollout",
            "need trajectories with at least two states",
        ));
    }
    let mut s = Tensor::matrix(n, 2, trajectories.iter().flat_map(|t| t[0]).collect());
    let mut states = Vec::with_capacity(h);
    let mut err = 0.0;
    for k in 1..=h {
        s = step(&s)?;
        if !s.is_finite() {
            return Err(Error::NonFinite {
                op: "rollout".into(),
            });
        }
        for (i, t) in trajectories.iter().enumerate() {
            for j in 0..2 {
                err += (s.get(i, j) - t[k][j]).powi(2);
            }
        }
        states.push(s.clone());
    }
    Ok((err / (n * h * 2) as f64, states))
}

/// Mean relative energy change of rollout states against each trajectory's
/// starting energy.
pub fn rollout_energy_drift(
    cfg: &PendulumDataConfig,
    start: &[Vec<[f64; 2]>],
    states: &[Tensor],
) -> f64 {
    let p = &cfg.params;
    let mut total = 0.0;
    let mut count = 0usize;
    for s in states {
        for (i, t) in start.iter().enumerate() {
            let e0 = p.energy(t[0][0], t[0][1]);
            total += (p.energy(s.get(i, 0), s.get(i, 1)) - e0).abs() / e0.abs().max(1e-12);
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Inductive vs meta-tailored (energy loss) MLPs on the damped pendulum,
/// scored by long-horizon rollout MSE on the test trajectories. The inner
/// step size is picked from the grid by rollout MSE on the training
/// trajectories.
pub fn pendulum_experiment(cfg: &PendulumExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let ds = build_pendulum_dataset(&cfg.data).map_err(at_stage("gen-data:pendulum"))?;
    let config = cfg.model_config()?;
    let loss = PendulumEnergyLoss {
        params: cfg.data.params,
    };
    let (x, y) = PendulumDataset::pairs(&ds.train);
    let data = TrainData::new(x, y);
    let mut report = RunReport::new("pendulum", cfg)?;
    for &seed in &cfg.seeds {
        let opts = TrainOptions {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            seed,
            eval_every: 0,
        };
        let t = Instant::now();
        let (w, _) = train_inductive(&data, &config, None, cfg.outer_lr, &opts)
            .map_err(at_stage("train:inductive"))?;
        let (baseline, states) = rollout(&ds.test, |s| forward_plain(&config, &w, s))
            .map_err(at_stage("eval:inductive"))?;
        let mut base = plain_result(
            "inductive",
            seed,
            baseline,
            baseline,
            t.elapsed().as_secs_f64(),
        );
        base.energy_drift = Some(rollout_energy_drift(&cfg.data, &ds.test, &states));
        report.results.push(base);

        let t = Instant::now();
        let (lr, wm) = select_pendulum_lr(cfg, &config, &loss, &data, &ds, &opts)?;
        let tc = TailorConfig::new(cfg.steps, lr, cfg.meta_outer_lr, Order::First);
        let (m, states) = rollout(&ds.test, |s| predict_tailored(&config, &wm, &loss, &tc, s))
            .map_err(at_stage("eval:meta_tailoring"))?;
        report.results.push(MethodResult {
            method: "meta_tailoring".into(),
            eval_steps: cfg.steps,
            seed,
            test_mse: m,
            relative: relative(baseline, m),
            tailor_before: None,
            tailor_after: None,
            step_size: Some(lr),
            energy_drift: Some(rollout_energy_drift(&cfg.data, &ds.test, &states)),
            wall_time_s: t.elapsed().as_secs_f64(),
        });
    }
    report.aggregate();
    fs::create_dir_all(&cfg.out_dir)?;
    report.write(&cfg.out_dir).map_err(at_stage("report"))?;
    Ok(report)
}

/// Trains one meta-tailored model per grid step size and keeps the one with
/// the lowest training-trajectory rollout MSE.
fn select_pendulum_lr(
    cfg: &PendulumExperimentConfig,
    config: &ModelConfig,
    loss: &PendulumEnergyLoss,
    data: &TrainData,
    ds: &PendulumDataset,
    opts: &TrainOptions,
) -> Result<(f64, MlpParams)> {
    let mut best: Option<(f64, f64, MlpParams)> = None;
    for &lr in &cfg.lr_grid {
        let tc = TailorConfig::new(cfg.steps, lr, cfg.meta_outer_lr, Order::First);
        let Ok((w, _)) = train_cngrad(data, config, loss, &tc, opts) else {
            continue;
        };
        let Ok((m, _)) = rollout(&ds.train, |s| predict_tailored(config, &w, loss, &tc, s)) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, b, _)| m < *b) {
            best = Some((lr, m, w));
        }
    }
    best.map(|(lr, _, w)| (lr, w)).ok_or_else(|| {
        at_stage("train:meta_tailoring")(Error::Validation("every inner step size diverged".into()))
    })
}
