use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metatailor::cn_mlp::{forward_plain, load_checkpoint, save_checkpoint};
use metatailor::error::{at_stage, Error, Result};
use metatailor::harness::{
    self, compare_trend, evaluate_mode, prepare_dataset, Expectation, ExperimentConfig, Mode,
    PendulumExperimentConfig, Problem, RunReport,
};
use metatailor::losses::mse_value;
use metatailor::physics_data::{self, build_dataset};
use metatailor::theory_checks::{monte_carlo, MonteCarloConfig};

/// Tailoring and meta-tailoring experiments.
#[derive(Parser)]
#[command(name = "metatailor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat JSON config; unspecified fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (dataset seed for `gen-data`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    /// Inner steps (training for `train`, evaluation for `eval`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    outer_lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the n-body dataset.
    GenData(Common),
    /// Replay and check a dataset file.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one mode and save a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the test split at the configured eval steps.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full comparison ladder: baselines, tailoring and meta-tailoring.
    Ladder(Common),
    /// Inductive vs meta-tailored pendulum rollouts.
    Pendulum(Common),
    /// Monte-Carlo check of last-layer CN expressivity.
    Expressivity(Common),
    /// Print a report's table; optionally gate it on an expected ordering.
    Report {
        /// `report.json` written by `ladder`, `pendulum` or `train`.
        report: PathBuf,
        /// Comma-separated row labels, lowest improvement first.
        #[arg(long)]
        expect: Option<String>,
        /// Minimum improvement gap between consecutive rows.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        /// Where to write the verdict JSON.
        #[arg(long)]
        verdict: Option<PathBuf>,
    },
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(s) = c.steps {
        cfg.train_steps = s;
    }
    if let Some(v) = c.inner_lr {
        cfg.inner_lr = v;
    }
    if let Some(v) = c.outer_lr {
        cfg.outer_lr = v;
    }
    cfg.validate()?;
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn print_table(report: &RunReport) {
    print!("{}", report.table_csv());
}

fn gen_data(c: &Common) -> Result<()> {
    let mut cfg: ExperimentConfig = read_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.generator.seed = s;
    }
    cfg.generator.validate()?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    let ds = build_dataset(&cfg.generator)?;
    let path = out.join("dataset.bin");
    ds.save(&path)?;
    println!(
        "wrote {} ({} trajectories, {} train / {} test)",
        path.display(),
        ds.trajectories.len(),
        ds.train.len(),
        ds.test.len()
    );
    Ok(())
}

fn validate(c: &Common, dataset: &Option<PathBuf>) -> Result<()> {
    let cfg: ExperimentConfig = read_config(&c.config)?;
    let path = dataset
        .clone()
        .or(cfg.dataset)
        .ok_or_else(|| Error::Config("no dataset given (--dataset or config `dataset`)".into()))?;
    let ds = physics_data::Dataset::load(&path)?;
    let report = physics_data::validate(&ds, harness::DATASET_DRIFT_TOL)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed {
        Ok(())
    } else {
        Err(Error::Validation(report.failures.join("; ")))
    }
}

fn checkpoint_path(dir: &Path, mode: Mode, seed: u64) -> PathBuf {
    dir.join(format!("{mode}_seed{seed}.ckpt"))
}

fn train(c: &Common) -> Result<()> {
    let cfg = experiment(c)?;
    let ds = prepare_dataset(&cfg)?;
    let problem = Problem::new(&cfg, &ds)?;
    fs::create_dir_all(&cfg.out_dir)?;
    for &seed in &cfg.seeds {
        let w = harness::train_mode(&cfg, &problem, cfg.mode, seed)?;
        let path = checkpoint_path(&cfg.out_dir, cfg.mode, seed);
        save_checkpoint(&path, &problem.config, &w).map_err(at_stage("save"))?;
        let m = mse_value(
            &forward_plain(&problem.config, &w, &problem.test_x)?,
            &problem.test_y,
        );
        println!(
            "{}: seed {seed} test mse (untailored) {m:.6e}",
            path.display()
        );
    }
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path) -> Result<()> {
    let mut cfg = experiment(c)?;
    if let Some(s) = c.steps {
        cfg.eval_steps = vec![s];
    }
    let (model, w) = load_checkpoint(checkpoint).map_err(at_stage("load-checkpoint"))?;
    let ds = prepare_dataset(&cfg)?;
    let problem = Problem::new(&cfg, &ds)?;
    if model != problem.config {
        return Err(Error::Config(
            "checkpoint architecture differs from the config".into(),
        ));
    }
    println!("steps,test_mse,tailor_before,tailor_after");
    for &steps in &cfg.eval_steps {
        let tc = cfg.tailor_config(cfg.mode, steps);
        let (pred, before, after) =
            evaluate_mode(&model, &w, &problem.loss, cfg.mode, &tc, &problem.test_x)
                .map_err(at_stage(format!("eval@{steps}")))?;
        println!(
            "{steps},{:.6e},{before:.6e},{after:.6e}",
            mse_value(&pred, &problem.test_y)
        );
    }
    Ok(())
}

fn ladder(c: &Common) -> Result<()> {
    let mut cfg = experiment(c)?;
    cfg.command = "ladder".into();
    let report = harness::run(&cfg)?;
    print_table(&report);
    Ok(())
}

fn pendulum(c: &Common) -> Result<()> {
    let mut cfg: PendulumExperimentConfig = read_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = c.steps {
        cfg.steps = s;
    }
    if let Some(v) = c.inner_lr {
        cfg.lr_grid = vec![v];
    }
    if let Some(v) = c.outer_lr {
        cfg.outer_lr = v;
    }
    eprintln!("config: {}", serde_json::to_string(&cfg)?);
    let report = harness::pendulum_experiment(&cfg)?;
    print_table(&report);
    Ok(())
}

fn expressivity(c: &Common) -> Result<()> {
    let mut cfg: MonteCarloConfig = read_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let report = monte_carlo(&cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("expressivity.json"), &json)?;
    }
    println!(
        "draws {} rank_ok {} ({:.2}) violations {} cn residual max {:.3e} joint residual median {:.3e}",
        report.draws,
        report.rank_ok,
        report.rank_ok_rate,
        report.violations,
        report.cn_residual_quantiles[2],
        report.joint_residual_quantiles[1]
    );
    Ok(())
}

fn report(
    path: &Path,
    expect: &Option<String>,
    margin: f64,
    verdict: &Option<PathBuf>,
) -> Result<()> {
    let report = RunReport::load(path)?;
    print_table(&report);
    let Some(expect) = expect else { return Ok(()) };
    let methods: Vec<&str> = expect.split(',').map(str::trim).collect();
    let v = compare_trend(&report.table(), &Expectation::chain(&methods, margin))?;
    let json = v.to_json()?;
    match verdict {
        Some(p) => fs::write(p, &json)?,
        None => println!("{json}"),
    }
    if v.pass {
        Ok(())
    } else {
        Err(Error::Validation("expected ordering does not hold".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, outcome) = match &cli.command {
        Command::GenData(c) => ("gen-data", gen_data(c)),
        Command::Validate { common, dataset } => ("validate", validate(common, dataset)),
        Command::Train(c) => ("train", train(c)),
        Command::Eval { common, checkpoint } => ("eval", eval(common, checkpoint)),
        Command::Ladder(c) => ("ladder", ladder(c)),
        Command::Pendulum(c) => ("pendulum", pendulum(c)),
        Command::Expressivity(c) => ("expressivity", expressivity(c)),
        Command::Report {
            report: r,
            expect,
            margin,
            verdict,
        } => ("report", report(r, expect, *margin, verdict)),
    };
    match outcome.map_err(at_stage(stage)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
