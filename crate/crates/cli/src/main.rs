//! `floodlab`: data generation, training, flood-level sweeps and diagnostics
//! driven by a JSON experiment config.
//!
//! Exit codes: 0 success, 2 config or usage error, 3 numeric failure,
//! 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use floodlab::data::{generate, LabelSpace, NoiseLevel, SplitDataset, SyntheticSpec};
use floodlab::experiments::diagnostics::default_radii;
use floodlab::experiments::sweep::{load_trial, run_sweep_with_progress, DataSource, SweepConfig, SweepResult};
use floodlab::experiments::theorem::{fit_linear_probe, theorem_table, write_theorem_csv, TheoremProbe};
use floodlab::experiments::{flatness_profile, flood_grid, memorization_curve, ProbedModels};
use floodlab::io::{ensure_dir, read_json, write_json};
use floodlab::nn::{Checkpoint, ModelParams};
use floodlab::objectives::LossKind;
use floodlab::optim::OptimizerConfig;
use floodlab::seeds;
use floodlab::trainer::{train, MetricFlags, TrainConfig};
use floodlab::{FloodError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Flags {
    /// Report the early-stopping sub-table next to the final-epoch one.
    pub early_stopping_report: bool,
    pub grad_norms: bool,
    /// Keep test labels clean instead of applying the training noise rate.
    pub clean_test: bool,
    pub test_every_epoch: bool,
    pub jensen_check: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags {
            early_stopping_report: true,
            grad_norms: false,
            clean_test: false,
            test_every_epoch: false,
            jensen_check: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoremSettings {
    pub n: usize,
    pub n_draws: usize,
    pub oracle_size: usize,
    /// The probe is fit by gradient descent on one sample of this size.
    pub fit_size: usize,
    pub fit_steps: usize,
    pub fit_learning_rate: f64,
    pub b_grid: Vec<f64>,
}

impl Default for TheoremSettings {
    fn default() -> Self {
        TheoremSettings {
            n: 20,
            n_draws: 10_000,
            oracle_size: 1_000_000,
            fit_size: 20,
            fit_steps: 200,
            fit_learning_rate: 0.5,
            b_grid: (0..=16).map(|i| i as f64 * 0.05).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatnessSettings {
    /// Empty means the 51-point default in [-1, 1].
    pub radii: Vec<f64>,
    pub direction_seed: u64,
    /// First-submersion, flooded-final and baseline-final checkpoints. When
    /// absent the two runs are trained from this config.
    pub checkpoints: Option<[PathBuf; 3]>,
}

/// Everything needed to reproduce one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Hidden layer widths; input and output sizes follow from the data.
    pub hidden: Vec<usize>,
    /// Defaults to logistic for binary data and softmax cross-entropy otherwise.
    pub loss: Option<LossKind>,
    pub optimizer: OptimizerConfig,
    /// Flood level of single runs.
    pub flood: f64,
    /// Flood levels of a sweep; defaults to 0 to 0.5 in steps of 0.01.
    pub grid: Option<Vec<f64>>,
    pub trials: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub flags: Flags,
    pub theorem: TheoremSettings,
    pub flatness: FlatnessSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let base = TrainConfig::synthetic(10);
        ExperimentConfig {
            data: DataSource::synthetic(SyntheticSpec::two_gaussians(0)),
            hidden: base.layer_sizes[1..base.layer_sizes.len() - 1].to_vec(),
            loss: None,
            optimizer: base.optimizer,
            flood: 0.0,
            grid: None,
            trials: 10,
            epochs: base.epochs,
            batch_size: base.batch_size,
            seed: 0,
            out: PathBuf::from("out"),
            workers: 1,
            flags: Flags::default(),
            theorem: TheoremSettings::default(),
            flatness: FlatnessSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Variant {
    TwoGaussians,
    Sinusoid,
    Spiral,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Noise {
    None,
    Low,
    Middle,
    High,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Flood level of a single run.
    #[arg(long, global = true)]
    flood: Option<f64>,
    /// Flood grid as START:STOP:STEP.
    #[arg(long, global = true, value_parser = parse_grid)]
    grid: Option<Grid>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Replaces the synthetic dataset with a default spec of this variant.
    #[arg(long, global = true, value_enum)]
    variant: Option<Variant>,
    /// Label noise preset of the synthetic dataset.
    #[arg(long, global = true, value_enum)]
    noise: Option<Noise>,
}

#[derive(Parser, Debug)]
#[command(name = "floodlab", version, about = "Flooding regularizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/validation/test CSVs and a manifest.
    GenData,
    /// Train one model at the flood level given by --flood.
    Train,
    /// Train every (trial, b) pair of the flood grid and select b by validation accuracy.
    Sweep,
    /// Monte Carlo MSE of the empirical vs the flooded risk over a b grid.
    VerifyTheorem,
    /// Loss along a random filter-normalized direction for three models.
    Flatness {
        /// First-submersion, flooded-final and baseline-final checkpoints.
        #[arg(long, num_args = 3, value_names = ["FIRST", "FLOODED", "BASELINE"])]
        checkpoints: Option<Vec<PathBuf>>,
    },
    /// Train accuracy per flood level from a finished sweep.
    Memorization {
        /// `sweep.json` written by the sweep command.
        #[arg(long)]
        sweep: PathBuf,
    },
}

/// Grid levels parsed from one flag value.
#[derive(Clone, Debug)]
struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected START:STOP:STEP, got {s:?}"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    flood_grid(num(a)?, num(b)?, num(c)?)
        .map(Grid)
        .map_err(|e| e.to_string())
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => read_json::<ExperimentConfig>(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = common.variant {
        let spec = match v {
            Variant::TwoGaussians => SyntheticSpec::two_gaussians(0),
            Variant::Sinusoid => SyntheticSpec::sinusoid(0),
            Variant::Spiral => SyntheticSpec::spiral(0),
        };
        cfg.data = DataSource::synthetic(spec);
    }
    if let Some(n) = common.noise {
        let level = match n {
            Noise::None => NoiseLevel::None,
            Noise::Low => NoiseLevel::Low,
            Noise::Middle => NoiseLevel::Middle,
            Noise::High => NoiseLevel::High,
        };
        match &mut cfg.data {
            DataSource::Synthetic { spec } => *spec = spec.with_noise(level),
            DataSource::Idx { .. } => {
                return Err(FloodError::InvalidSpec("--noise applies to synthetic data only".into()))
            }
        }
    }
    if let DataSource::Synthetic { spec } = &mut cfg.data {
        if cfg.flags.clean_test {
            spec.noisy_test = false;
        }
    }
    macro_rules! set {
        ($($field:ident <- $flag:expr),*) => {$(if let Some(v) = $flag.clone() { cfg.$field = v; })*};
    }
    set!(out <- common.out, seed <- common.seed, workers <- common.workers, flood <- common.flood,
         epochs <- common.epochs, trials <- common.trials);
    if let Some(g) = &common.grid {
        cfg.grid = Some(g.0.clone());
    }
    if cfg.workers == 0 {
        return Err(FloodError::InvalidSpec("workers must be >= 1".into()));
    }
    Ok(cfg)
}

fn input_shape(cfg: &ExperimentConfig) -> (usize, LabelSpace) {
    match &cfg.data {
        DataSource::Synthetic { spec } => (spec.dim(), LabelSpace::Binary),
        // 28x28 digit images
        DataSource::Idx { .. } => (784, LabelSpace::MultiClass(10)),
    }
}

fn train_config(cfg: &ExperimentConfig, space_dim: Option<(usize, LabelSpace)>) -> TrainConfig {
    let (dim, space) = space_dim.unwrap_or_else(|| input_shape(cfg));
    let mut layer_sizes = vec![dim];
    layer_sizes.extend(&cfg.hidden);
    layer_sizes.push(space.output_units());
    let loss = cfg.loss.unwrap_or(match space {
        LabelSpace::Binary => LossKind::Logistic,
        LabelSpace::MultiClass(_) => LossKind::SoftmaxCrossEntropy,
    });
    TrainConfig {
        layer_sizes,
        loss,
        optimizer: cfg.optimizer.clone(),
        flood_level: cfg.flood,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        metrics: MetricFlags {
            grad_norms: cfg.flags.grad_norms,
            test_every_epoch: cfg.flags.test_every_epoch,
            jensen_check: cfg.flags.jensen_check,
            keep_all_checkpoints: false,
        },
    }
}

/// Splits of trial 0, as used by single-run commands.
fn load_data(cfg: &ExperimentConfig) -> Result<SplitDataset> {
    load_trial(&cfg.data, cfg.seed, 0)
}

fn start(cfg: &ExperimentConfig) -> Result<()> {
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), cfg)
}

fn save_checkpoint(path: &Path, p: &ModelParams) -> Result<()> {
    write_json(path, &Checkpoint::from(p))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_json::<Checkpoint>(path)?.into_params()
}

#[derive(Serialize)]
struct Manifest<'a> {
    spec: &'a SyntheticSpec,
    seed: u64,
    rows: [usize; 3],
}

fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let DataSource::Synthetic { spec } = &cfg.data else {
        return Err(FloodError::Unsupported("gen-data needs a synthetic dataset".into()));
    };
    let spec = spec.with_seed(seeds::data_seed(cfg.seed, 0));
    let data = generate(&spec)?;
    start(cfg)?;
    data.train.write_csv(&cfg.out.join("train.csv"))?;
    data.validation.write_csv(&cfg.out.join("validation.csv"))?;
    data.test.write_csv(&cfg.out.join("test.csv"))?;
    write_json(
        &cfg.out.join("manifest.json"),
        &Manifest {
            spec: &spec,
            seed: spec.seed,
            rows: [data.train.len(), data.validation.len(), data.test.len()],
        },
    )?;
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let tc = train_config(cfg, Some((data.train.dim(), data.train.label_space())))
        .with_seed(seeds::run_seed(cfg.seed, 0, 0));
    start(cfg)?;
    let log = train(&tc, &data)?;
    log.write_csv(&cfg.out.join("epochs.csv"))?;
    write_json(&cfg.out.join("summary.json"), &log.summary())?;
    save_checkpoint(&cfg.out.join("final.json"), &log.final_params)?;
    save_checkpoint(&cfg.out.join("early_stop.json"), &log.best_params)?;
    if let Some(s) = &log.first_submersion {
        save_checkpoint(&cfg.out.join("first_submersion.json"), &s.params)?;
    }
    let s = log.summary();
    println!(
        "b={} final test accuracy {:.4} (loss {:.4}); early stop epoch {} test accuracy {:.4}",
        tc.flood_level, s.final_test_accuracy, s.final_test_loss, s.early_stop_epoch, s.early_stop_test_accuracy
    );
    Ok(())
}

fn sweep_config(cfg: &ExperimentConfig) -> Result<SweepConfig> {
    let grid = match &cfg.grid {
        Some(g) => g.clone(),
        None => flood_grid(0.0, 0.5, 0.01)?,
    };
    Ok(SweepConfig {
        base: train_config(cfg, None),
        data: cfg.data.clone(),
        grid,
        n_trials: cfg.trials,
        workers: cfg.workers,
        master_seed: cfg.seed,
    })
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let sc = sweep_config(cfg)?;
    sc.validate()?;
    start(cfg)?;
    let total = sc.grid.len() * sc.n_trials;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let res = run_sweep_with_progress(&sc, &|r| {
        let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        eprintln!("[{k}/{total}] b={} trial={} test acc {:.4}", r.b, r.trial, r.final_test_accuracy);
    })?;
    write_json(&cfg.out.join("sweep.json"), &res)?;
    res.write_runs_csv(&cfg.out.join("runs.csv"))?;
    res.write_selections_csv(&cfg.out.join("selections.csv"))?;
    let mut table = res.summary_table();
    if !cfg.flags.early_stopping_report {
        table = table.split("B. early stopping").next().unwrap_or_default().to_string();
    }
    std::fs::write(cfg.out.join("summary.txt"), &table).map_err(|e| FloodError::Io {
        path: cfg.out.join("summary.txt"),
        source: e,
    })?;
    print!("{table}");
    Ok(())
}

fn cmd_verify_theorem(cfg: &ExperimentConfig) -> Result<()> {
    let DataSource::Synthetic { spec } = &cfg.data else {
        return Err(FloodError::Unsupported("the estimator check needs a synthetic population".into()));
    };
    let th = &cfg.theorem;
    let grid = cfg.grid.clone().unwrap_or_else(|| th.b_grid.clone());
    if grid.is_empty() {
        return Err(FloodError::InvalidSpec("b grid is empty".into()));
    }
    let probe_model = fit_linear_probe(spec, th.fit_size, th.fit_steps, th.fit_learning_rate, cfg.seed)?;
    let probe = TheoremProbe {
        spec: *spec,
        probe: probe_model,
        loss: cfg.loss.unwrap_or(LossKind::Logistic),
        b: grid[0],
        n: th.n,
        n_draws: th.n_draws,
        oracle_size: th.oracle_size,
        seed: cfg.seed,
    };
    start(cfg)?;
    let mut rows = theorem_table(&probe, &grid)?;
    save_checkpoint(&cfg.out.join("probe.json"), &probe.probe)?;
    write_theorem_csv(&rows, &cfg.out.join("theorem.csv"))?;
    for r in &mut rows {
        r.r_hats.clear();
    }
    write_json(&cfg.out.join("theorem.json"), &rows)?;
    println!("R(g) = {:.6}", rows[0].true_risk);
    for r in &rows {
        println!(
            "b={:.3} gap={:+.3e} +/- {:.1e} Pr[R_hat<b]={:.3}{}",
            r.b,
            r.gap,
            r.ci_half_width,
            r.freq_below,
            if r.precondition { "" } else { " (b > R(g))" }
        );
    }
    Ok(())
}

fn cmd_flatness(cfg: &ExperimentConfig, checkpoints: Option<Vec<PathBuf>>) -> Result<()> {
    let data = load_data(cfg)?;
    let tc = train_config(cfg, Some((data.train.dim(), data.train.label_space())));
    let paths = checkpoints
        .map(|v| [v[0].clone(), v[1].clone(), v[2].clone()])
        .or_else(|| cfg.flatness.checkpoints.clone());
    start(cfg)?;
    let models = match paths {
        Some([a, b, c]) => ProbedModels {
            first_submersion: Some(load_checkpoint(&a)?),
            flooded_final: Some(load_checkpoint(&b)?),
            baseline_final: Some(load_checkpoint(&c)?),
        },
        None => {
            let seed = seeds::run_seed(cfg.seed, 0, 0);
            let flooded = train(&tc.clone().with_seed(seed), &data)?;
            let baseline = train(&tc.clone().with_flood_level(0.0).with_seed(seed), &data)?;
            ProbedModels {
                first_submersion: flooded.first_submersion.map(|s| s.params),
                flooded_final: Some(flooded.final_params),
                baseline_final: Some(baseline.final_params),
            }
        }
    };
    let radii = if cfg.flatness.radii.is_empty() {
        default_radii()
    } else {
        cfg.flatness.radii.clone()
    };
    let prof = flatness_profile(&models, &data.train, &data.test, tc.loss, &radii, cfg.flatness.direction_seed)?;
    prof.write_csv(&cfg.out.join("flatness.csv"))?;
    write_json(&cfg.out.join("flatness.json"), &prof)?;
    println!("wrote {}", cfg.out.join("flatness.csv").display());
    Ok(())
}

fn cmd_memorization(cfg: &ExperimentConfig, sweep: &Path) -> Result<()> {
    let res: SweepResult = read_json(sweep)?;
    start(cfg)?;
    let curve = memorization_curve(&res);
    curve.write_csv(&cfg.out.join("memorization.csv"))?;
    write_json(&cfg.out.join("memorization.json"), &curve)?;
    for p in &curve.points {
        println!(
            "b={:.3} train accuracy final {:.4} early stop {:.4} selected {}",
            p.b, p.mean_final_train_accuracy, p.mean_early_stop_train_accuracy, p.times_selected_final
        );
    }
    Ok(())
}

fn exit_code(e: &FloodError) -> u8 {
    match e {
        FloodError::RunFailed { source, .. } => exit_code(source),
        FloodError::Numeric(_) => 3,
        FloodError::Io { .. } | FloodError::Format { .. } | FloodError::Length { .. } | FloodError::MissingCheckpoint(_) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::VerifyTheorem => cmd_verify_theorem(&cfg),
        Command::Flatness { checkpoints } => cmd_flatness(&cfg, checkpoints),
        Command::Memorization { sweep } => cmd_memorization(&cfg, &sweep),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
