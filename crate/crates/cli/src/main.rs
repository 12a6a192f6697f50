use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cooc_core::correlation::{correlation_matrix, select_correlated_classes, upper_triangle_mask, PairMask};
use cooc_core::dataset::DatasetTable;
use cooc_core::experiments::{
    calibrate, cross_eval, grid_search, within_eval, ExperimentConfig, DEFAULT_FINETUNE_EPOCHS,
};
use cooc_core::gradcheck::{self, GradCheckConfig};
use cooc_core::io;
use cooc_core::loss::LossConfig;
use cooc_core::metrics::{evaluate, CorrInput, DEFAULT_THRESHOLD};
use cooc_core::model::predict;
use cooc_core::synthgen::{generate, GeneratorSpec};
use cooc_core::trainer::{balance_resample, subject_kfold, train, BalancerConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "cooc",
    version,
    about = "Correlation-constrained multi-label training on synthetic AU data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset (CSV plus JSON spec sidecar)
    Gen(GenArgs),
    /// Train a single model and write its checkpoint and history
    Train(DataArgs),
    /// k-fold evaluation for each ρ in a grid
    Gridsearch(GridArgs),
    /// Subject-wise k-fold evaluation on one dataset
    Within(DataArgs),
    /// Train on one dataset, evaluate on others
    Crosseval(CrossArgs),
    /// Leave-one-task-out calibration by finetuning
    Calibrate(CalibrateArgs),
    /// Correlation matrix of a dataset or prediction file
    Corrmat(CorrmatArgs),
    /// Finite-difference check of the analytic gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Parent of the run directory
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// JSON file with run settings; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Oversample rare label sets in every training split
    #[arg(long)]
    balance: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Generator spec JSON (defaults to the desk-scale spec)
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated ρ values
    #[arg(long, value_delimiter = ',')]
    rhos: Option<Vec<f64>>,
}

#[derive(Args)]
struct CrossArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Test dataset CSVs; each is named after its file stem
    #[arg(long = "test", required = true)]
    tests: Vec<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Tasks to hold out (defaults to every task)
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
}

#[derive(Args)]
struct CorrmatArgs {
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dataset CSV or prediction CSV
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

/// Optional settings file; every field may be overridden by a flag.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    rho: Option<f64>,
    rhos: Option<Vec<f64>>,
    k: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    clip_value: Option<f64>,
    batch_size: Option<usize>,
    hidden: Option<usize>,
    dropout_rate: Option<f64>,
    threshold: Option<f64>,
    corr_input: Option<CorrInput>,
    balance: Option<BalancerConfig>,
    finetune_epochs: Option<usize>,
    /// Restrict the penalty to pairs among classes whose dataset-level
    /// |correlation| reaches this value with some other class.
    select_threshold: Option<f64>,
    excluded_pairs: Option<Vec<(String, String)>>,
    tasks: Option<Vec<String>>,
    generator: Option<GeneratorSpec>,
}

fn set<T>(dst: &mut Option<T>, src: Option<T>) {
    if src.is_some() {
        *dst = src;
    }
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => io::read_json(p).with_context(|| format!("reading config {}", p.display())),
        }
    }

    fn apply(&mut self, common: &Common, flags: &TrainFlags) {
        set(&mut self.seed, common.seed);
        set(&mut self.rho, common.rho);
        set(&mut self.k, flags.k);
        set(&mut self.epochs, flags.epochs);
        set(&mut self.learning_rate, flags.learning_rate);
        set(&mut self.batch_size, flags.batch_size);
        set(&mut self.hidden, flags.hidden);
        set(&mut self.dropout_rate, flags.dropout);
        if flags.balance && self.balance.is_none() {
            self.balance = Some(BalancerConfig::default());
        }
    }

    fn k(&self) -> usize {
        self.k.unwrap_or(5)
    }

    fn mask(&self, data: &DatasetTable) -> Result<PairMask> {
        let excluded = self.excluded_pairs.clone().unwrap_or_default();
        let mut mask = upper_triangle_mask(data.space(), &excluded)?;
        if let Some(t) = self.select_threshold {
            let gt = correlation_matrix(data.labels().view(), cooc_core::correlation::DEFAULT_SIGMA_FLOOR)?;
            let keep = select_correlated_classes(&gt, t);
            let mut grid = mask.grid().clone();
            for ((a, b), v) in grid.indexed_iter_mut() {
                *v = *v && keep.contains(&a) && keep.contains(&b);
            }
            mask = PairMask::from_grid(grid)?;
        }
        Ok(mask)
    }

    fn experiment(&self, data: &DatasetTable) -> Result<ExperimentConfig> {
        let loss =
            LossConfig::new(self.rho.unwrap_or(0.0), data.space().len())?.with_mask(self.mask(data)?)?;
        let mut t = TrainConfig::new(loss);
        t.seed = self.seed.unwrap_or(0);
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.clip_value {
            t.clip_value = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.hidden {
            t.hidden = v;
        }
        if let Some(v) = self.dropout_rate {
            t.dropout_rate = v;
        }
        t.validate()?;
        let mut cfg = ExperimentConfig::new(t);
        cfg.threshold = self.threshold.unwrap_or(DEFAULT_THRESHOLD);
        cfg.corr_input = self.corr_input.unwrap_or_default();
        cfg.balance = self.balance;
        Ok(cfg)
    }
}

/// `<out>/<command>-<timestamp>/`, suffixed on collision.
fn run_dir(out: &Path, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = out.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    loop {
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
}

fn load(path: &Path) -> Result<DatasetTable> {
    io::read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn prepare(args: &DataArgs) -> Result<(FileConfig, DatasetTable)> {
    let mut fc = FileConfig::load(args.common.config.as_deref())?;
    fc.apply(&args.common, &args.train);
    let data = load(&args.data)?;
    Ok((fc, data))
}

fn snapshot(dir: &Path, fc: &FileConfig, cfg: &ExperimentConfig) -> Result<()> {
    io::write_json(
        &serde_json::json!({ "settings": fc, "experiment": cfg }),
        &dir.join("config.json"),
    )?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<PathBuf> {
    let mut fc = FileConfig::load(a.common.config.as_deref())?;
    if a.common.seed.is_some() {
        fc.seed = a.common.seed;
    }
    let mut spec = match (&a.spec, fc.generator.take()) {
        (Some(p), _) => {
            io::read_json::<GeneratorSpec>(p).with_context(|| format!("reading {}", p.display()))?
        }
        (None, Some(s)) => s,
        (None, None) => GeneratorSpec::desk_default(0),
    };
    if let Some(s) = fc.seed {
        spec.seed = s;
    }
    let table = generate(&spec)?;
    let dir = run_dir(&a.common.out, "gen")?;
    io::write_dataset(&table, &dir.join("dataset.csv"))?;
    io::write_json(&spec, &dir.join("spec.json"))?;
    Ok(dir)
}

fn cmd_train(a: DataArgs) -> Result<PathBuf> {
    let (fc, data) = prepare(&a)?;
    let cfg = fc.experiment(&data)?;
    let k = data.unique_subjects().len().min(fc.k());
    let plan = subject_kfold(&data, k, cfg.train.seed)?;
    let (tr, val) = plan.split(&data, 0);
    let tr = match &cfg.balance {
        Some(b) => balance_resample(&tr, b, cfg.train.seed)?,
        None => tr,
    };
    let out = train(&tr, &val, &cfg.train)?;
    let yhat = predict(&out.params, val.features().view())?;
    let report = evaluate(
        &val.label_matrix(),
        &yhat,
        &cfg.train.loss.mask,
        cfg.train.loss.sigma_floor,
        cfg.threshold,
        cfg.corr_input,
    )?;

    let dir = run_dir(&a.common.out, "train")?;
    snapshot(&dir, &fc, &cfg)?;
    let ckpt = io::Checkpoint::new(out.params, data.space(), cfg.train.seed)?;
    io::write_checkpoint(&ckpt, &dir.join("checkpoint.json"))?;
    io::write_history(&out.history, &dir.join("history.csv"))?;
    io::write_predictions(&val, &yhat, &dir.join("predictions.csv"))?;
    io::write_json(&report, &dir.join("metrics.json"))?;
    Ok(dir)
}

fn cmd_within(a: DataArgs) -> Result<PathBuf> {
    let (fc, data) = prepare(&a)?;
    let cfg = fc.experiment(&data)?;
    let r = within_eval(&data, fc.k(), &cfg)?;
    let dir = run_dir(&a.common.out, "within")?;
    snapshot(&dir, &fc, &cfg)?;
    io::write_json(&r, &dir.join("results.json"))?;
    io::write_summary_csv(std::slice::from_ref(&r), &dir.join("summary.csv"))?;
    io::write_folds_csv(std::slice::from_ref(&r), &dir.join("folds.csv"))?;
    Ok(dir)
}

fn cmd_gridsearch(a: GridArgs) -> Result<PathBuf> {
    let (mut fc, data) = prepare(&a.data)?;
    if a.rhos.is_some() {
        fc.rhos = a.rhos;
    }
    let rhos = fc.rhos.clone().unwrap_or_else(|| vec![0.0, 0.3, 0.45, 0.6, 0.8]);
    let cfg = fc.experiment(&data)?;
    let g = grid_search(&data, &rhos, fc.k(), &cfg)?;
    let dir = run_dir(&a.data.common.out, "gridsearch")?;
    snapshot(&dir, &fc, &cfg)?;
    io::write_json(&g, &dir.join("results.json"))?;
    io::write_summary_csv(&g.results, &dir.join("summary.csv"))?;
    io::write_folds_csv(&g.results, &dir.join("folds.csv"))?;
    println!("best rho: {}", g.best_rho);
    Ok(dir)
}

fn cmd_crosseval(a: CrossArgs) -> Result<PathBuf> {
    let (fc, data) = prepare(&a.data)?;
    let cfg = fc.experiment(&data)?;
    let mut tests = Vec::new();
    for p in &a.tests {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        tests.push((name, load(p)?));
    }
    let r = cross_eval(&data, &tests, fc.k(), &cfg)?;
    let dir = run_dir(&a.data.common.out, "crosseval")?;
    snapshot(&dir, &fc, &cfg)?;
    io::write_json(&r, &dir.join("results.json"))?;
    io::write_cross_csv(&r, &dir.join("summary.csv"))?;
    Ok(dir)
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<PathBuf> {
    let (mut fc, data) = prepare(&a.data)?;
    if a.tasks.is_some() {
        fc.tasks = a.tasks;
    }
    if a.finetune_epochs.is_some() {
        fc.finetune_epochs = a.finetune_epochs;
    }
    let tasks = fc.tasks.clone().unwrap_or_else(|| data.task_names().to_vec());
    let epochs = fc.finetune_epochs.unwrap_or(DEFAULT_FINETUNE_EPOCHS);
    let cfg = fc.experiment(&data)?;
    let results = tasks
        .iter()
        .map(|t| calibrate(&data, t, &cfg, epochs))
        .collect::<cooc_core::Result<Vec<_>>>()?;
    let dir = run_dir(&a.data.common.out, "calibrate")?;
    snapshot(&dir, &fc, &cfg)?;
    io::write_json(&results, &dir.join("results.json"))?;
    io::write_calibration_csv(&results, &dir.join("summary.csv"))?;
    Ok(dir)
}

fn cmd_corrmat(a: CorrmatArgs) -> Result<PathBuf> {
    let ctx = || format!("reading {}", a.input.display());
    let (space, matrix) = if io::is_dataset_csv(&a.input).with_context(ctx)? {
        let t = load(&a.input)?;
        let m = correlation_matrix(t.labels().view(), cooc_core::correlation::DEFAULT_SIGMA_FLOOR)?;
        (t.space().clone(), m)
    } else {
        let (s, p) = io::read_predictions(&a.input).with_context(ctx)?;
        let m = correlation_matrix(p.view(), cooc_core::correlation::DEFAULT_SIGMA_FLOOR)?;
        (s, m)
    };
    let dir = run_dir(&a.out, "corrmat")?;
    io::write_correlation_csv(&space, &matrix, &dir.join("correlation.csv"))?;
    io::write_correlation_json(&space, &matrix, &dir.join("correlation.json"))?;
    Ok(dir)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg = GradCheckConfig::new(a.seed);
    cfg.instances = a.instances;
    let r = gradcheck::run(&cfg)?;
    println!(
        "max relative error {:.3e} over {} instances ({} parameters, {} redrawn)",
        r.max_relative_error, r.instances, r.parameters_checked, r.redrawn
    );
    if r.max_relative_error.is_nan() || r.max_relative_error >= 1e-4 {
        bail!(
            "gradient check failed: max relative error {:.3e}",
            r.max_relative_error
        );
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("COOC_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("COOC_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("COOC_THREADS must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let dir = match cli.command {
        Command::Gen(a) => cmd_gen(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Gridsearch(a) => cmd_gridsearch(a)?,
        Command::Within(a) => cmd_within(a)?,
        Command::Crosseval(a) => cmd_crosseval(a)?,
        Command::Calibrate(a) => cmd_calibrate(a)?,
        Command::Corrmat(a) => cmd_corrmat(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
