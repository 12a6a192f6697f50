//! Grid search, within-dataset k-fold, cross-domain and calibration protocols.
//!
//! Every comparison between correlation weights is paired: the fold plan,
//! per-fold seeds (and therefore initialisation, batch order and dropout) are
//! derived from the base seed only, never from ρ.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{LabelMatrix, PairMask, PredictionMatrix};
use crate::dataset::DatasetTable;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, CorrInput, MetricReport, DEFAULT_THRESHOLD};
use crate::model::{predict, MlpParams};
use crate::seeds::{derive_seed, stream};
use crate::synthgen::split_by_task;
use crate::trainer::{
    balance_resample, finetune, subject_kfold, train, BalancerConfig, EpochRecord, FoldPlan, TrainConfig,
};

/// Anything that maps features to class probabilities.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<PredictionMatrix>;
}

impl Predictor for MlpParams {
    fn predict(&self, x: ArrayView2<'_, f64>) -> Result<PredictionMatrix> {
        predict(self, x)
    }
}

pub struct Fitted<M> {
    pub model: M,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

/// Training strategy used by the protocols.
pub trait Learner: Sync {
    type Model: Predictor;

    fn fit(&self, train: &DatasetTable, val: &DatasetTable, cfg: &TrainConfig)
        -> Result<Fitted<Self::Model>>;

    fn finetune(
        &self,
        model: &Self::Model,
        data: &DatasetTable,
        cfg: &TrainConfig,
        epochs: usize,
    ) -> Result<Fitted<Self::Model>>;
}

/// The MLP head trained with [`train`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MlpLearner;

impl Learner for MlpLearner {
    type Model = MlpParams;

    fn fit(
        &self,
        train_set: &DatasetTable,
        val: &DatasetTable,
        cfg: &TrainConfig,
    ) -> Result<Fitted<MlpParams>> {
        let out = train(train_set, val, cfg)?;
        Ok(Fitted {
            model: out.params,
            history: out.history,
            best_epoch: out.best_epoch,
        })
    }

    fn finetune(
        &self,
        model: &MlpParams,
        data: &DatasetTable,
        cfg: &TrainConfig,
        epochs: usize,
    ) -> Result<Fitted<MlpParams>> {
        let out = finetune(model.clone(), data, cfg, epochs)?;
        Ok(Fitted {
            model: out.params,
            history: out.history,
            best_epoch: out.best_epoch,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub corr_input: CorrInput,
    /// Resample each training split with the label-set balancer.
    #[serde(default)]
    pub balance: Option<BalancerConfig>,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            threshold: DEFAULT_THRESHOLD,
            corr_input: CorrInput::Probabilities,
            balance: None,
        }
    }

    fn with_rho(&self, rho: f64) -> Result<Self> {
        let mut c = self.clone();
        c.train.loss = c.train.loss.with_rho(rho)?;
        Ok(c)
    }

    fn fold_train_config(&self, fold: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = fold_seed(self.train.seed, fold);
        t
    }
}

/// Seed of fold `fold` under base seed `base`; independent of ρ.
pub fn fold_seed(base: u64, fold: usize) -> u64 {
    derive_seed(base, &[stream::FOLD, fold as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub report: MetricReport,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rho: f64,
    pub folds: Vec<FoldResult>,
    pub macro_f1_mean: f64,
    /// Sample standard deviation (n − 1) across folds.
    pub macro_f1_std: f64,
    pub corr_distance_mean: f64,
    pub corr_distance_std: f64,
    pub plan: FoldPlan,
    pub config: ExperimentConfig,
}

impl ExperimentResult {
    fn assemble(rho: f64, folds: Vec<FoldResult>, plan: FoldPlan, config: ExperimentConfig) -> Self {
        let f1: Vec<f64> = folds.iter().map(|f| f.report.macro_f1).collect();
        let cd: Vec<f64> = folds.iter().map(|f| f.report.corr_distance).collect();
        let (macro_f1_mean, macro_f1_std) = mean_std(&f1);
        let (corr_distance_mean, corr_distance_std) = mean_std(&cd);
        Self {
            rho,
            folds,
            macro_f1_mean,
            macro_f1_std,
            corr_distance_mean,
            corr_distance_std,
            plan,
            config,
        }
    }

    pub const CSV_HEADER: &'static str =
        "rho,folds,macro_f1_mean,macro_f1_std,corr_distance_mean,corr_distance_std";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.rho,
            self.folds.len(),
            self.macro_f1_mean,
            self.macro_f1_std,
            self.corr_distance_mean,
            self.corr_distance_std
        )
    }
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Score `model` on `table`, optionally restricted to a class subset.
///
/// `columns` pairs a model output column with a table label column; the mask
/// is given over the model's classes.
fn score(
    model: &impl Predictor,
    table: &DatasetTable,
    columns: &[(usize, usize)],
    mask: &PairMask,
    cfg: &ExperimentConfig,
) -> Result<MetricReport> {
    let out_idx: Vec<usize> = columns.iter().map(|c| c.0).collect();
    let lab_idx: Vec<usize> = columns.iter().map(|c| c.1).collect();
    let yhat = model.predict(table.features().view())?;
    let yhat = PredictionMatrix::new(yhat.values().select(Axis(1), &out_idx))?;
    let y = LabelMatrix::new(table.labels().select(Axis(1), &lab_idx))?;
    let mask = mask.select(&out_idx)?;
    evaluate(
        &y,
        &yhat,
        &mask,
        cfg.train.loss.sigma_floor,
        cfg.threshold,
        cfg.corr_input,
    )
}

fn identity_columns(u: usize) -> Vec<(usize, usize)> {
    (0..u).map(|i| (i, i)).collect()
}

fn prepare_train(train: DatasetTable, cfg: &ExperimentConfig, seed: u64) -> Result<DatasetTable> {
    match &cfg.balance {
        Some(b) => balance_resample(&train, b, seed),
        None => Ok(train),
    }
}

/// Train the model of one fold.
fn fit_fold<L: Learner>(
    learner: &L,
    dataset: &DatasetTable,
    plan: &FoldPlan,
    fold: usize,
    cfg: &ExperimentConfig,
) -> Result<(Fitted<L::Model>, DatasetTable)> {
    let (tr, val) = plan.split(dataset, fold);
    let tcfg = cfg.fold_train_config(fold);
    let tr = prepare_train(tr, cfg, tcfg.seed)?;
    let fitted = learner.fit(&tr, &val, &tcfg)?;
    Ok((fitted, val))
}

/// Subject-wise k-fold training, scored on each held-out fold.
pub fn within_eval_with<L: Learner>(
    learner: &L,
    dataset: &DatasetTable,
    k: usize,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    cfg.train.validate()?;
    let plan = subject_kfold(dataset, k, cfg.train.seed)?;
    let u = dataset.space().len();
    let folds = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (fitted, val) = fit_fold(learner, dataset, &plan, fold, cfg)?;
            let report = score(
                &fitted.model,
                &val,
                &identity_columns(u),
                &cfg.train.loss.mask,
                cfg,
            )?;
            Ok(FoldResult {
                fold,
                report,
                best_epoch: fitted.best_epoch,
                history: fitted.history,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult::assemble(
        cfg.train.loss.rho,
        folds,
        plan,
        cfg.clone(),
    ))
}

pub fn within_eval(dataset: &DatasetTable, k: usize, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    within_eval_with(&MlpLearner, dataset, k, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub results: Vec<ExperimentResult>,
    /// ρ with the highest mean validation macro F1; ties go to the smaller ρ.
    pub best_rho: f64,
}

impl GridSearchResult {
    pub fn get(&self, rho: f64) -> Option<&ExperimentResult> {
        self.results.iter().find(|r| r.rho == rho)
    }
}

/// One k-fold run per ρ on a shared fold plan.
pub fn grid_search_with<L: Learner>(
    learner: &L,
    dataset: &DatasetTable,
    rhos: &[f64],
    k: usize,
    cfg: &ExperimentConfig,
) -> Result<GridSearchResult> {
    if rhos.is_empty() {
        return Err(Error::Config("grid search needs at least one rho".into()));
    }
    let cfgs = rhos
        .iter()
        .map(|&r| cfg.with_rho(r))
        .collect::<Result<Vec<_>>>()?;
    let results = cfgs
        .par_iter()
        .map(|c| within_eval_with(learner, dataset, k, c))
        .collect::<Result<Vec<_>>>()?;
    let best_rho = select_best_rho(&results);
    Ok(GridSearchResult { results, best_rho })
}

pub fn grid_search(
    dataset: &DatasetTable,
    rhos: &[f64],
    k: usize,
    cfg: &ExperimentConfig,
) -> Result<GridSearchResult> {
    grid_search_with(&MlpLearner, dataset, rhos, k, cfg)
}

fn select_best_rho(results: &[ExperimentResult]) -> f64 {
    let mut best = &results[0];
    for r in &results[1..] {
        if r.macro_f1_mean > best.macro_f1_mean || (r.macro_f1_mean == best.macro_f1_mean && r.rho < best.rho)
        {
            best = r;
        }
    }
    best.rho
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossResult {
    pub test_name: String,
    /// Class names evaluated (training ∩ test), in training order.
    pub classes: Vec<String>,
    pub result: ExperimentResult,
}

/// Train the k fold models on `train_set` and score each of them on every
/// full test table, restricted to the shared classes.
pub fn cross_eval_with<L: Learner>(
    learner: &L,
    train_set: &DatasetTable,
    tests: &[(String, DatasetTable)],
    k: usize,
    cfg: &ExperimentConfig,
) -> Result<Vec<CrossResult>> {
    cfg.train.validate()?;
    let mut columns = Vec::with_capacity(tests.len());
    for (name, t) in tests {
        let shared = train_set.space().intersection(t.space());
        if shared.is_empty() {
            return Err(Error::Config(format!(
                "test set `{name}` shares no classes with the training set"
            )));
        }
        if t.feature_dim() != train_set.feature_dim() {
            return Err(Error::Shape(format!(
                "test set `{name}` has {} features, training set has {}",
                t.feature_dim(),
                train_set.feature_dim()
            )));
        }
        columns.push(shared);
    }
    let plan = subject_kfold(train_set, k, cfg.train.seed)?;
    let per_fold = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (fitted, _) = fit_fold(learner, train_set, &plan, fold, cfg)?;
            tests
                .iter()
                .zip(&columns)
                .map(|((_, t), cols)| {
                    let report = score(&fitted.model, t, cols, &cfg.train.loss.mask, cfg)?;
                    Ok(FoldResult {
                        fold,
                        report,
                        best_epoch: fitted.best_epoch,
                        history: fitted.history.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(tests
        .iter()
        .zip(&columns)
        .enumerate()
        .map(|(ti, ((name, _), cols))| {
            let folds = per_fold.iter().map(|f| f[ti].clone()).collect();
            CrossResult {
                test_name: name.clone(),
                classes: cols
                    .iter()
                    .map(|&(i, _)| train_set.space().names()[i].clone())
                    .collect(),
                result: ExperimentResult::assemble(cfg.train.loss.rho, folds, plan.clone(), cfg.clone()),
            }
        })
        .collect())
}

pub fn cross_eval(
    train_set: &DatasetTable,
    tests: &[(String, DatasetTable)],
    k: usize,
    cfg: &ExperimentConfig,
) -> Result<Vec<CrossResult>> {
    cross_eval_with(&MlpLearner, train_set, tests, k, cfg)
}

pub const DEFAULT_FINETUNE_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub task: String,
    pub rho: f64,
    pub before: MetricReport,
    pub after: MetricReport,
    pub finetune_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
    pub base_history: Vec<EpochRecord>,
    pub finetune_history: Vec<EpochRecord>,
}

impl CalibrationResult {
    pub const CSV_HEADER: &'static str =
        "task,rho,macro_f1_before,macro_f1_after,corr_distance_before,corr_distance_after";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.task,
            self.rho,
            self.before.macro_f1,
            self.after.macro_f1,
            self.before.corr_distance,
            self.after.corr_distance
        )
    }
}

/// Split subjects of `table` into two halves (first half rounded up).
fn subject_halves(table: &DatasetTable, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut subjects = table.unique_subjects();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SPLIT]));
    subjects.shuffle(&mut rng);
    let cut = subjects.len().div_ceil(2);
    let b = subjects.split_off(cut);
    let mut a = subjects;
    a.sort_unstable();
    let mut b = b;
    b.sort_unstable();
    (a, b)
}

/// Leave `task_name` out, train on the rest, then finetune on half of the
/// task's subjects and score the other half before and after.
pub fn calibrate_with<L: Learner>(
    learner: &L,
    base: &DatasetTable,
    task_name: &str,
    cfg: &ExperimentConfig,
    finetune_epochs: usize,
) -> Result<CalibrationResult> {
    cfg.train.validate()?;
    let (rest, only) = split_by_task(base, task_name)?;
    if only.unique_subjects().len() < 2 {
        return Err(Error::Config(format!(
            "task `{task_name}` needs at least 2 subjects for calibration"
        )));
    }
    // base model: hold one of up to five subject folds out for checkpointing
    let k = rest.unique_subjects().len().min(5);
    let plan = subject_kfold(&rest, k, cfg.train.seed)?;
    let (fitted, _) = fit_fold(learner, &rest, &plan, 0, cfg)?;

    let (half_a, half_b) = subject_halves(&only, cfg.train.seed);
    let tune = only.select_rows(&only.rows_for_subjects(&half_a));
    let test = only.select_rows(&only.rows_for_subjects(&half_b));
    let cols = identity_columns(base.space().len());
    let mask = &cfg.train.loss.mask;
    let before = score(&fitted.model, &test, &cols, mask, cfg)?;

    let mut tcfg = cfg.train.clone();
    tcfg.seed = derive_seed(cfg.train.seed, &[stream::SPLIT, 1]);
    let (after, finetune_history) = if finetune_epochs == 0 {
        (before.clone(), Vec::new())
    } else {
        let tuned = learner.finetune(&fitted.model, &tune, &tcfg, finetune_epochs)?;
        (score(&tuned.model, &test, &cols, mask, cfg)?, tuned.history)
    };
    Ok(CalibrationResult {
        task: task_name.to_string(),
        rho: cfg.train.loss.rho,
        before,
        after,
        finetune_subjects: half_a,
        test_subjects: half_b,
        base_history: fitted.history,
        finetune_history,
    })
}

pub fn calibrate(
    base: &DatasetTable,
    task_name: &str,
    cfg: &ExperimentConfig,
    finetune_epochs: usize,
) -> Result<CalibrationResult> {
    calibrate_with(&MlpLearner, base, task_name, cfg, finetune_epochs)
}
