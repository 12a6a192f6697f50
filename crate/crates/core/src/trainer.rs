//! Optimisation loop, subject-wise folds and label-set balancing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{LabelMatrix, LabelSpace};
use crate::dataset::DatasetTable;
use crate::error::{Error, Result};
use crate::loss::{loss_and_gradient, LossConfig, LossValue};
use crate::model::{backward, forward, init_params, MlpParams, ParamGrads, DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::seeds::{derive_seed, stream};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_CLIP_VALUE: f64 = 1.0;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_EPOCHS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub clip_value: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, clip_value: f64) -> Self {
        Self {
            learning_rate,
            clip_value,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::new(DEFAULT_LEARNING_RATE, DEFAULT_CLIP_VALUE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_value: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub dropout_rate: f64,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            clip_value: DEFAULT_CLIP_VALUE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            dropout_rate: DEFAULT_DROPOUT,
            loss,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.clip_value)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.clip_value > 0.0) {
            return Err(Error::Config(
                "learning_rate and clip_value must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(p: &MlpParams) -> Self {
        Self::new(&p.tensors().map(<[f64]>::len))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Clip each gradient element into ±clip_value, then apply one
    /// bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], cfg: &AdamConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i].clamp(-cfg.clip_value, cfg.clip_value);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

/// One Adam step on the MLP parameters.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &ParamGrads, cfg: &AdamConfig) {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    state.update(&mut p, &g, cfg);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossValue,
    pub val: Option<LossValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: Vec<EpochRecord>,
    /// Epoch (0-based) whose parameters were kept, `None` if no epoch ran.
    pub best_epoch: Option<usize>,
}

/// Accumulates sample-weighted loss means.
#[derive(Default)]
struct LossMean {
    total: f64,
    bce: f64,
    corr: f64,
    weight: f64,
}

impl LossMean {
    fn add(&mut self, v: &LossValue, n: usize) {
        let w = n as f64;
        self.total += w * v.total;
        self.bce += w * v.bce_part;
        self.corr += w * v.corr_part;
        self.weight += w;
    }

    fn finish(&self) -> LossValue {
        LossValue {
            total: self.total / self.weight,
            bce_part: self.bce / self.weight,
            corr_part: self.corr / self.weight,
        }
    }
}

/// Row index chunks of `batch_size`; a trailing chunk of one row is dropped.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2).collect()
}

/// Per-epoch sample order for a run seeded with `seed`.
pub fn epoch_orders(n: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SHUFFLE]));
    let mut order: Vec<usize> = (0..n).collect();
    (0..epochs)
        .map(|_| {
            order.shuffle(&mut rng);
            order.clone()
        })
        .collect()
}

fn check_table(t: &DatasetTable, what: &str) -> Result<()> {
    if t.len() < 2 {
        return Err(Error::Config(format!(
            "{what} set needs at least 2 rows, has {}",
            t.len()
        )));
    }
    Ok(())
}

/// Eval-mode loss over a table in fixed order, sample-weighted over batches.
pub fn evaluate_loss(params: &MlpParams, table: &DatasetTable, cfg: &TrainConfig) -> Result<LossValue> {
    check_table(table, "evaluation")?;
    let order: Vec<usize> = (0..table.len()).collect();
    let mut acc = LossMean::default();
    for chunk in batches(&order, cfg.batch_size) {
        let part = table.select_rows(chunk);
        let (yhat, _) = forward(params, part.features().view(), false, 0)?;
        let (v, _) = loss_and_gradient(&part.label_matrix(), &yhat, &cfg.loss)?;
        acc.add(&v, chunk.len());
    }
    Ok(acc.finish())
}

fn check_compat(params: &MlpParams, t: &DatasetTable, space: &LabelSpace) -> Result<()> {
    if t.space() != space {
        return Err(Error::Schema("label spaces of the two sets differ".into()));
    }
    if t.feature_dim() != params.input_dim() || space.len() != params.output_dim() {
        return Err(Error::Shape(format!(
            "table has D={} U={}, model expects D={} U={}",
            t.feature_dim(),
            space.len(),
            params.input_dim(),
            params.output_dim()
        )));
    }
    Ok(())
}

/// Run `epochs` epochs from `params`. With a validation set, the parameters
/// with the lowest validation total are returned; otherwise the final ones.
pub fn train_from(
    mut params: MlpParams,
    train_set: &DatasetTable,
    val: Option<&DatasetTable>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_table(train_set, "training")?;
    check_compat(&params, train_set, train_set.space())?;
    if let Some(v) = val {
        check_table(v, "validation")?;
        check_compat(&params, v, train_set.space())?;
    }
    let adam = cfg.adam();
    let mut state = AdamState::for_params(&params);
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, MlpParams)> = None;

    for (epoch, order) in epoch_orders(train_set.len(), epochs, cfg.seed)
        .into_iter()
        .enumerate()
    {
        let mut acc = LossMean::default();
        for (b, chunk) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let x = train_set.features().select(ndarray::Axis(0), chunk);
            let y = LabelMatrix::new(train_set.labels().select(ndarray::Axis(0), chunk))?;
            let dseed = derive_seed(cfg.seed, &[stream::DROPOUT, epoch as u64, b as u64]);
            let (yhat, cache) = forward(&params, x.view(), true, dseed)?;
            let (value, grad) = loss_and_gradient(&y, &yhat, &cfg.loss)?;
            if !value.total.is_finite() || grad.values().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch, batch: b });
            }
            let grads = backward(&params, &cache, &grad)?;
            adam_step(&mut state, &mut params, &grads, &adam);
            acc.add(&value, chunk.len());
        }
        let train_loss = acc.finish();
        let val_loss = val.map(|v| evaluate_loss(&params, v, cfg)).transpose()?;
        if let Some(vl) = val_loss {
            if !vl.total.is_finite() {
                return Err(Error::NonFinite { epoch, batch: 0 });
            }
            if best.as_ref().is_none_or(|(b, _, _)| vl.total < *b) {
                best = Some((vl.total, epoch, params.clone()));
            }
        }
        history.push(EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        });
    }

    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => {
            let last = history.last().map(|r| r.epoch);
            (params, last)
        }
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

/// Fresh model trained on `train_set`, checkpointed on `val`.
pub fn train(train_set: &DatasetTable, val: &DatasetTable, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = init_params(
        train_set.feature_dim(),
        cfg.hidden,
        train_set.space().len(),
        derive_seed(cfg.seed, &[stream::INIT]),
    )?
    .with_dropout(cfg.dropout_rate)?;
    train_from(params, train_set, Some(val), cfg, cfg.epochs)
}

/// Continue training `params` for a fixed number of epochs, keeping the final
/// parameters.
pub fn finetune(
    params: MlpParams,
    data: &DatasetTable,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TrainOutcome> {
    train_from(params, data, None, cfg, epochs)
}

/// Subjects assigned to each of k folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<u32>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn validation_subjects(&self, fold: usize) -> &[u32] {
        &self.folds[fold]
    }

    pub fn training_subjects(&self, fold: usize) -> Vec<u32> {
        let mut s: Vec<u32> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        s.sort_unstable();
        s
    }

    /// (training rows, validation rows) of `table` for `fold`.
    pub fn split(&self, table: &DatasetTable, fold: usize) -> (DatasetTable, DatasetTable) {
        let train = table.rows_for_subjects(&self.training_subjects(fold));
        let val = table.rows_for_subjects(self.validation_subjects(fold));
        (table.select_rows(&train), table.select_rows(&val))
    }
}

/// Shuffle subjects with `seed` and deal them round-robin into `k` folds.
pub fn subject_kfold(dataset: &DatasetTable, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut subjects = dataset.unique_subjects();
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if subjects.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::FOLD]));
    subjects.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, s) in subjects.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    Ok(FoldPlan { folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalancerConfig {
    /// Relative group-size deficit tolerated before a group counts as balanced.
    pub lambda_weight: f64,
    /// Maximum number of duplicate draws.
    pub iterations: usize,
    /// Maximum number of times one sample may appear in the output.
    pub max_occurrence: usize,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            lambda_weight: 0.00001,
            iterations: 4000,
            max_occurrence: 6,
        }
    }
}

/// Greedy oversampling of unique label sets toward the size of the largest
/// set. The smallest under-filled set gets the next duplicate, drawn
/// uniformly from its members still below `max_occurrence`. Duplicates are
/// appended after the original rows.
pub fn balance_resample(dataset: &DatasetTable, cfg: &BalancerConfig, seed: u64) -> Result<DatasetTable> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot balance an empty dataset".into()));
    }
    if cfg.max_occurrence == 0 || !(cfg.lambda_weight > 0.0) {
        return Err(Error::Config("balancer parameters must be positive".into()));
    }
    let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for (r, row) in dataset.labels().rows().into_iter().enumerate() {
        let key: Vec<u8> = row.iter().map(|&v| v as u8).collect();
        groups.entry(key).or_default().push(r);
    }
    let members: Vec<Vec<usize>> = groups.into_values().collect();
    let target = members.iter().map(Vec::len).max().unwrap_or(0);
    let tolerance = cfg.lambda_weight * target as f64;
    let mut size: Vec<usize> = members.iter().map(Vec::len).collect();
    let mut occurrence = vec![1usize; dataset.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::BALANCE]));
    let mut rows: Vec<usize> = (0..dataset.len()).collect();

    for _ in 0..cfg.iterations {
        let pick = (0..members.len())
            .filter(|&g| (target - size[g]) as f64 > tolerance)
            .filter(|&g| members[g].iter().any(|&r| occurrence[r] < cfg.max_occurrence))
            .min_by_key(|&g| size[g]);
        let Some(g) = pick else { break };
        let open: Vec<usize> = members[g]
            .iter()
            .copied()
            .filter(|&r| occurrence[r] < cfg.max_occurrence)
            .collect();
        let r = open[rng.random_range(0..open.len())];
        occurrence[r] += 1;
        size[g] += 1;
        rows.push(r);
    }
    Ok(dataset.select_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::LabelSpace;
    use ndarray::Array2;

    fn table_from_labels(labels: Vec<[f64; 2]>, subjects: Vec<u32>) -> DatasetTable {
        let m = labels.len();
        let flat: Vec<f64> = labels.iter().flatten().copied().collect();
        DatasetTable::new(
            Array2::from_shape_fn((m, 2), |(i, j)| (i * 2 + j) as f64 * 0.01),
            Array2::from_shape_vec((m, 2), flat).unwrap(),
            subjects,
            vec![0; m],
            vec![0; m],
            vec!["t".into()],
            LabelSpace::new(["a", "b"]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(&[3]);
        st.update(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0][..]], &AdamConfig::default());
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_clips_before_moments() {
        let mut p = [0.0];
        let mut st = AdamState::new(&[1]);
        st.update(&mut [&mut p[..]], &[&[5.0][..]], &AdamConfig::default());
        assert!((st.first_moments()[0][0] - 0.1).abs() < 1e-15);
        assert!((st.second_moments()[0][0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig::default();
        let mut p = [0.0];
        let mut st = AdamState::new(&[1]);
        let mut last = 0.0;
        for _ in 0..20_000 {
            let before = p[0];
            st.update(&mut [&mut p[..]], &[&[0.3][..]], &cfg);
            last = before - p[0];
        }
        // |m̂| / sqrt(v̂) → 1 for a constant gradient
        assert!(
            (last - cfg.learning_rate).abs() < 1e-3 * cfg.learning_rate,
            "{last}"
        );
    }

    #[test]
    fn kfold_partitions_subjects() {
        let t = table_from_labels(vec![[1.0, 0.0]; 20], (0..20).map(|i| i / 2).collect());
        let plan = subject_kfold(&t, 5, 1).unwrap();
        assert_eq!(plan.k(), 5);
        assert!(plan.folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<u32> = plan.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for f in 0..5 {
            let tr = plan.training_subjects(f);
            assert!(plan.validation_subjects(f).iter().all(|s| !tr.contains(s)));
            let (a, b) = plan.split(&t, f);
            assert_eq!(a.len() + b.len(), 20);
        }
        assert_eq!(plan, subject_kfold(&t, 5, 1).unwrap());
        assert!(subject_kfold(&t, 11, 1).is_err());
    }

    #[test]
    fn balancer_uniform_input_is_unchanged() {
        let t = table_from_labels(vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]], vec![0; 4]);
        let b = balance_resample(&t, &BalancerConfig::default(), 3).unwrap();
        assert_eq!(b, t);
    }

    #[test]
    fn balancer_respects_cap() {
        let mut labels = vec![[1.0, 0.0]; 100];
        labels.extend(vec![[0.0, 1.0]; 10]);
        let t = table_from_labels(labels, vec![0; 110]);
        let b = balance_resample(&t, &BalancerConfig::default(), 3).unwrap();
        let minority = b.labels().rows().into_iter().filter(|r| r[1] == 1.0).count();
        assert_eq!(minority, 60);
        assert_eq!(b.len(), 160);
        assert_eq!(b, balance_resample(&t, &BalancerConfig::default(), 3).unwrap());

        let few = BalancerConfig {
            iterations: 7,
            ..BalancerConfig::default()
        };
        assert_eq!(balance_resample(&t, &few, 3).unwrap().len(), 117);
    }

    #[test]
    fn batching_drops_singleton_tail() {
        let order: Vec<usize> = (0..129).collect();
        let b = batches(&order, 64);
        assert_eq!(b.len(), 2);
        let order: Vec<usize> = (0..130).collect();
        assert_eq!(batches(&order, 64).len(), 3);
    }

    #[test]
    fn config_rejects_tiny_batches() {
        let mut cfg = TrainConfig::new(LossConfig::new(0.0, 2).unwrap());
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
    }
}
